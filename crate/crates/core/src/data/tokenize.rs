/// Lowercases, splits on whitespace and emits every non-alphanumeric
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars().flat_map(char::to_lowercase) {
            if ch.is_alphanumeric() {
                word.push(ch);
            } else if !ch.is_whitespace() {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}
