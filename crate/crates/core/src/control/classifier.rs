//! Sentiment labelers for generated text.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::checkpoint;
use crate::control::SENTIMENT_RANGE;
use crate::data::synth::SENTIMENT_LEXICON;
use crate::data::{Example, Vocabulary};
use crate::error::{Error, Result};
use crate::train::optim::{Optimizer, OptimizerConfig};

const CLASSES: usize = 5;

pub trait SentimentClassifier: Send + Sync {
    /// Rating in `1..=5`.
    fn predict(&self, tokens: &[String]) -> Result<i64>;
}

/// Exact scorer: `3 + clamp(sum of word scores, -2, 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LexiconOracle {
    scores: HashMap<String, i64>,
}

impl LexiconOracle {
    pub fn new<'a>(entries: impl IntoIterator<Item = (&'a str, i64)>) -> Self {
        Self {
            scores: entries.into_iter().map(|(w, s)| (w.to_string(), s)).collect(),
        }
    }

    /// The lexicon used by the synthetic sentiment corpus.
    pub fn synthetic() -> Self {
        Self::new(SENTIMENT_LEXICON.iter().copied())
    }

    pub fn rate(&self, tokens: &[String]) -> i64 {
        let sum: i64 = tokens.iter().filter_map(|t| self.scores.get(t)).sum();
        3 + sum.clamp(-2, 2)
    }
}

impl SentimentClassifier for LexiconOracle {
    fn predict(&self, tokens: &[String]) -> Result<i64> {
        if tokens.is_empty() {
            return Err(Error::Data("cannot rate an empty sequence".into()));
        }
        Ok(self.rate(tokens))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagConfig {
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BagConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            epochs: 10,
            batch_size: 32,
            lr: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct BagHeader {
    kind: String,
    dim: usize,
    vocab: Vocabulary,
}

const HEADER_KIND: &str = "bag_classifier";

/// Mean-pooled token embeddings followed by a linear softmax over the
/// five ratings.
#[derive(Clone, Debug)]
pub struct BagClassifier {
    vocab: Vocabulary,
    dim: usize,
    store: ParamStore,
    emb: ParamId,
    w: ParamId,
    b: ParamId,
}

impl BagClassifier {
    fn init(vocab: Vocabulary, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb = store.add("clf.emb", Tensor::uniform(&[vocab.len(), dim], 0.1, &mut rng))?;
        let bound = 1.0 / (dim as f64).sqrt();
        let w = store.add("clf.w", Tensor::uniform(&[dim, CLASSES], bound, &mut rng))?;
        let b = store.add("clf.b", Tensor::zeros(&[CLASSES]))?;
        Ok(Self { vocab, dim, store, emb, w, b })
    }

    fn bind(vocab: Vocabulary, dim: usize, store: ParamStore) -> Result<Self> {
        let get = |n: &str| store.id(n).ok_or_else(|| Error::Config(format!("classifier checkpoint lacks {n}")));
        let (emb, w, b) = (get("clf.emb")?, get("clf.w")?, get("clf.b")?);
        if store.get(emb).shape() != [vocab.len(), dim] || store.get(w).shape() != [dim, CLASSES] {
            return Err(Error::Config("classifier checkpoint shapes disagree with its header".into()));
        }
        Ok(Self { vocab, dim, store, emb, w, b })
    }

    pub fn train(examples: &[Example], cfg: &BagConfig) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Data("classifier needs at least one example".into()));
        }
        let vocab = Vocabulary::build(examples.iter().map(|e| e.target.as_slice()), 1);
        let mut model = Self::init(vocab, cfg.dim, cfg.seed)?;
        let docs: Vec<(Vec<usize>, usize)> = examples
            .iter()
            .filter(|e| !e.target.is_empty())
            .map(|e| {
                SENTIMENT_RANGE.check(e.c)?;
                Ok((model.vocab.encode(&e.target), (e.c - SENTIMENT_RANGE.lo) as usize))
            })
            .collect::<Result<_>>()?;
        let mut opt = Optimizer::new(
            OptimizerConfig {
                lr: cfg.lr,
                ..Default::default()
            },
            &model.store,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let mut order: Vec<usize> = (0..docs.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let ids: Vec<&[usize]> = chunk.iter().map(|&i| docs[i].0.as_slice()).collect();
                let gold: Vec<Option<usize>> = chunk.iter().map(|&i| Some(docs[i].1)).collect();
                let mut g = Graph::new();
                let logits = model.logits(&mut g, &ids)?;
                let loss = g.cross_entropy(logits, &gold)?;
                let grads = g.backward(loss)?;
                model.store.zero_grad();
                g.accumulate_param_grads(&grads, &mut model.store);
                opt.step(&mut model.store);
            }
        }
        model.store.zero_grad();
        Ok(model)
    }

    fn logits(&self, g: &mut Graph, docs: &[&[usize]]) -> Result<Var> {
        let total: usize = docs.iter().map(|d| d.len()).sum();
        let mut pool = vec![0.0; docs.len() * total];
        let mut flat = Vec::with_capacity(total);
        for (i, d) in docs.iter().enumerate() {
            if d.is_empty() {
                return Err(Error::Data("cannot classify an empty sequence".into()));
            }
            for &id in d.iter() {
                pool[i * total + flat.len()] = 1.0 / d.len() as f64;
                flat.push(id);
            }
        }
        let table = g.param(&self.store, self.emb);
        let e = g.embedding(table, &flat)?;
        let p = g.constant(&[docs.len(), total], pool)?;
        let pooled = g.matmul(p, e)?;
        let w = g.param(&self.store, self.w);
        let b = g.param(&self.store, self.b);
        let z = g.matmul(pooled, w)?;
        g.add_bias(z, b)
    }

    /// Class probabilities for ratings `1..=5`.
    pub fn probabilities(&self, tokens: &[String]) -> Result<Vec<f64>> {
        let ids = self.vocab.encode(tokens);
        let mut g = Graph::inference();
        let logits = self.logits(&mut g, &[&ids])?;
        let p = g.softmax(logits);
        Ok(g.value(p).to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = BagHeader {
            kind: HEADER_KIND.into(),
            dim: self.dim,
            vocab: self.vocab.clone(),
        };
        checkpoint::save(path, &header, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, store): (BagHeader, ParamStore) = checkpoint::load(path)?;
        if header.kind != HEADER_KIND {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("expected a {HEADER_KIND} checkpoint, found {}", header.kind),
            });
        }
        Self::bind(header.vocab, header.dim, store)
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }
}

impl SentimentClassifier for BagClassifier {
    fn predict(&self, tokens: &[String]) -> Result<i64> {
        let p = self.probabilities(tokens)?;
        // first maximum wins, so ties go to the lower rating
        let best = p
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > p[best] { i } else { best });
        Ok(SENTIMENT_RANGE.lo + best as i64)
    }
}
