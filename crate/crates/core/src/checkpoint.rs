//! Binary parameter files.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic     8 bytes  "CTRLGEN\0"
//! version   u32      FORMAT_VERSION
//! header    u32 length + UTF-8 JSON (architecture, vocabulary, ...)
//! count     u32      number of parameters
//! per parameter:
//!   name    u32 length + UTF-8 bytes
//!   rank    u32
//!   shape   rank × u32
//!   data    numel × f32
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CTRLGEN\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode<H: Serialize>(header: &H, store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + store.num_values() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(header)?;
    push_len(&mut out, json.len());
    out.extend_from_slice(&json);
    push_len(&mut out, store.len());
    for (_, name, t) in store.iter() {
        push_len(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        push_len(&mut out, t.shape().len());
        for &d in t.shape() {
            push_len(&mut out, d);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn push_len(out: &mut Vec<u8>, n: usize) {
    out.extend_from_slice(&(n as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

pub fn decode<H: DeserializeOwned>(bytes: &[u8]) -> std::result::Result<(H, ParamStore), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let hlen = r.u32()?;
    let header: H = serde_json::from_slice(r.take(hlen)?).map_err(|e| format!("header: {e}"))?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32()?;
        let name = std::str::from_utf8(r.take(nlen)?).map_err(|e| e.to_string())?.to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or("shape overflow")?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| e.to_string())?;
        store.add(name, t).map_err(|e| e.to_string())?;
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes after last parameter".into());
    }
    Ok((header, store))
}

pub fn save<H: Serialize>(path: &Path, header: &H, store: &ParamStore) -> Result<()> {
    fs::write(path, encode(header, store)?)?;
    Ok(())
}

pub fn load<H: DeserializeOwned>(path: &Path) -> Result<(H, ParamStore)> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}
