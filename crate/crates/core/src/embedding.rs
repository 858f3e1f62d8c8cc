//! Strategies for turning an integer control value into the vector that is
//! concatenated to the decoder input.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Base of the geometric frequency progression of the sinusoidal encoding.
pub const SINUSOID_BASE: f64 = 10000.0;

/// Bound of the uniform initialization of learnable tables.
pub const LEARNABLE_INIT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Learnable,
    Sinusoidal,
    Scalar,
    ScalarRepeat,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Learnable,
        StrategyKind::Sinusoidal,
        StrategyKind::Scalar,
        StrategyKind::ScalarRepeat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Learnable => "learnable",
            StrategyKind::Sinusoidal => "sinusoidal",
            StrategyKind::Scalar => "scalar",
            StrategyKind::ScalarRepeat => "scalar_repeat",
        }
    }

    /// Output width for a requested `dim`; the plain scalar is always 1 wide.
    pub fn width(self, dim: usize) -> usize {
        match self {
            StrategyKind::Scalar => 1,
            _ => dim,
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown control strategy {s:?}")))
    }
}

/// Inclusive integer interval, serialized as `"lo..hi"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ValueRange {
    pub lo: i64,
    pub hi: i64,
}

impl ValueRange {
    pub fn new(lo: i64, hi: i64) -> Result<Self> {
        if lo > hi {
            return Err(Error::Config(format!("empty range {lo}..{hi}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, c: i64) -> bool {
        (self.lo..=self.hi).contains(&c)
    }

    pub fn len(&self) -> usize {
        (self.hi - self.lo + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> impl Iterator<Item = i64> {
        self.lo..=self.hi
    }

    pub fn union(&self, other: &ValueRange) -> ValueRange {
        ValueRange {
            lo: self.lo.min(other.lo),
            hi: self.hi.max(other.hi),
        }
    }

    pub fn check(&self, c: i64) -> Result<()> {
        if self.contains(c) {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                value: c,
                lo: self.lo,
                hi: self.hi,
            })
        }
    }
}

impl fmt::Display for ValueRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.lo, self.hi)
    }
}

impl TryFrom<String> for ValueRange {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ValueRange> for String {
    fn from(r: ValueRange) -> Self {
        r.to_string()
    }
}

impl FromStr for ValueRange {
    type Err = Error;

    /// Parses `"lo..hi"` (inclusive) or a single integer.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed range {s:?}, expected \"lo..hi\""));
        let s = s.trim();
        match s.split_once("..") {
            Some((lo, hi)) => {
                let hi = hi.strip_prefix('=').unwrap_or(hi);
                ValueRange::new(lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?)
            }
            None => {
                let v = s.parse().map_err(|_| bad())?;
                Ok(ValueRange { lo: v, hi: v })
            }
        }
    }
}

/// `out[2i] = sin(c / 10000^(2i/d))`, `out[2i+1] = cos(c / 10000^(2i/d))`.
pub fn embed_sinusoidal(c: i64, d: usize) -> Result<Vec<f64>> {
    if d < 2 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!("sinusoidal width must be even and >= 2, got {d}")));
    }
    let mut out = Vec::with_capacity(d);
    for i in 0..d / 2 {
        let angle = c as f64 / SINUSOID_BASE.powf(2.0 * i as f64 / d as f64);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

pub fn embed_scalar(c: i64) -> Vec<f64> {
    vec![c as f64]
}

pub fn embed_scalar_repeat(c: i64, d: usize) -> Result<Vec<f64>> {
    if d < 1 {
        return Err(Error::Config("scalar_repeat width must be at least 1".into()));
    }
    Ok(vec![c as f64; d])
}

/// One trainable row per control value in `range`.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnableTable {
    pub param: ParamId,
    pub range: ValueRange,
    pub dim: usize,
}

impl LearnableTable {
    pub fn init(store: &mut ParamStore, name: &str, range: ValueRange, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let table = Tensor::uniform(&[range.len(), dim], LEARNABLE_INIT, rng);
        let param = store.add(name, table)?;
        Ok(Self { param, range, dim })
    }

    pub fn row_index(&self, c: i64) -> Result<usize> {
        self.range.check(c)?;
        Ok((c - self.range.lo) as usize)
    }

    pub fn embed_learnable(&self, c: i64, store: &ParamStore) -> Result<Vec<f64>> {
        let row = self.row_index(c)?;
        Ok(store.get(self.param).data()[row * self.dim..(row + 1) * self.dim].to_vec())
    }
}

/// A configured strategy bound to the range it must accept.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarEmbedder {
    pub kind: StrategyKind,
    pub dim: usize,
    pub range: ValueRange,
    /// Multiplier on the raw value for the scalar strategies.
    pub scale: f64,
    pub table: Option<LearnableTable>,
}

impl ScalarEmbedder {
    pub fn new(
        kind: StrategyKind,
        dim: usize,
        range: ValueRange,
        scale: f64,
        store: &mut ParamStore,
        name: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dim < 1 {
            return Err(Error::Config(format!("{kind} embedding width must be >= 1")));
        }
        if kind == StrategyKind::Sinusoidal && !dim.is_multiple_of(2) {
            return Err(Error::Config(format!("sinusoidal width must be even, got {dim}")));
        }
        let table = match kind {
            StrategyKind::Learnable => Some(LearnableTable::init(store, name, range, dim, rng)?),
            _ => None,
        };
        Ok(Self {
            kind,
            dim: kind.width(dim),
            range,
            scale,
            table,
        })
    }

    /// Rebinds to an existing table parameter (checkpoint loading).
    pub fn restore(kind: StrategyKind, dim: usize, range: ValueRange, scale: f64, store: &ParamStore, name: &str) -> Result<Self> {
        let table = match kind {
            StrategyKind::Learnable => {
                let param = store
                    .id(name)
                    .ok_or_else(|| Error::Config(format!("missing learnable table {name}")))?;
                Some(LearnableTable { param, range, dim })
            }
            _ => None,
        };
        Ok(Self {
            kind,
            dim: kind.width(dim),
            range,
            scale,
            table,
        })
    }

    pub fn width(&self) -> usize {
        self.dim
    }

    /// Embedding of a single value, read from the current parameters.
    pub fn embed(&self, c: i64, store: &ParamStore) -> Result<Vec<f64>> {
        self.range.check(c)?;
        match self.kind {
            StrategyKind::Learnable => self.table.as_ref().expect("learnable table").embed_learnable(c, store),
            StrategyKind::Sinusoidal => embed_sinusoidal(c, self.dim),
            StrategyKind::Scalar => Ok(vec![c as f64 * self.scale]),
            StrategyKind::ScalarRepeat => Ok(vec![c as f64 * self.scale; self.dim]),
        }
    }

    /// `[values.len(), width]` block. `table` must be the graph leaf of the
    /// learnable table when the strategy is learnable.
    pub fn embed_batch(&self, g: &mut Graph, table: Option<Var>, values: &[i64]) -> Result<Var> {
        for &c in values {
            self.range.check(c)?;
        }
        match self.kind {
            StrategyKind::Learnable => {
                let t = self.table.as_ref().expect("learnable table");
                let table = table.ok_or_else(|| Error::Config("learnable embedder needs its table in the graph".into()))?;
                let rows = values.iter().map(|&c| t.row_index(c)).collect::<Result<Vec<_>>>()?;
                g.embedding(table, &rows)
            }
            StrategyKind::Sinusoidal => {
                let mut data = Vec::with_capacity(values.len() * self.dim);
                for &c in values {
                    data.extend(embed_sinusoidal(c, self.dim)?);
                }
                g.constant(&[values.len(), self.dim], data)
            }
            StrategyKind::Scalar | StrategyKind::ScalarRepeat => {
                let data = values
                    .iter()
                    .flat_map(|&c| std::iter::repeat_n(c as f64 * self.scale, self.dim))
                    .collect();
                g.constant(&[values.len(), self.dim], data)
            }
        }
    }

    pub fn param(&self) -> Option<ParamId> {
        self.table.as_ref().map(|t| t.param)
    }
}
