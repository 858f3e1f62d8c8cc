use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            _ => Err(Error::Config(format!("unknown optimizer {s:?} (expected adam or sgd)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer over every parameter of a store. Parameters
/// without a gradient buffer are left untouched, moments included.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore) -> Result<Self> {
        if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", cfg.lr)));
        }
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Ok(Self {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, tensor) in store.tensors_mut().enumerate() {
            let (data, grad) = tensor.data_and_grad_mut();
            let Some(grad) = grad else { continue };
            match c.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in data.iter_mut().zip(grad) {
                        *p -= c.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..data.len() {
                        let g = grad[j];
                        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        data[j] -= c.lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
            }
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for t in store.tensors_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::{Graph, Tensor};

    fn quadratic_store(x: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::from_vec(x.to_vec())).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore, g: &[f64]) {
        let id = s.id("x").unwrap();
        s.get_mut(id).zero_grad();
        s.get_mut(id).accumulate_grad(g);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut s = quadratic_store(&[1.0, -2.0, 0.5]);
        let mut opt = Optimizer::new(OptimizerConfig::default(), &s).unwrap();
        set_grad(&mut s, &[3.0, -0.25, 0.0]);
        opt.step(&mut s);
        let x = s.get(s.id("x").unwrap()).data();
        assert!((x[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((x[1] - (-2.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(x[2], 0.5);
    }

    #[test]
    fn adam_matches_reference_recurrence() {
        let cfg = OptimizerConfig { lr: 0.05, ..Default::default() };
        let mut s = quadratic_store(&[0.7]);
        let mut opt = Optimizer::new(cfg, &s).unwrap();
        let (mut p, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for t in 1..=20 {
            let g = 2.0 * p;
            set_grad(&mut s, &[g]);
            opt.step(&mut s);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= 0.05 * mh / (vh.sqrt() + 1e-8);
            assert!((s.get(s.id("x").unwrap()).data()[0] - p).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_descends_quadratic() {
        let cfg = OptimizerConfig { kind: OptimizerKind::Sgd, lr: 0.1, ..Default::default() };
        let mut s = quadratic_store(&[1.0, -1.0]);
        let mut opt = Optimizer::new(cfg, &s).unwrap();
        let id = s.id("x").unwrap();
        for _ in 0..50 {
            s.zero_grad();
            let mut g = Graph::new();
            let x = g.param(&s, id);
            let sq = g.mul(x, x).unwrap();
            let loss = g.sum(sq);
            let grads = g.backward(loss).unwrap();
            g.accumulate_param_grads(&grads, &mut s);
            opt.step(&mut s);
        }
        assert!(s.get(id).data().iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn zero_lr_leaves_params() {
        let cfg = OptimizerConfig { lr: 0.0, ..Default::default() };
        let mut s = quadratic_store(&[0.3, 0.4]);
        let before = s.checksum();
        let mut opt = Optimizer::new(cfg, &s).unwrap();
        set_grad(&mut s, &[1.0, 1.0]);
        opt.step(&mut s);
        assert_eq!(s.checksum(), before);
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_limit(g in prop::collection::vec(-100.0f64..100.0, 1..30), clip in 0.01f64..10.0) {
            let mut s = quadratic_store(&vec![0.0; g.len()]);
            set_grad(&mut s, &g);
            let before = clip_grad_norm(&mut s, clip);
            let after = s.grad_norm();
            prop_assert!(after <= clip + 1e-9);
            if before <= clip {
                prop_assert_eq!(after, before);
            }
        }
    }
}
