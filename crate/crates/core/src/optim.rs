//! AdamW with decoupled weight decay and a warmup→cosine learning-rate
//! schedule. Moments are keyed by parameter name so they survive
//! checkpointing.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Param};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Steps of linear warmup from 0 to `lr`.
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.05
}
fn default_warmup() -> usize {
    50
}

impl Default for OptimConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.eps <= 0.0 {
            return Err(Error::config("eps must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based) of a run `total_steps` long: linear
/// warmup to `base_lr` over `warmup` steps, then cosine decay to zero.
pub fn lr_at(step: usize, total_steps: usize, warmup: usize, base_lr: f64) -> f64 {
    if warmup > 0 && step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    let total = total_steps.max(warmup + 1);
    let t = (step - warmup) as f64 / (total - warmup) as f64;
    let t = t.clamp(0.0, 1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// First and second moment estimates for one parameter.
#[derive(Clone)]
pub struct MomentPair {
    pub m: ArrayD<f64>,
    pub v: ArrayD<f64>,
}

pub struct AdamW {
    pub cfg: OptimConfig,
    /// Update count (bias correction uses `t+1`).
    pub step_count: usize,
    moments: BTreeMap<String, MomentPair>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW { cfg, step_count: 0, moments: BTreeMap::new() })
    }

    /// Apply one update with learning rate `lr` to every trainable
    /// parameter that has a gradient. Frozen parameters are skipped even
    /// if a gradient was recorded for them.
    pub fn step(&mut self, params: &[(String, Param)], grads: &Gradients, lr: f64) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        for (name, p) in params {
            if !p.trainable() {
                continue;
            }
            let Some(g) = grads.get(p.id()) else { continue };
            let entry = self.moments.entry(name.clone()).or_insert_with(|| MomentPair {
                m: ArrayD::zeros(g.raw_dim()),
                v: ArrayD::zeros(g.raw_dim()),
            });
            entry.m.zip_mut_with(g, |m, &gv| *m = b1 * *m + (1.0 - b1) * gv);
            entry.v.zip_mut_with(g, |v, &gv| *v = b2 * *v + (1.0 - b2) * gv * gv);
            let mut w = (*p.value()).clone();
            // decoupled decay, then the Adam step
            if self.cfg.weight_decay > 0.0 {
                w.mapv_inplace(|x| x - lr * self.cfg.weight_decay * x);
            }
            ndarray::Zip::from(&mut w)
                .and(&entry.m)
                .and(&entry.v)
                .for_each(|x, &m, &v| {
                    let mh = m / bc1;
                    let vh = v / bc2;
                    *x -= lr * mh / (vh.sqrt() + self.cfg.eps);
                });
            p.set(w);
        }
    }

    pub fn moments(&self) -> &BTreeMap<String, MomentPair> {
        &self.moments
    }

    pub fn restore_moments(&mut self, step_count: usize, moments: BTreeMap<String, MomentPair>) {
        self.step_count = step_count;
        self.moments = moments;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Reduction, Tensor};
    use ndarray::IxDyn;

    #[test]
    fn warmup_then_cosine() {
        let base = 1e-4;
        // end of warmup hits the base rate exactly
        assert!((lr_at(49, 1000, 50, base) - base).abs() < 1e-18);
        // warmup is linear
        assert!((lr_at(24, 1000, 50, base) - base * 0.5).abs() < 1e-18);
        // cosine midpoint is half the base rate
        let mid = lr_at(50 + 475, 1000, 50, base);
        assert!((mid - base * 0.5).abs() < 1e-6 * base, "mid {mid}");
        // final step decays to ~0
        assert!(lr_at(999, 1000, 50, base) < 0.01 * base);
        // monotone decrease after warmup
        let mut prev = f64::INFINITY;
        for s in 50..1000 {
            let v = lr_at(s, 1000, 50, base);
            assert!(v <= prev + 1e-18);
            prev = v;
        }
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let p = Param::new(ArrayD::from_elem(IxDyn(&[3]), 5.0));
        let params = vec![("w".to_string(), p.clone())];
        let mut cfg = OptimConfig::default();
        cfg.lr = 0.05;
        cfg.weight_decay = 0.0;
        let mut opt = AdamW::new(cfg).unwrap();
        for _ in 0..500 {
            let w = p.tensor();
            let loss = w.square().sum_all();
            let grads = loss.backward();
            opt.step(&params, &grads, 0.05);
        }
        assert!(p.value().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_params_never_move() {
        let p = Param::frozen(ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let params = vec![("w".to_string(), p.clone())];
        let mut opt = AdamW::new(OptimConfig::default()).unwrap();
        let w = p.tensor();
        let loss = w.mul(&w).sum_all();
        let grads = loss.backward();
        opt.step(&params, &grads, 1.0);
        assert!(p.value().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // with zero gradient flow the decay still shrinks weights
        let p = Param::new(ArrayD::from_elem(IxDyn(&[1]), 2.0));
        let params = vec![("w".to_string(), p.clone())];
        let mut cfg = OptimConfig::default();
        cfg.weight_decay = 0.1;
        let mut opt = AdamW::new(cfg).unwrap();
        let w = p.tensor();
        let loss = w.scale(0.0).sum_all();
        let grads = loss.backward();
        opt.step(&params, &grads, 1.0);
        let v = p.value()[0];
        assert!(v < 2.0, "decay should shrink the weight, got {v}");
        assert!((v - (2.0 - 1.0 * 0.1 * 2.0)).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = OptimConfig::default();
        cfg.lr = 0.0;
        assert!(AdamW::new(cfg).is_err());
        let mut cfg = OptimConfig::default();
        cfg.beta1 = 1.0;
        assert!(AdamW::new(cfg).is_err());
    }

    #[test]
    fn optim_config_round_trips() {
        let cfg = OptimConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: OptimConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(cfg, back);
        assert!(serde_json::from_str::<OptimConfig>(r#"{"lr": 1e-4, "bogus": 1}"#).is_err());
    }

    #[test]
    fn uses_cross_entropy_shaped_losses_too() {
        // smoke: a tiny logistic-regression step reduces loss
        let p = Param::new(ArrayD::zeros(IxDyn(&[2, 3])));
        let params = vec![("w".to_string(), p.clone())];
        let mut opt = AdamW::new(OptimConfig::default()).unwrap();
        let x = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 2]), 1.0));
        let first = {
            let w = p.tensor();
            x.matmul(&w).cross_entropy(&[2], None, Reduction::Mean).item()
        };
        for _ in 0..50 {
            let w = p.tensor();
            let loss = x.matmul(&w).cross_entropy(&[2], None, Reduction::Mean);
            let grads = loss.backward();
            opt.step(&params, &grads, 0.05);
        }
        let w = p.tensor();
        let last = x.matmul(&w).cross_entropy(&[2], None, Reduction::Mean).item();
        assert!(last < first);
    }
}
