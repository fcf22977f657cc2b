//! Per-step loss bookkeeping shared by both prompter variants and the
//! baselines: a differentiable total plus a named breakdown whose values
//! must sum back to the total.

use crate::tensor::Tensor;

pub struct LossReport {
    /// Differentiable total; call `backward` on this.
    pub total: Tensor,
    /// `(name, value)` pairs; the values sum to `total` up to float error.
    pub terms: Vec<(String, f64)>,
}

impl LossReport {
    pub fn new(total: Tensor, terms: Vec<(String, f64)>) -> Self {
        LossReport { total, terms }
    }

    pub fn total_value(&self) -> f64 {
        self.total.item()
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// |total − Σ terms|, the decomposition defect.
    pub fn decomposition_gap(&self) -> f64 {
        let sum: f64 = self.terms.iter().map(|(_, v)| v).sum();
        (self.total_value() - sum).abs()
    }

    /// Merge another report in (used to combine per-stage losses).
    pub fn merge(self, other: LossReport) -> LossReport {
        let total = self.total.add(&other.total);
        let mut terms = self.terms;
        terms.extend(other.terms);
        LossReport { total, terms }
    }

    /// Scale the total and every term (e.g. averaging over a batch).
    pub fn scaled(self, s: f64) -> LossReport {
        LossReport {
            total: self.total.scale(s),
            terms: self.terms.into_iter().map(|(n, v)| (n, v * s)).collect(),
        }
    }
}
