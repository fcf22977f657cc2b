//! Fused training losses with analytic gradients, plus the plain (non-graph)
//! dice dissimilarity used inside matching costs.

use std::sync::Arc;

use ndarray::{ArrayD, Ix2};

use super::ops::stable_sigmoid;
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

impl Tensor {
    /// Binary cross-entropy on logits against targets in [0, 1], computed in
    /// the numerically stable form `max(x,0) - x·t + ln(1 + e^{-|x|})`.
    pub fn bce_with_logits(&self, targets: &ArrayD<f64>, reduction: Reduction) -> Tensor {
        assert_eq!(self.shape(), targets.shape(), "bce target shape mismatch");
        let x = self.data();
        let mut total = 0.0;
        for (&xv, &tv) in x.iter().zip(targets.iter()) {
            total += xv.max(0.0) - xv * tv + (1.0 + (-xv.abs()).exp()).ln();
        }
        let n = x.len().max(1) as f64;
        let scale = match reduction {
            Reduction::Mean => 1.0 / n,
            Reduction::Sum => 1.0,
        };
        let x_arc = Arc::clone(&self.node.data);
        let t = targets.clone();
        Tensor::from_op(
            ndarray::arr0(total * scale).into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let gv = *g.iter().next().unwrap() * scale;
                let mut dx = x_arc.as_ref().clone();
                dx.zip_mut_with(&t, |d, &tv| *d = (stable_sigmoid(*d) - tv) * gv);
                vec![Some(dx)]
            }),
        )
    }

    /// Multi-class cross-entropy over `[N, C]` logits with integer targets.
    /// Optional per-class weights follow the weighted-mean convention
    /// (divide by the sum of selected weights).
    pub fn cross_entropy(
        &self,
        targets: &[usize],
        class_weights: Option<&[f64]>,
        reduction: Reduction,
    ) -> Tensor {
        let logits = self
            .data()
            .view()
            .into_dimensionality::<Ix2>()
            .expect("cross_entropy expects [N, C] logits");
        let (n, c) = (logits.shape()[0], logits.shape()[1]);
        assert_eq!(targets.len(), n, "cross_entropy target count mismatch");
        if let Some(w) = class_weights {
            assert_eq!(w.len(), c, "class weight count mismatch");
        }
        // row-wise softmax, saved for the backward pass
        let mut probs = logits.to_owned();
        for mut row in probs.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let mut total = 0.0;
        let mut weight_sum = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < c, "target class out of range");
            let w = class_weights.map_or(1.0, |cw| cw[t]);
            total += -probs[[i, t]].max(1e-300).ln() * w;
            weight_sum += w;
        }
        let denom = match reduction {
            Reduction::Mean => weight_sum.max(1e-12),
            Reduction::Sum => 1.0,
        };
        let targets = targets.to_vec();
        let weights: Vec<f64> = targets
            .iter()
            .map(|&t| class_weights.map_or(1.0, |cw| cw[t]))
            .collect();
        Tensor::from_op(
            ndarray::arr0(total / denom).into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let gv = *g.iter().next().unwrap() / denom;
                let mut dx = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    let w = weights[i];
                    for j in 0..c {
                        let indicator = if j == t { 1.0 } else { 0.0 };
                        dx[[i, j]] = w * (dx[[i, j]] - indicator) * gv;
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Smooth L1 (Huber) loss: `0.5 d²/β` for `|d| < β`, else `|d| − 0.5 β`.
    pub fn smooth_l1(&self, targets: &ArrayD<f64>, beta: f64, reduction: Reduction) -> Tensor {
        assert_eq!(self.shape(), targets.shape(), "smooth_l1 shape mismatch");
        assert!(beta > 0.0, "smooth_l1 beta must be positive");
        let mut total = 0.0;
        for (&p, &t) in self.data().iter().zip(targets.iter()) {
            let d = (p - t).abs();
            total += if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta };
        }
        let n = self.len().max(1) as f64;
        let scale = match reduction {
            Reduction::Mean => 1.0 / n,
            Reduction::Sum => 1.0,
        };
        let x_arc = Arc::clone(&self.node.data);
        let t = targets.clone();
        Tensor::from_op(
            ndarray::arr0(total * scale).into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let gv = *g.iter().next().unwrap() * scale;
                let mut dx = x_arc.as_ref().clone();
                dx.zip_mut_with(&t, |d, &tv| {
                    let diff = *d - tv;
                    *d = if diff.abs() < beta { diff / beta } else { diff.signum() } * gv;
                });
                vec![Some(dx)]
            }),
        )
    }

    /// Soft dice dissimilarity `1 − 2Σpg / (Σp + Σg)` between predicted
    /// probabilities and a binary target, built from primitive ops so the
    /// gradient flows through `self`.
    pub fn dice_loss(&self, target: &ArrayD<f64>) -> Tensor {
        assert_eq!(self.shape(), target.shape(), "dice target shape mismatch");
        let g = Tensor::constant(target.clone());
        let inter = self.mul(&g).sum_all().scale(2.0);
        let denom = self.sum_all().add(&g.sum_all()).add_scalar(1e-8);
        Tensor::scalar(1.0).sub(&inter.div(&denom))
    }
}

/// Plain dice dissimilarity between two non-negative masks; identical masks
/// give exactly 0 and disjoint non-empty masks exactly 1.
pub fn dice_cost(pred: &ArrayD<f64>, gt: &ArrayD<f64>) -> f64 {
    debug_assert_eq!(pred.shape(), gt.shape());
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += p * g;
        total += p + g;
    }
    if total == 0.0 {
        0.0
    } else {
        1.0 - 2.0 * inter / total
    }
}

#[cfg(test)]
mod tests {
    use super::super::check::gradcheck;
    use super::super::Tensor;
    use super::{dice_cost, Reduction};
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2, ArrayD, IxDyn};

    #[test]
    fn bce_matches_closed_form() {
        let logits = Tensor::variable(arr1(&[0.0, 2.0, -1.0]).into_dyn());
        let targets = arr1(&[1.0, 1.0, 0.0]).into_dyn();
        let loss = logits.bce_with_logits(&targets, Reduction::Sum);
        let expected =
            (2.0f64).ln() + (1.0 + (-2.0f64).exp()).ln() + (1.0 + (-1.0f64).exp()).ln();
        assert_abs_diff_eq!(loss.item(), expected, epsilon = 1e-12);
        gradcheck(
            &[logits],
            |ins| ins[0].bce_with_logits(&targets, Reduction::Mean),
            1e-6,
        );
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::variable(arr2(&[[0.0, 0.0, 0.0, 0.0]]).into_dyn());
        let loss = logits.cross_entropy(&[2], None, Reduction::Mean);
        assert_abs_diff_eq!(loss.item(), (4.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_class_weights_and_grads() {
        let logits = Tensor::variable(
            arr2(&[[1.0, -0.5, 0.2], [0.0, 2.0, -1.0], [0.3, 0.3, 0.9]]).into_dyn(),
        );
        let w = [1.0, 0.1, 1.0];
        let targets = [1usize, 0, 2];
        gradcheck(
            &[logits.clone()],
            |ins| ins[0].cross_entropy(&targets, Some(&w), Reduction::Mean),
            1e-6,
        );
        // weighted mean: down-weighted class contributes proportionally
        let manual = {
            let lp = logits.log_softmax();
            let l0 = -lp.data()[[0, 1]] * 0.1;
            let l1 = -lp.data()[[1, 0]] * 1.0;
            let l2 = -lp.data()[[2, 2]] * 1.0;
            (l0 + l1 + l2) / 2.1
        };
        let loss = logits.cross_entropy(&targets, Some(&w), Reduction::Mean);
        assert_abs_diff_eq!(loss.item(), manual, epsilon = 1e-12);
    }

    #[test]
    fn smooth_l1_regimes() {
        let pred = Tensor::variable(arr1(&[0.5, 3.0]).into_dyn());
        let target = arr1(&[0.0, 0.0]).into_dyn();
        let loss = pred.smooth_l1(&target, 1.0, Reduction::Sum);
        assert_abs_diff_eq!(loss.item(), 0.5 * 0.25 + 2.5, epsilon = 1e-12);
        gradcheck(
            &[pred],
            |ins| ins[0].smooth_l1(&target, 1.0, Reduction::Mean),
            1e-6,
        );
    }

    #[test]
    fn dice_identities() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let b = a.mapv(|v| 1.0 - v);
        assert_eq!(dice_cost(&a, &a), 0.0);
        assert_eq!(dice_cost(&a, &b), 1.0);
        let zero = ArrayD::zeros(IxDyn(&[2, 3]));
        assert_eq!(dice_cost(&zero, &zero), 0.0);
    }

    #[test]
    fn dice_loss_gradients() {
        let probs = Tensor::variable(arr1(&[0.9, 0.2, 0.7, 0.4]).into_dyn());
        let gt = arr1(&[1.0, 0.0, 1.0, 0.0]).into_dyn();
        gradcheck(&[probs], |ins| ins[0].dice_loss(&gt), 1e-5);
    }
}
