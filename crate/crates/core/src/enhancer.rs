//! Lightweight feature enhancer between the frozen encoder and every
//! downstream head. Two trainable stages:
//!
//! * **aggregator** — fuses the encoder's intermediate maps into one map at
//!   the token-grid resolution. Each map is first passed through a
//!   channel-reducing `DownConv`, then folded in by a running recursion
//!   `m_i = m_{i-1} + Conv(m_{i-1}) + F'_i`, and the final state goes
//!   through a small fusion stack that restores the full channel width.
//! * **splitter** — expands the fused map into a five-level pyramid with
//!   spatial sizes `H/2^(j+1)` for levels `j = 1..=5`: two transposed-conv
//!   upsamplings, an identity-resolution projection, and two max-pool
//!   downsamplings.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, Module};
use crate::tensor::{Param, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AggregatorConfig {
    #[serde(default = "default_reduced")]
    pub reduced_dim: usize,
    /// Keep the `m_{i-1}` shortcut in the recursion (ablation switch).
    #[serde(default = "default_true")]
    pub use_residual: bool,
    /// Ablation: concatenate all reduced maps channel-wise and fuse once,
    /// instead of the serial recursion.
    #[serde(default)]
    pub parallel_concat: bool,
}

fn default_reduced() -> usize {
    32
}
fn default_true() -> bool {
    true
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig { reduced_dim: 32, use_residual: true, parallel_concat: false }
    }
}

/// Per-input 1x1 + 3x3 reducing block, both followed by ReLU.
struct DownConv {
    proj: Conv2d,
    mix: Conv2d,
}

impl DownConv {
    fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        DownConv {
            proj: Conv2d::new(rng, in_ch, out_ch, 1, 1, 0),
            mix: Conv2d::new(rng, out_ch, out_ch, 3, 1, 1),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        self.mix.forward(&self.proj.forward(x).relu()).relu()
    }
}

pub struct FeatureAggregator {
    pub cfg: AggregatorConfig,
    down: Vec<DownConv>,
    /// One 3x3 conv per recursion step (inputs 2..=k), unused in
    /// parallel-concat mode.
    step: Vec<Conv2d>,
    fuse1: Conv2d,
    fuse2: Conv2d,
    fuse3: Conv2d,
}

impl FeatureAggregator {
    /// `n_inputs` intermediate maps of `in_dim` channels → one map of
    /// `out_dim` channels at unchanged resolution.
    pub fn new(
        cfg: AggregatorConfig,
        n_inputs: usize,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_inputs == 0 {
            return Err(Error::config("aggregator needs at least one input map"));
        }
        let r = cfg.reduced_dim;
        if r == 0 {
            return Err(Error::config("reduced_dim must be ≥ 1"));
        }
        let down = (0..n_inputs).map(|_| DownConv::new(in_dim, r, rng)).collect();
        let step = (1..n_inputs).map(|_| Conv2d::new(rng, r, r, 3, 1, 1)).collect();
        let fuse_in = if cfg.parallel_concat { r * n_inputs } else { r };
        Ok(FeatureAggregator {
            cfg,
            down,
            step,
            fuse1: Conv2d::new(rng, fuse_in, r, 3, 1, 1),
            fuse2: Conv2d::new(rng, r, r, 3, 1, 1),
            fuse3: Conv2d::new(rng, r, out_dim, 1, 1, 0),
        })
    }

    /// Fuse `[c, h, w]` intermediate maps (count fixed at construction).
    pub fn aggregate(&self, intermediates: &[Tensor]) -> Result<Tensor> {
        if intermediates.len() != self.down.len() {
            return Err(Error::shape(format!(
                "aggregator built for {} maps, got {}",
                self.down.len(),
                intermediates.len()
            )));
        }
        let first = intermediates[0].shape().to_vec();
        for m in intermediates {
            if m.shape() != first.as_slice() {
                return Err(Error::shape("intermediate maps must share one shape"));
            }
        }
        let reduced: Vec<Tensor> =
            intermediates.iter().zip(&self.down).map(|(m, d)| d.forward(m)).collect();
        let pre_fuse = if self.cfg.parallel_concat {
            Tensor::concat(&reduced, 0)
        } else {
            let mut m = reduced[0].clone();
            for (f, conv) in reduced[1..].iter().zip(&self.step) {
                let stepped = conv.forward(&m);
                m = if self.cfg.use_residual {
                    m.add(&stepped).add(f)
                } else {
                    stepped.add(f)
                };
            }
            m
        };
        Ok(self.fuse3.forward(&self.fuse2.forward(&self.fuse1.forward(&pre_fuse).relu()).relu()))
    }
}

impl Module for FeatureAggregator {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        for (i, d) in self.down.iter().enumerate() {
            d.proj.collect_params(&crate::nn::join(prefix, &format!("down.{i}.proj")), out);
            d.mix.collect_params(&crate::nn::join(prefix, &format!("down.{i}.mix")), out);
        }
        for (i, c) in self.step.iter().enumerate() {
            c.collect_params(&crate::nn::join(prefix, &format!("step.{i}")), out);
        }
        self.fuse1.collect_params(&crate::nn::join(prefix, "fuse1"), out);
        self.fuse2.collect_params(&crate::nn::join(prefix, "fuse2"), out);
        self.fuse3.collect_params(&crate::nn::join(prefix, "fuse3"), out);
    }
}

/// Five feature maps indexed 1..=5, level j at `H/2^(j+1)` of the source
/// image (level 3 is the encoder's token grid).
pub struct Pyramid {
    levels: Vec<Tensor>,
}

impl Pyramid {
    pub fn new(levels: Vec<Tensor>) -> Self {
        assert_eq!(levels.len(), 5);
        Pyramid { levels }
    }

    /// 1-based accessor matching the level numbering above.
    pub fn level(&self, j: usize) -> &Tensor {
        assert!((1..=5).contains(&j), "pyramid level {j} out of range");
        &self.levels[j - 1]
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    /// Image-pixel stride of level j.
    pub fn stride(j: usize) -> usize {
        1 << (j + 1)
    }

    /// Same maps with a fixed sine position code added to each level.
    pub fn with_position_codes(&self) -> Pyramid {
        let levels = self
            .levels
            .iter()
            .map(|t| {
                let s = t.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let pe = crate::nn::pe::sine_grid(h, w, c).into_dyn();
                t.add(&Tensor::constant(pe))
            })
            .collect();
        Pyramid { levels }
    }
}

pub struct FeatureSplitter {
    up1a: ConvTranspose2d,
    up1b: ConvTranspose2d,
    up2: ConvTranspose2d,
    proj3: Conv2d,
}

impl FeatureSplitter {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        FeatureSplitter {
            up1a: ConvTranspose2d::new(rng, dim, dim, 2, 2),
            up1b: ConvTranspose2d::new(rng, dim, dim, 2, 2),
            up2: ConvTranspose2d::new(rng, dim, dim, 2, 2),
            proj3: Conv2d::new(rng, dim, dim, 1, 1, 0),
        }
    }

    /// Expand the fused map (at the token grid, `H/16`) into the pyramid.
    /// `image_hw` fixes the expected source resolution.
    pub fn split(&self, f_agg: &Tensor, image_hw: (usize, usize)) -> Result<Pyramid> {
        let s = f_agg.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::shape("fused map must be [c, h, w]"));
        }
        let (hh, ww) = (image_hw.0 / 16, image_hw.1 / 16);
        if s[1] != hh || s[2] != ww {
            return Err(Error::shape(format!(
                "fused map {}x{} does not match image {}x{} at stride 16",
                s[1], s[2], image_hw.0, image_hw.1
            )));
        }
        if hh % 4 != 0 || ww % 4 != 0 {
            return Err(Error::shape("token grid must be divisible by 4 for down levels"));
        }
        let l2 = self.up2.forward(f_agg);
        let l1 = self.up1b.forward(&self.up1a.forward(f_agg));
        let l3 = self.proj3.forward(f_agg);
        let l4 = f_agg.max_pool2d(2, 2);
        let l5 = l4.max_pool2d(2, 2);
        Ok(Pyramid::new(vec![l1, l2, l3, l4, l5]))
    }
}

impl Module for FeatureSplitter {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        self.up1a.collect_params(&crate::nn::join(prefix, "up1a"), out);
        self.up1b.collect_params(&crate::nn::join(prefix, "up1b"), out);
        self.up2.collect_params(&crate::nn::join(prefix, "up2"), out);
        self.proj3.collect_params(&crate::nn::join(prefix, "proj3"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn maps(n: usize, c: usize, h: usize, w: usize) -> Vec<Tensor> {
        (0..n)
            .map(|i| {
                let arr = ndarray::ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |ix| {
                    ((ix[0] * 31 + ix[1] * 7 + ix[2] * 3 + i) % 13) as f64 / 13.0 - 0.4
                });
                Tensor::variable(arr)
            })
            .collect()
    }

    #[test]
    fn aggregate_keeps_resolution_and_channels() {
        let agg =
            FeatureAggregator::new(AggregatorConfig::default(), 4, 64, 64, &mut rng()).unwrap();
        let out = agg.aggregate(&maps(4, 64, 8, 8)).unwrap();
        assert_eq!(out.shape(), &[64, 8, 8]);
    }

    #[test]
    fn zeroed_steps_and_identity_down_reduce_to_plain_sum() {
        // Configure reduced_dim == in_dim, force DownConv to the identity and
        // the step convs to zero: before the fusion stack the recursion must
        // equal Σ F_i. Read it back through a fusion stack that is also the
        // identity on its first 1x1 taps.
        let c = 3;
        let mut agg = FeatureAggregator::new(
            AggregatorConfig { reduced_dim: c, use_residual: true, parallel_concat: false },
            3,
            c,
            c,
            &mut rng(),
        )
        .unwrap();
        for d in &mut agg.down {
            // 1x1 proj = identity, 3x3 mix = centered identity
            let mut wp = ndarray::ArrayD::zeros(IxDyn(&[c, c, 1, 1]));
            let mut wm = ndarray::ArrayD::zeros(IxDyn(&[c, c, 3, 3]));
            for i in 0..c {
                wp[[i, i, 0, 0]] = 1.0;
                wm[[i, i, 1, 1]] = 1.0;
            }
            d.proj.w.set(wp);
            d.mix.w.set(wm);
            d.proj.b.as_ref().unwrap().set(ndarray::ArrayD::zeros(IxDyn(&[c])));
            d.mix.b.as_ref().unwrap().set(ndarray::ArrayD::zeros(IxDyn(&[c])));
        }
        for s in &mut agg.step {
            s.w.set(ndarray::ArrayD::zeros(IxDyn(&[c, c, 3, 3])));
            s.b.as_ref().unwrap().set(ndarray::ArrayD::zeros(IxDyn(&[c])));
        }
        let mut id3 = ndarray::ArrayD::zeros(IxDyn(&[c, c, 3, 3]));
        let mut id1 = ndarray::ArrayD::zeros(IxDyn(&[c, c, 1, 1]));
        for i in 0..c {
            id3[[i, i, 1, 1]] = 1.0;
            id1[[i, i, 0, 0]] = 1.0;
        }
        agg.fuse1.w.set(id3.clone());
        agg.fuse2.w.set(id3);
        agg.fuse3.w.set(id1);
        for f in [&agg.fuse1, &agg.fuse2, &agg.fuse3] {
            f.b.as_ref().unwrap().set(ndarray::ArrayD::zeros(IxDyn(&[c])));
        }
        // non-negative inputs so the ReLUs in DownConv/fusion are transparent
        let inputs: Vec<Tensor> = (0..3)
            .map(|i| {
                Tensor::variable(ndarray::ArrayD::from_shape_fn(IxDyn(&[c, 4, 4]), |ix| {
                    ((ix[0] + 2 * ix[1] + 3 * ix[2] + i) % 7) as f64 / 7.0
                }))
            })
            .collect();
        let out = agg.aggregate(&inputs).unwrap();
        let expect = inputs[0].data() + inputs[1].data() + inputs[2].data();
        let diff = (out.data() - &expect).iter().map(|d| d.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "max dev {diff}");
    }

    #[test]
    fn parallel_concat_mode_runs() {
        let cfg = AggregatorConfig { parallel_concat: true, ..Default::default() };
        let agg = FeatureAggregator::new(cfg, 4, 64, 64, &mut rng()).unwrap();
        let out = agg.aggregate(&maps(4, 64, 8, 8)).unwrap();
        assert_eq!(out.shape(), &[64, 8, 8]);
    }

    #[test]
    fn aggregate_gradients_match_finite_differences() {
        let agg =
            FeatureAggregator::new(AggregatorConfig::default(), 2, 8, 8, &mut rng()).unwrap();
        let inputs = maps(2, 8, 4, 4);
        crate::tensor::check::gradcheck(
            &inputs,
            |xs| agg.aggregate(xs).unwrap().mean_all(),
            1e-3,
        );
    }

    #[test]
    fn splitter_produces_expected_scales() {
        let split = FeatureSplitter::new(64, &mut rng());
        let f = Tensor::variable(ndarray::ArrayD::zeros(IxDyn(&[64, 8, 8])));
        let pyr = split.split(&f, (128, 128)).unwrap();
        let expect = [(64, 32, 32), (64, 16, 16), (64, 8, 8), (64, 4, 4), (64, 2, 2)];
        for (j, &(c, h, w)) in (1..=5).zip(&expect) {
            assert_eq!(pyr.level(j).shape(), &[c, h, w], "level {j}");
            assert_eq!(128 / Pyramid::stride(j), h);
        }
    }

    #[test]
    fn splitter_rejects_mismatched_image_size() {
        let split = FeatureSplitter::new(8, &mut rng());
        let f = Tensor::variable(ndarray::ArrayD::zeros(IxDyn(&[8, 8, 8])));
        assert!(split.split(&f, (256, 128)).is_err());
    }

    #[test]
    fn position_codes_change_values_not_shapes() {
        let split = FeatureSplitter::new(8, &mut rng());
        let f = Tensor::variable(ndarray::ArrayD::from_elem(IxDyn(&[8, 8, 8]), 0.25));
        let pyr = split.split(&f, (128, 128)).unwrap();
        let coded = pyr.with_position_codes();
        for j in 1..=5 {
            assert_eq!(pyr.level(j).shape(), coded.level(j).shape());
        }
        assert_ne!(
            pyr.level(3).data().as_slice().unwrap(),
            coded.level(3).data().as_slice().unwrap()
        );
    }
}
