//! Query-based prompter: a small set-prediction transformer that turns the
//! feature pyramid into per-query category logits, mask filters, coarse
//! mask logits, and sparse prompt embeddings for the mask head.
//!
//! The coarsest pyramid levels are flattened, tagged with position and
//! level codes, and refined by a transformer encoder. A fixed set of
//! zero-initialized queries cross-attends to those levels (cycling
//! coarsest→finest across decoder layers); heads read the query states at
//! evenly spaced layers for deep supervision. Coarse masks are dot
//! products between per-query mask filters and a high-resolution mask
//! feature map assembled from the finest pyramid level plus the upsampled
//! attended tokens.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::enhancer::Pyramid;
use crate::error::{Error, Result};
use crate::matching::assign_columns;
use crate::nn::pe::sine_grid;
use crate::nn::{
    Activation, Conv2d, ConvTranspose2d, LayerNorm, Linear, Mlp, Module,
    TransformerDecoderLayer, TransformerEncoderLayer,
};
use crate::report::LossReport;
use crate::tensor::{stable_sigmoid, Param, Reduction, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct QueryPrompterConfig {
    #[serde(default = "default_queries")]
    pub n_queries: usize,
    #[serde(default = "default_k")]
    pub k_prompts: usize,
    #[serde(default = "default_enc")]
    pub enc_layers: usize,
    #[serde(default = "default_dec")]
    pub dec_layers: usize,
    /// How many of the coarsest pyramid levels feed the transformer.
    #[serde(default = "default_levels")]
    pub levels_used: usize,
    /// Head readouts per forward pass; must divide `dec_layers`.
    #[serde(default = "default_levels")]
    pub supervision_levels: usize,
    #[serde(default = "default_noobj")]
    pub no_object_weight: f64,
    /// Add soft-dice terms to the training mask loss (matching always
    /// includes dice regardless).
    #[serde(default)]
    pub dice_in_mask_loss: bool,
    /// `F_sparse = e + sin(e)`; disabling leaves plain `e` (ablation).
    #[serde(default = "default_true")]
    pub sine_activation: bool,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    #[serde(default = "default_ff")]
    pub ff_dim: usize,
}

fn default_queries() -> usize {
    20
}
fn default_k() -> usize {
    5
}
fn default_enc() -> usize {
    3
}
fn default_dec() -> usize {
    6
}
fn default_levels() -> usize {
    3
}
fn default_noobj() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}
fn default_heads() -> usize {
    4
}
fn default_ff() -> usize {
    256
}

impl Default for QueryPrompterConfig {
    fn default() -> Self {
        QueryPrompterConfig {
            n_queries: default_queries(),
            k_prompts: default_k(),
            enc_layers: default_enc(),
            dec_layers: default_dec(),
            levels_used: default_levels(),
            supervision_levels: default_levels(),
            no_object_weight: default_noobj(),
            dice_in_mask_loss: false,
            sine_activation: true,
            num_heads: default_heads(),
            ff_dim: default_ff(),
        }
    }
}

impl QueryPrompterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_queries == 0 || self.k_prompts == 0 {
            return Err(Error::config("n_queries and k_prompts must be ≥ 1"));
        }
        if !(1..=5).contains(&self.levels_used) {
            return Err(Error::config("levels_used must be in 1..=5"));
        }
        if self.supervision_levels == 0 || self.dec_layers % self.supervision_levels != 0 {
            return Err(Error::config("supervision_levels must divide dec_layers"));
        }
        Ok(())
    }
}

/// Transformer-refined pyramid levels plus the assembled mask feature map.
pub struct EncodedLevels {
    /// `[c, H/4, W/4]` mask feature map.
    pub f_m: Tensor,
    /// Refined tokens per used level, finest first, each `[h·w, c]`.
    pub attended: Vec<Tensor>,
    /// Matching position+level codes, each `[h·w, c]`.
    pub pos: Vec<Tensor>,
    pub shapes: Vec<(usize, usize)>,
}

/// Head readout after one supervised decoder stage.
pub struct LevelOutput {
    /// `[N_p, C+1]` category logits (last column = no-object).
    pub categories: Tensor,
    /// `[N_p, c]` mask filters `f̂`.
    pub mask_filters: Tensor,
    /// `[N_p, K_p, c]` sparse prompt embeddings (post-activation).
    pub prompts: Tensor,
    /// `[N_p, H/4, W/4]` coarse mask logits `f̂ · F_m`.
    pub coarse_masks: Tensor,
}

pub struct QueryPrompter {
    pub cfg: QueryPrompterConfig,
    pub n_classes: usize,
    dim: usize,
    level_embed: Param,
    enc: Vec<TransformerEncoderLayer>,
    dec: Vec<TransformerDecoderLayer>,
    query_feat: Param,
    query_pos: Param,
    decoder_norm: LayerNorm,
    cls_head: Linear,
    filter_head: Linear,
    prompt_head: Mlp,
    fm_proj: Conv2d,
    fm_up: Vec<ConvTranspose2d>,
}

impl QueryPrompter {
    pub fn new(
        cfg: QueryPrompterConfig,
        dim: usize,
        n_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if n_classes == 0 {
            return Err(Error::config("need at least one category"));
        }
        let enc = (0..cfg.enc_layers)
            .map(|_| TransformerEncoderLayer::new(rng, dim, cfg.num_heads, cfg.ff_dim))
            .collect();
        let dec = (0..cfg.dec_layers)
            .map(|_| TransformerDecoderLayer::new(rng, dim, cfg.num_heads, cfg.ff_dim))
            .collect();
        // the finest used level sits at stride 2^(l0+1); chain of 2x
        // upsamplings brings it to the stride-4 mask grid
        let finest_used = 6 - cfg.levels_used;
        let fm_up = (0..finest_used - 1)
            .map(|_| ConvTranspose2d::new(rng, dim, dim, 2, 2))
            .collect();
        Ok(QueryPrompter {
            n_classes,
            dim,
            level_embed: Param::new(ArrayD::zeros(IxDyn(&[cfg.levels_used, dim]))),
            enc,
            dec,
            query_feat: Param::new(ArrayD::zeros(IxDyn(&[cfg.n_queries, dim]))),
            query_pos: Param::new(crate::nn::uniform_init(rng, &[cfg.n_queries, dim], dim)),
            decoder_norm: LayerNorm::new(dim),
            cls_head: Linear::new(rng, dim, n_classes + 1),
            filter_head: Linear::new(rng, dim, dim),
            prompt_head: Mlp::new(rng, &[dim, dim, cfg.k_prompts * dim], Activation::Relu),
            fm_proj: Conv2d::new(rng, dim, dim, 1, 1, 0),
            fm_up,
            cfg,
        })
    }

    /// Flatten the used levels, run the transformer encoder, and build the
    /// mask feature map.
    pub fn encode_levels(&self, pyramid: &Pyramid) -> Result<EncodedLevels> {
        let k = self.cfg.levels_used;
        let finest_used = 6 - k;
        let mut flat = Vec::with_capacity(k);
        let mut pos = Vec::with_capacity(k);
        let mut shapes = Vec::with_capacity(k);
        for (idx, j) in (finest_used..=5).enumerate() {
            let lvl = pyramid.level(j);
            let s = lvl.shape().to_vec();
            if s[0] != self.dim {
                return Err(Error::shape("pyramid channel width mismatch"));
            }
            let (h, w) = (s[1], s[2]);
            flat.push(lvl.reshape(&[self.dim, h * w]).permute(&[1, 0]));
            let g = sine_grid(h, w, self.dim);
            let mut v = Vec::with_capacity(h * w * self.dim);
            for yy in 0..h {
                for xx in 0..w {
                    for cc in 0..self.dim {
                        v.push(g[[cc, yy, xx]]);
                    }
                }
            }
            let pe = Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[h * w, self.dim]), v).unwrap());
            let le = self.level_embed.tensor().slice_axis(0, idx, idx + 1);
            pos.push(pe.add(&le));
            shapes.push((h, w));
        }
        let mut x = Tensor::concat(&flat, 0);
        let pos_all = Tensor::concat(&pos, 0);
        for layer in &self.enc {
            x = layer.forward(&x, &pos_all);
        }
        // split the token sequence back into levels
        let mut attended = Vec::with_capacity(k);
        let mut offset = 0;
        for &(h, w) in &shapes {
            attended.push(x.slice_axis(0, offset, offset + h * w));
            offset += h * w;
        }
        // mask features: projected finest pyramid level + upsampled refined
        // tokens of the finest used level
        let (h0, w0) = shapes[0];
        let mut up = attended[0].permute(&[1, 0]).reshape(&[self.dim, h0, w0]);
        for t in &self.fm_up {
            up = t.forward(&up);
        }
        let f_m = self.fm_proj.forward(pyramid.level(1)).add(&up);
        Ok(EncodedLevels { f_m, attended, pos, shapes })
    }

    /// Run the query decoder, emitting a head readout at each supervised
    /// stage (`supervision_levels` of them, the last being the final one).
    pub fn decode_queries(&self, enc: &EncodedLevels) -> Result<Vec<LevelOutput>> {
        let k = enc.attended.len();
        let stride = self.cfg.dec_layers / self.cfg.supervision_levels;
        let mut x = self.query_feat.tensor();
        let qpos = self.query_pos.tensor();
        let mut outputs = Vec::with_capacity(self.cfg.supervision_levels);
        for (i, layer) in self.dec.iter().enumerate() {
            let mem_idx = k - 1 - (i % k); // coarsest → finest, repeating
            x = layer.forward(&x, &qpos, &enc.attended[mem_idx], &enc.pos[mem_idx]);
            if (i + 1) % stride == 0 {
                outputs.push(self.readout(&x, &enc.f_m));
            }
        }
        Ok(outputs)
    }

    fn readout(&self, queries: &Tensor, f_m: &Tensor) -> LevelOutput {
        let xn = self.decoder_norm.forward(queries);
        let categories = self.cls_head.forward(&xn);
        let mask_filters = self.filter_head.forward(&xn);
        let e = self
            .prompt_head
            .forward(&xn)
            .reshape(&[self.cfg.n_queries, self.cfg.k_prompts, self.dim]);
        let prompts = if self.cfg.sine_activation { e.add(&e.sin()) } else { e };
        let s = f_m.shape().to_vec();
        let (h4, w4) = (s[1], s[2]);
        let coarse = mask_filters
            .matmul(&f_m.reshape(&[self.dim, h4 * w4]))
            .reshape(&[self.cfg.n_queries, h4, w4]);
        LevelOutput { categories, mask_filters, prompts, coarse_masks: coarse }
    }

    pub fn forward(&self, pyramid: &Pyramid) -> Result<(EncodedLevels, Vec<LevelOutput>)> {
        let enc = self.encode_levels(pyramid)?;
        let outs = self.decode_queries(&enc)?;
        Ok((enc, outs))
    }

    /// Optimal GT→query assignment under `CE + mask BCE + dice`, evaluated
    /// on detached values. `gt_masks` are soft coverage maps on the coarse
    /// grid; `gt_classes` are 0-based category indices.
    pub fn match_queries(
        &self,
        out: &LevelOutput,
        gt_classes: &[usize],
        gt_masks: &[Array2<f64>],
    ) -> Result<Vec<usize>> {
        if gt_classes.len() != gt_masks.len() {
            return Err(Error::shape("class/mask count mismatch"));
        }
        let n_gt = gt_classes.len();
        if n_gt == 0 {
            return Ok(Vec::new());
        }
        if n_gt > self.cfg.n_queries {
            return Err(Error::domain(format!(
                "{n_gt} instances exceed {} query slots",
                self.cfg.n_queries
            )));
        }
        let logits = out.categories.data();
        let coarse = out.coarse_masks.data();
        let s = coarse.shape().to_vec();
        let (h4, w4) = (s[1], s[2]);
        let npix = (h4 * w4) as f64;
        let mut cost = Array2::<f64>::zeros((self.cfg.n_queries, n_gt));
        for i in 0..self.cfg.n_queries {
            // log-softmax of row i
            let row: Vec<f64> = (0..self.n_classes + 1).map(|c| logits[[i, c]]).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let probs =
                ArrayD::from_shape_fn(IxDyn(&[h4, w4]), |ix| stable_sigmoid(coarse[[i, ix[0], ix[1]]]));
            for (j, (&cls, gt)) in gt_classes.iter().zip(gt_masks).enumerate() {
                if gt.dim() != (h4, w4) {
                    return Err(Error::shape("GT mask must live on the coarse grid"));
                }
                let l_cls = lse - row[cls];
                let mut bce = 0.0;
                for yy in 0..h4 {
                    for xx in 0..w4 {
                        let x = coarse[[i, yy, xx]];
                        let t = gt[[yy, xx]];
                        bce += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
                    }
                }
                let gt_dyn = gt.to_owned().into_dyn();
                let l_dice = crate::tensor::dice_cost(&probs, &gt_dyn);
                cost[[i, j]] = l_cls + bce / npix + l_dice;
            }
        }
        assign_columns(&cost)
    }

    /// Set-prediction loss over all supervised levels. Per level:
    /// `(1/N_p) Σ_i [CE_i + 1[i matched]·(BCE coarse + BCE fine)]`,
    /// with the no-object class down-weighted in the CE and optional dice
    /// terms on both mask resolutions.
    ///
    /// `fine_masks[l][j]` is the decoded mask-logit map for GT `j`'s
    /// matched query at level `l` (any resolution); GT masks are resized to
    /// match by soft-coverage downsampling from `gt_masks_full`. `None`
    /// trains on coarse masks alone (the set-prediction baseline).
    pub fn query_loss(
        &self,
        levels: &[LevelOutput],
        assignments: &[Vec<usize>],
        fine_masks: Option<&[Vec<Tensor>]>,
        gt_classes: &[usize],
        gt_masks_coarse: &[Array2<f64>],
        gt_masks_full: &[crate::mask::Mask],
    ) -> Result<LossReport> {
        if levels.len() != assignments.len()
            || fine_masks.is_some_and(|f| f.len() != levels.len())
        {
            return Err(Error::shape("per-level input counts disagree"));
        }
        let n_p = self.cfg.n_queries as f64;
        let n_classes = self.n_classes;
        let mut weights = vec![1.0; n_classes + 1];
        weights[n_classes] = self.cfg.no_object_weight;
        let mut total: Option<Tensor> = None;
        let mut terms = Vec::new();
        let add = |t: Option<Tensor>, piece: Tensor| -> Option<Tensor> {
            Some(match t {
                Some(acc) => acc.add(&piece),
                None => piece,
            })
        };
        for (l, out) in levels.iter().enumerate() {
            let assign = &assignments[l];
            let fine_level = fine_masks.map(|f| &f[l]);
            if assign.len() != gt_classes.len()
                || fine_level.is_some_and(|f| f.len() != gt_classes.len())
            {
                return Err(Error::shape("assignment/fine-mask count mismatch"));
            }
            let mut targets = vec![n_classes; self.cfg.n_queries];
            for (j, &q) in assign.iter().enumerate() {
                targets[q] = gt_classes[j];
            }
            let ce = out
                .categories
                .cross_entropy(&targets, Some(&weights), Reduction::Sum)
                .scale(1.0 / n_p);
            terms.push((format!("cls.l{l}"), ce.item()));
            total = add(total, ce);

            let s = out.coarse_masks.shape().to_vec();
            let (h4, w4) = (s[1], s[2]);
            let mut coarse_sum: Option<Tensor> = None;
            let mut fine_sum: Option<Tensor> = None;
            let mut dice_sum: Option<Tensor> = None;
            for (j, &q) in assign.iter().enumerate() {
                let gt_c = &gt_masks_coarse[j];
                if gt_c.dim() != (h4, w4) {
                    return Err(Error::shape("coarse GT grid mismatch"));
                }
                let pred_c = out.coarse_masks.slice_axis(0, q, q + 1).reshape(&[h4, w4]);
                let gt_dyn = gt_c.to_owned().into_dyn();
                let bce_c = pred_c.bce_with_logits(&gt_dyn, Reduction::Mean);
                coarse_sum = add(coarse_sum, bce_c);

                let mut dice = if self.cfg.dice_in_mask_loss {
                    Some(pred_c.sigmoid().dice_loss(&gt_dyn))
                } else {
                    None
                };
                if let Some(fl) = fine_level {
                    let fine = &fl[j];
                    let fs = fine.shape().to_vec();
                    let gt_f = crate::mask::downsample_mask_avg(&gt_masks_full[j], fs[0], fs[1]);
                    let gt_f_dyn = gt_f.into_dyn();
                    let bce_f = fine.bce_with_logits(&gt_f_dyn, Reduction::Mean);
                    fine_sum = add(fine_sum, bce_f);
                    if let Some(d) = dice.take() {
                        dice = Some(d.add(&fine.sigmoid().dice_loss(&gt_f_dyn)));
                    }
                }
                if let Some(d) = dice {
                    dice_sum = add(dice_sum, d);
                }
            }
            if let Some(cs) = coarse_sum {
                let cs = cs.scale(1.0 / n_p);
                terms.push((format!("mask_coarse.l{l}"), cs.item()));
                total = add(total, cs);
            }
            if let Some(fs) = fine_sum {
                let fs = fs.scale(1.0 / n_p);
                terms.push((format!("mask_fine.l{l}"), fs.item()));
                total = add(total, fs);
            }
            if let Some(ds) = dice_sum {
                let ds = ds.scale(1.0 / n_p);
                terms.push((format!("mask_dice.l{l}"), ds.item()));
                total = add(total, ds);
            }
        }
        Ok(LossReport::new(total.expect("at least one level"), terms))
    }

    /// Rank queries of one readout by best real-category probability.
    /// Returns `(query index, 1-based category, score)` sorted descending,
    /// truncated to `max_keep`.
    pub fn rank_queries(&self, out: &LevelOutput, max_keep: usize) -> Vec<(usize, usize, f64)> {
        let logits = out.categories.data();
        let mut ranked: Vec<(usize, usize, f64)> = (0..self.cfg.n_queries)
            .map(|i| {
                let row: Vec<f64> =
                    (0..self.n_classes + 1).map(|c| logits[[i, c]]).collect();
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                let (best, prob) = exps[..self.n_classes]
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap();
                (i, best + 1, prob / denom)
            })
            .collect();
        ranked.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
        ranked.truncate(max_keep);
        ranked
    }
}

impl Module for QueryPrompter {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        let j = |s: &str| crate::nn::join(prefix, s);
        out.push((j("level_embed"), self.level_embed.clone()));
        out.push((j("query_feat"), self.query_feat.clone()));
        out.push((j("query_pos"), self.query_pos.clone()));
        for (i, l) in self.enc.iter().enumerate() {
            l.collect_params(&j(&format!("enc.{i}")), out);
        }
        for (i, l) in self.dec.iter().enumerate() {
            l.collect_params(&j(&format!("dec.{i}")), out);
        }
        self.decoder_norm.collect_params(&j("decoder_norm"), out);
        self.cls_head.collect_params(&j("cls_head"), out);
        self.filter_head.collect_params(&j("filter_head"), out);
        self.prompt_head.collect_params(&j("prompt_head"), out);
        self.fm_proj.collect_params(&j("fm_proj"), out);
        for (i, t) in self.fm_up.iter().enumerate() {
            t.collect_params(&j(&format!("fm_up.{i}")), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enhancer::{AggregatorConfig, FeatureAggregator, FeatureSplitter};
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn toy_pyramid(rng: &mut ChaCha8Rng) -> Pyramid {
        let agg = FeatureAggregator::new(AggregatorConfig::default(), 2, 64, 64, rng).unwrap();
        let split = FeatureSplitter::new(64, rng);
        let maps: Vec<Tensor> = (0..2)
            .map(|i| {
                Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[64, 8, 8]), |ix| {
                    ((ix[0] * 13 + ix[1] * 3 + ix[2] + i) % 17) as f64 / 17.0 - 0.4
                }))
            })
            .collect();
        split.split(&agg.aggregate(&maps).unwrap(), (128, 128)).unwrap()
    }

    #[test]
    fn forward_emits_supervised_levels_with_correct_shapes() {
        let mut r = rng();
        let qp = QueryPrompter::new(QueryPrompterConfig::default(), 64, 3, &mut r).unwrap();
        let pyr = toy_pyramid(&mut r);
        let (enc, outs) = qp.forward(&pyr).unwrap();
        assert_eq!(enc.f_m.shape(), &[64, 32, 32]);
        assert_eq!(outs.len(), 3);
        for o in &outs {
            assert_eq!(o.categories.shape(), &[20, 4]);
            assert_eq!(o.mask_filters.shape(), &[20, 64]);
            assert_eq!(o.prompts.shape(), &[20, 5, 64]);
            assert_eq!(o.coarse_masks.shape(), &[20, 32, 32]);
        }
    }

    #[test]
    fn single_supervision_level_emits_only_final() {
        let mut r = rng();
        let cfg = QueryPrompterConfig { supervision_levels: 1, ..Default::default() };
        let qp = QueryPrompter::new(cfg, 64, 3, &mut r).unwrap();
        let pyr = toy_pyramid(&mut r);
        let (_, outs) = qp.forward(&pyr).unwrap();
        assert_eq!(outs.len(), 1);
    }

    #[test]
    fn zero_filters_give_zero_coarse_masks() {
        let mut r = rng();
        let qp = QueryPrompter::new(QueryPrompterConfig::default(), 64, 3, &mut r).unwrap();
        qp.filter_head.w.set(ArrayD::zeros(IxDyn(&[64, 64])));
        if let Some(b) = &qp.filter_head.b {
            b.set(ArrayD::zeros(IxDyn(&[64])));
        }
        let pyr = toy_pyramid(&mut r);
        let (_, outs) = qp.forward(&pyr).unwrap();
        assert!(outs[0].coarse_masks.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matching_is_injective_and_sized() {
        let mut r = rng();
        let qp = QueryPrompter::new(QueryPrompterConfig::default(), 64, 3, &mut r).unwrap();
        let pyr = toy_pyramid(&mut r);
        let (_, outs) = qp.forward(&pyr).unwrap();
        let gt_classes = [0usize, 2, 1];
        let gt_masks: Vec<Array2<f64>> = (0..3)
            .map(|j| {
                Array2::from_shape_fn((32, 32), |(y, x)| {
                    if y / 11 == j && x > 4 { 1.0 } else { 0.0 }
                })
            })
            .collect();
        let a = qp.match_queries(&outs[2], &gt_classes, &gt_masks).unwrap();
        assert_eq!(a.len(), 3);
        let set: std::collections::HashSet<_> = a.iter().collect();
        assert_eq!(set.len(), 3);
        assert!(a.iter().all(|&q| q < 20));
    }

    #[test]
    fn loss_decomposes_and_ignores_unmatched_masks() {
        let mut r = rng();
        let qp = QueryPrompter::new(QueryPrompterConfig::default(), 64, 3, &mut r).unwrap();
        let pyr = toy_pyramid(&mut r);
        let (_, outs) = qp.forward(&pyr).unwrap();
        let gt_classes = [1usize, 0];
        let gt_full: Vec<crate::mask::Mask> = (0..2)
            .map(|j| {
                ndarray::Array2::from_shape_fn((128, 128), |(y, x)| y / 64 == j && x < 100)
            })
            .collect();
        let gt_coarse: Vec<Array2<f64>> = gt_full
            .iter()
            .map(|m| crate::mask::downsample_mask_avg(m, 32, 32))
            .collect();
        let assignments: Vec<Vec<usize>> =
            outs.iter().map(|o| qp.match_queries(o, &gt_classes, &gt_coarse).unwrap()).collect();
        // stand-in fine masks at 32x32 with gradient participation
        let fine: Vec<Vec<Tensor>> = outs
            .iter()
            .zip(&assignments)
            .map(|(o, a)| {
                a.iter()
                    .map(|&q| o.coarse_masks.slice_axis(0, q, q + 1).reshape(&[32, 32]))
                    .collect()
            })
            .collect();
        let report = qp
            .query_loss(&outs, &assignments, Some(&fine), &gt_classes, &gt_coarse, &gt_full)
            .unwrap();
        assert!(report.decomposition_gap() < 1e-6, "gap {}", report.decomposition_gap());
        assert_eq!(report.terms.len(), 9); // 3 levels × (cls + coarse + fine)
        assert!(report.total_value().is_finite());
        // mask terms must gate on the match indicator: recompute with an
        // unmatched query's coarse row perturbed — only cls may change, and
        // it doesn't because logits are untouched
        let matched: std::collections::HashSet<usize> =
            assignments[2].iter().copied().collect();
        let free = (0..20).find(|q| !matched.contains(q)).unwrap();
        let perturbed = {
            let mut arr = outs[2].coarse_masks.data().clone();
            for v in arr.slice_mut(ndarray::s![free, .., ..]).iter_mut() {
                *v += 3.0;
            }
            LevelOutput {
                categories: outs[2].categories.clone(),
                mask_filters: outs[2].mask_filters.clone(),
                prompts: outs[2].prompts.clone(),
                coarse_masks: Tensor::constant(arr),
            }
        };
        let levels2 = [&outs[0], &outs[1], &perturbed];
        let fine2: Vec<Vec<Tensor>> = levels2
            .iter()
            .zip(&assignments)
            .map(|(o, a)| {
                a.iter()
                    .map(|&q| o.coarse_masks.slice_axis(0, q, q + 1).reshape(&[32, 32]))
                    .collect()
            })
            .collect();
        let outs2: Vec<LevelOutput> = levels2
            .iter()
            .map(|o| LevelOutput {
                categories: o.categories.clone(),
                mask_filters: o.mask_filters.clone(),
                prompts: o.prompts.clone(),
                coarse_masks: o.coarse_masks.clone(),
            })
            .collect();
        let report2 = qp
            .query_loss(&outs2, &assignments, Some(&fine2), &gt_classes, &gt_coarse, &gt_full)
            .unwrap();
        assert!(
            (report.total_value() - report2.total_value()).abs() < 1e-12,
            "unmatched query affected the loss"
        );
    }

    #[test]
    fn ranking_is_sorted_and_capped() {
        let mut r = rng();
        let qp = QueryPrompter::new(QueryPrompterConfig::default(), 64, 3, &mut r).unwrap();
        let pyr = toy_pyramid(&mut r);
        let (_, outs) = qp.forward(&pyr).unwrap();
        let ranked = qp.rank_queries(&outs[2], 7);
        assert_eq!(ranked.len(), 7);
        for w in ranked.windows(2) {
            assert!(w[0].2 >= w[1].2);
        }
        for &(_, cat, score) in &ranked {
            assert!((1..=3).contains(&cat));
            assert!((0.0..=1.0).contains(&score));
        }
    }

    #[test]
    fn sine_ablation_changes_prompts() {
        let mut r1 = rng();
        let qp1 = QueryPrompter::new(QueryPrompterConfig::default(), 64, 3, &mut r1).unwrap();
        let mut r2 = rng();
        let cfg = QueryPrompterConfig { sine_activation: false, ..Default::default() };
        let qp2 = QueryPrompter::new(cfg, 64, 3, &mut r2).unwrap();
        let mut rp = ChaCha8Rng::seed_from_u64(77);
        let pyr = toy_pyramid(&mut rp);
        let (_, o1) = qp1.forward(&pyr).unwrap();
        let (_, o2) = qp2.forward(&pyr).unwrap();
        // same weights (same init stream), different activation law
        let e = &o2[2].prompts;
        let want = e.add(&e.sin());
        let got = &o1[2].prompts;
        let dev = want
            .data()
            .iter()
            .zip(got.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-12);
    }
}
