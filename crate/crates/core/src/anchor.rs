//! Anchor-based prompter: a two-stage detector whose second stage emits,
//! besides class and box refinements, the sparse prompt embeddings for the
//! mask head.
//!
//! Stage one is a region proposal network over every pyramid level (3
//! scales × 3 aspect ratios per cell); stage two pools RoI features from
//! the position-coded pyramid with RoIAlign, runs a shared two-layer
//! trunk, and branches into semantic, localization, and prompt heads. The
//! prompt head's output `e` is regularized as `F_sparse = e + sin(e)`.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::enhancer::Pyramid;
use crate::error::{Error, Result};
use crate::geometry::{clip_box, decode_deltas, encode_deltas, nms, pairwise_box_iou, BoxF};
use crate::nn::{Activation, Conv2d, Linear, Mlp, Module};
use crate::report::LossReport;
use crate::tensor::{Param, Reduction, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AnchorPrompterConfig {
    #[serde(default = "default_k")]
    pub k_prompts: usize,
    /// Anchor side lengths as multiples of the level stride.
    #[serde(default = "default_scales")]
    pub anchor_scales: Vec<f64>,
    /// Height/width ratios.
    #[serde(default = "default_ratios")]
    pub anchor_ratios: Vec<f64>,
    #[serde(default = "default_rpn_pos")]
    pub rpn_pos_iou: f64,
    #[serde(default = "default_rpn_neg")]
    pub rpn_neg_iou: f64,
    #[serde(default = "default_rpn_batch")]
    pub rpn_batch: usize,
    #[serde(default = "default_half")]
    pub rpn_pos_fraction: f64,
    #[serde(default = "default_prop_nms")]
    pub proposal_nms_iou: f64,
    #[serde(default = "default_train_props")]
    pub train_proposals: usize,
    #[serde(default = "default_eval_props")]
    pub eval_proposals: usize,
    #[serde(default = "default_head_pos")]
    pub head_pos_iou: f64,
    #[serde(default = "default_head_batch")]
    pub head_batch: usize,
    #[serde(default = "default_quarter")]
    pub head_pos_fraction: f64,
    #[serde(default = "default_roi")]
    pub roi_size: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_rpn_hidden")]
    pub rpn_hidden: usize,
    /// `F_sparse = e + sin(e)`; disabling leaves plain `e` (ablation).
    #[serde(default = "default_true")]
    pub sine_activation: bool,
    /// Add a dice term to the mask loss. Foreground pixels are a few
    /// percent of each image, and plain BCE lets the decoder settle on
    /// all-background; dice makes that a high-loss state.
    #[serde(default)]
    pub dice_in_mask_loss: bool,
    #[serde(default = "default_score")]
    pub score_thresh: f64,
    #[serde(default = "default_final_nms")]
    pub final_nms_iou: f64,
    #[serde(default = "default_max_det")]
    pub max_detections: usize,
}

fn default_k() -> usize {
    5
}
fn default_scales() -> Vec<f64> {
    vec![2.0, 4.0, 8.0]
}
fn default_ratios() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn default_rpn_pos() -> f64 {
    0.7
}
fn default_rpn_neg() -> f64 {
    0.3
}
fn default_rpn_batch() -> usize {
    64
}
fn default_half() -> f64 {
    0.5
}
fn default_prop_nms() -> f64 {
    0.7
}
fn default_train_props() -> usize {
    1000
}
fn default_eval_props() -> usize {
    300
}
fn default_head_pos() -> f64 {
    0.5
}
fn default_head_batch() -> usize {
    32
}
fn default_quarter() -> f64 {
    0.25
}
fn default_roi() -> usize {
    7
}
fn default_hidden() -> usize {
    256
}
fn default_rpn_hidden() -> usize {
    32
}
fn default_true() -> bool {
    true
}
fn default_score() -> f64 {
    0.05
}
fn default_final_nms() -> f64 {
    0.5
}
fn default_max_det() -> usize {
    100
}

impl Default for AnchorPrompterConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl AnchorPrompterConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_prompts == 0 {
            return Err(Error::config("k_prompts must be ≥ 1"));
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return Err(Error::config("need at least one anchor scale and ratio"));
        }
        if !(0.0..=1.0).contains(&self.rpn_neg_iou) || self.rpn_neg_iou >= self.rpn_pos_iou {
            return Err(Error::config("need 0 ≤ rpn_neg_iou < rpn_pos_iou ≤ 1"));
        }
        Ok(())
    }
}

/// One region proposal (image-space box plus objectness).
#[derive(Clone, Copy, Debug)]
pub struct Proposal {
    pub bbox: BoxF,
    pub score: f64,
}

/// Raw per-anchor RPN outputs kept differentiable for the loss.
pub struct RpnOutput {
    /// `[M]` objectness logits over all levels.
    pub obj: Tensor,
    /// `[M, 4]` box deltas.
    pub deltas: Tensor,
    /// Matching anchor boxes (unclipped).
    pub anchors: Vec<BoxF>,
}

/// Second-stage head outputs for a list of boxes.
pub struct AnchorHeadOutput {
    /// `[N, C+1]` category logits (last column = background).
    pub categories: Tensor,
    /// `[N, 4]` class-agnostic box deltas.
    pub box_deltas: Tensor,
    /// `[N, K_p, c]` sparse prompt embeddings (post-activation).
    pub prompts: Tensor,
}

/// Sampled RPN training targets.
pub struct RpnSample {
    /// Indices into the flat anchor list.
    pub indices: Vec<usize>,
    /// 1.0 for object, 0.0 for background, aligned with `indices`.
    pub labels: Vec<f64>,
    /// Regression targets for the positive subset of `indices`.
    pub pos_indices: Vec<usize>,
    pub delta_targets: Vec<[f64; 4]>,
}

/// Sampled second-stage training targets.
pub struct HeadSample {
    /// Boxes the heads run on (sampled proposals, GT boxes appended).
    pub boxes: Vec<BoxF>,
    /// 0-based class per box; `n_classes` = background.
    pub labels: Vec<usize>,
    /// Positions (into `boxes`) of the foreground subset.
    pub pos: Vec<usize>,
    /// GT index matched to each foreground box.
    pub matched_gt: Vec<usize>,
    pub delta_targets: Vec<[f64; 4]>,
}

pub struct AnchorPrompter {
    pub cfg: AnchorPrompterConfig,
    pub n_classes: usize,
    dim: usize,
    rpn_conv: Conv2d,
    rpn_obj: Conv2d,
    rpn_reg: Conv2d,
    trunk1: Linear,
    trunk2: Linear,
    cls_head: Linear,
    box_head: Linear,
    prompt_head: Mlp,
}

impl AnchorPrompter {
    pub fn new(
        cfg: AnchorPrompterConfig,
        dim: usize,
        n_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if n_classes == 0 {
            return Err(Error::config("need at least one category"));
        }
        let a = cfg.anchors_per_cell();
        let roi_feat = dim * cfg.roi_size * cfg.roi_size;
        Ok(AnchorPrompter {
            n_classes,
            dim,
            rpn_conv: Conv2d::new(rng, dim, cfg.rpn_hidden, 3, 1, 1),
            rpn_obj: Conv2d::new(rng, cfg.rpn_hidden, a, 1, 1, 0),
            rpn_reg: Conv2d::new(rng, cfg.rpn_hidden, 4 * a, 1, 1, 0),
            trunk1: Linear::new(rng, roi_feat, cfg.hidden),
            trunk2: Linear::new(rng, cfg.hidden, cfg.hidden),
            cls_head: Linear::new(rng, cfg.hidden, n_classes + 1),
            box_head: Linear::new(rng, cfg.hidden, 4),
            prompt_head: Mlp::new(
                rng,
                &[cfg.hidden, cfg.hidden, cfg.k_prompts * dim],
                Activation::Relu,
            ),
            cfg,
        })
    }

    /// All anchors for the pyramid, flattened level-major then
    /// (anchor, row, column)-major to match the RPN tensor layout.
    pub fn anchors_for(&self, pyramid: &Pyramid) -> Vec<BoxF> {
        let mut out = Vec::new();
        for j in 1..=5 {
            let s = pyramid.level(j).shape().to_vec();
            let (h, w) = (s[1], s[2]);
            let stride = Pyramid::stride(j) as f64;
            for &scale in &self.cfg.anchor_scales {
                for &ratio in &self.cfg.anchor_ratios {
                    let base = scale * stride;
                    let bw = base / ratio.sqrt();
                    let bh = base * ratio.sqrt();
                    for y in 0..h {
                        for x in 0..w {
                            let cx = (x as f64 + 0.5) * stride;
                            let cy = (y as f64 + 0.5) * stride;
                            out.push([cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0]);
                        }
                    }
                }
            }
        }
        out
    }

    /// Run the RPN over every level; outputs align with `anchors_for`.
    pub fn rpn_forward(&self, pyramid: &Pyramid) -> RpnOutput {
        let a = self.cfg.anchors_per_cell();
        let mut objs = Vec::with_capacity(5);
        let mut degs = Vec::with_capacity(5);
        for j in 1..=5 {
            let feat = self.rpn_conv.forward(pyramid.level(j)).relu();
            let s = pyramid.level(j).shape().to_vec();
            let (h, w) = (s[1], s[2]);
            objs.push(self.rpn_obj.forward(&feat).reshape(&[a * h * w]));
            let reg = self
                .rpn_reg
                .forward(&feat)
                .reshape(&[a, 4, h, w])
                .permute(&[0, 2, 3, 1])
                .reshape(&[a * h * w, 4]);
            degs.push(reg);
        }
        RpnOutput {
            obj: Tensor::concat(&objs, 0),
            deltas: Tensor::concat(&degs, 0),
            anchors: self.anchors_for(pyramid),
        }
    }

    /// Decode, clip, score-sort, NMS, and truncate RPN outputs into
    /// proposals. Deterministic: ties break toward lower anchor index.
    pub fn propose(
        &self,
        rpn: &RpnOutput,
        image_hw: (usize, usize),
        training: bool,
    ) -> Vec<Proposal> {
        let keep_n = if training { self.cfg.train_proposals } else { self.cfg.eval_proposals };
        let obj = rpn.obj.data();
        let deltas = rpn.deltas.data();
        let (ih, iw) = image_hw;
        let mut cand: Vec<(usize, f64, BoxF)> = Vec::with_capacity(rpn.anchors.len());
        for (i, anchor) in rpn.anchors.iter().enumerate() {
            let d = [deltas[[i, 0]], deltas[[i, 1]], deltas[[i, 2]], deltas[[i, 3]]];
            let b = clip_box(&decode_deltas(anchor, &d), iw, ih);
            if b[2] - b[0] >= 1.0 && b[3] - b[1] >= 1.0 {
                cand.push((i, crate::tensor::stable_sigmoid(obj[i]), b));
            }
        }
        cand.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
        cand.truncate(1000);
        let boxes: Vec<BoxF> = cand.iter().map(|c| c.2).collect();
        let scores: Vec<f64> = cand.iter().map(|c| c.1).collect();
        let kept = nms(&boxes, &scores, self.cfg.proposal_nms_iou);
        kept.into_iter()
            .take(keep_n)
            .map(|k| Proposal { bbox: boxes[k], score: scores[k] })
            .collect()
    }

    /// Pool RoI features from the position-coded pyramid and run the three
    /// heads. Boxes are assigned to levels by scale (√area of 32 px →
    /// level 2), pooled with RoIAlign, and processed by a shared trunk.
    pub fn roi_heads(&self, pyramid: &Pyramid, boxes: &[BoxF]) -> Result<AnchorHeadOutput> {
        if boxes.is_empty() {
            return Err(Error::shape("roi_heads needs at least one box"));
        }
        let coded = pyramid.with_position_codes();
        let n = boxes.len();
        let mut by_level: Vec<Vec<(usize, BoxF)>> = vec![Vec::new(); 6];
        for (i, b) in boxes.iter().enumerate() {
            let area = ((b[2] - b[0]) * (b[3] - b[1])).max(1e-6);
            let lvl = (2.0 + (area.sqrt() / 32.0).log2()).round().clamp(1.0, 5.0) as usize;
            by_level[lvl].push((i, *b));
        }
        let r = self.cfg.roi_size;
        let mut rows: Vec<Option<Tensor>> = vec![None; n];
        for (lvl, group) in by_level.iter().enumerate().skip(1) {
            if group.is_empty() {
                continue;
            }
            let scale = 1.0 / Pyramid::stride(lvl) as f64;
            let lvl_boxes: Vec<BoxF> = group.iter().map(|(_, b)| *b).collect();
            let pooled = coded.level(lvl).roi_align(&lvl_boxes, r, scale);
            for (slot, &(orig, _)) in group.iter().enumerate() {
                rows[orig] = Some(
                    pooled
                        .slice_axis(0, slot, slot + 1)
                        .reshape(&[1, self.dim * r * r]),
                );
            }
        }
        let feats = Tensor::concat(&rows.into_iter().map(|r| r.unwrap()).collect::<Vec<_>>(), 0);
        let t = self.trunk2.forward(&self.trunk1.forward(&feats).relu()).relu();
        let e = self
            .prompt_head
            .forward(&t)
            .reshape(&[n, self.cfg.k_prompts, self.dim]);
        let prompts = if self.cfg.sine_activation { e.add(&e.sin()) } else { e };
        Ok(AnchorHeadOutput {
            categories: self.cls_head.forward(&t),
            box_deltas: self.box_head.forward(&t),
            prompts,
        })
    }

    /// Label and subsample anchors for RPN training. Guarantees every GT
    /// box at least one positive (its best-overlapping anchor).
    pub fn rpn_targets(
        &self,
        anchors: &[BoxF],
        gt_boxes: &[BoxF],
        rng: &mut ChaCha8Rng,
    ) -> RpnSample {
        let m = anchors.len();
        let mut label = vec![-1i8; m]; // -1 ignore, 0 neg, 1 pos
        let mut matched = vec![usize::MAX; m];
        if gt_boxes.is_empty() {
            label.iter_mut().for_each(|l| *l = 0);
        } else {
            let iou = pairwise_box_iou(anchors, gt_boxes);
            for i in 0..m {
                let (best_gt, best) = argmax_row(&iou, i);
                if best >= self.cfg.rpn_pos_iou {
                    label[i] = 1;
                    matched[i] = best_gt;
                } else if best < self.cfg.rpn_neg_iou {
                    label[i] = 0;
                }
            }
            // force-match each GT's best anchor
            for j in 0..gt_boxes.len() {
                let mut best_i = 0;
                let mut best = -1.0;
                for i in 0..m {
                    if iou[[i, j]] > best {
                        best = iou[[i, j]];
                        best_i = i;
                    }
                }
                label[best_i] = 1;
                matched[best_i] = j;
            }
        }
        let mut pos: Vec<usize> = (0..m).filter(|&i| label[i] == 1).collect();
        let mut neg: Vec<usize> = (0..m).filter(|&i| label[i] == 0).collect();
        pos.shuffle(rng);
        neg.shuffle(rng);
        let n_pos = pos
            .len()
            .min((self.cfg.rpn_batch as f64 * self.cfg.rpn_pos_fraction) as usize);
        let n_neg = neg.len().min(self.cfg.rpn_batch - n_pos);
        pos.truncate(n_pos);
        neg.truncate(n_neg);
        let mut indices = pos.clone();
        indices.extend(&neg);
        let labels: Vec<f64> =
            indices.iter().map(|&i| if label[i] == 1 { 1.0 } else { 0.0 }).collect();
        let delta_targets: Vec<[f64; 4]> = pos
            .iter()
            .map(|&i| encode_deltas(&anchors[i], &gt_boxes[matched[i]]))
            .collect();
        RpnSample { indices, labels, pos_indices: pos, delta_targets }
    }

    /// Label and subsample proposals for the second stage. GT boxes are
    /// appended as proposals so positives always exist.
    pub fn head_targets(
        &self,
        proposals: &[Proposal],
        gt_boxes: &[BoxF],
        gt_classes: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> HeadSample {
        let mut boxes: Vec<BoxF> = proposals.iter().map(|p| p.bbox).collect();
        boxes.extend_from_slice(gt_boxes);
        let bg = self.n_classes;
        let (mut fg, mut bgs): (Vec<(usize, usize)>, Vec<usize>) = (Vec::new(), Vec::new());
        if gt_boxes.is_empty() {
            bgs = (0..boxes.len()).collect();
        } else {
            let iou = pairwise_box_iou(&boxes, gt_boxes);
            for i in 0..boxes.len() {
                let (best_gt, best) = argmax_row(&iou, i);
                if best >= self.cfg.head_pos_iou {
                    fg.push((i, best_gt));
                } else {
                    bgs.push(i);
                }
            }
        }
        fg.shuffle(rng);
        bgs.shuffle(rng);
        let n_pos = fg
            .len()
            .min((self.cfg.head_batch as f64 * self.cfg.head_pos_fraction).ceil() as usize);
        let n_neg = bgs.len().min(self.cfg.head_batch - n_pos);
        fg.truncate(n_pos);
        bgs.truncate(n_neg);
        let mut out_boxes = Vec::with_capacity(n_pos + n_neg);
        let mut labels = Vec::with_capacity(n_pos + n_neg);
        let mut pos = Vec::with_capacity(n_pos);
        let mut matched_gt = Vec::with_capacity(n_pos);
        let mut delta_targets = Vec::with_capacity(n_pos);
        for (slot, &(i, j)) in fg.iter().enumerate() {
            out_boxes.push(boxes[i]);
            labels.push(gt_classes[j]);
            pos.push(slot);
            matched_gt.push(j);
            delta_targets.push(encode_deltas(&boxes[i], &gt_boxes[j]));
        }
        for &i in &bgs {
            out_boxes.push(boxes[i]);
            labels.push(bg);
        }
        HeadSample { boxes: out_boxes, labels, pos, matched_gt, delta_targets }
    }

    /// Two-stage training loss:
    /// `(1/M) Σ_m [BCE_obj + 1[pos]·SmoothL1] + (1/N) Σ_n [CE + 1[fg]·(SmoothL1 + BCE_mask)]`,
    /// plus a dice term on the same masks when `dice_in_mask_loss` is set.
    ///
    /// `fine_masks[p]` are decoded mask logits for `head_sample.pos[p]`
    /// (any resolution); may be empty when no mask supervision applies
    /// (plain detector training).
    pub fn anchor_loss(
        &self,
        rpn: &RpnOutput,
        rpn_sample: &RpnSample,
        head_out: &AnchorHeadOutput,
        head_sample: &HeadSample,
        fine_masks: &[Tensor],
        gt_masks_full: &[crate::mask::Mask],
    ) -> Result<LossReport> {
        if head_out.categories.shape()[0] != head_sample.boxes.len() {
            return Err(Error::shape("head outputs do not match sampled boxes"));
        }
        let with_masks = !fine_masks.is_empty();
        if with_masks && fine_masks.len() != head_sample.pos.len() {
            return Err(Error::shape("one fine mask per foreground sample required"));
        }
        let m = rpn_sample.indices.len().max(1) as f64;
        let obj = rpn.obj.index_select(0, &rpn_sample.indices);
        let labels = Array1::from_vec(rpn_sample.labels.clone()).into_dyn();
        let rpn_obj = obj.bce_with_logits(&labels, Reduction::Sum).scale(1.0 / m);
        let mut terms = vec![("rpn_obj".to_string(), rpn_obj.item())];
        let mut total = rpn_obj;
        if !rpn_sample.pos_indices.is_empty() {
            let d = rpn.deltas.index_select(0, &rpn_sample.pos_indices);
            let t = deltas_to_array(&rpn_sample.delta_targets);
            let rpn_reg = d.smooth_l1(&t, 1.0 / 9.0, Reduction::Sum).scale(1.0 / m);
            terms.push(("rpn_reg".to_string(), rpn_reg.item()));
            total = total.add(&rpn_reg);
        }
        let n = head_sample.boxes.len().max(1) as f64;
        let ce = head_out
            .categories
            .cross_entropy(&head_sample.labels, None, Reduction::Sum)
            .scale(1.0 / n);
        terms.push(("cls".to_string(), ce.item()));
        total = total.add(&ce);
        if !head_sample.pos.is_empty() {
            let d = head_out.box_deltas.index_select(0, &head_sample.pos);
            let t = deltas_to_array(&head_sample.delta_targets);
            let box_term = d.smooth_l1(&t, 1.0 / 9.0, Reduction::Sum).scale(1.0 / n);
            terms.push(("box".to_string(), box_term.item()));
            total = total.add(&box_term);
            if with_masks {
                let mut mask_sum: Option<Tensor> = None;
                let mut dice_sum: Option<Tensor> = None;
                for (p, fine) in fine_masks.iter().enumerate() {
                    let j = head_sample.matched_gt[p];
                    let fs = fine.shape().to_vec();
                    let gt = crate::mask::downsample_mask_avg(&gt_masks_full[j], fs[0], fs[1]);
                    let gt = gt.into_dyn();
                    let b = fine.bce_with_logits(&gt, Reduction::Mean);
                    mask_sum = Some(match mask_sum {
                        Some(acc) => acc.add(&b),
                        None => b,
                    });
                    if self.cfg.dice_in_mask_loss {
                        let d = fine.sigmoid().dice_loss(&gt);
                        dice_sum = Some(match dice_sum {
                            Some(acc) => acc.add(&d),
                            None => d,
                        });
                    }
                }
                let mask_term = mask_sum.unwrap().scale(1.0 / n);
                terms.push(("mask".to_string(), mask_term.item()));
                total = total.add(&mask_term);
                if let Some(ds) = dice_sum {
                    let dice_term = ds.scale(1.0 / n);
                    terms.push(("mask_dice".to_string(), dice_term.item()));
                    total = total.add(&dice_term);
                }
            }
        }
        Ok(LossReport::new(total, terms))
    }

    /// Score, refine, and per-category-NMS eval-time head outputs.
    /// Returns `(box, 1-based category, score, head row)` sorted by
    /// descending score, at most `max_detections`.
    pub fn detections(
        &self,
        head_out: &AnchorHeadOutput,
        boxes: &[BoxF],
        image_hw: (usize, usize),
    ) -> Vec<(BoxF, usize, f64, usize)> {
        let logits = head_out.categories.data();
        let deltas = head_out.box_deltas.data();
        let (ih, iw) = image_hw;
        let mut cand: Vec<(BoxF, usize, f64, usize)> = Vec::new();
        for (i, b) in boxes.iter().enumerate() {
            let row: Vec<f64> = (0..self.n_classes + 1).map(|c| logits[[i, c]]).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            let (best, p) = exps[..self.n_classes]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap();
            let score = p / denom;
            if score < self.cfg.score_thresh {
                continue;
            }
            let d = [deltas[[i, 0]], deltas[[i, 1]], deltas[[i, 2]], deltas[[i, 3]]];
            let refined = clip_box(&decode_deltas(b, &d), iw, ih);
            if refined[2] - refined[0] < 1.0 || refined[3] - refined[1] < 1.0 {
                continue;
            }
            cand.push((refined, best + 1, score, i));
        }
        let mut kept = Vec::new();
        for cat in 1..=self.n_classes {
            let group: Vec<&(BoxF, usize, f64, usize)> =
                cand.iter().filter(|c| c.1 == cat).collect();
            if group.is_empty() {
                continue;
            }
            let gb: Vec<BoxF> = group.iter().map(|g| g.0).collect();
            let gs: Vec<f64> = group.iter().map(|g| g.2).collect();
            for k in nms(&gb, &gs, self.cfg.final_nms_iou) {
                kept.push(*group[k]);
            }
        }
        kept.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.3.cmp(&b.3)));
        kept.truncate(self.cfg.max_detections);
        kept
    }
}

fn argmax_row(m: &Array2<f64>, row: usize) -> (usize, f64) {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (j, &v) in m.row(row).iter().enumerate() {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

fn deltas_to_array(d: &[[f64; 4]]) -> ArrayD<f64> {
    let mut out = ArrayD::zeros(IxDyn(&[d.len(), 4]));
    for (i, row) in d.iter().enumerate() {
        for k in 0..4 {
            out[[i, k]] = row[k];
        }
    }
    out
}

impl Module for AnchorPrompter {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        let j = |s: &str| crate::nn::join(prefix, s);
        self.rpn_conv.collect_params(&j("rpn_conv"), out);
        self.rpn_obj.collect_params(&j("rpn_obj"), out);
        self.rpn_reg.collect_params(&j("rpn_reg"), out);
        self.trunk1.collect_params(&j("trunk1"), out);
        self.trunk2.collect_params(&j("trunk2"), out);
        self.cls_head.collect_params(&j("cls_head"), out);
        self.box_head.collect_params(&j("box_head"), out);
        self.prompt_head.collect_params(&j("prompt_head"), out);
    }
}
