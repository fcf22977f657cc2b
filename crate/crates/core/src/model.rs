//! Pipeline assembly: one `Model` value owns exactly the components its
//! kind needs, so structural claims (the external-head baseline never
//! touches the mask decoder, the point/box baselines never touch a
//! prompter) hold by construction.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchor::{AnchorPrompter, AnchorPrompterConfig};
use crate::data::{AnnotatedSample, ImageData, InstancePrediction};
use crate::encoder::{EncoderConfig, EncoderOutput, ImageEncoder};
use crate::enhancer::{AggregatorConfig, FeatureAggregator, FeatureSplitter, Pyramid};
use crate::error::{Error, Result};
use crate::geometry::BoxF;
use crate::mask::{mask_iou, mask_to_tight_box, Mask};
use crate::nn::{Conv2d, ConvTranspose2d, Linear, Module};
use crate::query::{QueryPrompter, QueryPrompterConfig};
use crate::report::LossReport;
use crate::sam::{PromptEncoder, SamHead, SamHeadConfig, SparsePrompt};
use crate::tensor::{Param, Reduction, Tensor};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    RsprompterAnchor,
    RsprompterQuery,
    SamSeg,
    SamCls,
    SamDet,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::RsprompterAnchor => "rsprompter_anchor",
            ModelKind::RsprompterQuery => "rsprompter_query",
            ModelKind::SamSeg => "sam_seg",
            ModelKind::SamCls => "sam_cls",
            ModelKind::SamDet => "sam_det",
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SegHeadStyle {
    MaskrcnnStyle,
    SetPredictionStyle,
}

/// How the point-grid baseline combines classifier confidence with the
/// decoder's predicted mask IoU.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ClsScoreMode {
    Product,
    Classifier,
    IouPred,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub aggregator: AggregatorConfig,
    #[serde(default)]
    pub sam_head: SamHeadConfig,
    #[serde(default)]
    pub anchor: AnchorPrompterConfig,
    #[serde(default)]
    pub query: QueryPrompterConfig,
    /// External-head style for the `sam_seg` baseline.
    #[serde(default = "default_seg_style")]
    pub seg_style: SegHeadStyle,
    /// Query variant: re-encode coarse masks as dense prompts for the
    /// mask decoder.
    #[serde(default = "default_true")]
    pub dense_prompts: bool,
    /// Train the mask decoder alongside the prompter (ablation: freeze).
    #[serde(default = "default_true")]
    pub train_decoder: bool,
    /// Point-grid side length for the `sam_cls` baseline.
    #[serde(default = "default_grid")]
    pub cls_grid: usize,
    #[serde(default = "default_score_mode")]
    pub cls_score_mode: ClsScoreMode,
}

fn default_seg_style() -> SegHeadStyle {
    SegHeadStyle::MaskrcnnStyle
}
fn default_true() -> bool {
    true
}
fn default_grid() -> usize {
    32
}
fn default_score_mode() -> ClsScoreMode {
    ClsScoreMode::Product
}

impl ModelConfig {
    pub fn with_kind(kind: ModelKind) -> Self {
        let mut cfg: ModelConfig =
            serde_json::from_str(r#"{"kind": "rsprompter_query"}"#).expect("defaults");
        cfg.kind = kind;
        cfg
    }
}

/// RoI mask head for the external-head baseline (class-agnostic 28×28
/// masks pasted back into their boxes).
pub struct RoiMaskHead {
    conv1: Conv2d,
    conv2: Conv2d,
    deconv: ConvTranspose2d,
    out: Conv2d,
    dim: usize,
}

impl RoiMaskHead {
    const POOL: usize = 14;

    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        RoiMaskHead {
            conv1: Conv2d::new(rng, dim, dim, 3, 1, 1),
            conv2: Conv2d::new(rng, dim, dim, 3, 1, 1),
            deconv: ConvTranspose2d::new(rng, dim, dim, 2, 2),
            out: Conv2d::new(rng, dim, 1, 1, 1, 0),
            dim,
        }
    }

    /// `[n, 28, 28]` mask logits for the given image-space boxes.
    pub fn forward(&self, pyramid: &Pyramid, boxes: &[BoxF]) -> Result<Tensor> {
        if boxes.is_empty() {
            return Err(Error::shape("mask head needs at least one box"));
        }
        // pool everything from the stride-4 level: desk objects are small
        let lvl = pyramid.level(1);
        let pooled = lvl.roi_align(boxes, Self::POOL, 1.0 / Pyramid::stride(1) as f64);
        let n = boxes.len();
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let f = pooled
                .slice_axis(0, i, i + 1)
                .reshape(&[self.dim, Self::POOL, Self::POOL]);
            let h = self.conv2.forward(&self.conv1.forward(&f).relu()).relu();
            let m = self.out.forward(&self.deconv.forward(&h).relu());
            rows.push(m.reshape(&[1, 2 * Self::POOL, 2 * Self::POOL]));
        }
        Ok(Tensor::concat(&rows, 0))
    }

    /// Soft 28×28 targets: the GT mask sampled inside each box.
    pub fn targets(gt: &Mask, boxes: &[BoxF]) -> ArrayD<f64> {
        let (h, w) = gt.dim();
        let gt_f = Tensor::constant(
            ArrayD::from_shape_vec(
                IxDyn(&[1, h, w]),
                gt.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            )
            .unwrap(),
        );
        let t = gt_f.roi_align(boxes, 2 * Self::POOL, 1.0);
        let n = boxes.len();
        t.reshape(&[n, 2 * Self::POOL, 2 * Self::POOL]).data().clone()
    }
}

impl Module for RoiMaskHead {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        self.conv1.collect_params(&crate::nn::join(prefix, "conv1"), out);
        self.conv2.collect_params(&crate::nn::join(prefix, "conv2"), out);
        self.deconv.collect_params(&crate::nn::join(prefix, "deconv"), out);
        self.out.collect_params(&crate::nn::join(prefix, "out"), out);
    }
}

/// Small CNN classifying 32×32 instance crops (point-grid baseline).
pub struct CropClassifier {
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Linear,
}

impl CropClassifier {
    pub const CROP: usize = 32;

    pub fn new(n_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        CropClassifier {
            conv1: Conv2d::new(rng, 3, 16, 3, 2, 1),
            conv2: Conv2d::new(rng, 16, 32, 3, 2, 1),
            fc: Linear::new(rng, 32 * 8 * 8, n_classes),
        }
    }

    /// `[3, 32, 32]` crop → `[1, C]` logits.
    pub fn forward(&self, crop: &Tensor) -> Tensor {
        let h = self.conv2.forward(&self.conv1.forward(crop).relu()).relu();
        self.fc.forward(&h.reshape(&[1, 32 * 8 * 8]))
    }
}

impl Module for CropClassifier {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        self.conv1.collect_params(&crate::nn::join(prefix, "conv1"), out);
        self.conv2.collect_params(&crate::nn::join(prefix, "conv2"), out);
        self.fc.collect_params(&crate::nn::join(prefix, "fc"), out);
    }
}

enum Parts {
    Anchor {
        agg: FeatureAggregator,
        split: FeatureSplitter,
        prompter: AnchorPrompter,
        sam: SamHead,
    },
    Query {
        agg: FeatureAggregator,
        split: FeatureSplitter,
        prompter: QueryPrompter,
        sam: SamHead,
        prompt_enc: PromptEncoder,
    },
    SegMaskRcnn {
        agg: FeatureAggregator,
        split: FeatureSplitter,
        det: AnchorPrompter,
        mask_head: RoiMaskHead,
    },
    SegSetPred {
        agg: FeatureAggregator,
        split: FeatureSplitter,
        prompter: QueryPrompter,
    },
    Cls {
        sam: SamHead,
        prompt_enc: PromptEncoder,
        classifier: CropClassifier,
    },
    Det {
        agg: FeatureAggregator,
        split: FeatureSplitter,
        det: AnchorPrompter,
        sam: SamHead,
        prompt_enc: PromptEncoder,
    },
}

pub struct Model {
    pub cfg: ModelConfig,
    pub n_classes: usize,
    pub encoder: ImageEncoder,
    parts: Parts,
    pub trained: bool,
}

impl Model {
    pub fn new(cfg: ModelConfig, n_classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let encoder = ImageEncoder::new(cfg.encoder.clone())?;
        let dim = cfg.encoder.embed_dim;
        let n_inter = cfg.encoder.selected_layers().len();
        let mk_agg = |rng: &mut ChaCha8Rng| {
            FeatureAggregator::new(cfg.aggregator.clone(), n_inter, dim, dim, rng)
        };
        let parts = match cfg.kind {
            ModelKind::RsprompterAnchor => Parts::Anchor {
                agg: mk_agg(rng)?,
                split: FeatureSplitter::new(dim, rng),
                prompter: AnchorPrompter::new(cfg.anchor.clone(), dim, n_classes, rng)?,
                sam: SamHead::new(cfg.sam_head.clone(), rng)?,
            },
            ModelKind::RsprompterQuery => Parts::Query {
                agg: mk_agg(rng)?,
                split: FeatureSplitter::new(dim, rng),
                prompter: QueryPrompter::new(cfg.query.clone(), dim, n_classes, rng)?,
                sam: SamHead::new(cfg.sam_head.clone(), rng)?,
                prompt_enc: PromptEncoder::new(dim, rng),
            },
            ModelKind::SamSeg => match cfg.seg_style {
                SegHeadStyle::MaskrcnnStyle => Parts::SegMaskRcnn {
                    agg: mk_agg(rng)?,
                    split: FeatureSplitter::new(dim, rng),
                    det: AnchorPrompter::new(cfg.anchor.clone(), dim, n_classes, rng)?,
                    mask_head: RoiMaskHead::new(dim, rng),
                },
                SegHeadStyle::SetPredictionStyle => Parts::SegSetPred {
                    agg: mk_agg(rng)?,
                    split: FeatureSplitter::new(dim, rng),
                    prompter: QueryPrompter::new(cfg.query.clone(), dim, n_classes, rng)?,
                },
            },
            ModelKind::SamCls => Parts::Cls {
                sam: SamHead::new(cfg.sam_head.clone(), rng)?,
                prompt_enc: PromptEncoder::new(dim, rng),
                classifier: CropClassifier::new(n_classes, rng),
            },
            ModelKind::SamDet => Parts::Det {
                agg: mk_agg(rng)?,
                split: FeatureSplitter::new(dim, rng),
                det: AnchorPrompter::new(cfg.anchor.clone(), dim, n_classes, rng)?,
                sam: SamHead::new(cfg.sam_head.clone(), rng)?,
                prompt_enc: PromptEncoder::new(dim, rng),
            },
        };
        let model = Model { cfg, n_classes, encoder, parts, trained: false };
        if !model.cfg.train_decoder {
            if let Some(sam) = model.sam_head() {
                sam.set_trainable(false);
            }
        }
        Ok(model)
    }

    pub fn kind(&self) -> ModelKind {
        self.cfg.kind
    }

    fn sam_head(&self) -> Option<&SamHead> {
        match &self.parts {
            Parts::Anchor { sam, .. } | Parts::Query { sam, .. } | Parts::Cls { sam, .. }
            | Parts::Det { sam, .. } => Some(sam),
            Parts::SegMaskRcnn { .. } | Parts::SegSetPred { .. } => None,
        }
    }

    /// Frozen forward pass of the backbone.
    pub fn embed(&self, image: &ImageData) -> Result<EncoderOutput> {
        self.encoder.encode(&image.to_chw())
    }

    fn build_pyramid(
        agg: &FeatureAggregator,
        split: &FeatureSplitter,
        enc: &EncoderOutput,
        image_hw: (usize, usize),
    ) -> Result<Pyramid> {
        let maps: Vec<Tensor> = enc
            .intermediates
            .iter()
            .map(|m| Tensor::constant(m.clone().into_dyn()))
            .collect();
        split.split(&agg.aggregate(&maps)?, image_hw)
    }

    fn f_img_tensor(enc: &EncoderOutput) -> Tensor {
        Tensor::constant(enc.f_img.clone().into_dyn())
    }

    fn prompt_rows(prompts: &Tensor, row: usize) -> Vec<SparsePrompt> {
        let k = prompts.shape()[1];
        let c = prompts.shape()[2];
        let block = prompts.slice_axis(0, row, row + 1).reshape(&[k, c]);
        (0..k)
            .map(|i| SparsePrompt::learned(block.slice_axis(0, i, i + 1).reshape(&[c])))
            .collect()
    }

    /// 0-based class indices of a sample (annotations store 1-based ids).
    fn classes0(sample: &AnnotatedSample) -> Vec<usize> {
        sample.categories.iter().map(|&c| c - 1).collect()
    }

    /// Training loss for one annotated image. The caller provides the
    /// (cacheable) encoder output; `rng` drives anchor/proposal sampling
    /// and point picking only.
    pub fn loss(
        &self,
        enc: &EncoderOutput,
        sample: &AnnotatedSample,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossReport> {
        let hw = (sample.image.h, sample.image.w);
        let classes0 = Self::classes0(sample);
        match &self.parts {
            Parts::Anchor { agg, split, prompter, sam } => {
                let pyr = Self::build_pyramid(agg, split, enc, hw)?;
                let rpn = prompter.rpn_forward(&pyr);
                let rpn_sample = prompter.rpn_targets(&rpn.anchors, &sample.boxes, rng);
                let props = prompter.propose(&rpn, hw, true);
                let head_sample = prompter.head_targets(&props, &sample.boxes, &classes0, rng);
                let head_out = prompter.roi_heads(&pyr, &head_sample.boxes)?;
                let f_img = Self::f_img_tensor(enc);
                let fine: Vec<Tensor> = head_sample
                    .pos
                    .iter()
                    .map(|&p| {
                        let sparse = Self::prompt_rows(&head_out.prompts, p);
                        sam.decode(&f_img, None, &sparse, hw)
                            .map(|d| d.primary_mask_native())
                    })
                    .collect::<Result<_>>()?;
                prompter.anchor_loss(&rpn, &rpn_sample, &head_out, &head_sample, &fine, &sample.masks)
            }
            Parts::Query { agg, split, prompter, sam, prompt_enc } => {
                let pyr = Self::build_pyramid(agg, split, enc, hw)?;
                let (encl, outs) = prompter.forward(&pyr)?;
                let fs = encl.f_m.shape().to_vec();
                let (h4, w4) = (fs[1], fs[2]);
                let gt_coarse: Vec<Array2<f64>> = sample
                    .masks
                    .iter()
                    .map(|m| crate::mask::downsample_mask_avg(m, h4, w4))
                    .collect();
                let f_img = Self::f_img_tensor(enc);
                let grid = (enc.f_img.dim().1, enc.f_img.dim().2);
                let mut assignments = Vec::with_capacity(outs.len());
                let mut fine = Vec::with_capacity(outs.len());
                for out in &outs {
                    let assign = prompter.match_queries(out, &classes0, &gt_coarse)?;
                    let mut level_fine = Vec::with_capacity(assign.len());
                    for &q in &assign {
                        let sparse = Self::prompt_rows(&out.prompts, q);
                        let dense = if self.cfg.dense_prompts {
                            let coarse_q =
                                out.coarse_masks.slice_axis(0, q, q + 1).reshape(&[h4, w4]);
                            Some(prompt_enc.encode_mask(&coarse_q, grid)?)
                        } else {
                            None
                        };
                        let dec = sam.decode(&f_img, dense.as_ref(), &sparse, hw)?;
                        level_fine.push(dec.primary_mask_native());
                    }
                    assignments.push(assign);
                    fine.push(level_fine);
                }
                prompter.query_loss(
                    &outs,
                    &assignments,
                    Some(&fine),
                    &classes0,
                    &gt_coarse,
                    &sample.masks,
                )
            }
            Parts::SegMaskRcnn { agg, split, det, mask_head } => {
                let pyr = Self::build_pyramid(agg, split, enc, hw)?;
                let rpn = det.rpn_forward(&pyr);
                let rpn_sample = det.rpn_targets(&rpn.anchors, &sample.boxes, rng);
                let props = det.propose(&rpn, hw, true);
                let head_sample = det.head_targets(&props, &sample.boxes, &classes0, rng);
                let head_out = det.roi_heads(&pyr, &head_sample.boxes)?;
                let base =
                    det.anchor_loss(&rpn, &rpn_sample, &head_out, &head_sample, &[], &sample.masks)?;
                if head_sample.pos.is_empty() {
                    return Ok(base);
                }
                let n = head_sample.boxes.len() as f64;
                let fg_boxes: Vec<BoxF> =
                    head_sample.pos.iter().map(|&p| head_sample.boxes[p]).collect();
                let logits = mask_head.forward(&pyr, &fg_boxes)?;
                let mut mask_sum: Option<Tensor> = None;
                for (p, &j) in head_sample.matched_gt.iter().enumerate() {
                    let target = RoiMaskHead::targets(&sample.masks[j], &[fg_boxes[p]]);
                    let pred = logits.slice_axis(0, p, p + 1);
                    let b = pred.bce_with_logits(&target, Reduction::Mean);
                    mask_sum = Some(match mask_sum {
                        Some(acc) => acc.add(&b),
                        None => b,
                    });
                }
                let mask_term = mask_sum.unwrap().scale(1.0 / n);
                let term_val = mask_term.item();
                let mut report = LossReport::new(base.total.add(&mask_term), base.terms);
                report.terms.push(("mask".to_string(), term_val));
                Ok(report)
            }
            Parts::SegSetPred { agg, split, prompter } => {
                let pyr = Self::build_pyramid(agg, split, enc, hw)?;
                let (encl, outs) = prompter.forward(&pyr)?;
                let fs = encl.f_m.shape().to_vec();
                let gt_coarse: Vec<Array2<f64>> = sample
                    .masks
                    .iter()
                    .map(|m| crate::mask::downsample_mask_avg(m, fs[1], fs[2]))
                    .collect();
                let assignments: Vec<Vec<usize>> = outs
                    .iter()
                    .map(|o| prompter.match_queries(o, &classes0, &gt_coarse))
                    .collect::<Result<_>>()?;
                prompter.query_loss(
                    &outs,
                    &assignments,
                    None,
                    &classes0,
                    &gt_coarse,
                    &sample.masks,
                )
            }
            Parts::Cls { sam, prompt_enc, classifier } => {
                let f_img = Self::f_img_tensor(enc);
                let n = sample.masks.len().max(1) as f64;
                let mut mask_sum: Option<Tensor> = None;
                let mut iou_sum: Option<Tensor> = None;
                let mut cls_sum: Option<Tensor> = None;
                for (j, gt) in sample.masks.iter().enumerate() {
                    let (py, px) = random_foreground_pixel(gt, rng)
                        .ok_or_else(|| Error::domain("empty GT mask"))?;
                    let pts = prompt_enc
                        .encode_points(&[(px as f64 + 0.5, py as f64 + 0.5, true)], hw)?;
                    let dec = sam.decode(&f_img, None, &pts, hw)?;
                    let native = dec.primary_mask_native();
                    let ns = native.shape().to_vec();
                    let gt_native = crate::mask::downsample_mask_avg(gt, ns[0], ns[1]);
                    let gt_dyn = gt_native.clone().into_dyn();
                    // BCE + dice: foreground is sparse, and BCE alone lets
                    // the decoder drift to all-background
                    let b = native
                        .bce_with_logits(&gt_dyn, Reduction::Mean)
                        .add(&native.sigmoid().dice_loss(&gt_dyn));
                    mask_sum = Some(match mask_sum {
                        Some(acc) => acc.add(&b),
                        None => b,
                    });
                    // supervise predicted IoU toward the achieved overlap
                    let actual = soft_mask_iou(native.data(), &gt_native);
                    let diff = dec.iou.slice_axis(0, 0, 1).add_scalar(-actual);
                    let sq = diff.square().sum_all();
                    iou_sum = Some(match iou_sum {
                        Some(acc) => acc.add(&sq),
                        None => sq,
                    });
                    let crop = instance_crop(&sample.image, gt, 9)?;
                    let logits = classifier.forward(&Tensor::constant(crop.into_dyn()));
                    let ce = logits.cross_entropy(&[classes0[j]], None, Reduction::Sum);
                    cls_sum = Some(match cls_sum {
                        Some(acc) => acc.add(&ce),
                        None => ce,
                    });
                }
                let mask_term = mask_sum.ok_or_else(|| Error::domain("sample has no instances"))?
                    .scale(1.0 / n);
                let iou_term = iou_sum.unwrap().scale(1.0 / n);
                let cls_term = cls_sum.unwrap().scale(1.0 / n);
                let terms = vec![
                    ("mask".to_string(), mask_term.item()),
                    ("iou".to_string(), iou_term.item()),
                    ("cls".to_string(), cls_term.item()),
                ];
                let total = mask_term.add(&iou_term).add(&cls_term);
                Ok(LossReport::new(total, terms))
            }
            Parts::Det { agg, split, det, sam, prompt_enc } => {
                let pyr = Self::build_pyramid(agg, split, enc, hw)?;
                let rpn = det.rpn_forward(&pyr);
                let rpn_sample = det.rpn_targets(&rpn.anchors, &sample.boxes, rng);
                let props = det.propose(&rpn, hw, true);
                let head_sample = det.head_targets(&props, &sample.boxes, &classes0, rng);
                let head_out = det.roi_heads(&pyr, &head_sample.boxes)?;
                let base =
                    det.anchor_loss(&rpn, &rpn_sample, &head_out, &head_sample, &[], &sample.masks)?;
                // promptable mask training from GT boxes
                let f_img = Self::f_img_tensor(enc);
                let n = sample.masks.len().max(1) as f64;
                let mut mask_sum: Option<Tensor> = None;
                let mut iou_sum: Option<Tensor> = None;
                for (j, gt) in sample.masks.iter().enumerate() {
                    let sparse = prompt_enc.encode_box(sample.boxes[j], hw)?;
                    let dec = sam.decode(&f_img, None, &sparse, hw)?;
                    let native = dec.primary_mask_native();
                    let ns = native.shape().to_vec();
                    let gt_native = crate::mask::downsample_mask_avg(gt, ns[0], ns[1]);
                    let gt_dyn = gt_native.clone().into_dyn();
                    let b = native
                        .bce_with_logits(&gt_dyn, Reduction::Mean)
                        .add(&native.sigmoid().dice_loss(&gt_dyn));
                    mask_sum = Some(match mask_sum {
                        Some(acc) => acc.add(&b),
                        None => b,
                    });
                    let actual = soft_mask_iou(native.data(), &gt_native);
                    let diff = dec.iou.slice_axis(0, 0, 1).add_scalar(-actual);
                    let sq = diff.square().sum_all();
                    iou_sum = Some(match iou_sum {
                        Some(acc) => acc.add(&sq),
                        None => sq,
                    });
                }
                let mask_term = mask_sum
                    .ok_or_else(|| Error::domain("sample has no instances"))?
                    .scale(1.0 / n);
                let iou_term = iou_sum.unwrap().scale(1.0 / n);
                let mvals = (mask_term.item(), iou_term.item());
                let total = base.total.add(&mask_term).add(&iou_term);
                let mut terms = base.terms;
                terms.push(("sam_mask".to_string(), mvals.0));
                terms.push(("sam_iou".to_string(), mvals.1));
                Ok(LossReport::new(total, terms))
            }
        }
    }

    /// Inference for one image given its encoder output.
    pub fn predict_from(
        &self,
        enc: &EncoderOutput,
        image: &ImageData,
    ) -> Result<Vec<InstancePrediction>> {
        let hw = (image.h, image.w);
        match &self.parts {
            Parts::Anchor { agg, split, prompter, sam } => {
                let pyr = Self::build_pyramid(agg, split, enc, hw)?;
                let rpn = prompter.rpn_forward(&pyr);
                let props = prompter.propose(&rpn, hw, false);
                if props.is_empty() {
                    return Ok(Vec::new());
                }
                let boxes: Vec<BoxF> = props.iter().map(|p| p.bbox).collect();
                let head_out = prompter.roi_heads(&pyr, &boxes)?;
                let f_img = Self::f_img_tensor(enc);
                let mut preds = Vec::new();
                for (bbox, cat, score, row) in prompter.detections(&head_out, &boxes, hw) {
                    let sparse = Self::prompt_rows(&head_out.prompts, row);
                    let dec = sam.decode(&f_img, None, &sparse, hw)?;
                    let mask = binarize_logits(dec.primary_mask().data());
                    if mask.iter().any(|&b| b) {
                        preds.push(InstancePrediction { category_id: cat, score, bbox, mask });
                    }
                }
                Ok(preds)
            }
            Parts::Query { agg, split, prompter, sam, prompt_enc } => {
                let pyr = Self::build_pyramid(agg, split, enc, hw)?;
                let (encl, outs) = prompter.forward(&pyr)?;
                let out = outs.last().expect("at least one level");
                let fs = encl.f_m.shape().to_vec();
                let grid = (enc.f_img.dim().1, enc.f_img.dim().2);
                let f_img = Self::f_img_tensor(enc);
                let mut preds = Vec::new();
                for (q, cat, score) in prompter.rank_queries(out, 100) {
                    let sparse = Self::prompt_rows(&out.prompts, q);
                    let dense = if self.cfg.dense_prompts {
                        let coarse_q =
                            out.coarse_masks.slice_axis(0, q, q + 1).reshape(&[fs[1], fs[2]]);
                        Some(prompt_enc.encode_mask(&coarse_q, grid)?)
                    } else {
                        None
                    };
                    let dec = sam.decode(&f_img, dense.as_ref(), &sparse, hw)?;
                    let mask = binarize_logits(dec.primary_mask().data());
                    if let Ok(bbox) = mask_to_tight_box(&mask) {
                        preds.push(InstancePrediction { category_id: cat, score, bbox, mask });
                    }
                }
                Ok(preds)
            }
            Parts::SegMaskRcnn { agg, split, det, mask_head } => {
                let pyr = Self::build_pyramid(agg, split, enc, hw)?;
                let rpn = det.rpn_forward(&pyr);
                let props = det.propose(&rpn, hw, false);
                if props.is_empty() {
                    return Ok(Vec::new());
                }
                let boxes: Vec<BoxF> = props.iter().map(|p| p.bbox).collect();
                let head_out = det.roi_heads(&pyr, &boxes)?;
                let dets = det.detections(&head_out, &boxes, hw);
                if dets.is_empty() {
                    return Ok(Vec::new());
                }
                let det_boxes: Vec<BoxF> = dets.iter().map(|d| d.0).collect();
                let logits = mask_head.forward(&pyr, &det_boxes)?;
                let mut preds = Vec::new();
                for (i, (bbox, cat, score, _)) in dets.into_iter().enumerate() {
                    let mask = paste_roi_mask(logits.data(), i, &bbox, hw);
                    if mask.iter().any(|&b| b) {
                        preds.push(InstancePrediction { category_id: cat, score, bbox, mask });
                    }
                }
                Ok(preds)
            }
            Parts::SegSetPred { agg, split, prompter } => {
                let pyr = Self::build_pyramid(agg, split, enc, hw)?;
                let (_, outs) = prompter.forward(&pyr)?;
                let out = outs.last().expect("at least one level");
                let s = out.coarse_masks.shape().to_vec();
                let mut preds = Vec::new();
                for (q, cat, score) in prompter.rank_queries(out, 100) {
                    let coarse =
                        out.coarse_masks.slice_axis(0, q, q + 1).reshape(&[1, s[1], s[2]]);
                    let full = coarse.upsample_bilinear(hw.0, hw.1);
                    let mask = binarize_logits(&full.data().clone());
                    if let Ok(bbox) = mask_to_tight_box(&mask) {
                        preds.push(InstancePrediction { category_id: cat, score, bbox, mask });
                    }
                }
                Ok(preds)
            }
            Parts::Cls { sam, prompt_enc, classifier } => {
                let f_img = Self::f_img_tensor(enc);
                let points = PromptEncoder::point_grid(self.cfg.cls_grid, hw);
                // decode every grid point; dedup on native-resolution masks
                let mut cands: Vec<(Mask, Mask, f64)> = Vec::new(); // (full, native, iou_pred)
                for (x, y) in points {
                    let pts = prompt_enc.encode_points(&[(x, y, true)], hw)?;
                    let dec = sam.decode(&f_img, None, &pts, hw)?;
                    let native = binarize_logits(dec.primary_mask_native().data());
                    if !native.iter().any(|&b| b) {
                        continue;
                    }
                    let full = binarize_logits(dec.primary_mask().data());
                    if !full.iter().any(|&b| b) {
                        continue;
                    }
                    cands.push((full, native, dec.iou.data()[0]));
                }
                // greedy NMS by predicted IoU at mask-IoU 0.7
                let mut order: Vec<usize> = (0..cands.len()).collect();
                order.sort_by(|&a, &b| {
                    cands[b].2.partial_cmp(&cands[a].2).unwrap().then(a.cmp(&b))
                });
                let mut kept: Vec<usize> = Vec::new();
                for i in order {
                    if kept.iter().all(|&k| mask_iou(&cands[i].1, &cands[k].1) <= 0.7) {
                        kept.push(i);
                    }
                    if kept.len() >= 100 {
                        break;
                    }
                }
                let mut preds = Vec::new();
                for k in kept {
                    let (full, _, iou_pred) = &cands[k];
                    let crop = match instance_crop(image, full, 9) {
                        Ok(c) => c,
                        Err(_) => continue,
                    };
                    let logits = classifier.forward(&Tensor::constant(crop.into_dyn()));
                    let (cat0, prob) = top1(logits.data());
                    let score = match self.cfg.cls_score_mode {
                        ClsScoreMode::Product => prob * iou_pred,
                        ClsScoreMode::Classifier => prob,
                        ClsScoreMode::IouPred => *iou_pred,
                    };
                    let bbox = mask_to_tight_box(full)?;
                    preds.push(InstancePrediction {
                        category_id: cat0 + 1,
                        score,
                        bbox,
                        mask: full.clone(),
                    });
                }
                preds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
                preds.truncate(100);
                Ok(preds)
            }
            Parts::Det { agg, split, det, sam, prompt_enc } => {
                let pyr = Self::build_pyramid(agg, split, enc, hw)?;
                let rpn = det.rpn_forward(&pyr);
                let props = det.propose(&rpn, hw, false);
                if props.is_empty() {
                    return Ok(Vec::new());
                }
                let boxes: Vec<BoxF> = props.iter().map(|p| p.bbox).collect();
                let head_out = det.roi_heads(&pyr, &boxes)?;
                let dets = det.detections(&head_out, &boxes, hw);
                let f_img = Self::f_img_tensor(enc);
                let mut out = Vec::new();
                for (bbox, cat, score, _) in dets {
                    out.extend(self.box_to_mask(&f_img, sam, prompt_enc, bbox, cat, score, hw)?);
                }
                Ok(out)
            }
        }
    }

    /// Decode masks for externally supplied boxes (the oracle box source).
    /// Scores are 1.0 and categories are taken verbatim.
    pub fn predict_from_boxes(
        &self,
        enc: &EncoderOutput,
        boxes: &[BoxF],
        categories: &[usize],
        image_hw: (usize, usize),
    ) -> Result<Vec<InstancePrediction>> {
        let (sam, prompt_enc) = match &self.parts {
            Parts::Det { sam, prompt_enc, .. } => (sam, prompt_enc),
            _ => return Err(Error::runtime("box-driven decoding requires the sam_det pipeline")),
        };
        if boxes.len() != categories.len() {
            return Err(Error::shape("one category per box required"));
        }
        let f_img = Self::f_img_tensor(enc);
        let mut out = Vec::new();
        for (b, &cat) in boxes.iter().zip(categories) {
            out.extend(self.box_to_mask(&f_img, sam, prompt_enc, *b, cat, 1.0, image_hw)?);
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn box_to_mask(
        &self,
        f_img: &Tensor,
        sam: &SamHead,
        prompt_enc: &PromptEncoder,
        bbox: BoxF,
        cat: usize,
        score: f64,
        hw: (usize, usize),
    ) -> Result<Option<InstancePrediction>> {
        let sparse = prompt_enc.encode_box(bbox, hw)?;
        let dec = sam.decode(f_img, None, &sparse, hw)?;
        let mask = binarize_logits(dec.primary_mask().data());
        Ok(if mask.iter().any(|&b| b) {
            Some(InstancePrediction { category_id: cat, score, bbox, mask })
        } else {
            None
        })
    }

    /// Full-image convenience wrapper around `embed` + `predict_from`.
    pub fn predict(&self, image: &ImageData) -> Result<Vec<InstancePrediction>> {
        let enc = self.embed(image)?;
        self.predict_from(&enc, image)
    }

    /// Classifier forward used by the point-grid baseline's sanity check.
    pub fn classify_crop(&self, crop: &Array3<f64>) -> Result<(usize, f64)> {
        match &self.parts {
            Parts::Cls { classifier, .. } => {
                let logits = classifier.forward(&Tensor::constant(crop.clone().into_dyn()));
                let (c, p) = top1(logits.data());
                Ok((c + 1, p))
            }
            _ => Err(Error::runtime("crop classifier only exists in the sam_cls pipeline")),
        }
    }
}

impl Module for Model {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        let j = |s: &str| crate::nn::join(prefix, s);
        for (name, p) in self.encoder.named_params() {
            out.push((j(&format!("encoder.{name}")), p));
        }
        match &self.parts {
            Parts::Anchor { agg, split, prompter, sam } => {
                agg.collect_params(&j("aggregator"), out);
                split.collect_params(&j("splitter"), out);
                prompter.collect_params(&j("prompter"), out);
                sam.collect_params(&j("sam"), out);
            }
            Parts::Query { agg, split, prompter, sam, prompt_enc } => {
                agg.collect_params(&j("aggregator"), out);
                split.collect_params(&j("splitter"), out);
                prompter.collect_params(&j("prompter"), out);
                sam.collect_params(&j("sam"), out);
                prompt_enc.collect_params(&j("prompt_enc"), out);
            }
            Parts::SegMaskRcnn { agg, split, det, mask_head } => {
                agg.collect_params(&j("aggregator"), out);
                split.collect_params(&j("splitter"), out);
                det.collect_params(&j("detector"), out);
                mask_head.collect_params(&j("mask_head"), out);
            }
            Parts::SegSetPred { agg, split, prompter } => {
                agg.collect_params(&j("aggregator"), out);
                split.collect_params(&j("splitter"), out);
                prompter.collect_params(&j("prompter"), out);
            }
            Parts::Cls { sam, prompt_enc, classifier } => {
                sam.collect_params(&j("sam"), out);
                prompt_enc.collect_params(&j("prompt_enc"), out);
                classifier.collect_params(&j("classifier"), out);
            }
            Parts::Det { agg, split, det, sam, prompt_enc } => {
                agg.collect_params(&j("aggregator"), out);
                split.collect_params(&j("splitter"), out);
                det.collect_params(&j("detector"), out);
                sam.collect_params(&j("sam"), out);
                prompt_enc.collect_params(&j("prompt_enc"), out);
            }
        }
    }
}

fn binarize_logits(logits: &ArrayD<f64>) -> Mask {
    let s = logits.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let flat: Vec<bool> = logits.iter().map(|&v| v > 0.0).collect();
    Array2::from_shape_vec((h, w), flat).unwrap()
}

/// Paste a square mask-logit tile into its box on a blank canvas,
/// thresholding at probability 0.5 (logit 0).
fn paste_roi_mask(
    tiles: &ArrayD<f64>,
    tile_idx: usize,
    bbox: &BoxF,
    image_hw: (usize, usize),
) -> Mask {
    let s = tiles.shape();
    let (th, tw) = (s[s.len() - 2], s[s.len() - 1]);
    let (ih, iw) = image_hw;
    let mut out = Array2::from_elem((ih, iw), false);
    let (x1, y1, x2, y2) = (bbox[0], bbox[1], bbox[2], bbox[3]);
    let (bw, bh) = (x2 - x1, y2 - y1);
    if bw <= 0.0 || bh <= 0.0 {
        return out;
    }
    let y_lo = y1.max(0.0).floor() as usize;
    let y_hi = (y2.min(ih as f64).ceil() as usize).min(ih);
    let x_lo = x1.max(0.0).floor() as usize;
    let x_hi = (x2.min(iw as f64).ceil() as usize).min(iw);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            // bilinear sample of the tile at this pixel's box-relative spot
            let u = ((x as f64 + 0.5 - x1) / bw) * tw as f64 - 0.5;
            let v = ((y as f64 + 0.5 - y1) / bh) * th as f64 - 0.5;
            let u0 = u.floor().clamp(0.0, (tw - 1) as f64) as usize;
            let v0 = v.floor().clamp(0.0, (th - 1) as f64) as usize;
            let u1 = (u0 + 1).min(tw - 1);
            let v1 = (v0 + 1).min(th - 1);
            let fu = (u - u0 as f64).clamp(0.0, 1.0);
            let fv = (v - v0 as f64).clamp(0.0, 1.0);
            let val = tiles[[tile_idx, v0, u0]] * (1.0 - fv) * (1.0 - fu)
                + tiles[[tile_idx, v0, u1]] * (1.0 - fv) * fu
                + tiles[[tile_idx, v1, u0]] * fv * (1.0 - fu)
                + tiles[[tile_idx, v1, u1]] * fv * fu;
            out[[y, x]] = val > 0.0;
        }
    }
    out
}

fn random_foreground_pixel(mask: &Mask, rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
    let count = mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return None;
    }
    let pick = rng.gen_range(0..count);
    mask.indexed_iter()
        .filter(|(_, &b)| b)
        .nth(pick)
        .map(|((y, x), _)| (y, x))
}

/// Soft-overlap ratio treated as the IoU supervision target.
fn soft_mask_iou(pred_logits: &ArrayD<f64>, gt_soft: &Array2<f64>) -> f64 {
    let mut inter = 0.0;
    let mut uni = 0.0;
    for (&l, &t) in pred_logits.iter().zip(gt_soft.iter()) {
        let p: f64 = if l > 0.0 { 1.0 } else { 0.0 };
        inter += p.min(t);
        uni += p.max(t);
    }
    if uni <= 0.0 {
        0.0
    } else {
        inter / uni
    }
}

fn top1(logits: &ArrayD<f64>) -> (usize, f64) {
    let row: Vec<f64> = logits.iter().cloned().collect();
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let (best, p) = exps
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    (best, p / denom)
}

/// Cut a classifier crop: take the 2×-enlarged tight box around the mask
/// (clipped to the image), blur everything outside the mask with a box
/// filter, and resize to 32×32.
pub fn instance_crop(image: &ImageData, mask: &Mask, blur_k: usize) -> Result<Array3<f64>> {
    let bbox = mask_to_tight_box(mask)?;
    let (ih, iw) = (image.h as f64, image.w as f64);
    let (cx, cy) = ((bbox[0] + bbox[2]) / 2.0, (bbox[1] + bbox[3]) / 2.0);
    let (hw, hh) = ((bbox[2] - bbox[0]), (bbox[3] - bbox[1]));
    let x1 = (cx - hw).max(0.0).floor() as usize;
    let y1 = (cy - hh).max(0.0).floor() as usize;
    let x2 = ((cx + hw).min(iw).ceil() as usize).max(x1 + 1);
    let y2 = ((cy + hh).min(ih).ceil() as usize).max(y1 + 1);
    let chw = image.to_chw();
    let blurred = crate::mask::box_blur(&chw, blur_k);
    let (ch, cwid) = (y2 - y1, x2 - x1);
    let mut crop = Array3::<f64>::zeros((3, ch, cwid));
    for c in 0..3 {
        for y in 0..ch {
            for x in 0..cwid {
                let (gy, gx) = (y1 + y, x1 + x);
                crop[[c, y, x]] =
                    if mask[[gy, gx]] { chw[[c, gy, gx]] } else { blurred[[c, gy, gx]] };
            }
        }
    }
    let side = CropClassifier::CROP;
    let t = Tensor::constant(crop.into_dyn()).upsample_bilinear(side, side);
    Ok(t.data()
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("crop is [3, s, s]"))
}
