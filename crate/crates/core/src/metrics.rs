//! COCO-style average precision: greedy score-descending matching per
//! category and IoU threshold (0.50:0.05:0.95), 101-point interpolated
//! precision, mean over categories that have ground truth.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedSample, InstancePrediction};
use crate::geometry::{box_iou, BoxF};
use crate::mask::{mask_iou, Mask};

pub const MAX_PREDICTIONS_PER_IMAGE: usize = 100;

#[derive(Clone, Debug)]
pub struct GtInstance {
    pub image_id: u64,
    pub category_id: usize,
    pub bbox: BoxF,
    pub mask: Mask,
}

#[derive(Clone, Debug)]
pub struct EvalInstance {
    pub image_id: u64,
    pub category_id: usize,
    pub score: f64,
    pub bbox: BoxF,
    pub mask: Mask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IouType {
    Box,
    Mask,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct ApScores {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category_id: usize,
    pub bbox: Option<ApScores>,
    pub mask: ApScores,
}

/// Evaluation report over both IoU types; box scores are omitted in oracle
/// modes where predicted boxes are copied from ground truth.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ApReport {
    pub ap_box: Option<f64>,
    pub ap_box50: Option<f64>,
    pub ap_box75: Option<f64>,
    pub ap_mask: f64,
    pub ap_mask50: f64,
    pub ap_mask75: f64,
    pub per_category: Vec<CategoryAp>,
}

impl ApReport {
    pub fn compute(preds: &[EvalInstance], gts: &[GtInstance], include_box: bool) -> ApReport {
        let mask_eval = compute_ap(preds, gts, IouType::Mask);
        let box_eval = include_box.then(|| compute_ap(preds, gts, IouType::Box));
        let per_category = mask_eval
            .per_category
            .iter()
            .map(|(cat, mask_scores)| CategoryAp {
                category_id: *cat,
                bbox: box_eval.as_ref().map(|b| {
                    b.per_category
                        .iter()
                        .find(|(c, _)| c == cat)
                        .map(|(_, s)| *s)
                        .unwrap_or_default()
                }),
                mask: *mask_scores,
            })
            .collect();
        let report = ApReport {
            ap_box: box_eval.as_ref().map(|b| b.mean.ap),
            ap_box50: box_eval.as_ref().map(|b| b.mean.ap50),
            ap_box75: box_eval.as_ref().map(|b| b.mean.ap75),
            ap_mask: mask_eval.mean.ap,
            ap_mask50: mask_eval.mean.ap50,
            ap_mask75: mask_eval.mean.ap75,
            per_category,
        };
        // threshold nesting: stricter sweeps can never beat looser ones
        assert!(report.ap_mask50 + 1e-12 >= report.ap_mask);
        assert!(report.ap_mask50 + 1e-12 >= report.ap_mask75);
        if let (Some(b50), Some(b), Some(b75)) = (report.ap_box50, report.ap_box, report.ap_box75)
        {
            assert!(b50 + 1e-12 >= b);
            assert!(b50 + 1e-12 >= b75);
        }
        report
    }
}

pub struct ApEvaluation {
    pub mean: ApScores,
    pub per_category: Vec<(usize, ApScores)>,
}

pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Cap predictions per image, then evaluate AP per category × threshold.
pub fn compute_ap(preds: &[EvalInstance], gts: &[GtInstance], iou_type: IouType) -> ApEvaluation {
    let preds = cap_per_image(preds, MAX_PREDICTIONS_PER_IMAGE);
    let thresholds = iou_thresholds();

    let mut categories: Vec<usize> = gts.iter().map(|g| g.category_id).collect();
    categories.sort_unstable();
    categories.dedup();

    let per_category: Vec<(usize, ApScores)> = categories
        .par_iter()
        .map(|&cat| {
            let aps = category_ap(&preds, gts, cat, iou_type, &thresholds);
            let scores = ApScores {
                ap: aps.iter().sum::<f64>() / thresholds.len() as f64,
                ap50: aps[0],
                ap75: aps[5],
            };
            (cat, scores)
        })
        .collect();

    let n = per_category.len().max(1) as f64;
    let mean = ApScores {
        ap: per_category.iter().map(|(_, s)| s.ap).sum::<f64>() / n,
        ap50: per_category.iter().map(|(_, s)| s.ap50).sum::<f64>() / n,
        ap75: per_category.iter().map(|(_, s)| s.ap75).sum::<f64>() / n,
    };
    ApEvaluation { mean, per_category }
}

fn cap_per_image(preds: &[EvalInstance], cap: usize) -> Vec<EvalInstance> {
    let mut by_image: HashMap<u64, Vec<&EvalInstance>> = HashMap::new();
    for p in preds {
        assert!(p.score.is_finite(), "prediction scores must be finite");
        by_image.entry(p.image_id).or_default().push(p);
    }
    let mut image_ids: Vec<u64> = by_image.keys().cloned().collect();
    image_ids.sort_unstable();
    let mut out = Vec::with_capacity(preds.len());
    for id in image_ids {
        let mut group = by_image.remove(&id).unwrap();
        group.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        group.truncate(cap);
        out.extend(group.into_iter().cloned());
    }
    out
}

/// AP at each threshold for one category.
fn category_ap(
    preds: &[EvalInstance],
    gts: &[GtInstance],
    category: usize,
    iou_type: IouType,
    thresholds: &[f64],
) -> Vec<f64> {
    // predictions of this category in descending score order (stable)
    let mut cat_preds: Vec<&EvalInstance> =
        preds.iter().filter(|p| p.category_id == category).collect();
    cat_preds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());

    // ground truth of this category grouped per image
    let mut gt_by_image: HashMap<u64, Vec<&GtInstance>> = HashMap::new();
    for g in gts.iter().filter(|g| g.category_id == category) {
        gt_by_image.entry(g.image_id).or_default().push(g);
    }
    let n_gt: usize = gt_by_image.values().map(|v| v.len()).sum();

    // IoU of every prediction against every same-image GT, computed once
    let ious: Vec<Vec<f64>> = cat_preds
        .iter()
        .map(|p| {
            gt_by_image
                .get(&p.image_id)
                .map(|gt_list| {
                    gt_list
                        .iter()
                        .map(|g| match iou_type {
                            IouType::Box => box_iou(&p.bbox, &g.bbox),
                            IouType::Mask => mask_iou(&p.mask, &g.mask),
                        })
                        .collect()
                })
                .unwrap_or_default()
        })
        .collect();

    thresholds
        .iter()
        .map(|&t| {
            // greedy matching in score order: best unmatched GT above t
            let mut matched: HashMap<u64, Vec<bool>> = gt_by_image
                .iter()
                .map(|(&id, v)| (id, vec![false; v.len()]))
                .collect();
            let mut tp_flags = Vec::with_capacity(cat_preds.len());
            for (pi, p) in cat_preds.iter().enumerate() {
                let mut best: Option<(usize, f64)> = None;
                if let Some(flags) = matched.get(&p.image_id) {
                    for (gi, &iou) in ious[pi].iter().enumerate() {
                        if flags[gi] || iou < t {
                            continue;
                        }
                        if best.map_or(true, |(_, b)| iou > b) {
                            best = Some((gi, iou));
                        }
                    }
                }
                match best {
                    Some((gi, _)) => {
                        matched.get_mut(&p.image_id).unwrap()[gi] = true;
                        tp_flags.push(true);
                    }
                    None => tp_flags.push(false),
                }
            }
            ap_101(&tp_flags, n_gt)
        })
        .collect()
}

/// 101-point interpolated AP from ordered TP/FP flags.
fn ap_101(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &flag) in tp_flags.iter().enumerate() {
        tp += flag as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // precision envelope: max precision at or beyond each rank
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut total = 0.0;
    let mut k = 0usize;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        while k < recall.len() && recall[k] < r {
            k += 1;
        }
        if k < precision.len() {
            total += precision[k];
        }
    }
    total / 101.0
}

/// Flatten dataset samples into the evaluator's GT form.
pub fn gt_from_samples(samples: &[AnnotatedSample]) -> Vec<GtInstance> {
    samples
        .iter()
        .flat_map(|s| {
            s.boxes
                .iter()
                .zip(&s.categories)
                .zip(&s.masks)
                .map(move |((b, &c), m)| GtInstance {
                    image_id: s.image_id,
                    category_id: c,
                    bbox: *b,
                    mask: m.clone(),
                })
        })
        .collect()
}

/// Attach an image id to raw per-image predictions.
pub fn eval_from_predictions(image_id: u64, preds: &[InstancePrediction]) -> Vec<EvalInstance> {
    preds
        .iter()
        .map(|p| EvalInstance {
            image_id,
            category_id: p.category_id,
            score: p.score,
            bbox: p.bbox,
            mask: p.mask.clone(),
        })
        .collect()
}
