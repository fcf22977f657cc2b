//! Axis-aligned box utilities. Boxes are `[x1, y1, x2, y2]` with the
//! half-open convention: x2/y2 are exclusive, so a single pixel at (5, 7)
//! has the box [5, 7, 6, 8] and width = x2 − x1.

use ndarray::Array2;

pub type BoxF = [f64; 4];

pub fn box_area(b: &BoxF) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn box_iou(a: &BoxF, b: &BoxF) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let union = box_area(a) + box_area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU of every (row, column) pair.
pub fn pairwise_box_iou(rows: &[BoxF], cols: &[BoxF]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((rows.len(), cols.len()));
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in cols.iter().enumerate() {
            out[[i, j]] = box_iou(a, b);
        }
    }
    out
}

pub fn clip_box(b: &BoxF, width: usize, height: usize) -> BoxF {
    [
        b[0].clamp(0.0, width as f64),
        b[1].clamp(0.0, height as f64),
        b[2].clamp(0.0, width as f64),
        b[3].clamp(0.0, height as f64),
    ]
}

pub fn box_center_size(b: &BoxF) -> (f64, f64, f64, f64) {
    let w = b[2] - b[0];
    let h = b[3] - b[1];
    (b[0] + 0.5 * w, b[1] + 0.5 * h, w, h)
}

/// Regression targets of `gt` relative to `anchor`:
/// `(Δx/w, Δy/h, ln(gw/w), ln(gh/h))`.
pub fn encode_deltas(anchor: &BoxF, gt: &BoxF) -> [f64; 4] {
    let (ax, ay, aw, ah) = box_center_size(anchor);
    let (gx, gy, gw, gh) = box_center_size(gt);
    debug_assert!(aw > 0.0 && ah > 0.0, "degenerate anchor");
    [
        (gx - ax) / aw,
        (gy - ay) / ah,
        (gw / aw).ln(),
        (gh / ah).ln(),
    ]
}

/// Inverse of [`encode_deltas`]; log-scale deltas are clamped to keep exp
/// from overflowing on wild predictions.
pub fn decode_deltas(anchor: &BoxF, d: &[f64; 4]) -> BoxF {
    const MAX_LOG_SCALE: f64 = 4.0;
    let (ax, ay, aw, ah) = box_center_size(anchor);
    let cx = ax + d[0] * aw;
    let cy = ay + d[1] * ah;
    let w = aw * d[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let h = ah * d[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
}

/// Greedy non-maximum suppression; returns kept indices in descending score
/// order. Equal scores break ties by lower index, so results are stable.
pub fn nms(boxes: &[BoxF], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms input length mismatch");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&j| box_iou(&boxes[i], &boxes[j]) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}
