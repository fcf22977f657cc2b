//! Binary-mask utilities: run-length coding, polygon rasterization,
//! connected components, tight boxes, IoU, and resampling helpers.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxF;

pub type Mask = Array2<bool>;

/// Column-major run-length encoding: counts of alternating 0/1 runs scanning
/// down columns, always starting with the zero-run (possibly length 0).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub h: usize,
    pub w: usize,
    pub counts: Vec<usize>,
}

pub fn rle_encode(mask: &Mask) -> Rle {
    let (h, w) = mask.dim();
    let mut counts = Vec::new();
    let mut current = false; // runs start with zeros by convention
    let mut run = 0usize;
    for x in 0..w {
        for y in 0..h {
            let v = mask[[y, x]];
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
    }
    counts.push(run);
    Rle { h, w, counts }
}

pub fn rle_decode(rle: &Rle) -> Result<Mask> {
    let total: usize = rle.counts.iter().sum();
    if total != rle.h * rle.w {
        return Err(Error::domain(format!(
            "rle counts sum {} != {}x{}",
            total, rle.h, rle.w
        )));
    }
    let mut mask = Array2::<bool>::default((rle.h, rle.w));
    let mut value = false;
    let mut pos = 0usize;
    for &run in &rle.counts {
        if value {
            for k in pos..pos + run {
                mask[[k % rle.h, k / rle.h]] = true;
            }
        }
        pos += run;
        value = !value;
    }
    Ok(mask)
}

/// Rasterize a polygon (pixel coordinates) onto an h×w grid: a pixel is set
/// when its center lies inside under the even-odd rule.
pub fn polygon_to_mask(points: &[(f64, f64)], h: usize, w: usize) -> Result<Mask> {
    if points.len() < 3 {
        return Err(Error::domain("polygon needs at least 3 vertices"));
    }
    let mut mask = Array2::<bool>::default((h, w));
    for iy in 0..h {
        let py = iy as f64 + 0.5;
        // gather x-crossings of polygon edges with this scanline
        let mut xs: Vec<f64> = Vec::new();
        for i in 0..points.len() {
            let (x1, y1) = points[i];
            let (x2, y2) = points[(i + 1) % points.len()];
            if (y1 <= py) != (y2 <= py) {
                xs.push(x1 + (py - y1) / (y2 - y1) * (x2 - x1));
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in xs.chunks(2) {
            if pair.len() < 2 {
                break;
            }
            let lo = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let hi = (pair[1] - 0.5).floor().min((w - 1) as f64);
            if hi < 0.0 {
                continue;
            }
            for ix in lo..=hi as usize {
                mask[[iy, ix]] = true;
            }
        }
    }
    Ok(mask)
}

/// 8-connectivity connected components via union-find; components are
/// returned in first-pixel scan order, so output is deterministic.
pub fn connected_components(mask: &Mask) -> Vec<Mask> {
    let (h, w) = mask.dim();
    let mut parent: Vec<u32> = (0..(h * w) as u32).collect();

    fn find(parent: &mut [u32], i: u32) -> u32 {
        let mut root = i;
        while parent[root as usize] != root {
            root = parent[root as usize];
        }
        // path compression
        let mut cur = i;
        while parent[cur as usize] != root {
            let next = parent[cur as usize];
            parent[cur as usize] = root;
            cur = next;
        }
        root
    }

    let idx = |y: usize, x: usize| (y * w + x) as u32;
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            // union with already-scanned neighbors: W, NW, N, NE
            let mut neighbors: Vec<(usize, usize)> = Vec::with_capacity(4);
            if x > 0 {
                neighbors.push((y, x - 1));
            }
            if y > 0 {
                if x > 0 {
                    neighbors.push((y - 1, x - 1));
                }
                neighbors.push((y - 1, x));
                if x + 1 < w {
                    neighbors.push((y - 1, x + 1));
                }
            }
            for (ny, nx) in neighbors {
                if mask[[ny, nx]] {
                    let a = find(&mut parent, idx(y, x));
                    let b = find(&mut parent, idx(ny, nx));
                    if a != b {
                        parent[a.max(b) as usize] = a.min(b);
                    }
                }
            }
        }
    }

    let mut order: Vec<u32> = Vec::new();
    let mut component_of = std::collections::HashMap::<u32, usize>::new();
    let mut components: Vec<Mask> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            let root = find(&mut parent, idx(y, x));
            let ci = *component_of.entry(root).or_insert_with(|| {
                order.push(root);
                components.push(Array2::<bool>::default((h, w)));
                components.len() - 1
            });
            components[ci][[y, x]] = true;
        }
    }
    components
}

/// Split a semantic binary mask into instance masks, dropping components
/// smaller than `min_area` pixels.
pub fn semantic_to_instances(mask: &Mask, min_area: usize) -> Vec<Mask> {
    connected_components(mask)
        .into_iter()
        .filter(|c| mask_area(c) >= min_area)
        .collect()
}

pub fn mask_area(mask: &Mask) -> usize {
    mask.iter().filter(|&&v| v).count()
}

pub fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Minimal half-open box covering all true pixels.
pub fn mask_to_tight_box(mask: &Mask) -> Result<BoxF> {
    let (h, w) = mask.dim();
    let (mut x1, mut y1, mut x2, mut y2) = (w, h, 0usize, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                any = true;
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x + 1);
                y2 = y2.max(y + 1);
            }
        }
    }
    if !any {
        return Err(Error::domain("tight box of an empty mask"));
    }
    Ok([x1 as f64, y1 as f64, x2 as f64, y2 as f64])
}

/// Area-weighted downsample of a binary mask to fractional coverage in [0,1]
/// (soft supervision target at reduced resolution).
pub fn downsample_mask_avg(mask: &Mask, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = mask.dim();
    let mut out = Array2::<f64>::zeros((oh, ow));
    for oy in 0..oh {
        let y0 = oy * h / oh;
        let y1 = ((oy + 1) * h).div_ceil(oh).min(h).max(y0 + 1);
        for ox in 0..ow {
            let x0 = ox * w / ow;
            let x1 = ((ox + 1) * w).div_ceil(ow).min(w).max(x0 + 1);
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += mask[[y, x]] as u8 as f64;
                }
            }
            out[[oy, ox]] = acc / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

pub fn resize_mask_nearest(mask: &Mask, oh: usize, ow: usize) -> Mask {
    let (h, w) = mask.dim();
    let mut out = Array2::<bool>::default((oh, ow));
    for oy in 0..oh {
        let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64) as usize;
        for ox in 0..ow {
            let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64) as usize;
            out[[oy, ox]] = mask[[sy.min(h - 1), sx.min(w - 1)]];
        }
    }
    out
}

/// Box blur with edge clamping on a `[C, H, W]` raster.
pub fn box_blur(img: &Array3<f64>, k: usize) -> Array3<f64> {
    assert!(k % 2 == 1, "box blur kernel must be odd");
    let (c, h, w) = img.dim();
    let r = (k / 2) as isize;
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        acc += img[[ci, sy, sx]];
                    }
                }
                out[[ci, y, x]] = acc / (k * k) as f64;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn mask_from(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        let mut m = Array2::<bool>::default((h, w));
        for (y, row) in rows.iter().enumerate() {
            for (x, ch) in row.chars().enumerate() {
                m[[y, x]] = ch == '#';
            }
        }
        m
    }

    #[test]
    fn rle_roundtrip() {
        let m = mask_from(&["#..#", ".##.", "####"]);
        let rle = rle_encode(&m);
        assert_eq!(rle_decode(&rle).unwrap(), m);
        // all-false and all-true edge cases
        let empty = Array2::<bool>::default((3, 2));
        assert_eq!(rle_decode(&rle_encode(&empty)).unwrap(), empty);
        let full = Array2::from_elem((2, 2), true);
        let r = rle_encode(&full);
        assert_eq!(r.counts, vec![0, 4]);
        assert_eq!(rle_decode(&r).unwrap(), full);
    }

    #[test]
    fn rle_is_column_major() {
        // single true pixel at (y=1, x=0) of a 3x2 mask: column-major
        // position 1 → counts [1, 1, 4]
        let mut m = Array2::<bool>::default((3, 2));
        m[[1, 0]] = true;
        assert_eq!(rle_encode(&m).counts, vec![1, 1, 4]);
    }

    #[test]
    fn rle_rejects_bad_total() {
        let bad = Rle { h: 2, w: 2, counts: vec![1, 1] };
        assert!(rle_decode(&bad).is_err());
    }

    #[test]
    fn polygon_square_area() {
        let square = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)];
        let m = polygon_to_mask(&square, 12, 12).unwrap();
        assert_eq!(mask_area(&m), 100);
    }

    #[test]
    fn polygon_triangle_half_area() {
        let tri = [(0.0, 0.0), (8.0, 0.0), (0.0, 8.0)];
        let m = polygon_to_mask(&tri, 8, 8).unwrap();
        // half of 64 ± the diagonal rasterization band
        let area = mask_area(&m) as f64;
        assert!((24.0..=40.0).contains(&area), "area {area}");
    }

    #[test]
    fn components_disjoint_squares() {
        let m = mask_from(&["##..", "##..", "...#", "...#"]);
        let comps = connected_components(&m);
        assert_eq!(comps.len(), 2);
        assert_eq!(mask_area(&comps[0]), 4);
        assert_eq!(mask_area(&comps[1]), 2);
    }

    #[test]
    fn components_diagonal_touch_is_one() {
        let m = mask_from(&["#.", ".#"]);
        assert_eq!(connected_components(&m).len(), 1);
    }

    #[test]
    fn components_partition_input() {
        let m = mask_from(&["#.#.#", ".#.#.", "#...#"]);
        let comps = connected_components(&m);
        let mut union = Array2::<bool>::default(m.dim());
        let mut total = 0;
        for c in &comps {
            for (u, &v) in union.iter_mut().zip(c.iter()) {
                assert!(!(*u && v), "components overlap");
                *u |= v;
            }
            total += mask_area(c);
        }
        assert_eq!(union, m);
        assert_eq!(total, mask_area(&m));
    }

    #[test]
    fn min_area_filter() {
        let m = mask_from(&["#....", ".....", "..###", "..###"]);
        let inst = semantic_to_instances(&m, 2);
        assert_eq!(inst.len(), 1);
        assert_eq!(mask_area(&inst[0]), 6);
    }

    #[test]
    fn tight_box_single_pixel() {
        let mut m = Array2::<bool>::default((10, 10));
        m[[7, 5]] = true;
        assert_eq!(mask_to_tight_box(&m).unwrap(), [5.0, 7.0, 6.0, 8.0]);
        let empty = Array2::<bool>::default((4, 4));
        assert!(mask_to_tight_box(&empty).is_err());
    }

    #[test]
    fn downsample_quadrant_average() {
        let m = mask_from(&["##..", "##..", "....", "...."]);
        let d = downsample_mask_avg(&m, 2, 2);
        assert_eq!(d, array![[1.0, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Array3::<f64>::from_elem((1, 5, 5), 0.6);
        let b = box_blur(&img, 3);
        for &v in b.iter() {
            assert!((v - 0.6).abs() < 1e-12);
        }
    }
}
