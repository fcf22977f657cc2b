//! Spatial ops over `[C, H, W]` maps: convolution, transposed convolution,
//! max pooling, bilinear resizing, and RoI-aligned pooling.
//!
//! All modules process one image at a time, so no batch axis is carried.

use std::sync::Arc;

use ndarray::{Array2, Array3, Array4, ArrayView3, Ix3, Ix4};

use super::Tensor;

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfold `[Cin, H, W]` into `[Cin*kh*kw, oh*ow]` patch columns.
fn im2col(
    input: &ArrayView3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let mut cols = Array2::<f64>::zeros((cin * k * k, oh * ow));
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = input[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add column gradients back to the input layout (inverse of im2col).
fn col2im(
    cols: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let mut out = Array3::<f64>::zeros((cin, h, w));
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[[ci, iy as usize, ix as usize]] += cols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    out
}

impl Tensor {
    /// 2-D convolution: input `[Cin, H, W]`, square weight `[Cout, Cin, k, k]`.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
        let x = self
            .data()
            .view()
            .into_dimensionality::<Ix3>()
            .expect("conv2d input must be [C, H, W]");
        let w = weight
            .data()
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d weight must be [Cout, Cin, k, k]");
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, wcin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        assert_eq!(k, w.shape()[3], "conv2d kernel must be square");
        let oh = conv_out(h, k, stride, pad);
        let ow = conv_out(wd, k, stride, pad);
        let cols = im2col(&x, k, stride, pad, oh, ow);
        let w2 = w.to_shape((cout, cin * k * k)).unwrap().to_owned();
        let out2 = w2.dot(&cols);
        let out = out2.into_shape_with_order((cout, oh, ow)).unwrap();

        let x_arc = Arc::clone(&self.node.data);
        let w_arc = Arc::clone(&weight.node.data);
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), weight.clone()],
            Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let g2 = g3
                    .to_shape((cout, oh * ow))
                    .unwrap()
                    .to_owned();
                let x3 = x_arc.view().into_dimensionality::<Ix3>().unwrap();
                let w4 = w_arc.view().into_dimensionality::<Ix4>().unwrap();
                let cols = im2col(&x3, k, stride, pad, oh, ow);
                let dw2 = g2.dot(&cols.t());
                let dw = dw2
                    .into_shape_with_order((cout, cin, k, k))
                    .unwrap()
                    .into_dyn();
                let w2 = w4.to_shape((cout, cin * k * k)).unwrap().to_owned();
                let dcols = w2.t().dot(&g2);
                let dx = col2im(&dcols, cin, h, wd, k, stride, pad, oh, ow).into_dyn();
                vec![Some(dx), Some(dw)]
            }),
        )
    }

    /// Transposed convolution: input `[Cin, H, W]`, weight `[Cin, Cout, k, k]`,
    /// output `[(H-1)*stride + k, ...]`. Used for learned 2x upsampling.
    pub fn conv_transpose2d(&self, weight: &Tensor, stride: usize) -> Tensor {
        let x = self
            .data()
            .view()
            .into_dimensionality::<Ix3>()
            .expect("conv_transpose2d input must be [C, H, W]");
        let w = weight
            .data()
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv_transpose2d weight must be [Cin, Cout, k, k]");
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(cin, w.shape()[0], "conv_transpose2d channel mismatch");
        let (cout, k) = (w.shape()[1], w.shape()[2]);
        assert_eq!(k, w.shape()[3], "kernel must be square");
        let oh = (h - 1) * stride + k;
        let ow = (wd - 1) * stride + k;
        let mut out = Array3::<f64>::zeros((cout, oh, ow));
        for ci in 0..cin {
            for y in 0..h {
                for xq in 0..wd {
                    let v = x[[ci, y, xq]];
                    if v == 0.0 {
                        continue;
                    }
                    for co in 0..cout {
                        for ky in 0..k {
                            for kx in 0..k {
                                out[[co, y * stride + ky, xq * stride + kx]] +=
                                    v * w[[ci, co, ky, kx]];
                            }
                        }
                    }
                }
            }
        }
        let x_arc = Arc::clone(&self.node.data);
        let w_arc = Arc::clone(&weight.node.data);
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), weight.clone()],
            Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let x3 = x_arc.view().into_dimensionality::<Ix3>().unwrap();
                let w4 = w_arc.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array3::<f64>::zeros((cin, h, wd));
                let mut dw = Array4::<f64>::zeros((cin, cout, k, k));
                for ci in 0..cin {
                    for y in 0..h {
                        for xq in 0..wd {
                            let mut acc = 0.0;
                            for co in 0..cout {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let go = g3[[co, y * stride + ky, xq * stride + kx]];
                                        acc += go * w4[[ci, co, ky, kx]];
                                        dw[[ci, co, ky, kx]] += go * x3[[ci, y, xq]];
                                    }
                                }
                            }
                            dx[[ci, y, xq]] = acc;
                        }
                    }
                }
                vec![Some(dx.into_dyn()), Some(dw.into_dyn())]
            }),
        )
    }

    /// Max pooling with square kernel; output size `floor((H-k)/stride)+1`.
    pub fn max_pool2d(&self, k: usize, stride: usize) -> Tensor {
        let x = self
            .data()
            .view()
            .into_dimensionality::<Ix3>()
            .expect("max_pool2d input must be [C, H, W]");
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert!(h >= k && w >= k, "pool kernel larger than input");
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let mut out = Array3::<f64>::zeros((c, oh, ow));
        let mut argmax = vec![0usize; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = (oy * stride + ky, ox * stride + kx);
                            let v = x[[ci, iy, ix]];
                            if v > best {
                                best = v;
                                best_idx = iy * w + ix;
                            }
                        }
                    }
                    out[[ci, oy, ox]] = best;
                    argmax[(ci * oh + oy) * ow + ox] = best_idx;
                }
            }
        }
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let flat = argmax[(ci * oh + oy) * ow + ox];
                            dx[[ci, flat / w, flat % w]] += g3[[ci, oy, ox]];
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Bilinear resize with half-pixel centers (align_corners = false).
    pub fn upsample_bilinear(&self, out_h: usize, out_w: usize) -> Tensor {
        let x = self
            .data()
            .view()
            .into_dimensionality::<Ix3>()
            .expect("upsample input must be [C, H, W]");
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let taps_y = bilinear_taps(h, out_h);
        let taps_x = bilinear_taps(w, out_w);
        let mut out = Array3::<f64>::zeros((c, out_h, out_w));
        for ci in 0..c {
            for oy in 0..out_h {
                let (y0, y1, wy) = taps_y[oy];
                for ox in 0..out_w {
                    let (x0, x1, wx) = taps_x[ox];
                    let top = x[[ci, y0, x0]] * (1.0 - wx) + x[[ci, y0, x1]] * wx;
                    let bot = x[[ci, y1, x0]] * (1.0 - wx) + x[[ci, y1, x1]] * wx;
                    out[[ci, oy, ox]] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for oy in 0..out_h {
                        let (y0, y1, wy) = taps_y[oy];
                        for ox in 0..out_w {
                            let (x0, x1, wx) = taps_x[ox];
                            let go = g3[[ci, oy, ox]];
                            dx[[ci, y0, x0]] += go * (1.0 - wy) * (1.0 - wx);
                            dx[[ci, y0, x1]] += go * (1.0 - wy) * wx;
                            dx[[ci, y1, x0]] += go * wy * (1.0 - wx);
                            dx[[ci, y1, x1]] += go * wy * wx;
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// RoI-aligned pooling: `[C, H, W]` features + boxes in image pixels →
    /// `[n, C, size, size]`. Each bin averages a 2×2 grid of bilinear samples.
    /// Boxes are treated as constants (no gradient flows to coordinates).
    pub fn roi_align(&self, boxes: &[[f64; 4]], size: usize, spatial_scale: f64) -> Tensor {
        let x = self
            .data()
            .view()
            .into_dimensionality::<Ix3>()
            .expect("roi_align input must be [C, H, W]");
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let n = boxes.len();
        let samples = roi_sample_points(boxes, size, spatial_scale, h, w);
        let mut out = Array4::<f64>::zeros((n, c, size, size));
        for (bi, pts) in samples.iter().enumerate() {
            for by in 0..size {
                for bx in 0..size {
                    let quad = &pts[by * size + bx];
                    for ci in 0..c {
                        let mut acc = 0.0;
                        for &(y0, x0, y1, x1, wy, wx) in quad {
                            let top = x[[ci, y0, x0]] * (1.0 - wx) + x[[ci, y0, x1]] * wx;
                            let bot = x[[ci, y1, x0]] * (1.0 - wx) + x[[ci, y1, x1]] * wx;
                            acc += top * (1.0 - wy) + bot * wy;
                        }
                        out[[bi, ci, by, bx]] = acc / quad.len() as f64;
                    }
                }
            }
        }
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for (bi, pts) in samples.iter().enumerate() {
                    for by in 0..size {
                        for bx in 0..size {
                            let quad = &pts[by * size + bx];
                            let inv = 1.0 / quad.len() as f64;
                            for ci in 0..c {
                                let go = g4[[bi, ci, by, bx]] * inv;
                                for &(y0, x0, y1, x1, wy, wx) in quad {
                                    dx[[ci, y0, x0]] += go * (1.0 - wy) * (1.0 - wx);
                                    dx[[ci, y0, x1]] += go * (1.0 - wy) * wx;
                                    dx[[ci, y1, x0]] += go * wy * (1.0 - wx);
                                    dx[[ci, y1, x1]] += go * wy * wx;
                                }
                            }
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }
}

/// Per-output-index source taps `(lo, hi, frac)` for half-pixel bilinear.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

type SampleTap = (usize, usize, usize, usize, f64, f64);

/// 2×2 bilinear sample taps per bin per box, precomputed once so forward and
/// backward agree exactly.
fn roi_sample_points(
    boxes: &[[f64; 4]],
    size: usize,
    spatial_scale: f64,
    h: usize,
    w: usize,
) -> Vec<Vec<Vec<SampleTap>>> {
    let clampf = |v: f64, max: f64| v.max(0.0).min(max);
    boxes
        .iter()
        .map(|b| {
            // continuous feature coords with pixel centers at integers
            let x1 = b[0] * spatial_scale - 0.5;
            let y1 = b[1] * spatial_scale - 0.5;
            let x2 = b[2] * spatial_scale - 0.5;
            let y2 = b[3] * spatial_scale - 0.5;
            let bw = ((x2 - x1) / size as f64).max(1e-6);
            let bh = ((y2 - y1) / size as f64).max(1e-6);
            let mut bins = Vec::with_capacity(size * size);
            for by in 0..size {
                for bx in 0..size {
                    let mut quad = Vec::with_capacity(4);
                    for sy in 0..2 {
                        for sx in 0..2 {
                            let yc = clampf(
                                y1 + (by as f64 + (sy as f64 + 0.5) / 2.0) * bh,
                                (h - 1) as f64,
                            );
                            let xc = clampf(
                                x1 + (bx as f64 + (sx as f64 + 0.5) / 2.0) * bw,
                                (w - 1) as f64,
                            );
                            let y0 = yc.floor() as usize;
                            let x0 = xc.floor() as usize;
                            let y1i = (y0 + 1).min(h - 1);
                            let x1i = (x0 + 1).min(w - 1);
                            quad.push((y0, x0, y1i, x1i, yc - y0 as f64, xc - x0 as f64));
                        }
                    }
                    bins.push(quad);
                }
            }
            bins
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::check::gradcheck;
    use super::super::Tensor;
    use approx::assert_abs_diff_eq;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::variable(ArrayD::from_shape_vec(IxDyn(shape), v).unwrap())
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = rand_tensor(&[1, 4, 4], 1);
        // 1x1 kernel with weight 1 reproduces the input
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]);
        let y = x.conv2d(&w, 1, 0);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_known_sum_kernel() {
        // 3x3 all-ones kernel with pad 1 computes neighborhood sums
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]);
        let y = x.conv2d(&w, 1, 1);
        assert_eq!(y.data().as_slice().unwrap(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn conv2d_gradcheck() {
        let x = rand_tensor(&[2, 5, 5], 2);
        let w = rand_tensor(&[3, 2, 3, 3], 3);
        gradcheck(
            &[x, w],
            |ins| ins[0].conv2d(&ins[1], 2, 1).square().sum_all(),
            1e-5,
        );
    }

    #[test]
    fn conv_transpose_doubles_size_and_grads() {
        let x = rand_tensor(&[2, 3, 3], 4);
        let w = rand_tensor(&[2, 3, 2, 2], 5);
        let y = x.conv_transpose2d(&w, 2);
        assert_eq!(y.shape(), &[3, 6, 6]);
        gradcheck(
            &[x, w],
            |ins| ins[0].conv_transpose2d(&ins[1], 2).square().sum_all(),
            1e-5,
        );
    }

    #[test]
    fn max_pool_values_and_grads() {
        let x = Tensor::variable(
            ArrayD::from_shape_vec(
                IxDyn(&[1, 2, 4]),
                vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 6.0],
            )
            .unwrap(),
        );
        let y = x.max_pool2d(2, 2);
        assert_eq!(y.data().as_slice().unwrap(), &[5.0, 7.0]);
        let grads = y.sum_all().backward();
        assert_eq!(
            grads.wrt(&x).unwrap().as_slice().unwrap(),
            &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor::variable(ArrayD::from_elem(IxDyn(&[1, 3, 3]), 2.5));
        let y = x.upsample_bilinear(7, 5);
        for &v in y.data().iter() {
            assert_abs_diff_eq!(v, 2.5, epsilon = 1e-12);
        }
        gradcheck(
            &[rand_tensor(&[2, 3, 4], 6)],
            |ins| ins[0].upsample_bilinear(6, 5).square().sum_all(),
            1e-5,
        );
    }

    #[test]
    fn upsample_downscale_gradchecks() {
        gradcheck(
            &[rand_tensor(&[1, 6, 6], 7)],
            |ins| ins[0].upsample_bilinear(3, 3).square().sum_all(),
            1e-5,
        );
    }

    #[test]
    fn roi_align_full_box_on_constant_map() {
        let x = Tensor::variable(ArrayD::from_elem(IxDyn(&[2, 8, 8]), 3.0));
        // full box over an 8x8 map at scale 1
        let y = x.roi_align(&[[0.0, 0.0, 8.0, 8.0]], 7, 1.0);
        assert_eq!(y.shape(), &[1, 2, 7, 7]);
        for &v in y.data().iter() {
            assert_abs_diff_eq!(v, 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn roi_align_gradcheck() {
        let boxes = vec![[1.0, 0.5, 6.0, 7.0], [0.0, 0.0, 3.0, 3.0]];
        gradcheck(
            &[rand_tensor(&[2, 8, 8], 8)],
            |ins| ins[0].roi_align(&boxes, 3, 1.0).square().sum_all(),
            1e-5,
        );
    }
}
