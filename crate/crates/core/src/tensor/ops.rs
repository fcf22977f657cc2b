//! Element-wise, linear-algebra, shape, and reduction ops for [`Tensor`].
//!
//! Every op builds a new graph node whose backward closure captures only
//! cheap `Arc` clones of the data it needs.

use std::sync::Arc;

use ndarray::{concatenate, ArrayD, Axis, Ix2, Ix3, IxDyn, Slice};

use super::Tensor;

/// NumPy-style broadcast of two shapes (right-aligned, 1s stretch).
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let av = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let bv = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        assert!(
            av == bv || av == 1 || bv == 1,
            "cannot broadcast shapes {:?} and {:?}",
            a,
            b
        );
        out[i] = av.max(bv);
    }
    out
}

/// Sum a broadcast gradient back down to the original operand shape.
pub(crate) fn reduce_to_shape(grad: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut g = grad.to_owned();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for i in 0..shape.len() {
        if g.shape()[i] != shape[i] {
            debug_assert_eq!(shape[i], 1, "invalid gradient reduction");
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}

fn broadcast_pair(a: &ArrayD<f64>, b: &ArrayD<f64>) -> (ArrayD<f64>, ArrayD<f64>) {
    let shape = broadcast_shapes(a.shape(), b.shape());
    let ab = a
        .broadcast(IxDyn(&shape))
        .expect("broadcast failed")
        .to_owned();
    let bb = b
        .broadcast(IxDyn(&shape))
        .expect("broadcast failed")
        .to_owned();
    (ab, bb)
}

/// Logical-order reshape that works for any memory layout.
pub(crate) fn reshaped(data: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let v: Vec<f64> = data.iter().cloned().collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).expect("reshape: element count mismatch")
}

impl Tensor {
    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Tensor {
        Tensor::constant(
            ArrayD::from_shape_vec(IxDyn(shape), values).expect("from_vec shape mismatch"),
        )
    }

    // ---- broadcast arithmetic ----

    pub fn add(&self, other: &Tensor) -> Tensor {
        let (a, b) = broadcast_pair(self.data(), other.data());
        let out = &a + &b;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                vec![
                    Some(reduce_to_shape(g, &sa)),
                    Some(reduce_to_shape(g, &sb)),
                ]
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let (a, b) = broadcast_pair(self.data(), other.data());
        let out = &a - &b;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                vec![
                    Some(reduce_to_shape(g, &sa)),
                    Some(reduce_to_shape(&(-g), &sb)),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let (a, b) = broadcast_pair(self.data(), other.data());
        let out = &a * &b;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                vec![
                    Some(reduce_to_shape(&(g * &b), &sa)),
                    Some(reduce_to_shape(&(g * &a), &sb)),
                ]
            }),
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let (a, b) = broadcast_pair(self.data(), other.data());
        let out = &a / &b;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = g / &b;
                let gb = -(g * &a) / (&b * &b);
                vec![
                    Some(reduce_to_shape(&ga, &sa)),
                    Some(reduce_to_shape(&gb, &sb)),
                ]
            }),
        )
    }

    // ---- scalar ops ----

    pub fn scale(&self, s: f64) -> Tensor {
        let out = self.data().mapv(|v| v * s);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.mapv(|v| v * s))]),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let out = self.data().mapv(|v| v + s);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.clone())]),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    // ---- unary element-wise ----

    pub fn relu(&self) -> Tensor {
        let out = self.data().mapv(|v| v.max(0.0));
        let x = Arc::clone(&self.node.data);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&x, |d, &xv| {
                    if xv <= 0.0 {
                        *d = 0.0;
                    }
                });
                vec![Some(dx)]
            }),
        )
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let out = self
            .data()
            .mapv(|x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()));
        let x = Arc::clone(&self.node.data);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&x, |d, &xv| {
                    let u = C * (xv + A * xv * xv * xv);
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * A * xv * xv);
                    *d *= 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du;
                });
                vec![Some(dx)]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let out = self.data().mapv(stable_sigmoid);
        let s = out.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&s, |d, &sv| *d *= sv * (1.0 - sv));
                vec![Some(dx)]
            }),
        )
    }

    pub fn sin(&self) -> Tensor {
        let out = self.data().mapv(f64::sin);
        let x = Arc::clone(&self.node.data);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&x, |d, &xv| *d *= xv.cos());
                vec![Some(dx)]
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        let out = self.data().mapv(f64::exp);
        let e = out.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g * &e)]),
        )
    }

    pub fn ln(&self) -> Tensor {
        let out = self.data().mapv(f64::ln);
        let x = Arc::clone(&self.node.data);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g / &*x)]),
        )
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    // ---- matrix products ----

    /// 2-D matrix product: `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = self
            .data()
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be 2-D");
        let b = other
            .data()
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be 2-D");
        assert_eq!(a.shape()[1], b.shape()[0], "matmul inner dim mismatch");
        let out = a.dot(&b).into_dyn();
        let a_arc = Arc::clone(&self.node.data);
        let b_arc = Arc::clone(&other.node.data);
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = a_arc.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = b_arc.view().into_dimensionality::<Ix2>().unwrap();
                let ga = g2.dot(&b2.t()).into_dyn();
                let gb = a2.t().dot(&g2).into_dyn();
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// Batched matrix product: `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn bmm(&self, other: &Tensor) -> Tensor {
        let a = self
            .data()
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm lhs must be 3-D");
        let b = other
            .data()
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm rhs must be 3-D");
        let (nb, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        assert_eq!(b.shape()[0], nb, "bmm batch mismatch");
        assert_eq!(b.shape()[1], k, "bmm inner dim mismatch");
        let n = b.shape()[2];
        let mut out = ndarray::Array3::<f64>::zeros((nb, m, n));
        for i in 0..nb {
            let prod = a.index_axis(Axis(0), i).dot(&b.index_axis(Axis(0), i));
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        let a_arc = Arc::clone(&self.node.data);
        let b_arc = Arc::clone(&other.node.data);
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = a_arc.view().into_dimensionality::<Ix3>().unwrap();
                let b3 = b_arc.view().into_dimensionality::<Ix3>().unwrap();
                let nb = a3.shape()[0];
                let mut ga = ndarray::Array3::<f64>::zeros((nb, a3.shape()[1], a3.shape()[2]));
                let mut gb = ndarray::Array3::<f64>::zeros((nb, b3.shape()[1], b3.shape()[2]));
                for i in 0..nb {
                    let gi = g3.index_axis(Axis(0), i);
                    ga.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&b3.index_axis(Axis(0), i).t()));
                    gb.index_axis_mut(Axis(0), i)
                        .assign(&a3.index_axis(Axis(0), i).t().dot(&gi));
                }
                vec![Some(ga.into_dyn()), Some(gb.into_dyn())]
            }),
        )
    }

    // ---- normalization ----

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Tensor {
        let last = self.shape().len() - 1;
        let mut out = self.data().to_owned();
        for mut lane in out.lanes_mut(Axis(last)) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = lane.sum();
            lane.mapv_inplace(|v| v / sum);
        }
        let s = out.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                // ds = s * (g - sum(g * s, last))
                let mut dx = g * &s;
                let last = Axis(s.ndim() - 1);
                let dot = dx.sum_axis(last).insert_axis(last);
                dx = &s * &(g - &dot);
                vec![Some(dx)]
            }),
        )
    }

    /// Log-softmax over the last axis (numerically stable).
    pub fn log_softmax(&self) -> Tensor {
        let last = self.shape().len() - 1;
        let mut out = self.data().to_owned();
        for mut lane in out.lanes_mut(Axis(last)) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = lane.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            lane.mapv_inplace(|v| v - lse);
        }
        let logp = out.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let last = Axis(logp.ndim() - 1);
                let gsum = g.sum_axis(last).insert_axis(last);
                let dx = g - &(logp.mapv(f64::exp) * &gsum);
                vec![Some(dx)]
            }),
        )
    }

    /// Layer normalization over the last axis, without affine parameters.
    pub fn layer_norm(&self, eps: f64) -> Tensor {
        let last = self.shape().len() - 1;
        let n = self.shape()[last] as f64;
        let mut out = self.data().to_owned();
        for mut lane in out.lanes_mut(Axis(last)) {
            let mu = lane.sum() / n;
            let var = lane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let istd = 1.0 / (var + eps).sqrt();
            lane.mapv_inplace(|v| (v - mu) * istd);
        }
        let xhat = out.clone();
        let x = Arc::clone(&self.node.data);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let last = Axis(xhat.ndim() - 1);
                let n = xhat.shape()[xhat.ndim() - 1] as f64;
                // recompute inverse std per lane from the input
                let mu = x.sum_axis(last).insert_axis(last) / n;
                let xc = &*x - &mu;
                let var = xc.mapv(|v| v * v).sum_axis(last).insert_axis(last) / n;
                let istd = var.mapv(|v| 1.0 / (v + eps).sqrt());
                let gmean = g.sum_axis(last).insert_axis(last) / n;
                let gx_mean = (g * &xhat).sum_axis(last).insert_axis(last) / n;
                let dx = (&istd) * &(g - &gmean - &(&xhat * &gx_mean));
                vec![Some(dx)]
            }),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor {
        let total = self.data().sum();
        let shape = self.shape().to_vec();
        Tensor::from_op(
            ndarray::arr0(total).into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let gv = *g.iter().next().unwrap();
                vec![Some(ArrayD::from_elem(IxDyn(&shape), gv))]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let reduced = self.data().sum_axis(Axis(axis));
        let out = if keepdim {
            reduced.insert_axis(Axis(axis))
        } else {
            reduced
        };
        let shape = self.shape().to_vec();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let g = if keepdim {
                    g.clone()
                } else {
                    g.clone().insert_axis(Axis(axis))
                };
                let gx = g
                    .broadcast(IxDyn(&shape))
                    .expect("sum_axis grad broadcast")
                    .to_owned();
                vec![Some(gx)]
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / n)
    }

    // ---- shape ops ----

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let out = reshaped(self.data(), shape);
        let orig = self.shape().to_vec();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| vec![Some(reshaped(g, &orig))]),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        assert_eq!(axes.len(), self.shape().len(), "permute rank mismatch");
        let out = self
            .data()
            .to_owned()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let gx = g
                    .to_owned()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                vec![Some(gx)]
            }),
        )
    }

    /// 2-D transpose.
    pub fn t2(&self) -> Tensor {
        self.permute(&[1, 0])
    }

    /// Contiguous slice `start..end` along one axis.
    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Tensor {
        assert!(start <= end && end <= self.shape()[axis], "slice out of range");
        let out = self
            .data()
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        let shape = self.shape().to_vec();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = ArrayD::<f64>::zeros(IxDyn(&shape));
                gx.slice_axis_mut(Axis(axis), Slice::from(start..end))
                    .assign(g);
                vec![Some(gx)]
            }),
        )
    }

    /// Gather sub-arrays along `axis` at the given indices (may repeat).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Tensor {
        for &i in indices {
            assert!(i < self.shape()[axis], "index_select out of range");
        }
        let out = self.data().select(Axis(axis), indices);
        let idx = indices.to_vec();
        let shape = self.shape().to_vec();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = ArrayD::<f64>::zeros(IxDyn(&shape));
                for (k, &i) in idx.iter().enumerate() {
                    let gi = g.index_axis(Axis(axis), k);
                    let mut dst = gx.index_axis_mut(Axis(axis), i);
                    dst += &gi;
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Concatenate along an existing axis.
    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let views: Vec<_> = parts.iter().map(|t| t.data().view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let sizes: Vec<usize> = parts.iter().map(|t| t.shape()[axis]).collect();
        Tensor::from_op(
            out,
            parts.to_vec(),
            Box::new(move |g| {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut offset = 0;
                for &sz in &sizes {
                    let part = g
                        .slice_axis(Axis(axis), Slice::from(offset..offset + sz))
                        .to_owned();
                    grads.push(Some(part));
                    offset += sz;
                }
                grads
            }),
        )
    }

    /// Stack equal-shaped tensors along a new leading axis.
    pub fn stack0(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "stack of zero tensors");
        let mut shape = vec![1usize];
        shape.extend_from_slice(parts[0].shape());
        let expanded: Vec<Tensor> = parts.iter().map(|t| t.reshape(&shape)).collect();
        Tensor::concat(&expanded, 0)
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::super::check::gradcheck;
    use super::super::Tensor;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2, ArrayD, IxDyn};

    #[test]
    fn broadcast_add_reduces_grad() {
        let a = Tensor::variable(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = Tensor::variable(arr1(&[10.0, 20.0]).into_dyn());
        let loss = a.add(&b).sum_all();
        let grads = loss.backward();
        assert_eq!(grads.wrt(&b).unwrap().as_slice().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn matmul_values_and_grads() {
        let a = Tensor::variable(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = Tensor::variable(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn());
        let c = a.matmul(&b);
        assert_eq!(c.data().as_slice().unwrap(), &[19.0, 22.0, 43.0, 50.0]);
        gradcheck(&[a, b], |ins| ins[0].matmul(&ins[1]).sum_all(), 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::variable(arr2(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]).into_dyn());
        let s = x.softmax();
        for row in s.data().rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
        gradcheck(
            &[x],
            |ins| {
                let w = Tensor::from_vec(&[2, 3], vec![0.3, -1.0, 2.0, 0.7, 0.1, -0.4]);
                ins[0].softmax().mul(&w).sum_all()
            },
            1e-5,
        );
    }

    #[test]
    fn layer_norm_normalizes_and_grads() {
        let x = Tensor::variable(arr2(&[[1.0, 2.0, 3.0, 4.0]]).into_dyn());
        let y = x.layer_norm(1e-5);
        assert_abs_diff_eq!(y.data().sum(), 0.0, epsilon = 1e-9);
        gradcheck(
            &[x],
            |ins| {
                let w = Tensor::from_vec(&[1, 4], vec![0.5, -1.5, 2.0, 0.25]);
                ins[0].layer_norm(1e-5).mul(&w).sum_all()
            },
            1e-4,
        );
    }

    #[test]
    fn unary_gradchecks() {
        let x = Tensor::variable(arr1(&[-1.5, -0.25, 0.4, 2.0]).into_dyn());
        gradcheck(&[x.clone()], |ins| ins[0].gelu().sum_all(), 1e-5);
        gradcheck(&[x.clone()], |ins| ins[0].sigmoid().sum_all(), 1e-6);
        gradcheck(&[x.clone()], |ins| ins[0].sin().sum_all(), 1e-6);
        gradcheck(&[x.clone()], |ins| ins[0].exp().sum_all(), 1e-6);
        gradcheck(
            &[x],
            |ins| ins[0].mul(&ins[0]).add_scalar(2.0).ln().sum_all(),
            1e-5,
        );
    }

    #[test]
    fn shape_ops_roundtrip_grads() {
        let x = Tensor::variable(arr2(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).into_dyn());
        gradcheck(
            &[x.clone()],
            |ins| {
                let w = Tensor::from_vec(&[3, 2], vec![1.0, -1.0, 0.5, 2.0, -0.5, 1.5]);
                ins[0].permute(&[1, 0]).mul(&w).sum_all()
            },
            1e-6,
        );
        gradcheck(
            &[x.clone()],
            |ins| ins[0].reshape(&[3, 2]).slice_axis(0, 1, 3).sum_all(),
            1e-6,
        );
        gradcheck(
            &[x],
            |ins| ins[0].index_select(1, &[2, 0, 2]).sum_all(),
            1e-6,
        );
    }

    #[test]
    fn concat_splits_gradient() {
        let a = Tensor::variable(arr2(&[[1.0, 2.0]]).into_dyn());
        let b = Tensor::variable(arr2(&[[3.0, 4.0], [5.0, 6.0]]).into_dyn());
        let c = Tensor::concat(&[a.clone(), b.clone()], 0);
        assert_eq!(c.shape(), &[3, 2]);
        let loss = c.index_select(0, &[0, 2]).sum_all();
        let grads = loss.backward();
        assert_eq!(grads.wrt(&a).unwrap().as_slice().unwrap(), &[1.0, 1.0]);
        assert_eq!(
            grads.wrt(&b).unwrap().as_slice().unwrap(),
            &[0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn bmm_matches_per_slice_matmul() {
        let a = Tensor::variable(
            ArrayD::from_shape_vec(IxDyn(&[2, 2, 3]), (0..12).map(|v| v as f64).collect())
                .unwrap(),
        );
        let b = Tensor::variable(
            ArrayD::from_shape_vec(
                IxDyn(&[2, 3, 2]),
                (0..12).map(|v| 0.5 * v as f64 - 2.0).collect(),
            )
            .unwrap(),
        );
        gradcheck(&[a, b], |ins| ins[0].bmm(&ins[1]).sum_all(), 1e-6);
    }
}
