//! Neural-net building blocks on top of the tensor engine: linear layers,
//! normalization, convolutions, multi-head attention, and transformer layers.
//! Every block exposes its parameters under stable dotted names for the
//! optimizer and the checkpoint format.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Param, Tensor};

pub mod pe;

/// Anything holding parameters. Names are dotted paths, unique per model.
pub trait Module {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Param)>);

    fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform init in ±1/sqrt(fan_in), the standard dense-layer default.
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

// ---- Linear ----

pub struct Linear {
    pub w: Param,
    pub b: Option<Param>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: Param::new(uniform_init(rng, &[out_dim, in_dim], in_dim)),
            b: Some(Param::new(uniform_init(rng, &[out_dim], in_dim))),
        }
    }

    pub fn new_no_bias(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: Param::new(uniform_init(rng, &[out_dim, in_dim], in_dim)),
            b: None,
        }
    }

    /// `[n, in] -> [n, out]`
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = x.matmul(&self.w.tensor().t2());
        match &self.b {
            Some(b) => y.add(&b.tensor()),
            None => y,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }
}

impl Module for Linear {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        out.push((join(prefix, "w"), self.w.clone()));
        if let Some(b) = &self.b {
            out.push((join(prefix, "b"), b.clone()));
        }
    }
}

// ---- LayerNorm ----

pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(ArrayD::from_elem(IxDyn(&[dim]), 1.0)),
            beta: Param::new(ArrayD::zeros(IxDyn(&[dim]))),
            eps: 1e-5,
        }
    }

    /// Normalizes the last axis, then applies the learned affine transform.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(self.eps)
            .mul(&self.gamma.tensor())
            .add(&self.beta.tensor())
    }
}

impl Module for LayerNorm {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        out.push((join(prefix, "gamma"), self.gamma.clone()));
        out.push((join(prefix, "beta"), self.beta.clone()));
    }
}

// ---- MLP ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

/// Stack of linear layers with an activation between them (not after the
/// last one). `dims` lists in/hidden.../out sizes.
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(rng: &mut ChaCha8Rng, dims: &[usize], activation: Activation) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least in/out dims");
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(rng, w[0], w[1]))
            .collect();
        Mlp { layers, activation }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i + 1 < self.layers.len() {
                h = match self.activation {
                    Activation::Relu => h.relu(),
                    Activation::Gelu => h.gelu(),
                };
            }
        }
        h
    }
}

impl Module for Mlp {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect_params(&join(prefix, &format!("l{i}")), out);
        }
    }
}

// ---- Convolutions ----

pub struct Conv2d {
    pub w: Param,
    pub b: Option<Param>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * k * k;
        Conv2d {
            w: Param::new(uniform_init(rng, &[out_ch, in_ch, k, k], fan_in)),
            b: Some(Param::new(uniform_init(rng, &[out_ch], fan_in))),
            stride,
            pad,
        }
    }

    /// `[Cin, H, W] -> [Cout, H', W']`
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = x.conv2d(&self.w.tensor(), self.stride, self.pad);
        match &self.b {
            Some(b) => {
                let c = b.shape()[0];
                y.add(&b.tensor().reshape(&[c, 1, 1]))
            }
            None => y,
        }
    }
}

impl Module for Conv2d {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        out.push((join(prefix, "w"), self.w.clone()));
        if let Some(b) = &self.b {
            out.push((join(prefix, "b"), b.clone()));
        }
    }
}

pub struct ConvTranspose2d {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Self {
        let fan_in = in_ch * k * k;
        ConvTranspose2d {
            w: Param::new(uniform_init(rng, &[in_ch, out_ch, k, k], fan_in)),
            b: Param::new(uniform_init(rng, &[out_ch], fan_in)),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = x.conv_transpose2d(&self.w.tensor(), self.stride);
        let c = self.b.shape()[0];
        y.add(&self.b.tensor().reshape(&[c, 1, 1]))
    }
}

impl Module for ConvTranspose2d {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        out.push((join(prefix, "w"), self.w.clone()));
        out.push((join(prefix, "b"), self.b.clone()));
    }
}

// ---- Attention ----

pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub internal_dim: usize,
}

impl MultiHeadAttention {
    /// `internal_dim` lets attention run in a narrower space than the token
    /// width (the mask decoder halves it); pass `dim` for standard attention.
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, internal_dim: usize) -> Self {
        assert_eq!(internal_dim % heads, 0, "heads must divide internal dim");
        MultiHeadAttention {
            q: Linear::new(rng, dim, internal_dim),
            k: Linear::new(rng, dim, internal_dim),
            v: Linear::new(rng, dim, internal_dim),
            out: Linear::new(rng, internal_dim, dim),
            heads,
            internal_dim,
        }
    }

    /// `q_in: [n, dim]`, `k_in/v_in: [m, dim]` -> `[n, dim]`.
    pub fn forward(&self, q_in: &Tensor, k_in: &Tensor, v_in: &Tensor) -> Tensor {
        let (n, m) = (q_in.shape()[0], k_in.shape()[0]);
        let h = self.heads;
        let dh = self.internal_dim / h;
        let split = |t: &Tensor, len: usize| t.reshape(&[len, h, dh]).permute(&[1, 0, 2]);
        let qh = split(&self.q.forward(q_in), n);
        let kh = split(&self.k.forward(k_in), m);
        let vh = split(&self.v.forward(v_in), m);
        let attn = qh
            .bmm(&kh.permute(&[0, 2, 1]))
            .scale(1.0 / (dh as f64).sqrt())
            .softmax();
        let mixed = attn.bmm(&vh); // [h, n, dh]
        let merged = mixed.permute(&[1, 0, 2]).reshape(&[n, self.internal_dim]);
        self.out.forward(&merged)
    }
}

impl Module for MultiHeadAttention {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        self.q.collect_params(&join(prefix, "q"), out);
        self.k.collect_params(&join(prefix, "k"), out);
        self.v.collect_params(&join(prefix, "v"), out);
        self.out.collect_params(&join(prefix, "out"), out);
    }
}

// ---- Transformer layers (post-norm, position added to q/k only) ----

pub struct TransformerEncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub mlp: Mlp,
    pub norm2: LayerNorm,
}

impl TransformerEncoderLayer {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, ff_dim: usize) -> Self {
        TransformerEncoderLayer {
            attn: MultiHeadAttention::new(rng, dim, heads, dim),
            norm1: LayerNorm::new(dim),
            mlp: Mlp::new(rng, &[dim, ff_dim, dim], Activation::Relu),
            norm2: LayerNorm::new(dim),
        }
    }

    /// `x: [n, dim]`, `pos: [n, dim]`.
    pub fn forward(&self, x: &Tensor, pos: &Tensor) -> Tensor {
        let q = x.add(pos);
        let attended = self.attn.forward(&q, &q, x);
        let x = self.norm1.forward(&x.add(&attended));
        let f = self.mlp.forward(&x);
        self.norm2.forward(&x.add(&f))
    }
}

impl Module for TransformerEncoderLayer {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        self.attn.collect_params(&join(prefix, "attn"), out);
        self.norm1.collect_params(&join(prefix, "norm1"), out);
        self.mlp.collect_params(&join(prefix, "mlp"), out);
        self.norm2.collect_params(&join(prefix, "norm2"), out);
    }
}

pub struct TransformerDecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub norm3: LayerNorm,
}

impl TransformerDecoderLayer {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, ff_dim: usize) -> Self {
        TransformerDecoderLayer {
            self_attn: MultiHeadAttention::new(rng, dim, heads, dim),
            norm1: LayerNorm::new(dim),
            cross_attn: MultiHeadAttention::new(rng, dim, heads, dim),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(rng, &[dim, ff_dim, dim], Activation::Relu),
            norm3: LayerNorm::new(dim),
        }
    }

    /// Queries self-attend, then cross-attend to memory tokens.
    pub fn forward(
        &self,
        queries: &Tensor,
        query_pos: &Tensor,
        memory: &Tensor,
        memory_pos: &Tensor,
    ) -> Tensor {
        let q = queries.add(query_pos);
        let sa = self.self_attn.forward(&q, &q, queries);
        let queries = self.norm1.forward(&queries.add(&sa));
        let ca = self.cross_attn.forward(
            &queries.add(query_pos),
            &memory.add(memory_pos),
            memory,
        );
        let queries = self.norm2.forward(&queries.add(&ca));
        let f = self.mlp.forward(&queries);
        self.norm3.forward(&queries.add(&f))
    }
}

impl Module for TransformerDecoderLayer {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        self.self_attn.collect_params(&join(prefix, "self_attn"), out);
        self.norm1.collect_params(&join(prefix, "norm1"), out);
        self.cross_attn.collect_params(&join(prefix, "cross_attn"), out);
        self.norm2.collect_params(&join(prefix, "norm2"), out);
        self.mlp.collect_params(&join(prefix, "mlp"), out);
        self.norm3.collect_params(&join(prefix, "norm3"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::gradcheck_params;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn rand_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::constant(ArrayD::from_shape_vec(IxDyn(shape), v).unwrap())
    }

    #[test]
    fn linear_shapes_and_param_names() {
        let mut r = rng();
        let lin = Linear::new(&mut r, 8, 3);
        let x = rand_input(&mut r, &[5, 8]);
        assert_eq!(lin.forward(&x).shape(), &[5, 3]);
        let names: Vec<String> = lin.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["w", "b"]);
    }

    #[test]
    fn layer_norm_affine_gradcheck() {
        let mut r = rng();
        let ln = LayerNorm::new(6);
        let x = rand_input(&mut r, &[3, 6]);
        let params: Vec<Param> = ln.named_params().into_iter().map(|(_, p)| p).collect();
        gradcheck_params(&params, || ln.forward(&x).square().sum_all(), 1e-4, 16);
    }

    #[test]
    fn attention_module_gradcheck() {
        let mut r = rng();
        let attn = MultiHeadAttention::new(&mut r, 8, 2, 4);
        let q = rand_input(&mut r, &[3, 8]);
        let kv = rand_input(&mut r, &[5, 8]);
        let params: Vec<Param> = attn.named_params().into_iter().map(|(_, p)| p).collect();
        gradcheck_params(
            &params,
            || attn.forward(&q, &kv, &kv).square().sum_all(),
            1e-3,
            8,
        );
    }

    #[test]
    fn encoder_layer_preserves_shape() {
        let mut r = rng();
        let layer = TransformerEncoderLayer::new(&mut r, 8, 2, 16);
        let x = rand_input(&mut r, &[6, 8]);
        let pos = rand_input(&mut r, &[6, 8]);
        assert_eq!(layer.forward(&x, &pos).shape(), &[6, 8]);
    }

    #[test]
    fn decoder_layer_param_names_unique() {
        let mut r = rng();
        let layer = TransformerDecoderLayer::new(&mut r, 8, 2, 16);
        let names: Vec<String> = layer.named_params().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }

    #[test]
    fn mlp_two_layer_gradcheck() {
        let mut r = rng();
        let mlp = Mlp::new(&mut r, &[4, 8, 2], Activation::Gelu);
        let x = rand_input(&mut r, &[3, 4]);
        let params: Vec<Param> = mlp.named_params().into_iter().map(|(_, p)| p).collect();
        gradcheck_params(&params, || mlp.forward(&x).square().sum_all(), 1e-3, 12);
    }
}
