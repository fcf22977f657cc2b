//! Promptable mask head: prompt encoders plus a two-way attention decoder.
//!
//! The decoder consumes a token bundle `Cat(mask-filter tokens [4×c],
//! IoU token [1×c], sparse prompts [k×c])` together with the image feature
//! map (optionally summed with a dense prompt map), alternates
//! token→image and image→token attention for two blocks, then produces
//! four candidate masks at a quarter of the source resolution via
//! per-token hypernetworks over an upscaled embedding, plus a predicted
//! IoU score per mask. Masks are bilinearly resized to the source
//! resolution; downstream code uses mask index 0.

use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxF;
use crate::nn::pe::{point_code, sine_grid};
use crate::nn::{Activation, Conv2d, ConvTranspose2d, LayerNorm, Mlp, Module, MultiHeadAttention};
use crate::tensor::{Param, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SamHeadConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    /// Token↔image attention runs at `dim / downsample_rate`.
    #[serde(default = "default_rate")]
    pub downsample_rate: usize,
    #[serde(default = "default_ff")]
    pub ff_dim: usize,
}

fn default_dim() -> usize {
    64
}
fn default_depth() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_rate() -> usize {
    2
}
fn default_ff() -> usize {
    256
}

impl Default for SamHeadConfig {
    fn default() -> Self {
        SamHeadConfig { dim: 64, depth: 2, num_heads: 4, downsample_rate: 2, ff_dim: 256 }
    }
}

impl SamHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim % 8 != 0 {
            return Err(Error::config("mask head dim must be divisible by 8"));
        }
        if self.dim % (self.num_heads * self.downsample_rate) != 0 {
            return Err(Error::config("heads × downsample_rate must divide dim"));
        }
        if self.depth == 0 {
            return Err(Error::config("mask head needs at least one block"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptKind {
    ForegroundPoint,
    BackgroundPoint,
    BoxCorner,
    /// Produced by a prompter network rather than a geometric encoder.
    Learned,
}

/// One sparse prompt token: a `[c]` embedding plus provenance.
#[derive(Clone)]
pub struct SparsePrompt {
    pub kind: PromptKind,
    pub embedding: Tensor,
    /// Image-space coordinates for geometric prompts.
    pub source: Option<(f64, f64)>,
}

impl SparsePrompt {
    pub fn learned(embedding: Tensor) -> Self {
        SparsePrompt { kind: PromptKind::Learned, embedding, source: None }
    }
}

/// Encodes geometric prompts (points, boxes, coarse masks) into the token
/// and map spaces the decoder consumes.
pub struct PromptEncoder {
    dim: usize,
    fg_type: Param,
    bg_type: Param,
    tl_type: Param,
    br_type: Param,
    mask_conv1: Conv2d,
    mask_conv2: Conv2d,
    mask_proj: Conv2d,
}

impl PromptEncoder {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let vec = |rng: &mut ChaCha8Rng| {
            Param::new(crate::nn::uniform_init(rng, &[dim], dim))
        };
        PromptEncoder {
            dim,
            fg_type: vec(rng),
            bg_type: vec(rng),
            tl_type: vec(rng),
            br_type: vec(rng),
            mask_conv1: Conv2d::new(rng, 1, dim / 4, 2, 2, 0),
            mask_conv2: Conv2d::new(rng, dim / 4, dim / 2, 2, 2, 0),
            mask_proj: Conv2d::new(rng, dim / 2, dim, 1, 1, 0),
        }
    }

    /// Points as `(x, y, is_foreground)` in image pixels.
    pub fn encode_points(
        &self,
        points: &[(f64, f64, bool)],
        image_hw: (usize, usize),
    ) -> Result<Vec<SparsePrompt>> {
        let (h, w) = (image_hw.0 as f64, image_hw.1 as f64);
        points
            .iter()
            .map(|&(x, y, fg)| {
                if !(0.0..=w).contains(&x) || !(0.0..=h).contains(&y) {
                    return Err(Error::domain(format!(
                        "point ({x}, {y}) outside {w}x{h} image"
                    )));
                }
                let code = point_code(x / w, y / h, self.dim);
                let type_vec = if fg { &self.fg_type } else { &self.bg_type };
                let emb = Tensor::constant(code.into_dyn()).add(&type_vec.tensor());
                Ok(SparsePrompt {
                    kind: if fg { PromptKind::ForegroundPoint } else { PromptKind::BackgroundPoint },
                    embedding: emb,
                    source: Some((x, y)),
                })
            })
            .collect()
    }

    /// A box becomes two corner tokens (top-left, bottom-right).
    pub fn encode_box(&self, b: BoxF, image_hw: (usize, usize)) -> Result<Vec<SparsePrompt>> {
        let (h, w) = (image_hw.0 as f64, image_hw.1 as f64);
        let [x1, y1, x2, y2] = b;
        if !(x2 > x1 && y2 > y1) {
            return Err(Error::domain(format!("degenerate box {b:?}")));
        }
        if x1 < 0.0 || y1 < 0.0 || x2 > w || y2 > h {
            return Err(Error::domain(format!("box {b:?} outside {w}x{h} image")));
        }
        let mk = |x: f64, y: f64, tv: &Param| SparsePrompt {
            kind: PromptKind::BoxCorner,
            embedding: Tensor::constant(point_code(x / w, y / h, self.dim).into_dyn())
                .add(&tv.tensor()),
            source: Some((x, y)),
        };
        Ok(vec![mk(x1, y1, &self.tl_type), mk(x2, y2, &self.br_type)])
    }

    /// Coarse mask logits (any spatial size) → dense `[c, h, w]` prompt map
    /// on the feature grid, via sigmoid, bilinear resize to `4h×4w`, and a
    /// strided-conv downsampler.
    pub fn encode_mask(&self, coarse: &Tensor, grid_hw: (usize, usize)) -> Result<Tensor> {
        let s = coarse.shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape("coarse mask must be [h, w] logits"));
        }
        let (gh, gw) = grid_hw;
        let x = coarse.sigmoid().reshape(&[1, s[0], s[1]]);
        let x = x.upsample_bilinear(4 * gh, 4 * gw);
        let x = self.mask_conv1.forward(&x).relu();
        let x = self.mask_conv2.forward(&x).relu();
        Ok(self.mask_proj.forward(&x))
    }

    /// `n × n` grid of point centers over the image, row-major.
    pub fn point_grid(n: usize, image_hw: (usize, usize)) -> Vec<(f64, f64)> {
        let (h, w) = (image_hw.0 as f64, image_hw.1 as f64);
        let mut out = Vec::with_capacity(n * n);
        for iy in 0..n {
            for ix in 0..n {
                out.push(((ix as f64 + 0.5) / n as f64 * w, (iy as f64 + 0.5) / n as f64 * h));
            }
        }
        out
    }
}

impl Module for PromptEncoder {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        out.push((crate::nn::join(prefix, "fg_type"), self.fg_type.clone()));
        out.push((crate::nn::join(prefix, "bg_type"), self.bg_type.clone()));
        out.push((crate::nn::join(prefix, "tl_type"), self.tl_type.clone()));
        out.push((crate::nn::join(prefix, "br_type"), self.br_type.clone()));
        self.mask_conv1.collect_params(&crate::nn::join(prefix, "mask_conv1"), out);
        self.mask_conv2.collect_params(&crate::nn::join(prefix, "mask_conv2"), out);
        self.mask_proj.collect_params(&crate::nn::join(prefix, "mask_proj"), out);
    }
}

/// The decoder's token concatenation, in fixed order.
pub struct TokenBundle {
    pub tokens: Tensor,
    pub n_sparse: usize,
}

impl TokenBundle {
    pub const N_MASK_TOKENS: usize = 4;

    pub fn new(mc_filter: &Tensor, iou: &Tensor, sparse: &Tensor) -> Result<Self> {
        if mc_filter.shape()[0] != Self::N_MASK_TOKENS || iou.shape()[0] != 1 {
            return Err(Error::shape("token bundle expects 4 mask-filter tokens and 1 IoU token"));
        }
        let k = sparse.shape()[0];
        if k == 0 {
            return Err(Error::shape("token bundle needs at least one sparse prompt"));
        }
        let tokens = Tensor::concat(&[mc_filter.clone(), iou.clone(), sparse.clone()], 0);
        Ok(TokenBundle { tokens, n_sparse: k })
    }

    pub fn len(&self) -> usize {
        Self::N_MASK_TOKENS + 1 + self.n_sparse
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

struct TwoWayBlock {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_t2i: MultiHeadAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    cross_i2t: MultiHeadAttention,
    norm4: LayerNorm,
}

impl TwoWayBlock {
    fn new(cfg: &SamHeadConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.dim;
        let narrow = c / cfg.downsample_rate;
        TwoWayBlock {
            self_attn: MultiHeadAttention::new(rng, c, cfg.num_heads, c),
            norm1: LayerNorm::new(c),
            cross_t2i: MultiHeadAttention::new(rng, c, cfg.num_heads, narrow),
            norm2: LayerNorm::new(c),
            mlp: Mlp::new(rng, &[c, cfg.ff_dim, c], Activation::Relu),
            norm3: LayerNorm::new(c),
            cross_i2t: MultiHeadAttention::new(rng, c, cfg.num_heads, narrow),
            norm4: LayerNorm::new(c),
        }
    }

    /// `(tokens, image)` → `(tokens', image')`; `pe` is the image position
    /// code added to image keys/queries.
    fn forward(&self, t: &Tensor, x: &Tensor, pe: &Tensor) -> (Tensor, Tensor) {
        let sa = self.self_attn.forward(t, t, t);
        let t = self.norm1.forward(&t.add(&sa));
        let xk = x.add(pe);
        let ca = self.cross_t2i.forward(&t, &xk, x);
        let t = self.norm2.forward(&t.add(&ca));
        let f = self.mlp.forward(&t);
        let t = self.norm3.forward(&t.add(&f));
        let ia = self.cross_i2t.forward(&xk, &t, &t);
        let x = self.norm4.forward(&x.add(&ia));
        (t, x)
    }
}

/// Everything `decode` returns for one prompt bundle.
pub struct SamDecode {
    /// `[4, H, W]` mask logits at image resolution.
    pub masks: Tensor,
    /// `[4, H/4, W/4]` mask logits at the decoder's native resolution.
    pub masks_native: Tensor,
    /// `[4]` predicted mask quality in `[0, 1]`.
    pub iou: Tensor,
}

impl SamDecode {
    /// The canonical single-mask view (index 0), `[H, W]` logits.
    pub fn primary_mask(&self) -> Tensor {
        self.masks.slice_axis(0, 0, 1).reshape(&[
            self.masks.shape()[1],
            self.masks.shape()[2],
        ])
    }

    pub fn primary_mask_native(&self) -> Tensor {
        self.masks_native.slice_axis(0, 0, 1).reshape(&[
            self.masks_native.shape()[1],
            self.masks_native.shape()[2],
        ])
    }
}

pub struct SamHead {
    pub cfg: SamHeadConfig,
    mc_filter: Param,
    iou_token: Param,
    blocks: Vec<TwoWayBlock>,
    final_t2i: MultiHeadAttention,
    final_norm: LayerNorm,
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
    hyper: Vec<Mlp>,
    iou_head: Mlp,
}

impl SamHead {
    pub fn new(cfg: SamHeadConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.dim;
        let narrow = c / cfg.downsample_rate;
        let blocks = (0..cfg.depth).map(|_| TwoWayBlock::new(&cfg, rng)).collect();
        Ok(SamHead {
            mc_filter: Param::new(crate::nn::uniform_init(rng, &[4, c], c)),
            iou_token: Param::new(crate::nn::uniform_init(rng, &[1, c], c)),
            blocks,
            final_t2i: MultiHeadAttention::new(rng, c, cfg.num_heads, narrow),
            final_norm: LayerNorm::new(c),
            up1: ConvTranspose2d::new(rng, c, c / 4, 2, 2),
            up2: ConvTranspose2d::new(rng, c / 4, c / 8, 2, 2),
            hyper: (0..4).map(|_| Mlp::new(rng, &[c, c, c / 8], Activation::Relu)).collect(),
            iou_head: Mlp::new(rng, &[c, c, 4], Activation::Relu),
            cfg,
        })
    }

    /// Freeze or unfreeze every decoder weight (the prompter-training
    /// regime keeps this head frozen; ablations may unfreeze it).
    pub fn set_trainable(&self, trainable: bool) {
        let mut params = Vec::new();
        self.collect_params("", &mut params);
        for (_, p) in params {
            p.set_trainable(trainable);
        }
    }

    /// Run the two-way decoder for one prompt bundle.
    ///
    /// * `f_img` — `[c, h, w]` image feature map (the encoder grid).
    /// * `dense` — optional `[c, h, w]` dense prompt map added to `f_img`.
    /// * `sparse` — `k ≥ 1` sparse prompt tokens.
    /// * `image_hw` — source resolution `(H, W)`; must be `16×` the grid.
    pub fn decode(
        &self,
        f_img: &Tensor,
        dense: Option<&Tensor>,
        sparse: &[SparsePrompt],
        image_hw: (usize, usize),
    ) -> Result<SamDecode> {
        let s = f_img.shape().to_vec();
        if s.len() != 3 || s[0] != self.cfg.dim {
            return Err(Error::shape(format!(
                "image features must be [{}, h, w], got {s:?}",
                self.cfg.dim
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ih, iw) = image_hw;
        if ih != 16 * h || iw != 16 * w {
            return Err(Error::shape(format!(
                "image {ih}x{iw} is not 16x the {h}x{w} feature grid"
            )));
        }
        if sparse.is_empty() {
            return Err(Error::shape("decode needs at least one sparse prompt"));
        }
        let rows: Vec<Tensor> =
            sparse.iter().map(|p| p.embedding.reshape(&[1, c])).collect();
        let sparse_t = Tensor::concat(&rows, 0);
        let bundle =
            TokenBundle::new(&self.mc_filter.tensor(), &self.iou_token.tensor(), &sparse_t)?;

        let x_map = match dense {
            Some(d) => {
                if d.shape() != f_img.shape() {
                    return Err(Error::shape("dense prompt must match the feature map shape"));
                }
                f_img.add(d)
            }
            None => f_img.clone(),
        };
        // [c, h, w] -> [hw, c]
        let mut x = x_map.reshape(&[c, h * w]).permute(&[1, 0]);
        let pe = Tensor::constant(
            ndarray::ArrayD::from_shape_vec(
                IxDyn(&[h * w, c]),
                {
                    let g = sine_grid(h, w, c);
                    let mut v = Vec::with_capacity(h * w * c);
                    for yy in 0..h {
                        for xx in 0..w {
                            for cc in 0..c {
                                v.push(g[[cc, yy, xx]]);
                            }
                        }
                    }
                    v
                },
            )
            .unwrap(),
        );
        let mut t = bundle.tokens;
        for blk in &self.blocks {
            let (tn, xn) = blk.forward(&t, &x, &pe);
            t = tn;
            x = xn;
        }
        let xk = x.add(&pe);
        let fa = self.final_t2i.forward(&t, &xk, &x);
        let t = self.final_norm.forward(&t.add(&fa));

        // image tokens back to a map, then 4x upscale
        let x_sp = x.permute(&[1, 0]).reshape(&[c, h, w]);
        let up = self.up1.forward(&x_sp).gelu();
        let emb = self.up2.forward(&up).gelu(); // [c/8, 4h, 4w]
        let emb_flat = emb.reshape(&[c / 8, 16 * h * w]);

        let mut mask_rows = Vec::with_capacity(4);
        for (j, mlp) in self.hyper.iter().enumerate() {
            let tok = t.slice_axis(0, j, j + 1); // [1, c]
            let hyp = mlp.forward(&tok); // [1, c/8]
            mask_rows.push(hyp.matmul(&emb_flat)); // [1, 16hw]
        }
        let masks_native = Tensor::concat(&mask_rows, 0).reshape(&[4, 4 * h, 4 * w]);
        let masks = masks_native.upsample_bilinear(ih, iw);
        let iou_tok = t.slice_axis(0, 4, 5);
        let iou = self.iou_head.forward(&iou_tok).sigmoid().reshape(&[4]);
        Ok(SamDecode { masks, masks_native, iou })
    }
}

impl Module for SamHead {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        let j = |s: &str| crate::nn::join(prefix, s);
        out.push((j("mc_filter"), self.mc_filter.clone()));
        out.push((j("iou_token"), self.iou_token.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            b.self_attn.collect_params(&j(&format!("{p}.self_attn")), out);
            b.norm1.collect_params(&j(&format!("{p}.norm1")), out);
            b.cross_t2i.collect_params(&j(&format!("{p}.cross_t2i")), out);
            b.norm2.collect_params(&j(&format!("{p}.norm2")), out);
            b.mlp.collect_params(&j(&format!("{p}.mlp")), out);
            b.norm3.collect_params(&j(&format!("{p}.norm3")), out);
            b.cross_i2t.collect_params(&j(&format!("{p}.cross_i2t")), out);
            b.norm4.collect_params(&j(&format!("{p}.norm4")), out);
        }
        self.final_t2i.collect_params(&j("final_t2i"), out);
        self.final_norm.collect_params(&j("final_norm"), out);
        self.up1.collect_params(&j("up1"), out);
        self.up2.collect_params(&j("up2"), out);
        for (i, m) in self.hyper.iter().enumerate() {
            m.collect_params(&j(&format!("hyper.{i}")), out);
        }
        self.iou_head.collect_params(&j("iou_head"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn feature_map(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::constant(ndarray::ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |ix| {
            ((ix[0] * 17 + ix[1] * 5 + ix[2]) % 23) as f64 / 23.0 - 0.5
        }))
    }

    fn learned_prompts(n: usize, c: usize) -> Vec<SparsePrompt> {
        (0..n)
            .map(|i| {
                SparsePrompt::learned(Tensor::variable(ndarray::ArrayD::from_shape_fn(
                    IxDyn(&[c]),
                    |ix| ((ix[0] + 3 * i) % 11) as f64 / 11.0 - 0.4,
                )))
            })
            .collect()
    }

    #[test]
    fn bundle_has_five_plus_k_tokens() {
        let head = SamHead::new(SamHeadConfig::default(), &mut rng()).unwrap();
        let mc = head.mc_filter.tensor();
        let iou = head.iou_token.tensor();
        let sparse = Tensor::zeros(&[5, 64]);
        let b = TokenBundle::new(&mc, &iou, &sparse).unwrap();
        assert_eq!(b.len(), 10);
        assert_eq!(b.tokens.shape(), &[10, 64]);
    }

    #[test]
    fn decode_shapes_and_mask_count() {
        let head = SamHead::new(SamHeadConfig::default(), &mut rng()).unwrap();
        let f = feature_map(64, 8, 8);
        let out = head.decode(&f, None, &learned_prompts(5, 64), (128, 128)).unwrap();
        assert_eq!(out.masks.shape(), &[4, 128, 128]);
        assert_eq!(out.masks_native.shape(), &[4, 32, 32]);
        assert_eq!(out.iou.shape(), &[4]);
        assert_eq!(out.primary_mask().shape(), &[128, 128]);
        for v in out.iou.data().iter() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn sparse_token_order_does_not_change_masks() {
        let head = SamHead::new(SamHeadConfig::default(), &mut rng()).unwrap();
        let f = feature_map(64, 8, 8);
        let prompts = learned_prompts(4, 64);
        let a = head.decode(&f, None, &prompts, (128, 128)).unwrap();
        let mut shuffled = prompts.clone();
        shuffled.reverse();
        let b = head.decode(&f, None, &shuffled, (128, 128)).unwrap();
        let max_dev = a
            .masks
            .data()
            .iter()
            .zip(b.masks.data().iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-9, "masks moved by {max_dev} under prompt permutation");
    }

    #[test]
    fn dense_prompt_changes_output() {
        let head = SamHead::new(SamHeadConfig::default(), &mut rng()).unwrap();
        let f = feature_map(64, 8, 8);
        let prompts = learned_prompts(3, 64);
        let enc = PromptEncoder::new(64, &mut rng());
        let coarse = Tensor::constant(ndarray::ArrayD::from_shape_fn(IxDyn(&[32, 32]), |ix| {
            if ix[0] > 8 && ix[0] < 20 { 2.0 } else { -2.0 }
        }));
        let dense = enc.encode_mask(&coarse, (8, 8)).unwrap();
        assert_eq!(dense.shape(), &[64, 8, 8]);
        let a = head.decode(&f, None, &prompts, (128, 128)).unwrap();
        let b = head.decode(&f, Some(&dense), &prompts, (128, 128)).unwrap();
        assert_ne!(a.masks.data().as_slice().unwrap(), b.masks.data().as_slice().unwrap());
    }

    #[test]
    fn point_and_box_encoders_validate_coordinates() {
        let enc = PromptEncoder::new(64, &mut rng());
        assert!(enc.encode_points(&[(20.0, 30.0, true)], (128, 128)).is_ok());
        assert!(enc.encode_points(&[(-1.0, 30.0, true)], (128, 128)).is_err());
        assert!(enc.encode_points(&[(20.0, 200.0, false)], (128, 128)).is_err());
        assert_eq!(enc.encode_box([10.0, 10.0, 50.0, 40.0], (128, 128)).unwrap().len(), 2);
        assert!(enc.encode_box([50.0, 10.0, 10.0, 40.0], (128, 128)).is_err());
        let fg = enc.encode_points(&[(20.0, 30.0, true)], (128, 128)).unwrap();
        let bg = enc.encode_points(&[(20.0, 30.0, false)], (128, 128)).unwrap();
        assert_ne!(
            fg[0].embedding.data().as_slice().unwrap(),
            bg[0].embedding.data().as_slice().unwrap()
        );
    }

    #[test]
    fn grid_covers_image_interior() {
        let pts = PromptEncoder::point_grid(4, (128, 128));
        assert_eq!(pts.len(), 16);
        assert_eq!(pts[0], (16.0, 16.0));
        assert_eq!(pts[15], (112.0, 112.0));
    }

    #[test]
    fn gradients_reach_prompts_through_frozen_head() {
        let head = SamHead::new(SamHeadConfig::default(), &mut rng()).unwrap();
        head.set_trainable(false);
        let f = feature_map(64, 8, 8);
        let prompt = Tensor::variable(ndarray::ArrayD::from_shape_fn(IxDyn(&[64]), |ix| {
            (ix[0] % 7) as f64 / 7.0 - 0.3
        }));
        let loss = |xs: &[Tensor]| {
            let p = vec![SparsePrompt::learned(xs[0].clone())];
            let out = head.decode(&f, None, &p, (128, 128)).unwrap();
            out.masks_native.mean_all()
        };
        crate::tensor::check::gradcheck(&[prompt], loss, 1e-3);
    }

    #[test]
    fn rejects_empty_prompts_and_bad_grid() {
        let head = SamHead::new(SamHeadConfig::default(), &mut rng()).unwrap();
        let f = feature_map(64, 8, 8);
        assert!(head.decode(&f, None, &[], (128, 128)).is_err());
        assert!(head.decode(&f, None, &learned_prompts(2, 64), (96, 128)).is_err());
    }
}
