//! Frozen ViT-style image encoder. It stands in for a large pretrained
//! backbone: a pre-norm transformer over non-overlapping patches whose
//! weights are fixed at construction (seeded independently of the run seed)
//! and never receive gradients. The forward pass is plain `ndarray` math —
//! no autodiff graph is built behind the frozen boundary.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::pe::sine_grid;
use crate::tensor::Param;

/// Weights are always initialized from this fixed seed so the frozen
/// backbone is identical across runs regardless of the training seed.
const ENCODER_INIT_SEED: u64 = 42;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default = "default_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    /// `[start, end, step]` over block indices; block i's output is kept
    /// when `i ∈ {start, start+step, ...} ∩ [start, end)`.
    #[serde(default = "default_selector")]
    pub layer_selector: [usize; 3],
    #[serde(default = "default_true")]
    pub weights_frozen: bool,
}

fn default_patch() -> usize {
    16
}
fn default_dim() -> usize {
    64
}
fn default_depth() -> usize {
    8
}
fn default_heads() -> usize {
    4
}
fn default_selector() -> [usize; 3] {
    [0, 8, 2]
}
fn default_true() -> bool {
    true
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: default_patch(),
            embed_dim: default_dim(),
            depth: default_depth(),
            num_heads: default_heads(),
            layer_selector: default_selector(),
            weights_frozen: true,
        }
    }
}

impl EncoderConfig {
    pub fn selected_layers(&self) -> Vec<usize> {
        let [start, end, step] = self.layer_selector;
        (start..end.min(self.depth)).step_by(step.max(1)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("encoder depth must be ≥ 1"));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config("embed_dim must be divisible by num_heads"));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::config("embed_dim must be divisible by 4"));
        }
        let [start, end, step] = self.layer_selector;
        if step == 0 || start >= end || end > self.depth {
            return Err(Error::config(format!(
                "layer_selector [{start}, {end}, {step}] out of range for depth {}",
                self.depth
            )));
        }
        if self.selected_layers().is_empty() {
            return Err(Error::config("layer selection is empty"));
        }
        Ok(())
    }
}

/// Final feature map plus the selected intermediates, all `[c, h, w]`.
pub struct EncoderOutput {
    pub f_img: Array3<f64>,
    pub intermediates: Vec<Array3<f64>>,
}

struct Block {
    ln1_g: Param,
    ln1_b: Param,
    wq: Param,
    wk: Param,
    wv: Param,
    wo: Param,
    bq: Param,
    bk: Param,
    bv: Param,
    bo: Param,
    ln2_g: Param,
    ln2_b: Param,
    w1: Param,
    b1: Param,
    w2: Param,
    b2: Param,
}

pub struct ImageEncoder {
    pub cfg: EncoderConfig,
    patch_w: Param,
    patch_b: Param,
    blocks: Vec<Block>,
    lnf_g: Param,
    lnf_b: Param,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ndarray::ArrayD<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(shape), v).unwrap()
}

impl ImageEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(ENCODER_INIT_SEED);
        let c = cfg.embed_dim;
        let patch_in = 3 * cfg.patch_size * cfg.patch_size;
        let frozen = |arr| {
            let p = Param::new(arr);
            p.set_trainable(false);
            p
        };
        let ones = |dim: usize| frozen(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[dim]), 1.0));
        let zeros = |dim: usize| frozen(ndarray::ArrayD::zeros(ndarray::IxDyn(&[dim])));
        let patch_w = frozen(uniform(rng, &[patch_in, c], patch_in));
        let patch_b = zeros(c);
        let blocks = (0..cfg.depth)
            .map(|_| Block {
                ln1_g: ones(c),
                ln1_b: zeros(c),
                wq: frozen(uniform(rng, &[c, c], c)),
                wk: frozen(uniform(rng, &[c, c], c)),
                wv: frozen(uniform(rng, &[c, c], c)),
                wo: frozen(uniform(rng, &[c, c], c)),
                bq: zeros(c),
                bk: zeros(c),
                bv: zeros(c),
                bo: zeros(c),
                ln2_g: ones(c),
                ln2_b: zeros(c),
                w1: frozen(uniform(rng, &[c, 4 * c], c)),
                b1: zeros(4 * c),
                w2: frozen(uniform(rng, &[4 * c, c], 4 * c)),
                b2: zeros(c),
            })
            .collect();
        Ok(ImageEncoder {
            cfg,
            patch_w,
            patch_b,
            blocks,
            lnf_g: ones(c),
            lnf_b: zeros(c),
        })
    }

    /// Encode a `[3, H, W]` image (values in [0, 1]) into the final feature
    /// map and the selector's intermediate maps. Pure function of
    /// (image, weights): repeated calls are bit-identical.
    pub fn encode(&self, image: &Array3<f64>) -> Result<EncoderOutput> {
        let (ch, height, width) = image.dim();
        if ch != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {ch}")));
        }
        let p = self.cfg.patch_size;
        if height % p != 0 || width % p != 0 {
            return Err(Error::shape(format!(
                "image {height}x{width} not divisible by patch size {p}"
            )));
        }
        let (h, w) = (height / p, width / p);
        let c = self.cfg.embed_dim;

        // patchify: [n_tokens, 3*p*p]
        let n = h * w;
        let mut patches = Array2::<f64>::zeros((n, 3 * p * p));
        for ty in 0..h {
            for tx in 0..w {
                let t = ty * w + tx;
                let mut k = 0;
                for ci in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            patches[[t, k]] = image[[ci, ty * p + dy, tx * p + dx]];
                            k += 1;
                        }
                    }
                }
            }
        }
        let patch_w = as2(&self.patch_w);
        let mut x = patches.dot(&patch_w);
        add_row(&mut x, &as1(&self.patch_b));

        // fixed sine position code over the token grid
        let pe = sine_grid(h, w, c);
        for ty in 0..h {
            for tx in 0..w {
                for cc in 0..c {
                    x[[ty * w + tx, cc]] += pe[[cc, ty, tx]];
                }
            }
        }

        let selected = self.cfg.selected_layers();
        let mut intermediates = Vec::with_capacity(selected.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            // pre-norm attention
            let xn = layer_norm_rows(&x, &as1(&blk.ln1_g), &as1(&blk.ln1_b));
            let attn = self.attention(blk, &xn);
            x += &attn;
            // pre-norm MLP
            let xn = layer_norm_rows(&x, &as1(&blk.ln2_g), &as1(&blk.ln2_b));
            let mut hmid = xn.dot(&as2(&blk.w1));
            add_row(&mut hmid, &as1(&blk.b1));
            hmid.mapv_inplace(gelu);
            let mut out = hmid.dot(&as2(&blk.w2));
            add_row(&mut out, &as1(&blk.b2));
            x += &out;
            if selected.contains(&i) {
                intermediates.push(tokens_to_map(&x, h, w));
            }
        }
        let xf = layer_norm_rows(&x, &as1(&self.lnf_g), &as1(&self.lnf_b));
        Ok(EncoderOutput { f_img: tokens_to_map(&xf, h, w), intermediates })
    }

    fn attention(&self, blk: &Block, x: &Array2<f64>) -> Array2<f64> {
        let (n, c) = x.dim();
        let heads = self.cfg.num_heads;
        let dh = c / heads;
        let mut q = x.dot(&as2(&blk.wq));
        add_row(&mut q, &as1(&blk.bq));
        let mut k = x.dot(&as2(&blk.wk));
        add_row(&mut k, &as1(&blk.bk));
        let mut v = x.dot(&as2(&blk.wv));
        add_row(&mut v, &as1(&blk.bv));
        let mut mixed = Array2::<f64>::zeros((n, c));
        for hh in 0..heads {
            let cols = hh * dh..(hh + 1) * dh;
            let qh = q.slice(ndarray::s![.., cols.clone()]);
            let kh = k.slice(ndarray::s![.., cols.clone()]);
            let vh = v.slice(ndarray::s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s / (dh as f64).sqrt());
            for mut row in scores.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|s| (s - max).exp());
                let sum: f64 = row.sum();
                row.mapv_inplace(|s| s / sum);
            }
            let oh = scores.dot(&vh);
            mixed.slice_mut(ndarray::s![.., cols]).assign(&oh);
        }
        let mut out = mixed.dot(&as2(&blk.wo));
        add_row(&mut out, &as1(&blk.bo));
        out
    }

    /// Every weight under stable names (all frozen).
    pub fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = vec![
            ("patch_embed.w".to_string(), self.patch_w.clone()),
            ("patch_embed.b".to_string(), self.patch_b.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let pairs: [(&str, &Param); 16] = [
                ("ln1.gamma", &b.ln1_g),
                ("ln1.beta", &b.ln1_b),
                ("attn.wq", &b.wq),
                ("attn.wk", &b.wk),
                ("attn.wv", &b.wv),
                ("attn.wo", &b.wo),
                ("attn.bq", &b.bq),
                ("attn.bk", &b.bk),
                ("attn.bv", &b.bv),
                ("attn.bo", &b.bo),
                ("ln2.gamma", &b.ln2_g),
                ("ln2.beta", &b.ln2_b),
                ("mlp.w1", &b.w1),
                ("mlp.b1", &b.b1),
                ("mlp.w2", &b.w2),
                ("mlp.b2", &b.b2),
            ];
            for (name, p) in pairs {
                out.push((format!("blocks.{i}.{name}"), (*p).clone()));
            }
        }
        out.push(("ln_f.gamma".to_string(), self.lnf_g.clone()));
        out.push(("ln_f.beta".to_string(), self.lnf_b.clone()));
        out
    }
}

fn as2(p: &Param) -> Array2<f64> {
    p.value()
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned()
}

fn as1(p: &Param) -> Array1<f64> {
    p.value()
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap()
        .to_owned()
}

fn add_row(x: &mut Array2<f64>, b: &Array1<f64>) {
    for mut row in x.rows_mut() {
        row += b;
    }
}

fn layer_norm_rows(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> Array2<f64> {
    let mut out = x.clone();
    let c = x.dim().1 as f64;
    for mut row in out.rows_mut() {
        let mu = row.sum() / c;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c;
        let istd = 1.0 / (var + 1e-5).sqrt();
        for (k, v) in row.iter_mut().enumerate() {
            *v = (*v - mu) * istd * gamma[k] + beta[k];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// `[n_tokens, c]` → `[c, h, w]`
fn tokens_to_map(x: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = x.dim().1;
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ty in 0..h {
        for tx in 0..w {
            for cc in 0..c {
                out[[cc, ty, tx]] = x[[ty * w + tx, cc]];
            }
        }
    }
    out
}
