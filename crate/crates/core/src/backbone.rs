//! The four-stage pyramid encoder: overlapping patch embedding to tokenize
//! feature maps, spatial-reduction attention, and convolutional feed-forward
//! layers. Stages emit feature maps at strides 4, 8, 16 and 32.

use serde::{Deserialize, Serialize};

use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::init::InitRng;
use crate::kernels::Conv2dGeom;
use crate::nn::{path, Conv2d, LayerNorm, Linear, Module};
use crate::tensor::Tensor;

/// A token sequence [n, h*w, c] together with the spatial extents it was
/// flattened from, which the convolutional sublayers need to restore maps.
#[derive(Debug, Clone)]
pub struct Tokens<T: Scalar> {
    pub seq: Tensor<T>,
    pub h: usize,
    pub w: usize,
}

impl<T: Scalar> Tokens<T> {
    pub fn new(seq: Tensor<T>, h: usize, w: usize) -> Self {
        Self { seq, h, w }
    }

    /// Restore the [n, c, h, w] feature map.
    pub fn to_map(&self) -> Result<Tensor<T>> {
        self.seq.seq2img(self.h, self.w)
    }
}

/// Shape of one encoder stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Encoder-layer count.
    pub depth: usize,
    /// Token dimension.
    pub dim: usize,
    /// Attention-head count.
    pub heads: usize,
    /// Spatial-reduction ratio for keys and values.
    pub reduction: usize,
    /// Feed-forward expansion factor.
    pub mlp_ratio: usize,
}

impl StageConfig {
    pub fn validate(&self, stage: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("stage {stage}: {msg}")));
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.reduction == 0 {
            return fail("reduction must be at least 1".into());
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be at least 1".into());
        }
        Ok(())
    }
}

/// Residual composition of an encoder layer. `Standard` is the conventional
/// pre-norm pair s += attn(norm(s)); s += ffn(norm(s)). `Literal` composes
/// ffn(attn(s)) + attn(s) with the attention evaluated once and no
/// free-standing norms (the reduction path keeps its own internal norm).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerForm {
    #[default]
    Standard,
    Literal,
}

// ── patch embedding ─────────────────────────────────────────────────────

/// Overlapping patch embedding: a strided convolution with kernel
/// 2*stride - 1 and padding stride - 1, flattened to tokens and normalized.
#[derive(Debug, Clone)]
pub struct PatchEmbed<T: Scalar> {
    pub conv: Conv2d<T>,
    pub norm: LayerNorm<T>,
    pub stride: usize,
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn new(c_in: usize, dim: usize, stride: usize, rng: &mut InitRng) -> Self {
        let k = 2 * stride - 1;
        Self {
            conv: Conv2d::new(c_in, dim, k, Conv2dGeom::new(stride, stride - 1), rng),
            norm: LayerNorm::new(dim),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tokens<T>> {
        let [_, _, h, w] = x.dims4("patch_embed")?;
        if h % self.stride != 0 || w % self.stride != 0 {
            return Err(Error::shape(
                "patch_embed",
                format!("{h}x{w} input is not divisible by stride {}", self.stride),
            ));
        }
        let map = self.conv.forward(x)?;
        let seq = self.norm.forward(&map.img2seq()?)?;
        Ok(Tokens::new(seq, h / self.stride, w / self.stride))
    }
}

impl<T: Scalar> Module<T> for PatchEmbed<T> {
    fn visit<'a>(&'a self, prefix: &str, vis: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.conv.visit(&path(prefix, "conv"), vis);
        self.norm.visit(&path(prefix, "norm"), vis);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, vis: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        self.conv.visit_mut(&path(prefix, "conv"), vis);
        self.norm.visit_mut(&path(prefix, "norm"), vis);
    }
}

// ── spatial-reduction attention ─────────────────────────────────────────

/// Multi-head attention whose keys and values come from a spatially reduced
/// copy of the sequence: each r x r block of the token grid is gathered into
/// one token of dimension r²c, projected back to c, and normalized. Queries
/// see the full resolution.
#[derive(Debug, Clone)]
pub struct Sra<T: Scalar> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub sr_proj: Linear<T>,
    pub sr_norm: LayerNorm<T>,
    pub heads: usize,
    pub reduction: usize,
}

impl<T: Scalar> Sra<T> {
    pub fn new(dim: usize, heads: usize, reduction: usize, rng: &mut InitRng) -> Self {
        Self {
            q: Linear::new(dim, dim, rng),
            k: Linear::new(dim, dim, rng),
            v: Linear::new(dim, dim, rng),
            out: Linear::new(dim, dim, rng),
            sr_proj: Linear::new(reduction * reduction * dim, dim, rng),
            sr_norm: LayerNorm::new(dim),
            heads,
            reduction,
        }
    }

    /// The reduced sequence the keys and values are projected from.
    pub fn reduce(&self, t: &Tokens<T>) -> Result<Tensor<T>> {
        let merged = t.seq.merge_token_blocks(t.h, t.w, self.reduction)?;
        self.sr_norm.forward(&self.sr_proj.forward(&merged)?)
    }

    pub fn forward(&self, t: &Tokens<T>) -> Result<Tensor<T>> {
        let (n, l, c) = (t.seq.shape()[0], t.seq.shape()[1], t.seq.shape()[2]);
        let heads = self.heads;
        let dh = c / heads;
        let reduced = self.reduce(t)?;
        let m = reduced.shape()[1];

        let split = |x: &Tensor<T>, len: usize| -> Result<Tensor<T>> {
            x.reshape(&[n, len, heads, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[n * heads, len, dh])
        };
        let qh = split(&self.q.forward(&t.seq)?, l)?;
        let kh = split(&self.k.forward(&reduced)?, m)?;
        let vh = split(&self.v.forward(&reduced)?, m)?;

        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let scores = qh.matmul(&kh.permute(&[0, 2, 1])?)?.scale(scale);
        let ctx = scores.softmax_last().matmul(&vh)?;
        let joined = ctx
            .reshape(&[n, heads, l, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n, l, c])?;
        self.out.forward(&joined)
    }
}

impl<T: Scalar> Module<T> for Sra<T> {
    fn visit<'a>(&'a self, prefix: &str, vis: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.q.visit(&path(prefix, "q"), vis);
        self.k.visit(&path(prefix, "k"), vis);
        self.v.visit(&path(prefix, "v"), vis);
        self.out.visit(&path(prefix, "out"), vis);
        self.sr_proj.visit(&path(prefix, "sr_proj"), vis);
        self.sr_norm.visit(&path(prefix, "sr_norm"), vis);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, vis: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        self.q.visit_mut(&path(prefix, "q"), vis);
        self.k.visit_mut(&path(prefix, "k"), vis);
        self.v.visit_mut(&path(prefix, "v"), vis);
        self.out.visit_mut(&path(prefix, "out"), vis);
        self.sr_proj.visit_mut(&path(prefix, "sr_proj"), vis);
        self.sr_norm.visit_mut(&path(prefix, "sr_norm"), vis);
    }
}

// ── convolutional feed-forward ──────────────────────────────────────────

/// Feed-forward network with an interior 3x3 depthwise convolution: linear
/// expansion, depthwise conv over the restored map (padding 1), GELU, linear
/// contraction. The zero padding doubles as the positional signal.
#[derive(Debug, Clone)]
pub struct Cffn<T: Scalar> {
    pub expand: Linear<T>,
    pub dw: Conv2d<T>,
    pub contract: Linear<T>,
}

impl<T: Scalar> Cffn<T> {
    pub fn new(dim: usize, ratio: usize, rng: &mut InitRng) -> Self {
        let hidden = dim * ratio;
        Self {
            expand: Linear::new(dim, hidden, rng),
            dw: Conv2d::new(hidden, hidden, 3, Conv2dGeom::new(1, 1).with_groups(hidden), rng),
            contract: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, t: &Tokens<T>) -> Result<Tensor<T>> {
        let e = self.expand.forward(&t.seq)?;
        let map = e.seq2img(t.h, t.w)?;
        let seq = self.dw.forward(&map)?.img2seq()?;
        self.contract.forward(&seq.gelu())
    }
}

impl<T: Scalar> Module<T> for Cffn<T> {
    fn visit<'a>(&'a self, prefix: &str, vis: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.expand.visit(&path(prefix, "expand"), vis);
        self.dw.visit(&path(prefix, "dw"), vis);
        self.contract.visit(&path(prefix, "contract"), vis);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, vis: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        self.expand.visit_mut(&path(prefix, "expand"), vis);
        self.dw.visit_mut(&path(prefix, "dw"), vis);
        self.contract.visit_mut(&path(prefix, "contract"), vis);
    }
}

// ── encoder layer ───────────────────────────────────────────────────────

/// One attention + feed-forward pair. The `Standard` form owns two
/// pre-norms; the `Literal` form has none.
#[derive(Debug, Clone)]
pub struct EncoderLayer<T: Scalar> {
    pub attn_norm: Option<LayerNorm<T>>,
    pub attn: Sra<T>,
    pub ffn_norm: Option<LayerNorm<T>>,
    pub ffn: Cffn<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    pub fn new(cfg: &StageConfig, form: LayerForm, rng: &mut InitRng) -> Self {
        let norms = matches!(form, LayerForm::Standard);
        Self {
            attn_norm: norms.then(|| LayerNorm::new(cfg.dim)),
            attn: Sra::new(cfg.dim, cfg.heads, cfg.reduction, rng),
            ffn_norm: norms.then(|| LayerNorm::new(cfg.dim)),
            ffn: Cffn::new(cfg.dim, cfg.mlp_ratio, rng),
        }
    }

    pub fn forward(&self, t: &Tokens<T>) -> Result<Tokens<T>> {
        let (h, w) = (t.h, t.w);
        let seq = match (&self.attn_norm, &self.ffn_norm) {
            (Some(n1), Some(n2)) => {
                let a = self.attn.forward(&Tokens::new(n1.forward(&t.seq)?, h, w))?;
                let s = t.seq.add(&a)?;
                let f = self.ffn.forward(&Tokens::new(n2.forward(&s)?, h, w))?;
                s.add(&f)?
            }
            _ => {
                let a = self.attn.forward(t)?;
                let f = self.ffn.forward(&Tokens::new(a.clone(), h, w))?;
                f.add(&a)?
            }
        };
        Ok(Tokens::new(seq, h, w))
    }
}

impl<T: Scalar> Module<T> for EncoderLayer<T> {
    fn visit<'a>(&'a self, prefix: &str, vis: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.attn_norm.visit(&path(prefix, "attn_norm"), vis);
        self.attn.visit(&path(prefix, "attn"), vis);
        self.ffn_norm.visit(&path(prefix, "ffn_norm"), vis);
        self.ffn.visit(&path(prefix, "ffn"), vis);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, vis: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        self.attn_norm.visit_mut(&path(prefix, "attn_norm"), vis);
        self.attn.visit_mut(&path(prefix, "attn"), vis);
        self.ffn_norm.visit_mut(&path(prefix, "ffn_norm"), vis);
        self.ffn.visit_mut(&path(prefix, "ffn"), vis);
    }
}

// ── stage ───────────────────────────────────────────────────────────────

/// One pyramid stage: an optional patch embedding (the first stage's
/// tokenizer may live outside) followed by the encoder layers.
#[derive(Debug, Clone)]
pub struct Stage<T: Scalar> {
    pub embed: Option<PatchEmbed<T>>,
    pub layers: Vec<EncoderLayer<T>>,
}

impl<T: Scalar> Stage<T> {
    /// Stage with its own patch embedding consuming `c_in` channels.
    pub fn new(
        c_in: usize,
        cfg: &StageConfig,
        stride: usize,
        form: LayerForm,
        rng: &mut InitRng,
    ) -> Self {
        Self {
            embed: Some(PatchEmbed::new(c_in, cfg.dim, stride, rng)),
            layers: (0..cfg.depth).map(|_| EncoderLayer::new(cfg, form, rng)).collect(),
        }
    }

    /// Stage whose tokens are produced elsewhere.
    pub fn headless(cfg: &StageConfig, form: LayerForm, rng: &mut InitRng) -> Self {
        Self {
            embed: None,
            layers: (0..cfg.depth).map(|_| EncoderLayer::new(cfg, form, rng)).collect(),
        }
    }

    pub fn run_layers(&self, mut t: Tokens<T>) -> Result<Tokens<T>> {
        for layer in &self.layers {
            t = layer.forward(&t)?;
        }
        Ok(t)
    }

    /// Tokenize a feature map and run every layer.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tokens<T>> {
        let embed = self
            .embed
            .as_ref()
            .ok_or_else(|| Error::Config("stage has no patch embedding".into()))?;
        self.run_layers(embed.forward(x)?)
    }
}

impl<T: Scalar> Module<T> for Stage<T> {
    fn visit<'a>(&'a self, prefix: &str, vis: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.embed.visit(&path(prefix, "embed"), vis);
        self.layers.visit(&path(prefix, "layers"), vis);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, vis: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        self.embed.visit_mut(&path(prefix, "embed"), vis);
        self.layers.visit_mut(&path(prefix, "layers"), vis);
    }
}
