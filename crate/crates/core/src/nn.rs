//! Trainable layers over the tensor ops, plus the visitor plumbing shared by
//! the optimizer, checkpoint writer and parameter accounting.
//!
//! Every layer exposes its tensors through [`Module::visit`] with stable
//! dotted names. Trainable parameters carry the requires-grad flag; batch
//! norm running statistics come through the same walk with the flag off, so
//! they reach checkpoints but never the optimizer or the parameter count.

use crate::dtype::Scalar;
use crate::error::Result;
use crate::init::{conv_normal, deconv_normal, trunc_normal, zeros_param, InitRng};
use crate::kernels::{Conv2dGeom, Deconv2dGeom};
use crate::tensor::Tensor;

/// Whether a forward pass uses batch statistics (and updates the running
/// ones) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train)
    }
}

/// Joins visitor path segments, skipping the dot at the root.
pub fn path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A tree of tensors with stable names.
pub trait Module<T: Scalar> {
    /// Walks every tensor depth-first in declaration order, handing `vis` a
    /// dotted path rooted at `prefix`.
    fn visit<'a>(&'a self, prefix: &str, vis: &mut dyn FnMut(&str, &'a Tensor<T>));

    /// Mutable counterpart of `visit`; same order, same names.
    fn visit_mut<'a>(&'a mut self, prefix: &str, vis: &mut dyn FnMut(&str, &'a mut Tensor<T>));
}

impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit<'a>(&'a self, prefix: &str, vis: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&path(prefix, &i.to_string()), vis);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, vis: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&path(prefix, &i.to_string()), vis);
        }
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Option<M> {
    fn visit<'a>(&'a self, prefix: &str, vis: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        if let Some(m) = self {
            m.visit(prefix, vis);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, vis: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        if let Some(m) = self {
            m.visit_mut(prefix, vis);
        }
    }
}

/// Every tensor with its dotted name, in visitation order.
pub fn named_tensors<'a, T: Scalar>(m: &'a dyn Module<T>) -> Vec<(String, &'a Tensor<T>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, t| out.push((name.to_string(), t)));
    out
}

/// Mutable references to every tensor, in visitation order.
pub fn named_tensors_mut<'a, T: Scalar>(
    m: &'a mut dyn Module<T>,
) -> Vec<(String, &'a mut Tensor<T>)> {
    let mut out = Vec::new();
    m.visit_mut("", &mut |name, t| out.push((name.to_string(), t)));
    out
}

/// Mutable references to the trainable parameters only, in visitation order.
/// This is the exact list the optimizer steps over.
pub fn trainable_params_mut<'a, T: Scalar>(m: &'a mut dyn Module<T>) -> Vec<&'a mut Tensor<T>> {
    let mut out: Vec<&'a mut Tensor<T>> = Vec::new();
    m.visit_mut("", &mut |_, t| {
        if t.requires_grad() {
            out.push(t);
        }
    });
    out
}

/// Total trainable scalar count. Running statistics do not contribute.
pub fn param_count<T: Scalar>(m: &dyn Module<T>) -> usize {
    let mut total = 0;
    m.visit("", &mut |_, t| {
        if t.requires_grad() {
            total += t.numel();
        }
    });
    total
}

// ── linear ──────────────────────────────────────────────────────────────

/// Fully connected layer; weight is [d_in, d_out].
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut InitRng) -> Self {
        Self {
            weight: trunc_normal(&[d_in, d_out], 0.02, rng),
            bias: zeros_param(&[d_out]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(&self.weight, Some(&self.bias))
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, vis: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        vis(&path(prefix, "weight"), &self.weight);
        vis(&path(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, vis: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        vis(&path(prefix, "weight"), &mut self.weight);
        vis(&path(prefix, "bias"), &mut self.bias);
    }
}

// ── layer norm ──────────────────────────────────────────────────────────

/// Normalization over the last axis with per-feature gain and offset.
#[derive(Debug, Clone)]
pub struct LayerNorm<T: Scalar> {
    pub gain: Tensor<T>,
    pub offset: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Tensor::full(&[d], T::one()).requiring_grad(),
            offset: zeros_param(&[d]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gain, &self.offset, T::from_f64(self.eps))
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, vis: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        vis(&path(prefix, "gain"), &self.gain);
        vis(&path(prefix, "offset"), &self.offset);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, vis: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        vis(&path(prefix, "gain"), &mut self.gain);
        vis(&path(prefix, "offset"), &mut self.offset);
    }
}

// ── batch norm ──────────────────────────────────────────────────────────

/// Per-channel batch normalization for [n, c, h, w] maps. Train mode uses
/// batch statistics and folds them into the running estimates (the stored
/// running variance is the unbiased one); eval mode applies the stored
/// estimates unchanged.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T: Scalar> {
    pub gain: Tensor<T>,
    pub offset: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(c: usize) -> Self {
        Self {
            gain: Tensor::full(&[c], T::one()).requiring_grad(),
            offset: zeros_param(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::full(&[c], T::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let eps = T::from_f64(self.eps);
        match mode {
            Mode::Train => {
                let (y, mean, var) = x.batch_norm_train(&self.gain, &self.offset, eps)?;
                let shape = x.shape();
                let per_channel = (shape[0] * shape[2] * shape[3]) as f64;
                let bessel = per_channel / (per_channel - 1.0);
                let m = self.momentum;
                let rm = self.running_mean.data_mut();
                for (r, b) in rm.iter_mut().zip(&mean) {
                    *r = T::from_f64(r.as_f64() * (1.0 - m) + b.as_f64() * m);
                }
                let rv = self.running_var.data_mut();
                for (r, b) in rv.iter_mut().zip(&var) {
                    *r = T::from_f64(r.as_f64() * (1.0 - m) + b.as_f64() * bessel * m);
                }
                Ok(y)
            }
            Mode::Eval => x.batch_norm_eval(
                &self.gain,
                &self.offset,
                self.running_mean.data(),
                self.running_var.data(),
                eps,
            ),
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit<'a>(&'a self, prefix: &str, vis: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        vis(&path(prefix, "gain"), &self.gain);
        vis(&path(prefix, "offset"), &self.offset);
        vis(&path(prefix, "running_mean"), &self.running_mean);
        vis(&path(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, vis: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        vis(&path(prefix, "gain"), &mut self.gain);
        vis(&path(prefix, "offset"), &mut self.offset);
        vis(&path(prefix, "running_mean"), &mut self.running_mean);
        vis(&path(prefix, "running_var"), &mut self.running_var);
    }
}

// ── convolutions ────────────────────────────────────────────────────────

/// Plain convolution; weight is [c_out, c_in/groups, k, k].
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub geom: Conv2dGeom,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(c_in: usize, c_out: usize, k: usize, geom: Conv2dGeom, rng: &mut InitRng) -> Self {
        Self {
            weight: conv_normal(&[c_out, c_in / geom.groups, k, k], geom.groups, rng),
            bias: zeros_param(&[c_out]),
            geom,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, Some(&self.bias), self.geom)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit<'a>(&'a self, prefix: &str, vis: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        vis(&path(prefix, "weight"), &self.weight);
        vis(&path(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, vis: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        vis(&path(prefix, "weight"), &mut self.weight);
        vis(&path(prefix, "bias"), &mut self.bias);
    }
}

/// Transposed convolution; weight is [c_in, c_out, k, k].
#[derive(Debug, Clone)]
pub struct Deconv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub geom: Deconv2dGeom,
}

impl<T: Scalar> Deconv2d<T> {
    pub fn new(c_in: usize, c_out: usize, k: usize, geom: Deconv2dGeom, rng: &mut InitRng) -> Self {
        Self {
            weight: deconv_normal(&[c_in, c_out, k, k], rng),
            bias: zeros_param(&[c_out]),
            geom,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.deconv2d(&self.weight, Some(&self.bias), self.geom)
    }
}

impl<T: Scalar> Module<T> for Deconv2d<T> {
    fn visit<'a>(&'a self, prefix: &str, vis: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        vis(&path(prefix, "weight"), &self.weight);
        vis(&path(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, vis: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        vis(&path(prefix, "weight"), &mut self.weight);
        vis(&path(prefix, "bias"), &mut self.bias);
    }
}

// ── composite blocks ────────────────────────────────────────────────────

/// Convolution followed by batch norm and ReLU. The norm and activation can
/// be dropped individually, which turns the block into a bare linear map for
/// receptive-field probes.
#[derive(Debug, Clone)]
pub struct ConvBlock<T: Scalar> {
    pub conv: Conv2d<T>,
    pub norm: Option<BatchNorm2d<T>>,
    pub relu: bool,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new(c_in: usize, c_out: usize, k: usize, geom: Conv2dGeom, rng: &mut InitRng) -> Self {
        Self {
            conv: Conv2d::new(c_in, c_out, k, geom, rng),
            norm: Some(BatchNorm2d::new(c_out)),
            relu: true,
        }
    }

    /// Convolution only: no norm, no activation.
    pub fn bare(c_in: usize, c_out: usize, k: usize, geom: Conv2dGeom, rng: &mut InitRng) -> Self {
        Self {
            conv: Conv2d::new(c_in, c_out, k, geom, rng),
            norm: None,
            relu: false,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut y = self.conv.forward(x)?;
        if let Some(norm) = &mut self.norm {
            y = norm.forward(&y, mode)?;
        }
        if self.relu {
            y = y.relu();
        }
        Ok(y)
    }
}

impl<T: Scalar> Module<T> for ConvBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, vis: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.conv.visit(&path(prefix, "conv"), vis);
        self.norm.visit(&path(prefix, "norm"), vis);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, vis: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        self.conv.visit_mut(&path(prefix, "conv"), vis);
        self.norm.visit_mut(&path(prefix, "norm"), vis);
    }
}

/// Transposed convolution followed by batch norm and ReLU; the upsampling
/// unit of the high-resolution branch.
#[derive(Debug, Clone)]
pub struct DeconvBlock<T: Scalar> {
    pub deconv: Deconv2d<T>,
    pub norm: BatchNorm2d<T>,
}

impl<T: Scalar> DeconvBlock<T> {
    pub fn new(c_in: usize, c_out: usize, k: usize, geom: Deconv2dGeom, rng: &mut InitRng) -> Self {
        Self {
            deconv: Deconv2d::new(c_in, c_out, k, geom, rng),
            norm: BatchNorm2d::new(c_out),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.deconv.forward(x)?;
        Ok(self.norm.forward(&y, mode)?.relu())
    }
}

impl<T: Scalar> Module<T> for DeconvBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, vis: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.deconv.visit(&path(prefix, "deconv"), vis);
        self.norm.visit(&path(prefix, "norm"), vis);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, vis: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        self.deconv.visit_mut(&path(prefix, "deconv"), vis);
        self.norm.visit_mut(&path(prefix, "norm"), vis);
    }
}
