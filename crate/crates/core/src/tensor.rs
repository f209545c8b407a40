//! Dense row-major tensors, rank 1 to 4, generic over [`Scalar`].
//!
//! Values are immutable once another op has consumed them: the buffer is
//! behind an `Arc`, and the only mutation path ([`Tensor::data_mut`]) is
//! copy-on-write, so recorded graphs keep the values they saw. Ops attach
//! autograd nodes to their outputs when any input participates in
//! differentiation (see [`crate::autograd`]).

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::autograd::{record, record_shared, Op};
use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dGeom, Deconv2dGeom};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Dense tensor. Clones share the buffer and the identity, so a clone is the
/// same logical value (gradients are keyed by that identity).
pub struct Tensor<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    op: Option<Arc<Op<T>>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            id: self.id,
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            op: self.op.clone(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("recorded", &self.op.is_some())
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::shape("tensor", format!("rank must be 1..=4, got {:?}", shape)));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape("tensor", format!("zero-sized dimension in {:?}", shape)));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(
                "tensor",
                format!("{} elements do not fill shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor {
            id: fresh_id(),
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
            op: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(vec![T::zero(); numel], shape).expect("zeros shape")
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(vec![value; numel], shape).expect("full shape")
    }

    pub fn scalar(value: T) -> Self {
        Tensor::from_vec(vec![value], &[1]).expect("scalar")
    }

    pub(crate) fn from_parts(data: Arc<Vec<T>>, shape: Vec<usize>, op: Option<Arc<Op<T>>>) -> Self {
        Tensor { id: fresh_id(), shape, data, requires_grad: false, op }
    }

    /// Mark this tensor as a differentiable leaf (a trainable weight).
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Same values, detached from any recorded computation.
    pub fn detach(&self) -> Self {
        Tensor {
            id: fresh_id(),
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            op: None,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Participates in differentiation: either a grad leaf or op output.
    pub(crate) fn tracked(&self) -> bool {
        self.requires_grad || self.op.is_some()
    }

    pub(crate) fn op(&self) -> Option<&Op<T>> {
        self.op.as_deref()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// In-place access for optimizer steps and weight loading. Copy-on-write:
    /// if a recorded graph still references the buffer it keeps the old
    /// values. Leaves only; op outputs are immutable.
    pub fn data_mut(&mut self) -> &mut [T] {
        assert!(self.op.is_none(), "in-place update of an op output");
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Extract the single element of a scalar tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::shape("item", format!("shape {:?} is not scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        if self.rank() != 4 {
            return Err(Error::shape(op, format!("expected rank 4, got shape {:?}", self.shape)));
        }
        Ok([self.shape[0], self.shape[1], self.shape[2], self.shape[3]])
    }

    // ── convolution ────────────────────────────────────────────────────

    /// 2-D cross-correlation over [n, c, h, w] with stride, zero padding,
    /// dilation, and groups. Weight is [co, ci/groups, kh, kw].
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        geom: Conv2dGeom,
    ) -> Result<Tensor<T>> {
        let ishape = self.dims4("conv2d")?;
        let wshape = weight.dims4("conv2d")?;
        let [_, ci, h, w] = ishape;
        let [co, cig, kh, kw] = wshape;
        if geom.groups == 0 || geom.stride.0 == 0 || geom.stride.1 == 0 {
            return Err(Error::shape("conv2d", "stride and groups must be nonzero".to_string()));
        }
        if geom.dilation.0 == 0 || geom.dilation.1 == 0 {
            return Err(Error::shape("conv2d", "dilation must be nonzero".to_string()));
        }
        if ci % geom.groups != 0 || co % geom.groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("channels in={ci} out={co} not divisible by groups={}", geom.groups),
            ));
        }
        if cig != ci / geom.groups {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weight shape {:?} does not match input {:?} with groups={}",
                    weight.shape, self.shape, geom.groups
                ),
            ));
        }
        let oh = kernels::conv_out_extent(h, kh, geom.stride.0, geom.padding.0, geom.dilation.0);
        let ow = kernels::conv_out_extent(w, kw, geom.stride.1, geom.padding.1, geom.dilation.1);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit input {h}x{w} with {geom:?}"),
            ));
        };
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} does not match {co} output channels", b.shape),
                ));
            }
        }
        let _ = (oh, ow);
        let (out, oshape) =
            kernels::conv2d_fwd(self.data(), ishape, weight.data(), wshape, bias.map(|b| b.data()), geom);
        Ok(record(
            out,
            oshape.to_vec(),
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                geom,
            },
        ))
    }

    /// Transposed convolution; weight is [ci, co, kh, kw]. The exact adjoint
    /// of [`Tensor::conv2d`] over shared stride and padding.
    pub fn deconv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        geom: Deconv2dGeom,
    ) -> Result<Tensor<T>> {
        let ishape = self.dims4("deconv2d")?;
        let wshape = weight.dims4("deconv2d")?;
        let [_, ci, h, w] = ishape;
        let [wci, co, kh, kw] = wshape;
        if wci != ci {
            return Err(Error::shape(
                "deconv2d",
                format!("weight shape {:?} does not match {ci} input channels", weight.shape),
            ));
        }
        if geom.stride.0 == 0 || geom.stride.1 == 0 {
            return Err(Error::shape("deconv2d", "stride must be nonzero".to_string()));
        }
        let oh = kernels::deconv_out_extent(h, kh, geom.stride.0, geom.padding.0);
        let ow = kernels::deconv_out_extent(w, kw, geom.stride.1, geom.padding.1);
        if oh.unwrap_or(0) == 0 || ow.unwrap_or(0) == 0 {
            return Err(Error::shape(
                "deconv2d",
                format!("padding swallows the whole output for input {h}x{w} with {geom:?}"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(Error::shape(
                    "deconv2d",
                    format!("bias shape {:?} does not match {co} output channels", b.shape),
                ));
            }
        }
        let (out, oshape) = kernels::deconv2d_fwd(
            self.data(),
            ishape,
            weight.data(),
            wshape,
            bias.map(|b| b.data()),
            geom,
        );
        Ok(record(
            out,
            oshape.to_vec(),
            Op::Deconv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                geom,
            },
        ))
    }

    // ── linear algebra ─────────────────────────────────────────────────

    /// Affine map over the last dimension: [.., din] x [din, dout] + bias.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        if weight.rank() != 2 {
            return Err(Error::shape(
                "linear",
                format!("weight must be [din, dout], got {:?}", weight.shape),
            ));
        }
        let din = weight.shape[0];
        let dout = weight.shape[1];
        if *self.shape.last().unwrap() != din {
            return Err(Error::shape(
                "linear",
                format!("input {:?} does not end in din={din} (weight {:?})", self.shape, weight.shape),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [dout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias shape {:?} does not match dout={dout}", b.shape),
                ));
            }
        }
        let rows = self.numel() / din;
        let mut out = kernels::matmul_fwd(self.data(), weight.data(), 1, rows, din, dout);
        if let Some(b) = bias {
            for r in 0..rows {
                for (o, v) in out[r * dout..(r + 1) * dout].iter_mut().zip(b.data()) {
                    *o = *o + *v;
                }
            }
        }
        let mut oshape = self.shape.clone();
        *oshape.last_mut().unwrap() = dout;
        Ok(record(
            out,
            oshape,
            Op::Linear { input: self.clone(), weight: weight.clone(), bias: bias.cloned() },
        ))
    }

    /// Batched matrix multiply over the last two dimensions; leading
    /// dimensions must match exactly.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let ra = self.rank();
        if ra < 2 || rhs.rank() != ra {
            return Err(Error::shape(
                "matmul",
                format!("ranks must match and be >= 2: {:?} x {:?}", self.shape, rhs.shape),
            ));
        }
        if self.shape[..ra - 2] != rhs.shape[..ra - 2] {
            return Err(Error::shape(
                "matmul",
                format!("batch dims differ: {:?} x {:?}", self.shape, rhs.shape),
            ));
        }
        let m = self.shape[ra - 2];
        let k = self.shape[ra - 1];
        if rhs.shape[ra - 2] != k {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {:?} x {:?}", self.shape, rhs.shape),
            ));
        }
        let n = rhs.shape[ra - 1];
        let batch: usize = self.shape[..ra - 2].iter().product();
        let out = kernels::matmul_fwd(self.data(), rhs.data(), batch, m, k, n);
        let mut oshape = self.shape.clone();
        oshape[ra - 2] = m;
        oshape[ra - 1] = n;
        Ok(record(out, oshape, Op::Matmul { a: self.clone(), b: rhs.clone() }))
    }

    // ── elementwise ────────────────────────────────────────────────────

    fn zip_check(&self, rhs: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(Error::shape(
                op,
                format!("operand shapes differ: {:?} vs {:?}", self.shape, rhs.shape),
            ));
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_check(rhs, "add")?;
        let out = self.data.iter().zip(rhs.data.iter()).map(|(a, b)| *a + *b).collect();
        Ok(record(out, self.shape.clone(), Op::Add(self.clone(), rhs.clone())))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_check(rhs, "sub")?;
        let out = self.data.iter().zip(rhs.data.iter()).map(|(a, b)| *a - *b).collect();
        Ok(record(out, self.shape.clone(), Op::Sub(self.clone(), rhs.clone())))
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_check(rhs, "mul")?;
        let out = self.data.iter().zip(rhs.data.iter()).map(|(a, b)| *a * *b).collect();
        Ok(record(out, self.shape.clone(), Op::Mul(self.clone(), rhs.clone())))
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        let out = self.data.iter().map(|a| *a * factor).collect();
        record(out, self.shape.clone(), Op::Scale(self.clone(), factor))
    }

    pub fn add_scalar(&self, value: T) -> Tensor<T> {
        let out = self.data.iter().map(|a| *a + value).collect();
        record(out, self.shape.clone(), Op::AddScalar(self.clone()))
    }

    pub fn relu(&self) -> Tensor<T> {
        let out = self.data.iter().map(|a| if *a > T::zero() { *a } else { T::zero() }).collect();
        record(out, self.shape.clone(), Op::Relu(self.clone()))
    }

    /// Exact GELU, x * Phi(x) with the true normal CDF (no tanh shortcut).
    pub fn gelu(&self) -> Tensor<T> {
        let out = self.data.iter().map(|a| kernels::gelu_scalar(*a)).collect();
        record(out, self.shape.clone(), Op::Gelu(self.clone()))
    }

    // ── softmax and reductions ─────────────────────────────────────────

    pub fn softmax_last(&self) -> Tensor<T> {
        let d = *self.shape.last().unwrap();
        let rows = self.numel() / d;
        let out = kernels::softmax_rows(self.data(), rows, d);
        record(out, self.shape.clone(), Op::SoftmaxLast(self.clone()))
    }

    pub fn log_softmax_last(&self) -> Tensor<T> {
        let d = *self.shape.last().unwrap();
        let rows = self.numel() / d;
        let out = kernels::log_softmax_rows(self.data(), rows, d);
        record(out, self.shape.clone(), Op::LogSoftmaxLast(self.clone()))
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let mut acc = T::zero();
        for v in self.data.iter() {
            acc = acc + *v;
        }
        record(vec![acc], vec![1], Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let mut acc = T::zero();
        for v in self.data.iter() {
            acc = acc + *v;
        }
        let m = acc / T::from_f64(self.numel() as f64);
        record(vec![m], vec![1], Op::MeanAll(self.clone()))
    }

    // ── normalization ──────────────────────────────────────────────────

    /// Layer norm over the last dimension.
    pub fn layer_norm(&self, gain: &Tensor<T>, offset: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let d = *self.shape.last().unwrap();
        if gain.shape() != [d] || offset.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / offset {:?} do not match last dim {d} of {:?}",
                    gain.shape, offset.shape, self.shape
                ),
            ));
        }
        let rows = self.numel() / d;
        let out = kernels::layer_norm_fwd(self.data(), rows, d, gain.data(), offset.data(), eps);
        Ok(record(
            out,
            self.shape.clone(),
            Op::LayerNorm { input: self.clone(), gain: gain.clone(), offset: offset.clone(), eps },
        ))
    }

    /// Training-mode batch norm over [n, c, h, w]: per-channel statistics
    /// from this batch. Returns the output and the batch (mean, var) so the
    /// caller can maintain running statistics.
    pub fn batch_norm_train(
        &self,
        gain: &Tensor<T>,
        offset: &Tensor<T>,
        eps: T,
    ) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
        let shape = self.dims4("batch_norm")?;
        let [n, c, h, w] = shape;
        if gain.shape() != [c] || offset.shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("gain/offset must be [{c}], got {:?} / {:?}", gain.shape, offset.shape),
            ));
        }
        if n * h * w <= 1 {
            return Err(Error::shape(
                "batch_norm",
                format!("needs more than one value per channel, got {n}x{h}x{w}"),
            ));
        }
        let (mean, var) = kernels::batch_stats(self.data(), shape);
        let out =
            kernels::batch_norm_apply(self.data(), shape, &mean, &var, gain.data(), offset.data(), eps);
        let t = record(
            out,
            self.shape.clone(),
            Op::BatchNorm {
                input: self.clone(),
                gain: gain.clone(),
                offset: offset.clone(),
                mean: mean.clone(),
                var: var.clone(),
                eps,
                stats_from_batch: true,
            },
        );
        Ok((t, mean, var))
    }

    /// Inference-mode batch norm with stored statistics.
    pub fn batch_norm_eval(
        &self,
        gain: &Tensor<T>,
        offset: &Tensor<T>,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Tensor<T>> {
        let shape = self.dims4("batch_norm")?;
        let c = shape[1];
        if gain.shape() != [c] || offset.shape() != [c] || mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("per-channel params must have length {c}"),
            ));
        }
        let out =
            kernels::batch_norm_apply(self.data(), shape, mean, var, gain.data(), offset.data(), eps);
        Ok(record(
            out,
            self.shape.clone(),
            Op::BatchNorm {
                input: self.clone(),
                gain: gain.clone(),
                offset: offset.clone(),
                mean: mean.to_vec(),
                var: var.to_vec(),
                eps,
                stats_from_batch: false,
            },
        ))
    }

    // ── movement ───────────────────────────────────────────────────────

    /// Reinterpret the buffer under a new shape (zero copy).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(record_shared(self.data.clone(), shape.to_vec(), Op::Reshape(self.clone())))
    }

    /// Reorder dimensions; `perm[i]` names the source axis of output axis i.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        if perm.len() != self.rank() {
            return Err(Error::shape(
                "permute",
                format!("permutation {:?} does not match rank of {:?}", perm, self.shape),
            ));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::shape("permute", format!("invalid permutation {:?}", perm)));
            }
            seen[p] = true;
        }
        let (out, oshape) = permute_data(self.data(), &self.shape, perm);
        Ok(record(out, oshape, Op::Permute { input: self.clone(), perm: perm.to_vec() }))
    }

    /// [n, c, h, w] -> [n, h*w, c], row-major over (h, w).
    pub fn img2seq(&self) -> Result<Tensor<T>> {
        let [n, c, h, w] = self.dims4("img2seq")?;
        let hw = h * w;
        let mut out = vec![T::zero(); self.numel()];
        let data = self.data();
        for ni in 0..n {
            for ci in 0..c {
                let src = (ni * c + ci) * hw;
                for s in 0..hw {
                    out[(ni * hw + s) * c + ci] = data[src + s];
                }
            }
        }
        Ok(record(out, vec![n, hw, c], Op::Img2Seq(self.clone())))
    }

    /// [n, h*w, c] -> [n, c, h, w]; exact inverse of [`Tensor::img2seq`].
    pub fn seq2img(&self, h: usize, w: usize) -> Result<Tensor<T>> {
        if self.rank() != 3 {
            return Err(Error::shape(
                "seq2img",
                format!("expected [n, tokens, c], got {:?}", self.shape),
            ));
        }
        let (n, t, c) = (self.shape[0], self.shape[1], self.shape[2]);
        if t != h * w {
            return Err(Error::shape(
                "seq2img",
                format!("{t} tokens do not form a {h}x{w} map"),
            ));
        }
        let hw = h * w;
        let mut out = vec![T::zero(); self.numel()];
        let data = self.data();
        for ni in 0..n {
            for ci in 0..c {
                let dst = (ni * c + ci) * hw;
                for s in 0..hw {
                    out[dst + s] = data[(ni * hw + s) * c + ci];
                }
            }
        }
        Ok(record(out, vec![n, c, h, w], Op::Seq2Img(self.clone())))
    }

    /// Group each r x r block of the token grid into one token whose feature
    /// vector concatenates the block's embeddings in row-major block order:
    /// [n, h*w, c] -> [n, (h/r)*(w/r), r*r*c].
    pub fn merge_token_blocks(&self, h: usize, w: usize, r: usize) -> Result<Tensor<T>> {
        if self.rank() != 3 {
            return Err(Error::shape(
                "merge_token_blocks",
                format!("expected [n, tokens, c], got {:?}", self.shape),
            ));
        }
        let (n, t, c) = (self.shape[0], self.shape[1], self.shape[2]);
        if t != h * w {
            return Err(Error::shape(
                "merge_token_blocks",
                format!("{t} tokens do not form a {h}x{w} map"),
            ));
        }
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::shape(
                "merge_token_blocks",
                format!("map {h}x{w} is not divisible into {r}x{r} blocks"),
            ));
        }
        let (bh, bw) = (h / r, w / r);
        let mut out = vec![T::zero(); self.numel()];
        let data = self.data();
        for ni in 0..n {
            for by in 0..bh {
                for bx in 0..bw {
                    let ob = ((ni * bh + by) * bw + bx) * (r * r * c);
                    for i in 0..r {
                        for j in 0..r {
                            let tok = (by * r + i) * w + (bx * r + j);
                            let src = (ni * h * w + tok) * c;
                            let dst = ob + (i * r + j) * c;
                            out[dst..dst + c].copy_from_slice(&data[src..src + c]);
                        }
                    }
                }
            }
        }
        Ok(record(
            out,
            vec![n, bh * bw, r * r * c],
            Op::MergeTokenBlocks { input: self.clone(), h, w, r },
        ))
    }
}

/// Concatenate along `axis`; all other dimensions must agree.
pub fn concat<T: Scalar>(inputs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs".to_string()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::shape("concat", format!("axis {axis} out of range for rank {rank}")));
    }
    let mut axis_total = 0usize;
    for t in inputs {
        if t.rank() != rank {
            return Err(Error::shape(
                "concat",
                format!("rank mismatch: {:?} vs {:?}", first.shape(), t.shape()),
            ));
        }
        for d in 0..rank {
            if d != axis && t.shape()[d] != first.shape()[d] {
                return Err(Error::shape(
                    "concat",
                    format!("shapes {:?} and {:?} differ off-axis", first.shape(), t.shape()),
                ));
            }
        }
        axis_total += t.shape()[axis];
    }
    let mut oshape = first.shape().to_vec();
    oshape[axis] = axis_total;
    let outer: usize = oshape[..axis].iter().product();
    let inner: usize = oshape[axis + 1..].iter().product();
    let mut out = vec![T::zero(); oshape.iter().product()];
    let mut offset = 0usize;
    for t in inputs {
        let len_axis = t.shape()[axis];
        for o in 0..outer {
            let src = o * len_axis * inner;
            let dst = (o * axis_total + offset) * inner;
            out[dst..dst + len_axis * inner]
                .copy_from_slice(&t.data()[src..src + len_axis * inner]);
        }
        offset += len_axis;
    }
    Ok(record(
        out,
        oshape,
        Op::Concat { inputs: inputs.iter().map(|t| (*t).clone()).collect(), axis },
    ))
}

/// Materialize a permutation of dimensions. Shared by forward and backward.
pub(crate) fn permute_data<T: Copy + Default>(
    data: &[T],
    shape: &[usize],
    perm: &[usize],
) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    // Pad to 4 dims so one loop nest covers every rank.
    let mut s4 = [1usize; 4];
    let mut p4 = [0usize, 1, 2, 3];
    let pad = 4 - rank;
    for i in 0..rank {
        s4[pad + i] = shape[i];
        p4[pad + i] = perm[i] + pad;
    }
    let oshape4 = [s4[p4[0]], s4[p4[1]], s4[p4[2]], s4[p4[3]]];
    // Strides of the source, gathered in output order.
    let mut strides = [0usize; 4];
    let mut acc = 1;
    let mut src_strides = [0usize; 4];
    for i in (0..4).rev() {
        src_strides[i] = acc;
        acc *= s4[i];
    }
    for i in 0..4 {
        strides[i] = src_strides[p4[i]];
    }
    let mut out = vec![T::default(); data.len()];
    let mut w = 0usize;
    for a in 0..oshape4[0] {
        for b in 0..oshape4[1] {
            for c in 0..oshape4[2] {
                let base = a * strides[0] + b * strides[1] + c * strides[2];
                for d in 0..oshape4[3] {
                    out[w] = data[base + d * strides[3]];
                    w += 1;
                }
            }
        }
    }
    let oshape: Vec<usize> = (0..rank).map(|i| shape[perm[i]]).collect();
    (out, oshape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{backward, no_grad};

    #[test]
    fn construction_validates_shape() {
        assert!(Tensor::<f64>::from_vec(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::<f64>::from_vec(vec![], &[]).is_err());
        assert!(Tensor::<f64>::from_vec(vec![1.0], &[1, 1, 1, 1, 1]).is_err());
        assert!(Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).is_ok());
    }

    #[test]
    fn linear_small_case() {
        // [1, 2] x [[1, 2, 3], [4, 5, 6]] + [0.5, -0.5, 0.0]
        let x = Tensor::from_vec(vec![1.0f64, 2.0], &[1, 2]).unwrap();
        let w = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = Tensor::from_vec(vec![0.5, -0.5, 0.0], &[3]).unwrap();
        let y = x.linear(&w, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[1, 3]);
        assert_eq!(y.data(), &[9.5, 11.5, 15.0]);
    }

    #[test]
    fn img2seq_ramp_layout() {
        // 1x2x2x3 ramp: channel 0 is 0..6, channel 1 is 100..106.
        let mut v: Vec<f64> = (0..6).map(|i| i as f64).collect();
        v.extend((0..6).map(|i| 100.0 + i as f64));
        let t = Tensor::from_vec(v, &[1, 2, 2, 3]).unwrap();
        let s = t.img2seq().unwrap();
        assert_eq!(s.shape(), &[1, 6, 2]);
        // Token at (y=0, x=1) must hold (1, 101); token (y=1, x=2) holds (5, 105).
        assert_eq!(&s.data()[2..4], &[1.0, 101.0]);
        assert_eq!(&s.data()[10..12], &[5.0, 105.0]);
        // Round trip restores the map exactly.
        let back = s.seq2img(2, 3).unwrap();
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn merge_token_blocks_gathers_two_by_two() {
        // 4x4 grid, c=1, tokens valued by linear index; r=2.
        let v: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let t = Tensor::from_vec(v, &[1, 16, 1]).unwrap();
        let m = t.merge_token_blocks(4, 4, 2).unwrap();
        assert_eq!(m.shape(), &[1, 4, 4]);
        // Block (0,0) gathers tokens 0, 1, 4, 5 in row-major block order.
        assert_eq!(&m.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        // Block (1,1) gathers 10, 11, 14, 15.
        assert_eq!(&m.data()[12..16], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn concat_along_channels() {
        let a = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let b = Tensor::from_vec(vec![5.0, 6.0, 7.0, 8.0], &[1, 1, 2, 2]).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 2, 2, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let bad = Tensor::from_vec(vec![1.0; 2], &[1, 1, 2, 1]).unwrap();
        assert!(concat(&[&a, &bad], 1).is_err());
    }

    #[test]
    fn permute_then_inverse_restores() {
        let v: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let t = Tensor::from_vec(v, &[2, 3, 4]).unwrap();
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.shape(), &[2, 3, 4]);
        assert_eq!(back.data(), t.data());
        // Element check: p[x, n, c] == t[n, c, x]
        assert_eq!(p.data()[0 * 6 + 1 * 3 + 2], t.data()[1 * 12 + 2 * 4 + 0]);
    }

    #[test]
    fn backward_errors_without_graph() {
        let t = Tensor::from_vec(vec![1.0f64], &[1]).unwrap();
        let err = backward(&t).unwrap_err();
        assert!(err.to_string().contains("no recorded operations"));

        let x = Tensor::from_vec(vec![1.0f64, 2.0], &[2]).unwrap().requiring_grad();
        let y = x.scale(2.0);
        let err = backward(&y).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0], &[2]).unwrap().requiring_grad();
        let y = no_grad(|| x.scale(2.0).sum_all());
        assert!(backward(&y).is_err());
    }

    #[test]
    fn backward_accumulates_reused_tensor() {
        // y = sum(x * x) => dy/dx = 2x
        let x = Tensor::from_vec(vec![1.0f64, -2.0, 3.0], &[3]).unwrap().requiring_grad();
        let y = x.mul(&x).unwrap().sum_all();
        let grads = backward(&y).unwrap();
        let g = grads.get(&x).unwrap();
        assert_eq!(g.data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_through_composite_matches_hand_derivative() {
        // loss = mean(relu(x) + 3 * x) ; relu active where x > 0
        let x = Tensor::from_vec(vec![1.0f64, -1.0, 0.5, -2.0], &[4]).unwrap().requiring_grad();
        let y = x.relu().add(&x.scale(3.0)).unwrap().mean_all();
        let grads = backward(&y).unwrap();
        let g = grads.get(&x).unwrap();
        assert_eq!(g.data(), &[1.0, 0.75, 1.0, 0.75]);
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let x = Tensor::from_vec(vec![0.3f64, -1.7, 2.9, 0.01, -0.4, 1.1], &[2, 3])
            .unwrap()
            .requiring_grad();
        let run = |x: &Tensor<f64>| {
            let y = x.gelu().softmax_last().sum_all();
            let grads = backward(&y).unwrap();
            grads.get(x).unwrap().data().to_vec()
        };
        let a = run(&x);
        let b = run(&x);
        assert_eq!(a, b, "gradient accumulation must be deterministic");
    }

    #[test]
    fn copy_on_write_preserves_recorded_values() {
        let mut w = Tensor::from_vec(vec![2.0f64], &[1]).unwrap().requiring_grad();
        let y = w.scale(3.0);
        w.data_mut()[0] = 10.0;
        // The recorded graph saw the old value.
        assert_eq!(y.data(), &[6.0]);
        assert_eq!(w.data(), &[10.0]);
    }
}
