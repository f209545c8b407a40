//! Reverse-mode differentiation. Every op attaches a node to its output
//! tensor; [`backward`] topologically orders the graph reachable from a
//! scalar loss and runs each op's vector-Jacobian product in reverse.
//!
//! Accumulation follows the (deterministic) topological order, so repeated
//! forward+backward over identical inputs reproduces gradients bit for bit.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dGeom, Deconv2dGeom};
use crate::tensor::{permute_data, Tensor};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` with op recording disabled on this thread (inference paths).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// A recorded operation; holds its input tensors so the graph stays alive.
pub(crate) enum Op<T: Scalar> {
    Conv2d {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        geom: Conv2dGeom,
    },
    Deconv2d {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        geom: Deconv2dGeom,
    },
    Linear {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    Matmul {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Scale(Tensor<T>, T),
    AddScalar(Tensor<T>),
    Relu(Tensor<T>),
    Gelu(Tensor<T>),
    SoftmaxLast(Tensor<T>),
    LogSoftmaxLast(Tensor<T>),
    LayerNorm {
        input: Tensor<T>,
        gain: Tensor<T>,
        offset: Tensor<T>,
        eps: T,
    },
    BatchNorm {
        input: Tensor<T>,
        gain: Tensor<T>,
        offset: Tensor<T>,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
        /// true when mean/var came from this batch (training mode), which
        /// adds the statistic terms to the input gradient.
        stats_from_batch: bool,
    },
    SumAll(Tensor<T>),
    MeanAll(Tensor<T>),
    Reshape(Tensor<T>),
    Permute {
        input: Tensor<T>,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<Tensor<T>>,
        axis: usize,
    },
    Img2Seq(Tensor<T>),
    Seq2Img(Tensor<T>),
    MergeTokenBlocks {
        input: Tensor<T>,
        h: usize,
        w: usize,
        r: usize,
    },
}

impl<T: Scalar> Op<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        use Op::*;
        match self {
            Conv2d { input, weight, bias, .. } | Deconv2d { input, weight, bias, .. } => {
                let mut v = vec![input, weight];
                if let Some(b) = bias {
                    v.push(b);
                }
                v
            }
            Linear { input, weight, bias } => {
                let mut v = vec![input, weight];
                if let Some(b) = bias {
                    v.push(b);
                }
                v
            }
            Matmul { a, b } => vec![a, b],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![a, b],
            Scale(x, _) | AddScalar(x) | Relu(x) | Gelu(x) | SoftmaxLast(x)
            | LogSoftmaxLast(x) | SumAll(x) | MeanAll(x) | Reshape(x) | Img2Seq(x)
            | Seq2Img(x) => vec![x],
            LayerNorm { input, gain, offset, .. } => vec![input, gain, offset],
            BatchNorm { input, gain, offset, .. } => vec![input, gain, offset],
            Permute { input, .. } => vec![input],
            Concat { inputs, .. } => inputs.iter().collect(),
            MergeTokenBlocks { input, .. } => vec![input],
        }
    }
}

/// Wrap op output data into a tensor, attaching the node when recording is
/// on and some input participates in differentiation.
pub(crate) fn record<T: Scalar>(data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Tensor<T> {
    let tracked = grad_enabled() && op.inputs().iter().any(|t| t.tracked());
    Tensor::from_parts(Arc::new(data), shape, tracked.then(|| Arc::new(op)))
}

/// Zero-copy variant for movement ops that reuse the input buffer.
pub(crate) fn record_shared<T: Scalar>(
    data: Arc<Vec<T>>,
    shape: Vec<usize>,
    op: Op<T>,
) -> Tensor<T> {
    let tracked = grad_enabled() && op.inputs().iter().any(|t| t.tracked());
    Tensor::from_parts(data, shape, tracked.then(|| Arc::new(op)))
}

/// Gradients keyed by tensor identity, produced by [`backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: HashMap<u64, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `t`, shaped like `t`.
    pub fn get(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        self.grads.get(&t.id()).map(|g| {
            debug_assert_eq!(g.len(), t.numel());
            Tensor::from_vec(g.clone(), t.shape()).expect("gradient shape")
        })
    }

    /// Borrow the raw gradient buffer for `t`.
    pub fn get_raw(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.grads.get(&t.id()).map(|g| g.as_slice())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

struct GradMap<T: Scalar> {
    grads: HashMap<u64, Vec<T>>,
}

impl<T: Scalar> GradMap<T> {
    fn accumulate(&mut self, id: u64, delta: Vec<T>) {
        match self.grads.entry(id) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                let dst = e.get_mut();
                debug_assert_eq!(dst.len(), delta.len());
                for (d, s) in dst.iter_mut().zip(&delta) {
                    *d = *d + *s;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(delta);
            }
        }
    }
}

/// Reverse-mode pass from a scalar loss. Returns gradients for every tensor
/// that participated in the recorded computation, keyed by identity.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<Gradients<T>> {
    if loss.numel() != 1 {
        return Err(Error::Autograd(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if loss.op().is_none() {
        return Err(Error::Autograd(
            "backward on a tensor with no recorded operations (was it computed under no_grad, \
             or from untracked inputs?)"
                .into(),
        ));
    }

    // Iterative post-order DFS; children are op inputs. Input order is fixed
    // per op, so the resulting order (and thus float accumulation order) is
    // deterministic.
    let mut order: Vec<Tensor<T>> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(loss.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        let children: Vec<Tensor<T>> = t
            .op()
            .map(|op| op.inputs().into_iter().filter(|c| c.tracked()).cloned().collect())
            .unwrap_or_default();
        stack.push((t, true));
        for c in children {
            if !visited.contains(&c.id()) {
                stack.push((c, false));
            }
        }
    }

    let mut map = GradMap { grads: HashMap::new() };
    map.grads.insert(loss.id(), vec![T::one()]);

    for t in order.iter().rev() {
        let Some(op) = t.op() else { continue };
        let Some(gout) = map.grads.get(&t.id()).cloned() else { continue };
        backward_node(op, t, &gout, &mut map);
    }

    Ok(Gradients { grads: map.grads })
}

fn dims4(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}

fn backward_node<T: Scalar>(op: &Op<T>, out: &Tensor<T>, gout: &[T], map: &mut GradMap<T>) {
    use Op::*;
    match op {
        Conv2d { input, weight, bias, geom } => {
            let oshape = dims4(out.shape());
            if input.tracked() {
                let gi = kernels::conv2d_bwd_input(
                    gout,
                    oshape,
                    weight.data(),
                    dims4(weight.shape()),
                    dims4(input.shape()),
                    *geom,
                );
                map.accumulate(input.id(), gi);
            }
            if weight.tracked() {
                let gw = kernels::conv2d_bwd_weight(
                    gout,
                    oshape,
                    input.data(),
                    dims4(input.shape()),
                    dims4(weight.shape()),
                    *geom,
                );
                map.accumulate(weight.id(), gw);
            }
            if let Some(b) = bias {
                if b.tracked() {
                    map.accumulate(b.id(), kernels::bwd_bias(gout, oshape));
                }
            }
        }
        Deconv2d { input, weight, bias, geom } => {
            let oshape = dims4(out.shape());
            if input.tracked() {
                let gi = kernels::deconv2d_bwd_input(
                    gout,
                    oshape,
                    weight.data(),
                    dims4(weight.shape()),
                    dims4(input.shape()),
                    *geom,
                );
                map.accumulate(input.id(), gi);
            }
            if weight.tracked() {
                let gw = kernels::deconv2d_bwd_weight(
                    gout,
                    oshape,
                    input.data(),
                    dims4(input.shape()),
                    dims4(weight.shape()),
                    *geom,
                );
                map.accumulate(weight.id(), gw);
            }
            if let Some(b) = bias {
                if b.tracked() {
                    map.accumulate(b.id(), kernels::bwd_bias(gout, oshape));
                }
            }
        }
        Linear { input, weight, bias } => {
            let din = weight.shape()[0];
            let dout = weight.shape()[1];
            let rows = input.numel() / din;
            if input.tracked() {
                let gi = kernels::matmul_nt_fwd(gout, weight.data(), 1, rows, dout, din);
                map.accumulate(input.id(), gi);
            }
            if weight.tracked() {
                let gw = kernels::matmul_tn_fwd(input.data(), gout, 1, din, rows, dout);
                map.accumulate(weight.id(), gw);
            }
            if let Some(b) = bias {
                if b.tracked() {
                    let mut gb = vec![T::zero(); dout];
                    for r in 0..rows {
                        for (g, v) in gb.iter_mut().zip(&gout[r * dout..(r + 1) * dout]) {
                            *g = *g + *v;
                        }
                    }
                    map.accumulate(b.id(), gb);
                }
            }
        }
        Matmul { a, b } => {
            let ra = a.shape();
            let (m, k) = (ra[ra.len() - 2], ra[ra.len() - 1]);
            let n = b.shape()[b.shape().len() - 1];
            let batch = a.numel() / (m * k);
            if a.tracked() {
                let ga = kernels::matmul_nt_fwd(gout, b.data(), batch, m, n, k);
                map.accumulate(a.id(), ga);
            }
            if b.tracked() {
                let gb = kernels::matmul_tn_fwd(a.data(), gout, batch, k, m, n);
                map.accumulate(b.id(), gb);
            }
        }
        Add(a, b) => {
            if a.tracked() {
                map.accumulate(a.id(), gout.to_vec());
            }
            if b.tracked() {
                map.accumulate(b.id(), gout.to_vec());
            }
        }
        Sub(a, b) => {
            if a.tracked() {
                map.accumulate(a.id(), gout.to_vec());
            }
            if b.tracked() {
                map.accumulate(b.id(), gout.iter().map(|g| -*g).collect());
            }
        }
        Mul(a, b) => {
            if a.tracked() {
                map.accumulate(a.id(), gout.iter().zip(b.data()).map(|(g, v)| *g * *v).collect());
            }
            if b.tracked() {
                map.accumulate(b.id(), gout.iter().zip(a.data()).map(|(g, v)| *g * *v).collect());
            }
        }
        Scale(x, f) => {
            if x.tracked() {
                map.accumulate(x.id(), gout.iter().map(|g| *g * *f).collect());
            }
        }
        AddScalar(x) => {
            if x.tracked() {
                map.accumulate(x.id(), gout.to_vec());
            }
        }
        Relu(x) => {
            if x.tracked() {
                let g = gout
                    .iter()
                    .zip(x.data())
                    .map(|(g, v)| if *v > T::zero() { *g } else { T::zero() })
                    .collect();
                map.accumulate(x.id(), g);
            }
        }
        Gelu(x) => {
            if x.tracked() {
                let g = gout
                    .iter()
                    .zip(x.data())
                    .map(|(g, v)| *g * kernels::gelu_grad_scalar(*v))
                    .collect();
                map.accumulate(x.id(), g);
            }
        }
        SoftmaxLast(x) => {
            if x.tracked() {
                // dx = y * (g - sum(g * y)) per row
                let d = *out.shape().last().unwrap();
                let rows = out.numel() / d;
                let y = out.data();
                let mut gi = vec![T::zero(); out.numel()];
                for r in 0..rows {
                    let ys = &y[r * d..(r + 1) * d];
                    let gs = &gout[r * d..(r + 1) * d];
                    let mut dot = T::zero();
                    for (g, v) in gs.iter().zip(ys) {
                        dot = dot + *g * *v;
                    }
                    for (o, (g, v)) in gi[r * d..(r + 1) * d].iter_mut().zip(gs.iter().zip(ys)) {
                        *o = *v * (*g - dot);
                    }
                }
                map.accumulate(x.id(), gi);
            }
        }
        LogSoftmaxLast(x) => {
            if x.tracked() {
                // dx = g - softmax(x) * sum(g) per row; softmax = exp(out)
                let d = *out.shape().last().unwrap();
                let rows = out.numel() / d;
                let ls = out.data();
                let mut gi = vec![T::zero(); out.numel()];
                for r in 0..rows {
                    let gs = &gout[r * d..(r + 1) * d];
                    let mut sum = T::zero();
                    for g in gs {
                        sum = sum + *g;
                    }
                    for (o, (g, l)) in gi[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(gs.iter().zip(&ls[r * d..(r + 1) * d]))
                    {
                        *o = *g - l.exp() * sum;
                    }
                }
                map.accumulate(x.id(), gi);
            }
        }
        LayerNorm { input, gain, offset, eps } => {
            let d = *input.shape().last().unwrap();
            let rows = input.numel() / d;
            let (gi, gg, gb) =
                kernels::layer_norm_bwd(input.data(), rows, d, gain.data(), *eps, gout);
            if input.tracked() {
                map.accumulate(input.id(), gi);
            }
            if gain.tracked() {
                map.accumulate(gain.id(), gg);
            }
            if offset.tracked() {
                map.accumulate(offset.id(), gb);
            }
        }
        BatchNorm { input, gain, offset, mean, var, eps, stats_from_batch } => {
            let shape = dims4(input.shape());
            if *stats_from_batch {
                let (gi, gg, gb) = kernels::batch_norm_bwd(
                    input.data(),
                    shape,
                    gain.data(),
                    mean,
                    var,
                    *eps,
                    gout,
                );
                if input.tracked() {
                    map.accumulate(input.id(), gi);
                }
                if gain.tracked() {
                    map.accumulate(gain.id(), gg);
                }
                if offset.tracked() {
                    map.accumulate(offset.id(), gb);
                }
            } else {
                // Fixed statistics: a per-channel affine map.
                let [n, c, h, w] = shape;
                let hw = h * w;
                let mut gi = vec![T::zero(); input.numel()];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for ci in 0..c {
                    let rstd = T::one() / (var[ci] + *eps).sqrt();
                    let mu = mean[ci];
                    let gv = gain.data()[ci];
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for idx in base..base + hw {
                            let xhat = (input.data()[idx] - mu) * rstd;
                            gi[idx] = gout[idx] * gv * rstd;
                            gg[ci] = gg[ci] + gout[idx] * xhat;
                            gb[ci] = gb[ci] + gout[idx];
                        }
                    }
                }
                if input.tracked() {
                    map.accumulate(input.id(), gi);
                }
                if gain.tracked() {
                    map.accumulate(gain.id(), gg);
                }
                if offset.tracked() {
                    map.accumulate(offset.id(), gb);
                }
            }
        }
        SumAll(x) => {
            if x.tracked() {
                map.accumulate(x.id(), vec![gout[0]; x.numel()]);
            }
        }
        MeanAll(x) => {
            if x.tracked() {
                let g = gout[0] / T::from_f64(x.numel() as f64);
                map.accumulate(x.id(), vec![g; x.numel()]);
            }
        }
        Reshape(x) => {
            if x.tracked() {
                map.accumulate(x.id(), gout.to_vec());
            }
        }
        Permute { input, perm } => {
            if input.tracked() {
                let mut inv = vec![0usize; perm.len()];
                for (i, p) in perm.iter().enumerate() {
                    inv[*p] = i;
                }
                let (g, _) = permute_data(gout, out.shape(), &inv);
                map.accumulate(input.id(), g);
            }
        }
        Concat { inputs, axis } => {
            let rank = out.shape().len();
            let outer: usize = out.shape()[..*axis].iter().product();
            let inner: usize = out.shape()[*axis + 1..rank].iter().product();
            let total_axis = out.shape()[*axis];
            let mut offset_axis = 0usize;
            for inp in inputs {
                let len_axis = inp.shape()[*axis];
                if inp.tracked() {
                    let mut g = vec![T::zero(); inp.numel()];
                    for o in 0..outer {
                        let src = (o * total_axis + offset_axis) * inner;
                        let dst = o * len_axis * inner;
                        g[dst..dst + len_axis * inner]
                            .copy_from_slice(&gout[src..src + len_axis * inner]);
                    }
                    map.accumulate(inp.id(), g);
                }
                offset_axis += len_axis;
            }
        }
        Img2Seq(x) => {
            if x.tracked() {
                // out[n, y*w + x, c] came from in[n, c, y, x]
                let [n, c, h, w] = dims4(x.shape());
                let hw = h * w;
                let mut g = vec![T::zero(); x.numel()];
                for ni in 0..n {
                    for ci in 0..c {
                        let dst = (ni * c + ci) * hw;
                        for s in 0..hw {
                            g[dst + s] = gout[(ni * hw + s) * c + ci];
                        }
                    }
                }
                map.accumulate(x.id(), g);
            }
        }
        Seq2Img(x) => {
            if x.tracked() {
                // out[n, c, y, x] came from in[n, y*w + x, c]
                let [n, c, h, w] = dims4(out.shape());
                let hw = h * w;
                let mut g = vec![T::zero(); x.numel()];
                for ni in 0..n {
                    for ci in 0..c {
                        let src = (ni * c + ci) * hw;
                        for s in 0..hw {
                            g[(ni * hw + s) * c + ci] = gout[src + s];
                        }
                    }
                }
                map.accumulate(x.id(), g);
            }
        }
        MergeTokenBlocks { input, h, w, r } => {
            if input.tracked() {
                let c = *input.shape().last().unwrap();
                let n = input.shape()[0];
                let (h, w, r) = (*h, *w, *r);
                let (bh, bw) = (h / r, w / r);
                let mut g = vec![T::zero(); input.numel()];
                for ni in 0..n {
                    for by in 0..bh {
                        for bx in 0..bw {
                            let ob = ((ni * bh + by) * bw + bx) * (r * r * c);
                            for i in 0..r {
                                for j in 0..r {
                                    let src = ob + (i * r + j) * c;
                                    let tok = (by * r + i) * w + (bx * r + j);
                                    let dst = (ni * h * w + tok) * c;
                                    g[dst..dst + c].copy_from_slice(&gout[src..src + c]);
                                }
                            }
                        }
                    }
                }
                map.accumulate(input.id(), g);
            }
        }
    }
}
