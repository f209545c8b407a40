//! Raw numeric kernels over plain slices. The [`crate::tensor`] layer wraps
//! these with shape checking and autograd recording; keeping the math on
//! `&[T]` makes it directly testable against naive references.
//!
//! Convolutions are direct (no im2col). Loops are ordered so the innermost
//! dimension walks contiguous rows whenever the width stride is 1, which is
//! the hot case (all the dilated pyramid convs).

use crate::dtype::Scalar;

/// Geometry of a 2-D convolution: stride, zero padding, dilation, groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dGeom {
    fn default() -> Self {
        Conv2dGeom { stride: (1, 1), padding: (0, 0), dilation: (1, 1), groups: 1 }
    }
}

impl Conv2dGeom {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dGeom { stride: (stride, stride), padding: (padding, padding), ..Default::default() }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = (dilation, dilation);
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Geometry of a transposed convolution (stride and padding only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Deconv2dGeom {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Deconv2dGeom {
    pub fn new(stride: usize, padding: usize) -> Self {
        Deconv2dGeom { stride: (stride, stride), padding: (padding, padding) }
    }
}

/// Output extent of a convolution along one axis, or `None` when the kernel
/// does not fit even once.
pub fn conv_out_extent(h: usize, k: usize, s: usize, p: usize, d: usize) -> Option<usize> {
    let span = d * (k - 1) + 1;
    (h + 2 * p).checked_sub(span).map(|r| r / s + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn deconv_out_extent(h: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    ((h - 1) * s + k).checked_sub(2 * p)
}

// ── conv2d ──────────────────────────────────────────────────────────────

/// Direct cross-correlation. `inp` is [n, ci, h, w], `weight` is
/// [co, ci/groups, kh, kw]; shapes are pre-validated by the caller.
pub fn conv2d_fwd<T: Scalar>(
    inp: &[T],
    ishape: [usize; 4],
    weight: &[T],
    wshape: [usize; 4],
    bias: Option<&[T]>,
    geom: Conv2dGeom,
) -> (Vec<T>, [usize; 4]) {
    let [n, ci, h, w] = ishape;
    let [co, cig, kh, kw] = wshape;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let (dh, dw) = geom.dilation;
    let g = geom.groups;
    let cog = co / g;
    let oh = conv_out_extent(h, kh, sh, ph, dh).unwrap();
    let ow = conv_out_extent(w, kw, sw, pw, dw).unwrap();

    let mut out = vec![T::zero(); n * co * oh * ow];
    for ni in 0..n {
        for coi in 0..co {
            let gi = coi / cog;
            let obase = ((ni * co + coi) * oh) * ow;
            if let Some(b) = bias {
                out[obase..obase + oh * ow].fill(b[coi]);
            }
            for cil in 0..cig {
                let cii = gi * cig + cil;
                let ibase = ((ni * ci + cii) * h) * w;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wv = weight[((coi * cig + cil) * kh + khi) * kw + kwi];
                        let woff = kwi * dw;
                        for ohi in 0..oh {
                            let ih = (ohi * sh + khi * dh) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let irow = ibase + ih as usize * w;
                            let orow = obase + ohi * ow;
                            if sw == 1 {
                                // iw = ow + woff - pw; keep it inside [0, w)
                                let off = woff as isize - pw as isize;
                                let lo = (-off).max(0) as usize;
                                let hi = (w as isize - off).clamp(0, ow as isize) as usize;
                                if lo < hi {
                                    let src = &inp[(irow as isize + off + lo as isize) as usize..][..hi - lo];
                                    let dst = &mut out[orow + lo..orow + hi];
                                    for (d, s) in dst.iter_mut().zip(src) {
                                        *d = *d + wv * *s;
                                    }
                                }
                            } else {
                                for owi in 0..ow {
                                    let iw = (owi * sw + woff) as isize - pw as isize;
                                    if iw >= 0 && iw < w as isize {
                                        out[orow + owi] =
                                            out[orow + owi] + wv * inp[irow + iw as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, [n, co, oh, ow])
}

/// Gradient of conv2d w.r.t. its input: scatter of `gout` through the kernel.
pub fn conv2d_bwd_input<T: Scalar>(
    gout: &[T],
    oshape: [usize; 4],
    weight: &[T],
    wshape: [usize; 4],
    ishape: [usize; 4],
    geom: Conv2dGeom,
) -> Vec<T> {
    let [n, co, oh, ow] = oshape;
    let [_, cig, kh, kw] = wshape;
    let [_, ci, h, w] = ishape;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let (dh, dw) = geom.dilation;
    let cog = co / geom.groups;

    let mut gi = vec![T::zero(); n * ci * h * w];
    for ni in 0..n {
        for coi in 0..co {
            let g = coi / cog;
            let obase = ((ni * co + coi) * oh) * ow;
            for cil in 0..cig {
                let cii = g * cig + cil;
                let ibase = ((ni * ci + cii) * h) * w;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wv = weight[((coi * cig + cil) * kh + khi) * kw + kwi];
                        let woff = kwi * dw;
                        for ohi in 0..oh {
                            let ih = (ohi * sh + khi * dh) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let irow = ibase + ih as usize * w;
                            let orow = obase + ohi * ow;
                            if sw == 1 {
                                let off = woff as isize - pw as isize;
                                let lo = (-off).max(0) as usize;
                                let hi = (w as isize - off).clamp(0, ow as isize) as usize;
                                if lo < hi {
                                    let src = &gout[orow + lo..orow + hi];
                                    let dst = &mut gi
                                        [(irow as isize + off + lo as isize) as usize..][..hi - lo];
                                    for (d, s) in dst.iter_mut().zip(src) {
                                        *d = *d + wv * *s;
                                    }
                                }
                            } else {
                                for owi in 0..ow {
                                    let iw = (owi * sw + woff) as isize - pw as isize;
                                    if iw >= 0 && iw < w as isize {
                                        gi[irow + iw as usize] =
                                            gi[irow + iw as usize] + wv * gout[orow + owi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gi
}

/// Gradient of conv2d w.r.t. its weight.
pub fn conv2d_bwd_weight<T: Scalar>(
    gout: &[T],
    oshape: [usize; 4],
    inp: &[T],
    ishape: [usize; 4],
    wshape: [usize; 4],
    geom: Conv2dGeom,
) -> Vec<T> {
    let [n, co, oh, ow] = oshape;
    let [_, ci, h, w] = ishape;
    let [_, cig, kh, kw] = wshape;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let (dh, dw) = geom.dilation;
    let cog = co / geom.groups;

    let mut gw = vec![T::zero(); co * cig * kh * kw];
    for ni in 0..n {
        for coi in 0..co {
            let g = coi / cog;
            let obase = ((ni * co + coi) * oh) * ow;
            for cil in 0..cig {
                let cii = g * cig + cil;
                let ibase = ((ni * ci + cii) * h) * w;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let woff = kwi * dw;
                        let mut acc = T::zero();
                        for ohi in 0..oh {
                            let ih = (ohi * sh + khi * dh) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let irow = ibase + ih as usize * w;
                            let orow = obase + ohi * ow;
                            if sw == 1 {
                                let off = woff as isize - pw as isize;
                                let lo = (-off).max(0) as usize;
                                let hi = (w as isize - off).clamp(0, ow as isize) as usize;
                                if lo < hi {
                                    let a = &gout[orow + lo..orow + hi];
                                    let b = &inp[(irow as isize + off + lo as isize) as usize..][..hi - lo];
                                    for (x, y) in a.iter().zip(b) {
                                        acc = acc + *x * *y;
                                    }
                                }
                            } else {
                                for owi in 0..ow {
                                    let iw = (owi * sw + woff) as isize - pw as isize;
                                    if iw >= 0 && iw < w as isize {
                                        acc = acc + gout[orow + owi] * inp[irow + iw as usize];
                                    }
                                }
                            }
                        }
                        let widx = ((coi * cig + cil) * kh + khi) * kw + kwi;
                        gw[widx] = gw[widx] + acc;
                    }
                }
            }
        }
    }
    gw
}

/// Gradient of conv2d (or deconv2d) w.r.t. a per-output-channel bias.
pub fn bwd_bias<T: Scalar>(gout: &[T], oshape: [usize; 4]) -> Vec<T> {
    let [n, co, oh, ow] = oshape;
    let mut gb = vec![T::zero(); co];
    for ni in 0..n {
        for coi in 0..co {
            let base = ((ni * co + coi) * oh) * ow;
            let mut acc = T::zero();
            for v in &gout[base..base + oh * ow] {
                acc = acc + *v;
            }
            gb[coi] = gb[coi] + acc;
        }
    }
    gb
}

// ── deconv2d (transposed convolution) ───────────────────────────────────

/// Transposed convolution. `inp` is [n, ci, h, w], `weight` is
/// [ci, co, kh, kw]; each input pixel scatters a kernel into the output.
pub fn deconv2d_fwd<T: Scalar>(
    inp: &[T],
    ishape: [usize; 4],
    weight: &[T],
    wshape: [usize; 4],
    bias: Option<&[T]>,
    geom: Deconv2dGeom,
) -> (Vec<T>, [usize; 4]) {
    let [n, ci, h, w] = ishape;
    let [_, co, kh, kw] = wshape;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let oh = deconv_out_extent(h, kh, sh, ph).unwrap();
    let ow = deconv_out_extent(w, kw, sw, pw).unwrap();

    let mut out = vec![T::zero(); n * co * oh * ow];
    if let Some(b) = bias {
        for ni in 0..n {
            for coi in 0..co {
                let base = ((ni * co + coi) * oh) * ow;
                out[base..base + oh * ow].fill(b[coi]);
            }
        }
    }
    for ni in 0..n {
        for cii in 0..ci {
            let ibase = ((ni * ci + cii) * h) * w;
            for coi in 0..co {
                let obase = ((ni * co + coi) * oh) * ow;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wv = weight[((cii * co + coi) * kh + khi) * kw + kwi];
                        for ihi in 0..h {
                            let out_y = (ihi * sh + khi) as isize - ph as isize;
                            if out_y < 0 || out_y >= oh as isize {
                                continue;
                            }
                            let irow = ibase + ihi * w;
                            let orow = obase + out_y as usize * ow;
                            for iwi in 0..w {
                                let out_x = (iwi * sw + kwi) as isize - pw as isize;
                                if out_x >= 0 && out_x < ow as isize {
                                    let oi = orow + out_x as usize;
                                    out[oi] = out[oi] + wv * inp[irow + iwi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, [n, co, oh, ow])
}

/// Gradient of deconv2d w.r.t. its input: a gather, the mirror of the
/// forward scatter.
pub fn deconv2d_bwd_input<T: Scalar>(
    gout: &[T],
    oshape: [usize; 4],
    weight: &[T],
    wshape: [usize; 4],
    ishape: [usize; 4],
    geom: Deconv2dGeom,
) -> Vec<T> {
    let [n, ci, h, w] = ishape;
    let [_, co, kh, kw] = wshape;
    let [_, _, oh, ow] = oshape;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;

    let mut gi = vec![T::zero(); n * ci * h * w];
    for ni in 0..n {
        for cii in 0..ci {
            let ibase = ((ni * ci + cii) * h) * w;
            for coi in 0..co {
                let obase = ((ni * co + coi) * oh) * ow;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wv = weight[((cii * co + coi) * kh + khi) * kw + kwi];
                        for ihi in 0..h {
                            let out_y = (ihi * sh + khi) as isize - ph as isize;
                            if out_y < 0 || out_y >= oh as isize {
                                continue;
                            }
                            let irow = ibase + ihi * w;
                            let orow = obase + out_y as usize * ow;
                            for iwi in 0..w {
                                let out_x = (iwi * sw + kwi) as isize - pw as isize;
                                if out_x >= 0 && out_x < ow as isize {
                                    gi[irow + iwi] =
                                        gi[irow + iwi] + wv * gout[orow + out_x as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gi
}

/// Gradient of deconv2d w.r.t. its weight.
pub fn deconv2d_bwd_weight<T: Scalar>(
    gout: &[T],
    oshape: [usize; 4],
    inp: &[T],
    ishape: [usize; 4],
    wshape: [usize; 4],
    geom: Deconv2dGeom,
) -> Vec<T> {
    let [n, ci, h, w] = ishape;
    let [_, co, kh, kw] = wshape;
    let [_, _, oh, ow] = oshape;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;

    let mut gw = vec![T::zero(); ci * co * kh * kw];
    for ni in 0..n {
        for cii in 0..ci {
            let ibase = ((ni * ci + cii) * h) * w;
            for coi in 0..co {
                let obase = ((ni * co + coi) * oh) * ow;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let mut acc = T::zero();
                        for ihi in 0..h {
                            let out_y = (ihi * sh + khi) as isize - ph as isize;
                            if out_y < 0 || out_y >= oh as isize {
                                continue;
                            }
                            let irow = ibase + ihi * w;
                            let orow = obase + out_y as usize * ow;
                            for iwi in 0..w {
                                let out_x = (iwi * sw + kwi) as isize - pw as isize;
                                if out_x >= 0 && out_x < ow as isize {
                                    acc = acc + inp[irow + iwi] * gout[orow + out_x as usize];
                                }
                            }
                        }
                        let widx = ((cii * co + coi) * kh + khi) * kw + kwi;
                        gw[widx] = gw[widx] + acc;
                    }
                }
            }
        }
    }
    gw
}

// ── matmul ──────────────────────────────────────────────────────────────

/// Batched matrix multiply: [b, m, k] x [b, k, n] -> [b, m, n].
pub fn matmul_fwd<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let abase = bi * m * k;
        let bbase = bi * k * n;
        let obase = bi * m * n;
        for mi in 0..m {
            let orow = obase + mi * n;
            for ki in 0..k {
                let av = a[abase + mi * k + ki];
                let brow = bbase + ki * n;
                let dst = &mut out[orow..orow + n];
                let src = &b[brow..brow + n];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *d + av * *s;
                }
            }
        }
    }
    out
}

/// Batched matrix multiply with the second operand transposed:
/// [b, m, k] x [b, n, k] -> [b, m, n]. Rows of both operands are contiguous,
/// so the inner loop is a dot product.
pub fn matmul_nt_fwd<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let abase = bi * m * k;
        let bbase = bi * n * k;
        let obase = bi * m * n;
        for mi in 0..m {
            let arow = &a[abase + mi * k..][..k];
            for ni in 0..n {
                let brow = &b[bbase + ni * k..][..k];
                let mut acc = T::zero();
                for (x, y) in arow.iter().zip(brow) {
                    acc = acc + *x * *y;
                }
                out[obase + mi * n + ni] = acc;
            }
        }
    }
    out
}

/// Batched matrix multiply with the first operand transposed:
/// [b, k, m] x [b, k, n] -> [b, m, n].
pub fn matmul_tn_fwd<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let abase = bi * k * m;
        let bbase = bi * k * n;
        let obase = bi * m * n;
        for ki in 0..k {
            for mi in 0..m {
                let av = a[abase + ki * m + mi];
                let brow = &b[bbase + ki * n..][..n];
                let dst = &mut out[obase + mi * n..][..n];
                for (d, s) in dst.iter_mut().zip(brow) {
                    *d = *d + av * *s;
                }
            }
        }
    }
    out
}

// ── activations and row softmax ─────────────────────────────────────────

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: x * Phi(x) with Phi the standard normal CDF.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let z = x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (T::one() + z.erf())
}

/// d/dx of the exact GELU: Phi(x) + x * phi(x).
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let z = x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let cdf = half * (T::one() + z.erf());
    let pdf = T::from_f64(INV_SQRT_2PI) * (-x * x * half).exp();
    cdf + x * pdf
}

/// Row-wise softmax over the last dimension with max subtraction.
pub fn softmax_rows<T: Scalar>(inp: &[T], rows: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * d];
    for r in 0..rows {
        let row = &inp[r * d..(r + 1) * d];
        let mut mx = row[0];
        for v in row {
            if *v > mx {
                mx = *v;
            }
        }
        let mut sum = T::zero();
        let orow = &mut out[r * d..(r + 1) * d];
        for (o, v) in orow.iter_mut().zip(row) {
            let e = (*v - mx).exp();
            *o = e;
            sum = sum + e;
        }
        let inv = T::one() / sum;
        for o in orow.iter_mut() {
            *o = *o * inv;
        }
    }
    out
}

/// Row-wise log-softmax over the last dimension.
pub fn log_softmax_rows<T: Scalar>(inp: &[T], rows: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * d];
    for r in 0..rows {
        let row = &inp[r * d..(r + 1) * d];
        let mut mx = row[0];
        for v in row {
            if *v > mx {
                mx = *v;
            }
        }
        let mut sum = T::zero();
        for v in row {
            sum = sum + (*v - mx).exp();
        }
        let lse = mx + sum.ln();
        for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = *v - lse;
        }
    }
    out
}

// ── normalization ───────────────────────────────────────────────────────

/// Layer norm over the last dimension; returns the output only (stats are
/// cheap to recompute in backward).
pub fn layer_norm_fwd<T: Scalar>(
    inp: &[T],
    rows: usize,
    d: usize,
    gain: &[T],
    offset: &[T],
    eps: T,
) -> Vec<T> {
    let mut out = vec![T::zero(); rows * d];
    let inv_d = T::one() / T::from_f64(d as f64);
    for r in 0..rows {
        let row = &inp[r * d..(r + 1) * d];
        let mut mean = T::zero();
        for v in row {
            mean = mean + *v;
        }
        mean = mean * inv_d;
        let mut var = T::zero();
        for v in row {
            let c = *v - mean;
            var = var + c * c;
        }
        var = var * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for (j, (o, v)) in out[r * d..(r + 1) * d].iter_mut().zip(row).enumerate() {
            *o = (*v - mean) * rstd * gain[j] + offset[j];
        }
    }
    out
}

/// Gradients of layer norm w.r.t. input, gain, and offset.
pub fn layer_norm_bwd<T: Scalar>(
    inp: &[T],
    rows: usize,
    d: usize,
    gain: &[T],
    eps: T,
    gout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gi = vec![T::zero(); rows * d];
    let mut gg = vec![T::zero(); d];
    let mut gb = vec![T::zero(); d];
    let inv_d = T::one() / T::from_f64(d as f64);
    for r in 0..rows {
        let row = &inp[r * d..(r + 1) * d];
        let grow = &gout[r * d..(r + 1) * d];
        let mut mean = T::zero();
        for v in row {
            mean = mean + *v;
        }
        mean = mean * inv_d;
        let mut var = T::zero();
        for v in row {
            let c = *v - mean;
            var = var + c * c;
        }
        var = var * inv_d;
        let rstd = T::one() / (var + eps).sqrt();

        // g = dy * gain; dx = rstd * (g - mean(g) - xhat * mean(g * xhat))
        let mut mean_g = T::zero();
        let mut mean_gx = T::zero();
        for j in 0..d {
            let xhat = (row[j] - mean) * rstd;
            let g = grow[j] * gain[j];
            mean_g = mean_g + g;
            mean_gx = mean_gx + g * xhat;
            gg[j] = gg[j] + grow[j] * xhat;
            gb[j] = gb[j] + grow[j];
        }
        mean_g = mean_g * inv_d;
        mean_gx = mean_gx * inv_d;
        for j in 0..d {
            let xhat = (row[j] - mean) * rstd;
            let g = grow[j] * gain[j];
            gi[r * d + j] = rstd * (g - mean_g - xhat * mean_gx);
        }
    }
    (gi, gg, gb)
}

/// Per-channel mean and biased variance over batch and spatial dims of an
/// [n, c, h, w] map.
pub fn batch_stats<T: Scalar>(inp: &[T], shape: [usize; 4]) -> (Vec<T>, Vec<T>) {
    let [n, c, h, w] = shape;
    let m = T::from_f64((n * h * w) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut acc = T::zero();
        for ni in 0..n {
            let base = ((ni * c + ci) * h) * w;
            for v in &inp[base..base + h * w] {
                acc = acc + *v;
            }
        }
        mean[ci] = acc / m;
    }
    for ci in 0..c {
        let mu = mean[ci];
        let mut acc = T::zero();
        for ni in 0..n {
            let base = ((ni * c + ci) * h) * w;
            for v in &inp[base..base + h * w] {
                let d = *v - mu;
                acc = acc + d * d;
            }
        }
        var[ci] = acc / m;
    }
    (mean, var)
}

/// Batch norm with explicit statistics: y = (x - mean) / sqrt(var + eps) * gain + offset.
pub fn batch_norm_apply<T: Scalar>(
    inp: &[T],
    shape: [usize; 4],
    mean: &[T],
    var: &[T],
    gain: &[T],
    offset: &[T],
    eps: T,
) -> Vec<T> {
    let [n, c, h, w] = shape;
    let mut out = vec![T::zero(); inp.len()];
    for ci in 0..c {
        let rstd = T::one() / (var[ci] + eps).sqrt();
        let g = gain[ci];
        let b = offset[ci];
        let mu = mean[ci];
        for ni in 0..n {
            let base = ((ni * c + ci) * h) * w;
            for (o, v) in out[base..base + h * w].iter_mut().zip(&inp[base..base + h * w]) {
                *o = (*v - mu) * rstd * g + b;
            }
        }
    }
    out
}

/// Gradients of training-mode batch norm (stats computed from the batch).
pub fn batch_norm_bwd<T: Scalar>(
    inp: &[T],
    shape: [usize; 4],
    gain: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
    gout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = shape;
    let m = T::from_f64((n * h * w) as f64);
    let mut gi = vec![T::zero(); inp.len()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for ci in 0..c {
        let mu = mean[ci];
        let rstd = T::one() / (var[ci] + eps).sqrt();
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for ni in 0..n {
            let base = ((ni * c + ci) * h) * w;
            for idx in base..base + h * w {
                let xhat = (inp[idx] - mu) * rstd;
                sum_g = sum_g + gout[idx];
                sum_gx = sum_gx + gout[idx] * xhat;
            }
        }
        gg[ci] = sum_gx;
        gb[ci] = sum_g;
        let mean_g = sum_g / m;
        let mean_gx = sum_gx / m;
        let g = gain[ci];
        for ni in 0..n {
            let base = ((ni * c + ci) * h) * w;
            for idx in base..base + h * w {
                let xhat = (inp[idx] - mu) * rstd;
                gi[idx] = g * rstd * (gout[idx] - mean_g - xhat * mean_gx);
            }
        }
    }
    (gi, gg, gb)
}
