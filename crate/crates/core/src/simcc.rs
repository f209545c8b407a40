//! Coordinate classification: each keypoint's x and y are predicted as
//! independent classifications over sub-pixel bins (`k` bins per pixel),
//! trained against Gaussian-smoothed target distributions and decoded by
//! argmax / k.

use serde::{Deserialize, Serialize};

use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::init::InitRng;
use crate::nn::{path, Linear, Module};
use crate::pose::PoseInstance;
use crate::tensor::Tensor;

/// Head geometry and label smoothing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimccConfig {
    /// Bins per pixel.
    pub k: f64,
    /// Gaussian smoothing std, in bins.
    pub sigma: f64,
    pub input_w: usize,
    pub input_h: usize,
    pub num_keypoints: usize,
}

impl SimccConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) {
            return Err(Error::Config(format!("simcc: k must be positive, got {}", self.k)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "simcc: sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.num_keypoints == 0 || self.input_w == 0 || self.input_h == 0 {
            return Err(Error::Config("simcc: empty geometry".into()));
        }
        for (name, extent) in [("input_w", self.input_w), ("input_h", self.input_h)] {
            let bins = extent as f64 * self.k;
            if (bins - bins.round()).abs() > 1e-9 || bins.round() < 1.0 {
                return Err(Error::Config(format!(
                    "simcc: {name} * k = {bins} is not a positive integer bin count"
                )));
            }
        }
        Ok(())
    }

    pub fn x_bins(&self) -> usize {
        (self.input_w as f64 * self.k).round() as usize
    }

    pub fn y_bins(&self) -> usize {
        (self.input_h as f64 * self.k).round() as usize
    }
}

// ── target encoding ─────────────────────────────────────────────────────

/// Unit-sum Gaussian target over `bins` bins, centered at round(coord * k)
/// (clamped to the last bin). `sigma` is in bins; 0 degenerates to one-hot.
pub fn gaussian_target(coord: f64, k: f64, sigma: f64, bins: usize) -> Vec<f64> {
    let c = (coord * k).round().min(bins as f64 - 1.0).max(0.0);
    let mut row = vec![0.0; bins];
    if sigma <= 0.0 {
        row[c as usize] = 1.0;
        return row;
    }
    let denom = 2.0 * sigma * sigma;
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        let d = j as f64 - c;
        *v = (-d * d / denom).exp();
        sum += *v;
    }
    for v in &mut row {
        *v /= sum;
    }
    row
}

/// Per-axis target distributions for a batch, with rows of unlabeled
/// keypoints left at zero so they drop out of the loss.
#[derive(Debug, Clone)]
pub struct EncodedTargets<T: Scalar> {
    /// [batch, num_keypoints, x_bins]
    pub x: Tensor<T>,
    /// [batch, num_keypoints, y_bins]
    pub y: Tensor<T>,
    /// Labeled keypoints across the batch.
    pub visible: usize,
}

pub fn encode_targets<T: Scalar>(
    poses: &[PoseInstance],
    cfg: &SimccConfig,
) -> Result<EncodedTargets<T>> {
    let (n, kp) = (poses.len(), cfg.num_keypoints);
    let (xb, yb) = (cfg.x_bins(), cfg.y_bins());
    if n == 0 {
        return Err(Error::Data("cannot encode an empty batch".into()));
    }
    let mut x = vec![T::zero(); n * kp * xb];
    let mut y = vec![T::zero(); n * kp * yb];
    let mut visible = 0;
    for (i, pose) in poses.iter().enumerate() {
        pose.validate(kp, cfg.input_w as f64, cfg.input_h as f64)
            .map_err(|e| Error::Data(format!("instance {i}: {e}")))?;
        for j in 0..kp {
            if !pose.is_labeled(j) {
                continue;
            }
            visible += 1;
            let [cx, cy] = pose.coords[j];
            let row = gaussian_target(cx, cfg.k, cfg.sigma, xb);
            for (dst, v) in x[(i * kp + j) * xb..][..xb].iter_mut().zip(row) {
                *dst = T::from_f64(v);
            }
            let row = gaussian_target(cy, cfg.k, cfg.sigma, yb);
            for (dst, v) in y[(i * kp + j) * yb..][..yb].iter_mut().zip(row) {
                *dst = T::from_f64(v);
            }
        }
    }
    Ok(EncodedTargets {
        x: Tensor::from_vec(x, &[n, kp, xb])?,
        y: Tensor::from_vec(y, &[n, kp, yb])?,
        visible,
    })
}

// ── decoding ────────────────────────────────────────────────────────────

/// Argmax bin (ties to the lowest index) mapped back to pixels, plus that
/// bin's softmax probability.
pub fn decode_axis<T: Scalar>(logits: &[T], k: f64) -> (f64, f64) {
    let mut best = 0;
    for (j, v) in logits.iter().enumerate() {
        if v.as_f64() > logits[best].as_f64() {
            best = j;
        }
    }
    let maxv = logits[best].as_f64();
    let z: f64 = logits.iter().map(|v| (v.as_f64() - maxv).exp()).sum();
    (best as f64 / k, 1.0 / z)
}

/// Batch decode with per-keypoint peak probabilities; an instance's
/// confidence is the mean over its keypoints of the two axis peaks.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub poses: Vec<PoseInstance>,
    /// [instance][keypoint] mean of x/y peak probabilities.
    pub keypoint_scores: Vec<Vec<f64>>,
}

pub fn decode_coords<T: Scalar>(
    x_logits: &Tensor<T>,
    y_logits: &Tensor<T>,
    cfg: &SimccConfig,
) -> Result<Decoded> {
    let (xb, yb) = (cfg.x_bins(), cfg.y_bins());
    let kp = cfg.num_keypoints;
    let check = |t: &Tensor<T>, bins: usize, axis: &str| -> Result<usize> {
        if t.rank() != 3 || t.shape()[1] != kp || t.shape()[2] != bins {
            return Err(Error::shape(
                "decode",
                format!("{axis} logits {:?} do not match [batch, {kp}, {bins}]", t.shape()),
            ));
        }
        Ok(t.shape()[0])
    };
    let n = check(x_logits, xb, "x")?;
    if check(y_logits, yb, "y")? != n {
        return Err(Error::shape("decode", "x and y logits disagree on batch size"));
    }

    let mut poses = Vec::with_capacity(n);
    let mut all_scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut coords = Vec::with_capacity(kp);
        let mut scores = Vec::with_capacity(kp);
        for j in 0..kp {
            let xr = &x_logits.data()[(i * kp + j) * xb..][..xb];
            let yr = &y_logits.data()[(i * kp + j) * yb..][..yb];
            let (cx, px) = decode_axis(xr, cfg.k);
            let (cy, py) = decode_axis(yr, cfg.k);
            coords.push([cx, cy]);
            scores.push(0.5 * (px + py));
        }
        let conf = scores.iter().sum::<f64>() / kp as f64;
        poses.push(PoseInstance::prediction(coords, conf));
        all_scores.push(scores);
    }
    Ok(Decoded { poses, keypoint_scores: all_scores })
}

// ── loss ────────────────────────────────────────────────────────────────

/// Scalar loss plus the labeled-keypoint count it averaged over. A batch
/// with nothing labeled yields an exactly-zero loss whose gradients are zero
/// everywhere; the training loop counts those batches separately.
#[derive(Debug)]
pub struct SimccLoss<T: Scalar> {
    pub loss: Tensor<T>,
    pub visible: usize,
}

/// Mean over labeled keypoints and both axes of KL(target || softmax(logits)).
/// The target entropy term is constant in the logits and enters host-side.
pub fn simcc_loss<T: Scalar>(
    x_logits: &Tensor<T>,
    y_logits: &Tensor<T>,
    targets: &EncodedTargets<T>,
) -> Result<SimccLoss<T>> {
    if x_logits.shape() != targets.x.shape() || y_logits.shape() != targets.y.shape() {
        return Err(Error::shape(
            "simcc_loss",
            format!(
                "logits {:?}/{:?} do not match targets {:?}/{:?}",
                x_logits.shape(),
                y_logits.shape(),
                targets.x.shape(),
                targets.y.shape()
            ),
        ));
    }
    let entropy: f64 = targets
        .x
        .data()
        .iter()
        .chain(targets.y.data().iter())
        .map(|t| {
            let t = t.as_f64();
            if t > 0.0 { t * t.ln() } else { 0.0 }
        })
        .sum();
    let cross_x = targets.x.mul(&x_logits.log_softmax_last())?.sum_all();
    let cross_y = targets.y.mul(&y_logits.log_softmax_last())?.sum_all();
    let scale = T::from_f64(1.0 / (2.0 * targets.visible.max(1) as f64));
    let loss = cross_x
        .add(&cross_y)?
        .scale(-T::one())
        .add_scalar(T::from_f64(entropy))
        .scale(scale);
    Ok(SimccLoss { loss, visible: targets.visible })
}

// ── head ────────────────────────────────────────────────────────────────

/// The classification head: each keypoint's feature channel is flattened and
/// passed through one shared linear pair producing the x and y bin logits.
#[derive(Debug, Clone)]
pub struct SimccHead<T: Scalar> {
    pub fc_x: Linear<T>,
    pub fc_y: Linear<T>,
}

impl<T: Scalar> SimccHead<T> {
    /// `embed` is the flattened per-keypoint feature length (h * w of the
    /// final feature map).
    pub fn new(embed: usize, cfg: &SimccConfig, rng: &mut InitRng) -> Self {
        Self {
            fc_x: Linear::new(embed, cfg.x_bins(), rng),
            fc_y: Linear::new(embed, cfg.y_bins(), rng),
        }
    }

    /// [batch, num_keypoints, h, w] -> ([batch, kp, x_bins], [batch, kp, y_bins]).
    pub fn forward(&self, f: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let [n, kp, h, w] = f.dims4("simcc_head")?;
        let embed = self.fc_x.weight.shape()[0];
        if h * w != embed {
            return Err(Error::shape(
                "simcc_head",
                format!("feature map {h}x{w} flattens to {}, head expects {embed}", h * w),
            ));
        }
        let e = f.reshape(&[n, kp, embed])?;
        Ok((self.fc_x.forward(&e)?, self.fc_y.forward(&e)?))
    }
}

impl<T: Scalar> Module<T> for SimccHead<T> {
    fn visit<'a>(&'a self, prefix: &str, vis: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.fc_x.visit(&path(prefix, "fc_x"), vis);
        self.fc_y.visit(&path(prefix, "fc_y"), vis);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, vis: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        self.fc_x.visit_mut(&path(prefix, "fc_x"), vis);
        self.fc_y.visit_mut(&path(prefix, "fc_y"), vis);
    }
}

// ── round-trip sweep ────────────────────────────────────────────────────

/// Round-trip quantization error of encode followed by decode for one
/// scaling factor, measured over a uniform grid.
#[derive(Debug, Clone, Copy)]
pub struct SweepPoint {
    pub k: f64,
    pub max_err: f64,
    pub mean_err: f64,
    /// The half-bin bound 1/(2k).
    pub bound: f64,
}

/// Sweeps coordinate values over [0, extent - 1] at `step` pixels and
/// reports the worst and mean absolute round-trip error per scaling factor.
/// The domain endpoint is the last representable pixel position: beyond it
/// the clamped final bin cannot stay within the half-bin bound.
pub fn round_trip_sweep(extent: usize, sigma: f64, ks: &[f64], step: f64) -> Vec<SweepPoint> {
    ks.iter()
        .map(|&k| {
            let bins = (extent as f64 * k).round() as usize;
            let limit = extent as f64 - 1.0;
            let mut max_err = 0.0f64;
            let mut sum = 0.0;
            let mut count = 0u64;
            let mut i = 0u64;
            loop {
                let x = i as f64 * step;
                if x > limit + 1e-12 {
                    break;
                }
                let target = gaussian_target(x, k, sigma, bins);
                let (back, _) = decode_axis(&target, k);
                let err = (back - x).abs();
                max_err = max_err.max(err);
                sum += err;
                count += 1;
                i += 1;
            }
            SweepPoint { k, max_err, mean_err: sum / count as f64, bound: 0.5 / k }
        })
        .collect()
}
