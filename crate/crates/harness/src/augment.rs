//! Training-time augmentation: horizontal flip, scale, and rotation about
//! the crop center, applied as one affine map to both pixels and keypoints.

use anyhow::{ensure, Result};
use hrpvt_core::pose::PoseInstance;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::synth::SkeletonTemplate;

pub const SCALE_LIMIT: [f64; 2] = [0.65, 1.35];
pub const ROTATE_LIMIT_DEG: f64 = 45.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enable: bool,
    /// Mirror left/right with probability one half.
    pub flip: bool,
    pub scale: [f64; 2],
    pub rotate_deg: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enable: true,
            flip: true,
            scale: SCALE_LIMIT,
            rotate_deg: [-ROTATE_LIMIT_DEG, ROTATE_LIMIT_DEG],
        }
    }
}

impl AugmentConfig {
    /// Ranges may narrow the defaults but never widen them.
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale;
        ensure!(lo <= hi, "scale range [{lo}, {hi}] is reversed");
        ensure!(
            lo >= SCALE_LIMIT[0] && hi <= SCALE_LIMIT[1],
            "scale range [{lo}, {hi}] leaves the supported [{}, {}]",
            SCALE_LIMIT[0],
            SCALE_LIMIT[1]
        );
        let [rlo, rhi] = self.rotate_deg;
        ensure!(rlo <= rhi, "rotation range [{rlo}, {rhi}] is reversed");
        ensure!(
            rlo >= -ROTATE_LIMIT_DEG && rhi <= ROTATE_LIMIT_DEG,
            "rotation range [{rlo}, {rhi}] leaves the supported [-{ROTATE_LIMIT_DEG}, {ROTATE_LIMIT_DEG}]"
        );
        Ok(())
    }
}

/// One sampled transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub scale: f64,
    pub rotate_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams =
        AugmentParams { flip: false, scale: 1.0, rotate_deg: 0.0 };
}

pub fn sample_params(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> AugmentParams {
    if !cfg.enable {
        return AugmentParams::IDENTITY;
    }
    let flip = cfg.flip && rng.gen_bool(0.5);
    let mut pick = |[lo, hi]: [f64; 2]| if lo == hi { lo } else { rng.gen_range(lo..hi) };
    AugmentParams { flip, scale: pick(cfg.scale), rotate_deg: pick(cfg.rotate_deg) }
}

fn mat_mul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, bk) in b.iter().enumerate() {
                out[i][j] += a[i][k] * bk[j];
            }
        }
    }
    out
}

/// The forward pixel map: rotate by `rotate_deg` and scale about the crop
/// center, then mirror horizontally (x' = (W - 1) - x) when flipping.
pub fn affine_matrix(p: AugmentParams, w: usize, h: usize) -> [[f64; 3]; 3] {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let th = p.rotate_deg * std::f64::consts::PI / 180.0;
    let (sin, cos) = th.sin_cos();
    let s = p.scale;
    let rs = [[s * cos, -s * sin, 0.0], [s * sin, s * cos, 0.0], [0.0, 0.0, 1.0]];
    let to_center = [[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]];
    let from_center = [[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]];
    let mut m = mat_mul(from_center, mat_mul(rs, to_center));
    if p.flip {
        let mirror = [[-1.0, 0.0, w as f64 - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        m = mat_mul(mirror, m);
    }
    m
}

pub fn apply_affine(m: &[[f64; 3]; 3], p: [f64; 2]) -> [f64; 2] {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
    ]
}

fn invert_affine(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    [
        [inv[0][0], inv[0][1], -(inv[0][0] * m[0][2] + inv[0][1] * m[1][2])],
        [inv[1][0], inv[1][1], -(inv[1][0] * m[0][2] + inv[1][1] * m[1][2])],
        [0.0, 0.0, 1.0],
    ]
}

/// Warps row-major RGB bytes by the forward map, sampling sources
/// bilinearly; destinations that map outside the frame go black.
pub fn warp_image(pixels: &[u8], w: usize, h: usize, m: &[[f64; 3]; 3]) -> Vec<u8> {
    let inv = invert_affine(m);
    let mut out = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let src = apply_affine(&inv, [x as f64, y as f64]);
            let (sx, sy) = (src[0], src[1]);
            if sx < 0.0 || sy < 0.0 || sx > w as f64 - 1.0 || sy > h as f64 - 1.0 {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..3 {
                let g = |xx: usize, yy: usize| pixels[(yy * w + xx) * 3 + c] as f64;
                let top = g(x0, y0) * (1.0 - fx) + g(x1, y0) * fx;
                let bot = g(x0, y1) * (1.0 - fx) + g(x1, y1) * fx;
                out[(y * w + x) * 3 + c] = (top * (1.0 - fy) + bot * fy).round() as u8;
            }
        }
    }
    out
}

/// Moves keypoints through the same map; a flip also swaps left/right
/// labels, and keypoints pushed off the frame become unlabeled.
pub fn warp_pose(
    pose: &PoseInstance,
    m: &[[f64; 3]; 3],
    flip: bool,
    template: &SkeletonTemplate,
    w: usize,
    h: usize,
) -> PoseInstance {
    let n = pose.num_keypoints();
    let mut out = pose.clone();
    let map = template.flip_map();
    for dst in 0..n {
        let src = if flip { map[dst] } else { dst };
        let p = apply_affine(m, pose.coords[src]);
        let inside = p[0] >= 0.0 && p[0] <= w as f64 - 1.0 && p[1] >= 0.0 && p[1] <= h as f64 - 1.0;
        out.coords[dst] = p;
        out.visibility[dst] = if inside { pose.visibility[src] } else { 0 };
    }
    out
}

/// Applies one sampled transform to an image and its pose.
pub fn augment(
    pixels: &[u8],
    pose: &PoseInstance,
    w: usize,
    h: usize,
    params: AugmentParams,
    template: &SkeletonTemplate,
) -> (Vec<u8>, PoseInstance) {
    let m = affine_matrix(params, w, h);
    (warp_image(pixels, w, h, &m), warp_pose(pose, &m, params.flip, template, w, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_synthetic, SceneSpec};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn ranges_must_stay_within_limits() {
        AugmentConfig::default().validate().unwrap();
        let narrow = AugmentConfig {
            scale: [0.8, 1.2],
            rotate_deg: [-10.0, 10.0],
            ..AugmentConfig::default()
        };
        narrow.validate().unwrap();
        let wide = AugmentConfig { scale: [0.5, 1.35], ..AugmentConfig::default() };
        assert!(wide.validate().is_err());
        let spin = AugmentConfig { rotate_deg: [-90.0, 45.0], ..AugmentConfig::default() };
        assert!(spin.validate().is_err());
    }

    /// Oracle: multiply the component matrices by hand and compare entries;
    /// also push a point through both forms.
    #[test]
    fn matrix_matches_hand_computation() {
        let (w, h) = (96usize, 72usize);
        let p = AugmentParams { flip: true, scale: 1.2, rotate_deg: 30.0 };
        let m = affine_matrix(p, w, h);

        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let th = 30.0f64.to_radians();
        let (s, c) = (th.sin(), th.cos());
        // Rotation plus scale about the center, written out long-hand.
        let a = 1.2 * c;
        let b = -1.2 * s;
        let d = 1.2 * s;
        let e = 1.2 * c;
        let tx = cx - a * cx - b * cy;
        let ty = cy - d * cx - e * cy;
        // Mirror applied afterward: x -> (w-1) - x.
        let expect = [
            [-a, -b, (w as f64 - 1.0) - tx],
            [d, e, ty],
            [0.0, 0.0, 1.0],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    close(m[i][j], expect[i][j], 1e-9),
                    "entry ({i},{j}): {} vs {}",
                    m[i][j],
                    expect[i][j]
                );
            }
        }

        let q = apply_affine(&m, [10.0, 20.0]);
        let manual_x = (w as f64 - 1.0) - (a * 10.0 + b * 20.0 + tx);
        let manual_y = d * 10.0 + e * 20.0 + ty;
        assert!(close(q[0], manual_x, 1e-9) && close(q[1], manual_y, 1e-9));
    }

    #[test]
    fn center_is_a_fixed_point_without_flip() {
        let p = AugmentParams { flip: false, scale: 0.8, rotate_deg: 33.0 };
        let m = affine_matrix(p, 64, 64);
        let c = apply_affine(&m, [31.5, 31.5]);
        assert!(close(c[0], 31.5, 1e-9) && close(c[1], 31.5, 1e-9));
    }

    #[test]
    fn identity_params_leave_pixels_untouched() {
        let spec = SceneSpec { canvas_w: 48, canvas_h: 48, seed: 9, ..SceneSpec::default() };
        let s = &gen_synthetic(&spec, 1).unwrap()[0];
        let (px, pose) =
            augment(&s.pixels, &s.pose, 48, 48, AugmentParams::IDENTITY, &spec.skeleton);
        assert_eq!(px, s.pixels);
        assert_eq!(pose.coords, s.pose.coords);
        assert_eq!(pose.visibility, s.pose.visibility);
    }

    #[test]
    fn double_flip_is_the_identity_on_poses() {
        let spec = SceneSpec { canvas_w: 48, canvas_h: 48, seed: 4, ..SceneSpec::default() };
        let s = &gen_synthetic(&spec, 1).unwrap()[0];
        let flip = AugmentParams { flip: true, ..AugmentParams::IDENTITY };
        let (_, once) = augment(&s.pixels, &s.pose, 48, 48, flip, &spec.skeleton);
        // Left and right labels swapped, x mirrored exactly.
        assert!(close(once.coords[5][0], 47.0 - s.pose.coords[6][0], 0.0));
        assert_eq!(once.coords[5][1], s.pose.coords[6][1]);
        let m = affine_matrix(flip, 48, 48);
        let twice = warp_pose(&once, &m, true, &spec.skeleton, 48, 48);
        assert_eq!(twice.coords, s.pose.coords);
        assert_eq!(twice.visibility, s.pose.visibility);
    }

    #[test]
    fn off_frame_keypoints_become_unlabeled() {
        let mut pose = PoseInstance::gt(
            vec![[1.0, 24.0]; 17],
            vec![2; 17],
            100.0,
        );
        pose.coords[9] = [1.0, 1.0];
        // A 40 degree rotation pushes the corner point out of a 48px frame.
        let p = AugmentParams { flip: false, scale: 1.0, rotate_deg: 40.0 };
        let m = affine_matrix(p, 48, 48);
        let out = warp_pose(&pose, &m, false, &SkeletonTemplate::default(), 48, 48);
        assert_eq!(out.visibility[9], 0, "corner point at {:?}", out.coords[9]);
        assert_eq!(out.visibility[0], 2);
    }

    #[test]
    fn warp_resamples_bilinearly() {
        // A 2x2 checkerboard scaled about the center: the center pixel of a
        // 5x5 upsample... kept simpler: shifting by half a pixel averages
        // horizontal neighbors exactly.
        let w = 4;
        let mut px = vec![0u8; w * w * 3];
        for y in 0..w {
            for x in 0..w {
                let v = if x < 2 { 40 } else { 200 };
                for c in 0..3 {
                    px[(y * w + x) * 3 + c] = v;
                }
            }
        }
        let shift = [[1.0, 0.0, 0.5], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let out = warp_image(&px, w, w, &shift);
        // Destination x=2 samples source x=1.5: the 40/200 boundary.
        assert_eq!(out[(w + 2) * 3], 120);
    }
}
