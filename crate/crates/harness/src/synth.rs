//! Synthetic pose scenes: articulated stick figures rendered over textured
//! backgrounds, with exact keypoint ground truth.

use anyhow::{bail, ensure, Context, Result};
use hrpvt_core::pose::PoseInstance;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Keypoint names in canonical order.
pub const KEYPOINT_NAMES: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

const LEFT_SHOULDER: usize = 5;
const RIGHT_SHOULDER: usize = 6;

/// Keypoint names, the limb graph used for rendering, and the left/right
/// index pairs swapped under horizontal flips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkeletonTemplate {
    pub names: Vec<String>,
    /// Rendered segments as keypoint index pairs.
    pub limbs: Vec<[usize; 2]>,
    /// Left/right counterparts; must be a symmetric involution.
    pub flip_pairs: Vec<[usize; 2]>,
}

impl Default for SkeletonTemplate {
    fn default() -> Self {
        SkeletonTemplate {
            names: KEYPOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            limbs: vec![
                [15, 13],
                [13, 11],
                [16, 14],
                [14, 12],
                [11, 12],
                [5, 11],
                [6, 12],
                [5, 6],
                [5, 7],
                [7, 9],
                [6, 8],
                [8, 10],
                [1, 2],
                [0, 1],
                [0, 2],
                [1, 3],
                [2, 4],
            ],
            flip_pairs: vec![
                [1, 2],
                [3, 4],
                [5, 6],
                [7, 8],
                [9, 10],
                [11, 12],
                [13, 14],
                [15, 16],
            ],
        }
    }
}

impl SkeletonTemplate {
    pub fn num_keypoints(&self) -> usize {
        self.names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.names.len();
        ensure!(n > 0, "skeleton template has no keypoints");
        for (i, name) in self.names.iter().enumerate() {
            ensure!(!name.is_empty(), "keypoint {i} has an empty name");
            if let Some(j) = self.names[..i].iter().position(|p| p == name) {
                bail!("keypoint name {name:?} appears at both index {j} and {i}");
            }
        }
        for (li, limb) in self.limbs.iter().enumerate() {
            for &end in limb {
                ensure!(end < n, "limb {li} references keypoint {end}, template has {n}");
            }
            ensure!(limb[0] != limb[1], "limb {li} joins keypoint {} to itself", limb[0]);
        }
        // Flip pairs must form a symmetric involution: every index appears in
        // at most one pair and never maps to itself.
        let mut seen = vec![false; n];
        for (pi, pair) in self.flip_pairs.iter().enumerate() {
            let [a, b] = *pair;
            ensure!(a < n && b < n, "flip pair {pi} references a keypoint outside the template");
            ensure!(a != b, "flip pair {pi} maps keypoint {a} to itself");
            for &end in pair {
                ensure!(!seen[end], "keypoint {end} appears in more than one flip pair");
                seen[end] = true;
            }
        }
        Ok(())
    }

    /// Permutation sending each keypoint to its flip counterpart (identity on
    /// unpaired keypoints).
    pub fn flip_map(&self) -> Vec<usize> {
        let mut map: Vec<usize> = (0..self.names.len()).collect();
        for &[a, b] in &self.flip_pairs {
            map[a] = b;
            map[b] = a;
        }
        map
    }
}

/// Everything the generator needs to sample one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub canvas_w: usize,
    pub canvas_h: usize,
    /// Figure height as a fraction of canvas height, sampled uniformly.
    pub scale: [f64; 2],
    /// Shoulder swing in degrees from straight down, outward positive.
    pub shoulder_deg: [f64; 2],
    /// Elbow bend in degrees relative to the upper arm.
    pub elbow_deg: [f64; 2],
    /// Hip swing in degrees from straight down, outward positive.
    pub hip_deg: [f64; 2],
    /// Knee bend in degrees relative to the thigh.
    pub knee_deg: [f64; 2],
    /// Background texture strength in [0, 1].
    pub texture: f64,
    pub seed: u64,
    pub skeleton: SkeletonTemplate,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            canvas_w: 96,
            canvas_h: 96,
            scale: [0.55, 0.75],
            shoulder_deg: [-25.0, 55.0],
            elbow_deg: [0.0, 80.0],
            hip_deg: [-10.0, 30.0],
            knee_deg: [0.0, 50.0],
            texture: 0.5,
            seed: 0,
            skeleton: SkeletonTemplate::default(),
        }
    }
}

// Body proportions as fractions of figure height, y measured downward from
// the crown.
const CROWN_Y: f64 = 0.0;
const NOSE_Y: f64 = 0.085;
const EYE_Y: f64 = 0.055;
const EAR_Y: f64 = 0.075;
const NECK_Y: f64 = 0.17;
const SHOULDER_Y: f64 = 0.20;
const HIP_Y: f64 = 0.52;
const EYE_DX: f64 = 0.028;
const EAR_DX: f64 = 0.05;
const SHOULDER_DX: f64 = 0.115;
const HIP_DX: f64 = 0.075;
const UPPER_ARM: f64 = 0.17;
const FOREARM: f64 = 0.16;
const THIGH: f64 = 0.23;
const SHIN: f64 = 0.225;
const HEAD_R: f64 = 0.065;
const STROKE_FRAC: f64 = 0.022;
/// Lowest reachable point (hip + straight leg) as a height fraction.
const BODY_EXTENT: f64 = HIP_Y + THIGH + SHIN;

impl SceneSpec {
    fn stroke_radius(&self, fig_h: f64) -> f64 {
        (STROKE_FRAC * fig_h).max(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.canvas_w >= 32 && self.canvas_h >= 32,
            "canvas {}x{} is below the 32x32 minimum",
            self.canvas_w,
            self.canvas_h
        );
        let [lo, hi] = self.scale;
        ensure!(
            lo > 0.0 && lo <= hi,
            "figure scale range [{lo}, {hi}] is not a positive ordered interval"
        );
        for (name, [a, b]) in [
            ("shoulder_deg", self.shoulder_deg),
            ("elbow_deg", self.elbow_deg),
            ("hip_deg", self.hip_deg),
            ("knee_deg", self.knee_deg),
        ] {
            ensure!(a <= b, "{name} range [{a}, {b}] is reversed");
            ensure!(
                a >= -180.0 && b <= 180.0,
                "{name} range [{a}, {b}] leaves [-180, 180]"
            );
        }
        ensure!(
            (0.0..=1.0).contains(&self.texture),
            "texture level {} is outside [0, 1]",
            self.texture
        );
        self.skeleton.validate()?;
        ensure!(
            self.skeleton.names.len() == 17,
            "the figure generator poses the 17-keypoint template, got {} keypoints",
            self.skeleton.names.len()
        );
        // A figure at minimum scale must fit the canvas with its stroke.
        let fig_h = lo * self.canvas_h as f64;
        let margin = self.stroke_radius(fig_h) + 0.5;
        let need_h = fig_h * BODY_EXTENT + 2.0 * margin;
        ensure!(
            need_h <= self.canvas_h as f64,
            "figure needs {need_h:.1}px of height at minimum scale, canvas has {}",
            self.canvas_h
        );
        let need_w = fig_h * 2.0 * SHOULDER_DX + 2.0 * margin;
        ensure!(
            need_w <= self.canvas_w as f64,
            "figure needs {need_w:.1}px of width at minimum scale, canvas has {}",
            self.canvas_w
        );
        Ok(())
    }
}

/// One generated image with its exact ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    /// Row-major RGB bytes, `canvas_h * canvas_w * 3`.
    pub pixels: Vec<u8>,
    pub pose: PoseInstance,
    /// Bounding box of the rendered figure, `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
}

fn deg(v: f64) -> f64 {
    v * std::f64::consts::PI / 180.0
}

fn sample_range(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Skeleton joints for one figure, in local coordinates (origin at the crown
/// axis, y down), before placement on the canvas.
fn build_local_figure(spec: &SceneSpec, fig_h: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut p = vec![[0.0f64; 2]; 17];
    let at = |x: f64, y: f64| [x * fig_h, y * fig_h];
    p[0] = at(0.0, NOSE_Y);
    p[1] = at(-EYE_DX, EYE_Y);
    p[2] = at(EYE_DX, EYE_Y);
    p[3] = at(-EAR_DX, EAR_Y);
    p[4] = at(EAR_DX, EAR_Y);
    p[5] = at(-SHOULDER_DX, SHOULDER_Y);
    p[6] = at(SHOULDER_DX, SHOULDER_Y);
    p[11] = at(-HIP_DX, HIP_Y);
    p[12] = at(HIP_DX, HIP_Y);
    // Limb chains: angles measure from straight down, outward positive, and
    // each side mirrors the sign so "outward" means away from the body.
    for (side, sign) in [(0usize, -1.0f64), (1, 1.0)] {
        let sh = deg(sample_range(rng, spec.shoulder_deg));
        let el = deg(sample_range(rng, spec.elbow_deg));
        let hp = deg(sample_range(rng, spec.hip_deg));
        let kn = deg(sample_range(rng, spec.knee_deg));
        let swing = |base: [f64; 2], angle: f64, len: f64| {
            [base[0] + sign * angle.sin() * len * fig_h, base[1] + angle.cos() * len * fig_h]
        };
        let shoulder = p[5 + side];
        let elbow = swing(shoulder, sh, UPPER_ARM);
        let wrist = swing(elbow, sh + el, FOREARM);
        let hip = p[11 + side];
        let knee = swing(hip, hp, THIGH);
        let ankle = swing(knee, hp + kn, SHIN);
        p[7 + side] = elbow;
        p[9 + side] = wrist;
        p[13 + side] = knee;
        p[15 + side] = ankle;
    }
    p
}

/// Axis-aligned bounds of the rendered strokes around a joint set.
fn stroke_bounds(spec: &SceneSpec, joints: &[[f64; 2]], fig_h: f64) -> [f64; 4] {
    let r = spec.stroke_radius(fig_h) + 0.5;
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in joints {
        x0 = x0.min(p[0] - r);
        y0 = y0.min(p[1] - r);
        x1 = x1.max(p[0] + r);
        y1 = y1.max(p[1] + r);
    }
    // The head disc can poke above the face keypoints.
    let neck_y = joints[LEFT_SHOULDER][1].min(joints[RIGHT_SHOULDER][1]) - (SHOULDER_Y - NECK_Y) * fig_h;
    let head_top = neck_y - (NECK_Y - CROWN_Y) * fig_h - r;
    y0 = y0.min(head_top);
    [x0, y0, x1, y1]
}

struct Figure {
    joints: Vec<[f64; 2]>,
    fig_h: f64,
    head_size: f64,
    bbox: [f64; 4],
}

fn place_figure(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Figure> {
    let (cw, ch) = (spec.canvas_w as f64, spec.canvas_h as f64);
    for _ in 0..64 {
        let scale = sample_range(rng, spec.scale);
        let fig_h = scale * ch;
        let local = build_local_figure(spec, fig_h, rng);
        let [x0, y0, x1, y1] = stroke_bounds(spec, &local, fig_h);
        let (span_x, span_y) = (x1 - x0, y1 - y0);
        if span_x > cw || span_y > ch {
            continue;
        }
        let dx = rng.gen_range(-x0..=(cw - span_x - x0));
        let dy = rng.gen_range(-y0..=(ch - span_y - y0));
        let joints: Vec<[f64; 2]> = local.iter().map(|p| [p[0] + dx, p[1] + dy]).collect();
        // Clip the stroke bounds to the canvas; that is what gets rendered.
        let bx0 = (x0 + dx).max(0.0);
        let by0 = (y0 + dy).max(0.0);
        let bx1 = (x1 + dx).min(cw - 1.0);
        let by1 = (y1 + dy).min(ch - 1.0);
        return Ok(Figure {
            joints,
            fig_h,
            head_size: (NECK_Y - CROWN_Y) * fig_h,
            bbox: [bx0, by0, bx1 - bx0, by1 - by0],
        });
    }
    bail!(
        "no sampled figure fits the {}x{} canvas; shrink the scale or angle ranges",
        spec.canvas_w,
        spec.canvas_h
    )
}

fn dist_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let (wx, wy) = (p[0] - a[0], p[1] - a[1]);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 { 0.0 } else { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Smooth value-noise background plus per-pixel jitter, both scaled by the
/// texture level.
fn render_background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (w, h) = (spec.canvas_w, spec.canvas_h);
    let cell = 8usize;
    let (gw, gh) = (w / cell + 2, h / cell + 2);
    let mut grid = vec![0.0f64; gw * gh];
    for v in grid.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let base = 118.0;
    let coarse_amp = 52.0 * spec.texture;
    let jitter_amp = 14.0 * spec.texture;
    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let (gx, gy) = (x as f64 / cell as f64, y as f64 / cell as f64);
            let (ix, iy) = (gx as usize, gy as usize);
            let (fx, fy) = (gx - ix as f64, gy - iy as f64);
            let g = |i: usize, j: usize| grid[j * gw + i];
            let top = g(ix, iy) * (1.0 - fx) + g(ix + 1, iy) * fx;
            let bot = g(ix, iy + 1) * (1.0 - fx) + g(ix + 1, iy + 1) * fx;
            let coarse = top * (1.0 - fy) + bot * fy;
            let jitter = rng.gen_range(-1.0..1.0);
            out[y * w + x] = base + coarse * coarse_amp + jitter * jitter_amp;
        }
    }
    out
}

fn render_scene(spec: &SceneSpec, fig: &Figure, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (w, h) = (spec.canvas_w, spec.canvas_h);
    let gray = render_background(spec, rng);
    let r = spec.stroke_radius(fig.fig_h);
    // Capsule list: the limb graph plus a neck segment up to the head disc.
    let neck_base = [
        (fig.joints[LEFT_SHOULDER][0] + fig.joints[RIGHT_SHOULDER][0]) / 2.0,
        (fig.joints[LEFT_SHOULDER][1] + fig.joints[RIGHT_SHOULDER][1]) / 2.0,
    ];
    let head_center = [neck_base[0], neck_base[1] - fig.head_size + HEAD_R * fig.fig_h];
    let mut segments: Vec<([f64; 2], [f64; 2], f64)> = Vec::new();
    for &[a, b] in &spec.skeleton.limbs {
        segments.push((fig.joints[a], fig.joints[b], r));
    }
    segments.push((neck_base, head_center, r));
    segments.push((head_center, head_center, HEAD_R * fig.fig_h));

    let mut coverage = vec![0.0f64; w * h];
    for &(a, b, rad) in &segments {
        let reach = rad + 1.0;
        let x0 = ((a[0].min(b[0]) - reach).floor().max(0.0)) as usize;
        let x1 = ((a[0].max(b[0]) + reach).ceil().min(w as f64 - 1.0)) as usize;
        let y0 = ((a[1].min(b[1]) - reach).floor().max(0.0)) as usize;
        let y1 = ((a[1].max(b[1]) + reach).ceil().min(h as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = dist_to_segment([x as f64, y as f64], a, b);
                let c = (rad + 0.5 - d).clamp(0.0, 1.0);
                let cell = &mut coverage[y * w + x];
                *cell = cell.max(c);
            }
        }
    }

    let mut px = vec![0u8; w * h * 3];
    for i in 0..w * h {
        let fg = 232.0;
        let v = gray[i] + (fg - gray[i]) * coverage[i];
        let q = v.round().clamp(0.0, 255.0) as u8;
        // Slight channel tilt keeps the image honestly three-channel.
        px[i * 3] = q;
        px[i * 3 + 1] = q.saturating_sub(4);
        px[i * 3 + 2] = q.saturating_sub(9);
    }
    px
}

/// Generates `count` scenes, deterministic in `spec.seed`.
pub fn gen_synthetic(spec: &SceneSpec, count: usize) -> Result<Vec<Scene>> {
    spec.validate().context("invalid scene spec")?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let fig = place_figure(spec, &mut rng).with_context(|| format!("scene {i}"))?;
        let pixels = render_scene(spec, &fig, &mut rng);
        let area = fig.bbox[2] * fig.bbox[3];
        let mut pose = PoseInstance::gt(fig.joints.clone(), vec![2; 17], area);
        pose.head_size = Some(fig.head_size);
        pose.validate(17, spec.canvas_w as f64, spec.canvas_h as f64)
            .map_err(|e| anyhow::anyhow!("scene {i}: {e}"))?;
        scenes.push(Scene { pixels, pose, bbox: fig.bbox });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_template_is_consistent() {
        let t = SkeletonTemplate::default();
        t.validate().unwrap();
        assert_eq!(t.names.len(), 17);
        assert_eq!(t.names[0], "nose");
        assert_eq!(t.names[16], "right_ankle");
        // The flip map is an involution that moves every paired keypoint.
        let map = t.flip_map();
        for i in 0..17 {
            assert_eq!(map[map[i]], i);
        }
        assert_eq!(map[0], 0);
        assert_eq!(map[5], 6);
        assert_eq!(map[15], 16);
    }

    #[test]
    fn bad_templates_are_rejected() {
        let mut t = SkeletonTemplate::default();
        t.flip_pairs.push([5, 9]);
        let err = t.validate().unwrap_err().to_string();
        assert!(err.contains("more than one flip pair"), "{err}");

        let mut t = SkeletonTemplate::default();
        t.flip_pairs[0] = [1, 1];
        assert!(t.validate().is_err());

        let mut t = SkeletonTemplate::default();
        t.limbs.push([0, 40]);
        assert!(t.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic_and_on_canvas() {
        let spec = SceneSpec { seed: 11, ..SceneSpec::default() };
        let a = gen_synthetic(&spec, 4).unwrap();
        let b = gen_synthetic(&spec, 4).unwrap();
        assert_eq!(a.len(), 4);
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.pixels, sb.pixels);
            assert_eq!(sa.pose.coords, sb.pose.coords);
            assert_eq!(sa.bbox, sb.bbox);
        }
        for s in &a {
            for &[x, y] in &s.pose.coords {
                assert!(x >= 0.0 && x <= 95.0 && y >= 0.0 && y <= 95.0, "({x}, {y})");
            }
            assert!(s.pose.area > 0.0);
            assert!(s.pose.head_size.unwrap() > 0.0);
        }
        let c = gen_synthetic(&SceneSpec { seed: 12, ..spec }, 1).unwrap();
        assert_ne!(c[0].pixels, a[0].pixels);
    }

    #[test]
    fn small_scales_stay_in_the_medium_band() {
        let spec = SceneSpec {
            canvas_w: 256,
            canvas_h: 256,
            scale: [0.1, 0.2],
            seed: 3,
            ..SceneSpec::default()
        };
        let scenes = gen_synthetic(&spec, 32).unwrap();
        for s in &scenes {
            assert!(s.pose.area <= 96.0 * 96.0, "area {} exceeds the medium band", s.pose.area);
            assert!(s.pose.area > 0.0);
        }
    }

    #[test]
    fn zero_count_is_valid() {
        let scenes = gen_synthetic(&SceneSpec::default(), 0).unwrap();
        assert!(scenes.is_empty());
    }

    #[test]
    fn oversized_figure_is_diagnosed() {
        let spec = SceneSpec {
            canvas_w: 64,
            canvas_h: 64,
            scale: [1.5, 2.0],
            ..SceneSpec::default()
        };
        let err = gen_synthetic(&spec, 1).unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("canvas has 64"), "{msg}");
    }

    #[test]
    fn figure_pixels_differ_from_background() {
        let spec = SceneSpec { texture: 0.0, seed: 5, ..SceneSpec::default() };
        let s = &gen_synthetic(&spec, 1).unwrap()[0];
        // With texture off the background is flat, so the figure must be the
        // only bright region, and it should cover a plausible fraction.
        let bright = s.pixels.chunks(3).filter(|p| p[0] > 180).count();
        let total = spec.canvas_w * spec.canvas_h;
        assert!(bright > total / 100, "figure covers {bright} of {total} pixels");
        assert!(bright < total / 3, "figure covers {bright} of {total} pixels");
    }
}
