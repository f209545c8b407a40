//! Evaluation: keypoint-similarity based average precision/recall with area
//! stratification, and head-normalized correctness rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::PoseInstance;

/// Per-keypoint falloff constants for the standard 17-keypoint person
/// skeleton: nose, eyes, ears, shoulders, elbows, wrists, hips, knees,
/// ankles.
pub const COCO_SIGMAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

/// Similarity thresholds the precision/recall summary integrates over.
pub fn oks_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.50 + 0.05 * i as f64).collect()
}

/// Keypoint-similarity parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OksParams {
    /// Per-keypoint constants k_i; the squared term in the exponent is
    /// 2 * area * k_i^2.
    pub sigmas: Vec<f64>,
    /// Minimum ground-truth visibility flag that counts as labeled.
    pub in_vis_thresh: u8,
}

impl Default for OksParams {
    fn default() -> Self {
        Self { sigmas: COCO_SIGMAS.to_vec(), in_vis_thresh: 1 }
    }
}

impl OksParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("oks: sigmas must all be positive".into()));
        }
        Ok(())
    }
}

/// One image's ground truth and predictions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: u64,
    pub gts: Vec<PoseInstance>,
    pub preds: Vec<PoseInstance>,
}

/// Similarity of a prediction to one labeled ground-truth instance: the mean
/// over labeled keypoints of exp(-d_i^2 / (2 * area * k_i^2)).
pub fn oks(pred: &PoseInstance, gt: &PoseInstance, params: &OksParams) -> Result<f64> {
    let n = params.sigmas.len();
    if gt.num_keypoints() != n || pred.num_keypoints() != n {
        return Err(Error::Data(format!(
            "oks: instances carry {}/{} keypoints but {n} falloff constants are configured",
            gt.num_keypoints(),
            pred.num_keypoints()
        )));
    }
    if !(gt.area > 0.0) {
        return Err(Error::Data(format!("oks: ground truth area {} is not positive", gt.area)));
    }
    let mut sum = 0.0;
    let mut labeled = 0usize;
    for i in 0..n {
        if gt.visibility[i] < params.in_vis_thresh {
            continue;
        }
        labeled += 1;
        let dx = pred.coords[i][0] - gt.coords[i][0];
        let dy = pred.coords[i][1] - gt.coords[i][1];
        let k = params.sigmas[i];
        sum += (-(dx * dx + dy * dy) / (2.0 * gt.area * k * k)).exp();
    }
    if labeled == 0 {
        return Err(Error::Data("oks: unlabeled instance (no visible keypoints)".into()));
    }
    Ok(sum / labeled as f64)
}

// ── average precision / recall ──────────────────────────────────────────

/// The summary table. Area-restricted entries are -1 when the record set
/// holds no ground truth in that band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OksSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    pub ar: f64,
}

/// Up to this many predictions per image enter the matching, highest
/// confidence first.
pub const MAX_DETECTIONS: usize = 20;

const MEDIUM_AREA: (f64, f64) = (32.0 * 32.0, 96.0 * 96.0);

#[derive(Clone, Copy, PartialEq)]
enum Band {
    All,
    Medium,
    Large,
}

impl Band {
    fn contains(self, area: f64) -> bool {
        match self {
            Band::All => true,
            Band::Medium => area > MEDIUM_AREA.0 && area <= MEDIUM_AREA.1,
            Band::Large => area > MEDIUM_AREA.1,
        }
    }
}

/// One prediction's fate at a single threshold, with its confidence and a
/// deterministic global ordering key.
struct Outcome {
    key: (u64, usize),
    conf: f64,
    tp: bool,
}

/// Greedy matching for one image at one threshold: predictions in
/// confidence order take the unmatched ground truth with the highest
/// similarity at or above the threshold. Matches to ground truth outside
/// the area band are discarded rather than penalized; unmatched predictions
/// are false positives.
fn match_image(
    order: &[usize],
    sim: &[Vec<f64>],
    in_band: &[bool],
    confs: &[f64],
    image_id: u64,
    thresh: f64,
    out: &mut Vec<Outcome>,
) {
    let n_gt = in_band.len();
    let mut taken = vec![false; n_gt];
    for &p in order {
        let mut best: Option<usize> = None;
        for g in 0..n_gt {
            if taken[g] || sim[p][g] < thresh {
                continue;
            }
            // Prefer in-band ground truth; break similarity ties low.
            let better = match best {
                None => true,
                Some(b) => {
                    (in_band[g] && !in_band[b]) || (in_band[g] == in_band[b] && sim[p][g] > sim[p][b])
                }
            };
            if better {
                best = Some(g);
            }
        }
        match best {
            Some(g) => {
                taken[g] = true;
                if in_band[g] {
                    out.push(Outcome { key: (image_id, p), conf: confs[p], tp: true });
                }
                // A match outside the band is ignored entirely.
            }
            None => out.push(Outcome { key: (image_id, p), conf: confs[p], tp: false }),
        }
    }
}

/// 101-point interpolated average precision.
fn ap_101(outcomes: &mut Vec<Outcome>, n_gt: usize) -> f64 {
    outcomes.sort_by(|a, b| {
        b.conf.partial_cmp(&a.conf).unwrap_or(std::cmp::Ordering::Equal).then(a.key.cmp(&b.key))
    });
    let mut precision = Vec::with_capacity(outcomes.len());
    let mut recall = Vec::with_capacity(outcomes.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for o in outcomes.iter() {
        if o.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // Running max from the right turns the curve into its envelope.
    let mut envelope = precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let p = recall
            .iter()
            .position(|&rec| rec >= level - 1e-12)
            .map(|i| envelope[i])
            .unwrap_or(0.0);
        total += p;
    }
    total / 101.0
}

fn band_metrics(
    records: &[(u64, Vec<usize>, Vec<Vec<f64>>, Vec<f64>, Vec<f64>)],
    band: Band,
    thresholds: &[f64],
) -> (Vec<f64>, f64) {
    let mut n_gt = 0usize;
    for (_, _, _, _, gt_areas) in records {
        n_gt += gt_areas.iter().filter(|a| band.contains(**a)).count();
    }
    if n_gt == 0 {
        return (vec![-1.0; thresholds.len()], -1.0);
    }
    let mut aps = Vec::with_capacity(thresholds.len());
    let mut recall_sum = 0.0;
    for &t in thresholds {
        let mut outcomes = Vec::new();
        for (image_id, order, sim, confs, gt_areas) in records {
            let in_band: Vec<bool> = gt_areas.iter().map(|a| band.contains(*a)).collect();
            match_image(order, sim, &in_band, confs, *image_id, t, &mut outcomes);
        }
        let tp_total = outcomes.iter().filter(|o| o.tp).count();
        recall_sum += tp_total as f64 / n_gt as f64;
        aps.push(ap_101(&mut outcomes, n_gt));
    }
    (aps, recall_sum / thresholds.len() as f64)
}

/// Precision/recall over the standard threshold grid with greedy
/// confidence-descending matching, area-stratified companion scores, and
/// mean best recall at up to [`MAX_DETECTIONS`] predictions per image.
pub fn evaluate_ap_ar(records: &[EvalRecord], params: &OksParams) -> Result<OksSummary> {
    params.validate()?;
    if records.is_empty() {
        return Err(Error::Data("evaluate: empty record set".into()));
    }

    // Precompute per image: prediction order, similarity matrix, areas.
    let mut prepared = Vec::with_capacity(records.len());
    let mut any_gt = false;
    for rec in records {
        let mut order: Vec<usize> = (0..rec.preds.len()).collect();
        order.sort_by(|&a, &b| {
            let ca = rec.preds[a].confidence.unwrap_or(0.0);
            let cb = rec.preds[b].confidence.unwrap_or(0.0);
            cb.partial_cmp(&ca).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        order.truncate(MAX_DETECTIONS);
        let sim: Vec<Vec<f64>> = rec
            .preds
            .iter()
            .map(|p| rec.gts.iter().map(|g| oks(p, g, params)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let confs: Vec<f64> = rec.preds.iter().map(|p| p.confidence.unwrap_or(0.0)).collect();
        let gt_areas: Vec<f64> = rec.gts.iter().map(|g| g.area).collect();
        any_gt |= !gt_areas.is_empty();
        prepared.push((rec.image_id, order, sim, confs, gt_areas));
    }
    if !any_gt {
        return Err(Error::Data("evaluate: no ground truth in any record".into()));
    }
    prepared.sort_by_key(|p| p.0);

    let thresholds = oks_thresholds();
    let (aps, ar) = band_metrics(&prepared, Band::All, &thresholds);
    let (aps_m, _) = band_metrics(&prepared, Band::Medium, &thresholds);
    let (aps_l, _) = band_metrics(&prepared, Band::Large, &thresholds);
    let mean = |v: &[f64]| {
        if v[0] < 0.0 { -1.0 } else { v.iter().sum::<f64>() / v.len() as f64 }
    };
    Ok(OksSummary {
        ap: mean(&aps),
        ap50: aps[0],
        ap75: aps[5],
        ap_m: mean(&aps_m),
        ap_l: mean(&aps_l),
        ar,
    })
}

// ── head-normalized correctness ─────────────────────────────────────────

/// Per-joint tallies and the mean rate over joints that carry labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PckhSummary {
    pub labeled: Vec<usize>,
    pub correct: Vec<usize>,
    /// correct/labeled per joint; None where nothing is labeled.
    pub per_joint: Vec<Option<f64>>,
    pub mean: f64,
}

/// Counts a keypoint correct when its distance to the ground truth is at
/// most `alpha` times the instance's head size (closed boundary).
/// Predictions pair with ground truths positionally within each record.
pub fn pckh(records: &[EvalRecord], alpha: f64) -> Result<PckhSummary> {
    if records.is_empty() {
        return Err(Error::Data("pckh: empty record set".into()));
    }
    let n = records
        .iter()
        .flat_map(|r| &r.gts)
        .map(|g| g.num_keypoints())
        .next()
        .ok_or_else(|| Error::Data("pckh: no ground truth in any record".into()))?;
    let mut labeled = vec![0usize; n];
    let mut correct = vec![0usize; n];
    for rec in records {
        if rec.gts.len() != rec.preds.len() {
            return Err(Error::Data(format!(
                "pckh: image {} has {} ground truths but {} predictions",
                rec.image_id,
                rec.gts.len(),
                rec.preds.len()
            )));
        }
        for (i, (gt, pred)) in rec.gts.iter().zip(&rec.preds).enumerate() {
            let head = gt.head_size.ok_or_else(|| {
                Error::Data(format!("pckh: instance {i} in image {} has no head size", rec.image_id))
            })?;
            if !(head > 0.0) {
                return Err(Error::Data(format!(
                    "pckh: instance {i} in image {} has nonpositive head size {head}",
                    rec.image_id
                )));
            }
            if gt.num_keypoints() != n || pred.num_keypoints() != n {
                return Err(Error::Data(format!(
                    "pckh: instance {i} in image {} has an inconsistent keypoint count",
                    rec.image_id
                )));
            }
            for j in 0..n {
                if !gt.is_labeled(j) {
                    continue;
                }
                labeled[j] += 1;
                let dx = pred.coords[j][0] - gt.coords[j][0];
                let dy = pred.coords[j][1] - gt.coords[j][1];
                if (dx * dx + dy * dy).sqrt() <= alpha * head {
                    correct[j] += 1;
                }
            }
        }
    }
    let per_joint: Vec<Option<f64>> = labeled
        .iter()
        .zip(&correct)
        .map(|(&l, &c)| (l > 0).then(|| c as f64 / l as f64))
        .collect();
    let rates: Vec<f64> = per_joint.iter().flatten().copied().collect();
    if rates.is_empty() {
        return Err(Error::Data("pckh: no labeled joints in any record".into()));
    }
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    Ok(PckhSummary { labeled, correct, per_joint, mean })
}
