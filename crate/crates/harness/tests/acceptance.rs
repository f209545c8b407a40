//! One test per shipping guarantee, each printing a single verdict line:
//! gradient agreement, pyramid geometry, coordinate codec error, module
//! structure, metric fidelity against independent oracles, short-run
//! trainability, parameter accounting, and checkpoint round trips.

use std::sync::Mutex;
use std::time::Instant;

use hrpvt_core::backbone::{LayerForm, StageConfig};
use hrpvt_core::checks::{check_full_model, check_tensor_ops};
use hrpvt_core::hrpm::{HdcConfig, HdcMerge, HdcMode, HrpmV1, HrpmV2};
use hrpvt_core::init::seeded_rng;
use hrpvt_core::metrics::{evaluate_ap_ar, oks, EvalRecord, OksParams, MAX_DETECTIONS};
use hrpvt_core::model::{HrpmV1Config, HrpmV2Config, Model, ModelConfig, Strategy};
use hrpvt_core::nn::{trainable_params_mut, Mode};
use hrpvt_core::pose::PoseInstance;
use hrpvt_core::simcc::{round_trip_sweep, SimccConfig};
use hrpvt_core::tensor::Tensor;
use hrpvt_core::weights::{load_weights, save_weights};
use hrpvt_harness::train::{smoke_run_config, tiny_model_config, train};

/// The timing assertions below measure their own work, so the criteria run
/// one at a time even when the test binary is threaded.
static SERIAL: Mutex<()> = Mutex::new(());

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn criterion(name: &str, body: impl FnOnce() -> Result<String, String>) {
    let _guard = SERIAL.lock().unwrap_or_else(|poisoned| poisoned.into_inner());
    match body() {
        Ok(detail) => println!("[PASS] {name}: {detail}"),
        Err(msg) => {
            println!("[FAIL] {name}: {msg}");
            panic!("{name}: {msg}");
        }
    }
}

/// Deterministic, sign-varying filler for forward-shape probes.
fn ramp(shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i * 37 + 11) % 101) as f64 / 50.5 - 1.0).collect();
    Tensor::from_vec(data, shape).unwrap()
}

/// Four-stage model on the 256x192 crop used by the geometry and parameter
/// checks; stage 1 is two layers deep so the per-layer placement differs
/// from both single-module placements.
fn contract_config(strategy: Strategy) -> ModelConfig {
    let stage = |depth, dim, heads, reduction| StageConfig {
        depth,
        dim,
        heads,
        reduction,
        mlp_ratio: 2,
    };
    ModelConfig {
        stages: vec![stage(2, 8, 1, 8), stage(1, 16, 2, 4), stage(1, 32, 4, 2), stage(1, 64, 8, 1)],
        hrpm_v1: HrpmV1Config { depth: 2, width: 8, ..HrpmV1Config::default() },
        hrpm_v2: HrpmV2Config { depth: 2, width: 8, ..HrpmV2Config::default() },
        strategy,
        stage_wise_includes_last: false,
        simcc: SimccConfig {
            k: 2.0,
            sigma: 6.0,
            input_w: 192,
            input_h: 256,
            num_keypoints: 17,
        },
        layer_form: LayerForm::Standard,
        seed: 9,
    }
}

// ── 1. gradient agreement ───────────────────────────────────────────────

#[test]
fn gradients_match_finite_differences() {
    criterion("gradient agreement", || {
        let t0 = Instant::now();
        let ops = check_tensor_ops().map_err(|e| format!("op suite: {e}"))?;
        ensure!(!ops.is_empty(), "op suite ran no checks");
        for r in &ops {
            ensure!(
                r.passes(1e-5),
                "op {} disagrees with central differences: max_rel {:.3e} > 1e-5",
                r.name,
                r.agreement.max_rel
            );
        }
        let weights = check_full_model(50, 41).map_err(|e| format!("model sweep: {e}"))?;
        ensure!(weights.len() == 50, "sampled {} weights, wanted 50", weights.len());
        for r in &weights {
            ensure!(
                r.passes(1e-3),
                "{} disagrees with central differences: max_rel {:.3e} > 1e-3",
                r.name,
                r.agreement.max_rel
            );
        }
        let dt = t0.elapsed().as_secs_f64();
        ensure!(dt <= 180.0, "gradient checks took {dt:.0}s, budget is 180s");
        Ok(format!(
            "{} ops within 1e-5, 50 sampled weights within 1e-3, {dt:.0}s",
            ops.len()
        ))
    });
}

// ── 2. pyramid geometry ─────────────────────────────────────────────────

#[test]
fn feature_pyramid_strides_and_site_shapes_hold() {
    criterion("pyramid geometry", || {
        let want_maps = vec![(64usize, 48usize), (32, 24), (16, 12), (8, 6)];
        let strategies =
            [Strategy::Vanilla, Strategy::LayerWise, Strategy::StageWise];

        // The stride-4 stem feeds stage 1 directly.
        let cfg = contract_config(Strategy::Vanilla);
        let mut v1: HrpmV1<f64> =
            HrpmV1::new(3, cfg.stages[0].dim, &cfg.hrpm_v1.hdc(), &mut seeded_rng(1))
                .map_err(|e| format!("stem build: {e}"))?;
        let stem_out = v1
            .forward(&ramp(&[1, 3, 256, 192]), Mode::Eval)
            .map_err(|e| format!("stem forward: {e}"))?;
        ensure!(
            stem_out.shape() == [1, cfg.stages[0].dim, 64, 48],
            "stem emitted {:?}, wanted [1, {}, 64, 48]",
            stem_out.shape(),
            cfg.stages[0].dim
        );

        let mut sites_checked = 0usize;
        for strategy in strategies {
            let cfg = contract_config(strategy);
            let geo = cfg.geometry().map_err(|e| format!("geometry: {e}"))?;
            ensure!(
                geo.stage_maps == want_maps,
                "{strategy:?}: stage maps {:?} differ from {want_maps:?}",
                geo.stage_maps
            );
            for site in &geo.sites {
                let (mh, mw) = geo.stage_maps[site.stage];
                ensure!(
                    (site.h, site.w) == (mh, mw),
                    "{strategy:?}: site at stage {} reports {}x{}, stage map is {mh}x{mw}",
                    site.stage,
                    site.h,
                    site.w
                );
                let mut block: HrpmV2<f64> =
                    HrpmV2::new(site.channels, &cfg.hrpm_v2.hdc(), &mut seeded_rng(2))
                        .map_err(|e| format!("site block build: {e}"))?;
                let x = ramp(&[1, site.channels, site.h, site.w]);
                let y = block
                    .forward(&x, Mode::Eval)
                    .map_err(|e| format!("site block forward: {e}"))?;
                ensure!(
                    y.shape() == x.shape(),
                    "{strategy:?}: block at stage {} mapped {:?} to {:?}",
                    site.stage,
                    x.shape(),
                    y.shape()
                );
                sites_checked += 1;
            }

            // The assembled model accepts the crop and emits per-axis bins.
            let mut model: Model<f64> =
                Model::build(cfg.clone()).map_err(|e| format!("{strategy:?} build: {e}"))?;
            let (xl, yl) = model
                .forward(&ramp(&[1, 3, 256, 192]), Mode::Eval)
                .map_err(|e| format!("{strategy:?} forward: {e}"))?;
            ensure!(
                xl.shape() == [1, 17, 384] && yl.shape() == [1, 17, 512],
                "{strategy:?}: logits {:?}/{:?}, wanted [1, 17, 384]/[1, 17, 512]",
                xl.shape(),
                yl.shape()
            );
        }
        ensure!(sites_checked == 1 + 2 + 3, "covered {sites_checked} sites, wanted 6");
        Ok(format!(
            "strides 4/8/16/32 over 256x192 and {sites_checked} shape-preserving sites"
        ))
    });
}

// ── 3. coordinate codec ─────────────────────────────────────────────────

#[test]
fn coordinate_round_trip_stays_under_half_bin() {
    criterion("coordinate codec", || {
        let points = round_trip_sweep(192, 6.0, &[2.0, 4.0, 6.0], 0.01);
        ensure!(points.len() == 3, "sweep returned {} rows", points.len());
        for p in &points {
            let bound = 1.0 / (2.0 * p.k) + 1e-9;
            ensure!(
                p.max_err <= bound,
                "k={}: max round-trip error {:.3e} exceeds half-bin bound {:.3e}",
                p.k,
                p.max_err,
                bound
            );
        }
        ensure!(
            points[0].max_err > points[1].max_err && points[1].max_err > points[2].max_err,
            "max error is not strictly decreasing in k: {:?}",
            points.iter().map(|p| p.max_err).collect::<Vec<_>>()
        );
        Ok(format!(
            "max errors {:.4}/{:.4}/{:.4} px under bounds 0.25/0.125/0.0833 at k=2/4/6",
            points[0].max_err, points[1].max_err, points[2].max_err
        ))
    });
}

// ── 4. module structure ─────────────────────────────────────────────────

#[test]
fn stem_pyramid_placement_counts_and_zero_identity_hold() {
    criterion("module structure", || {
        // Six chained dilations at width 16 concatenate into 96 channels at
        // half resolution before the fuse returns to quarter resolution.
        let hdc = HdcConfig {
            depth: 6,
            width: 16,
            dilations: None,
            merge: HdcMerge::Concat,
            mode: HdcMode::Chain,
        };
        ensure!(hdc.merged_channels() == 96, "merge yields {}", hdc.merged_channels());
        let mut v1: HrpmV1<f64> =
            HrpmV1::new(3, 32, &hdc, &mut seeded_rng(7)).map_err(|e| format!("stem: {e}"))?;
        let x = ramp(&[2, 3, 64, 48]);
        let pyramid = v1.pyramid(&x, Mode::Eval).map_err(|e| format!("pyramid: {e}"))?;
        ensure!(
            pyramid.shape() == [2, 96, 32, 24],
            "pyramid shape {:?}, wanted [2, 96, 32, 24]",
            pyramid.shape()
        );
        let fused = v1.forward(&x, Mode::Eval).map_err(|e| format!("fuse: {e}"))?;
        ensure!(
            fused.shape() == [2, 32, 16, 12],
            "fused stem shape {:?}, wanted [2, 32, 16, 12]",
            fused.shape()
        );

        // Placement counts: one module, one per stage-1 layer, one per
        // stage with a successor.
        for (strategy, want) in
            [(Strategy::None, 0), (Strategy::Vanilla, 1), (Strategy::LayerWise, 2), (Strategy::StageWise, 3)]
        {
            let cfg = contract_config(strategy);
            let sites = cfg.geometry().map_err(|e| format!("geometry: {e}"))?.sites.len();
            ensure!(sites == want, "{strategy:?}: {sites} sites, wanted {want}");
            let model: Model<f64> =
                Model::build(cfg).map_err(|e| format!("{strategy:?} build: {e}"))?;
            ensure!(
                model.insertion_count() == want,
                "{strategy:?}: model carries {} modules, wanted {want}",
                model.insertion_count()
            );
        }

        // With every learnable value zeroed the residual block passes its
        // input through untouched.
        let v2cfg = HdcConfig {
            depth: 3,
            width: 8,
            dilations: None,
            merge: HdcMerge::Sum,
            mode: HdcMode::Chain,
        };
        let mut block: HrpmV2<f64> =
            HrpmV2::new(16, &v2cfg, &mut seeded_rng(8)).map_err(|e| format!("block: {e}"))?;
        for t in trainable_params_mut(&mut block) {
            t.data_mut().fill(0.0);
        }
        let x = ramp(&[2, 16, 12, 10]);
        let y = block.forward(&x, Mode::Eval).map_err(|e| format!("zero forward: {e}"))?;
        ensure!(y.shape() == x.shape(), "zero block changed shape to {:?}", y.shape());
        let drift = x
            .data()
            .iter()
            .zip(y.data())
            .filter(|(a, b)| a != b)
            .count();
        ensure!(drift == 0, "zeroed block moved {drift} of {} values", x.data().len());
        Ok("96-channel half-res pyramid, counts 0/1/2/3, zero block is identity".into())
    });
}

// ── 5. metric fidelity ──────────────────────────────────────────────────

/// Similarity recomputed from its definition: the mean over labeled
/// keypoints of exp(-d^2 / (2 * area * k^2)).
fn oracle_oks(pred: &PoseInstance, gt: &PoseInstance, params: &OksParams) -> f64 {
    let mut sum = 0.0;
    let mut labeled = 0usize;
    for (i, k) in params.sigmas.iter().enumerate() {
        if gt.visibility[i] < params.in_vis_thresh {
            continue;
        }
        labeled += 1;
        let dx = pred.coords[i][0] - gt.coords[i][0];
        let dy = pred.coords[i][1] - gt.coords[i][1];
        sum += (-(dx * dx + dy * dy) / (2.0 * gt.area * k * k)).exp();
    }
    sum / labeled as f64
}

/// Precision/recall summary recomputed from scratch: greedy matching per
/// image (confidence order, best available similarity, ties to the lower
/// index, in-band ground truth preferred), a global confidence-then-key
/// outcome ordering, and 101-point interpolation done by direct maximum
/// search instead of an envelope.
fn oracle_summary(records: &[EvalRecord], params: &OksParams) -> [f64; 6] {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.50 + 0.05 * i as f64).collect();
    let bands: [(f64, f64); 3] = [
        (0.0, f64::INFINITY),
        (32.0 * 32.0, 96.0 * 96.0),
        (96.0 * 96.0, f64::INFINITY),
    ];

    let mut band_aps: Vec<Vec<f64>> = Vec::new();
    let mut all_recall = 0.0;
    for (bi, (lo, hi)) in bands.iter().enumerate() {
        let in_band = |area: f64| area > *lo && area <= *hi;
        let n_gt: usize = records
            .iter()
            .flat_map(|r| &r.gts)
            .filter(|g| in_band(g.area))
            .count();
        if n_gt == 0 {
            band_aps.push(vec![-1.0; thresholds.len()]);
            continue;
        }
        let mut aps = Vec::new();
        let mut recall_sum = 0.0;
        for &t in &thresholds {
            // (confidence, (image, pred index), true positive)
            let mut outcomes: Vec<(f64, (u64, usize), bool)> = Vec::new();
            for rec in records {
                let mut order: Vec<usize> = (0..rec.preds.len()).collect();
                order.sort_by(|&a, &b| {
                    let ca = rec.preds[a].confidence.unwrap_or(0.0);
                    let cb = rec.preds[b].confidence.unwrap_or(0.0);
                    cb.partial_cmp(&ca).unwrap().then(a.cmp(&b))
                });
                order.truncate(MAX_DETECTIONS);
                let mut taken = vec![false; rec.gts.len()];
                for &p in &order {
                    let mut best: Option<(bool, f64, usize)> = None;
                    for (g, gt) in rec.gts.iter().enumerate() {
                        if taken[g] {
                            continue;
                        }
                        let sim = oracle_oks(&rec.preds[p], gt, params);
                        if sim < t {
                            continue;
                        }
                        let cand = (in_band(gt.area), sim, g);
                        best = Some(match best {
                            None => cand,
                            Some(b) => {
                                // Band first, then similarity; equal
                                // similarity keeps the earlier index.
                                if (cand.0, cand.1) > (b.0, b.1) {
                                    cand
                                } else {
                                    b
                                }
                            }
                        });
                    }
                    match best {
                        Some((true, _, g)) => {
                            taken[g] = true;
                            outcomes.push((rec.preds[p].confidence.unwrap_or(0.0), (rec.image_id, p), true));
                        }
                        Some((false, _, g)) => {
                            // Matched ground truth outside the band: the
                            // prediction neither scores nor counts against.
                            taken[g] = true;
                        }
                        None => outcomes
                            .push((rec.preds[p].confidence.unwrap_or(0.0), (rec.image_id, p), false)),
                    }
                }
            }
            outcomes.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut tp = 0usize;
            let mut precision = Vec::new();
            let mut recall = Vec::new();
            for (rank, o) in outcomes.iter().enumerate() {
                if o.2 {
                    tp += 1;
                }
                precision.push(tp as f64 / (rank + 1) as f64);
                recall.push(tp as f64 / n_gt as f64);
            }
            recall_sum += tp as f64 / n_gt as f64;
            let mut total = 0.0;
            for level in 0..=100 {
                let l = level as f64 / 100.0 - 1e-12;
                let best = precision
                    .iter()
                    .zip(&recall)
                    .filter(|(_, &r)| r >= l)
                    .map(|(&p, _)| p)
                    .fold(0.0f64, f64::max);
                total += best;
            }
            aps.push(total / 101.0);
        }
        if bi == 0 {
            all_recall = recall_sum / thresholds.len() as f64;
        }
        band_aps.push(aps);
    }
    let mean = |v: &[f64]| {
        if v[0] < 0.0 {
            -1.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    [
        mean(&band_aps[0]),
        band_aps[0][0],
        band_aps[0][5],
        mean(&band_aps[1]),
        mean(&band_aps[2]),
        all_recall,
    ]
}

/// A ground truth and a prediction whose similarity is exp(-t): every
/// labeled keypoint sits at distance k_i * sqrt(2 * area * t) along x.
fn offset_pair(
    center: [f64; 2],
    area: f64,
    visibility: Vec<u8>,
    t: f64,
    conf: f64,
    params: &OksParams,
) -> (PoseInstance, PoseInstance) {
    let coords: Vec<[f64; 2]> = (0..params.sigmas.len())
        .map(|i| [center[0] + 3.0 * i as f64, center[1] + 2.0 * i as f64])
        .collect();
    let pred: Vec<[f64; 2]> = coords
        .iter()
        .zip(&params.sigmas)
        .map(|(c, k)| [c[0] + k * (2.0 * area * t).sqrt(), c[1]])
        .collect();
    (PoseInstance::gt(coords, visibility, area), PoseInstance::prediction(pred, conf))
}

#[test]
fn metric_scores_match_independent_oracles() {
    criterion("metric fidelity", || {
        let params = OksParams { sigmas: vec![0.05, 0.1, 0.2], in_vis_thresh: 1 };

        // Anchor similarities: exact hit, one-sigma miss, half-weight miss.
        let gt = PoseInstance::gt(
            vec![[10.0, 10.0], [30.0, 20.0], [22.0, 40.0]],
            vec![2, 2, 2],
            400.0,
        );
        let hit = PoseInstance::prediction(gt.coords.clone(), 1.0);
        let s = oks(&hit, &gt, &params).map_err(|e| format!("oks: {e}"))?;
        ensure!((s - 1.0).abs() <= 1e-9, "identical pose scored {s:.12}, wanted 1");

        let single = PoseInstance::gt(vec![[50.0, 50.0], [0.0, 0.0], [0.0, 0.0]], vec![2, 0, 0], 2500.0);
        let d = params.sigmas[0] * (2.0 * single.area).sqrt();
        let one_sigma =
            PoseInstance::prediction(vec![[50.0 + d, 50.0], [0.0, 0.0], [0.0, 0.0]], 1.0);
        let s = oks(&one_sigma, &single, &params).map_err(|e| format!("oks: {e}"))?;
        ensure!(
            (s - (-1.0f64).exp()).abs() <= 1e-9,
            "one-sigma miss scored {s:.12}, wanted e^-1 = {:.12}",
            (-1.0f64).exp()
        );

        let two = PoseInstance::gt(vec![[10.0, 10.0], [90.0, 90.0], [0.0, 0.0]], vec![2, 2, 0], 100.0);
        // Exponent 800 underflows to a hard zero, leaving exactly half.
        let far = params.sigmas[1] * (2.0 * two.area * 800.0).sqrt();
        let half =
            PoseInstance::prediction(vec![[10.0, 10.0], [90.0 + far, 90.0], [0.0, 0.0]], 1.0);
        let s = oks(&half, &two, &params).map_err(|e| format!("oks: {e}"))?;
        ensure!((s - 0.5).abs() <= 1e-9, "split pose scored {s:.12}, wanted 0.5");

        // Five instances over three images: areas straddle the medium and
        // large bands, one area sits below both, confidences carry a
        // three-way tie, and the last image rewards confidence order over
        // similarity order so greedy matching is pinned.
        let t_for = |v: f64| -(v.ln());
        let (gt_a, pred_a) = offset_pair([30.0, 30.0], 2000.0, vec![2, 2, 2], t_for(0.82), 0.9, &params);
        let (gt_b, pred_b) = offset_pair([150.0, 150.0], 20000.0, vec![2, 2, 2], t_for(0.62), 0.8, &params);
        let (_, pred_stray) = offset_pair([30.0, 30.0], 2000.0, vec![2, 2, 2], t_for(0.30), 0.8, &params);
        let (gt_c, pred_c) = offset_pair([40.0, 40.0], 500.0, vec![2, 1, 2], t_for(0.71), 0.85, &params);
        let (gt_d, pred_d) = offset_pair([160.0, 160.0], 5000.0, vec![0, 2, 2], t_for(0.57), 0.8, &params);
        let (gt_e, pred_e_lo) = offset_pair([100.0, 100.0], 12000.0, vec![2, 0, 2], t_for(0.63), 0.95, &params);
        let (_, pred_e_hi) = offset_pair([100.0, 100.0], 12000.0, vec![2, 0, 2], t_for(0.84), 0.6, &params);
        let lo = oks(&pred_e_lo, &gt_e, &params).map_err(|e| format!("oks: {e}"))?;
        let hi = oks(&pred_e_hi, &gt_e, &params).map_err(|e| format!("oks: {e}"))?;
        ensure!(
            lo < hi,
            "fixture lost its discriminating case: confident {lo:.3} vs late {hi:.3}"
        );

        let records = vec![
            EvalRecord { image_id: 10, gts: vec![gt_a, gt_b], preds: vec![pred_a, pred_b, pred_stray] },
            EvalRecord { image_id: 11, gts: vec![gt_c, gt_d], preds: vec![pred_d, pred_c] },
            EvalRecord { image_id: 12, gts: vec![gt_e], preds: vec![pred_e_lo, pred_e_hi] },
        ];
        let got = evaluate_ap_ar(&records, &params).map_err(|e| format!("evaluate: {e}"))?;
        let want = oracle_summary(&records, &params);
        let fields = [
            ("ap", got.ap, want[0]),
            ("ap50", got.ap50, want[1]),
            ("ap75", got.ap75, want[2]),
            ("ap_m", got.ap_m, want[3]),
            ("ap_l", got.ap_l, want[4]),
            ("ar", got.ar, want[5]),
        ];
        for (name, lib, oracle) in fields {
            ensure!(
                (lib - oracle).abs() <= 1e-9,
                "{name}: library {lib:.12} vs oracle {oracle:.12}"
            );
        }
        ensure!(got.ap > 0.0 && got.ap < 1.0, "degenerate fixture: ap {:.3}", got.ap);
        ensure!(got.ap50 > got.ap75, "thresholds do not discriminate: {got:?}");

        // Head-normalized correctness with both boundary sides exercised:
        // distances land exactly on, inside, and outside alpha * head.
        let alpha = 0.5;
        let mut gt_f = PoseInstance::gt(
            vec![[0.0, 0.0], [10.0, 10.0], [20.0, 20.0]],
            vec![2, 1, 0],
            1000.0,
        );
        gt_f.head_size = Some(10.0);
        let pred_f =
            PoseInstance::prediction(vec![[3.0, 4.0], [10.0, 10.0], [99.0, 99.0]], 1.0);
        let mut gt_g = PoseInstance::gt(
            vec![[0.0, 0.0], [50.0, 50.0], [70.0, 70.0]],
            vec![2, 2, 2],
            1000.0,
        );
        gt_g.head_size = Some(20.0);
        let pred_g =
            PoseInstance::prediction(vec![[6.0, 8.0], [50.0, 61.0], [70.0, 70.0]], 1.0);
        let records = vec![
            EvalRecord { image_id: 1, gts: vec![gt_f], preds: vec![pred_f] },
            EvalRecord { image_id: 2, gts: vec![gt_g], preds: vec![pred_g] },
        ];
        let got = hrpvt_core::metrics::pckh(&records, alpha).map_err(|e| format!("pckh: {e}"))?;
        ensure!(got.labeled == [2, 2, 1], "labeled tallies {:?}, wanted [2, 2, 1]", got.labeled);
        ensure!(got.correct == [2, 1, 1], "correct tallies {:?}, wanted [2, 1, 1]", got.correct);
        ensure!(
            got.per_joint == [Some(1.0), Some(0.5), Some(1.0)],
            "per-joint rates {:?}",
            got.per_joint
        );
        let want_mean = (1.0 + 0.5 + 1.0) / 3.0;
        ensure!(got.mean == want_mean, "mean {:.17} != {want_mean:.17}", got.mean);
        Ok("similarity anchors 1, e^-1, 0.5; summary matches oracle to 1e-9; boundary counts exact".into())
    });
}

// ── 6. short-run trainability ───────────────────────────────────────────

#[test]
fn short_training_run_memorizes_the_scenes() {
    criterion("short-run trainability", || {
        let dir_a = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg_a = smoke_run_config(dir_a.path());
        let t0 = Instant::now();
        let rep_a = train(&cfg_a, &mut |_| {}).map_err(|e| format!("training: {e}"))?;
        let dt = t0.elapsed().as_secs_f64();
        ensure!(rep_a.steps == 500, "recipe took {} steps, wanted 500", rep_a.steps);
        ensure!(
            rep_a.final_mean_px < 2.0,
            "mean keypoint error {:.3}px did not reach 2px",
            rep_a.final_mean_px
        );
        ensure!(
            rep_a.final_pck == 1.0,
            "pck@0.1 is {:.4}, wanted every keypoint inside the threshold",
            rep_a.final_pck
        );
        ensure!(dt <= 600.0, "run took {dt:.0}s, budget is 600s");

        // Bit-identical repeat under the same seeds.
        let dir_b = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg_b = smoke_run_config(dir_b.path());
        let rep_b = train(&cfg_b, &mut |_| {}).map_err(|e| format!("repeat: {e}"))?;
        ensure!(
            rep_a.step_losses == rep_b.step_losses,
            "step losses diverged between identical runs"
        );
        let bytes_a = std::fs::read(dir_a.path().join("last.hrpvtw")).map_err(|e| e.to_string())?;
        let bytes_b = std::fs::read(dir_b.path().join("last.hrpvtw")).map_err(|e| e.to_string())?;
        ensure!(bytes_a == bytes_b, "checkpoints differ between identical runs");
        Ok(format!(
            "500 steps, {dt:.0}s, mean error {:.3}px, pck {:.2}, repeat bit-identical",
            rep_a.final_mean_px, rep_a.final_pck
        ))
    });
}

// ── 7. parameter accounting ─────────────────────────────────────────────

/// Trainable parameter count recomputed from the architecture alone:
/// weights plus biases for convolutions and linears, gains plus offsets for
/// the norms, running statistics excluded.
fn symbolic_param_count(cfg: &ModelConfig) -> usize {
    let linear = |i: usize, o: usize| i * o + o;
    let norm = |d: usize| 2 * d;
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let conv_block = |cin: usize, cout: usize, k: usize| conv(cin, cout, k) + norm(cout);
    let deconv_block = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout + norm(cout);
    let patch_embed = |cin: usize, dim: usize, stride: usize| conv(cin, dim, 2 * stride - 1) + norm(dim);
    let chain = |cin: usize, c: &HdcConfig| -> usize {
        (0..c.depth)
            .map(|i| {
                let ci = if i == 0 || c.mode == HdcMode::Parallel { cin } else { c.width };
                conv_block(ci, c.width, 3)
            })
            .sum()
    };
    // Depthwise 3x3 keeps one filter per channel.
    let dw_conv = |ch: usize| ch * 9 + ch;
    let sra = |dim: usize, r: usize| 4 * linear(dim, dim) + linear(r * r * dim, dim) + norm(dim);
    let cffn = |dim: usize, ratio: usize| {
        let hidden = dim * ratio;
        linear(dim, hidden) + dw_conv(hidden) + linear(hidden, dim)
    };
    let layer = |st: &StageConfig| {
        let norms = if cfg.layer_form == LayerForm::Standard { 2 * norm(st.dim) } else { 0 };
        sra(st.dim, st.reduction) + cffn(st.dim, st.mlp_ratio) + norms
    };

    let dim0 = cfg.stages[0].dim;
    let v1 = cfg.hrpm_v1.hdc();
    let v2 = cfg.hrpm_v2.hdc();
    let mut total = 0usize;

    total += if cfg.strategy == Strategy::None || !cfg.hrpm_v1.enable {
        patch_embed(3, dim0, 4)
    } else {
        conv_block(3, v1.width, 3) + chain(v1.width, &v1) + conv_block(v1.merged_channels(), dim0, 3)
    };
    for (i, st) in cfg.stages.iter().enumerate() {
        if i > 0 {
            total += patch_embed(cfg.stages[i - 1].dim, st.dim, 2);
        }
        total += st.depth * layer(st);
    }
    let module = |c: usize| {
        deconv_block(c, c / 2, 4)
            + conv_block(c / 2, v2.width, 1)
            + chain(v2.width, &v2)
            + conv_block(v2.merged_channels(), c, 3)
    };
    total += match cfg.strategy {
        Strategy::None => 0,
        Strategy::Vanilla => module(dim0),
        Strategy::LayerWise => cfg.stages[0].depth * module(dim0),
        Strategy::StageWise => {
            let end = if cfg.stage_wise_includes_last {
                cfg.stages.len()
            } else {
                cfg.stages.len() - 1
            };
            (0..end).map(|i| module(cfg.stages[i].dim)).sum()
        }
    };

    let (mut h, mut w) = (cfg.simcc.input_h / 4, cfg.simcc.input_w / 4);
    for _ in 1..cfg.stages.len() {
        h /= 2;
        w /= 2;
    }
    let xb = (cfg.simcc.input_w as f64 * cfg.simcc.k).round() as usize;
    let yb = (cfg.simcc.input_h as f64 * cfg.simcc.k).round() as usize;
    total += conv_block(cfg.stages.last().unwrap().dim, cfg.simcc.num_keypoints, 1);
    total += linear(h * w, xb) + linear(h * w, yb);
    total
}

#[test]
fn parameter_counts_match_the_symbolic_oracle() {
    criterion("parameter accounting", || {
        let mut counts = std::collections::BTreeMap::new();
        for strategy in [Strategy::None, Strategy::Vanilla, Strategy::LayerWise, Strategy::StageWise] {
            let cfg = contract_config(strategy);
            let model: Model<f64> =
                Model::build(cfg.clone()).map_err(|e| format!("{strategy:?} build: {e}"))?;
            let counted = model.count_params();
            let symbolic = symbolic_param_count(&cfg);
            ensure!(
                counted == symbolic,
                "{strategy:?}: model counts {counted}, symbolic oracle says {symbolic}"
            );
            counts.insert(format!("{strategy:?}"), counted);
        }
        let (none, vanilla) = (counts["None"], counts["Vanilla"]);
        let (layer, stage) = (counts["LayerWise"], counts["StageWise"]);
        ensure!(none < vanilla, "plain encoder ({none}) not below vanilla ({vanilla})");
        ensure!(vanilla < layer, "vanilla ({vanilla}) not below per-layer ({layer})");
        ensure!(vanilla < stage, "vanilla ({vanilla}) not below per-stage ({stage})");
        Ok(format!(
            "exact counts {none}/{vanilla}/{layer}/{stage} for none/vanilla/layer-wise/stage-wise"
        ))
    });
}

// ── 8. checkpoint fidelity ──────────────────────────────────────────────

#[test]
fn checkpoints_restore_the_forward_pass_bit_for_bit() {
    criterion("checkpoint fidelity", || {
        let mut model: Model<f64> =
            Model::build(tiny_model_config()).map_err(|e| format!("build: {e}"))?;
        let cfg = model.config.simcc.clone();
        let images = ramp(&[2, 3, cfg.input_h, cfg.input_w]);
        // One training-mode pass so the saved running statistics are not
        // the constructor defaults.
        model.forward(&images, Mode::Train).map_err(|e| format!("warmup: {e}"))?;

        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("model.hrpvtw");
        save_weights(&model, &path).map_err(|e| format!("save: {e}"))?;
        let mut restored: Model<f64> = load_weights(&path).map_err(|e| format!("load: {e}"))?;
        ensure!(restored.config == model.config, "restored config differs");

        let (xa, ya) = model.forward(&images, Mode::Eval).map_err(|e| format!("forward: {e}"))?;
        let (xb, yb) = restored
            .forward(&images, Mode::Eval)
            .map_err(|e| format!("restored forward: {e}"))?;
        let same = |a: &Tensor<f64>, b: &Tensor<f64>| {
            a.shape() == b.shape()
                && a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        };
        ensure!(same(&xa, &xb) && same(&ya, &yb), "restored logits differ from the originals");
        Ok(format!(
            "{} values round-tripped with bit-identical logits",
            xa.data().len() + ya.data().len()
        ))
    });
}
