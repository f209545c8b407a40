//! Training loop: seeded data order and augmentation, Adam with milestone
//! decay, per-epoch checkpoints, and a run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use hrpvt_core::autograd::backward;
use hrpvt_core::dtype::Scalar;
use hrpvt_core::model::{Model, ModelConfig, Strategy};
use hrpvt_core::nn::{trainable_params_mut, Mode};
use hrpvt_core::optim::Adam;
use hrpvt_core::pose::PoseInstance;
use hrpvt_core::simcc::{encode_targets, simcc_loss, SimccConfig};
use hrpvt_core::weights::save_weights;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, sample_params, AugmentConfig};
use crate::dataset::Dataset;
use crate::synth::SceneSpec;

/// Numeric type the harness trains and evaluates in.
pub type S = f64;

pub const CHECKPOINT_FILE: &str = "last.hrpvtw";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Where training data comes from: a generated set or a directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synth: Option<SceneSpec>,
    /// Number of scenes to generate; required with `synth`.
    pub count: Option<usize>,
    pub dir: Option<PathBuf>,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.synth, &self.dir) {
            (Some(_), None) => {
                ensure!(self.count.is_some(), "data.synth needs data.count");
                Ok(())
            }
            (None, Some(_)) => {
                ensure!(self.count.is_none(), "data.count only applies to data.synth");
                Ok(())
            }
            (Some(_), Some(_)) => bail!("data lists both synth and dir; pick one"),
            (None, None) => bail!("data needs either synth or dir"),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        self.validate()?;
        match (&self.synth, &self.dir) {
            (Some(spec), None) => Dataset::from_synth(spec, self.count.unwrap()),
            (None, Some(dir)) => Dataset::from_dir(dir),
            _ => unreachable!(),
        }
    }
}

/// Full description of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Epoch indices at which the learning rate drops by ten.
    #[serde(default)]
    pub milestones: Vec<usize>,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub augment: AugmentConfig,
    pub out_dir: PathBuf,
    /// Seed for data order and augmentation sampling; the model seed lives
    /// in the model config.
    #[serde(default)]
    pub seed: u64,
}

fn default_lr() -> f64 {
    5e-4
}

fn default_batch() -> usize {
    4
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| anyhow::anyhow!("model: {e}"))?;
        self.data.validate()?;
        ensure!(self.lr > 0.0, "lr {} is not positive", self.lr);
        ensure!(self.epochs > 0, "epochs must be positive");
        ensure!(self.batch_size > 0, "batch_size must be positive");
        for w in self.milestones.windows(2) {
            ensure!(w[0] < w[1], "milestones must increase, got {} then {}", w[0], w[1]);
        }
        self.augment.validate()?;
        Ok(())
    }

    /// Learning rate in force during `epoch` (zero-based): each milestone
    /// reached so far divides it by ten.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * 0.1f64.powi(drops as i32)
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: RunConfig =
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Accuracy of decoded poses against their targets: fraction of labeled
/// keypoints within `frac` of the target's keypoint-box extent, plus the
/// mean pixel error over labeled keypoints.
pub fn pck_and_mean_px(gt: &[PoseInstance], pred: &[PoseInstance], frac: f64) -> (f64, f64) {
    let (mut hits, mut labeled, mut err_sum) = (0usize, 0usize, 0.0f64);
    for (g, p) in gt.iter().zip(pred) {
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for i in 0..g.num_keypoints() {
            if g.is_labeled(i) {
                x0 = x0.min(g.coords[i][0]);
                x1 = x1.max(g.coords[i][0]);
                y0 = y0.min(g.coords[i][1]);
                y1 = y1.max(g.coords[i][1]);
            }
        }
        if !x0.is_finite() {
            continue;
        }
        let extent = (x1 - x0).max(y1 - y0).max(1.0);
        for i in 0..g.num_keypoints() {
            if !g.is_labeled(i) {
                continue;
            }
            let dx = g.coords[i][0] - p.coords[i][0];
            let dy = g.coords[i][1] - p.coords[i][1];
            let d = (dx * dx + dy * dy).sqrt();
            labeled += 1;
            err_sum += d;
            if d <= frac * extent {
                hits += 1;
            }
        }
    }
    if labeled == 0 {
        (0.0, 0.0)
    } else {
        (hits as f64 / labeled as f64, err_sum / labeled as f64)
    }
}

/// Summary the trainer returns and mirrors into the run manifest.
#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: f64,
    /// Fraction of labeled keypoints within a tenth of the keypoint-box
    /// extent, measured over the training set without augmentation.
    pub final_pck: f64,
    pub final_mean_px: f64,
    pub masked_batch_warnings: usize,
    #[serde(skip)]
    pub step_losses: Vec<f64>,
    #[serde(skip)]
    pub epoch_losses: Vec<f64>,
    pub weights_path: PathBuf,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    seed: u64,
    lr: f64,
    milestones: &'a [usize],
    report: &'a TrainReport,
    model: &'a ModelConfig,
}

/// Runs one forward pass over the whole set in inference mode and scores
/// decoded poses against the ground truth.
pub fn evaluate_pck(model: &mut Model<S>, data: &Dataset, batch: usize) -> Result<(f64, f64)> {
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for chunk in data.samples.chunks(batch.max(1)) {
        let refs: Vec<&[u8]> = chunk.iter().map(|s| s.pixels.as_slice()).collect();
        let images = data.batch_tensor::<S>(&refs)?;
        let (_, _, decoded) = model.forward_pose(&images, Mode::Eval)?;
        preds.extend(decoded.poses);
        gts.extend(chunk.iter().map(|s| s.pose.clone()));
    }
    Ok(pck_and_mean_px(&gts, &preds, 0.1))
}

pub fn train(cfg: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<TrainReport> {
    cfg.validate()?;
    let data = cfg.data.load()?;
    ensure!(!data.is_empty(), "training set is empty");
    let simcc = &cfg.model.simcc;
    ensure!(
        data.w == simcc.input_w && data.h == simcc.input_h,
        "dataset images are {}x{}, the model crop is {}x{}",
        data.w,
        data.h,
        simcc.input_w,
        simcc.input_h
    );
    ensure!(
        data.skeleton.num_keypoints() == simcc.num_keypoints,
        "dataset has {} keypoints, the model head has {}",
        data.skeleton.num_keypoints(),
        simcc.num_keypoints
    );

    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let mut model: Model<S> =
        Model::build(cfg.model.clone()).map_err(|e| anyhow::anyhow!("building model: {e}"))?;
    let mut adam: Adam<S> = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut masked_batch_warnings = 0usize;
    let weights_path = cfg.out_dir.join(CHECKPOINT_FILE);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (loss_value, visible) =
                train_step(&mut model, &mut adam, &data, chunk, cfg, simcc, lr, &mut rng)?;
            if !loss_value.is_finite() {
                bail!("loss became {loss_value} at step {step}; stopping");
            }
            if visible == 0 {
                masked_batch_warnings += 1;
                log(&format!("step {step}: every keypoint in the batch is unlabeled"));
            }
            step_losses.push(loss_value);
            epoch_loss += loss_value;
            batches += 1;
            step += 1;
        }
        let mean_loss = epoch_loss / batches.max(1) as f64;
        epoch_losses.push(mean_loss);
        save_weights(&model, &weights_path)
            .map_err(|e| anyhow::anyhow!("saving checkpoint: {e}"))?;
        log(&format!(
            "epoch {:>4}/{} lr {lr:.3e} loss {mean_loss:.5}",
            epoch + 1,
            cfg.epochs
        ));
    }

    let (final_pck, final_mean_px) = evaluate_pck(&mut model, &data, cfg.batch_size)?;
    log(&format!("final pck@0.1 {final_pck:.4} mean error {final_mean_px:.3}px"));

    let report = TrainReport {
        epochs: cfg.epochs,
        steps: step,
        final_loss: *epoch_losses.last().unwrap_or(&f64::NAN),
        final_pck,
        final_mean_px,
        masked_batch_warnings,
        step_losses,
        epoch_losses,
        weights_path: weights_path.clone(),
    };
    let manifest = RunManifest {
        seed: cfg.seed,
        lr: cfg.lr,
        milestones: &cfg.milestones,
        report: &report,
        model: &cfg.model,
    };
    fs::write(
        cfg.out_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model<S>,
    adam: &mut Adam<S>,
    data: &Dataset,
    chunk: &[usize],
    cfg: &RunConfig,
    simcc: &SimccConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let mut pixels: Vec<Vec<u8>> = Vec::with_capacity(chunk.len());
    let mut poses: Vec<PoseInstance> = Vec::with_capacity(chunk.len());
    for &i in chunk {
        let s = &data.samples[i];
        if cfg.augment.enable {
            let params = sample_params(&cfg.augment, rng);
            let (px, pose) = augment(&s.pixels, &s.pose, data.w, data.h, params, &data.skeleton);
            pixels.push(px);
            poses.push(pose);
        } else {
            pixels.push(s.pixels.clone());
            poses.push(s.pose.clone());
        }
    }
    let refs: Vec<&[u8]> = pixels.iter().map(|p| p.as_slice()).collect();
    let images = data.batch_tensor::<S>(&refs)?;
    let targets = encode_targets::<S>(&poses, simcc)
        .map_err(|e| anyhow::anyhow!("encoding targets: {e}"))?;
    let (xl, yl) = model
        .forward(&images, Mode::Train)
        .map_err(|e| anyhow::anyhow!("forward: {e}"))?;
    let out = simcc_loss(&xl, &yl, &targets).map_err(|e| anyhow::anyhow!("loss: {e}"))?;
    let loss_value = out.loss.data()[0].as_f64();
    let visible = out.visible;
    let grads = backward(&out.loss).map_err(|e| anyhow::anyhow!("backward: {e}"))?;
    // Release every graph handle before the in-place update.
    drop(out);
    drop(xl);
    drop(yl);
    let mut params = trainable_params_mut(model);
    adam.step(&mut params, &grads, lr).map_err(|e| anyhow::anyhow!("optimizer: {e}"))?;
    Ok((loss_value, visible))
}

// ── stock configurations ────────────────────────────────────────────────

/// Compact four-stage model on a 96x96 crop: the full stride-4/8/16/32
/// pyramid at desk-machine size. Default base for the ablation command.
pub fn baseline_model_config() -> ModelConfig {
    use hrpvt_core::backbone::StageConfig;
    use hrpvt_core::model::{HrpmV1Config, HrpmV2Config};
    let stage = |depth, dim, heads, reduction| StageConfig {
        depth,
        dim,
        heads,
        reduction,
        mlp_ratio: 4,
    };
    ModelConfig {
        stages: vec![stage(1, 16, 1, 8), stage(1, 32, 2, 4), stage(1, 64, 4, 2), stage(1, 128, 8, 1)],
        hrpm_v1: HrpmV1Config { depth: 6, width: 16, ..HrpmV1Config::default() },
        hrpm_v2: HrpmV2Config { depth: 3, width: 16, ..HrpmV2Config::default() },
        strategy: Strategy::Vanilla,
        stage_wise_includes_last: false,
        simcc: SimccConfig {
            k: 4.0,
            sigma: 6.0,
            input_w: 96,
            input_h: 96,
            num_keypoints: 17,
        },
        layer_form: Default::default(),
        seed: 0,
    }
}

/// Two-stage model on a 48x48 crop sized so a short full-batch run can
/// memorize a handful of scenes. The final 6x6 map keeps the coordinate
/// head wide enough to separate individual training images.
pub fn smoke_model_config() -> ModelConfig {
    use hrpvt_core::backbone::StageConfig;
    use hrpvt_core::model::{HrpmV1Config, HrpmV2Config};
    let stage = |dim, heads, reduction| StageConfig {
        depth: 1,
        dim,
        heads,
        reduction,
        mlp_ratio: 2,
    };
    ModelConfig {
        stages: vec![stage(16, 1, 2), stage(32, 2, 1)],
        hrpm_v1: HrpmV1Config { depth: 2, width: 8, ..HrpmV1Config::default() },
        hrpm_v2: HrpmV2Config { depth: 2, width: 8, ..HrpmV2Config::default() },
        strategy: Strategy::Vanilla,
        stage_wise_includes_last: false,
        simcc: SimccConfig {
            k: 2.0,
            sigma: 6.0,
            input_w: 48,
            input_h: 48,
            num_keypoints: 17,
        },
        layer_form: Default::default(),
        seed: 0,
    }
}

/// The overfit recipe used by the end-to-end checks: 16 scenes, full-batch
/// steps (exact gradients buy more progress per step than minibatches when
/// the step count is this small), no augmentation, 500 steps total.
pub fn smoke_run_config(out_dir: &Path) -> RunConfig {
    RunConfig {
        model: smoke_model_config(),
        data: DataConfig {
            synth: Some(SceneSpec {
                canvas_w: 48,
                canvas_h: 48,
                scale: [0.65, 0.8],
                // Keep the legs angled outward and fairly straight so the
                // ankles of a 16-scene set stay far enough apart to pin down
                // individually within the step budget.
                hip_deg: [5.0, 35.0],
                knee_deg: [0.0, 30.0],
                seed: 0,
                ..SceneSpec::default()
            }),
            count: Some(16),
            dir: None,
        },
        lr: 5e-4,
        milestones: vec![],
        epochs: 500,
        batch_size: 16,
        augment: AugmentConfig { enable: false, ..AugmentConfig::default() },
        out_dir: out_dir.to_path_buf(),
        seed: 0,
    }
}

/// Tiny two-stage model on a 32x32 crop for fast tests.
pub fn tiny_model_config() -> ModelConfig {
    use hrpvt_core::backbone::StageConfig;
    use hrpvt_core::model::{HrpmV1Config, HrpmV2Config};
    let stage = |dim, heads, reduction| StageConfig {
        depth: 1,
        dim,
        heads,
        reduction,
        mlp_ratio: 2,
    };
    ModelConfig {
        stages: vec![stage(8, 1, 2), stage(16, 2, 1)],
        hrpm_v1: HrpmV1Config { depth: 2, width: 4, ..HrpmV1Config::default() },
        hrpm_v2: HrpmV2Config { depth: 2, width: 4, ..HrpmV2Config::default() },
        strategy: Strategy::Vanilla,
        stage_wise_includes_last: false,
        simcc: SimccConfig {
            k: 2.0,
            sigma: 4.0,
            input_w: 32,
            input_h: 32,
            num_keypoints: 17,
        },
        layer_form: Default::default(),
        seed: 3,
    }
}

pub fn tiny_run_config(out_dir: &Path, epochs: usize, count: usize) -> RunConfig {
    RunConfig {
        model: tiny_model_config(),
        data: DataConfig {
            synth: Some(SceneSpec {
                canvas_w: 32,
                canvas_h: 32,
                scale: [0.6, 0.8],
                seed: 1,
                ..SceneSpec::default()
            }),
            count: Some(count),
            dir: None,
        },
        lr: 5e-4,
        milestones: vec![],
        epochs,
        batch_size: 4,
        augment: AugmentConfig { enable: false, ..AugmentConfig::default() },
        out_dir: out_dir.to_path_buf(),
        seed: 7,
    }
}
