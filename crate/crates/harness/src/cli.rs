//! Command-line surface: training, evaluation, prediction, verification
//! suites, sweeps, ablation tables, and data generation.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hrpvt_core::checks::{
    check_head_loss, check_hrpm_modules, check_stage, check_tensor_ops, CheckReport,
};
use hrpvt_core::metrics::{evaluate_ap_ar, pckh, EvalRecord, OksParams};
use hrpvt_core::model::{Model, ModelConfig, Strategy};
use hrpvt_core::nn::Mode;
use hrpvt_core::simcc::round_trip_sweep;
use hrpvt_core::weights::load_weights;
use rayon::prelude::*;

use crate::coco::{self, GtFile, ResultRecord};
use crate::dataset::{batch_tensor, list_images, load_png, write_dataset};
use crate::synth::SceneSpec;
use crate::train::{load_run_config, train, S};

pub const THREADS_ENV: &str = "HRPVT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "hrpvt", version, about = "Pose estimation on a desk machine")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Oks,
    Pckh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModuleArg {
    All,
    Tensor,
    Hrpm,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    HdcDepth,
    HdcWidth,
    Strategy,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train a model from a run configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the run seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score predictions against a ground-truth dataset.
    Eval {
        /// Weight file to run over the dataset images.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Saved predictions to score instead of running a model.
        #[arg(long)]
        preds: Option<PathBuf>,
        /// Dataset directory holding images and annotations.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        metric: MetricArg,
        /// Distance threshold as a fraction of head size.
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Also write the scores as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run a model over a directory of images and save predictions.
    Predict {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ModuleArg::All)]
        module: ModuleArg,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Sweep coordinate encode/decode error against the split factor.
    SimccSweep {
        /// Split factors, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Coordinate extent swept in hundredth-pixel steps.
        #[arg(long, default_value_t = 192)]
        extent: usize,
        #[arg(long, default_value_t = 6.0)]
        sigma: f64,
    },
    /// Tabulate parameter counts while varying one architecture axis.
    Ablate {
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Axis values, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Base model configuration; a stock compact model by default.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic dataset: images plus annotations.
    GenData {
        /// Scene settings file.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses and runs, returning the process exit code. Usage errors keep
/// clap's convention (2); runtime failures print one line and return 1.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version land on stdout with a zero code.
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            1
        }
    }
}

fn one_line(e: &anyhow::Error) -> String {
    format!("{e:#}").split_whitespace().collect::<Vec<_>>().join(" ")
}

/// In-process entry point used by the tests.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run(Cli::try_parse_from(args)?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, seed } => cmd_train(&config, seed),
        Cmd::Eval { weights, preds, data, metric, alpha, report } => {
            cmd_eval(weights, preds, &data, metric, alpha, report)
        }
        Cmd::Predict { weights, images, out } => cmd_predict(&weights, &images, &out),
        Cmd::Gradcheck { module, tol } => cmd_gradcheck(module, tol),
        Cmd::SimccSweep { k, out, extent, sigma } => cmd_sweep(&k, &out, extent, sigma),
        Cmd::Ablate { axis, values, out, config } => cmd_ablate(axis, &values, &out, config),
        Cmd::GenData { spec, count, out } => cmd_gen_data(&spec, count, &out),
    }
}

fn cmd_train(config: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_run_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let report = train(&cfg, &mut |line| println!("{line}"))?;
    println!(
        "trained {} steps; weights at {}",
        report.steps,
        report.weights_path.display()
    );
    Ok(())
}

/// Thread pool for per-image inference, capped by HRPVT_THREADS.
fn eval_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .with_context(|| format!("{THREADS_ENV}={v} is not a thread count"))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building the evaluation thread pool")
}

/// Runs the model over listed images in parallel batches; order of the
/// returned records follows the image listing.
fn predict_records(
    weights: &Path,
    images_dir: &Path,
) -> Result<(Vec<ResultRecord>, Option<GtFile>)> {
    let model: Model<S> =
        load_weights(weights).map_err(|e| anyhow::anyhow!("loading {}: {e}", weights.display()))?;
    let (listing, gt) = list_images(images_dir)?;
    let (w, h) = (model.config.simcc.input_w, model.config.simcc.input_h);
    let pool = eval_pool()?;
    let batches: Vec<&[(u64, PathBuf)]> = listing.chunks(8).collect();
    let nested: Result<Vec<Vec<ResultRecord>>> = pool.install(|| {
        batches
            .par_iter()
            .map(|batch| {
                let mut m = model.clone();
                let mut pixels = Vec::with_capacity(batch.len());
                for (_, path) in batch.iter() {
                    pixels.push(load_png(path, w, h)?);
                }
                let refs: Vec<&[u8]> = pixels.iter().map(|p| p.as_slice()).collect();
                let tensor = batch_tensor::<S>(&refs, w, h)?;
                let (_, _, decoded) = m
                    .forward_pose(&tensor, Mode::Eval)
                    .map_err(|e| anyhow::anyhow!("forward: {e}"))?;
                Ok(batch
                    .iter()
                    .zip(decoded.poses)
                    .map(|((id, _), pose)| {
                        let mut keypoints = Vec::with_capacity(pose.coords.len() * 3);
                        for c in &pose.coords {
                            keypoints.extend_from_slice(&[c[0], c[1], 2.0]);
                        }
                        ResultRecord {
                            image_id: *id,
                            category_id: 1,
                            keypoints,
                            score: pose.confidence.unwrap_or(0.0),
                        }
                    })
                    .collect())
            })
            .collect()
    });
    Ok((nested?.into_iter().flatten().collect(), gt))
}

fn cmd_predict(weights: &Path, images: &Path, out: &Path) -> Result<()> {
    let (records, _) = predict_records(weights, images)?;
    coco::write_results(&records, out)?;
    println!("wrote {} predictions to {}", records.len(), out.display());
    Ok(())
}

fn cmd_eval(
    weights: Option<PathBuf>,
    preds: Option<PathBuf>,
    data: &Path,
    metric: MetricArg,
    alpha: f64,
    report: Option<PathBuf>,
) -> Result<()> {
    let records = match (&weights, &preds) {
        (Some(w), None) => {
            let (results, gt) = predict_records(w, data)?;
            let gt = gt.with_context(|| {
                format!("{} has no annotation file to score against", data.display())
            })?;
            coco::to_eval_records(&gt, &results)?
        }
        (None, Some(p)) => {
            let gt = coco::load_gt(&data.join(crate::dataset::ANNOTATION_FILE))?;
            let results = coco::load_results(p)?;
            coco::to_eval_records(&gt, &results)?
        }
        _ => bail!("pass exactly one of --weights or --preds"),
    };
    let json = score_records(&records, metric, alpha)?;
    if let Some(path) = report {
        fs::write(&path, serde_json::to_string_pretty(&json)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn score_records(
    records: &[EvalRecord],
    metric: MetricArg,
    alpha: f64,
) -> Result<serde_json::Value> {
    match metric {
        MetricArg::Oks => {
            let s = evaluate_ap_ar(records, &OksParams::default())
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            println!("AP {:.4}", s.ap);
            println!("AP50 {:.4}", s.ap50);
            println!("AP75 {:.4}", s.ap75);
            println!("AP_M {:.4}", s.ap_m);
            println!("AP_L {:.4}", s.ap_l);
            println!("AR {:.4}", s.ar);
            Ok(serde_json::json!({
                "metric": "oks",
                "ap": s.ap, "ap50": s.ap50, "ap75": s.ap75,
                "ap_m": s.ap_m, "ap_l": s.ap_l, "ar": s.ar,
            }))
        }
        MetricArg::Pckh => {
            let s = pckh(records, alpha).map_err(|e| anyhow::anyhow!("{e}"))?;
            println!("PCKh@{alpha} {:.4}", s.mean);
            Ok(serde_json::json!({
                "metric": "pckh",
                "alpha": alpha,
                "mean": s.mean,
                "labeled": s.labeled,
                "correct": s.correct,
                "per_joint": s.per_joint,
            }))
        }
    }
}

fn cmd_gradcheck(module: ModuleArg, tol: f64) -> Result<()> {
    ensure!(tol > 0.0, "tolerance {tol} is not positive");
    let mut reports: Vec<CheckReport> = Vec::new();
    let wrap = |r: hrpvt_core::error::Result<Vec<CheckReport>>| {
        r.map_err(|e| anyhow::anyhow!("gradcheck: {e}"))
    };
    match module {
        ModuleArg::All => {
            reports.extend(wrap(check_tensor_ops())?);
            reports.extend(wrap(check_hrpm_modules())?);
            reports.extend(wrap(check_stage())?);
            reports.extend(wrap(check_head_loss())?);
        }
        ModuleArg::Tensor => reports.extend(wrap(check_tensor_ops())?),
        ModuleArg::Hrpm => {
            reports.extend(wrap(check_hrpm_modules())?);
            reports.extend(wrap(check_stage())?);
        }
        ModuleArg::Head => reports.extend(wrap(check_head_loss())?),
    }
    let mut failures = 0usize;
    for r in &reports {
        let a = &r.agreement;
        let status = if r.passes(tol) { "ok" } else { "FAIL" };
        if !r.passes(tol) {
            failures += 1;
        }
        println!(
            "{status} {} checked {} max_rel {:.3e} max_abs {:.3e}",
            r.name, a.checked, a.max_rel, a.max_abs
        );
    }
    println!("gradcheck: {} checks, {failures} over tolerance {tol:.1e}", reports.len());
    ensure!(failures == 0, "{failures} gradient checks exceeded {tol:.1e}");
    Ok(())
}

fn cmd_sweep(ks: &[f64], out: &Path, extent: usize, sigma: f64) -> Result<()> {
    ensure!(extent >= 2, "extent {extent} is too small to sweep");
    for &k in ks {
        ensure!(k > 0.0, "split factor {k} is not positive");
        let bins = extent as f64 * k;
        ensure!(
            (bins - bins.round()).abs() < 1e-9,
            "split factor {k} times extent {extent} is not a whole bin count"
        );
    }
    let points = round_trip_sweep(extent, sigma, ks, 0.01);
    let mut csv = String::from("k,max_err,mean_err,bound\n");
    for p in &points {
        csv.push_str(&format!("{},{:.9},{:.9},{:.9}\n", p.k, p.max_err, p.mean_err, p.bound));
        println!("k {} max_err {:.6} bound {:.6}", p.k, p.max_err, p.bound);
    }
    fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn parse_strategy(s: &str) -> Result<Strategy> {
    Ok(match s {
        "none" => Strategy::None,
        "vanilla" => Strategy::Vanilla,
        "layer_wise" => Strategy::LayerWise,
        "stage_wise" => Strategy::StageWise,
        other => bail!("unknown strategy {other:?}; use none, vanilla, layer_wise, stage_wise"),
    })
}

fn cmd_ablate(axis: AxisArg, values: &[String], out: &Path, config: Option<PathBuf>) -> Result<()> {
    let base: ModelConfig = match config {
        Some(path) => {
            let text =
                fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => crate::train::baseline_model_config(),
    };
    let axis_name = match axis {
        AxisArg::HdcDepth => "hdc-depth",
        AxisArg::HdcWidth => "hdc-width",
        AxisArg::Strategy => "strategy",
    };
    let mut csv = String::from("axis,value,params,insertions\n");
    for value in values {
        let mut cfg = base.clone();
        match axis {
            AxisArg::HdcDepth => {
                let d: usize =
                    value.parse().with_context(|| format!("depth {value:?} is not a count"))?;
                cfg.hrpm_v1.depth = d;
                cfg.hrpm_v2.depth = d;
            }
            AxisArg::HdcWidth => {
                let w: usize =
                    value.parse().with_context(|| format!("width {value:?} is not a count"))?;
                cfg.hrpm_v1.width = w;
                cfg.hrpm_v2.width = w;
            }
            AxisArg::Strategy => cfg.strategy = parse_strategy(value)?,
        }
        let model: Model<S> = Model::build(cfg)
            .map_err(|e| anyhow::anyhow!("{axis_name} {value}: {e}"))?;
        let row = format!(
            "{axis_name},{value},{},{}\n",
            model.count_params(),
            model.insertion_count()
        );
        print!("{row}");
        csv.push_str(&row);
    }
    fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn cmd_gen_data(spec_path: &Path, count: usize, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path)
        .with_context(|| format!("reading {}", spec_path.display()))?;
    let spec: SceneSpec =
        toml::from_str(&text).with_context(|| format!("parsing {}", spec_path.display()))?;
    let names = write_dataset(&spec, count, out)?;
    println!("wrote {} images to {}", names.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::error::ErrorKind;

    #[test]
    fn unknown_flags_are_usage_errors() {
        let err = Cli::try_parse_from(["hrpvt", "train", "--bogus", "x"]).unwrap_err();
        assert_eq!(err.kind(), ErrorKind::UnknownArgument);
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn subcommands_parse_with_their_flags() {
        let cli = Cli::try_parse_from([
            "hrpvt",
            "simcc-sweep",
            "--k",
            "2,4,6",
            "--out",
            "sweep.csv",
        ])
        .unwrap();
        match cli.cmd {
            Cmd::SimccSweep { k, extent, sigma, .. } => {
                assert_eq!(k, vec![2.0, 4.0, 6.0]);
                assert_eq!(extent, 192);
                assert_eq!(sigma, 6.0);
            }
            other => panic!("parsed {other:?}"),
        }
        let cli = Cli::try_parse_from([
            "hrpvt", "ablate", "--axis", "hdc-depth", "--values", "1,3,6", "--out", "a.csv",
        ])
        .unwrap();
        match cli.cmd {
            Cmd::Ablate { axis, values, .. } => {
                assert_eq!(axis, AxisArg::HdcDepth);
                assert_eq!(values.len(), 3);
            }
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn eval_requires_exactly_one_source() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_from([
            "hrpvt",
            "eval",
            "--data",
            dir.path().to_str().unwrap(),
            "--metric",
            "oks",
        ])
        .unwrap_err();
        assert!(format!("{err:#}").contains("exactly one"), "{err:#}");
    }

    #[test]
    fn strategy_values_parse_exactly() {
        assert_eq!(parse_strategy("layer_wise").unwrap(), Strategy::LayerWise);
        assert!(parse_strategy("layerwise").is_err());
    }
}
