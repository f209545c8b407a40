//! Named gradient-verification suites built on the finite-difference
//! checker: per-operation checks, module-level checks, head-plus-loss
//! checks, and sampled whole-model checks. The command line verifier and
//! the test suites share these so they can never drift apart.

use std::cell::RefCell;

use rand::Rng;

use crate::autograd::backward;
use crate::backbone::{LayerForm, Stage, StageConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{compare_grads, finite_diff_grad, GradAgreement, DEFAULT_STEP};
use crate::hrpm::{HdcConfig, HdcMerge, HdcMode, HrpmV1, HrpmV2};
use crate::init::{seeded_rng, trunc_normal, InitRng};
use crate::kernels::{Conv2dGeom, Deconv2dGeom};
use crate::model::{HrpmV1Config, HrpmV2Config, Model, ModelConfig, Strategy};
use crate::nn::{named_tensors, Mode, Module};
use crate::pose::PoseInstance;
use crate::simcc::{encode_targets, simcc_loss, SimccConfig, SimccHead};
use crate::tensor::{concat, Tensor};

/// One verified gradient with a human-readable label.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub agreement: GradAgreement,
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.agreement.within(tol)
    }
}

fn rand_tensor(shape: &[usize], rng: &mut InitRng) -> Tensor<f64> {
    trunc_normal::<f64>(shape, 1.0, rng).detach()
}

/// Contract a tensor to a scalar against fixed pseudo-random weights so
/// element-permutation bugs cannot cancel out the way a plain sum would.
fn probe_loss(out: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = seeded_rng(seed ^ 0x9e37_79b9);
    let probe = rand_tensor(out.shape(), &mut rng);
    Ok(out.mul(&probe)?.sum_all())
}

/// Check the gradient with respect to `x0` of a scalar-valued closure.
fn check_input<F>(
    reports: &mut Vec<CheckReport>,
    name: &str,
    x0: &Tensor<f64>,
    f: F,
) -> Result<()>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let numeric = finite_diff_grad(&f, x0, DEFAULT_STEP)?;
    let xv = x0.detach().requiring_grad();
    let loss = f(&xv)?;
    let grads = backward(&loss)?;
    let analytic = grads
        .get(&xv)
        .ok_or_else(|| Error::Autograd(format!("{name}: argument missing from gradients")))?;
    reports.push(CheckReport {
        name: name.to_string(),
        agreement: compare_grads(analytic.data(), numeric.data()),
    });
    Ok(())
}

fn bump<M: Module<f64>>(module: &mut M, param: &str, index: usize, delta: f64) {
    let mut hit = false;
    let mut vis = |name: &str, t: &mut Tensor<f64>| {
        if name == param {
            t.data_mut()[index] += delta;
            hit = true;
        }
    };
    module.visit_mut("", &mut vis);
    assert!(hit, "no parameter named {param}");
}

/// Check the gradient with respect to one named parameter of a module,
/// using the same scalar-valued closure for the analytic and numeric sides.
fn check_param<M, F>(
    reports: &mut Vec<CheckReport>,
    label: &str,
    module: &mut M,
    param: &str,
    f: F,
) -> Result<()>
where
    M: Module<f64>,
    F: Fn(&mut M) -> Result<Tensor<f64>>,
{
    let handle = named_tensors(module)
        .into_iter()
        .find(|(n, _)| n == param)
        .map(|(_, t)| t.clone())
        .ok_or_else(|| Error::Autograd(format!("{label}: no parameter named {param}")))?;
    let loss = f(module)?;
    let grads = backward(&loss)?;
    drop(loss);
    let analytic = grads
        .get(&handle)
        .ok_or_else(|| Error::Autograd(format!("{label}: {param} missing from gradients")))?
        .clone();

    let h = DEFAULT_STEP;
    let mut numeric = vec![0.0f64; handle.numel()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        bump(module, param, i, h);
        let fp = f(module)?.item()?;
        bump(module, param, i, -2.0 * h);
        let fm = f(module)?.item()?;
        bump(module, param, i, h);
        *slot = (fp - fm) / (2.0 * h);
    }
    reports.push(CheckReport {
        name: format!("{label} / {param}"),
        agreement: compare_grads(analytic.data(), &numeric),
    });
    Ok(())
}

// ── per-operation suite ─────────────────────────────────────────────────

/// Every differentiable tensor operation against central differences, each
/// in the geometries the model uses (strided, dilated, grouped, batched).
pub fn check_tensor_ops() -> Result<Vec<CheckReport>> {
    let mut rng = seeded_rng(11);
    let mut reports = Vec::new();
    let r = &mut reports;

    // Convolutions over the geometries in play: unit, strided, dilated,
    // grouped, and pointwise.
    let cases = [
        ("conv2d k3 s1 p1", [2, 3, 6, 6], [4, 3, 3, 3], Conv2dGeom::new(1, 1)),
        ("conv2d k3 s2 p1", [1, 2, 7, 7], [3, 2, 3, 3], Conv2dGeom::new(2, 1)),
        ("conv2d k3 s1 p2 d2", [1, 2, 6, 6], [2, 2, 3, 3], Conv2dGeom::new(1, 2).with_dilation(2)),
        ("conv2d k3 s1 p1 g2", [1, 4, 5, 5], [4, 2, 3, 3], Conv2dGeom::new(1, 1).with_groups(2)),
        ("conv2d k1 s1 p0", [2, 3, 4, 4], [5, 3, 1, 1], Conv2dGeom::new(1, 0)),
        ("conv2d k7 s4 p3", [1, 3, 16, 16], [2, 3, 7, 7], Conv2dGeom::new(4, 3)),
    ];
    for (name, ishape, wshape, geom) in cases {
        let x = rand_tensor(&ishape, &mut rng);
        let w = rand_tensor(&wshape, &mut rng);
        let b = rand_tensor(&[wshape[0]], &mut rng);
        check_input(r, &format!("{name} / input"), &x, |t| {
            probe_loss(&t.conv2d(&w, Some(&b), geom)?, 1)
        })?;
        check_input(r, &format!("{name} / weight"), &w, |t| {
            probe_loss(&x.conv2d(t, Some(&b), geom)?, 1)
        })?;
        check_input(r, &format!("{name} / bias"), &b, |t| {
            probe_loss(&x.conv2d(&w, Some(t), geom)?, 1)
        })?;
    }

    {
        let geom = Deconv2dGeom::new(2, 1);
        let x = rand_tensor(&[1, 3, 4, 4], &mut rng);
        let w = rand_tensor(&[3, 2, 4, 4], &mut rng);
        let b = rand_tensor(&[2], &mut rng);
        check_input(r, "deconv2d k4 s2 p1 / input", &x, |t| {
            probe_loss(&t.deconv2d(&w, Some(&b), geom)?, 2)
        })?;
        check_input(r, "deconv2d k4 s2 p1 / weight", &w, |t| {
            probe_loss(&x.deconv2d(t, Some(&b), geom)?, 2)
        })?;
        check_input(r, "deconv2d k4 s2 p1 / bias", &b, |t| {
            probe_loss(&x.deconv2d(&w, Some(t), geom)?, 2)
        })?;
    }

    {
        let x = rand_tensor(&[2, 3, 5], &mut rng);
        let w = rand_tensor(&[5, 4], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        check_input(r, "linear / input", &x, |t| probe_loss(&t.linear(&w, Some(&b))?, 3))?;
        check_input(r, "linear / weight", &w, |t| probe_loss(&x.linear(t, Some(&b))?, 3))?;
        check_input(r, "linear / bias", &b, |t| probe_loss(&x.linear(&w, Some(t))?, 3))?;
    }

    {
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let b = rand_tensor(&[2, 4, 2], &mut rng);
        check_input(r, "matmul / lhs", &a, |t| probe_loss(&t.matmul(&b)?, 4))?;
        check_input(r, "matmul / rhs", &b, |t| probe_loss(&a.matmul(t)?, 4))?;
    }

    {
        let x = rand_tensor(&[2, 3, 4], &mut rng);
        let g = rand_tensor(&[4], &mut rng);
        let o = rand_tensor(&[4], &mut rng);
        check_input(r, "layer_norm / input", &x, |t| probe_loss(&t.layer_norm(&g, &o, 1e-5)?, 5))?;
        check_input(r, "layer_norm / gain", &g, |t| probe_loss(&x.layer_norm(t, &o, 1e-5)?, 5))?;
        check_input(r, "layer_norm / offset", &o, |t| probe_loss(&x.layer_norm(&g, t, 1e-5)?, 5))?;
    }

    {
        let x = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let g = rand_tensor(&[3], &mut rng);
        let o = rand_tensor(&[3], &mut rng);
        check_input(r, "batch_norm_train / input", &x, |t| {
            probe_loss(&t.batch_norm_train(&g, &o, 1e-5)?.0, 6)
        })?;
        check_input(r, "batch_norm_train / gain", &g, |t| {
            probe_loss(&x.batch_norm_train(t, &o, 1e-5)?.0, 6)
        })?;
        check_input(r, "batch_norm_train / offset", &o, |t| {
            probe_loss(&x.batch_norm_train(&g, t, 1e-5)?.0, 6)
        })?;
        let mean = vec![0.1, -0.2, 0.3];
        let var = vec![1.2, 0.8, 1.0];
        check_input(r, "batch_norm_eval / input", &x, |t| {
            probe_loss(&t.batch_norm_eval(&g, &o, &mean, &var, 1e-5)?, 6)
        })?;
        check_input(r, "batch_norm_eval / gain", &g, |t| {
            probe_loss(&x.batch_norm_eval(t, &o, &mean, &var, 1e-5)?, 6)
        })?;
    }

    {
        let x = rand_tensor(&[2, 5], &mut rng);
        check_input(r, "softmax_last", &x, |t| probe_loss(&t.softmax_last(), 7))?;
        check_input(r, "log_softmax_last", &x, |t| probe_loss(&t.log_softmax_last(), 7))?;
        check_input(r, "gelu", &x, |t| probe_loss(&t.gelu(), 7))?;
        // Keep relu probes away from the kink.
        let far = Tensor::from_vec(vec![1.5, -2.0, 0.7, -0.9, 2.2, -1.1], &[6]).unwrap();
        check_input(r, "relu", &far, |t| probe_loss(&t.relu(), 7))?;
    }

    {
        let a = rand_tensor(&[2, 3], &mut rng);
        let b = rand_tensor(&[2, 3], &mut rng);
        check_input(r, "add / lhs", &a, |t| probe_loss(&t.add(&b)?, 8))?;
        check_input(r, "sub / rhs", &b, |t| probe_loss(&a.sub(t)?, 8))?;
        check_input(r, "mul / lhs", &a, |t| probe_loss(&t.mul(&b)?, 8))?;
        check_input(r, "scale", &a, |t| probe_loss(&t.scale(-1.7), 8))?;
        check_input(r, "add_scalar", &a, |t| probe_loss(&t.add_scalar(0.4), 8))?;
        check_input(r, "mean_all", &a, |t| Ok(t.mean_all().scale(3.0).add_scalar(1.0)))?;
        check_input(r, "sum_all", &a, |t| Ok(t.sum_all()))?;
    }

    {
        let x = rand_tensor(&[2, 3, 4, 4], &mut rng);
        check_input(r, "img2seq", &x, |t| probe_loss(&t.img2seq()?, 9))?;
        let s = rand_tensor(&[2, 12, 3], &mut rng);
        check_input(r, "seq2img", &s, |t| probe_loss(&t.seq2img(3, 4)?, 9))?;
        let m = rand_tensor(&[1, 16, 3], &mut rng);
        check_input(r, "merge_token_blocks r2", &m, |t| {
            probe_loss(&t.merge_token_blocks(4, 4, 2)?, 9)
        })?;
        check_input(r, "permute", &x, |t| probe_loss(&t.permute(&[2, 0, 3, 1])?, 9))?;
        check_input(r, "reshape", &x, |t| probe_loss(&t.reshape(&[2, 3, 16])?, 9))?;
        let c1 = rand_tensor(&[1, 2, 3, 3], &mut rng);
        let c2 = rand_tensor(&[1, 4, 3, 3], &mut rng);
        check_input(r, "concat / first", &c1, |t| probe_loss(&concat(&[t, &c2], 1)?, 9))?;
        check_input(r, "concat / second", &c2, |t| probe_loss(&concat(&[&c1, t], 1)?, 9))?;
    }

    Ok(reports)
}

// ── module-level suites ─────────────────────────────────────────────────

fn hdc(depth: usize, width: usize, merge: HdcMerge) -> HdcConfig {
    HdcConfig { depth, width, dilations: None, merge, mode: HdcMode::Chain }
}

/// High-resolution modules end to end: inputs and representative weights of
/// the stem pyramid and the residual block, in training mode.
pub fn check_hrpm_modules() -> Result<Vec<CheckReport>> {
    let mut rng = seeded_rng(21);
    let mut reports = Vec::new();
    let r = &mut reports;

    {
        let x0 = rand_tensor(&[2, 3, 8, 8], &mut rng);
        let v1 = RefCell::new(HrpmV1::new(3, 4, &hdc(2, 4, HdcMerge::Concat), &mut rng)?);
        check_input(r, "hrpm_v1 / input", &x0, |t| {
            probe_loss(&v1.borrow_mut().forward(t, Mode::Train)?, 31)
        })?;
        let mut v1 = v1.into_inner();
        for param in ["stem.conv.weight", "hdc.blocks.1.conv.weight", "fuse.norm.gain"] {
            let x = x0.detach();
            check_param(r, "hrpm_v1", &mut v1, param, |m| {
                probe_loss(&m.forward(&x, Mode::Train)?, 31)
            })?;
        }
    }

    {
        let x0 = rand_tensor(&[2, 4, 4, 4], &mut rng);
        let v2 = RefCell::new(HrpmV2::new(4, &hdc(2, 4, HdcMerge::Sum), &mut rng)?);
        check_input(r, "hrpm_v2 / input", &x0, |t| {
            probe_loss(&v2.borrow_mut().forward(t, Mode::Train)?, 32)
        })?;
        let mut v2 = v2.into_inner();
        for param in ["up.deconv.weight", "entry.conv.bias", "fuse.conv.weight"] {
            let x = x0.detach();
            check_param(r, "hrpm_v2", &mut v2, param, |m| {
                probe_loss(&m.forward(&x, Mode::Train)?, 32)
            })?;
        }
    }

    Ok(reports)
}

/// One full encoder stage (patch embedding, attention, feed-forward) with
/// respect to its input and representative weights.
pub fn check_stage() -> Result<Vec<CheckReport>> {
    let mut rng = seeded_rng(22);
    let mut reports = Vec::new();
    let cfg = StageConfig { depth: 1, dim: 4, heads: 2, reduction: 2, mlp_ratio: 2 };
    let stage = Stage::new(3, &cfg, 2, LayerForm::Standard, &mut rng);
    let x0 = rand_tensor(&[1, 3, 8, 8], &mut rng);
    check_input(&mut reports, "stage / input", &x0, |t| {
        probe_loss(&stage.forward(t)?.seq, 41)
    })?;
    let mut stage = stage;
    for param in [
        "embed.conv.weight",
        "layers.0.attn.q.weight",
        "layers.0.attn.sr_proj.weight",
        "layers.0.ffn.dw.weight",
        "layers.0.attn_norm.gain",
    ] {
        let x = x0.detach();
        check_param(&mut reports, "stage", &mut stage, param, |m| {
            probe_loss(&m.forward(&x)?.seq, 41)
        })?;
    }
    Ok(reports)
}

/// The classification head composed with its loss, against targets with one
/// masked keypoint so the masking path is differentiated too.
pub fn check_head_loss() -> Result<Vec<CheckReport>> {
    let mut rng = seeded_rng(23);
    let mut reports = Vec::new();
    let cfg = SimccConfig { k: 2.0, sigma: 2.0, input_w: 4, input_h: 4, num_keypoints: 2 };
    let poses = vec![
        PoseInstance::gt(vec![[1.0, 2.0], [3.0, 0.5]], vec![2, 1], 6.0),
        PoseInstance::gt(vec![[0.5, 3.0], [2.0, 2.0]], vec![2, 0], 6.0),
    ];
    let targets = encode_targets::<f64>(&poses, &cfg)?;
    let head = SimccHead::<f64>::new(4, &cfg, &mut rng);
    let x0 = rand_tensor(&[2, 2, 2, 2], &mut rng);

    check_input(&mut reports, "head+loss / features", &x0, |t| {
        let (xl, yl) = head.forward(t)?;
        Ok(simcc_loss(&xl, &yl, &targets)?.loss)
    })?;
    let mut head = head;
    for param in ["fc_x.weight", "fc_y.bias"] {
        let x = x0.detach();
        check_param(&mut reports, "head+loss", &mut head, param, |m| {
            let (xl, yl) = m.forward(&x)?;
            Ok(simcc_loss(&xl, &yl, &targets)?.loss)
        })?;
    }
    Ok(reports)
}

// ── whole-model suite ───────────────────────────────────────────────────

/// A four-stage configuration small enough to finite-difference.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        stages: vec![
            StageConfig { depth: 1, dim: 4, heads: 1, reduction: 4, mlp_ratio: 2 },
            StageConfig { depth: 1, dim: 4, heads: 2, reduction: 2, mlp_ratio: 2 },
            StageConfig { depth: 1, dim: 6, heads: 2, reduction: 1, mlp_ratio: 2 },
            StageConfig { depth: 1, dim: 8, heads: 2, reduction: 1, mlp_ratio: 2 },
        ],
        hrpm_v1: HrpmV1Config { depth: 2, width: 4, ..HrpmV1Config::default() },
        hrpm_v2: HrpmV2Config { depth: 2, width: 4, ..HrpmV2Config::default() },
        strategy: Strategy::Vanilla,
        stage_wise_includes_last: false,
        simcc: SimccConfig { k: 2.0, sigma: 6.0, input_w: 32, input_h: 32, num_keypoints: 3 },
        layer_form: LayerForm::Standard,
        seed: 5,
    }
}

/// Differentiates the full training objective (forward plus loss) at
/// `samples` weights drawn uniformly across all trainable parameters.
pub fn check_full_model(samples: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut model: Model<f64> = Model::build(tiny_model_config())?;
    let cfg = model.config.simcc;
    let mut rng = seeded_rng(seed);
    let images = rand_tensor(&[2, 3, cfg.input_h, cfg.input_w], &mut rng);
    let poses = vec![
        PoseInstance::gt(vec![[8.0, 9.0], [20.0, 14.0], [15.0, 25.0]], vec![2, 2, 1], 300.0),
        PoseInstance::gt(vec![[10.0, 22.0], [24.0, 8.0], [5.0, 5.0]], vec![2, 0, 2], 280.0),
    ];
    let targets = encode_targets::<f64>(&poses, &cfg)?;
    let objective = |m: &mut Model<f64>| -> Result<Tensor<f64>> {
        let (xl, yl) = m.forward(&images, Mode::Train)?;
        Ok(simcc_loss(&xl, &yl, &targets)?.loss)
    };

    // Analytic gradients once, from unperturbed weights.
    let loss = objective(&mut model)?;
    let grads = backward(&loss)?;
    drop(loss);

    // Uniform sample over the flattened trainable parameter space.
    let trainable: Vec<(String, Tensor<f64>, usize)> = named_tensors(&model)
        .into_iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, t)| {
            let numel = t.numel();
            (n, t.clone(), numel)
        })
        .collect();
    let total: usize = trainable.iter().map(|(_, _, n)| n).sum();
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < samples.min(total) {
        picked.insert(rng.gen_range(0..total));
    }

    let h = DEFAULT_STEP;
    let mut reports = Vec::with_capacity(picked.len());
    for flat in picked {
        let mut off = flat;
        let (name, handle, index) = trainable
            .iter()
            .find_map(|(n, t, numel)| {
                if off < *numel {
                    Some((n.clone(), t, off))
                } else {
                    off -= numel;
                    None
                }
            })
            .expect("flat index inside total");
        let analytic = grads
            .get(handle)
            .ok_or_else(|| Error::Autograd(format!("{name} missing from gradients")))?
            .data()[index];

        bump(&mut model, &name, index, h);
        let fp = objective(&mut model)?.item()?;
        bump(&mut model, &name, index, -2.0 * h);
        let fm = objective(&mut model)?.item()?;
        bump(&mut model, &name, index, h);
        let numeric = (fp - fm) / (2.0 * h);

        reports.push(CheckReport {
            name: format!("model / {name}[{index}]"),
            agreement: compare_grads(&[analytic], &[numeric]),
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    // The suites themselves are asserted in the integration tests; here we
    // only pin that each suite runs and covers what it claims.

    #[test]
    fn op_suite_covers_every_differentiable_operation() {
        let reports = check_tensor_ops().unwrap();
        assert!(reports.len() > 30, "{}", reports.len());
        for needle in ["conv2d", "deconv2d", "linear", "matmul", "layer_norm", "batch_norm", "softmax", "merge_token_blocks"] {
            assert!(reports.iter().any(|r| r.name.contains(needle)), "{needle} missing");
        }
    }

    #[test]
    fn sampling_respects_the_requested_count() {
        let reports = check_full_model(3, 91).unwrap();
        assert_eq!(reports.len(), 3);
    }
}
