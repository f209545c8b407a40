//! Full network assembly: a pyramid transformer encoder with optional
//! high-resolution residual modules wired in at configurable points, topped
//! by the coordinate classification head.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{LayerForm, PatchEmbed, Stage, StageConfig, Tokens};
use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::hrpm::{HdcConfig, HdcMerge, HdcMode, HrpmV1, HrpmV2};
use crate::init::seeded_rng;
use crate::nn::{named_tensors, param_count, path, ConvBlock, Mode, Module};
use crate::simcc::{decode_coords, Decoded, SimccConfig, SimccHead};
use crate::kernels::Conv2dGeom;
use crate::tensor::Tensor;

/// Where the shape-preserving residual modules are inserted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Plain encoder with an overlapping patch stem; no residual modules.
    None,
    /// High-resolution stem plus one module between stage 1 and stage 2.
    #[default]
    Vanilla,
    /// High-resolution stem plus one module after every stage-1 layer.
    LayerWise,
    /// High-resolution stem plus one module after each stage feeding a
    /// successor (the last stage too when `stage_wise_includes_last`).
    StageWise,
}

/// Stem-module settings: dilated-chain geometry plus an enable switch so the
/// residual insertions can be ablated with a plain patch stem. The switch is
/// only consulted when `strategy` is not `none`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HrpmV1Config {
    pub enable: bool,
    pub depth: usize,
    pub width: usize,
    pub dilations: Option<Vec<usize>>,
    pub merge: HdcMerge,
    pub mode: HdcMode,
}

impl Default for HrpmV1Config {
    fn default() -> Self {
        Self {
            enable: true,
            depth: 6,
            width: 16,
            dilations: None,
            merge: HdcMerge::Concat,
            mode: HdcMode::Chain,
        }
    }
}

impl HrpmV1Config {
    pub fn hdc(&self) -> HdcConfig {
        HdcConfig {
            depth: self.depth,
            width: self.width,
            dilations: self.dilations.clone(),
            merge: self.merge,
            mode: self.mode,
        }
    }
}

/// Dilated-chain geometry for the inserted residual modules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HrpmV2Config {
    pub depth: usize,
    pub width: usize,
    pub dilations: Option<Vec<usize>>,
    pub merge: HdcMerge,
    pub mode: HdcMode,
}

impl Default for HrpmV2Config {
    fn default() -> Self {
        Self {
            depth: 3,
            width: 32,
            dilations: None,
            merge: HdcMerge::Sum,
            mode: HdcMode::Chain,
        }
    }
}

impl HrpmV2Config {
    pub fn hdc(&self) -> HdcConfig {
        HdcConfig {
            depth: self.depth,
            width: self.width,
            dilations: self.dilations.clone(),
            merge: self.merge,
            mode: self.mode,
        }
    }
}

/// Complete architecture description. The crop size lives in `simcc`
/// (`input_w`/`input_h`) and drives every divisibility check at build time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub hrpm_v1: HrpmV1Config,
    #[serde(default)]
    pub hrpm_v2: HrpmV2Config,
    #[serde(default)]
    pub strategy: Strategy,
    /// The stage-wise reading that also rewrites the final stage's output.
    #[serde(default)]
    pub stage_wise_includes_last: bool,
    pub simcc: SimccConfig,
    #[serde(default)]
    pub layer_form: LayerForm,
    #[serde(default)]
    pub seed: u64,
}

/// One residual-module placement, resolved to concrete geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InsertionSite {
    /// Stage whose output the module rewrites (0-based).
    pub stage: usize,
    /// Which layer inside the stage, for per-layer placement.
    pub layer: Option<usize>,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

/// Result of the dry geometry walk over the configured crop.
#[derive(Debug, Clone)]
pub struct Geometry {
    /// Token-map extent after each stage.
    pub stage_maps: Vec<(usize, usize)>,
    pub sites: Vec<InsertionSite>,
}

impl ModelConfig {
    pub fn stage_stride(i: usize) -> usize {
        if i == 0 { 4 } else { 2 }
    }

    /// Walks the crop through every stage and insertion point, failing on
    /// the first geometry constraint the configuration cannot satisfy.
    pub fn geometry(&self) -> Result<Geometry> {
        if self.stages.is_empty() {
            return Err(Error::Config("model needs at least one stage".into()));
        }
        let (mut h, mut w) = (self.simcc.input_h, self.simcc.input_w);
        let mut stage_maps = Vec::with_capacity(self.stages.len());
        let mut sites = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            let s = Self::stage_stride(i);
            if h % s != 0 || w % s != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: input {h}x{w} is not divisible by stride {s}"
                )));
            }
            h /= s;
            w /= s;
            if h % st.reduction != 0 || w % st.reduction != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: token map {h}x{w} is not divisible into {r}x{r} blocks",
                    r = st.reduction
                )));
            }
            stage_maps.push((h, w));

            let here = |layer| InsertionSite { stage: i, layer, h, w, channels: st.dim };
            match self.strategy {
                Strategy::None => {}
                Strategy::Vanilla => {
                    if i == 0 {
                        sites.push(here(None));
                    }
                }
                Strategy::LayerWise => {
                    if i == 0 {
                        sites.extend((0..st.depth).map(|l| here(Some(l))));
                    }
                }
                Strategy::StageWise => {
                    if i + 1 < self.stages.len() || self.stage_wise_includes_last {
                        sites.push(here(None));
                    }
                }
            }
        }
        for site in &sites {
            if site.channels % 2 != 0 {
                return Err(Error::Config(format!(
                    "stage {}: residual insertion needs an even channel count, got {}",
                    site.stage, site.channels
                )));
            }
            if site.h % 2 != 0 || site.w % 2 != 0 {
                return Err(Error::Config(format!(
                    "stage {}: residual insertion needs even map extents, got {}x{}",
                    site.stage, site.h, site.w
                )));
            }
        }
        Ok(Geometry { stage_maps, sites })
    }

    pub fn validate(&self) -> Result<()> {
        for (i, st) in self.stages.iter().enumerate() {
            st.validate(i)?;
        }
        self.simcc.validate()?;
        self.hrpm_v1.hdc().validate("hrpm_v1")?;
        self.hrpm_v2.hdc().validate("hrpm_v2")?;
        self.geometry().map(drop)
    }

    fn uses_hrpm_stem(&self) -> bool {
        self.strategy != Strategy::None && self.hrpm_v1.enable
    }
}

// ── the model ───────────────────────────────────────────────────────────

/// Entry module producing the stage-1 token stream.
#[derive(Debug, Clone)]
pub enum Stem<T: Scalar> {
    Ope(PatchEmbed<T>),
    Hrpm(HrpmV1<T>),
}

impl<T: Scalar> Module<T> for Stem<T> {
    fn visit<'a>(&'a self, prefix: &str, vis: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        match self {
            Stem::Ope(pe) => pe.visit(prefix, vis),
            Stem::Hrpm(v1) => v1.visit(prefix, vis),
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, vis: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        match self {
            Stem::Ope(pe) => pe.visit_mut(prefix, vis),
            Stem::Hrpm(v1) => v1.visit_mut(prefix, vis),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    stem: Stem<T>,
    /// Every stage runs headless; the stem owns stage 1's tokenization and
    /// later stages own their patch embeddings.
    stages: Vec<Stage<T>>,
    /// Per-layer residual modules for stage 1 (layer-wise placement).
    v2_layer: Vec<HrpmV2<T>>,
    /// Per-stage residual modules (vanilla and stage-wise placements).
    v2_stage: Vec<Option<HrpmV2<T>>>,
    head_proj: ConvBlock<T>,
    head: SimccHead<T>,
}

impl<T: Scalar> Model<T> {
    /// Instantiates all weights from the config's seed. Construction order
    /// is fixed (stem, stages, residual modules, head) so identical configs
    /// always reproduce identical weights.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let geo = config.geometry()?;
        let mut rng = seeded_rng(config.seed);
        let n_kp = config.simcc.num_keypoints;

        let dim0 = config.stages[0].dim;
        let stem = if config.uses_hrpm_stem() {
            Stem::Hrpm(HrpmV1::new(3, dim0, &config.hrpm_v1.hdc(), &mut rng)?)
        } else {
            Stem::Ope(PatchEmbed::new(3, dim0, 4, &mut rng))
        };

        let mut stages = Vec::with_capacity(config.stages.len());
        for (i, st) in config.stages.iter().enumerate() {
            if i == 0 {
                stages.push(Stage::headless(st, config.layer_form, &mut rng));
            } else {
                let c_in = config.stages[i - 1].dim;
                stages.push(Stage::new(c_in, st, 2, config.layer_form, &mut rng));
            }
        }

        let v2 = config.hrpm_v2.hdc();
        let mut v2_layer = Vec::new();
        let mut v2_stage: Vec<Option<HrpmV2<T>>> =
            (0..config.stages.len()).map(|_| None).collect();
        for site in &geo.sites {
            let block = HrpmV2::new(site.channels, &v2, &mut rng)?;
            match site.layer {
                Some(_) => v2_layer.push(block),
                None => v2_stage[site.stage] = Some(block),
            }
        }

        let c_last = config.stages.last().unwrap().dim;
        let head_proj = ConvBlock::new(c_last, n_kp, 1, Conv2dGeom::new(1, 0), &mut rng);
        let (fh, fw) = *geo.stage_maps.last().unwrap();
        let head = SimccHead::new(fh * fw, &config.simcc, &mut rng);

        Ok(Self { config, stem, stages, v2_layer, v2_stage, head_proj, head })
    }

    /// How many residual modules this model carries.
    pub fn insertion_count(&self) -> usize {
        self.v2_layer.len() + self.v2_stage.iter().flatten().count()
    }

    /// [n, 3, H, W] -> per-axis bin logits ([n, kp, W*k], [n, kp, H*k]).
    pub fn forward(&mut self, images: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tensor<T>)> {
        let [_, c, h, w] = images.dims4("model")?;
        let cfg = &self.config.simcc;
        if c != 3 || h != cfg.input_h || w != cfg.input_w {
            return Err(Error::shape(
                "model",
                format!(
                    "input {c}x{h}x{w} does not match the configured 3x{}x{} crop",
                    cfg.input_h, cfg.input_w
                ),
            ));
        }

        let mut t = match &mut self.stem {
            Stem::Ope(pe) => pe.forward(images)?,
            Stem::Hrpm(v1) => {
                let map = v1.forward(images, mode)?;
                let [_, _, mh, mw] = map.dims4("model")?;
                Tokens::new(map.img2seq()?, mh, mw)
            }
        };

        if self.v2_layer.is_empty() {
            t = self.stages[0].run_layers(t)?;
        } else {
            for (layer, v2) in self.stages[0].layers.iter().zip(self.v2_layer.iter_mut()) {
                t = layer.forward(&t)?;
                t = apply_v2(v2, t, mode)?;
            }
        }
        if let Some(v2) = &mut self.v2_stage[0] {
            t = apply_v2(v2, t, mode)?;
        }

        for i in 1..self.stages.len() {
            let map = t.to_map()?;
            t = self.stages[i].forward(&map)?;
            if let Some(v2) = &mut self.v2_stage[i] {
                t = apply_v2(v2, t, mode)?;
            }
        }

        let f = self.head_proj.forward(&t.to_map()?, mode)?;
        self.head.forward(&f)
    }

    /// Forward plus coordinate decoding in crop pixel space.
    pub fn forward_pose(
        &mut self,
        images: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Tensor<T>, Decoded)> {
        let (xl, yl) = self.forward(images, mode)?;
        let decoded = decode_coords(&xl, &yl, &self.config.simcc)?;
        Ok((xl, yl, decoded))
    }

    /// Trainable parameter count (running statistics excluded).
    pub fn count_params(&self) -> usize {
        param_count(self)
    }

    /// Trainable parameter counts grouped by top-level component, stages and
    /// residual modules broken out individually.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: BTreeMap<String, usize> = BTreeMap::new();
        for (name, t) in named_tensors(self) {
            if !t.requires_grad() {
                continue;
            }
            let mut parts = name.split('.');
            let first = parts.next().unwrap_or("");
            let key = match first {
                "stages" | "v2_stage" | "v2_layer" => {
                    format!("{first}.{}", parts.next().unwrap_or(""))
                }
                _ => first.to_string(),
            };
            *groups.entry(key).or_default() += t.numel();
        }
        groups.into_iter().collect()
    }
}

fn apply_v2<T: Scalar>(v2: &mut HrpmV2<T>, t: Tokens<T>, mode: Mode) -> Result<Tokens<T>> {
    let map = v2.forward(&t.to_map()?, mode)?;
    Ok(Tokens::new(map.img2seq()?, t.h, t.w))
}

impl<T: Scalar> Module<T> for Model<T> {
    fn visit<'a>(&'a self, prefix: &str, vis: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.stem.visit(&path(prefix, "stem"), vis);
        self.stages.visit(&path(prefix, "stages"), vis);
        self.v2_layer.visit(&path(prefix, "v2_layer"), vis);
        self.v2_stage.visit(&path(prefix, "v2_stage"), vis);
        self.head_proj.visit(&path(prefix, "head_proj"), vis);
        self.head.visit(&path(prefix, "head"), vis);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, vis: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        self.stem.visit_mut(&path(prefix, "stem"), vis);
        self.stages.visit_mut(&path(prefix, "stages"), vis);
        self.v2_layer.visit_mut(&path(prefix, "v2_layer"), vis);
        self.v2_stage.visit_mut(&path(prefix, "v2_stage"), vis);
        self.head_proj.visit_mut(&path(prefix, "head_proj"), vis);
        self.head.visit_mut(&path(prefix, "head"), vis);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Four tiny stages walking a 32x32 crop down to 1x1.
    fn tiny_config(strategy: Strategy) -> ModelConfig {
        let dims = [4usize, 4, 4, 4];
        let reductions = [8usize, 4, 2, 1];
        ModelConfig {
            stages: dims
                .iter()
                .zip(reductions)
                .map(|(&dim, reduction)| StageConfig {
                    depth: 1,
                    dim,
                    heads: 1,
                    reduction,
                    mlp_ratio: 2,
                })
                .collect(),
            hrpm_v1: HrpmV1Config { depth: 2, width: 4, ..HrpmV1Config::default() },
            hrpm_v2: HrpmV2Config { depth: 2, width: 4, ..HrpmV2Config::default() },
            strategy,
            stage_wise_includes_last: false,
            simcc: SimccConfig {
                k: 2.0,
                sigma: 6.0,
                input_w: 32,
                input_h: 32,
                num_keypoints: 3,
            },
            layer_form: LayerForm::Standard,
            seed: 7,
        }
    }

    #[test]
    fn geometry_walk_names_the_failing_stage() {
        let mut cfg = tiny_config(Strategy::None);
        cfg.simcc.input_w = 24; // 24/4 = 6, not divisible into 8x8 blocks
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("stage 0") && msg.contains("blocks"), "{msg}");

        let mut cfg = tiny_config(Strategy::None);
        cfg.simcc.input_h = 36; // stage 1 map is 9 wide, stride 2 fails next
        for st in &mut cfg.stages {
            st.reduction = 1;
        }
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("stage 1") && msg.contains("stride 2"), "{msg}");

        let mut cfg = tiny_config(Strategy::Vanilla);
        cfg.stages[0].dim = 3;
        cfg.stages[0].heads = 1;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("even channel count"), "{msg}");
    }

    #[test]
    fn insertion_counts_follow_the_strategy() {
        let counts = [
            (Strategy::None, 0),
            (Strategy::Vanilla, 1),
            (Strategy::LayerWise, 1),
            (Strategy::StageWise, 3),
        ];
        for (strategy, want) in counts {
            let m: Model<f32> = Model::build(tiny_config(strategy)).unwrap();
            assert_eq!(m.insertion_count(), want, "{strategy:?}");
        }

        // Layer-wise scales with stage-1 depth; the flag extends stage-wise.
        let mut cfg = tiny_config(Strategy::LayerWise);
        cfg.stages[0].depth = 3;
        let m: Model<f32> = Model::build(cfg).unwrap();
        assert_eq!(m.insertion_count(), 3);

        // Including the last stage needs a final map with even extents, so
        // the 32x32 crop (whose last map is 1x1) is rejected outright and a
        // 64x64 crop carries the fourth module.
        let mut cfg = tiny_config(Strategy::StageWise);
        cfg.stage_wise_includes_last = true;
        let msg = Model::<f32>::build(cfg.clone()).unwrap_err().to_string();
        assert!(msg.contains("stage 3") && msg.contains("even map extents"), "{msg}");
        cfg.simcc.input_w = 64;
        cfg.simcc.input_h = 64;
        let m: Model<f32> = Model::build(cfg).unwrap();
        assert_eq!(m.insertion_count(), 4);
    }

    #[test]
    fn insertion_sites_resolve_scales_and_layers() {
        let geo = tiny_config(Strategy::StageWise).geometry().unwrap();
        let got: Vec<_> = geo.sites.iter().map(|s| (s.stage, s.h, s.w)).collect();
        assert_eq!(got, vec![(0, 8, 8), (1, 4, 4), (2, 2, 2)]);

        let mut cfg = tiny_config(Strategy::LayerWise);
        cfg.stages[0].depth = 2;
        let geo = cfg.geometry().unwrap();
        assert_eq!(geo.sites.len(), 2);
        assert!(geo.sites.iter().all(|s| s.stage == 0 && (s.h, s.w) == (8, 8)));
        assert_eq!(geo.sites[0].layer, Some(0));
        assert_eq!(geo.sites[1].layer, Some(1));
    }

    #[test]
    fn every_strategy_emits_the_same_logit_shapes() {
        let images = Tensor::<f32>::from_vec(
            (0..2 * 3 * 32 * 32).map(|i| (i % 13) as f32 / 13.0).collect(),
            &[2, 3, 32, 32],
        )
        .unwrap();
        for strategy in
            [Strategy::None, Strategy::Vanilla, Strategy::LayerWise, Strategy::StageWise]
        {
            let mut m: Model<f32> = Model::build(tiny_config(strategy)).unwrap();
            let (xl, yl) = m.forward(&images, Mode::Eval).unwrap();
            assert_eq!(xl.shape(), &[2, 3, 64], "{strategy:?}");
            assert_eq!(yl.shape(), &[2, 3, 64], "{strategy:?}");
        }
    }

    #[test]
    fn identical_images_in_a_batch_predict_identically() {
        let one: Vec<f32> = (0..3 * 32 * 32).map(|i| ((i * 7) % 23) as f32 / 23.0).collect();
        let mut both = one.clone();
        both.extend_from_slice(&one);
        let images = Tensor::from_vec(both, &[2, 3, 32, 32]).unwrap();
        let mut m: Model<f32> = Model::build(tiny_config(Strategy::Vanilla)).unwrap();
        let (_, _, decoded) = m.forward_pose(&images, Mode::Eval).unwrap();
        assert_eq!(decoded.poses[0].coords, decoded.poses[1].coords);
        let cfg = &m.config.simcc;
        for c in &decoded.poses[0].coords {
            assert!(c[0] >= 0.0 && c[0] < cfg.input_w as f64);
            assert!(c[1] >= 0.0 && c[1] < cfg.input_h as f64);
        }
    }

    #[test]
    fn three_stage_crop_64x48_runs_end_to_end() {
        let cfg = ModelConfig {
            stages: vec![
                StageConfig { depth: 1, dim: 4, heads: 1, reduction: 4, mlp_ratio: 2 },
                StageConfig { depth: 1, dim: 4, heads: 2, reduction: 2, mlp_ratio: 2 },
                StageConfig { depth: 1, dim: 8, heads: 2, reduction: 1, mlp_ratio: 2 },
            ],
            hrpm_v1: HrpmV1Config { depth: 2, width: 4, ..HrpmV1Config::default() },
            hrpm_v2: HrpmV2Config { depth: 2, width: 4, ..HrpmV2Config::default() },
            strategy: Strategy::Vanilla,
            stage_wise_includes_last: false,
            simcc: SimccConfig {
                k: 2.0,
                sigma: 6.0,
                input_w: 48,
                input_h: 64,
                num_keypoints: 17,
            },
            layer_form: LayerForm::Standard,
            seed: 1,
        };
        let mut m: Model<f32> = Model::build(cfg).unwrap();
        let images = Tensor::from_vec(
            (0..3 * 64 * 48).map(|i| ((i * 31) % 17) as f32 / 17.0).collect(),
            &[1, 3, 64, 48],
        )
        .unwrap();
        let (xl, yl, decoded) = m.forward_pose(&images, Mode::Eval).unwrap();
        assert_eq!(xl.shape(), &[1, 17, 96]);
        assert_eq!(yl.shape(), &[1, 17, 128]);
        assert_eq!(decoded.poses[0].coords.len(), 17);
    }

    #[test]
    fn literal_layer_form_builds_and_runs() {
        let mut cfg = tiny_config(Strategy::Vanilla);
        cfg.layer_form = LayerForm::Literal;
        let mut m: Model<f32> = Model::build(cfg).unwrap();
        let images = Tensor::zeros(&[1, 3, 32, 32]);
        m.forward(&images, Mode::Eval).unwrap();
        assert!(named_tensors(&m).iter().all(|(n, _)| !n.contains("attn_norm")));
    }

    #[test]
    fn parameter_counts_grow_with_insertions() {
        let count = |s| {
            Model::<f32>::build(tiny_config(s)).unwrap().count_params()
        };
        let none = count(Strategy::None);
        let vanilla = count(Strategy::Vanilla);
        let layer_wise = {
            let mut cfg = tiny_config(Strategy::LayerWise);
            cfg.stages[0].depth = 2;
            Model::<f32>::build(cfg).unwrap().count_params()
        };
        let stage_wise = count(Strategy::StageWise);
        assert!(none < vanilla, "{none} vs {vanilla}");
        assert!(vanilla < layer_wise, "{vanilla} vs {layer_wise}");
        assert!(vanilla < stage_wise, "{vanilla} vs {stage_wise}");
    }

    #[test]
    fn breakdown_sums_to_the_total_and_wrong_crop_is_rejected() {
        let mut m: Model<f32> = Model::build(tiny_config(Strategy::StageWise)).unwrap();
        let breakdown = m.param_breakdown();
        let total: usize = breakdown.iter().map(|(_, n)| n).sum();
        assert_eq!(total, m.count_params());
        assert!(breakdown.iter().any(|(k, _)| k == "stem"));
        assert!(breakdown.iter().any(|(k, _)| k == "v2_stage.1"));

        let bad = Tensor::zeros(&[1, 3, 32, 16]);
        let msg = m.forward(&bad, Mode::Eval).unwrap_err().to_string();
        assert!(msg.contains("configured"), "{msg}");
    }

    #[test]
    fn same_seed_rebuilds_identical_weights() {
        let a: Model<f64> = Model::build(tiny_config(Strategy::Vanilla)).unwrap();
        let b: Model<f64> = Model::build(tiny_config(Strategy::Vanilla)).unwrap();
        let ta = named_tensors(&a);
        let tb = named_tensors(&b);
        assert_eq!(ta.len(), tb.len());
        for ((na, va), (nb, vb)) in ta.iter().zip(&tb) {
            assert_eq!(na, nb);
            assert_eq!(va.data(), vb.data(), "{na}");
        }

        let mut other_cfg = tiny_config(Strategy::Vanilla);
        other_cfg.seed = 8;
        let c: Model<f64> = Model::build(other_cfg).unwrap();
        let tc = named_tensors(&c);
        let differs = ta
            .iter()
            .zip(&tc)
            .any(|((_, va), (_, vc))| va.requires_grad() && va.data() != vc.data());
        assert!(differs);
    }
}
