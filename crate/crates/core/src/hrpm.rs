//! High-resolution pyramid modules: a multi-dilation convolution chain
//! (HDC), the stride-4 stem built from it, and the shape-preserving
//! residual block inserted between encoder stages.

use serde::{Deserialize, Serialize};

use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::init::InitRng;
use crate::kernels::{Conv2dGeom, Deconv2dGeom};
use crate::nn::{path, ConvBlock, DeconvBlock, Mode, Module};
use crate::tensor::{concat, Tensor};

/// How the per-dilation tap outputs combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HdcMerge {
    /// Channel-stack the taps: depth * width output channels.
    Concat,
    /// Elementwise-add the taps: width output channels.
    Sum,
}

/// Whether each dilated layer consumes its predecessor or the chain input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HdcMode {
    Chain,
    Parallel,
}

/// Shape of an HDC chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HdcConfig {
    /// Layer count k.
    pub depth: usize,
    /// Output channels of every layer.
    pub width: usize,
    /// Per-layer dilation rates; defaults to 1..=depth.
    #[serde(default)]
    pub dilations: Option<Vec<usize>>,
    pub merge: HdcMerge,
    pub mode: HdcMode,
}

impl HdcConfig {
    pub fn dilations(&self) -> Vec<usize> {
        self.dilations.clone().unwrap_or_else(|| (1..=self.depth).collect())
    }

    /// Channel count after the merge.
    pub fn merged_channels(&self) -> usize {
        match self.merge {
            HdcMerge::Concat => self.depth * self.width,
            HdcMerge::Sum => self.width,
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config(format!("{name}: depth must be at least 1")));
        }
        if self.width == 0 {
            return Err(Error::Config(format!("{name}: width must be at least 1")));
        }
        if let Some(d) = &self.dilations {
            if d.len() != self.depth {
                return Err(Error::Config(format!(
                    "{name}: {} dilation rates for depth {}",
                    d.len(),
                    self.depth
                )));
            }
            if d.iter().any(|v| *v == 0) {
                return Err(Error::Config(format!("{name}: dilation rates must be positive")));
            }
        }
        Ok(())
    }
}

// ── hdc chain ───────────────────────────────────────────────────────────

/// A stack of 3x3 dilated conv blocks with "same" padding equal to each
/// layer's dilation. In chain mode layer i consumes layer i-1's output; in
/// parallel mode every layer consumes the chain input. The tap outputs are
/// merged by channel concatenation or elementwise sum; either way the
/// spatial extents pass through unchanged.
#[derive(Debug, Clone)]
pub struct HdcChain<T: Scalar> {
    pub blocks: Vec<ConvBlock<T>>,
    pub merge: HdcMerge,
    pub mode: HdcMode,
}

impl<T: Scalar> HdcChain<T> {
    pub fn new(c_in: usize, cfg: &HdcConfig, rng: &mut InitRng) -> Result<Self> {
        cfg.validate("hdc")?;
        let blocks = cfg
            .dilations()
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let c = if i == 0 || cfg.mode == HdcMode::Parallel { c_in } else { cfg.width };
                let geom = Conv2dGeom::new(1, d).with_dilation(d);
                ConvBlock::new(c, cfg.width, 3, geom, rng)
            })
            .collect();
        Ok(Self { blocks, merge: cfg.merge, mode: cfg.mode })
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut taps = Vec::with_capacity(self.blocks.len());
        match self.mode {
            HdcMode::Chain => {
                let mut cur = x.clone();
                for block in &mut self.blocks {
                    cur = block.forward(&cur, mode)?;
                    taps.push(cur.clone());
                }
            }
            HdcMode::Parallel => {
                for block in &mut self.blocks {
                    taps.push(block.forward(x, mode)?);
                }
            }
        }
        match self.merge {
            HdcMerge::Concat => {
                let refs: Vec<&Tensor<T>> = taps.iter().collect();
                concat(&refs, 1)
            }
            HdcMerge::Sum => {
                let mut acc = taps[0].clone();
                for tap in &taps[1..] {
                    acc = acc.add(tap)?;
                }
                Ok(acc)
            }
        }
    }
}

impl<T: Scalar> Module<T> for HdcChain<T> {
    fn visit<'a>(&'a self, prefix: &str, vis: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.blocks.visit(&path(prefix, "blocks"), vis);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, vis: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        self.blocks.visit_mut(&path(prefix, "blocks"), vis);
    }
}

// ── stem ────────────────────────────────────────────────────────────────

/// The high-resolution stem: a stride-2 conv block to half resolution, an
/// HDC chain whose concatenated taps form the multi-receptive-field pyramid,
/// GELU over the pyramid, and a stride-2 fuse conv block down to quarter
/// resolution with the first stage's token dimension.
#[derive(Debug, Clone)]
pub struct HrpmV1<T: Scalar> {
    pub stem: ConvBlock<T>,
    pub hdc: HdcChain<T>,
    pub fuse: ConvBlock<T>,
}

impl<T: Scalar> HrpmV1<T> {
    pub fn new(c_in: usize, c1: usize, cfg: &HdcConfig, rng: &mut InitRng) -> Result<Self> {
        Ok(Self {
            stem: ConvBlock::new(c_in, cfg.width, 3, Conv2dGeom::new(2, 1), rng),
            hdc: HdcChain::new(cfg.width, cfg, rng)?,
            fuse: ConvBlock::new(cfg.merged_channels(), c1, 3, Conv2dGeom::new(2, 1), rng),
        })
    }

    /// The merged multi-scale pyramid at half resolution.
    pub fn pyramid(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [_, _, h, w] = x.dims4("hrpm_v1")?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(
                "hrpm_v1",
                format!("{h}x{w} input is not divisible by the output stride 4"),
            ));
        }
        let half = self.stem.forward(x, mode)?;
        self.hdc.forward(&half, mode)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let pyramid = self.pyramid(x, mode)?;
        self.fuse.forward(&pyramid.gelu(), mode)
    }
}

impl<T: Scalar> Module<T> for HrpmV1<T> {
    fn visit<'a>(&'a self, prefix: &str, vis: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.stem.visit(&path(prefix, "stem"), vis);
        self.hdc.visit(&path(prefix, "hdc"), vis);
        self.fuse.visit(&path(prefix, "fuse"), vis);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, vis: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        self.stem.visit_mut(&path(prefix, "stem"), vis);
        self.hdc.visit_mut(&path(prefix, "hdc"), vis);
        self.fuse.visit_mut(&path(prefix, "fuse"), vis);
    }
}

// ── residual pyramid block ──────────────────────────────────────────────

/// The inter-stage residual block: upsample to double resolution at half the
/// channels, run a sum-merged HDC chain there, GELU, fuse back down to the
/// input geometry, and add the untouched input. Output shape always equals
/// input shape; with all weights zero the block is an exact identity.
#[derive(Debug, Clone)]
pub struct HrpmV2<T: Scalar> {
    pub up: DeconvBlock<T>,
    pub entry: ConvBlock<T>,
    pub hdc: HdcChain<T>,
    pub fuse: ConvBlock<T>,
}

impl<T: Scalar> HrpmV2<T> {
    pub fn new(c: usize, cfg: &HdcConfig, rng: &mut InitRng) -> Result<Self> {
        if c % 2 != 0 {
            return Err(Error::Config(format!(
                "residual pyramid block needs an even channel count, got {c}"
            )));
        }
        Ok(Self {
            up: DeconvBlock::new(c, c / 2, 4, Deconv2dGeom::new(2, 1), rng),
            entry: ConvBlock::new(c / 2, cfg.width, 1, Conv2dGeom::new(1, 0), rng),
            hdc: HdcChain::new(cfg.width, cfg, rng)?,
            fuse: ConvBlock::new(cfg.merged_channels(), c, 3, Conv2dGeom::new(2, 1), rng),
        })
    }

    /// Channel count the block was built for.
    pub fn channels(&self) -> usize {
        self.up.deconv.weight.shape()[0]
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [_, c, h, w] = x.dims4("hrpm_v2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "hrpm_v2",
                format!("{h}x{w} input needs even extents to round-trip the upsample"),
            ));
        }
        if c != self.channels() {
            return Err(Error::shape(
                "hrpm_v2",
                format!("input has {c} channels, block was built for {}", self.channels()),
            ));
        }
        let up = self.up.forward(x, mode)?;
        let entered = self.entry.forward(&up, mode)?;
        let merged = self.hdc.forward(&entered, mode)?;
        let fused = self.fuse.forward(&merged.gelu(), mode)?;
        fused.add(x)
    }
}

impl<T: Scalar> Module<T> for HrpmV2<T> {
    fn visit<'a>(&'a self, prefix: &str, vis: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.up.visit(&path(prefix, "up"), vis);
        self.entry.visit(&path(prefix, "entry"), vis);
        self.hdc.visit(&path(prefix, "hdc"), vis);
        self.fuse.visit(&path(prefix, "fuse"), vis);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, vis: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        self.up.visit_mut(&path(prefix, "up"), vis);
        self.entry.visit_mut(&path(prefix, "entry"), vis);
        self.hdc.visit_mut(&path(prefix, "hdc"), vis);
        self.fuse.visit_mut(&path(prefix, "fuse"), vis);
    }
}
