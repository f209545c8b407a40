//! In-memory datasets: generated scenes or image directories, batched into
//! input tensors.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use hrpvt_core::dtype::Scalar;
use hrpvt_core::pose::PoseInstance;
use hrpvt_core::tensor::Tensor;

use crate::coco::{self, GtFile};
use crate::synth::{gen_synthetic, SceneSpec, SkeletonTemplate};

/// One image with its single ground-truth instance.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Row-major RGB bytes.
    pub pixels: Vec<u8>,
    pub pose: PoseInstance,
    pub image_id: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub w: usize,
    pub h: usize,
    pub samples: Vec<Sample>,
    pub skeleton: SkeletonTemplate,
}

pub const ANNOTATION_FILE: &str = "annotations.json";

impl Dataset {
    pub fn from_synth(spec: &SceneSpec, count: usize) -> Result<Dataset> {
        let scenes = gen_synthetic(spec, count)?;
        let samples = scenes
            .into_iter()
            .enumerate()
            .map(|(i, s)| Sample { pixels: s.pixels, pose: s.pose, image_id: i as u64 + 1 })
            .collect();
        Ok(Dataset {
            w: spec.canvas_w,
            h: spec.canvas_h,
            samples,
            skeleton: spec.skeleton.clone(),
        })
    }

    /// Loads a directory written by the data generator: an annotation file
    /// beside the images it references.
    pub fn from_dir(dir: &Path) -> Result<Dataset> {
        let gt = coco::load_gt(&dir.join(ANNOTATION_FILE))?;
        let names = gt.categories[0].keypoints.clone();
        let limbs = gt.categories[0].skeleton.clone();
        let skeleton = SkeletonTemplate {
            names,
            limbs,
            // Pair left_*/right_* names positionally; datasets made here
            // always carry that naming.
            flip_pairs: infer_flip_pairs(&gt.categories[0].keypoints),
        };
        ensure!(!gt.images.is_empty(), "{} lists no images", dir.display());
        let (w, h) = (gt.images[0].width, gt.images[0].height);
        let mut samples = Vec::with_capacity(gt.images.len());
        for img in &gt.images {
            ensure!(
                img.width == w && img.height == h,
                "image {} is {}x{}, dataset is {w}x{h}",
                img.file_name,
                img.width,
                img.height
            );
            let pixels = load_png(&dir.join(&img.file_name), w, h)?;
            let anns: Vec<_> =
                gt.annotations.iter().filter(|a| a.image_id == img.id).collect();
            ensure!(
                anns.len() == 1,
                "image id {} has {} annotations, expected exactly one instance",
                img.id,
                anns.len()
            );
            let pose = coco::gt_pose(anns[0])?;
            samples.push(Sample { pixels, pose, image_id: img.id });
        }
        Ok(Dataset { w, h, samples, skeleton })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks raw images into a `[n, 3, h, w]` tensor scaled to [0, 1].
    pub fn batch_tensor<T: Scalar>(&self, pixels: &[&[u8]]) -> Result<Tensor<T>> {
        batch_tensor(pixels, self.w, self.h)
    }
}

fn infer_flip_pairs(names: &[String]) -> Vec<[usize; 2]> {
    let mut pairs = Vec::new();
    for (i, name) in names.iter().enumerate() {
        if let Some(rest) = name.strip_prefix("left_") {
            let twin = format!("right_{rest}");
            if let Some(j) = names.iter().position(|n| *n == twin) {
                pairs.push([i, j]);
            }
        }
    }
    pairs
}

pub fn batch_tensor<T: Scalar>(images: &[&[u8]], w: usize, h: usize) -> Result<Tensor<T>> {
    let n = images.len();
    ensure!(n > 0, "cannot batch zero images");
    let plane = w * h;
    let mut data = vec![T::zero(); n * 3 * plane];
    for (b, px) in images.iter().enumerate() {
        ensure!(
            px.len() == plane * 3,
            "image {b} has {} bytes, expected {}",
            px.len(),
            plane * 3
        );
        for c in 0..3 {
            let dst = &mut data[(b * 3 + c) * plane..(b * 3 + c + 1) * plane];
            for (i, out) in dst.iter_mut().enumerate() {
                *out = T::from_f64(px[i * 3 + c] as f64 / 255.0);
            }
        }
    }
    Ok(Tensor::from_vec(data, &[n, 3, h, w])?)
}

pub fn load_png(path: &Path, w: usize, h: usize) -> Result<Vec<u8>> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?;
    let rgb = img.to_rgb8();
    ensure!(
        rgb.width() as usize == w && rgb.height() as usize == h,
        "{} is {}x{}, expected {w}x{h}",
        path.display(),
        rgb.width(),
        rgb.height()
    );
    Ok(rgb.into_raw())
}

pub fn save_png(path: &Path, pixels: &[u8], w: usize, h: usize) -> Result<()> {
    let img: image::RgbImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, pixels.to_vec())
            .context("pixel buffer does not match the canvas")?;
    img.save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Writes a generated dataset to disk: numbered PNG files plus the
/// annotation JSON that indexes them.
pub fn write_dataset(spec: &SceneSpec, count: usize, dir: &Path) -> Result<Vec<String>> {
    let scenes = gen_synthetic(spec, count)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let names: Vec<String> = (0..count).map(|i| format!("img_{i:05}.png")).collect();
    for (scene, name) in scenes.iter().zip(&names) {
        save_png(&dir.join(name), &scene.pixels, spec.canvas_w, spec.canvas_h)?;
    }
    let gt = coco::gt_from_scenes(spec, &scenes, &names);
    coco::write_gt(&gt, &dir.join(ANNOTATION_FILE))?;
    Ok(names)
}

/// Lists the PNG files in a directory in name order, with stable ids either
/// from an annotation file or from that ordering.
pub fn list_images(dir: &Path) -> Result<(Vec<(u64, PathBuf)>, Option<GtFile>)> {
    let ann_path = dir.join(ANNOTATION_FILE);
    if ann_path.exists() {
        let gt = coco::load_gt(&ann_path)?;
        let list = gt
            .images
            .iter()
            .map(|img| (img.id, dir.join(&img.file_name)))
            .collect();
        return Ok((list, Some(gt)));
    }
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("{} holds no PNG images", dir.display());
    }
    Ok((names.iter().enumerate().map(|(i, p)| (i as u64 + 1, p.clone())).collect(), None))
}
