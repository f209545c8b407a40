//! COCO-style keypoint JSON: ground-truth datasets and prediction results,
//! with per-record diagnostics on malformed input.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use hrpvt_core::metrics::EvalRecord;
use hrpvt_core::pose::PoseInstance;
use serde::{Deserialize, Serialize};

use crate::synth::{Scene, SceneSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtImage {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtAnnotation {
    pub id: u64,
    pub image_id: u64,
    /// Flat `[x, y, v, ...]` triples.
    pub keypoints: Vec<f64>,
    pub num_keypoints: usize,
    pub area: f64,
    /// `[x, y, w, h]`.
    pub bbox: [f64; 4],
    /// Head segment length for head-normalized accuracy; optional because
    /// plain detection datasets do not carry it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_size: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtCategory {
    pub id: u64,
    pub name: String,
    pub keypoints: Vec<String>,
    pub skeleton: Vec<[usize; 2]>,
}

/// Ground-truth file: images, their annotations, and one keypoint category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtFile {
    pub images: Vec<GtImage>,
    pub annotations: Vec<GtAnnotation>,
    pub categories: Vec<GtCategory>,
}

/// One predicted instance in a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub image_id: u64,
    #[serde(default = "default_category")]
    pub category_id: u64,
    pub keypoints: Vec<f64>,
    pub score: f64,
}

fn default_category() -> u64 {
    1
}

/// Parses each array element individually so an error names the record.
fn parse_indexed<T: for<'de> Deserialize<'de>>(
    value: serde_json::Value,
    field: &str,
) -> Result<Vec<T>> {
    let serde_json::Value::Array(items) = value else {
        bail!("{field} is not an array");
    };
    items
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            serde_json::from_value(v).with_context(|| format!("{field}[{i}] is malformed"))
        })
        .collect()
}

fn split_triples(keypoints: &[f64], what: &str) -> Result<(Vec<[f64; 2]>, Vec<u8>)> {
    ensure!(
        !keypoints.is_empty() && keypoints.len() % 3 == 0,
        "{what}: keypoints has {} values, expected x,y,v triples",
        keypoints.len()
    );
    let n = keypoints.len() / 3;
    let mut coords = Vec::with_capacity(n);
    let mut vis = Vec::with_capacity(n);
    for i in 0..n {
        coords.push([keypoints[3 * i], keypoints[3 * i + 1]]);
        let v = keypoints[3 * i + 2];
        ensure!(
            v == 0.0 || v == 1.0 || v == 2.0,
            "{what}: keypoint {i} has visibility {v}, expected 0, 1, or 2"
        );
        vis.push(v as u8);
    }
    Ok((coords, vis))
}

fn join_triples(coords: &[[f64; 2]], vis: &[u8]) -> Vec<f64> {
    let mut out = Vec::with_capacity(coords.len() * 3);
    for (c, &v) in coords.iter().zip(vis) {
        out.extend_from_slice(&[c[0], c[1], v as f64]);
    }
    out
}

/// Loads and structurally validates a ground-truth file.
pub fn load_gt(path: &Path) -> Result<GtFile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut root: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let obj = root
        .as_object_mut()
        .with_context(|| format!("{} is not a JSON object", path.display()))?;
    let mut take = |key: &str| -> Result<serde_json::Value> {
        obj.remove(key).with_context(|| format!("{} is missing {key:?}", path.display()))
    };
    let file = GtFile {
        images: parse_indexed(take("images")?, "images")?,
        annotations: parse_indexed(take("annotations")?, "annotations")?,
        categories: parse_indexed(take("categories")?, "categories")?,
    };
    validate_gt(&file)?;
    Ok(file)
}

fn validate_gt(file: &GtFile) -> Result<()> {
    ensure!(file.categories.len() == 1, "expected exactly one category");
    let n_kp = file.categories[0].keypoints.len();
    let mut image_ids = BTreeMap::new();
    for (i, img) in file.images.iter().enumerate() {
        ensure!(
            image_ids.insert(img.id, i).is_none(),
            "images[{i}]: id {} already used",
            img.id
        );
        ensure!(img.width > 0 && img.height > 0, "images[{i}]: empty extent");
    }
    for (i, ann) in file.annotations.iter().enumerate() {
        let what = format!("annotations[{i}]");
        ensure!(
            image_ids.contains_key(&ann.image_id),
            "{what}: image_id {} has no image record",
            ann.image_id
        );
        let (_, vis) = split_triples(&ann.keypoints, &what)?;
        ensure!(
            vis.len() == n_kp,
            "{what}: {} keypoints, category defines {n_kp}",
            vis.len()
        );
        let labeled = vis.iter().filter(|&&v| v > 0).count();
        ensure!(
            ann.num_keypoints == labeled,
            "{what}: num_keypoints {} disagrees with {labeled} labeled triples",
            ann.num_keypoints
        );
        ensure!(ann.area > 0.0, "{what}: area {} is not positive", ann.area);
        ensure!(
            ann.bbox[2] >= 0.0 && ann.bbox[3] >= 0.0,
            "{what}: bbox extent is negative"
        );
    }
    Ok(())
}

/// Loads a results file (a flat array of predicted instances).
pub fn load_results(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let root: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let records: Vec<ResultRecord> = parse_indexed(root, "results")?;
    for (i, r) in records.iter().enumerate() {
        split_triples(&r.keypoints, &format!("results[{i}]"))?;
        ensure!(
            r.score.is_finite(),
            "results[{i}]: score {} is not finite",
            r.score
        );
    }
    Ok(records)
}

pub fn write_gt(file: &GtFile, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(file)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_results(records: &[ResultRecord], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(records)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Builds the ground-truth file for a generated dataset; `file_names` pairs
/// with `scenes` one to one.
pub fn gt_from_scenes(spec: &SceneSpec, scenes: &[Scene], file_names: &[String]) -> GtFile {
    let category = GtCategory {
        id: 1,
        name: "person".into(),
        keypoints: spec.skeleton.names.clone(),
        skeleton: spec.skeleton.limbs.clone(),
    };
    let images = file_names
        .iter()
        .enumerate()
        .map(|(i, name)| GtImage {
            id: i as u64 + 1,
            width: spec.canvas_w,
            height: spec.canvas_h,
            file_name: name.clone(),
        })
        .collect();
    let annotations = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| GtAnnotation {
            id: i as u64 + 1,
            image_id: i as u64 + 1,
            keypoints: join_triples(&s.pose.coords, &s.pose.visibility),
            num_keypoints: s.pose.labeled_count(),
            area: s.pose.area,
            bbox: s.bbox,
            head_size: s.pose.head_size,
        })
        .collect();
    GtFile { images, annotations, categories: vec![category] }
}

pub fn gt_pose(ann: &GtAnnotation) -> Result<PoseInstance> {
    let (coords, vis) = split_triples(&ann.keypoints, "annotation")?;
    let mut pose = PoseInstance::gt(coords, vis, ann.area);
    pose.head_size = ann.head_size;
    Ok(pose)
}

fn pred_pose(rec: &ResultRecord) -> Result<PoseInstance> {
    let (coords, _) = split_triples(&rec.keypoints, "result")?;
    Ok(PoseInstance::prediction(coords, rec.score))
}

/// Joins ground truth and predictions by image id into evaluation records,
/// one per ground-truth image (images without predictions stay in).
pub fn to_eval_records(gt: &GtFile, results: &[ResultRecord]) -> Result<Vec<EvalRecord>> {
    let mut by_image: BTreeMap<u64, EvalRecord> = BTreeMap::new();
    for img in &gt.images {
        by_image
            .entry(img.id)
            .or_insert_with(|| EvalRecord { image_id: img.id, gts: vec![], preds: vec![] });
    }
    for (i, ann) in gt.annotations.iter().enumerate() {
        let rec = by_image.get_mut(&ann.image_id).unwrap();
        rec.gts.push(gt_pose(ann).with_context(|| format!("annotations[{i}]"))?);
    }
    for (i, r) in results.iter().enumerate() {
        let Some(rec) = by_image.get_mut(&r.image_id) else {
            bail!("results[{i}]: image_id {} has no ground-truth image", r.image_id);
        };
        rec.preds.push(pred_pose(r).with_context(|| format!("results[{i}]"))?);
    }
    Ok(by_image.into_values().collect())
}
