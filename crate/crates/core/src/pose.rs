//! The keypoint set of one person instance, shared by the coordinate head,
//! the metrics, and the data harness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One person's keypoints in crop pixel space. Coordinates are continuous
/// pixel positions (an integer value means the pixel's center). Ground truth
/// carries `area` (and optionally `head_size`) for the metrics; predictions
/// carry `confidence` for ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseInstance {
    pub coords: Vec<[f64; 2]>,
    /// Per-keypoint flag: 0 unlabeled, 1 labeled but occluded, 2 visible.
    pub visibility: Vec<u8>,
    /// Instance scale in pixels squared; 0 on predictions.
    pub area: f64,
    /// Head segment length for PCKh; ground truth only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_size: Option<f64>,
    /// Ranking score; predictions only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl PoseInstance {
    /// Ground-truth instance.
    pub fn gt(coords: Vec<[f64; 2]>, visibility: Vec<u8>, area: f64) -> Self {
        Self { coords, visibility, area, head_size: None, confidence: None }
    }

    /// Predicted instance; every keypoint is treated as labeled.
    pub fn prediction(coords: Vec<[f64; 2]>, confidence: f64) -> Self {
        let n = coords.len();
        Self {
            coords,
            visibility: vec![2; n],
            area: 0.0,
            head_size: None,
            confidence: Some(confidence),
        }
    }

    pub fn num_keypoints(&self) -> usize {
        self.coords.len()
    }

    /// Whether keypoint `i` participates in losses and OKS (flag > 0).
    pub fn is_labeled(&self, i: usize) -> bool {
        self.visibility[i] > 0
    }

    pub fn labeled_count(&self) -> usize {
        self.visibility.iter().filter(|v| **v > 0).count()
    }

    /// Structural validation against an expected keypoint count and crop.
    /// Labeled keypoints must sit inside [0, w) x [0, h).
    pub fn validate(&self, n_kp: usize, w: f64, h: f64) -> Result<()> {
        if self.coords.len() != n_kp || self.visibility.len() != n_kp {
            return Err(Error::Data(format!(
                "instance has {} coords / {} flags, expected {n_kp}",
                self.coords.len(),
                self.visibility.len()
            )));
        }
        for (i, (c, v)) in self.coords.iter().zip(&self.visibility).enumerate() {
            if *v > 2 {
                return Err(Error::Data(format!("keypoint {i}: visibility flag {v} not in 0..=2")));
            }
            let inside = c[0] >= 0.0 && c[0] < w && c[1] >= 0.0 && c[1] < h;
            if *v > 0 && !inside {
                return Err(Error::Data(format!(
                    "keypoint {i}: labeled at ({}, {}) outside {w}x{h} crop",
                    c[0], c[1]
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_accepts_in_range_and_names_offenders() {
        let ok = PoseInstance::gt(vec![[3.0, 4.0], [0.0, 0.0]], vec![2, 0], 25.0);
        assert!(ok.validate(2, 8.0, 8.0).is_ok());

        // Unlabeled keypoints may sit anywhere.
        let parked = PoseInstance::gt(vec![[3.0, 4.0], [-5.0, 99.0]], vec![2, 0], 25.0);
        assert!(parked.validate(2, 8.0, 8.0).is_ok());

        let out = PoseInstance::gt(vec![[3.0, 4.0], [8.0, 2.0]], vec![2, 1], 25.0);
        let msg = out.validate(2, 8.0, 8.0).unwrap_err().to_string();
        assert!(msg.contains("keypoint 1"), "{msg}");

        let bad_flag = PoseInstance::gt(vec![[1.0, 1.0]], vec![3], 4.0);
        assert!(bad_flag.validate(1, 8.0, 8.0).is_err());

        let short = PoseInstance::gt(vec![[1.0, 1.0]], vec![2], 4.0);
        assert!(short.validate(2, 8.0, 8.0).is_err());
    }

    #[test]
    fn labeled_count_ignores_zero_flags() {
        let p = PoseInstance::gt(
            vec![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]],
            vec![0, 1, 2],
            9.0,
        );
        assert_eq!(p.labeled_count(), 2);
        assert!(!p.is_labeled(0));
        assert!(p.is_labeled(1));
    }
}
