//! Domain types, dataset ingestion and the synthetic toy dataset.
//!
//! On-disk layout per clip directory:
//! `frames/%05d.png`, `poses/%05d.json`, `parsing/%05d.png`, `model.png`,
//! `model_pose.json`, `model_parsing.png`; a top-level `manifest.json`
//! carries clip ids, the train/test split and the region label sets.

mod io;
mod toy;

pub use io::{
    load_clip, load_manifest, load_model, load_png_rgb, load_pose_json, save_png_rgb, Manifest,
    ManifestClip,
};
pub use toy::{make_toy_dataset, ToyDatasetSpec};

use ndarray::{Array2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Arr;

pub const NUM_JOINTS: usize = 18;
pub const NUM_PARSE_LABELS: usize = 20;

/// One RGB video frame, pixels in [0,1], layout [3,H,W].
#[derive(Debug, Clone)]
pub struct Frame {
    pub pixels: Arr,
    pub index: usize,
}

impl Frame {
    pub fn new(pixels: Arr, index: usize) -> Result<Self> {
        validate_image(&pixels)?;
        Ok(Self { pixels, index })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// The clothing-source image, same pixel conventions as [`Frame`].
#[derive(Debug, Clone)]
pub struct ModelImage {
    pub pixels: Arr,
}

impl ModelImage {
    pub fn new(pixels: Arr) -> Result<Self> {
        validate_image(&pixels)?;
        Ok(Self { pixels })
    }
}

fn validate_image(pixels: &Arr) -> Result<()> {
    if pixels.ndim() != 3 || pixels.shape()[0] != 3 {
        return Err(Error::shape(format!("image must be [3,H,W], got {:?}", pixels.shape())));
    }
    if pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::shape("pixel values must lie in [0,1]".to_string()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub c: f64,
}

/// 18 body joints; a missing joint is encoded with confidence 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseKeypoints {
    pub joints: Vec<Joint>,
}

impl PoseKeypoints {
    pub fn new(joints: Vec<Joint>, h: usize, w: usize) -> Result<Self> {
        if joints.len() != NUM_JOINTS {
            return Err(Error::shape(format!("expected {NUM_JOINTS} joints, got {}", joints.len())));
        }
        for (i, j) in joints.iter().enumerate() {
            if j.c > 0.0 && !(0.0 <= j.x && j.x < w as f64 && 0.0 <= j.y && j.y < h as f64) {
                return Err(Error::shape(format!(
                    "joint {i} at ({}, {}) outside {w}x{h} image",
                    j.x, j.y
                )));
            }
        }
        Ok(Self { joints })
    }

    /// Shift every confident joint by (dx, dy). Joints pushed out of bounds
    /// get confidence 0.
    pub fn translated(&self, dx: f64, dy: f64, h: usize, w: usize) -> Self {
        let joints = self
            .joints
            .iter()
            .map(|j| {
                let (x, y) = (j.x + dx, j.y + dy);
                let inside = 0.0 <= x && x < w as f64 && 0.0 <= y && y < h as f64;
                Joint { x, y, c: if inside { j.c } else { 0.0 } }
            })
            .collect();
        Self { joints }
    }
}

/// Per-pixel semantic labels in {0,..,19}, 0 = background.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsingMap {
    pub labels: Array2<u8>,
}

impl ParsingMap {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&v| v as usize >= NUM_PARSE_LABELS) {
            return Err(Error::shape(format!("parsing label {bad} out of range 0..20")));
        }
        Ok(Self { labels })
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }
}

/// 20-channel one-hot encoding of a parsing map, layout [20,H,W].
#[derive(Debug, Clone)]
pub struct RegionHeatmaps {
    pub channels: Arr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    ClothesArms,
    FaceNeckHair,
    Foreground,
    Custom(Vec<u8>),
}

/// Binary region mask [H,W] with its provenance.
#[derive(Debug, Clone)]
pub struct RegionMask {
    pub mask: Array2<f64>,
    pub kind: RegionKind,
}

/// Which parsing labels make up the replaceable regions. Defaults follow
/// LIP-style conventions: upper-clothes + both arms, and face + hair + neck.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSets {
    pub clothes_arms: Vec<u8>,
    pub face_neck_hair: Vec<u8>,
}

impl Default for LabelSets {
    fn default() -> Self {
        Self { clothes_arms: vec![5, 14, 15], face_neck_hair: vec![13, 2, 10] }
    }
}

impl LabelSets {
    pub fn labels_for(&self, kind: &RegionKind) -> Result<Vec<u8>> {
        match kind {
            RegionKind::ClothesArms => Ok(self.clothes_arms.clone()),
            RegionKind::FaceNeckHair => Ok(self.face_neck_hair.clone()),
            RegionKind::Foreground => Ok((1..NUM_PARSE_LABELS as u8).collect()),
            RegionKind::Custom(labels) => {
                if labels.is_empty() {
                    Err(Error::Config("custom region kind with empty label set".to_string()))
                } else {
                    Ok(labels.clone())
                }
            }
        }
    }
}

/// An ordered clip with aligned per-frame annotations.
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub clip_id: String,
    pub frames: Vec<Frame>,
    pub poses: Vec<PoseKeypoints>,
    pub parsing: Vec<ParsingMap>,
}

impl VideoClip {
    pub fn new(
        clip_id: String,
        frames: Vec<Frame>,
        poses: Vec<PoseKeypoints>,
        parsing: Vec<ParsingMap>,
    ) -> Result<Self> {
        if frames.is_empty() || frames.len() != poses.len() || frames.len() != parsing.len() {
            return Err(Error::Integrity {
                clip: clip_id,
                detail: format!(
                    "frames/poses/parsing counts differ: {}/{}/{}",
                    frames.len(),
                    poses.len(),
                    parsing.len()
                ),
            });
        }
        Ok(Self { clip_id, frames, poses, parsing })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// One-hot encode a parsing map into 20 binary channels.
pub fn parsing_to_heatmaps(p: &ParsingMap) -> RegionHeatmaps {
    let (h, w) = (p.height(), p.width());
    let mut channels = Arr::zeros(IxDyn(&[NUM_PARSE_LABELS, h, w]));
    for ((y, x), &label) in p.labels.indexed_iter() {
        channels[[label as usize, y, x]] = 1.0;
    }
    RegionHeatmaps { channels }
}

/// Union of the heatmap channels selected by `kind` under `sets`.
pub fn extract_region_mask(h: &RegionHeatmaps, kind: RegionKind, sets: &LabelSets) -> Result<RegionMask> {
    let labels = sets.labels_for(&kind)?;
    let (hh, ww) = (h.channels.shape()[1], h.channels.shape()[2]);
    let mut mask = Array2::<f64>::zeros((hh, ww));
    for &label in &labels {
        let ch = h
            .channels
            .index_axis(ndarray::Axis(0), label as usize)
            .into_dimensionality::<ndarray::Ix2>()
            .expect("heatmap channel is 2-d");
        ndarray::Zip::from(&mut mask).and(&ch).for_each(|m, &c| {
            if c > 0.0 {
                *m = 1.0;
            }
        });
    }
    Ok(RegionMask { mask, kind })
}

/// Rasterize pose keypoints to 18 Gaussian heatmap channels [18,H,W].
/// Peak value 1 at the joint; confidence-0 joints yield all-zero channels.
pub fn pose_to_heatmaps(k: &PoseKeypoints, h: usize, w: usize, sigma: f64) -> Arr {
    assert!(sigma > 0.0, "sigma must be positive");
    let mut out = Arr::zeros(IxDyn(&[NUM_JOINTS, h, w]));
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (ji, j) in k.joints.iter().enumerate() {
        if j.c <= 0.0 {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - j.x).powi(2) + (y as f64 - j.y).powi(2);
                out[[ji, y, x]] = (-d2 * inv).exp();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn parsing_to_heatmaps_is_one_hot() {
        let p = ParsingMap::new(arr2(&[[0u8, 5], [5, 0]])).unwrap();
        let h = parsing_to_heatmaps(&p);
        assert_eq!(h.channels[[5, 0, 1]], 1.0);
        assert_eq!(h.channels[[5, 1, 0]], 1.0);
        assert_eq!(h.channels[[0, 0, 0]], 1.0);
        assert_eq!(h.channels[[0, 1, 1]], 1.0);
        let sums = h.channels.sum_axis(ndarray::Axis(0));
        assert!(sums.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn all_zero_labels_give_background_channel() {
        let p = ParsingMap::new(Array2::zeros((3, 3))).unwrap();
        let h = parsing_to_heatmaps(&p);
        assert_eq!(h.channels.index_axis(ndarray::Axis(0), 0).sum(), 9.0);
        for c in 1..NUM_PARSE_LABELS {
            assert_eq!(h.channels.index_axis(ndarray::Axis(0), c).sum(), 0.0);
        }
    }

    #[test]
    fn region_masks_of_disjoint_sets_are_disjoint() {
        let mut labels = Array2::<u8>::zeros((4, 4));
        labels[[0, 0]] = 5;
        labels[[1, 1]] = 14;
        labels[[2, 2]] = 13;
        labels[[3, 3]] = 2;
        let h = parsing_to_heatmaps(&ParsingMap::new(labels).unwrap());
        let sets = LabelSets::default();
        let ca = extract_region_mask(&h, RegionKind::ClothesArms, &sets).unwrap();
        let fn_ = extract_region_mask(&h, RegionKind::FaceNeckHair, &sets).unwrap();
        assert_eq!(ca.mask.sum(), 2.0);
        assert_eq!(fn_.mask.sum(), 2.0);
        let overlap = (&ca.mask * &fn_.mask).sum();
        assert_eq!(overlap, 0.0);
    }

    #[test]
    fn clothes_arms_union_of_full_tiling_is_all_ones() {
        let mut labels = Array2::<u8>::zeros((2, 3));
        labels.row_mut(0).fill(5);
        labels[[1, 0]] = 14;
        labels[[1, 1]] = 15;
        labels[[1, 2]] = 5;
        let h = parsing_to_heatmaps(&ParsingMap::new(labels).unwrap());
        let m = extract_region_mask(&h, RegionKind::ClothesArms, &LabelSets::default()).unwrap();
        assert_eq!(m.mask.sum(), 6.0);
    }

    #[test]
    fn custom_empty_label_set_is_a_config_error() {
        let h = parsing_to_heatmaps(&ParsingMap::new(Array2::zeros((2, 2))).unwrap());
        let err = extract_region_mask(&h, RegionKind::Custom(vec![]), &LabelSets::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn background_only_gives_empty_clothes_mask() {
        let h = parsing_to_heatmaps(&ParsingMap::new(Array2::zeros((2, 2))).unwrap());
        let m = extract_region_mask(&h, RegionKind::ClothesArms, &LabelSets::default()).unwrap();
        assert_eq!(m.mask.sum(), 0.0);
    }

    #[test]
    fn pose_heatmap_peaks_at_joint_and_skips_missing() {
        let mut joints = vec![Joint { x: 0.0, y: 0.0, c: 0.0 }; NUM_JOINTS];
        joints[0] = Joint { x: 3.0, y: 2.0, c: 1.0 };
        joints[3] = Joint { x: 1.0, y: 1.0, c: 0.0 };
        let k = PoseKeypoints::new(joints, 5, 7).unwrap();
        let hm = pose_to_heatmaps(&k, 5, 7, 1.0);
        assert_eq!(hm[[0, 2, 3]], 1.0);
        assert!(hm.index_axis(ndarray::Axis(0), 0).iter().all(|&v| v <= 1.0));
        assert_eq!(hm.index_axis(ndarray::Axis(0), 3).sum(), 0.0);
    }

    #[test]
    fn pose_heatmaps_are_deterministic() {
        let joints = vec![Joint { x: 2.0, y: 2.0, c: 1.0 }; NUM_JOINTS];
        let k = PoseKeypoints::new(joints, 6, 6).unwrap();
        let a = pose_to_heatmaps(&k, 6, 6, 1.5);
        let b = pose_to_heatmaps(&k, 6, 6, 1.5);
        assert_eq!(a, b);
    }

    #[test]
    fn mask_extraction_is_monotone_in_label_set() {
        let mut labels = Array2::<u8>::zeros((4, 4));
        labels[[0, 0]] = 5;
        labels[[1, 1]] = 9;
        let h = parsing_to_heatmaps(&ParsingMap::new(labels).unwrap());
        let sets = LabelSets::default();
        let small = extract_region_mask(&h, RegionKind::Custom(vec![5]), &sets).unwrap();
        let big = extract_region_mask(&h, RegionKind::Custom(vec![5, 9]), &sets).unwrap();
        ndarray::Zip::from(&small.mask).and(&big.mask).for_each(|&s, &b| assert!(b >= s));
    }
}
