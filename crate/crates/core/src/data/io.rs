//! Dataset directory reading and writing.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Arr;

use super::{Frame, Joint, LabelSets, ModelImage, ParsingMap, PoseKeypoints, VideoClip};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestClip {
    pub id: String,
    pub split: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub clips: Vec<ManifestClip>,
    pub label_sets: LabelSets,
}

impl Manifest {
    pub fn clip_ids(&self, split: Option<&str>) -> Vec<String> {
        self.clips
            .iter()
            .filter(|c| split.map(|s| c.split == s).unwrap_or(true))
            .map(|c| c.id.clone())
            .collect()
    }
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

// ---- image <-> tensor ----

/// Load an 8-bit RGB PNG as [3,H,W] with values in [0,1].
pub fn load_png_rgb(path: &Path) -> Result<Arr> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Arr::zeros(IxDyn(&[3, h as usize, w as usize]));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Save a [3,H,W] image in [0,1] as an 8-bit RGB PNG.
pub fn save_png_rgb(path: &Path, pixels: &Arr) -> Result<()> {
    assert_eq!(pixels.shape()[0], 3, "expected [3,H,W]");
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (pixels[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (pixels[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (pixels[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}

pub fn load_parsing_png(path: &Path) -> Result<ParsingMap> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut labels = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        labels[[y as usize, x as usize]] = p.0[0];
    }
    ParsingMap::new(labels)
}

pub fn save_parsing_png(path: &Path, p: &ParsingMap) -> Result<()> {
    let (h, w) = (p.height(), p.width());
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([p.labels[[y, x]]]));
        }
    }
    img.save(path)?;
    Ok(())
}

pub fn load_pose_json(path: &Path, h: usize, w: usize) -> Result<PoseKeypoints> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let joints: Vec<Joint> = serde_json::from_str(&text)?;
    PoseKeypoints::new(joints, h, w)
}

pub fn save_pose_json(path: &Path, pose: &PoseKeypoints) -> Result<()> {
    let text = serde_json::to_string_pretty(&pose.joints)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---- clip loading ----

fn numbered_files(dir: &Path, ext: &str) -> Result<Vec<(usize, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|s| s.to_str()) != Some(ext) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        if let Ok(idx) = stem.parse::<usize>() {
            out.push((idx, path));
        }
    }
    out.sort_by_key(|(idx, _)| *idx);
    Ok(out)
}

/// Load one clip with aligned frames, poses and parsing maps.
pub fn load_clip(dataset_root: &Path, clip_id: &str) -> Result<VideoClip> {
    let clip_dir = dataset_root.join(clip_id);
    if !clip_dir.is_dir() {
        return Err(Error::NotFound(format!("clip '{clip_id}' under {}", dataset_root.display())));
    }
    let frame_files = numbered_files(&clip_dir.join("frames"), "png")?;
    let pose_files = numbered_files(&clip_dir.join("poses"), "json")?;
    let parse_files = numbered_files(&clip_dir.join("parsing"), "png")?;
    if frame_files.is_empty() {
        return Err(Error::Integrity { clip: clip_id.to_string(), detail: "no frames".to_string() });
    }
    if frame_files.len() != pose_files.len() || frame_files.len() != parse_files.len() {
        return Err(Error::Integrity {
            clip: clip_id.to_string(),
            detail: format!(
                "{} frames but {} poses and {} parsing maps",
                frame_files.len(),
                pose_files.len(),
                parse_files.len()
            ),
        });
    }
    let mut frames = Vec::new();
    let mut poses = Vec::new();
    let mut parsing = Vec::new();
    for (((fi, fpath), (pi, ppath)), (si, spath)) in
        frame_files.iter().zip(&pose_files).zip(&parse_files)
    {
        if fi != pi || fi != si {
            return Err(Error::Integrity {
                clip: clip_id.to_string(),
                detail: format!("misaligned indices: frame {fi}, pose {pi}, parsing {si}"),
            });
        }
        let pixels = load_png_rgb(fpath)?;
        let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
        frames.push(Frame::new(pixels, *fi)?);
        poses.push(load_pose_json(ppath, h, w)?);
        parsing.push(load_parsing_png(spath)?);
    }
    VideoClip::new(clip_id.to_string(), frames, poses, parsing)
}

/// Load a clip's model image with its pose and parsing annotations.
pub fn load_model(dataset_root: &Path, clip_id: &str) -> Result<(ModelImage, PoseKeypoints, ParsingMap)> {
    let clip_dir = dataset_root.join(clip_id);
    let pixels = load_png_rgb(&clip_dir.join("model.png"))?;
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    let pose = load_pose_json(&clip_dir.join("model_pose.json"), h, w)?;
    let parsing = load_parsing_png(&clip_dir.join("model_parsing.png"))?;
    Ok((ModelImage::new(pixels)?, pose, parsing))
}
