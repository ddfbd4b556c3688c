//! Procedural toy dataset: articulated stick figures with exact parsing
//! maps, 18-joint poses and per-clip model images.
//!
//! Every body part is an axis-aligned shape that translates rigidly from
//! frame to frame, so ground-truth dense flow is recoverable from the
//! parsing maps (per-part centroid displacement).

use std::fs;
use std::path::Path;

use ndarray::{Array2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Arr;

use super::io::{save_manifest, save_parsing_png, save_png_rgb, save_pose_json};
use super::{Joint, LabelSets, Manifest, ManifestClip, PoseKeypoints, NUM_JOINTS};

pub const LABEL_HAIR: u8 = 2;
pub const LABEL_CLOTHES: u8 = 5;
pub const LABEL_PANTS: u8 = 9;
pub const LABEL_FACE: u8 = 13;
pub const LABEL_LEFT_ARM: u8 = 14;
pub const LABEL_RIGHT_ARM: u8 = 15;

#[derive(Debug, Clone)]
pub struct ToyDatasetSpec {
    pub n_clips: usize,
    pub frames_per_clip: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

type Color = [f64; 3];

#[derive(Debug, Clone)]
struct FigureStyle {
    clothes: Color,
    pants: Color,
    skin: Color,
    hair: Color,
    background: Color,
}

/// Figure pose parameters for one rendered image.
#[derive(Debug, Clone, Copy)]
struct FigurePose {
    cx: f64,
    cy: f64,
    arm_dy_left: f64,
    arm_dy_right: f64,
}

struct Canvas {
    pixels: Arr,
    labels: Array2<u8>,
}

impl Canvas {
    fn new(h: usize, w: usize, bg: Color) -> Self {
        let mut pixels = Arr::zeros(IxDyn(&[3, h, w]));
        for c in 0..3 {
            pixels.index_axis_mut(ndarray::Axis(0), c).fill(bg[c]);
        }
        Self { pixels, labels: Array2::zeros((h, w)) }
    }

    fn put(&mut self, y: usize, x: usize, color: Color, label: u8) {
        for c in 0..3 {
            self.pixels[[c, y, x]] = color[c].clamp(0.0, 1.0);
        }
        self.labels[[y, x]] = label;
    }

    fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: Color, label: u8, stripe_origin: Option<f64>) {
        let (h, w) = self.labels.dim();
        let ys = y0.max(0.0).floor() as usize;
        let ye = (y1.ceil() as usize).min(h);
        let xs = x0.max(0.0).floor() as usize;
        let xe = (x1.ceil() as usize).min(w);
        for y in ys..ye {
            for x in xs..xe {
                if (y as f64) < y0 || (y as f64) >= y1 || (x as f64) < x0 || (x as f64) >= x1 {
                    continue;
                }
                let mut col = color;
                if let Some(oy) = stripe_origin {
                    // stripes in part-local coordinates so they move with the part
                    let local = y as f64 - oy;
                    let s = 0.12 * ((local * 0.9).sin());
                    for c in col.iter_mut() {
                        *c = (*c + s).clamp(0.0, 1.0);
                    }
                }
                self.put(y, x, col, label);
            }
        }
    }

    fn fill_circle(&mut self, cx: f64, cy: f64, r: f64, color: Color, label: u8) {
        let (h, w) = self.labels.dim();
        let ys = (cy - r).max(0.0).floor() as usize;
        let ye = ((cy + r).ceil() as usize + 1).min(h);
        let xs = (cx - r).max(0.0).floor() as usize;
        let xe = ((cx + r).ceil() as usize + 1).min(w);
        for y in ys..ye {
            for x in xs..xe {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                if d2 <= r * r {
                    self.put(y, x, color, label);
                }
            }
        }
    }
}

fn render_figure(h: usize, w: usize, pose: &FigurePose, style: &FigureStyle) -> Canvas {
    let (hf, wf) = (h as f64, w as f64);
    let mut canvas = Canvas::new(h, w, style.background);
    let (cx, cy) = (pose.cx, pose.cy);

    // legs
    canvas.fill_rect(cx - 0.10 * wf, cy + 0.14 * hf, cx - 0.02 * wf, cy + 0.44 * hf, style.pants, LABEL_PANTS, None);
    canvas.fill_rect(cx + 0.02 * wf, cy + 0.14 * hf, cx + 0.10 * wf, cy + 0.44 * hf, style.pants, LABEL_PANTS, None);
    // arms (vertical swing, rigid per-part translation)
    canvas.fill_rect(
        cx - 0.22 * wf,
        cy - 0.12 * hf + pose.arm_dy_left,
        cx - 0.145 * wf,
        cy + 0.10 * hf + pose.arm_dy_left,
        style.skin,
        LABEL_LEFT_ARM,
        None,
    );
    canvas.fill_rect(
        cx + 0.145 * wf,
        cy - 0.12 * hf + pose.arm_dy_right,
        cx + 0.22 * wf,
        cy + 0.10 * hf + pose.arm_dy_right,
        style.skin,
        LABEL_RIGHT_ARM,
        None,
    );
    // torso with striped clothes
    canvas.fill_rect(cx - 0.14 * wf, cy - 0.14 * hf, cx + 0.14 * wf, cy + 0.14 * hf, style.clothes, LABEL_CLOTHES, Some(cy));
    // hair cap then face on top
    canvas.fill_circle(cx, cy - 0.26 * hf, 0.085 * hf, style.hair, LABEL_HAIR);
    canvas.fill_circle(cx, cy - 0.21 * hf, 0.07 * hf, style.skin, LABEL_FACE);
    canvas
}

fn figure_joints(h: usize, w: usize, pose: &FigurePose, ears_visible: bool) -> PoseKeypoints {
    let (hf, wf) = (h as f64, w as f64);
    let (cx, cy) = (pose.cx, pose.cy);
    let (al, ar) = (pose.arm_dy_left, pose.arm_dy_right);
    let pts: [(f64, f64, f64); NUM_JOINTS] = [
        (cx, cy - 0.21 * hf, 1.0),                       // nose
        (cx, cy - 0.14 * hf, 1.0),                       // neck
        (cx + 0.12 * wf, cy - 0.11 * hf + ar, 1.0),      // right shoulder
        (cx + 0.185 * wf, cy - 0.01 * hf + ar, 1.0),     // right elbow
        (cx + 0.185 * wf, cy + 0.09 * hf + ar, 1.0),     // right wrist
        (cx - 0.12 * wf, cy - 0.11 * hf + al, 1.0),      // left shoulder
        (cx - 0.185 * wf, cy - 0.01 * hf + al, 1.0),     // left elbow
        (cx - 0.185 * wf, cy + 0.09 * hf + al, 1.0),     // left wrist
        (cx + 0.06 * wf, cy + 0.14 * hf, 1.0),           // right hip
        (cx + 0.06 * wf, cy + 0.30 * hf, 1.0),           // right knee
        (cx + 0.06 * wf, cy + 0.43 * hf, 1.0),           // right ankle
        (cx - 0.06 * wf, cy + 0.14 * hf, 1.0),           // left hip
        (cx - 0.06 * wf, cy + 0.30 * hf, 1.0),           // left knee
        (cx - 0.06 * wf, cy + 0.43 * hf, 1.0),           // left ankle
        (cx + 0.025 * wf, cy - 0.23 * hf, 1.0),          // right eye
        (cx - 0.025 * wf, cy - 0.23 * hf, 1.0),          // left eye
        (cx + 0.06 * wf, cy - 0.21 * hf, if ears_visible { 1.0 } else { 0.0 }), // right ear
        (cx - 0.06 * wf, cy - 0.21 * hf, if ears_visible { 1.0 } else { 0.0 }), // left ear
    ];
    let joints = pts
        .iter()
        .map(|&(x, y, c)| Joint {
            x: x.clamp(0.0, wf - 1.0),
            y: y.clamp(0.0, hf - 1.0),
            c,
        })
        .collect();
    PoseKeypoints::new(joints, h, w).expect("toy joints in bounds")
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Color {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

fn clip_pose(h: usize, w: usize, t: usize, phase: f64) -> FigurePose {
    let (hf, wf) = (h as f64, w as f64);
    let period = 16.0;
    let u = 2.0 * std::f64::consts::PI * t as f64 / period + phase;
    FigurePose {
        cx: wf * (0.5 + 0.16 * u.sin()),
        cy: hf * (0.52 + 0.015 * (2.0 * u).sin()),
        arm_dy_left: 0.035 * hf * (u + 0.7).sin(),
        arm_dy_right: -0.035 * hf * (u + 0.7).sin(),
    }
}

/// Write a complete toy dataset under `out` and return its manifest.
/// Byte-identical output for identical spec.
pub fn make_toy_dataset(out: &Path, spec: &ToyDatasetSpec) -> Result<Manifest> {
    assert!(spec.n_clips > 0 && spec.frames_per_clip > 0 && spec.height > 0 && spec.width > 0);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let n_test = if spec.n_clips >= 2 { (spec.n_clips / 4).max(1) } else { 0 };
    let mut clips = Vec::new();
    for ci in 0..spec.n_clips {
        let clip_id = format!("clip{ci:03}");
        let clip_dir = out.join(&clip_id);
        for sub in ["frames", "poses", "parsing"] {
            fs::create_dir_all(clip_dir.join(sub)).map_err(|e| Error::io(&clip_dir, e))?;
        }
        let style = FigureStyle {
            clothes: random_color(&mut rng, 0.15, 0.9),
            pants: random_color(&mut rng, 0.1, 0.5),
            skin: [0.88, 0.72, 0.6],
            hair: random_color(&mut rng, 0.05, 0.35),
            background: random_color(&mut rng, 0.85, 0.97),
        };
        let model_clothes = random_color(&mut rng, 0.15, 0.9);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let ears_visible = ci % 2 == 0;

        for t in 0..spec.frames_per_clip {
            let pose = clip_pose(h, w, t, phase);
            let canvas = render_figure(h, w, &pose, &style);
            save_png_rgb(&clip_dir.join(format!("frames/{t:05}.png")), &canvas.pixels)?;
            save_parsing_png(
                &clip_dir.join(format!("parsing/{t:05}.png")),
                &super::ParsingMap::new(canvas.labels)?,
            )?;
            save_pose_json(
                &clip_dir.join(format!("poses/{t:05}.json")),
                &figure_joints(h, w, &pose, ears_visible),
            )?;
        }

        // model image: same person, distinct clothes, canonical centered pose
        let model_pose = FigurePose {
            cx: w as f64 * 0.5,
            cy: h as f64 * 0.52,
            arm_dy_left: 0.0,
            arm_dy_right: 0.0,
        };
        let model_style = FigureStyle { clothes: model_clothes, ..style.clone() };
        let canvas = render_figure(h, w, &model_pose, &model_style);
        save_png_rgb(&clip_dir.join("model.png"), &canvas.pixels)?;
        save_parsing_png(&clip_dir.join("model_parsing.png"), &super::ParsingMap::new(canvas.labels)?)?;
        save_pose_json(&clip_dir.join("model_pose.json"), &figure_joints(h, w, &model_pose, ears_visible))?;

        let split = if ci >= spec.n_clips - n_test { "test" } else { "train" };
        clips.push(ManifestClip { id: clip_id, split: split.to_string() });
    }
    let manifest = Manifest { clips, label_sets: LabelSets::default() };
    save_manifest(out, &manifest)?;
    Ok(manifest)
}
