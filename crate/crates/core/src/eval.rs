//! Quantitative evaluation: Fréchet distance between embedding statistics
//! and the cycle-transfer score, plus full-checkpoint report generation.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{pose_to_heatmaps, ParsingMap, PoseKeypoints, RegionKind};
use crate::error::{Error, Result};
use crate::memory::{refine_clip, RefineNets};
use crate::nn::ParamStore;
use crate::tensor::Arr;
use crate::train::{region_mask, stage1_generate, Dataset};
use crate::tryon::TryOnNets;

// ---- embeddings ----

/// Image -> feature-vector map used by both metrics.
pub trait Embedder: Sync {
    fn name(&self) -> &str;
    fn embed(&self, img: &Arr) -> Vec<f64>;
}

/// Deterministic desk-scale embedder: per-cell channel means over a coarse
/// grid followed by a fixed seeded random projection. No pretrained
/// weights involved.
pub struct GridProjectionEmbedder {
    grid: usize,
    proj: Array2<f64>,
    name: String,
}

impl GridProjectionEmbedder {
    pub fn new(grid: usize, out_dim: usize, seed: u64) -> Self {
        let in_dim = grid * grid * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (1.0 / in_dim as f64).sqrt();
        let proj = Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-1.0..1.0) * scale);
        Self { grid, proj, name: format!("grid{grid}-proj{out_dim}-seed{seed}") }
    }
}

impl Embedder for GridProjectionEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed(&self, img: &Arr) -> Vec<f64> {
        let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        let g = self.grid;
        let mut pooled = vec![0.0; g * g * c];
        for ci in 0..c {
            for gy in 0..g {
                for gx in 0..g {
                    let y0 = gy * h / g;
                    let y1 = ((gy + 1) * h / g).max(y0 + 1).min(h);
                    let x0 = gx * w / g;
                    let x1 = ((gx + 1) * w / g).max(x0 + 1).min(w);
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            s += img[[ci, y, x]];
                        }
                    }
                    pooled[(ci * g + gy) * g + gx] = s / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        self.proj
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(&pooled).map(|(a, b)| a * b).sum())
            .collect()
    }
}

// ---- statistics ----

/// Mean and unbiased covariance of a set of embeddings.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mu: Vec<f64>,
    pub sigma: Array2<f64>,
    pub n: usize,
}

pub fn feature_stats(embedder: &dyn Embedder, images: &[Arr]) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(Error::InsufficientSamples { need: 2, got: images.len() });
    }
    let embs: Vec<Vec<f64>> = images.iter().map(|i| embedder.embed(i)).collect();
    let d = embs[0].len();
    let n = embs.len();
    let mut mu = vec![0.0; d];
    for e in &embs {
        for (m, v) in mu.iter_mut().zip(e) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut sigma = Array2::zeros((d, d));
    for e in &embs {
        for i in 0..d {
            for j in 0..d {
                sigma[[i, j]] += (e[i] - mu[i]) * (e[j] - mu[j]);
            }
        }
    }
    sigma /= (n - 1) as f64;
    Ok(FeatureStats { mu, sigma, n })
}

fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-6 {
            return Err(Error::Numerical(format!("matrix not PSD: eigenvalue {v}")));
        }
        // clip tiny/negative eigenvalues for stability
        *v = if *v < 1e-10 { 0.0 } else { v.sqrt() };
    }
    let q = eig.eigenvectors;
    Ok(&q * DMatrix::from_diagonal(&vals) * q.transpose())
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

/// Fréchet distance ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 sqrt(Sa Sb)). The
/// matrix square root is taken on the symmetric product
/// sqrt(Sa)·Sb·sqrt(Sa), which shares its trace with sqrt(Sa·Sb).
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mu.len() != b.mu.len() {
        return Err(Error::shape("embedding dimension mismatch".to_string()));
    }
    let d2: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = to_dmatrix(&a.sigma);
    let sb = to_dmatrix(&b.sigma);
    let sa_half = sqrtm_psd(&sa)?;
    let inner = &sa_half * &sb * &sa_half;
    let inner_sqrt = sqrtm_psd(&inner)?;
    let val = d2 + sa.trace() + sb.trace() - 2.0 * inner_sqrt.trace();
    if val < -1e-6 {
        return Err(Error::Numerical(format!("negative distance {val}")));
    }
    Ok(val.max(0.0))
}

// ---- cycle transfer score ----

/// Clothes provider for one transfer direction.
pub struct TransferSource {
    pub image: Arr,
    pub pose: PoseKeypoints,
}

/// Person/frames being dressed, with the annotations masks come from.
pub struct TransferTarget {
    pub frames: Vec<Arr>,
    pub poses: Vec<PoseKeypoints>,
    pub parsings: Vec<ParsingMap>,
}

/// An invocable try-on transfer.
pub trait TryOnMethod: Sync {
    fn name(&self) -> &str;
    fn transfer(&self, source: &TransferSource, target: &TransferTarget) -> Result<Vec<Arr>>;
}

/// One (model image, target clip) evaluation pair.
pub struct CtsPair {
    pub model_image: Arr,
    pub model_pose: PoseKeypoints,
    pub model_parsing: ParsingMap,
    pub frames: Vec<Arr>,
    pub poses: Vec<PoseKeypoints>,
    pub parsings: Vec<ParsingMap>,
}

#[derive(Debug, Clone)]
pub struct CtsResult {
    pub score: f64,
    pub n_pairs: usize,
    pub skipped: usize,
    /// Alternative pixel-level cycle error (mean per-pair L1).
    pub cycle_l1: f64,
}

/// Cycle transfer score: dress the target with the model's clothes, then
/// transfer back from the generated middle frame onto the model image, and
/// measure the Fréchet distance between the original and recovered model
/// images. Lower is better; an identity method scores 0.
pub fn cts(method: &dyn TryOnMethod, embedder: &dyn Embedder, pairs: &[CtsPair]) -> Result<CtsResult> {
    if pairs.len() < 2 {
        return Err(Error::InsufficientSamples { need: 2, got: pairs.len() });
    }
    let mut originals = Vec::new();
    let mut recovered = Vec::new();
    let mut skipped = 0usize;
    let mut l1_sum = 0.0;
    for p in pairs {
        let forward = || -> Result<Arr> {
            let src = TransferSource { image: p.model_image.clone(), pose: p.model_pose.clone() };
            let tgt = TransferTarget {
                frames: p.frames.clone(),
                poses: p.poses.clone(),
                parsings: p.parsings.clone(),
            };
            let outs = method.transfer(&src, &tgt)?;
            if outs.is_empty() {
                return Err(Error::Numerical("empty transfer output".to_string()));
            }
            let mid = outs.len() / 2;
            // reverse direction: the generated middle frame supplies the
            // clothes, the model image is the target
            let rsrc = TransferSource { image: outs[mid].clone(), pose: p.poses[mid].clone() };
            let rtgt = TransferTarget {
                frames: vec![p.model_image.clone()],
                poses: vec![p.model_pose.clone()],
                parsings: vec![p.model_parsing.clone()],
            };
            let back = method.transfer(&rsrc, &rtgt)?;
            Ok(back[0].clone())
        };
        match forward() {
            Ok(m_t) => {
                l1_sum += (&m_t - &p.model_image).iter().map(|v| v.abs()).sum::<f64>()
                    / p.model_image.len() as f64;
                originals.push(p.model_image.clone());
                recovered.push(m_t);
            }
            Err(e) => {
                log::warn!("cts pair skipped: {e}");
                skipped += 1;
            }
        }
    }
    if originals.len() < 2 {
        return Err(Error::InsufficientSamples { need: 2, got: originals.len() });
    }
    let sa = feature_stats(embedder, &originals)?;
    let sb = feature_stats(embedder, &recovered)?;
    Ok(CtsResult {
        score: fid(&sa, &sb)?,
        n_pairs: originals.len(),
        skipped,
        cycle_l1: l1_sum / originals.len() as f64,
    })
}

/// The trivial method that returns its target unchanged.
pub struct IdentityMethod;

impl TryOnMethod for IdentityMethod {
    fn name(&self) -> &str {
        "identity"
    }

    fn transfer(&self, _source: &TransferSource, target: &TransferTarget) -> Result<Vec<Arr>> {
        Ok(target.frames.clone())
    }
}

// ---- full-pipeline method ----

/// Stage I (+ optional stage II refinement) wrapped as a [`TryOnMethod`].
pub struct PipelineMethod {
    pub cfg: Config,
    pub store: ParamStore,
    pub tryon: TryOnNets,
    pub refine: Option<RefineNets>,
    name: String,
}

impl PipelineMethod {
    pub fn new(cfg: Config, store: ParamStore) -> Self {
        let tryon = TryOnNets::new(&cfg.arch);
        let refine = store.contains("refine.enc0.w").then(|| RefineNets::new(&cfg.arch));
        let name = if refine.is_some() { "two-stage" } else { "stage1-only" }.to_string();
        Self { cfg, store, tryon, refine, name }
    }
}

impl TryOnMethod for PipelineMethod {
    fn name(&self) -> &str {
        &self.name
    }

    fn transfer(&self, source: &TransferSource, target: &TransferTarget) -> Result<Vec<Arr>> {
        let (h, w) = (self.cfg.arch.height, self.cfg.arch.width);
        let sigma = self.cfg.arch.pose_sigma;
        let model_hm = pose_to_heatmaps(&source.pose, h, w, sigma);
        let sets = &self.cfg.label_sets;
        let mut coarse = Vec::with_capacity(target.frames.len());
        for ((frame, pose), parsing) in target.frames.iter().zip(&target.poses).zip(&target.parsings) {
            let clothes = region_mask(parsing, RegionKind::ClothesArms, sets)?;
            let face = region_mask(parsing, RegionKind::FaceNeckHair, sets)?;
            let frame_hm = pose_to_heatmaps(pose, h, w, sigma);
            coarse.push(stage1_generate(
                &self.tryon,
                &self.store,
                &source.image,
                &model_hm,
                frame,
                &frame_hm,
                &clothes,
                &face,
            ));
        }
        match &self.refine {
            Some(r) => refine_clip(r, &self.store, &coarse),
            None => Ok(coarse),
        }
    }
}

// ---- checkpoint report ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub method: String,
    pub embedder: String,
    pub fid: f64,
    pub cts: f64,
    pub cycle_l1: f64,
    pub n_pairs: usize,
    pub skipped: usize,
}

/// Run inference over the test split, compute FID between generated and
/// real frames plus CTS, and write `report.json` / `report.csv`.
pub fn evaluate_checkpoint(
    ckpt: &Path,
    dataset: &Dataset,
    embedder: &dyn Embedder,
    cfg: &Config,
    out_dir: &Path,
) -> Result<Report> {
    let (_, store) = crate::checkpoint::load_checkpoint(ckpt, &cfg.arch)?;
    let method = PipelineMethod::new(cfg.clone(), store);
    // both metrics need at least two clips; fall back to the whole
    // dataset when the test split is smaller than that
    let test_idx = {
        let t = dataset.split_indices("test");
        if t.len() >= 2 {
            t
        } else {
            (0..dataset.clips.len()).collect()
        }
    };
    if test_idx.len() < 2 {
        return Err(Error::InsufficientSamples { need: 2, got: test_idx.len() });
    }

    let mut pairs = Vec::new();
    let mut real_frames = Vec::new();
    let mut generated = Vec::new();
    for &ci in &test_idx {
        let lc = &dataset.clips[ci];
        let pair = CtsPair {
            model_image: lc.model.pixels.clone(),
            model_pose: lc.model_pose.clone(),
            model_parsing: lc.model_parsing.clone(),
            frames: lc.clip.frames.iter().map(|f| f.pixels.clone()).collect(),
            poses: lc.clip.poses.clone(),
            parsings: lc.clip.parsing.clone(),
        };
        let src = TransferSource { image: pair.model_image.clone(), pose: pair.model_pose.clone() };
        let tgt = TransferTarget {
            frames: pair.frames.clone(),
            poses: pair.poses.clone(),
            parsings: pair.parsings.clone(),
        };
        let outs = method.transfer(&src, &tgt)?;
        real_frames.extend(pair.frames.iter().cloned());
        generated.extend(outs);
        pairs.push(pair);
    }

    let fid_value = fid(&feature_stats(embedder, &generated)?, &feature_stats(embedder, &real_frames)?)?;
    let cts_res = cts(&method, embedder, &pairs)?;
    let report = Report {
        method: method.name().to_string(),
        embedder: embedder.name().to_string(),
        fid: fid_value,
        cts: cts_res.score,
        cycle_l1: cts_res.cycle_l1,
        n_pairs: cts_res.n_pairs,
        skipped: cts_res.skipped,
    };

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json_path = out_dir.join("report.json");
    fs::write(&json_path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&json_path, e))?;
    let csv_path = out_dir.join("report.csv");
    let csv = format!(
        "method,embedder,metric,value\n{m},{e},fid,{:.6}\n{m},{e},cts,{:.6}\n{m},{e},cycle_l1,{:.6}\n",
        report.fid,
        report.cts,
        report.cycle_l1,
        m = report.method,
        e = report.embedder,
    );
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok(report)
}
