//! Two-stage training: paired warping/composition (stage I) and hybrid
//! paired/unpaired memory refinement (stage II), with the frame-sampling
//! schedule, CSV metrics logs and checkpointing.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::save_checkpoint;
use crate::config::{Config, TrainConfig};
use crate::data::{
    load_clip, load_manifest, load_model,
    extract_region_mask, parsing_to_heatmaps, pose_to_heatmaps, LabelSets, ModelImage, ParsingMap,
    PoseKeypoints, RegionKind, VideoClip,
};
use crate::disc::{gan_losses_tape, matching_disc_loss_tape, multiscale_adv_loss_tape, DiscNets};
use crate::error::{Error, Result};
use crate::losses::{
    bce_loss, flow_consistency_value, l1_loss, l2_loss, perceptual_loss, weighted_sum,
    CentroidFlowProvider, RandomConvExtractor,
};
use crate::memory::RefineNets;
use crate::nn::{collect_param_grads, sum_grads, Adam, AdamConfig, ParamStore};
use crate::tensor::{Arr, Tape, Var};
use crate::tryon::TryOnNets;

// ---- dataset ----

/// One clip with its model-image triple and split assignment.
pub struct LoadedClip {
    pub clip: VideoClip,
    pub model: ModelImage,
    pub model_pose: PoseKeypoints,
    pub model_parsing: ParsingMap,
    pub split: String,
}

/// An entire (toy-scale) dataset held in memory.
pub struct Dataset {
    pub clips: Vec<LoadedClip>,
    pub label_sets: LabelSets,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = load_manifest(root)?;
        let mut clips = Vec::new();
        for mc in &manifest.clips {
            let clip = load_clip(root, &mc.id)?;
            let (model, model_pose, model_parsing) = load_model(root, &mc.id)?;
            clips.push(LoadedClip { clip, model, model_pose, model_parsing, split: mc.split.clone() });
        }
        if clips.is_empty() {
            return Err(Error::NotFound(format!("no clips in manifest under {}", root.display())));
        }
        Ok(Self { clips, label_sets: manifest.label_sets })
    }

    pub fn split_indices(&self, split: &str) -> Vec<usize> {
        self.clips
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

// ---- sampling schedule ----

/// Frame indices drawn from one clip for a training step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSpec {
    pub clip_index: usize,
    pub frame_indices: Vec<usize>,
    pub paired: bool,
}

impl SampleSpec {
    pub fn validate(&self, clip_len: usize, max_skip: usize) -> Result<()> {
        if self.frame_indices.is_empty() || *self.frame_indices.last().unwrap() >= clip_len {
            return Err(Error::Config("frame indices out of clip bounds".to_string()));
        }
        for pair in self.frame_indices.windows(2) {
            let gap = pair[1] as i64 - pair[0] as i64;
            if gap < 1 || gap as usize > max_skip {
                return Err(Error::Config(format!("gap {gap} violates max_skip {max_skip}")));
            }
        }
        Ok(())
    }
}

/// Maximum allowed gap between sampled frames at a given epoch: the base
/// skip plus one increment per completed schedule period.
pub fn current_max_skip(epoch: usize, cfg: &TrainConfig) -> usize {
    cfg.skip_increment + cfg.skip_increment * (epoch / cfg.skip_epoch_period.max(1))
}

/// Draw `frames_per_sample` strictly increasing indices whose gaps are
/// uniform in [1, current_max_skip], then a uniform start offset. Returns
/// None when the clip is too short (caller picks another clip).
pub fn sample_frames(
    clip_len: usize,
    epoch: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<usize>> {
    let n = cfg.frames_per_sample;
    if clip_len < n || n == 0 {
        return None;
    }
    let max_skip = current_max_skip(epoch, cfg).min(clip_len - 1).max(1);
    let mut idx = vec![0usize; n];
    let mut pos = 0usize;
    for i in 1..n {
        let remaining = n - 1 - i; // gaps still to place after this one
        let bound = max_skip.min(clip_len - 1 - pos - remaining);
        let gap = rng.gen_range(1..=bound.max(1));
        pos += gap;
        idx[i] = pos;
    }
    let shift = rng.gen_range(0..=clip_len - 1 - pos);
    for v in &mut idx {
        *v += shift;
    }
    Some(idx)
}

// ---- shared helpers ----

fn heatmaps(pose: &PoseKeypoints, h: usize, w: usize, sigma: f64) -> Arr {
    pose_to_heatmaps(pose, h, w, sigma)
}

pub fn region_mask(parsing: &ParsingMap, kind: RegionKind, sets: &LabelSets) -> Result<Array2<f64>> {
    let hm = parsing_to_heatmaps(parsing);
    Ok(extract_region_mask(&hm, kind, sets)?.mask)
}

fn img_var(tape: &mut Tape, img: &Arr) -> Var {
    tape.constant(img.clone().insert_axis(ndarray::Axis(0)))
}

fn mask_var(tape: &mut Tape, mask: &Array2<f64>) -> Var {
    let m = mask.clone().into_dyn().insert_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
    tape.constant(m)
}

fn check_finite(values: &[f64], iter: usize) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged { iter, detail: format!("non-finite loss terms {values:?}") });
    }
    Ok(())
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(f, "{r}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn epoch_of(iter: usize, batch: usize, samples_per_epoch: usize) -> usize {
    (iter * batch) / samples_per_epoch.max(1)
}

// ---- stage I ----

#[derive(Debug, Clone, Copy)]
pub struct Stage1Row {
    pub iter: usize,
    pub l1: f64,
    pub perceptual: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub roi_bce: f64,
    pub total: f64,
}

pub struct Stage1Outcome {
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub rows: Vec<Stage1Row>,
}

struct PairSample {
    clip_index: usize,
    src: usize,
    dst: usize,
}

struct SampleResult {
    g_grads: BTreeMap<String, Arr>,
    d_grads: BTreeMap<String, Arr>,
    terms: Stage1Row,
}

#[allow(clippy::too_many_arguments)]
fn stage1_sample(
    data: &Dataset,
    nets: &TryOnNets,
    disc: &DiscNets,
    store: &ParamStore,
    extractor: &RandomConvExtractor,
    cfg: &Config,
    s: &PairSample,
) -> Result<SampleResult> {
    let lc = &data.clips[s.clip_index];
    let (h, w) = (cfg.arch.height, cfg.arch.width);
    let sigma = cfg.arch.pose_sigma;
    let frame_a = &lc.clip.frames[s.src].pixels;
    let frame_b = &lc.clip.frames[s.dst].pixels;
    let hm_a = heatmaps(&lc.clip.poses[s.src], h, w, sigma);
    let hm_b = heatmaps(&lc.clip.poses[s.dst], h, w, sigma);
    let clothes = region_mask(&lc.clip.parsing[s.dst], RegionKind::ClothesArms, &data.label_sets)?;
    let face = region_mask(&lc.clip.parsing[s.dst], RegionKind::FaceNeckHair, &data.label_sets)?;
    let gt_onehot = parsing_to_heatmaps(&lc.clip.parsing[s.dst]).channels;

    // generator step
    let mut tape = Tape::new();
    let mv = img_var(&mut tape, frame_a);
    let hma = img_var(&mut tape, &hm_a);
    let hmb = img_var(&mut tape, &hm_b);
    let bv = img_var(&mut tape, frame_b);
    let i_w = nets.warp_model_tape(&mut tape, store, mv, hma, hmb, false);
    let roi = nets.predict_roi_tape(&mut tape, store, i_w, false);
    let gt = img_var(&mut tape, &gt_onehot);
    let roi_bce = bce_loss(&mut tape, roi, gt);
    let cm = mask_var(&mut tape, &clothes);
    let fm = mask_var(&mut tape, &face);
    let (_, _, _, i_f_hat) = nets.compose_tape(&mut tape, store, i_w, bv, cm, fm, false);
    let l1_w = l1_loss(&mut tape, i_w, bv);
    let l1_f = l1_loss(&mut tape, i_f_hat, bv);
    let l1_term = tape.add(l1_w, l1_f);
    let percep = perceptual_loss(&mut tape, extractor, i_f_hat, bv);
    let d_fake = disc.vanilla.forward(&mut tape, store, i_f_hat, true);
    let ones = tape.constant(Arr::ones(tape.value(d_fake).raw_dim()));
    let adv_g = bce_loss(&mut tape, d_fake, ones);
    let wts = &cfg.weights;
    let total = weighted_sum(
        &mut tape,
        &[(adv_g, wts.lambda1), (percep, wts.lambda2), (l1_term, wts.lambda3), (roi_bce, wts.lambda4)],
    );
    let grads = tape.backward(total);
    let g_grads = collect_param_grads(&tape, &grads);
    let fake_value = tape.value(i_f_hat).clone();
    let terms_partial = (
        tape.scalar(l1_term),
        tape.scalar(percep),
        tape.scalar(adv_g),
        tape.scalar(roi_bce),
        tape.scalar(total),
    );

    // discriminator step on the detached fake
    let mut dtape = Tape::new();
    let rv = img_var(&mut dtape, frame_b);
    let fv = dtape.constant(fake_value);
    let d_real = disc.vanilla.forward(&mut dtape, store, rv, false);
    let d_fake = disc.vanilla.forward(&mut dtape, store, fv, false);
    let (d_loss, _) = gan_losses_tape(&mut dtape, d_real, d_fake);
    let dgrads = dtape.backward(d_loss);
    let d_grads = collect_param_grads(&dtape, &dgrads);
    let adv_d = dtape.scalar(d_loss);

    Ok(SampleResult {
        g_grads,
        d_grads,
        terms: Stage1Row {
            iter: 0,
            l1: terms_partial.0,
            perceptual: terms_partial.1,
            adv_g: terms_partial.2,
            adv_d,
            roi_bce: terms_partial.3,
            total: terms_partial.4,
        },
    })
}

pub fn train_stage1(data: &Dataset, cfg: &Config, out_dir: &Path) -> Result<Stage1Outcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let train_idx = data.split_indices("train");
    if train_idx.is_empty() {
        return Err(Error::NotFound("no training clips".to_string()));
    }
    let nets = TryOnNets::new(&cfg.arch);
    let disc = DiscNets::new(&cfg.arch);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    nets.init(&mut store, &mut rng);
    disc.init(&mut store, &mut rng);
    let extractor = RandomConvExtractor::new(3, cfg.train.seed ^ 0x9e37_79b9);

    let adam_cfg = AdamConfig {
        lr: cfg.train.learning_rate,
        beta1: cfg.train.adam_beta1,
        beta2: cfg.train.adam_beta2,
        eps: 1e-8,
    };
    let mut g_adam = Adam::new(adam_cfg);
    let mut d_adam = Adam::new(adam_cfg);

    let samples_per_epoch: usize = train_idx.iter().map(|&i| data.clips[i].clip.len()).sum();
    let ckpt_path = out_dir.join("stage1.ckpt.json");
    let csv_path = out_dir.join("stage1_metrics.csv");
    let mut rows = Vec::with_capacity(cfg.train.stage1_iters);
    let mut csv_rows = Vec::new();

    for iter in 1..=cfg.train.stage1_iters {
        let epoch = epoch_of(iter - 1, cfg.train.batch_stage1, samples_per_epoch);
        let max_skip = current_max_skip(epoch, &cfg.train);
        let specs: Vec<PairSample> = (0..cfg.train.batch_stage1)
            .map(|_| {
                let ci = train_idx[rng.gen_range(0..train_idx.len())];
                let len = data.clips[ci].clip.len();
                let a = rng.gen_range(0..len - 1);
                let gap = rng.gen_range(1..=max_skip.min(len - 1 - a).max(1));
                PairSample { clip_index: ci, src: a, dst: a + gap }
            })
            .collect();

        let results: Vec<Result<SampleResult>> = specs
            .par_iter()
            .map(|s| stage1_sample(data, &nets, &disc, &store, &extractor, cfg, s))
            .collect();
        let mut g_parts = Vec::new();
        let mut d_parts = Vec::new();
        let mut sum = Stage1Row { iter, l1: 0.0, perceptual: 0.0, adv_g: 0.0, adv_d: 0.0, roi_bce: 0.0, total: 0.0 };
        for r in results {
            let r = r?;
            g_parts.push(r.g_grads);
            d_parts.push(r.d_grads);
            sum.l1 += r.terms.l1;
            sum.perceptual += r.terms.perceptual;
            sum.adv_g += r.terms.adv_g;
            sum.adv_d += r.terms.adv_d;
            sum.roi_bce += r.terms.roi_bce;
            sum.total += r.terms.total;
        }
        let inv = 1.0 / cfg.train.batch_stage1 as f64;
        for v in [&mut sum.l1, &mut sum.perceptual, &mut sum.adv_g, &mut sum.adv_d, &mut sum.roi_bce, &mut sum.total] {
            *v *= inv;
        }
        check_finite(&[sum.l1, sum.perceptual, sum.adv_g, sum.adv_d, sum.roi_bce, sum.total], iter)?;

        let mut g_total = sum_grads(g_parts);
        let mut d_total = sum_grads(d_parts);
        for g in g_total.values_mut() {
            *g *= inv;
        }
        for g in d_total.values_mut() {
            *g *= inv;
        }
        g_adam.step(&mut store, &g_total);
        d_adam.step(&mut store, &d_total);

        csv_rows.push(format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            iter, sum.l1, sum.perceptual, sum.adv_g, sum.adv_d, sum.roi_bce, sum.total
        ));
        rows.push(sum);
        if cfg.train.checkpoint_every > 0 && iter % cfg.train.checkpoint_every == 0 {
            save_checkpoint(&ckpt_path, &cfg.arch, "stage1", &store)?;
        }
        log::info!("stage1 iter {iter}: l1={:.4} total={:.4}", rows.last().unwrap().l1, rows.last().unwrap().total);
    }
    save_checkpoint(&ckpt_path, &cfg.arch, "stage1", &store)?;
    write_csv(&csv_path, "iter,l1,perceptual,adv_g,adv_d,roi_bce,total", &csv_rows)?;
    Ok(Stage1Outcome { checkpoint: ckpt_path, metrics_csv: csv_path, rows })
}

// ---- stage-I inference used by stage II and eval ----

/// Run the frozen stage-I generator with ground-truth masks, returning the
/// composed frame as an array.
pub fn stage1_generate(
    nets: &TryOnNets,
    store: &ParamStore,
    model_img: &Arr,
    model_hm: &Arr,
    frame: &Arr,
    frame_hm: &Arr,
    clothes: &Array2<f64>,
    face: &Array2<f64>,
) -> Arr {
    let mut tape = Tape::new();
    let mv = img_var(&mut tape, model_img);
    let hma = img_var(&mut tape, model_hm);
    let hmb = img_var(&mut tape, frame_hm);
    let fv = img_var(&mut tape, frame);
    let i_w = nets.warp_model_tape(&mut tape, store, mv, hma, hmb, true);
    let cm = mask_var(&mut tape, clothes);
    let fm = mask_var(&mut tape, face);
    let (_, _, _, out) = nets.compose_tape(&mut tape, store, i_w, fv, cm, fm, true);
    tape.value(out).clone().remove_axis(ndarray::Axis(0))
}

// ---- stage II ----

#[derive(Debug, Clone)]
pub struct Stage2Row {
    pub iter: usize,
    pub paired: bool,
    pub l1: f64,
    pub l2: f64,
    pub perceptual: f64,
    pub flow: f64,
    pub mgan_g: f64,
    pub mgan_d: f64,
    pub match_g: f64,
    pub match_d: f64,
    pub total: f64,
}

pub struct Stage2Outcome {
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub rows: Vec<Stage2Row>,
}

struct WindowSample {
    clip_index: usize,
    indices: Vec<usize>,
    model_from: Option<usize>, // other clip supplying the model image (unpaired)
    model_frame: usize,        // same-clip frame acting as model (paired)
}

struct Stage2SampleOut {
    g_grads: BTreeMap<String, Arr>,
    d_grads: BTreeMap<String, Arr>,
    row: Stage2Row,
}

/// Average flow-consistency value over consecutive frames of the window's
/// clip; constant with respect to network parameters (the flow provider
/// reads parsing maps, not generated pixels).
fn window_flow_value(clip: &VideoClip, indices: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for &t in indices {
        if let Some(fp) = CentroidFlowProvider::flow_pair(clip, t) {
            total += flow_consistency_value(&fp);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[allow(clippy::too_many_arguments)]
fn stage2_sample(
    data: &Dataset,
    tryon: &TryOnNets,
    refine: &RefineNets,
    disc: &DiscNets,
    store: &ParamStore,
    extractor: &RandomConvExtractor,
    cfg: &Config,
    s: &WindowSample,
) -> Result<Stage2SampleOut> {
    let lc = &data.clips[s.clip_index];
    let (h, w) = (cfg.arch.height, cfg.arch.width);
    let sigma = cfg.arch.pose_sigma;
    let sets = &data.label_sets;
    let wts = &cfg.weights;

    // model image: same-clip frame (paired) or another clip's model (unpaired)
    let (model_img, model_pose): (&Arr, &PoseKeypoints) = match s.model_from {
        Some(mi) => (&data.clips[mi].model.pixels, &data.clips[mi].model_pose),
        None => (&lc.clip.frames[s.model_frame].pixels, &lc.clip.poses[s.model_frame]),
    };
    let model_hm = heatmaps(model_pose, h, w, sigma);

    // frozen stage-I outputs for the window
    let mut coarse = Vec::with_capacity(s.indices.len());
    for &t in &s.indices {
        let clothes = region_mask(&lc.clip.parsing[t], RegionKind::ClothesArms, sets)?;
        let face = region_mask(&lc.clip.parsing[t], RegionKind::FaceNeckHair, sets)?;
        let frame_hm = heatmaps(&lc.clip.poses[t], h, w, sigma);
        coarse.push(stage1_generate(
            tryon,
            store,
            model_img,
            &model_hm,
            &lc.clip.frames[t].pixels,
            &frame_hm,
            &clothes,
            &face,
        ));
    }
    let flow = window_flow_value(&lc.clip, &s.indices);
    let mid = s.indices.len() / 2;

    let mut row = Stage2Row {
        iter: 0,
        paired: s.model_from.is_none(),
        l1: 0.0,
        l2: 0.0,
        perceptual: 0.0,
        flow,
        mgan_g: 0.0,
        mgan_d: 0.0,
        match_g: 0.0,
        match_d: 0.0,
        total: 0.0,
    };

    // generator (refiner) step
    let mut tape = Tape::new();
    let frame_vars: Vec<Var> = coarse.iter().map(|f| img_var(&mut tape, f)).collect();
    let refined = refine.refine_clip_tape(&mut tape, store, &frame_vars, false);
    let refined_mid_value;
    let g_grads;
    if s.model_from.is_none() {
        // paired: pixel supervision against the real frames + multi-scale GAN
        let mut l1s = Vec::new();
        let mut l2s = Vec::new();
        for (k, &t) in s.indices.iter().enumerate() {
            let real = img_var(&mut tape, &lc.clip.frames[t].pixels);
            l1s.push(l1_loss(&mut tape, refined[k], real));
            l2s.push(l2_loss(&mut tape, refined[k], real));
        }
        let inv = 1.0 / s.indices.len() as f64;
        let l1_sum = weighted_sum(&mut tape, &l1s.iter().map(|&v| (v, inv)).collect::<Vec<_>>());
        let l2_sum = weighted_sum(&mut tape, &l2s.iter().map(|&v| (v, inv)).collect::<Vec<_>>());
        let real_mid = img_var(&mut tape, &lc.clip.frames[s.indices[mid]].pixels);
        let percep = perceptual_loss(&mut tape, extractor, refined[mid], real_mid);
        let (_, mgan_g) = multiscale_adv_loss_tape(
            disc,
            &mut tape,
            store,
            real_mid,
            refined[mid],
            cfg.arch.disc_scales,
            true,
        )?;
        let flow_c = tape.constant(ndarray::arr1(&[flow]).into_dyn());
        let total = weighted_sum(
            &mut tape,
            &[
                (l1_sum, wts.gamma1),
                (l2_sum, wts.gamma2),
                (percep, wts.gamma3),
                (flow_c, wts.gamma4),
                (mgan_g, wts.gamma5),
            ],
        );
        let grads = tape.backward(total);
        g_grads = collect_param_grads(&tape, &grads);
        row.l1 = tape.scalar(l1_sum);
        row.l2 = tape.scalar(l2_sum);
        row.perceptual = tape.scalar(percep);
        row.mgan_g = tape.scalar(mgan_g);
        row.total = tape.scalar(total);
        refined_mid_value = tape.value(refined[mid]).clone();
    } else {
        // unpaired: matching discriminator pushes the clothes correlation
        // between the refined frame and the model image toward "real"
        let t_mid = s.indices[mid];
        let clothes_mid = region_mask(&lc.clip.parsing[t_mid], RegionKind::ClothesArms, sets)?;
        let model_clothes = region_mask(
            &data.clips[s.model_from.unwrap()].model_parsing,
            RegionKind::ClothesArms,
            sets,
        )?;
        let mimg = img_var(&mut tape, model_img);
        let cmask = mask_var(&mut tape, &clothes_mid);
        let mmask = mask_var(&mut tape, &model_clothes);
        let (_, u_fake, _) =
            disc.correlation_map_tape(&mut tape, store, refined[mid], cmask, mimg, mmask, true);
        let ones = tape.constant(Arr::ones(tape.value(u_fake).raw_dim()));
        let match_g = bce_loss(&mut tape, u_fake, ones);
        let flow_c = tape.constant(ndarray::arr1(&[flow]).into_dyn());
        let total = weighted_sum(&mut tape, &[(flow_c, wts.beta1), (match_g, wts.beta2)]);
        let grads = tape.backward(total);
        g_grads = collect_param_grads(&tape, &grads);
        row.match_g = tape.scalar(match_g);
        row.total = tape.scalar(total);
        refined_mid_value = tape.value(refined[mid]).clone();
    }

    // discriminator step on the detached refined frame
    let mut dtape = Tape::new();
    let fake = dtape.constant(refined_mid_value);
    let d_grads;
    if s.model_from.is_none() {
        let real = img_var(&mut dtape, &lc.clip.frames[s.indices[mid]].pixels);
        let (d_loss, _) =
            multiscale_adv_loss_tape(disc, &mut dtape, store, real, fake, cfg.arch.disc_scales, false)?;
        let grads = dtape.backward(d_loss);
        d_grads = collect_param_grads(&dtape, &grads);
        row.mgan_d = dtape.scalar(d_loss);
    } else {
        let t_mid = s.indices[mid];
        // real map: two frames of the same real video
        let t_other = s.indices[if mid == 0 { s.indices.len() - 1 } else { 0 }];
        let ca = region_mask(&lc.clip.parsing[t_mid], RegionKind::ClothesArms, sets)?;
        let cb = region_mask(&lc.clip.parsing[t_other], RegionKind::ClothesArms, sets)?;
        let model_clothes = region_mask(
            &data.clips[s.model_from.unwrap()].model_parsing,
            RegionKind::ClothesArms,
            sets,
        )?;
        let ra = img_var(&mut dtape, &lc.clip.frames[t_mid].pixels);
        let rb = img_var(&mut dtape, &lc.clip.frames[t_other].pixels);
        let ma = mask_var(&mut dtape, &ca);
        let mb = mask_var(&mut dtape, &cb);
        let (_, u_real, _) = disc.correlation_map_tape(&mut dtape, store, ra, ma, rb, mb, false);
        let mimg = img_var(&mut dtape, model_img);
        let cmask = mask_var(&mut dtape, &ca);
        let mmask = mask_var(&mut dtape, &model_clothes);
        let (_, u_fake, _) = disc.correlation_map_tape(&mut dtape, store, fake, cmask, mimg, mmask, false);
        let (d_loss, _) = matching_disc_loss_tape(&mut dtape, u_real, u_fake);
        let grads = dtape.backward(d_loss);
        d_grads = collect_param_grads(&dtape, &grads);
        row.match_d = dtape.scalar(d_loss);
    }
    Ok(Stage2SampleOut { g_grads, d_grads, row })
}

pub fn train_stage2(data: &Dataset, cfg: &Config, stage1_ckpt: &Path, out_dir: &Path) -> Result<Stage2Outcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let train_idx = data.split_indices("train");
    if train_idx.is_empty() {
        return Err(Error::NotFound("no training clips".to_string()));
    }
    let (stage, mut store) = crate::checkpoint::load_checkpoint(stage1_ckpt, &cfg.arch)?;
    if stage != "stage1" && stage != "stage2" {
        return Err(Error::Checkpoint(format!("unexpected stage tag '{stage}'")));
    }
    let tryon = TryOnNets::new(&cfg.arch);
    let refine = RefineNets::new(&cfg.arch);
    let disc = DiscNets::new(&cfg.arch);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(1));
    if !store.contains("refine.enc0.w") {
        refine.init(&mut store, &mut rng);
    }
    let extractor = RandomConvExtractor::new(3, cfg.train.seed ^ 0x517c_c1b7);

    let adam_cfg = AdamConfig {
        lr: cfg.train.learning_rate,
        beta1: cfg.train.adam_beta1,
        beta2: cfg.train.adam_beta2,
        eps: 1e-8,
    };
    let mut g_adam = Adam::new(adam_cfg);
    let mut d_adam = Adam::new(adam_cfg);

    let unpaired_available = train_idx.len() >= 2;
    let samples_per_epoch: usize = train_idx.iter().map(|&i| data.clips[i].clip.len()).sum();
    let ckpt_path = out_dir.join("stage2.ckpt.json");
    let csv_path = out_dir.join("stage2_metrics.csv");
    let mut rows = Vec::with_capacity(cfg.train.stage2_iters);
    let mut csv_rows = Vec::new();

    for iter in 1..=cfg.train.stage2_iters {
        let epoch = epoch_of(iter - 1, cfg.train.batch_stage2, samples_per_epoch);
        let paired = !unpaired_available || iter % 2 == 1;
        let specs: Vec<WindowSample> = (0..cfg.train.batch_stage2)
            .map(|_| loop {
                let ci = train_idx[rng.gen_range(0..train_idx.len())];
                let len = data.clips[ci].clip.len();
                let Some(indices) = sample_frames(len, epoch, &cfg.train, &mut rng) else {
                    continue;
                };
                let model_from = if paired {
                    None
                } else {
                    let choices: Vec<usize> = train_idx.iter().copied().filter(|&o| o != ci).collect();
                    Some(choices[rng.gen_range(0..choices.len())])
                };
                let model_frame = rng.gen_range(0..len);
                break WindowSample { clip_index: ci, indices, model_from, model_frame };
            })
            .collect();

        let results: Vec<Result<Stage2SampleOut>> = specs
            .par_iter()
            .map(|s| stage2_sample(data, &tryon, &refine, &disc, &store, &extractor, cfg, s))
            .collect();
        let mut g_parts = Vec::new();
        let mut d_parts = Vec::new();
        let mut row = Stage2Row {
            iter,
            paired,
            l1: 0.0,
            l2: 0.0,
            perceptual: 0.0,
            flow: 0.0,
            mgan_g: 0.0,
            mgan_d: 0.0,
            match_g: 0.0,
            match_d: 0.0,
            total: 0.0,
        };
        for r in results {
            let r = r?;
            g_parts.push(r.g_grads);
            d_parts.push(r.d_grads);
            row.l1 += r.row.l1;
            row.l2 += r.row.l2;
            row.perceptual += r.row.perceptual;
            row.flow += r.row.flow;
            row.mgan_g += r.row.mgan_g;
            row.mgan_d += r.row.mgan_d;
            row.match_g += r.row.match_g;
            row.match_d += r.row.match_d;
            row.total += r.row.total;
        }
        let inv = 1.0 / cfg.train.batch_stage2 as f64;
        for v in [
            &mut row.l1,
            &mut row.l2,
            &mut row.perceptual,
            &mut row.flow,
            &mut row.mgan_g,
            &mut row.mgan_d,
            &mut row.match_g,
            &mut row.match_d,
            &mut row.total,
        ] {
            *v *= inv;
        }
        check_finite(
            &[row.l1, row.l2, row.perceptual, row.flow, row.mgan_g, row.mgan_d, row.match_g, row.match_d, row.total],
            iter,
        )?;

        let mut g_total = sum_grads(g_parts);
        let mut d_total = sum_grads(d_parts);
        for g in g_total.values_mut() {
            *g *= inv;
        }
        for g in d_total.values_mut() {
            *g *= inv;
        }
        // stage-I parameters stay frozen: only refiner/discriminator names
        g_total.retain(|k, _| k.starts_with("refine."));
        d_total.retain(|k, _| k.starts_with("disc."));
        g_adam.step(&mut store, &g_total);
        d_adam.step(&mut store, &d_total);

        csv_rows.push(format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            iter,
            if paired { "paired" } else { "unpaired" },
            row.l1,
            row.l2,
            row.perceptual,
            row.flow,
            row.mgan_g,
            row.mgan_d,
            row.match_g,
            row.match_d,
            row.total
        ));
        rows.push(row);
        if cfg.train.checkpoint_every > 0 && iter % cfg.train.checkpoint_every == 0 {
            save_checkpoint(&ckpt_path, &cfg.arch, "stage2", &store)?;
        }
        log::info!("stage2 iter {iter}: total={:.4}", rows.last().unwrap().total);
    }
    save_checkpoint(&ckpt_path, &cfg.arch, "stage2", &store)?;
    write_csv(
        &csv_path,
        "iter,mode,l1,l2,perceptual,flow,mgan_g,mgan_d,match_g,match_d,total",
        &csv_rows,
    )?;
    Ok(Stage2Outcome { checkpoint: ckpt_path, metrics_csv: csv_path, rows })
}
