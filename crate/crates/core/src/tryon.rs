//! Stage I: multi-scale appearance/pose encoding, pose-driven flow +
//! visibility warping of the model image, RoI prediction, and the
//! region-replacing composition with the shared fitting network.

use ndarray::{Array2, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::config::ArchConfig;
use crate::data::{LabelSets, RegionKind, NUM_PARSE_LABELS};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::tensor::{Arr, Tape, Var};

/// Feature pyramid; level k has spatial size (H/2^k, W/2^k).
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    pub levels: Vec<Arr>,
}

impl MultiScaleFeatures {
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() < 2 {
            return Err(Error::shape("feature pyramid needs >= 2 levels".to_string()));
        }
        for (l, pair) in self.levels.windows(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            if b.shape()[1] != a.shape()[1] / 2 || b.shape()[2] != a.shape()[2] / 2 {
                return Err(Error::shape(format!("level {} does not halve spatially", l + 1)));
            }
        }
        Ok(())
    }
}

/// 2-channel pixel-displacement map (dx, dy).
#[derive(Debug, Clone)]
pub struct FlowField {
    pub flow: Arr,
}

impl FlowField {
    pub fn validate(&self) -> Result<()> {
        let s = self.flow.shape();
        if self.flow.ndim() != 3 || s[0] != 2 {
            return Err(Error::shape(format!("flow must be [2,H,W], got {s:?}")));
        }
        let bound = s[1].max(s[2]) as f64;
        if self.flow.iter().any(|v| !v.is_finite() || v.abs() > bound) {
            return Err(Error::Numerical(format!("flow exceeds magnitude bound {bound}")));
        }
        Ok(())
    }
}

/// Single-channel blend weights in [0,1].
#[derive(Debug, Clone)]
pub struct VisibilityMap {
    pub vis: Arr,
}

impl VisibilityMap {
    pub fn validate(&self) -> Result<()> {
        if self.vis.ndim() != 3 || self.vis.shape()[0] != 1 {
            return Err(Error::shape("visibility must be [1,H,W]".to_string()));
        }
        if self.vis.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Numerical("visibility outside [0,1]".to_string()));
        }
        Ok(())
    }
}

/// All stage-I sub-networks; parameters live in a [`ParamStore`] keyed by
/// stable names with the `tryon.` prefix.
#[derive(Debug, Clone)]
pub struct TryOnNets {
    pub arch: ArchConfig,
    app_convs: Vec<Conv2d>,
    pose_convs: Vec<Conv2d>,
    flow_trunk: Vec<Conv2d>,
    flow_heads: Vec<Conv2d>,
    dec_convs: Vec<Conv2d>,
    dec_out: Conv2d,
    roi_convs: Vec<Conv2d>,
    roi_out: Conv2d,
    fit_enc0: Conv2d,
    fit_enc1: Conv2d,
    fit_dec: Conv2d,
    fit_out: Conv2d,
}

impl TryOnNets {
    pub fn new(arch: &ArchConfig) -> Self {
        let lv = arch.levels;
        let ch = |l: usize| arch.level_channels(l);
        let pyramid = |prefix: &str, cin0: usize| -> Vec<Conv2d> {
            (0..lv)
                .map(|l| {
                    let cin = if l == 0 { cin0 } else { ch(l - 1) };
                    let stride = if l == 0 { 1 } else { 2 };
                    Conv2d::new(format!("tryon.{prefix}{l}"), cin, ch(l), 3, stride, true)
                })
                .collect()
        };
        let flow_heads = (0..lv)
            .map(|l| Conv2d::new(format!("tryon.flow_head{l}"), ch(l), 3, 3, 1, true))
            .collect();
        // decoder runs coarse-to-fine; each step consumes the upsampled
        // previous output concatenated with that level's warped features
        let mut dec_convs = Vec::new();
        for l in (0..lv).rev() {
            let cin = if l == lv - 1 { ch(l) } else { ch(l + 1) + ch(l) };
            dec_convs.push(Conv2d::new(format!("tryon.dec{l}"), cin, ch(l), 3, 1, true));
        }
        Self {
            arch: arch.clone(),
            app_convs: pyramid("app", 3),
            pose_convs: pyramid("pose", 18),
            flow_trunk: pyramid("flow_trunk", 36),
            flow_heads,
            dec_convs,
            dec_out: Conv2d::new("tryon.dec_out", ch(0), 3, 3, 1, true),
            roi_convs: vec![
                Conv2d::new("tryon.roi0", 3, ch(0), 3, 1, true),
                Conv2d::new("tryon.roi1", ch(0), ch(0), 3, 1, true),
            ],
            roi_out: Conv2d::new("tryon.roi_out", ch(0), NUM_PARSE_LABELS, 3, 1, true),
            fit_enc0: Conv2d::new("tryon.fit_enc0", 6, ch(0), 3, 1, true),
            fit_enc1: Conv2d::new("tryon.fit_enc1", ch(0), ch(1), 3, 2, true),
            fit_dec: Conv2d::new("tryon.fit_dec", ch(1) + ch(0), ch(0), 3, 1, true),
            fit_out: Conv2d::new("tryon.fit_out", ch(0), 3, 3, 1, true),
        }
    }

    fn all_convs(&self) -> Vec<&Conv2d> {
        let mut v: Vec<&Conv2d> = Vec::new();
        v.extend(self.app_convs.iter());
        v.extend(self.pose_convs.iter());
        v.extend(self.flow_trunk.iter());
        v.extend(self.flow_heads.iter());
        v.extend(self.dec_convs.iter());
        v.push(&self.dec_out);
        v.extend(self.roi_convs.iter());
        v.push(&self.roi_out);
        v.extend([&self.fit_enc0, &self.fit_enc1, &self.fit_dec, &self.fit_out]);
        v
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for c in self.all_convs() {
            c.init(store, rng);
        }
    }

    fn pyramid_tape(
        &self,
        convs: &[Conv2d],
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        frozen: bool,
    ) -> Vec<Var> {
        let mut out = Vec::with_capacity(convs.len());
        let mut cur = x;
        for conv in convs {
            let h = conv.forward(tape, store, cur, frozen);
            cur = tape.leaky_relu(h, 0.2);
            out.push(cur);
        }
        out
    }

    pub fn encode_appearance_tape(&self, tape: &mut Tape, store: &ParamStore, img: Var, frozen: bool) -> Vec<Var> {
        self.pyramid_tape(&self.app_convs, tape, store, img, frozen)
    }

    pub fn encode_pose_tape(&self, tape: &mut Tape, store: &ParamStore, hm: Var, frozen: bool) -> Vec<Var> {
        self.pyramid_tape(&self.pose_convs, tape, store, hm, frozen)
    }

    /// Predict per-level (flow, visibility) from the source/target pose
    /// heatmap pair. Flow is tanh-bounded to half the level's larger side;
    /// visibility is sigmoid-squashed.
    pub fn estimate_flow_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pose_src: Var,
        pose_dst: Var,
        frozen: bool,
    ) -> Vec<(Var, Var)> {
        let x = tape.concat(1, &[pose_src, pose_dst]);
        let trunk = self.pyramid_tape(&self.flow_trunk, tape, store, x, frozen);
        trunk
            .iter()
            .zip(&self.flow_heads)
            .map(|(&feat, head)| {
                let h = head.forward(tape, store, feat, frozen);
                let raw_flow = tape.slice_axis(h, 1, 0, 2);
                let raw_vis = tape.slice_axis(h, 1, 2, 1);
                let s = tape.value(h).shape().to_vec();
                let scale = 0.5 * s[2].max(s[3]) as f64;
                let t = tape.tanh(raw_flow);
                let flow = tape.scale(t, scale);
                let vis = tape.sigmoid(raw_vis);
                (flow, vis)
            })
            .collect()
    }

    /// Warp each appearance level by its flow and blend with visibility:
    /// vis * warped + (1 - vis) * original.
    pub fn warp_features_tape(&self, tape: &mut Tape, feats: &[Var], flows_vis: &[(Var, Var)]) -> Vec<Var> {
        assert_eq!(feats.len(), flows_vis.len());
        feats
            .iter()
            .zip(flows_vis)
            .map(|(&f, &(flow, vis))| {
                let warped = tape.warp(f, flow);
                let c = tape.value(f).shape()[1];
                let visc = tape.broadcast_channel(vis, c);
                let a = tape.mul(visc, warped);
                let nv = tape.neg(visc);
                let inv = tape.add_scalar(nv, 1.0);
                let b = tape.mul(inv, f);
                tape.add(a, b)
            })
            .collect()
    }

    /// Decode warped features coarse-to-fine into an RGB frame in [0,1].
    pub fn decode_warped_tape(&self, tape: &mut Tape, store: &ParamStore, warped: &[Var], frozen: bool) -> Var {
        let lv = self.arch.levels;
        assert_eq!(warped.len(), lv);
        let mut x = {
            let h = self.dec_convs[0].forward(tape, store, warped[lv - 1], frozen);
            tape.leaky_relu(h, 0.2)
        };
        for (i, l) in (0..lv - 1).rev().enumerate() {
            let up = tape.upsample_nearest2(x);
            let cat = tape.concat(1, &[up, warped[l]]);
            let h = self.dec_convs[i + 1].forward(tape, store, cat, frozen);
            x = tape.leaky_relu(h, 0.2);
        }
        let o = self.dec_out.forward(tape, store, x, frozen);
        tape.sigmoid(o)
    }

    /// Per-pixel label distribution over the parse classes (softmax across
    /// channels, so every pixel sums to 1).
    pub fn predict_roi_tape(&self, tape: &mut Tape, store: &ParamStore, img: Var, frozen: bool) -> Var {
        let mut x = img;
        for conv in &self.roi_convs {
            let h = conv.forward(tape, store, x, frozen);
            x = tape.leaky_relu(h, 0.2);
        }
        let logits = self.roi_out.forward(tape, store, x, frozen);
        channel_softmax(tape, logits)
    }

    /// The shared fitting network: fuses a 6-channel region composite into
    /// one RGB image in [0,1]. One set of weights serves both the clothes
    /// and the face composites.
    pub fn fit_regions_tape(&self, tape: &mut Tape, store: &ParamStore, composite: Var, frozen: bool) -> Var {
        let e0 = self.fit_enc0.forward(tape, store, composite, frozen);
        let e0 = tape.leaky_relu(e0, 0.2);
        let e1 = self.fit_enc1.forward(tape, store, e0, frozen);
        let e1 = tape.leaky_relu(e1, 0.2);
        let up = tape.upsample_nearest2(e1);
        let cat = tape.concat(1, &[up, e0]);
        let d = self.fit_dec.forward(tape, store, cat, frozen);
        let d = tape.leaky_relu(d, 0.2);
        let o = self.fit_out.forward(tape, store, d, frozen);
        // the pasted composite (sum of the two exclusive halves) is already
        // a strong guess; predict a bounded residual on top of it
        let kept = tape.slice_axis(composite, 1, 0, 3);
        let rest = tape.slice_axis(composite, 1, 3, 3);
        let pasted = tape.add(kept, rest);
        let t = tape.tanh(o);
        let delta = tape.scale(t, 0.5);
        let sum = tape.add(pasted, delta);
        tape.clamp(sum, 0.0, 1.0)
    }

    /// Warped image I_W from model appearance + pose pair, on one tape.
    pub fn warp_model_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        model_img: Var,
        model_hm: Var,
        frame_hm: Var,
        frozen: bool,
    ) -> Var {
        let feats = self.encode_appearance_tape(tape, store, model_img, frozen);
        let flows = self.estimate_flow_tape(tape, store, model_hm, frame_hm, frozen);
        let warped = self.warp_features_tape(tape, &feats, &flows);
        self.decode_warped_tape(tape, store, &warped, frozen)
    }

    /// Clothes replacement then face restoration, given binary masks as
    /// [1,1,H,W] vars. Returns (clothes composite, intermediate, face
    /// composite, final frame).
    pub fn compose_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        i_w: Var,
        frame: Var,
        clothes_mask: Var,
        face_mask: Var,
        frozen: bool,
    ) -> (Var, Var, Var, Var) {
        let comp_c = region_compose_tape(tape, i_w, frame, clothes_mask);
        let i_hat = self.fit_regions_tape(tape, store, comp_c, frozen);
        let comp_f = region_compose_tape(tape, frame, i_hat, face_mask);
        let i_f_hat = self.fit_regions_tape(tape, store, comp_f, frozen);
        (comp_c, i_hat, comp_f, i_f_hat)
    }
}

/// Softmax across the channel axis of a [B,C,H,W] map.
pub fn channel_softmax(tape: &mut Tape, x: Var) -> Var {
    let s = tape.value(x).shape().to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut rows = Vec::with_capacity(b);
    for bi in 0..b {
        let item = tape.slice_axis(x, 0, bi, 1);
        let flat = tape.reshape(item, &[c, h * w]);
        let t = tape.transpose2(flat);
        let sm = tape.softmax_rows(t);
        let back = tape.transpose2(sm);
        rows.push(tape.reshape(back, &[1, c, h, w]));
    }
    if rows.len() == 1 {
        rows[0]
    } else {
        tape.concat(0, &rows)
    }
}

/// Exact region composition: channels 0-2 hold the content where the mask
/// is set, channels 3-5 hold the base elsewhere. Pure selection — no
/// arithmetic on the kept pixels, so values carry over bit-for-bit.
pub fn region_compose(content: &Arr, base: &Arr, mask: &Array2<f64>) -> Result<Arr> {
    let s = content.shape();
    if content.ndim() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("content must be [3,H,W], got {s:?}")));
    }
    if base.shape() != s {
        return Err(Error::shape("content/base shape mismatch".to_string()));
    }
    let (h, w) = (s[1], s[2]);
    if mask.dim() != (h, w) {
        return Err(Error::shape("mask shape mismatch".to_string()));
    }
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Config("region mask must be binary".to_string()));
    }
    let mut out = Arr::zeros(IxDyn(&[6, h, w]));
    for y in 0..h {
        for x in 0..w {
            let on = mask[[y, x]] == 1.0;
            for c in 0..3 {
                if on {
                    out[[c, y, x]] = content[[c, y, x]];
                } else {
                    out[[3 + c, y, x]] = base[[c, y, x]];
                }
            }
        }
    }
    Ok(out)
}

/// Differentiable composition for training graphs; inputs are [1,3,H,W]
/// images and a [1,1,H,W] binary mask.
pub fn region_compose_tape(tape: &mut Tape, content: Var, base: Var, mask: Var) -> Var {
    let m3 = tape.broadcast_channel(mask, 3);
    let kept = tape.mul(m3, content);
    let nm = tape.neg(m3);
    let inv = tape.add_scalar(nm, 1.0);
    let rest = tape.mul(inv, base);
    tape.concat(1, &[kept, rest])
}

// ---- array-level wrappers (inference API) ----

fn batched(tape: &mut Tape, a: &Arr) -> Var {
    tape.constant(a.clone().insert_axis(ndarray::Axis(0)))
}

fn debatch(a: &Arr) -> Arr {
    a.clone().remove_axis(ndarray::Axis(0))
}

fn check_res(arch: &ArchConfig, a: &Arr, what: &str) -> Result<()> {
    let s = a.shape();
    if a.ndim() != 3 || s[1] != arch.height || s[2] != arch.width {
        return Err(Error::shape(format!(
            "{what}: expected [C,{},{}], got {s:?}",
            arch.height, arch.width
        )));
    }
    Ok(())
}

pub fn encode_appearance(nets: &TryOnNets, store: &ParamStore, img: &Arr) -> Result<MultiScaleFeatures> {
    check_res(&nets.arch, img, "appearance input")?;
    let mut tape = Tape::new();
    let x = batched(&mut tape, img);
    let levels = nets.encode_appearance_tape(&mut tape, store, x, true);
    let out = MultiScaleFeatures { levels: levels.iter().map(|&v| debatch(tape.value(v))).collect() };
    out.validate()?;
    Ok(out)
}

pub fn encode_pose(nets: &TryOnNets, store: &ParamStore, hm: &Arr) -> Result<MultiScaleFeatures> {
    check_res(&nets.arch, hm, "pose heatmaps")?;
    let mut tape = Tape::new();
    let x = batched(&mut tape, hm);
    let levels = nets.encode_pose_tape(&mut tape, store, x, true);
    let out = MultiScaleFeatures { levels: levels.iter().map(|&v| debatch(tape.value(v))).collect() };
    out.validate()?;
    Ok(out)
}

pub fn estimate_flow(
    nets: &TryOnNets,
    store: &ParamStore,
    pose_src: &Arr,
    pose_dst: &Arr,
) -> Result<Vec<(FlowField, VisibilityMap)>> {
    check_res(&nets.arch, pose_src, "source pose heatmaps")?;
    check_res(&nets.arch, pose_dst, "target pose heatmaps")?;
    let mut tape = Tape::new();
    let s = batched(&mut tape, pose_src);
    let d = batched(&mut tape, pose_dst);
    let fv = nets.estimate_flow_tape(&mut tape, store, s, d, true);
    fv.into_iter()
        .map(|(f, v)| {
            let flow = FlowField { flow: debatch(tape.value(f)) };
            let vis = VisibilityMap { vis: debatch(tape.value(v)) };
            flow.validate()?;
            vis.validate()?;
            Ok((flow, vis))
        })
        .collect()
}

pub fn warp(
    feats: &MultiScaleFeatures,
    flows: &[(FlowField, VisibilityMap)],
) -> Result<MultiScaleFeatures> {
    if feats.levels.len() != flows.len() {
        return Err(Error::shape("level count mismatch between features and flows".to_string()));
    }
    for (f, (fl, vi)) in feats.levels.iter().zip(flows) {
        let (h, w) = (f.shape()[1], f.shape()[2]);
        if fl.flow.shape()[1..] != [h, w] || vi.vis.shape()[1..] != [h, w] {
            return Err(Error::shape("flow/visibility spatial mismatch".to_string()));
        }
    }
    let mut tape = Tape::new();
    let mut out = Vec::new();
    for (f, (fl, vi)) in feats.levels.iter().zip(flows) {
        let fv = batched(&mut tape, f);
        let flv = batched(&mut tape, &fl.flow);
        let viv = batched(&mut tape, &vi.vis);
        let warped = tape.warp(fv, flv);
        let c = f.shape()[0];
        let visc = tape.broadcast_channel(viv, c);
        let a = tape.mul(visc, warped);
        let nv = tape.neg(visc);
        let inv = tape.add_scalar(nv, 1.0);
        let b = tape.mul(inv, fv);
        let blended = tape.add(a, b);
        out.push(debatch(tape.value(blended)));
    }
    Ok(MultiScaleFeatures { levels: out })
}

pub fn decode_warped(nets: &TryOnNets, store: &ParamStore, warped: &MultiScaleFeatures) -> Result<Arr> {
    warped.validate()?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = warped.levels.iter().map(|f| batched(&mut tape, f)).collect();
    let out = nets.decode_warped_tape(&mut tape, store, &vars, true);
    Ok(debatch(tape.value(out)))
}

pub fn predict_roi(nets: &TryOnNets, store: &ParamStore, img: &Arr) -> Result<Arr> {
    check_res(&nets.arch, img, "roi input")?;
    let mut tape = Tape::new();
    let x = batched(&mut tape, img);
    let out = nets.predict_roi_tape(&mut tape, store, x, true);
    Ok(debatch(tape.value(out)))
}

pub fn fit_regions(nets: &TryOnNets, store: &ParamStore, composite: &Arr) -> Result<Arr> {
    let s = composite.shape();
    if composite.ndim() != 3 || s[0] != 6 {
        return Err(Error::shape(format!("composite must be [6,H,W], got {s:?}")));
    }
    let mut tape = Tape::new();
    let x = batched(&mut tape, composite);
    let out = nets.fit_regions_tape(&mut tape, store, x, true);
    Ok(debatch(tape.value(out)))
}

/// Binarize the soft RoI map into a region mask by per-pixel argmax and
/// label-set membership.
pub fn roi_to_mask(roi: &Arr, kind: &RegionKind, sets: &LabelSets) -> Result<Array2<f64>> {
    let labels = sets.labels_for(kind)?;
    let (c, h, w) = (roi.shape()[0], roi.shape()[1], roi.shape()[2]);
    let mut mask = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            for ci in 1..c {
                if roi[[ci, y, x]] > roi[[best, y, x]] {
                    best = ci;
                }
            }
            if labels.contains(&(best as u8)) {
                mask[[y, x]] = 1.0;
            }
        }
    }
    Ok(mask)
}

/// Intermediate and final products of one stage-I inference call.
#[derive(Debug, Clone)]
pub struct TryOnResult {
    /// I_W: the model image warped into the frame pose.
    pub warped: Arr,
    /// Clothes/arms mask derived from the predicted RoI of I_W.
    pub clothes_mask: Array2<f64>,
    /// Final composed frame.
    pub output: Arr,
}

/// Full stage-I pipeline for one frame. The clothes mask comes from the
/// predicted RoI of the warped image; the face mask comes from the input
/// frame's parsing and is supplied by the caller.
pub fn tryon_frame(
    nets: &TryOnNets,
    store: &ParamStore,
    model_img: &Arr,
    model_hm: &Arr,
    frame: &Arr,
    frame_hm: &Arr,
    face_mask: &Array2<f64>,
    sets: &LabelSets,
) -> Result<TryOnResult> {
    check_res(&nets.arch, model_img, "model image")?;
    check_res(&nets.arch, frame, "frame")?;
    check_res(&nets.arch, model_hm, "model pose heatmaps")?;
    check_res(&nets.arch, frame_hm, "frame pose heatmaps")?;
    let mut tape = Tape::new();
    let mv = batched(&mut tape, model_img);
    let mh = batched(&mut tape, model_hm);
    let fv = batched(&mut tape, frame);
    let fh = batched(&mut tape, frame_hm);
    let i_w = nets.warp_model_tape(&mut tape, store, mv, mh, fh, true);
    let roi = nets.predict_roi_tape(&mut tape, store, i_w, true);
    let roi_arr = debatch(tape.value(roi));
    let clothes_mask = roi_to_mask(&roi_arr, &RegionKind::ClothesArms, sets)?;
    let cm = {
        let m = clothes_mask.clone().into_dyn().insert_axis(ndarray::Axis(0));
        tape.constant(m.insert_axis(ndarray::Axis(0)))
    };
    let fm = {
        let m = face_mask.clone().into_dyn().insert_axis(ndarray::Axis(0));
        tape.constant(m.insert_axis(ndarray::Axis(0)))
    };
    let (_, _, _, final_v) = nets.compose_tape(&mut tape, store, i_w, fv, cm, fm, true);
    Ok(TryOnResult {
        warped: debatch(tape.value(i_w)),
        clothes_mask,
        output: debatch(tape.value(final_v)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_arch() -> ArchConfig {
        ArchConfig { height: 16, width: 12, base_channels: 4, kv_value_channels: 8, ..ArchConfig::default() }
    }

    fn setup() -> (TryOnNets, ParamStore) {
        let arch = small_arch();
        let nets = TryOnNets::new(&arch);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        nets.init(&mut store, &mut rng);
        (nets, store)
    }

    fn rand_img(c: usize, h: usize, w: usize, seed: u64) -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arr::from_shape_fn(IxDyn(&[c, h, w]), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn encoders_halve_spatially_and_are_deterministic() {
        let (nets, store) = setup();
        let img = rand_img(3, 16, 12, 1);
        let f = encode_appearance(&nets, &store, &img).unwrap();
        assert_eq!(f.levels.len(), 3);
        assert_eq!(&f.levels[0].shape()[1..], &[16, 12]);
        assert_eq!(&f.levels[1].shape()[1..], &[8, 6]);
        assert_eq!(&f.levels[2].shape()[1..], &[4, 3]);
        let f2 = encode_appearance(&nets, &store, &img).unwrap();
        for (a, b) in f.levels.iter().zip(&f2.levels) {
            assert_eq!(a, b);
        }
        let hm = Arr::zeros(IxDyn(&[18, 16, 12]));
        let p = encode_pose(&nets, &store, &hm).unwrap();
        assert!(p.levels.iter().all(|l| l.iter().all(|v| v.is_finite())));
        assert!(encode_appearance(&nets, &store, &rand_img(3, 8, 8, 2)).is_err());
    }

    #[test]
    fn batched_encoding_equals_per_item_calls() {
        let (nets, store) = setup();
        let a = rand_img(3, 16, 12, 3);
        let b = rand_img(3, 16, 12, 4);
        let mut tape = Tape::new();
        let mut batch = Arr::zeros(IxDyn(&[2, 3, 16, 12]));
        batch.index_axis_mut(ndarray::Axis(0), 0).assign(&a);
        batch.index_axis_mut(ndarray::Axis(0), 1).assign(&b);
        let bv = tape.constant(batch);
        let levels = nets.encode_appearance_tape(&mut tape, &store, bv, true);
        let fa = encode_appearance(&nets, &store, &a).unwrap();
        let fb = encode_appearance(&nets, &store, &b).unwrap();
        for (l, &v) in levels.iter().enumerate() {
            let val = tape.value(v);
            let d0 = (&val.index_axis(ndarray::Axis(0), 0).to_owned() - &fa.levels[l])
                .iter()
                .fold(0.0f64, |m, d| m.max(d.abs()));
            let d1 = (&val.index_axis(ndarray::Axis(0), 1).to_owned() - &fb.levels[l])
                .iter()
                .fold(0.0f64, |m, d| m.max(d.abs()));
            assert!(d0 < 1e-12 && d1 < 1e-12);
        }
    }

    #[test]
    fn flow_and_visibility_respect_bounds() {
        let (nets, store) = setup();
        let src = rand_img(18, 16, 12, 5);
        let dst = rand_img(18, 16, 12, 6);
        let fv = estimate_flow(&nets, &store, &src, &dst).unwrap();
        assert_eq!(fv.len(), 3);
        for (l, (flow, vis)) in fv.iter().enumerate() {
            flow.validate().unwrap();
            vis.validate().unwrap();
            assert_eq!(flow.flow.shape()[1], 16 >> l);
        }
    }

    #[test]
    fn warp_identity_and_blend_degenerates() {
        let feats = MultiScaleFeatures { levels: vec![rand_img(2, 8, 8, 7), rand_img(3, 4, 4, 8)] };
        let unit = |h: usize, w: usize| {
            (
                FlowField { flow: Arr::zeros(IxDyn(&[2, h, w])) },
                VisibilityMap { vis: Arr::ones(IxDyn(&[1, h, w])) },
            )
        };
        let flows = vec![unit(8, 8), unit(4, 4)];
        let out = warp(&feats, &flows).unwrap();
        for (a, b) in out.levels.iter().zip(&feats.levels) {
            let d = (a - b).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(d < 1e-12);
        }
        // vis = 0 ignores the (nonzero) flow entirely
        let zero_vis = vec![
            (
                FlowField { flow: Arr::from_elem(IxDyn(&[2, 8, 8]), 3.0) },
                VisibilityMap { vis: Arr::zeros(IxDyn(&[1, 8, 8])) },
            ),
            (
                FlowField { flow: Arr::from_elem(IxDyn(&[2, 4, 4]), 2.0) },
                VisibilityMap { vis: Arr::zeros(IxDyn(&[1, 4, 4])) },
            ),
        ];
        let out = warp(&feats, &zero_vis).unwrap();
        for (a, b) in out.levels.iter().zip(&feats.levels) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn warp_integer_flow_matches_column_shift() {
        let f = rand_img(1, 5, 6, 9);
        let mut flow = Arr::zeros(IxDyn(&[2, 5, 6]));
        flow.index_axis_mut(ndarray::Axis(0), 0).fill(2.0); // dx = 2
        let feats = MultiScaleFeatures { levels: vec![f.clone(), rand_img(1, 2, 3, 10)] };
        let flows = vec![
            (FlowField { flow }, VisibilityMap { vis: Arr::ones(IxDyn(&[1, 5, 6])) }),
            (
                FlowField { flow: Arr::zeros(IxDyn(&[2, 2, 3])) },
                VisibilityMap { vis: Arr::ones(IxDyn(&[1, 2, 3])) },
            ),
        ];
        let out = warp(&feats, &flows).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                let sx = (x + 2).min(5);
                assert!((out.levels[0][[0, y, x]] - f[[0, y, sx]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn decoded_frame_is_unit_range_rgb() {
        let (nets, store) = setup();
        let img = rand_img(3, 16, 12, 11);
        let feats = encode_appearance(&nets, &store, &img).unwrap();
        let flows: Vec<_> = feats
            .levels
            .iter()
            .map(|l| {
                let (h, w) = (l.shape()[1], l.shape()[2]);
                (
                    FlowField { flow: Arr::zeros(IxDyn(&[2, h, w])) },
                    VisibilityMap { vis: Arr::ones(IxDyn(&[1, h, w])) },
                )
            })
            .collect();
        let warped = warp(&feats, &flows).unwrap();
        let out = decode_warped(&nets, &store, &warped).unwrap();
        assert_eq!(out.shape(), &[3, 16, 12]);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn roi_is_a_probability_simplex_per_pixel() {
        let (nets, store) = setup();
        let img = rand_img(3, 16, 12, 12);
        let roi = predict_roi(&nets, &store, &img).unwrap();
        assert_eq!(roi.shape(), &[NUM_PARSE_LABELS, 16, 12]);
        for y in 0..16 {
            for x in 0..12 {
                let s: f64 = (0..NUM_PARSE_LABELS).map(|c| roi[[c, y, x]]).sum();
                assert!((s - 1.0).abs() < 1e-5);
                assert!((0..NUM_PARSE_LABELS).all(|c| roi[[c, y, x]] >= 0.0));
            }
        }
        let roi2 = predict_roi(&nets, &store, &img).unwrap();
        assert_eq!(roi, roi2);
    }

    #[test]
    fn region_compose_degenerate_masks_are_bit_exact() {
        let content = rand_img(3, 4, 4, 13);
        let base = rand_img(3, 4, 4, 14);
        let zeros = Array2::zeros((4, 4));
        let out = region_compose(&content, &base, &zeros).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(out[[c, y, x]], 0.0);
                    assert_eq!(out[[3 + c, y, x]].to_bits(), base[[c, y, x]].to_bits());
                }
            }
        }
        let ones = Array2::ones((4, 4));
        let out = region_compose(&content, &base, &ones).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(out[[c, y, x]].to_bits(), content[[c, y, x]].to_bits());
                    assert_eq!(out[[3 + c, y, x]], 0.0);
                }
            }
        }
    }

    #[test]
    fn region_compose_two_by_two_example() {
        let content = Arr::ones(IxDyn(&[3, 2, 2]));
        let base = Arr::from_elem(IxDyn(&[3, 2, 2]), 0.5);
        let mask = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let out = region_compose(&content, &base, &mask).unwrap();
        for c in 0..3 {
            assert_eq!(out[[c, 0, 0]], 1.0);
            assert_eq!(out[[c, 0, 1]], 0.0);
            assert_eq!(out[[c, 1, 0]], 0.0);
            assert_eq!(out[[c, 1, 1]], 1.0);
            assert_eq!(out[[3 + c, 0, 0]], 0.0);
            assert_eq!(out[[3 + c, 0, 1]], 0.5);
            assert_eq!(out[[3 + c, 1, 0]], 0.5);
            assert_eq!(out[[3 + c, 1, 1]], 0.0);
        }
    }

    #[test]
    fn region_compose_random_property_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for case in 0..200 {
            let h = rng.gen_range(1..6);
            let w = rng.gen_range(1..6);
            let content = Arr::from_shape_fn(IxDyn(&[3, h, w]), |_| rng.gen_range(-2.0..2.0));
            let base = Arr::from_shape_fn(IxDyn(&[3, h, w]), |_| rng.gen_range(-2.0..2.0));
            let mask = Array2::from_shape_fn((h, w), |_| f64::from(rng.gen_bool(0.5)));
            let out = region_compose(&content, &base, &mask).unwrap();
            for y in 0..h {
                for x in 0..w {
                    let on = mask[[y, x]] == 1.0;
                    for c in 0..3 {
                        let want_top = if on { content[[c, y, x]] } else { 0.0 };
                        let want_bot = if on { 0.0 } else { base[[c, y, x]] };
                        assert_eq!(out[[c, y, x]].to_bits(), want_top.to_bits(), "case {case}");
                        assert_eq!(out[[3 + c, y, x]].to_bits(), want_bot.to_bits(), "case {case}");
                    }
                }
            }
        }
    }

    #[test]
    fn region_compose_rejects_bad_shapes_and_masks() {
        let content = rand_img(3, 4, 4, 16);
        assert!(region_compose(&content, &rand_img(3, 5, 4, 17), &Array2::zeros((4, 4))).is_err());
        assert!(region_compose(&content, &content, &Array2::zeros((5, 4))).is_err());
        let soft = Array2::from_elem((4, 4), 0.5);
        assert!(region_compose(&content, &content, &soft).is_err());
    }

    #[test]
    fn fit_regions_output_is_unit_range() {
        let (nets, store) = setup();
        let comp = rand_img(6, 16, 12, 18);
        let out = fit_regions(&nets, &store, &comp).unwrap();
        assert_eq!(out.shape(), &[3, 16, 12]);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(fit_regions(&nets, &store, &rand_img(3, 16, 12, 19)).is_err());
    }

    #[test]
    fn tryon_frame_keeps_resolution_and_composite_traceability() {
        let (nets, store) = setup();
        let model = rand_img(3, 16, 12, 20);
        let frame = rand_img(3, 16, 12, 21);
        let mhm = rand_img(18, 16, 12, 22);
        let fhm = rand_img(18, 16, 12, 23);
        let mut face = Array2::zeros((16, 12));
        face[[2, 4]] = 1.0;
        let sets = LabelSets::default();
        let res = tryon_frame(&nets, &store, &model, &mhm, &frame, &fhm, &face, &sets).unwrap();
        assert_eq!(res.output.shape(), &[3, 16, 12]);
        assert_eq!(res.warped.shape(), &[3, 16, 12]);
        // pre-fit composite traceability: where neither mask is active the
        // clothes composite's base channels carry the frame pixels exactly
        let comp = region_compose(&res.warped, &frame, &res.clothes_mask).unwrap();
        for y in 0..16 {
            for x in 0..12 {
                if res.clothes_mask[[y, x]] == 0.0 && face[[y, x]] == 0.0 {
                    for c in 0..3 {
                        assert_eq!(comp[[3 + c, y, x]].to_bits(), frame[[c, y, x]].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn warp_flow_gradient_matches_finite_differences() {
        use crate::tensor::numeric_grad;
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let img = Arr::from_shape_fn(IxDyn(&[1, 2, 5, 5]), |_| rng.gen_range(0.0..1.0));
        let flow0 = Arr::from_shape_fn(IxDyn(&[1, 2, 5, 5]), |_| rng.gen_range(0.25..0.75));
        let run = |flow: &Arr| {
            let mut t = Tape::new();
            let iv = t.constant(img.clone());
            let fv = t.leaf(flow.clone());
            let wv = t.warp(iv, fv);
            let l = t.sum(wv);
            (t, fv, l)
        };
        let (mut t, fv, l) = run(&flow0);
        let grads = t.backward(l);
        let ga = grads.get(fv).unwrap();
        let gn = numeric_grad(
            |f| {
                let (t, _, l) = run(f);
                t.scalar(l)
            },
            &flow0,
            1e-6,
        );
        let num: f64 = (ga - &gn).iter().map(|x| x * x).sum::<f64>().sqrt();
        let den: f64 = ga.iter().chain(gn.iter()).map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        assert!(num / den < 1e-4);
    }
}
