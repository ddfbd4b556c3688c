//! Training objectives: per-term losses, the flow consistency penalty and
//! the three composite objectives with their default weights.

use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::LossWeights;
use crate::data::{ParsingMap, VideoClip};
use crate::nn::{Conv2d, ParamStore};
use crate::tensor::{Arr, Tape, Var};

pub const BCE_EPS: f64 = 1e-7;

/// Mean absolute difference.
pub fn l1_loss(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let ad = tape.abs(d);
    tape.mean(ad)
}

/// Mean squared difference.
pub fn l2_loss(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let sq = tape.square(d);
    tape.mean(sq)
}

/// Mean binary cross-entropy between per-pixel probabilities and a one-hot
/// target. Predictions are clamped to [eps, 1-eps].
pub fn bce_loss(tape: &mut Tape, pred: Var, target: Var) -> Var {
    let p = tape.clamp(pred, BCE_EPS, 1.0 - BCE_EPS);
    let logp = tape.log(p);
    let t_logp = tape.mul(target, logp);
    let onem_p = tape.neg(p);
    let onem_p = tape.add_scalar(onem_p, 1.0);
    let log1mp = tape.log(onem_p);
    let onem_t = tape.neg(target);
    let onem_t = tape.add_scalar(onem_t, 1.0);
    let t2 = tape.mul(onem_t, log1mp);
    let s = tape.add(t_logp, t2);
    let m = tape.mean(s);
    tape.scale(m, -1.0)
}

/// Ordered frozen feature layers for perceptual comparison.
pub trait FeatureExtractor {
    fn features(&self, tape: &mut Tape, x: Var) -> Vec<Var>;
}

/// Single layer returning the image itself; perceptual loss collapses to L1.
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, _tape: &mut Tape, x: Var) -> Vec<Var> {
        vec![x]
    }
}

/// Frozen, deterministically initialized conv stack standing in for a
/// pretrained classifier at desk scale. Two feature layers at strides 1/2.
pub struct RandomConvExtractor {
    store: ParamStore,
    l0: Conv2d,
    l1: Conv2d,
}

impl RandomConvExtractor {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let l0 = Conv2d::new("perc.l0", in_channels, 8, 3, 1, true);
        let l1 = Conv2d::new("perc.l1", 8, 16, 3, 2, true);
        l0.init(&mut store, &mut rng);
        l1.init(&mut store, &mut rng);
        Self { store, l0, l1 }
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn features(&self, tape: &mut Tape, x: Var) -> Vec<Var> {
        let f0 = self.l0.forward(tape, &self.store, x, true);
        let f0 = tape.leaky_relu(f0, 0.2);
        let f1 = self.l1.forward(tape, &self.store, f0, true);
        let f1 = tape.leaky_relu(f1, 0.2);
        vec![f0, f1]
    }
}

/// Sum over extractor layers of L1 feature distances.
pub fn perceptual_loss(tape: &mut Tape, extractor: &dyn FeatureExtractor, a: Var, b: Var) -> Var {
    let fa = extractor.features(tape, a);
    let fb = extractor.features(tape, b);
    assert_eq!(fa.len(), fb.len());
    let mut total: Option<Var> = None;
    for (x, y) in fa.into_iter().zip(fb) {
        let l = l1_loss(tape, x, y);
        total = Some(match total {
            Some(t) => tape.add(t, l),
            None => l,
        });
    }
    total.expect("extractor returned no layers")
}

/// Forward/backward flow maps over one frame with its foreground mask.
#[derive(Debug, Clone)]
pub struct FlowPair {
    /// preceding -> current, [2,H,W], pixels
    pub flow_src: Arr,
    /// current -> preceding, [2,H,W], pixels
    pub flow_dst: Arr,
    /// foreground mask [H,W]
    pub mask: Arr,
}

impl FlowPair {
    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&v| v > 0.0).count()
    }
}

/// (1/|N|) sum_p || (F_s(p) + F_t(p)) * M(p) ||^2 over foreground pixels;
/// defined as 0 when the mask is empty.
pub fn flow_consistency_loss(tape: &mut Tape, fs: Var, ft: Var, mask: &Arr) -> Var {
    assert_eq!(tape.value(fs).shape(), tape.value(ft).shape(), "flow shapes differ");
    let shape = tape.value(fs).shape().to_vec();
    assert_eq!(shape[0], 2, "flow maps must be [2,H,W]");
    assert_eq!(&shape[1..], mask.shape(), "mask spatial mismatch");
    let n = mask.iter().filter(|&&v| v > 0.0).count();
    if n == 0 {
        return tape.constant(ndarray::arr1(&[0.0]).into_dyn());
    }
    let mask2 = {
        let mut m = Arr::zeros(IxDyn(&shape));
        for c in 0..2 {
            m.index_axis_mut(ndarray::Axis(0), c).assign(mask);
        }
        tape.constant(m)
    };
    let s = tape.add(fs, ft);
    let masked = tape.mul(s, mask2);
    let sq = tape.square(masked);
    let total = tape.sum(sq);
    tape.scale(total, 1.0 / n as f64)
}

/// Convenience scalar form of the flow consistency loss.
pub fn flow_consistency_value(fp: &FlowPair) -> f64 {
    let mut tape = Tape::new();
    let fs = tape.constant(fp.flow_src.clone());
    let ft = tape.constant(fp.flow_dst.clone());
    let l = flow_consistency_loss(&mut tape, fs, ft, &fp.mask);
    tape.scalar(l)
}

// ---- composite training objectives ----

#[derive(Debug, Clone, Copy, Default)]
pub struct TryonLossTerms {
    pub adv: f64,
    pub perceptual: f64,
    pub l1: f64,
    pub bce: f64,
}

pub fn tryon_objective(t: &TryonLossTerms, w: &LossWeights) -> f64 {
    w.lambda1 * t.adv + w.lambda2 * t.perceptual + w.lambda3 * t.l1 + w.lambda4 * t.bce
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RefinePairedTerms {
    pub l1: f64,
    pub l2: f64,
    pub perceptual: f64,
    pub flow: f64,
    pub mgan: f64,
}

pub fn refine_paired_objective(t: &RefinePairedTerms, w: &LossWeights) -> f64 {
    w.gamma1 * t.l1 + w.gamma2 * t.l2 + w.gamma3 * t.perceptual + w.gamma4 * t.flow + w.gamma5 * t.mgan
}

pub fn refine_unpaired_objective(flow_l: f64, match_l: f64, w: &LossWeights) -> f64 {
    w.beta1 * flow_l + w.beta2 * match_l
}

/// Tape-side weighted sum for building composite training losses.
pub fn weighted_sum(tape: &mut Tape, terms: &[(Var, f64)]) -> Var {
    let mut total: Option<Var> = None;
    for &(v, w) in terms {
        let scaled = tape.scale(v, w);
        total = Some(match total {
            Some(t) => tape.add(t, scaled),
            None => scaled,
        });
    }
    total.unwrap_or_else(|| tape.constant(ndarray::arr1(&[0.0]).into_dyn()))
}

// ---- flow provider ----

/// Ground-truth-style flow pairs derived from parsing maps: each label's
/// motion is taken as the displacement of its centroid between consecutive
/// frames. Exact for rigidly translating parts (the toy generator's
/// contract); real-data mode would plug in an external flow estimator here.
pub struct CentroidFlowProvider;

impl CentroidFlowProvider {
    fn centroid(p: &ParsingMap, label: u8) -> Option<(f64, f64)> {
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut n = 0usize;
        for ((y, x), &l) in p.labels.indexed_iter() {
            if l == label {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Flow pair for frame `t` of a clip (needs t >= 1).
    pub fn flow_pair(clip: &VideoClip, t: usize) -> Option<FlowPair> {
        if t == 0 || t >= clip.len() {
            return None;
        }
        let prev = &clip.parsing[t - 1];
        let cur = &clip.parsing[t];
        let (h, w) = (cur.height(), cur.width());
        let mut fs = Arr::zeros(IxDyn(&[2, h, w]));
        let mut ft = Arr::zeros(IxDyn(&[2, h, w]));
        let mut mask = Arr::zeros(IxDyn(&[h, w]));
        for label in 1..crate::data::NUM_PARSE_LABELS as u8 {
            let (Some(cp), Some(cc)) = (Self::centroid(prev, label), Self::centroid(cur, label)) else {
                continue;
            };
            let (dx, dy) = (cc.0 - cp.0, cc.1 - cp.1);
            for ((y, x), &l) in cur.labels.indexed_iter() {
                if l == label {
                    fs[[0, y, x]] = dx;
                    fs[[1, y, x]] = dy;
                    ft[[0, y, x]] = -dx;
                    ft[[1, y, x]] = -dy;
                    mask[[y, x]] = 1.0;
                }
            }
        }
        Some(FlowPair { flow_src: fs, flow_dst: ft, mask })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::numeric_grad;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    fn rel_err(a: &Arr, b: &Arr) -> f64 {
        let num: f64 = (a - b).iter().map(|x| x * x).sum::<f64>().sqrt();
        let den: f64 = a.iter().chain(b.iter()).map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    #[test]
    fn l1_l2_closed_forms() {
        let mut tape = Tape::new();
        let a = tape.constant(Arr::zeros(IxDyn(&[2, 3])));
        let b = tape.constant(Arr::ones(IxDyn(&[2, 3])));
        let b2 = tape.constant(Arr::from_elem(IxDyn(&[2, 3]), 2.0));
        let l1 = l1_loss(&mut tape, a, b);
        let l2 = l2_loss(&mut tape, a, b);
        let l1b = l1_loss(&mut tape, a, b2);
        let l2b = l2_loss(&mut tape, a, b2);
        let same = l1_loss(&mut tape, a, a);
        assert_eq!(tape.scalar(l1), 1.0);
        assert_eq!(tape.scalar(l2), 1.0);
        assert_eq!(tape.scalar(l1b), 2.0);
        assert_eq!(tape.scalar(l2b), 4.0);
        assert_eq!(tape.scalar(same), 0.0);
    }

    #[test]
    fn bce_closed_form_and_monotonicity() {
        let mut tape = Tape::new();
        let half = tape.constant(Arr::from_elem(IxDyn(&[4, 4]), 0.5));
        let target = tape.constant(Arr::ones(IxDyn(&[4, 4])));
        let l = bce_loss(&mut tape, half, target);
        assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
        // moving predictions toward the target decreases the loss
        let closer = tape.constant(Arr::from_elem(IxDyn(&[4, 4]), 0.9));
        let l2 = bce_loss(&mut tape, closer, target);
        assert!(tape.scalar(l2) < tape.scalar(l));
        // pred == target (clamped) is ~0
        let l3 = bce_loss(&mut tape, target, target);
        assert!(tape.scalar(l3).abs() < 1e-6);
    }

    #[test]
    fn perceptual_with_identity_extractor_equals_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = rand_arr(&[1, 3, 4, 4], &mut rng);
        let b = rand_arr(&[1, 3, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let av = tape.constant(a);
        let bv = tape.constant(b);
        let p = perceptual_loss(&mut tape, &IdentityExtractor, av, bv);
        let l = l1_loss(&mut tape, av, bv);
        assert_eq!(tape.scalar(p), tape.scalar(l));
        let same = perceptual_loss(&mut tape, &IdentityExtractor, av, av);
        assert_eq!(tape.scalar(same), 0.0);
    }

    #[test]
    fn perceptual_random_conv_zero_at_fixed_point_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let ex = RandomConvExtractor::new(3, 7);
        let a = rand_arr(&[1, 3, 8, 8], &mut rng);
        let b = rand_arr(&[1, 3, 8, 8], &mut rng);
        let mut tape = Tape::new();
        let av = tape.constant(a);
        let bv = tape.constant(b);
        let same = perceptual_loss(&mut tape, &ex, av, av);
        let diff = perceptual_loss(&mut tape, &ex, av, bv);
        assert_eq!(tape.scalar(same), 0.0);
        assert!(tape.scalar(diff) >= 0.0);
    }

    #[test]
    fn flow_consistency_cancellation_and_hand_case() {
        // F_t = -F_s cancels exactly
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let fsv = rand_arr(&[2, 3, 3], &mut rng);
        let mask = Arr::ones(IxDyn(&[3, 3]));
        let mut tape = Tape::new();
        let fs = tape.constant(fsv.clone());
        let ft = tape.constant(-&fsv);
        let l = flow_consistency_loss(&mut tape, fs, ft, &mask);
        assert_eq!(tape.scalar(l), 0.0);

        // F_s = F_t = (1,0) on a full 2x2 mask: (1/4) * sum_p (2^2) = 4
        let mut fsh = Arr::zeros(IxDyn(&[2, 2, 2]));
        fsh.index_axis_mut(ndarray::Axis(0), 0).fill(1.0);
        let mask = Arr::ones(IxDyn(&[2, 2]));
        let mut tape = Tape::new();
        let fs = tape.constant(fsh.clone());
        let ft = tape.constant(fsh);
        let l = flow_consistency_loss(&mut tape, fs, ft, &mask);
        assert!((tape.scalar(l) - 4.0).abs() < 1e-12);

        // empty mask -> 0 by convention
        let mut tape = Tape::new();
        let z = Arr::zeros(IxDyn(&[2, 2, 2]));
        let fs = tape.constant(z.clone());
        let ft = tape.constant(z);
        let l = flow_consistency_loss(&mut tape, fs, ft, &Arr::zeros(IxDyn(&[2, 2])));
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn flow_consistency_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..10 {
            let fs = rand_arr(&[2, 4, 4], &mut rng);
            let ft = rand_arr(&[2, 4, 4], &mut rng);
            let mask = Arr::from_shape_fn(IxDyn(&[4, 4]), |_| if rng.gen_bool(0.6) { 1.0 } else { 0.0 });
            let n = mask.iter().filter(|&&v| v > 0.0).count();
            let mut oracle = 0.0;
            for y in 0..4 {
                for x in 0..4 {
                    let dx = (fs[[0, y, x]] + ft[[0, y, x]]) * mask[[y, x]];
                    let dy = (fs[[1, y, x]] + ft[[1, y, x]]) * mask[[y, x]];
                    oracle += dx * dx + dy * dy;
                }
            }
            let oracle = if n == 0 { 0.0 } else { oracle / n as f64 };
            let got = flow_consistency_value(&FlowPair { flow_src: fs, flow_dst: ft, mask });
            assert!((got - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        // l1 away from zero-difference points, l2, bce, flow consistency
        let a = rand_arr(&[2, 3], &mut rng) + 3.0;
        let b = rand_arr(&[2, 3], &mut rng) - 3.0;
        for which in 0..2 {
            let run = |xa: &Arr| {
                let mut t = Tape::new();
                let av = t.leaf(xa.clone());
                let bv = t.constant(b.clone());
                let l = if which == 0 { l1_loss(&mut t, av, bv) } else { l2_loss(&mut t, av, bv) };
                (t, av, l)
            };
            let (mut t, av, l) = run(&a);
            let grads = t.backward(l);
            let gn = numeric_grad(
                |xa| {
                    let (t, _, l) = run(xa);
                    t.scalar(l)
                },
                &a,
                1e-6,
            );
            assert!(rel_err(grads.get(av).unwrap(), &gn) < 1e-6);
        }

        let pred = Arr::from_shape_fn(IxDyn(&[3, 3]), |_| rng.gen_range(0.1..0.9));
        let target = Arr::from_shape_fn(IxDyn(&[3, 3]), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let run = |xa: &Arr| {
            let mut t = Tape::new();
            let pv = t.leaf(xa.clone());
            let tv = t.constant(target.clone());
            let l = bce_loss(&mut t, pv, tv);
            (t, pv, l)
        };
        let (mut t, pv, l) = run(&pred);
        let grads = t.backward(l);
        let gn = numeric_grad(
            |xa| {
                let (t, _, l) = run(xa);
                t.scalar(l)
            },
            &pred,
            1e-6,
        );
        assert!(rel_err(grads.get(pv).unwrap(), &gn) < 1e-6);

        let fsv = rand_arr(&[2, 3, 3], &mut rng);
        let ftv = rand_arr(&[2, 3, 3], &mut rng);
        let mask = Arr::ones(IxDyn(&[3, 3]));
        let run = |xa: &Arr| {
            let mut t = Tape::new();
            let fs = t.leaf(xa.clone());
            let ft = t.constant(ftv.clone());
            let l = flow_consistency_loss(&mut t, fs, ft, &mask);
            (t, fs, l)
        };
        let (mut t, fs, l) = run(&fsv);
        let grads = t.backward(l);
        let gn = numeric_grad(
            |xa| {
                let (t, _, l) = run(xa);
                t.scalar(l)
            },
            &fsv,
            1e-6,
        );
        assert!(rel_err(grads.get(fs).unwrap(), &gn) < 1e-6);
    }

    #[test]
    fn composite_objectives_arithmetic() {
        let w = LossWeights::default();
        let t = TryonLossTerms { adv: 1.0, perceptual: 1.0, l1: 1.0, bce: 1.0 };
        assert!((tryon_objective(&t, &w) - 2.02).abs() < 1e-12);
        assert_eq!(tryon_objective(&TryonLossTerms::default(), &w), 0.0);

        let r = RefinePairedTerms { l1: 1.0, l2: 1.0, perceptual: 1.0, flow: 1.0, mgan: 1.0 };
        assert!((refine_paired_objective(&r, &w) - 3.2).abs() < 1e-12);
        assert_eq!(refine_paired_objective(&RefinePairedTerms::default(), &w), 0.0);

        assert!((refine_unpaired_objective(1.0, 1.0, &w) - 1.1).abs() < 1e-12);
        assert_eq!(refine_unpaired_objective(0.0, 0.0, &w), 0.0);
        // linearity in the match term
        let base = refine_unpaired_objective(0.0, 2.0, &w);
        assert!((base - 2.0 * refine_unpaired_objective(0.0, 1.0, &w)).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_zero_objective() {
        let w = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            ..Default::default()
        };
        let t = TryonLossTerms { adv: 9.0, perceptual: 9.0, l1: 9.0, bce: 9.0 };
        assert_eq!(tryon_objective(&t, &w), 0.0);
    }
}
