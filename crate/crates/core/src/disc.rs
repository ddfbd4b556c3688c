//! Adversarial critics: a single-scale patch discriminator, its
//! multi-scale pyramid variant, and the matching discriminator that judges
//! correlation maps between region-masked feature encodings.

use ndarray::{Array2, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::losses::{bce_loss, BCE_EPS};
use crate::nn::{Conv2d, ParamStore};
use crate::tensor::{Arr, Tape, Var};

/// Per-location maximum similarity of one masked encoding against every
/// location of the other. `raw` holds unbounded dot products; `squashed`
/// is the (0,1) map the losses consume.
#[derive(Debug, Clone)]
pub struct CorrelationMap {
    pub raw: Array2<f64>,
    pub squashed: Array2<f64>,
}

/// One patch discriminator: two stride-2 convs and a 1-channel head.
#[derive(Debug, Clone)]
pub struct PatchD {
    c0: Conv2d,
    c1: Conv2d,
    c2: Conv2d,
}

impl PatchD {
    fn new(prefix: &str, ch: usize) -> Self {
        Self {
            c0: Conv2d::new(format!("{prefix}.c0"), 3, ch, 3, 2, true),
            c1: Conv2d::new(format!("{prefix}.c1"), ch, 2 * ch, 3, 2, true),
            c2: Conv2d::new(format!("{prefix}.c2"), 2 * ch, 1, 3, 1, true),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for c in [&self.c0, &self.c1, &self.c2] {
            c.init(store, rng);
        }
    }

    /// Sigmoid patch-probability map.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, frozen: bool) -> Var {
        let h0 = self.c0.forward(tape, store, x, frozen);
        let h0 = tape.leaky_relu(h0, 0.2);
        let h1 = self.c1.forward(tape, store, h0, frozen);
        let h1 = tape.leaky_relu(h1, 0.2);
        let logits = self.c2.forward(tape, store, h1, frozen);
        tape.sigmoid(logits)
    }
}

/// All adversarial critics, parameterized under the `disc.` name prefix.
#[derive(Debug, Clone)]
pub struct DiscNets {
    pub arch: ArchConfig,
    pub vanilla: PatchD,
    pub multiscale: Vec<PatchD>,
    match0: Conv2d,
    match1: Conv2d,
}

pub const MATCH_HEAD_W: &str = "disc.match_head.w";
pub const MATCH_HEAD_B: &str = "disc.match_head.b";

impl DiscNets {
    pub fn new(arch: &ArchConfig) -> Self {
        let ch = arch.base_channels;
        Self {
            arch: arch.clone(),
            vanilla: PatchD::new("disc.vanilla", ch),
            multiscale: (0..arch.disc_scales).map(|s| PatchD::new(&format!("disc.ms{s}"), ch)).collect(),
            // bias-free so all-zero masked inputs yield exactly zero features
            match0: Conv2d::new("disc.match0", 3, ch, 3, 2, false),
            match1: Conv2d::new("disc.match1", ch, ch, 3, 2, false),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.vanilla.init(store, rng);
        for d in &self.multiscale {
            d.init(store, rng);
        }
        self.match0.init(store, rng);
        self.match1.init(store, rng);
        // affine + sigmoid head over raw correlations; identity affine at
        // init so zero correlation maps to exactly 0.5
        store.insert(MATCH_HEAD_W, Arr::ones(IxDyn(&[1])));
        store.insert(MATCH_HEAD_B, Arr::zeros(IxDyn(&[1])));
    }

    /// Shared masked-feature extractor of the matching discriminator.
    pub fn match_features_tape(&self, tape: &mut Tape, store: &ParamStore, img: Var, mask: Var, frozen: bool) -> Var {
        let m3 = tape.broadcast_channel(mask, 3);
        let masked = tape.mul(m3, img);
        let h0 = self.match0.forward(tape, store, masked, frozen);
        let h0 = tape.leaky_relu(h0, 0.2);
        let h1 = self.match1.forward(tape, store, h0, frozen);
        tape.leaky_relu(h1, 0.2)
    }

    /// Correlation map on the tape. Returns (raw, squashed) as [HW_a, 1]
    /// columns over img_a's feature grid, plus that grid's (h, w).
    pub fn correlation_map_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        img_a: Var,
        mask_a: Var,
        img_b: Var,
        mask_b: Var,
        frozen: bool,
    ) -> (Var, Var, (usize, usize)) {
        let fa = self.match_features_tape(tape, store, img_a, mask_a, frozen);
        let fb = self.match_features_tape(tape, store, img_b, mask_b, frozen);
        let sa = tape.value(fa).shape().to_vec();
        let sb = tape.value(fb).shape().to_vec();
        let (c, ha, wa) = (sa[1], sa[2], sa[3]);
        let (hb, wb) = (sb[2], sb[3]);
        let fa2 = tape.reshape(fa, &[c, ha * wa]);
        let a = tape.transpose2(fa2); // [HW_a, C]
        let fb2 = tape.reshape(fb, &[c, hb * wb]);
        let sim = tape.matmul(a, fb2); // [HW_a, HW_b]
        let raw = tape.max_rows(sim); // [HW_a, 1]
        let wv = if frozen { store.bind_frozen(tape, MATCH_HEAD_W) } else { store.bind(tape, MATCH_HEAD_W) };
        let w2 = tape.reshape(wv, &[1, 1]);
        let scaled = tape.matmul(raw, w2);
        let bv = if frozen { store.bind_frozen(tape, MATCH_HEAD_B) } else { store.bind(tape, MATCH_HEAD_B) };
        let b2 = tape.reshape(bv, &[1, 1]);
        let ones = tape.constant(Arr::ones(IxDyn(&[ha * wa, 1])));
        let bias = tape.matmul(ones, b2);
        let affine = tape.add(scaled, bias);
        let squashed = tape.sigmoid(affine);
        (raw, squashed, (ha, wa))
    }
}

fn check_image(arch: &ArchConfig, img: &Arr, what: &str) -> Result<()> {
    let s = img.shape();
    if img.ndim() != 3 || s[0] != 3 || s[1] != arch.height || s[2] != arch.width {
        return Err(Error::shape(format!(
            "{what}: expected [3,{},{}], got {s:?}",
            arch.height, arch.width
        )));
    }
    Ok(())
}

fn mask_var(tape: &mut Tape, mask: &Array2<f64>) -> Var {
    let m = mask.clone().into_dyn().insert_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
    tape.constant(m)
}

fn img_var(tape: &mut Tape, img: &Arr) -> Var {
    tape.constant(img.clone().insert_axis(ndarray::Axis(0)))
}

/// Correlation map between two region-masked images.
pub fn correlation_map(
    nets: &DiscNets,
    store: &ParamStore,
    img_a: &Arr,
    mask_a: &Array2<f64>,
    img_b: &Arr,
    mask_b: &Array2<f64>,
) -> Result<CorrelationMap> {
    check_image(&nets.arch, img_a, "correlation img_a")?;
    check_image(&nets.arch, img_b, "correlation img_b")?;
    if mask_a.dim() != (nets.arch.height, nets.arch.width) || mask_b.dim() != (nets.arch.height, nets.arch.width) {
        return Err(Error::shape("mask resolution mismatch".to_string()));
    }
    let mut tape = Tape::new();
    let ia = img_var(&mut tape, img_a);
    let ib = img_var(&mut tape, img_b);
    let ma = mask_var(&mut tape, mask_a);
    let mb = mask_var(&mut tape, mask_b);
    let (raw, sq, (h, w)) = nets.correlation_map_tape(&mut tape, store, ia, ma, ib, mb, true);
    let to_grid = |v: Var, tape: &Tape| {
        Array2::from_shape_fn((h, w), |(y, x)| tape.value(v)[[y * w + x, 0]])
    };
    let out = CorrelationMap { raw: to_grid(raw, &tape), squashed: to_grid(sq, &tape) };
    if out.raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite correlation".to_string()));
    }
    Ok(out)
}

/// Masked conv features of one image (exposed for the brute-force oracle).
pub fn match_features(nets: &DiscNets, store: &ParamStore, img: &Arr, mask: &Array2<f64>) -> Result<Arr> {
    check_image(&nets.arch, img, "match features input")?;
    let mut tape = Tape::new();
    let iv = img_var(&mut tape, img);
    let mv = mask_var(&mut tape, mask);
    let f = nets.match_features_tape(&mut tape, store, iv, mv, true);
    Ok(tape.value(f).clone().remove_axis(ndarray::Axis(0)))
}

fn clamped_log(x: f64) -> f64 {
    x.clamp(BCE_EPS, 1.0 - BCE_EPS).ln()
}

/// Minimax losses over squashed correlation maps: the discriminator pushes
/// real maps toward 1 and fake maps toward 0; the generator maximizes the
/// fake map (non-saturating form).
pub fn matching_disc_loss(u_real: &CorrelationMap, u_fake: &CorrelationMap) -> (f64, f64) {
    let mean_log = |m: &Array2<f64>| m.iter().map(|&v| clamped_log(v)).sum::<f64>() / m.len() as f64;
    let mean_log1m = |m: &Array2<f64>| {
        m.iter().map(|&v| (1.0 - v).clamp(BCE_EPS, 1.0 - BCE_EPS).ln()).sum::<f64>() / m.len() as f64
    };
    let d_loss = -mean_log(&u_real.squashed) - mean_log1m(&u_fake.squashed);
    let g_loss = -mean_log(&u_fake.squashed);
    (d_loss, g_loss)
}

/// Tape form of [`matching_disc_loss`] over [N,1] squashed maps.
pub fn matching_disc_loss_tape(tape: &mut Tape, u_real: Var, u_fake: Var) -> (Var, Var) {
    let ones_r = tape.constant(Arr::ones(tape_dim(tape, u_real)));
    let ones_f = tape.constant(Arr::ones(tape_dim(tape, u_fake)));
    let zeros_f = tape.constant(Arr::zeros(tape_dim(tape, u_fake)));
    let d_real = bce_loss(tape, u_real, ones_r);
    let d_fake = bce_loss(tape, u_fake, zeros_f);
    let d_loss = tape.add(d_real, d_fake);
    let g_loss = bce_loss(tape, u_fake, ones_f);
    (d_loss, g_loss)
}

fn tape_dim(tape: &Tape, v: Var) -> IxDyn {
    tape.value(v).raw_dim()
}

/// Tape-level binary GAN losses given a patch discriminator's probability
/// maps for a (real, fake) pair.
pub fn gan_losses_tape(tape: &mut Tape, d_real: Var, d_fake: Var) -> (Var, Var) {
    let ones_r = tape.constant(Arr::ones(tape_dim(tape, d_real)));
    let ones_f = tape.constant(Arr::ones(tape_dim(tape, d_fake)));
    let zeros_f = tape.constant(Arr::zeros(tape_dim(tape, d_fake)));
    let lr = bce_loss(tape, d_real, ones_r);
    let lf = bce_loss(tape, d_fake, zeros_f);
    let d_loss = tape.add(lr, lf);
    let g_loss = bce_loss(tape, d_fake, ones_f);
    (d_loss, g_loss)
}

/// Single-scale adversarial losses on images.
pub fn vanilla_adv_loss(nets: &DiscNets, store: &ParamStore, real: &Arr, fake: &Arr) -> Result<(f64, f64)> {
    check_image(&nets.arch, real, "vanilla real")?;
    check_image(&nets.arch, fake, "vanilla fake")?;
    let mut tape = Tape::new();
    let rv = img_var(&mut tape, real);
    let fv = img_var(&mut tape, fake);
    let dr = nets.vanilla.forward(&mut tape, store, rv, true);
    let df = nets.vanilla.forward(&mut tape, store, fv, true);
    let (d, g) = gan_losses_tape(&mut tape, dr, df);
    Ok((tape.scalar(d), tape.scalar(g)))
}

/// Tape-level multi-scale adversarial losses: each scale has its own
/// discriminator; images are factor-2 average-pooled between scales and
/// the per-scale losses are averaged.
pub fn multiscale_adv_loss_tape(
    nets: &DiscNets,
    tape: &mut Tape,
    store: &ParamStore,
    real: Var,
    fake: Var,
    n_scales: usize,
    frozen: bool,
) -> Result<(Var, Var)> {
    if n_scales == 0 || n_scales > nets.multiscale.len() {
        return Err(Error::Config(format!(
            "n_scales must be in 1..={}, got {n_scales}",
            nets.multiscale.len()
        )));
    }
    let s = tape.value(real).shape().to_vec();
    let min_side = s[2].min(s[3]);
    if min_side < 4 << (n_scales - 1) {
        return Err(Error::Config(format!(
            "image side {min_side} too small for {n_scales} discriminator scales"
        )));
    }
    let mut r = real;
    let mut f = fake;
    let mut d_terms = Vec::new();
    let mut g_terms = Vec::new();
    for (si, d) in nets.multiscale.iter().take(n_scales).enumerate() {
        if si > 0 {
            r = tape.avg_pool2(r);
            f = tape.avg_pool2(f);
        }
        let dr = d.forward(tape, store, r, frozen);
        let df = d.forward(tape, store, f, frozen);
        let (dl, gl) = gan_losses_tape(tape, dr, df);
        d_terms.push(dl);
        g_terms.push(gl);
    }
    let inv = 1.0 / n_scales as f64;
    let mut dsum = d_terms[0];
    let mut gsum = g_terms[0];
    for i in 1..n_scales {
        dsum = tape.add(dsum, d_terms[i]);
        gsum = tape.add(gsum, g_terms[i]);
    }
    Ok((tape.scale(dsum, inv), tape.scale(gsum, inv)))
}

/// Array-level wrapper of [`multiscale_adv_loss_tape`].
pub fn multiscale_adv_loss(
    nets: &DiscNets,
    store: &ParamStore,
    real: &Arr,
    fake: &Arr,
    n_scales: usize,
) -> Result<(f64, f64)> {
    check_image(&nets.arch, real, "multiscale real")?;
    check_image(&nets.arch, fake, "multiscale fake")?;
    let mut tape = Tape::new();
    let rv = img_var(&mut tape, real);
    let fv = img_var(&mut tape, fake);
    let (d, g) = multiscale_adv_loss_tape(nets, &mut tape, store, rv, fv, n_scales, true)?;
    Ok((tape.scalar(d), tape.scalar(g)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    const LN2: f64 = std::f64::consts::LN_2;

    fn arch(h: usize, w: usize) -> ArchConfig {
        ArchConfig { height: h, width: w, base_channels: 4, ..ArchConfig::default() }
    }

    fn setup(h: usize, w: usize, seed: u64) -> (DiscNets, ParamStore) {
        let a = arch(h, w);
        let nets = DiscNets::new(&a);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        nets.init(&mut store, &mut rng);
        (nets, store)
    }

    fn rand_img(h: usize, w: usize, seed: u64) -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arr::from_shape_fn(IxDyn(&[3, h, w]), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn zero_masks_give_exact_half_squash() {
        let (nets, store) = setup(8, 8, 1);
        let a = rand_img(8, 8, 2);
        let b = rand_img(8, 8, 3);
        let z = Array2::zeros((8, 8));
        let u = correlation_map(&nets, &store, &a, &z, &b, &z).unwrap();
        assert!(u.raw.iter().all(|&v| v == 0.0));
        assert!(u.squashed.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn degenerate_single_location_grid() {
        // 4x4 input with two stride-2 convs -> 1x1 feature grid
        let (nets, store) = setup(4, 4, 4);
        let a = rand_img(4, 4, 5);
        let ones = Array2::ones((4, 4));
        let u = correlation_map(&nets, &store, &a, &ones, &a, &ones).unwrap();
        assert_eq!(u.raw.dim(), (1, 1));
        let f = match_features(&nets, &store, &a, &ones).unwrap();
        let norm2: f64 = f.iter().map(|v| v * v).sum();
        assert!((u.raw[[0, 0]] - norm2).abs() < 1e-9);
        // symmetric in the single-entry case
        let b = rand_img(4, 4, 6);
        let uab = correlation_map(&nets, &store, &a, &ones, &b, &ones).unwrap();
        let uba = correlation_map(&nets, &store, &b, &ones, &a, &ones).unwrap();
        assert!((uab.raw[[0, 0]] - uba.raw[[0, 0]]).abs() < 1e-9);
    }

    #[test]
    fn matches_bruteforce_max_dot_oracle_on_3x3_grids() {
        // 12x12 input -> 3x3 feature grid
        for seed in 0..5u64 {
            let (nets, store) = setup(12, 12, 40 + seed);
            let a = rand_img(12, 12, 50 + seed);
            let b = rand_img(12, 12, 60 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(70 + seed);
            let ma = Array2::from_shape_fn((12, 12), |_| f64::from(rng.gen_bool(0.7)));
            let mb = Array2::from_shape_fn((12, 12), |_| f64::from(rng.gen_bool(0.7)));
            let u = correlation_map(&nets, &store, &a, &ma, &b, &mb).unwrap();
            assert_eq!(u.raw.dim(), (3, 3));
            let fa = match_features(&nets, &store, &a, &ma).unwrap();
            let fb = match_features(&nets, &store, &b, &mb).unwrap();
            let c = fa.shape()[0];
            for ya in 0..3 {
                for xa in 0..3 {
                    let mut best = f64::NEG_INFINITY;
                    for yb in 0..3 {
                        for xb in 0..3 {
                            let dot: f64 =
                                (0..c).map(|ci| fa[[ci, ya, xa]] * fb[[ci, yb, xb]]).sum();
                            best = best.max(dot);
                        }
                    }
                    assert!((u.raw[[ya, xa]] - best).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn matching_loss_closed_forms() {
        let half = CorrelationMap { raw: Array2::zeros((2, 2)), squashed: Array2::from_elem((2, 2), 0.5) };
        let (d, g) = matching_disc_loss(&half, &half);
        assert!((d - 2.0 * LN2).abs() < 1e-6);
        assert!((g - LN2).abs() < 1e-6);

        let e = 1e-6;
        let ideal_real = CorrelationMap { raw: Array2::zeros((2, 2)), squashed: Array2::from_elem((2, 2), 1.0 - e) };
        let ideal_fake = CorrelationMap { raw: Array2::zeros((2, 2)), squashed: Array2::from_elem((2, 2), e) };
        let (d, _) = matching_disc_loss(&ideal_real, &ideal_fake);
        assert!(d >= 0.0 && d <= 4.0 * e * 1.5);

        // g_loss decreases as the fake map approaches 1
        let mut prev = f64::INFINITY;
        for &v in &[0.1, 0.3, 0.6, 0.9] {
            let fake = CorrelationMap { raw: Array2::zeros((1, 1)), squashed: Array2::from_elem((1, 1), v) };
            let (_, g) = matching_disc_loss(&half, &fake);
            assert!(g < prev);
            prev = g;
        }
    }

    #[test]
    fn matching_loss_clamps_out_of_range_values() {
        let bad = CorrelationMap { raw: Array2::zeros((1, 1)), squashed: Array2::from_elem((1, 1), 0.0) };
        let (d, g) = matching_disc_loss(&bad, &bad);
        assert!(d.is_finite() && g.is_finite());
    }

    #[test]
    fn zeroed_vanilla_discriminator_scores_two_ln_two() {
        let (nets, mut store) = setup(8, 8, 7);
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        for n in names.iter().filter(|n| n.starts_with("disc.vanilla")) {
            let z = Arr::zeros(store.get(n).raw_dim());
            store.insert(n, z);
        }
        let (d, g) = vanilla_adv_loss(&nets, &store, &rand_img(8, 8, 8), &rand_img(8, 8, 9)).unwrap();
        assert!((d - 2.0 * LN2).abs() < 1e-9);
        assert!((g - LN2).abs() < 1e-9);
    }

    #[test]
    fn identical_real_and_fake_lower_bound() {
        let (nets, store) = setup(8, 8, 10);
        let img = rand_img(8, 8, 11);
        let (d, _) = vanilla_adv_loss(&nets, &store, &img, &img).unwrap();
        assert!(d >= 2.0 * LN2 - 1e-9);
        let (d2, _) = vanilla_adv_loss(&nets, &store, &img, &img).unwrap();
        assert!((d - d2).abs() < 1e-12);
    }

    #[test]
    fn multiscale_collapses_to_single_scale_and_averages() {
        let (nets, store) = setup(16, 16, 12);
        let real = rand_img(16, 16, 13);
        let fake = rand_img(16, 16, 14);
        // n_scales = 1: exactly the ms0 patch loss
        let (d1, g1) = multiscale_adv_loss(&nets, &store, &real, &fake, 1).unwrap();
        let (d0, g0) = {
            let mut t = Tape::new();
            let rv = t.constant(real.clone().insert_axis(ndarray::Axis(0)));
            let fv = t.constant(fake.clone().insert_axis(ndarray::Axis(0)));
            let dr = nets.multiscale[0].forward(&mut t, &store, rv, true);
            let df = nets.multiscale[0].forward(&mut t, &store, fv, true);
            let (d, g) = gan_losses_tape(&mut t, dr, df);
            (t.scalar(d), t.scalar(g))
        };
        assert!((d1 - d0).abs() < 1e-12 && (g1 - g0).abs() < 1e-12);
        // n_scales = 2: mean of the per-scale losses
        let (d2, g2) = multiscale_adv_loss(&nets, &store, &real, &fake, 2).unwrap();
        let (ds1, gs1) = {
            let mut t = Tape::new();
            let rv = t.constant(real.clone().insert_axis(ndarray::Axis(0)));
            let fv = t.constant(fake.clone().insert_axis(ndarray::Axis(0)));
            let rp = t.avg_pool2(rv);
            let fp = t.avg_pool2(fv);
            let dr = nets.multiscale[1].forward(&mut t, &store, rp, true);
            let df = nets.multiscale[1].forward(&mut t, &store, fp, true);
            let (d, g) = gan_losses_tape(&mut t, dr, df);
            (t.scalar(d), t.scalar(g))
        };
        assert!((d2 - 0.5 * (d0 + ds1)).abs() < 1e-12);
        assert!((g2 - 0.5 * (g0 + gs1)).abs() < 1e-12);
    }

    #[test]
    fn zeroed_multiscale_scores_two_ln_two() {
        let (nets, mut store) = setup(16, 16, 15);
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        for n in names.iter().filter(|n| n.starts_with("disc.ms")) {
            let z = Arr::zeros(store.get(n).raw_dim());
            store.insert(n, z);
        }
        let (d, _) = multiscale_adv_loss(&nets, &store, &rand_img(16, 16, 16), &rand_img(16, 16, 17), 2).unwrap();
        assert!((d - 2.0 * LN2).abs() < 1e-9);
    }

    #[test]
    fn multiscale_rejects_too_small_images() {
        let (nets, store) = setup(4, 4, 18);
        let img = rand_img(4, 4, 19);
        assert!(multiscale_adv_loss(&nets, &store, &img, &img, 2).is_err());
        assert!(multiscale_adv_loss(&nets, &store, &img, &img, 0).is_err());
    }

    #[test]
    fn generator_gradient_flows_through_fake_image() {
        let (nets, store) = setup(8, 8, 20);
        let real = rand_img(8, 8, 21);
        let fake = rand_img(8, 8, 22);
        let mut tape = Tape::new();
        let rv = tape.constant(real.insert_axis(ndarray::Axis(0)));
        let fv = tape.leaf(fake.insert_axis(ndarray::Axis(0)));
        let dr = nets.vanilla.forward(&mut tape, &store, rv, true);
        let df = nets.vanilla.forward(&mut tape, &store, fv, true);
        let (_, g_loss) = gan_losses_tape(&mut tape, dr, df);
        let grads = tape.backward(g_loss);
        let gf = grads.get(fv).unwrap();
        assert!(gf.iter().any(|&v| v.abs() > 0.0));
    }
}
