//! Differentiable bilinear backward warping with border clamping.
//!
//! Output(b,c,y,x) samples input at (x + dx, y + dy) where flow is [B,2,H,W]
//! with channel 0 = dx, channel 1 = dy, both in pixels. Sample coordinates are
//! clamped to the image rectangle; gradients w.r.t. the flow are zero where
//! the clamp is active.

use ndarray::{Array4, ArrayView, Ix4};

use super::Arr;

fn as4(a: &Arr) -> ArrayView<'_, f64, Ix4> {
    a.view().into_dimensionality::<Ix4>().expect("expected 4-d [B,C,H,W]")
}

struct Sample {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    x_clamped: bool,
    y_clamped: bool,
}

fn sample_at(x: f64, y: f64, h: usize, w: usize) -> Sample {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor().min((w - 1) as f64) as usize;
    let y0 = yc.floor().min((h - 1) as f64) as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    Sample {
        x0,
        y0,
        x1,
        y1,
        fx: xc - x0 as f64,
        fy: yc - y0 as f64,
        x_clamped: xc != x,
        y_clamped: yc != y,
    }
}

pub fn warp_forward(input: &Arr, flow: &Arr) -> Arr {
    let inp = as4(input);
    let fl = as4(flow);
    let (bsz, c, h, w) = inp.dim();
    assert_eq!(fl.dim().1, 2, "flow must have 2 channels (dx, dy)");
    assert_eq!((fl.dim().0, fl.dim().2, fl.dim().3), (bsz, h, w), "flow spatial mismatch");
    let mut out = Array4::<f64>::zeros((bsz, c, h, w));
    for b in 0..bsz {
        for y in 0..h {
            for x in 0..w {
                let sx = x as f64 + fl[[b, 0, y, x]];
                let sy = y as f64 + fl[[b, 1, y, x]];
                let s = sample_at(sx, sy, h, w);
                for ci in 0..c {
                    let v00 = inp[[b, ci, s.y0, s.x0]];
                    let v01 = inp[[b, ci, s.y0, s.x1]];
                    let v10 = inp[[b, ci, s.y1, s.x0]];
                    let v11 = inp[[b, ci, s.y1, s.x1]];
                    out[[b, ci, y, x]] = v00 * (1.0 - s.fx) * (1.0 - s.fy)
                        + v01 * s.fx * (1.0 - s.fy)
                        + v10 * (1.0 - s.fx) * s.fy
                        + v11 * s.fx * s.fy;
                }
            }
        }
    }
    out.into_dyn()
}

pub fn warp_backward(
    input: &Arr,
    flow: &Arr,
    grad_out: &Arr,
    need_input: bool,
    need_flow: bool,
) -> (Option<Arr>, Option<Arr>) {
    let inp = as4(input);
    let fl = as4(flow);
    let go = as4(grad_out);
    let (bsz, c, h, w) = inp.dim();
    let mut gi = need_input.then(|| Array4::<f64>::zeros((bsz, c, h, w)));
    let mut gf = need_flow.then(|| Array4::<f64>::zeros((bsz, 2, h, w)));
    for b in 0..bsz {
        for y in 0..h {
            for x in 0..w {
                let sx = x as f64 + fl[[b, 0, y, x]];
                let sy = y as f64 + fl[[b, 1, y, x]];
                let s = sample_at(sx, sy, h, w);
                let mut dx_acc = 0.0;
                let mut dy_acc = 0.0;
                for ci in 0..c {
                    let g = go[[b, ci, y, x]];
                    if let Some(gi) = gi.as_mut() {
                        gi[[b, ci, s.y0, s.x0]] += g * (1.0 - s.fx) * (1.0 - s.fy);
                        gi[[b, ci, s.y0, s.x1]] += g * s.fx * (1.0 - s.fy);
                        gi[[b, ci, s.y1, s.x0]] += g * (1.0 - s.fx) * s.fy;
                        gi[[b, ci, s.y1, s.x1]] += g * s.fx * s.fy;
                    }
                    if need_flow {
                        let v00 = inp[[b, ci, s.y0, s.x0]];
                        let v01 = inp[[b, ci, s.y0, s.x1]];
                        let v10 = inp[[b, ci, s.y1, s.x0]];
                        let v11 = inp[[b, ci, s.y1, s.x1]];
                        // d(out)/d(fx), d(out)/d(fy)
                        dx_acc += g * ((v01 - v00) * (1.0 - s.fy) + (v11 - v10) * s.fy);
                        dy_acc += g * ((v10 - v00) * (1.0 - s.fx) + (v11 - v01) * s.fx);
                    }
                }
                if let Some(gf) = gf.as_mut() {
                    if !s.x_clamped {
                        gf[[b, 0, y, x]] = dx_acc;
                    }
                    if !s.y_clamped {
                        gf[[b, 1, y, x]] = dy_acc;
                    }
                }
            }
        }
    }
    (gi.map(|a| a.into_dyn()), gf.map(|a| a.into_dyn()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{numeric_grad, Tape};
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
    fn zero_flow_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_arr(&[1, 3, 5, 4], &mut rng);
        let flow = Arr::zeros(IxDyn(&[1, 2, 5, 4]));
        let y = warp_forward(&x, &flow);
        assert!(rel_err(&y, &x) < 1e-14);
    }

    #[test]
    fn integer_flow_matches_index_shift_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_arr(&[1, 2, 6, 7], &mut rng);
        let mut flow = Arr::zeros(IxDyn(&[1, 2, 6, 7]));
        flow.slice_mut(ndarray::s![0, 0, .., ..]).fill(2.0); // dx = 2
        let y = warp_forward(&x, &flow);
        // oracle: out(y, x) = in(y, clamp(x + 2))
        for ci in 0..2 {
            for yy in 0..6 {
                for xx in 0..7 {
                    let sx = (xx + 2).min(6);
                    let expect = x[[0, ci, yy, sx]];
                    assert!((y[[0, ci, yy, xx]] - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn warp_gradients_match_finite_differences_at_interior_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_arr(&[1, 2, 6, 6], &mut rng);
        // fractional flows keeping all samples strictly interior and away
        // from integer grid lines (bilinear kinks)
        let flow = Arr::from_shape_fn(IxDyn(&[1, 2, 6, 6]), |_| rng.gen_range(0.25..0.75));
        let run = |xa: &Arr, fa: &Arr| {
            let mut t = Tape::new();
            let xv = t.leaf(xa.clone());
            let fv = t.leaf(fa.clone());
            let y = t.warp(xv, fv);
            let sq = t.square(y);
            let l = t.sum(sq);
            (t, xv, fv, l)
        };
        let (mut t, xv, fv, l) = run(&x, &flow);
        let grads = t.backward(l);
        let gx = numeric_grad(
            |xa| {
                let (t, _, _, l) = run(xa, &flow);
                t.scalar(l)
            },
            &x,
            1e-6,
        );
        let gf = numeric_grad(
            |fa| {
                let (t, _, _, l) = run(&x, fa);
                t.scalar(l)
            },
            &flow,
            1e-6,
        );
        assert!(rel_err(grads.get(xv).unwrap(), &gx) < 1e-6);
        assert!(rel_err(grads.get(fv).unwrap(), &gf) < 1e-4);
    }
}
