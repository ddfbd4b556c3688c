//! 2-d convolution (im2col + matmul), nearest upsampling, average pooling.

use ndarray::{Array2, Array4, ArrayView, Ix4};

use super::Arr;

fn as4(a: &Arr) -> ArrayView<'_, f64, Ix4> {
    a.view().into_dimensionality::<Ix4>().expect("expected 4-d [B,C,H,W]")
}

pub fn out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

fn im2col(input: &ArrayView<'_, f64, Ix4>, b: usize, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (_, cin, h, w) = input.dim();
    let ho = out_size(h, k, stride, pad);
    let wo = out_size(w, k, stride, pad);
    let mut col = Array2::<f64>::zeros((cin * k * k, ho * wo));
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * wo + ox]] = input[[b, c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &Array2<f64>, cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> ndarray::Array3<f64> {
    let ho = out_size(h, k, stride, pad);
    let wo = out_size(w, k, stride, pad);
    let mut img = ndarray::Array3::<f64>::zeros((cin, h, w));
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        img[[c, iy as usize, ix as usize]] += col[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
    img
}

/// input [B,Cin,H,W] * weight [Cout,Cin,k,k] -> [B,Cout,Ho,Wo].
pub fn conv2d(input: &Arr, weight: &Arr, bias: Option<&Arr>, stride: usize, pad: usize) -> Arr {
    let inp = as4(input);
    let wv = as4(weight);
    let (bsz, cin, h, w) = inp.dim();
    let (cout, wcin, k, _) = wv.dim();
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    let ho = out_size(h, k, stride, pad);
    let wo = out_size(w, k, stride, pad);
    let wmat = wv.to_shape((cout, cin * k * k)).unwrap().to_owned();
    let mut out = Array4::<f64>::zeros((bsz, cout, ho, wo));
    for b in 0..bsz {
        let col = im2col(&inp, b, k, stride, pad);
        let o = wmat.dot(&col); // [cout, ho*wo]
        let o = o.into_shape_with_order((cout, ho, wo)).unwrap();
        out.index_axis_mut(ndarray::Axis(0), b).assign(&o);
    }
    if let Some(bias) = bias {
        let bs = bias.as_slice().expect("bias contiguous");
        assert_eq!(bs.len(), cout, "conv2d bias length");
        for b in 0..bsz {
            for c in 0..cout {
                out.slice_mut(ndarray::s![b, c, .., ..]).mapv_inplace(|x| x + bs[c]);
            }
        }
    }
    out.into_dyn()
}

pub fn conv2d_backward(
    input: &Arr,
    weight: &Arr,
    grad_out: &Arr,
    stride: usize,
    pad: usize,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> (Option<Arr>, Option<Arr>, Option<Arr>) {
    let inp = as4(input);
    let wv = as4(weight);
    let go = as4(grad_out);
    let (bsz, cin, h, w) = inp.dim();
    let (cout, _, k, _) = wv.dim();
    let (_, _, ho, wo) = go.dim();
    let wmat = wv.to_shape((cout, cin * k * k)).unwrap().to_owned();

    let mut gi = need_input.then(|| Array4::<f64>::zeros((bsz, cin, h, w)));
    let mut gw = need_weight.then(|| Array2::<f64>::zeros((cout, cin * k * k)));
    let mut gb = need_bias.then(|| vec![0.0f64; cout]);

    for b in 0..bsz {
        let gmat = go
            .index_axis(ndarray::Axis(0), b)
            .to_shape((cout, ho * wo))
            .unwrap()
            .to_owned();
        if need_input {
            let dcol = wmat.t().dot(&gmat);
            let img = col2im(&dcol, cin, h, w, k, stride, pad);
            gi.as_mut().unwrap().index_axis_mut(ndarray::Axis(0), b).assign(&img);
        }
        if need_weight {
            let col = im2col(&inp, b, k, stride, pad);
            *gw.as_mut().unwrap() += &gmat.dot(&col.t());
        }
        if let Some(gb) = gb.as_mut() {
            for c in 0..cout {
                gb[c] += gmat.row(c).sum();
            }
        }
    }
    (
        gi.map(|a| a.into_dyn()),
        gw.map(|a| a.into_shape_with_order((cout, cin, k, k)).unwrap().into_dyn()),
        gb.map(|v| ndarray::Array1::from(v).into_dyn()),
    )
}

pub fn upsample_nearest2(input: &Arr) -> Arr {
    let inp = as4(input);
    let (b, c, h, w) = inp.dim();
    let mut out = Array4::<f64>::zeros((b, c, h * 2, w * 2));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = inp[[bi, ci, y, x]];
                    out[[bi, ci, 2 * y, 2 * x]] = v;
                    out[[bi, ci, 2 * y, 2 * x + 1]] = v;
                    out[[bi, ci, 2 * y + 1, 2 * x]] = v;
                    out[[bi, ci, 2 * y + 1, 2 * x + 1]] = v;
                }
            }
        }
    }
    out.into_dyn()
}

pub fn upsample_nearest2_backward(grad_out: &Arr) -> Arr {
    let go = as4(grad_out);
    let (b, c, h2, w2) = go.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gi = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    gi[[bi, ci, y, x]] = go[[bi, ci, 2 * y, 2 * x]]
                        + go[[bi, ci, 2 * y, 2 * x + 1]]
                        + go[[bi, ci, 2 * y + 1, 2 * x]]
                        + go[[bi, ci, 2 * y + 1, 2 * x + 1]];
                }
            }
        }
    }
    gi.into_dyn()
}

pub fn avg_pool2(input: &Arr) -> Arr {
    let inp = as4(input);
    let (b, c, h, w) = inp.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array4::<f64>::zeros((b, c, ho, wo));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    out[[bi, ci, y, x]] = 0.25
                        * (inp[[bi, ci, 2 * y, 2 * x]]
                            + inp[[bi, ci, 2 * y, 2 * x + 1]]
                            + inp[[bi, ci, 2 * y + 1, 2 * x]]
                            + inp[[bi, ci, 2 * y + 1, 2 * x + 1]]);
                }
            }
        }
    }
    out.into_dyn()
}

pub fn avg_pool2_backward(grad_out: &Arr) -> Arr {
    let go = as4(grad_out);
    let (b, c, ho, wo) = go.dim();
    let mut gi = Array4::<f64>::zeros((b, c, ho * 2, wo * 2));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    let v = 0.25 * go[[bi, ci, y, x]];
                    gi[[bi, ci, 2 * y, 2 * x]] = v;
                    gi[[bi, ci, 2 * y, 2 * x + 1]] = v;
                    gi[[bi, ci, 2 * y + 1, 2 * x]] = v;
                    gi[[bi, ci, 2 * y + 1, 2 * x + 1]] = v;
                }
            }
        }
    }
    gi.into_dyn()
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
    fn conv2d_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_arr(&[1, 1, 4, 4], &mut rng);
        let mut w = Arr::zeros(IxDyn(&[1, 1, 3, 3]));
        w[[0, 0, 1, 1]] = 1.0;
        let y = conv2d(&x, &w, None, 1, 1);
        assert!(rel_err(&y, &x) < 1e-12);
    }

    #[test]
    fn conv2d_stride2_shape() {
        let x = Arr::zeros(IxDyn(&[2, 3, 8, 6]));
        let w = Arr::zeros(IxDyn(&[5, 3, 3, 3]));
        let y = conv2d(&x, &w, None, 2, 1);
        assert_eq!(y.shape(), &[2, 5, 4, 3]);
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_arr(&[2, 2, 5, 4], &mut rng);
        let w = rand_arr(&[3, 2, 3, 3], &mut rng);
        let b = rand_arr(&[3], &mut rng);
        let run = |xa: &Arr, wa: &Arr, ba: &Arr| {
            let mut t = Tape::new();
            let xv = t.leaf(xa.clone());
            let wv = t.leaf(wa.clone());
            let bv = t.leaf(ba.clone());
            let y = t.conv2d(xv, wv, Some(bv), 1, 1);
            let sq = t.square(y);
            let l = t.sum(sq);
            (t, xv, wv, bv, l)
        };
        let (mut t, xv, wv, bv, l) = run(&x, &w, &b);
        let grads = t.backward(l);
        let gx = numeric_grad(
            |xa| {
                let (t, _, _, _, l) = run(xa, &w, &b);
                t.scalar(l)
            },
            &x,
            1e-5,
        );
        let gw = numeric_grad(
            |wa| {
                let (t, _, _, _, l) = run(&x, wa, &b);
                t.scalar(l)
            },
            &w,
            1e-5,
        );
        let gb = numeric_grad(
            |ba| {
                let (t, _, _, _, l) = run(&x, &w, ba);
                t.scalar(l)
            },
            &b,
            1e-5,
        );
        assert!(rel_err(grads.get(xv).unwrap(), &gx) < 1e-6);
        assert!(rel_err(grads.get(wv).unwrap(), &gw) < 1e-6);
        assert!(rel_err(grads.get(bv).unwrap(), &gb) < 1e-6);
    }

    #[test]
    fn pool_and_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_arr(&[1, 2, 4, 4], &mut rng);
        for which in 0..2 {
            let run = |xa: &Arr| {
                let mut t = Tape::new();
                let v = t.leaf(xa.clone());
                let y = if which == 0 { t.avg_pool2(v) } else { t.upsample_nearest2(v) };
                let sq = t.square(y);
                let l = t.sum(sq);
                (t, v, l)
            };
            let (mut t, v, l) = run(&x);
            let grads = t.backward(l);
            let gn = numeric_grad(
                |xa| {
                    let (t, _, l) = run(xa);
                    t.scalar(l)
                },
                &x,
                1e-5,
            );
            assert!(rel_err(grads.get(v).unwrap(), &gn) < 1e-6);
        }
    }
}
