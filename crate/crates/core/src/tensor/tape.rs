//! The op arena and backward pass.

use std::collections::HashMap;

use ndarray::{Axis, Ix2, IxDyn, Slice};

use super::{conv, warp, Arr};

/// Handle into a [`Tape`]'s node arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat { axis: usize, parts: Vec<Var> },
    Slice { src: Var, axis: usize, start: usize, len: usize },
    MatMul(Var, Var),
    Transpose2(Var),
    SoftmaxRows(Var),
    MaxRows(Var),
    BroadcastChannel(Var),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize },
    UpsampleNearest2(Var),
    AvgPool2(Var),
    Warp { input: Var, flow: Var },
}

struct Node {
    value: Arr,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Build a fresh one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Arr, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.len(), 1);
        a.iter().next().copied().unwrap_or(0.0)
    }

    /// Constant input: no gradient tracked.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (network input or parameter value).
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter; deduplicated per tape so each
    /// parameter appears exactly once and its gradient accumulates.
    pub fn named_leaf(&mut self, name: &str, value: Arr) -> Var {
        if let Some(&v) = self.param_vars.get(name) {
            return v;
        }
        let v = self.leaf(value);
        self.param_vars.insert(name.to_string(), v);
        v
    }

    pub fn named_leaves(&self) -> impl Iterator<Item = (&str, Var)> {
        self.param_vars.iter().map(|(n, &v)| (n.as_str(), v))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape");
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape");
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        let rg = self.rg(a);
        self.push(v, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        self.push(v, Op::Log(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        let rg = self.rg(a);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(ndarray::arr1(&[s]).into_dyn(), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a).mean().unwrap_or(0.0);
        let rg = self.rg(a);
        self.push(ndarray::arr1(&[m]).into_dyn(), Op::Mean(a), rg)
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), shape.iter().product::<usize>(), "reshape size mismatch");
        let flat: Vec<f64> = src.iter().copied().collect();
        let v = Arr::from_shape_vec(IxDyn(shape), flat).unwrap();
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::Concat { axis, parts: parts.to_vec() }, rg)
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Slice { src: a, axis, start, len }, rg)
    }

    /// Repeat a single-channel map [B,1,H,W] across `c` channels.
    pub fn broadcast_channel(&mut self, a: Var, c: usize) -> Var {
        let val = self.value(a);
        assert_eq!(val.shape()[1], 1, "broadcast_channel expects 1 channel");
        let views: Vec<_> = (0..c).map(|_| val.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("broadcast");
        let rg = self.rg(a);
        self.push(v, Op::BroadcastChannel(a), rg)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("matmul lhs 2-d");
        let bv = self.value(b).view().into_dimensionality::<Ix2>().expect("matmul rhs 2-d");
        let v = av.dot(&bv).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("transpose 2-d")
            .t()
            .to_owned()
            .into_dyn();
        let rg = self.rg(a);
        self.push(v, Op::Transpose2(a), rg)
    }

    /// Row-wise softmax of a 2-d array, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("softmax 2-d");
        let mut v = av.to_owned();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        let rg = self.rg(a);
        self.push(v.into_dyn(), Op::SoftmaxRows(a), rg)
    }

    /// Row-wise maximum of a 2-d array, yielding an [N,1] column. Gradient
    /// routes to the first maximal entry per row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("max_rows 2-d");
        let n = av.nrows();
        let mut v = ndarray::Array2::<f64>::zeros((n, 1));
        for (i, row) in av.rows().into_iter().enumerate() {
            v[[i, 0]] = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
        let rg = self.rg(a);
        self.push(v.into_dyn(), Op::MaxRows(a), rg)
    }

    // ---- conv / spatial ----

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let v = conv::conv2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), stride, pad);
        let rg = self.rg(input) || self.rg(weight) || bias.map(|b| self.rg(b)).unwrap_or(false);
        self.push(v, Op::Conv2d { input, weight, bias, stride, pad }, rg)
    }

    pub fn upsample_nearest2(&mut self, a: Var) -> Var {
        let v = conv::upsample_nearest2(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::UpsampleNearest2(a), rg)
    }

    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let v = conv::avg_pool2(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::AvgPool2(a), rg)
    }

    /// Bilinear backward warp of `input` [B,C,H,W] by `flow` [B,2,H,W]
    /// (dx, dy in pixels), border-clamped.
    pub fn warp(&mut self, input: Var, flow: Var) -> Var {
        let v = warp::warp_forward(self.value(input), self.value(flow));
        let rg = self.rg(input) || self.rg(flow);
        self.push(v, Op::Warp { input, flow }, rg)
    }

    // ---- backward ----

    /// Reverse pass from a scalar `loss`. Returns per-node adjoints.
    pub fn backward(&mut self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Arr::ones(self.nodes[loss.0].value.raw_dim()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accum(grads: &mut [Option<Arr>], v: Var, g: Arr) {
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Arr, grads: &mut [Option<Arr>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    Self::accum(grads, *a, g.clone());
                }
                if needs(*b) {
                    Self::accum(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    Self::accum(grads, *a, g.clone());
                }
                if needs(*b) {
                    Self::accum(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    Self::accum(grads, *a, g * val(*b));
                }
                if needs(*b) {
                    Self::accum(grads, *b, g * val(*a));
                }
            }
            Op::Neg(a) => {
                if needs(*a) {
                    Self::accum(grads, *a, -g);
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    Self::accum(grads, *a, g * *c);
                }
            }
            Op::AddScalar(a) => {
                if needs(*a) {
                    Self::accum(grads, *a, g.clone());
                }
            }
            Op::LeakyRelu(a, slope) => {
                if needs(*a) {
                    let mask = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { *slope });
                    Self::accum(grads, *a, g * &mask);
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    let y = &self.nodes[i].value;
                    Self::accum(grads, *a, g * &(y * &(1.0 - y)));
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    let y = &self.nodes[i].value;
                    Self::accum(grads, *a, g * &(1.0 - y * y));
                }
            }
            Op::Log(a) => {
                if needs(*a) {
                    Self::accum(grads, *a, g / val(*a));
                }
            }
            Op::Abs(a) => {
                if needs(*a) {
                    let s = val(*a).mapv(f64::signum);
                    Self::accum(grads, *a, g * &s);
                }
            }
            Op::Clamp(a, lo, hi) => {
                if needs(*a) {
                    let mask = val(*a).mapv(|x| if x > *lo && x < *hi { 1.0 } else { 0.0 });
                    Self::accum(grads, *a, g * &mask);
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let s = g.iter().next().copied().unwrap();
                    Self::accum(grads, *a, Arr::from_elem(val(*a).raw_dim(), s));
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let n = val(*a).len() as f64;
                    let s = g.iter().next().copied().unwrap() / n;
                    Self::accum(grads, *a, Arr::from_elem(val(*a).raw_dim(), s));
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let back = Arr::from_shape_vec(val(*a).raw_dim(), flat).expect("reshape backward");
                    Self::accum(grads, *a, back);
                }
            }
            Op::Concat { axis, parts } => {
                let mut start = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if needs(p) {
                        let piece = g
                            .slice_axis(Axis(*axis), Slice::from(start..start + len))
                            .to_owned();
                        Self::accum(grads, p, piece);
                    }
                    start += len;
                }
            }
            Op::Slice { src, axis, start, len } => {
                if needs(*src) {
                    let mut back = Arr::zeros(val(*src).raw_dim());
                    back.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + *len))
                        .assign(g);
                    Self::accum(grads, *src, back);
                }
            }
            Op::BroadcastChannel(a) => {
                if needs(*a) {
                    let summed = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    Self::accum(grads, *a, summed);
                }
            }
            Op::MatMul(a, b) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                if needs(*a) {
                    let bv = val(*b).view().into_dimensionality::<Ix2>().unwrap();
                    Self::accum(grads, *a, gv.dot(&bv.t()).into_dyn());
                }
                if needs(*b) {
                    let av = val(*a).view().into_dimensionality::<Ix2>().unwrap();
                    Self::accum(grads, *b, av.t().dot(&gv).into_dyn());
                }
            }
            Op::Transpose2(a) => {
                if needs(*a) {
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    Self::accum(grads, *a, gv.t().to_owned().into_dyn());
                }
            }
            Op::SoftmaxRows(a) => {
                if needs(*a) {
                    let y = self.nodes[i].value.view().into_dimensionality::<Ix2>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut out = gv.to_owned();
                    for (mut orow, (yrow, grow)) in
                        out.rows_mut().into_iter().zip(y.rows().into_iter().zip(gv.rows()))
                    {
                        let dot: f64 = yrow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
                        for (o, (yv, gv)) in orow.iter_mut().zip(yrow.iter().zip(grow.iter())) {
                            *o = yv * (gv - dot);
                        }
                    }
                    Self::accum(grads, *a, out.into_dyn());
                }
            }
            Op::MaxRows(a) => {
                if needs(*a) {
                    let av = val(*a).view().into_dimensionality::<Ix2>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut back = ndarray::Array2::<f64>::zeros(av.dim());
                    for (i, row) in av.rows().into_iter().enumerate() {
                        let mut best = 0usize;
                        for (j, &v) in row.iter().enumerate() {
                            if v > row[best] {
                                best = j;
                            }
                        }
                        back[[i, best]] = gv[[i, 0]];
                    }
                    Self::accum(grads, *a, back.into_dyn());
                }
            }
            Op::Conv2d { input, weight, bias, stride, pad } => {
                let (gi, gw, gb) = conv::conv2d_backward(
                    val(*input),
                    val(*weight),
                    g,
                    *stride,
                    *pad,
                    needs(*input),
                    needs(*weight),
                    bias.map(|b| needs(b)).unwrap_or(false),
                );
                if let Some(gi) = gi {
                    Self::accum(grads, *input, gi);
                }
                if let Some(gw) = gw {
                    Self::accum(grads, *weight, gw);
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    Self::accum(grads, *b, gb);
                }
            }
            Op::UpsampleNearest2(a) => {
                if needs(*a) {
                    Self::accum(grads, *a, conv::upsample_nearest2_backward(g));
                }
            }
            Op::AvgPool2(a) => {
                if needs(*a) {
                    Self::accum(grads, *a, conv::avg_pool2_backward(g));
                }
            }
            Op::Warp { input, flow } => {
                let (gi, gf) = warp::warp_backward(val(*input), val(*flow), g, needs(*input), needs(*flow));
                if let Some(gi) = gi {
                    Self::accum(grads, *input, gi);
                }
                if let Some(gf) = gf {
                    Self::accum(grads, *flow, gf);
                }
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Arr>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads[v.0].as_ref()
    }
}

/// Central finite differences of a scalar function at `x`.
pub fn numeric_grad(mut f: impl FnMut(&Arr) -> f64, x: &Arr, eps: f64) -> Arr {
    let mut g = Arr::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = xp.as_slice_mut().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + eps;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - eps;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * eps);
    }
    g
}
