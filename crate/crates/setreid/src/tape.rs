//! Reverse-mode autodiff on dynamically shaped `f64` arrays.
//!
//! A [`Graph`] records every operation; [`Graph::backward`] replays the
//! tape in reverse and accumulates vector-Jacobian products. All outputs
//! are stored in standard layout so reshapes never copy-on-demand, and
//! everything runs single threaded, which keeps training bitwise
//! reproducible.

use ndarray::{ArrayD, Axis, Ix2, IxDyn};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tid(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(Tid, Tid),
    /// rhs shape must be a suffix of lhs shape; rhs broadcasts over the
    /// leading axes.
    AddBroadcast(Tid, Tid),
    Sub(Tid, Tid),
    Mul(Tid, Tid),
    Scale(Tid, f64),
    AddScalar(Tid),
    /// `[..., k] x [k, n] -> [..., n]`, rhs strictly 2-D.
    Matmul(Tid, Tid),
    /// `[b, m, k] x [b, k, n] -> [b, m, n]`.
    Bmm(Tid, Tid),
    Permute(Tid, Vec<usize>),
    Reshape(Tid),
    Concat(Vec<Tid>, usize),
    Slice(Tid, usize, usize, usize),
    Gelu(Tid),
    Relu(Tid),
    Softplus(Tid),
    Sqrt(Tid),
    Softmax(Tid),
    LogSoftmax(Tid),
    LayerNorm(Tid, Tid, Tid),
    Sum(Tid),
    Mean(Tid),
    SumAxis(Tid, usize),
    MeanAxis(Tid, usize),
    /// `[s...] -> [t, s...]`.
    RepeatLeading(Tid),
    GatherRows(Tid, Vec<usize>),
    /// Select scalar entries of a 2-D array -> 1-D.
    Gather2d(Tid, Vec<(usize, usize)>),
    /// `[b, d] -> [b, b]` of squared Euclidean distances.
    PairwiseSqdist(Tid),
    /// Normalize along the last axis.
    L2Normalize(Tid),
}

pub struct Graph {
    values: Vec<ArrayD<f64>>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Tid`].
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, t: Tid) -> Option<&ArrayD<f64>> {
        self.grads[t.0].as_ref()
    }
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Tid {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Tid(self.values.len() - 1)
    }

    fn any_grad(&self, ids: &[Tid]) -> bool {
        ids.iter().any(|t| self.needs_grad[t.0])
    }

    pub fn value(&self, t: Tid) -> &ArrayD<f64> {
        &self.values[t.0]
    }

    pub fn shape(&self, t: Tid) -> &[usize] {
        self.values[t.0].shape()
    }

    pub fn scalar_value(&self, t: Tid) -> f64 {
        debug_assert_eq!(self.values[t.0].len(), 1);
        *self.values[t.0].iter().next().unwrap()
    }

    /// Trainable input: gradients will be accumulated for it.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Tid {
        self.push(value, Op::Leaf, true)
    }

    /// Constant input: no gradient is tracked through it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Tid {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Tid {
        debug_assert_eq!(self.shape(a), self.shape(b));
        let v = &self.values[a.0] + &self.values[b.0];
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn add_broadcast(&mut self, a: Tid, b: Tid) -> Tid {
        let (sa, sb) = (self.shape(a), self.shape(b));
        debug_assert!(sa.len() >= sb.len() && sa[sa.len() - sb.len()..] == *sb);
        let v = &self.values[a.0] + &self.values[b.0];
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::AddBroadcast(a, b), g)
    }

    pub fn sub(&mut self, a: Tid, b: Tid) -> Tid {
        debug_assert_eq!(self.shape(a), self.shape(b));
        let v = &self.values[a.0] - &self.values[b.0];
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Tid {
        debug_assert_eq!(self.shape(a), self.shape(b));
        let v = &self.values[a.0] * &self.values[b.0];
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: Tid, c: f64) -> Tid {
        let v = &self.values[a.0] * c;
        let g = self.needs_grad[a.0];
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn add_scalar(&mut self, a: Tid, c: f64) -> Tid {
        let v = &self.values[a.0] + c;
        let g = self.needs_grad[a.0];
        self.push(v, Op::AddScalar(a), g)
    }

    /// Contracts the last axis of `a` with the first axis of 2-D `b`.
    pub fn matmul(&mut self, a: Tid, b: Tid) -> Tid {
        let v = matmul_nd(&self.values[a.0], &self.values[b.0]);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Matmul(a, b), g)
    }

    pub fn bmm(&mut self, a: Tid, b: Tid) -> Tid {
        let v = bmm_nd(&self.values[a.0], &self.values[b.0]);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Bmm(a, b), g)
    }

    pub fn permute(&mut self, a: Tid, perm: &[usize]) -> Tid {
        let v = self.values[a.0]
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .to_owned();
        let g = self.needs_grad[a.0];
        self.push(v, Op::Permute(a, perm.to_vec()), g)
    }

    pub fn reshape(&mut self, a: Tid, shape: &[usize]) -> Tid {
        let v = self.values[a.0]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let g = self.needs_grad[a.0];
        self.push(v, Op::Reshape(a), g)
    }

    pub fn concat(&mut self, parts: &[Tid], axis: usize) -> Tid {
        let views: Vec<_> = parts.iter().map(|t| self.values[t.0].view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views)
            .expect("concat: incompatible shapes")
            .as_standard_layout()
            .to_owned();
        let g = self.any_grad(parts);
        self.push(v, Op::Concat(parts.to_vec(), axis), g)
    }

    pub fn slice(&mut self, a: Tid, axis: usize, start: usize, end: usize) -> Tid {
        let v = self.values[a.0]
            .view()
            .split_at(Axis(axis), end)
            .0
            .split_at(Axis(axis), start)
            .1
            .as_standard_layout()
            .to_owned();
        let g = self.needs_grad[a.0];
        self.push(v, Op::Slice(a, axis, start, end), g)
    }

    pub fn gelu(&mut self, a: Tid) -> Tid {
        let v = self.values[a.0].mapv(gelu_scalar);
        let g = self.needs_grad[a.0];
        self.push(v, Op::Gelu(a), g)
    }

    pub fn relu(&mut self, a: Tid) -> Tid {
        let v = self.values[a.0].mapv(|x| x.max(0.0));
        let g = self.needs_grad[a.0];
        self.push(v, Op::Relu(a), g)
    }

    pub fn softplus(&mut self, a: Tid) -> Tid {
        // ln(1+e^x), stable for large |x|
        let v = self.values[a.0].mapv(|x| {
            if x > 30.0 {
                x
            } else if x < -30.0 {
                x.exp()
            } else {
                x.exp().ln_1p()
            }
        });
        let g = self.needs_grad[a.0];
        self.push(v, Op::Softplus(a), g)
    }

    pub fn sqrt(&mut self, a: Tid) -> Tid {
        let v = self.values[a.0].mapv(f64::sqrt);
        let g = self.needs_grad[a.0];
        self.push(v, Op::Sqrt(a), g)
    }

    pub fn softmax(&mut self, a: Tid) -> Tid {
        let v = softmax_last(&self.values[a.0]);
        let g = self.needs_grad[a.0];
        self.push(v, Op::Softmax(a), g)
    }

    pub fn log_softmax(&mut self, a: Tid) -> Tid {
        let v = log_softmax_last(&self.values[a.0]);
        let g = self.needs_grad[a.0];
        self.push(v, Op::LogSoftmax(a), g)
    }

    /// LayerNorm over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Tid, gamma: Tid, beta: Tid) -> Tid {
        let v = layer_norm_forward(&self.values[x.0], &self.values[gamma.0], &self.values[beta.0]);
        let g = self.any_grad(&[x, gamma, beta]);
        self.push(v, Op::LayerNorm(x, gamma, beta), g)
    }

    pub fn sum(&mut self, a: Tid) -> Tid {
        let v = ndarray::arr0(self.values[a.0].sum()).into_dyn();
        let g = self.needs_grad[a.0];
        self.push(v, Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Tid) -> Tid {
        let n = self.values[a.0].len() as f64;
        let v = ndarray::arr0(self.values[a.0].sum() / n).into_dyn();
        let g = self.needs_grad[a.0];
        self.push(v, Op::Mean(a), g)
    }

    pub fn sum_axis(&mut self, a: Tid, axis: usize) -> Tid {
        let v = self.values[a.0].sum_axis(Axis(axis));
        let g = self.needs_grad[a.0];
        self.push(v, Op::SumAxis(a, axis), g)
    }

    pub fn mean_axis(&mut self, a: Tid, axis: usize) -> Tid {
        let v = self.values[a.0].mean_axis(Axis(axis)).unwrap();
        let g = self.needs_grad[a.0];
        self.push(v, Op::MeanAxis(a, axis), g)
    }

    pub fn repeat_leading(&mut self, a: Tid, t: usize) -> Tid {
        let mut shape = vec![t];
        shape.extend_from_slice(self.shape(a));
        let v = self.values[a.0]
            .broadcast(IxDyn(&shape))
            .unwrap()
            .as_standard_layout()
            .to_owned();
        let g = self.needs_grad[a.0];
        self.push(v, Op::RepeatLeading(a), g)
    }

    pub fn gather_rows(&mut self, a: Tid, rows: &[usize]) -> Tid {
        let v = self.values[a.0].select(Axis(0), rows);
        let g = self.needs_grad[a.0];
        self.push(v, Op::GatherRows(a, rows.to_vec()), g)
    }

    pub fn gather2d(&mut self, a: Tid, idx: &[(usize, usize)]) -> Tid {
        let src = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let v = ArrayD::from_shape_vec(
            IxDyn(&[idx.len()]),
            idx.iter().map(|&(r, c)| src[[r, c]]).collect(),
        )
        .unwrap();
        let g = self.needs_grad[a.0];
        self.push(v, Op::Gather2d(a, idx.to_vec()), g)
    }

    pub fn pairwise_sqdist(&mut self, a: Tid) -> Tid {
        let x = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let b = x.nrows();
        let mut out = ndarray::Array2::<f64>::zeros((b, b));
        for i in 0..b {
            for j in 0..b {
                let mut acc = 0.0;
                for d in 0..x.ncols() {
                    let diff = x[[i, d]] - x[[j, d]];
                    acc += diff * diff;
                }
                out[[i, j]] = acc;
            }
        }
        let g = self.needs_grad[a.0];
        self.push(out.into_dyn(), Op::PairwiseSqdist(a), g)
    }

    pub fn l2_normalize(&mut self, a: Tid) -> Tid {
        let v = l2_normalize_last(&self.values[a.0]);
        let g = self.needs_grad[a.0];
        self.push(v, Op::L2Normalize(a), g)
    }

    /// Runs reverse-mode accumulation from a scalar root.
    pub fn backward(&self, root: Tid) -> Grads {
        assert_eq!(
            self.values[root.0].len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.values.len()];
        grads[root.0] = Some(ArrayD::ones(self.values[root.0].raw_dim()));

        for i in (0..self.values.len()).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<f64>>], t: Tid, delta: ArrayD<f64>) {
        if !self.needs_grad[t.0] {
            return;
        }
        match &mut grads[t.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, node: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.ops[node] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddBroadcast(a, b) => {
                self.acc(grads, *a, g.clone());
                let lead = g.ndim() - self.values[b.0].ndim();
                let mut gb = g.clone();
                for _ in 0..lead {
                    gb = gb.sum_axis(Axis(0));
                }
                self.acc(grads, *b, gb);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g.clone());
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, g * &self.values[b.0]);
                self.acc(grads, *b, g * &self.values[a.0]);
            }
            Op::Scale(a, c) => self.acc(grads, *a, g * *c),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Matmul(a, b) => {
                let bv = self.values[b.0].view().into_dimensionality::<Ix2>().unwrap();
                // dA = G @ B^T
                let bt = bv.t().as_standard_layout().to_owned().into_dyn();
                self.acc(grads, *a, matmul_nd(g, &bt));
                // dB = A_2d^T @ G_2d
                let k = self.values[a.0].shape().last().copied().unwrap();
                let n = bv.ncols();
                let m: usize = self.values[a.0].len() / k;
                let a2 = self.values[a.0]
                    .view()
                    .into_shape_with_order((m, k))
                    .unwrap();
                let g2 = g.view().into_shape_with_order((m, n)).unwrap();
                self.acc(grads, *b, a2.t().dot(&g2).into_dyn());
            }
            Op::Bmm(a, b) => {
                let av = self.values[a.0].view();
                let bv = self.values[b.0].view();
                let (nb, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = bv.shape()[2];
                let mut da = ArrayD::<f64>::zeros(av.raw_dim());
                let mut db = ArrayD::<f64>::zeros(bv.raw_dim());
                for i in 0..nb {
                    let gi = g
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .as_standard_layout()
                        .to_owned();
                    let ai = av
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .as_standard_layout()
                        .to_owned();
                    let bi = bv
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .as_standard_layout()
                        .to_owned();
                    da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                    db.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
                let _ = (m, k, n);
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let ga = g
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned();
                self.acc(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let ga = g
                    .clone()
                    .into_shape_with_order(self.values[a.0].raw_dim())
                    .unwrap();
                self.acc(grads, *a, ga);
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for t in parts {
                    let len = self.values[t.0].shape()[*axis];
                    let gp = g
                        .view()
                        .split_at(Axis(*axis), start + len)
                        .0
                        .split_at(Axis(*axis), start)
                        .1
                        .as_standard_layout()
                        .to_owned();
                    self.acc(grads, *t, gp);
                    start += len;
                }
            }
            Op::Slice(a, axis, start, _end) => {
                let mut ga = ArrayD::<f64>::zeros(self.values[a.0].raw_dim());
                let len = g.shape()[*axis];
                ga.view_mut()
                    .split_at(Axis(*axis), start + len)
                    .0
                    .split_at(Axis(*axis), *start)
                    .1
                    .assign(g);
                self.acc(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = g * &self.values[a.0].mapv(gelu_grad_scalar);
                self.acc(grads, *a, ga);
            }
            Op::Relu(a) => {
                let mask = self.values[a.0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.acc(grads, *a, g * &mask);
            }
            Op::Softplus(a) => {
                let s = self.values[a.0].mapv(|x| 1.0 / (1.0 + (-x).exp()));
                self.acc(grads, *a, g * &s);
            }
            Op::Sqrt(a) => {
                let ga = g * &self.values[node].mapv(|y| 0.5 / y);
                self.acc(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let y = &self.values[node];
                let gy = g * y;
                let s = sum_last_keepdim(&gy);
                let ga = &gy - &(y * &s);
                self.acc(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let y = self.values[node].mapv(f64::exp);
                let s = sum_last_keepdim(g);
                let ga = g - &(&y * &s);
                self.acc(grads, *a, ga);
            }
            Op::LayerNorm(x, gamma, beta) => {
                let (gx, ggamma, gbeta) = layer_norm_backward(
                    &self.values[x.0],
                    &self.values[gamma.0],
                    g,
                );
                self.acc(grads, *x, gx);
                self.acc(grads, *gamma, ggamma);
                self.acc(grads, *beta, gbeta);
            }
            Op::Sum(a) => {
                let c = *g.iter().next().unwrap();
                self.acc(
                    grads,
                    *a,
                    ArrayD::from_elem(self.values[a.0].raw_dim(), c),
                );
            }
            Op::Mean(a) => {
                let n = self.values[a.0].len() as f64;
                let c = *g.iter().next().unwrap() / n;
                self.acc(
                    grads,
                    *a,
                    ArrayD::from_elem(self.values[a.0].raw_dim(), c),
                );
            }
            Op::SumAxis(a, axis) => {
                let shape = self.values[a.0].raw_dim();
                let gexp = g.clone().insert_axis(Axis(*axis));
                let ga = gexp.broadcast(shape.clone()).unwrap().to_owned();
                self.acc(grads, *a, ga);
            }
            Op::MeanAxis(a, axis) => {
                let shape = self.values[a.0].raw_dim();
                let n = self.values[a.0].shape()[*axis] as f64;
                let gexp = g.clone().insert_axis(Axis(*axis));
                let ga = gexp.broadcast(shape.clone()).unwrap().to_owned() / n;
                self.acc(grads, *a, ga);
            }
            Op::RepeatLeading(a) => {
                self.acc(grads, *a, g.sum_axis(Axis(0)));
            }
            Op::GatherRows(a, rows) => {
                let mut ga = ArrayD::<f64>::zeros(self.values[a.0].raw_dim());
                for (out_i, &src) in rows.iter().enumerate() {
                    let gi = g.index_axis(Axis(0), out_i);
                    let mut slot = ga.index_axis_mut(Axis(0), src);
                    slot += &gi;
                }
                self.acc(grads, *a, ga);
            }
            Op::Gather2d(a, idx) => {
                let mut ga = ArrayD::<f64>::zeros(self.values[a.0].raw_dim());
                {
                    let mut gav = ga.view_mut().into_dimensionality::<Ix2>().unwrap();
                    for (out_i, &(r, c)) in idx.iter().enumerate() {
                        gav[[r, c]] += g[[out_i]];
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::PairwiseSqdist(a) => {
                let x = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let b = x.nrows();
                let w = &gm + &gm.t();
                let mut ga = ndarray::Array2::<f64>::zeros(x.raw_dim());
                for i in 0..b {
                    let wi_sum: f64 = w.row(i).sum();
                    for d in 0..x.ncols() {
                        let mut acc = wi_sum * x[[i, d]];
                        for j in 0..b {
                            acc -= w[[i, j]] * x[[j, d]];
                        }
                        ga[[i, d]] = 2.0 * acc;
                    }
                }
                self.acc(grads, *a, ga.into_dyn());
            }
            Op::L2Normalize(a) => {
                let x = &self.values[a.0];
                let y = &self.values[node];
                let norms = x.mapv(|v| v * v);
                let n = sum_last_keepdim(&norms).mapv(|v| (v + L2_EPS).sqrt());
                let dot = sum_last_keepdim(&(g * y));
                let ga = (g - &(y * &dot)) / &n;
                self.acc(grads, *a, ga);
            }
        }
    }
}

const L2_EPS: f64 = 1e-12;

fn matmul_nd(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    let bv = b.view().into_dimensionality::<Ix2>().expect("rhs must be 2-D");
    let k = *a.shape().last().expect("lhs must have >= 1 axis");
    assert_eq!(k, bv.nrows(), "matmul: inner dimensions differ");
    let m = a.len() / k;
    let a2 = a.view().into_shape_with_order((m, k)).unwrap();
    let out = a2.dot(&bv);
    let mut shape: Vec<usize> = a.shape().to_vec();
    *shape.last_mut().unwrap() = bv.ncols();
    out.into_shape_with_order(IxDyn(&shape)).unwrap()
}

fn bmm_nd(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    assert_eq!(a.ndim(), 3);
    assert_eq!(b.ndim(), 3);
    assert_eq!(a.shape()[0], b.shape()[0]);
    assert_eq!(a.shape()[2], b.shape()[1]);
    let (nb, m, n) = (a.shape()[0], a.shape()[1], b.shape()[2]);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[nb, m, n]));
    for i in 0..nb {
        let ai = a
            .index_axis(Axis(0), i)
            .into_dimensionality::<Ix2>()
            .unwrap()
            .as_standard_layout()
            .to_owned();
        let bi = b
            .index_axis(Axis(0), i)
            .into_dimensionality::<Ix2>()
            .unwrap()
            .as_standard_layout()
            .to_owned();
        out.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
    }
    out
}

fn sum_last_keepdim(x: &ArrayD<f64>) -> ArrayD<f64> {
    let last = x.ndim() - 1;
    x.sum_axis(Axis(last)).insert_axis(Axis(last))
}

fn softmax_last(x: &ArrayD<f64>) -> ArrayD<f64> {
    let last = x.ndim() - 1;
    let max = x
        .fold_axis(Axis(last), f64::NEG_INFINITY, |&acc, &v| acc.max(v))
        .insert_axis(Axis(last));
    let e = (x - &max).mapv(f64::exp);
    let s = sum_last_keepdim(&e);
    e / &s
}

fn log_softmax_last(x: &ArrayD<f64>) -> ArrayD<f64> {
    let last = x.ndim() - 1;
    let max = x
        .fold_axis(Axis(last), f64::NEG_INFINITY, |&acc, &v| acc.max(v))
        .insert_axis(Axis(last));
    let shifted = x - &max;
    let lse = sum_last_keepdim(&shifted.mapv(f64::exp)).mapv(f64::ln);
    shifted - &lse
}

fn l2_normalize_last(x: &ArrayD<f64>) -> ArrayD<f64> {
    let sq = x.mapv(|v| v * v);
    let n = sum_last_keepdim(&sq).mapv(|v| (v + L2_EPS).sqrt());
    x / &n
}

fn layer_norm_forward(x: &ArrayD<f64>, gamma: &ArrayD<f64>, beta: &ArrayD<f64>) -> ArrayD<f64> {
    let last = x.ndim() - 1;
    let mean = x.mean_axis(Axis(last)).unwrap().insert_axis(Axis(last));
    let centered = x - &mean;
    let var = centered
        .mapv(|v| v * v)
        .mean_axis(Axis(last))
        .unwrap()
        .insert_axis(Axis(last));
    let xhat = &centered / &var.mapv(|v| (v + LN_EPS).sqrt());
    &xhat * gamma + beta
}

fn layer_norm_backward(
    x: &ArrayD<f64>,
    gamma: &ArrayD<f64>,
    g: &ArrayD<f64>,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let last = x.ndim() - 1;
    let d = x.shape()[last] as f64;
    let mean = x.mean_axis(Axis(last)).unwrap().insert_axis(Axis(last));
    let centered = x - &mean;
    let var = centered
        .mapv(|v| v * v)
        .mean_axis(Axis(last))
        .unwrap()
        .insert_axis(Axis(last));
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = &centered * &inv_std;

    let gg = g * gamma; // d loss / d xhat
    let mean_gg = gg.sum_axis(Axis(last)).insert_axis(Axis(last)) / d;
    let mean_gg_xhat = (&gg * &xhat).sum_axis(Axis(last)).insert_axis(Axis(last)) / d;
    let gx = (&gg - &mean_gg - &(&xhat * &mean_gg_xhat)) * &inv_std;

    // reduce over all leading axes for the (1-D) affine params
    let mut ggamma = (g * &xhat).to_owned();
    let mut gbeta = g.clone();
    while ggamma.ndim() > 1 {
        ggamma = ggamma.sum_axis(Axis(0));
        gbeta = gbeta.sum_axis(Axis(0));
    }
    (gx, ggamma, gbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| {
            // Box-Muller from two uniforms
            let u1: f64 = rng.gen_range(1e-10..1.0);
            let u2: f64 = rng.gen::<f64>();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    /// Central-difference check of d(scalar_fn)/d(leaf) for a graph builder.
    fn check_grad<F>(shape_sets: &[Vec<usize>], seed: u64, build: F)
    where
        F: Fn(&mut Graph, &[Tid]) -> Tid,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<ArrayD<f64>> = shape_sets.iter().map(|s| randn(&mut rng, s)).collect();

        let mut g = Graph::new();
        let leaves: Vec<Tid> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
        let root = build(&mut g, &leaves);
        let grads = g.backward(root);

        let h = 1e-5;
        for (li, leaf_val) in inputs.iter().enumerate() {
            let analytic = grads.get(leaves[li]).expect("missing grad").clone();
            let mut num = ArrayD::<f64>::zeros(leaf_val.raw_dim());
            for idx in 0..leaf_val.len() {
                let eval = |delta: f64| -> f64 {
                    let mut xs = inputs.clone();
                    xs[li].as_slice_mut().unwrap()[idx] += delta;
                    let mut g2 = Graph::new();
                    let ls: Vec<Tid> = xs.iter().map(|x| g2.leaf(x.clone())).collect();
                    let r = build(&mut g2, &ls);
                    g2.scalar_value(r)
                };
                num.as_slice_mut().unwrap()[idx] = (eval(h) - eval(-h)) / (2.0 * h);
            }
            let diff = (&analytic - &num).mapv(f64::abs);
            let denom = analytic
                .iter()
                .chain(num.iter())
                .fold(1.0f64, |a, &b| a.max(b.abs()));
            let max_diff = diff.iter().fold(0.0f64, |a, &b| a.max(b));
            assert!(
                max_diff / denom < 1e-6,
                "gradient mismatch on leaf {li}: {max_diff} vs scale {denom}"
            );
        }
    }

    #[test]
    fn grad_matmul_chain() {
        check_grad(&[vec![3, 4], vec![4, 5]], 1, |g, l| {
            let y = g.matmul(l[0], l[1]);
            let y = g.gelu(y);
            g.sum(y)
        });
    }

    #[test]
    fn grad_bmm_softmax() {
        check_grad(&[vec![2, 3, 4], vec![2, 4, 3]], 2, |g, l| {
            let s = g.bmm(l[0], l[1]);
            let a = g.softmax(s);
            let y = g.bmm(a, l[0]);
            g.sum(y)
        });
    }

    #[test]
    fn grad_layer_norm() {
        check_grad(&[vec![2, 3, 6], vec![6], vec![6]], 3, |g, l| {
            let y = g.layer_norm(l[0], l[1], l[2]);
            let y = g.mul(y, y);
            g.sum(y)
        });
    }

    #[test]
    fn grad_concat_slice_permute() {
        check_grad(&[vec![2, 3, 4], vec![2, 2, 4]], 4, |g, l| {
            let c = g.concat(&[l[0], l[1]], 1);
            let p = g.permute(c, &[1, 0, 2]);
            let s = g.slice(p, 0, 1, 4);
            let r = g.reshape(s, &[3, 8]);
            let y = g.mul(r, r);
            g.mean(y)
        });
    }

    #[test]
    fn grad_log_softmax_gather() {
        check_grad(&[vec![4, 5]], 5, |g, l| {
            let ls = g.log_softmax(l[0]);
            let picked = g.gather2d(ls, &[(0, 1), (1, 4), (2, 0), (3, 3)]);
            let s = g.sum(picked);
            g.scale(s, -0.25)
        });
    }

    #[test]
    fn grad_pairwise_triplet_style() {
        check_grad(&[vec![4, 3]], 6, |g, l| {
            let d2 = g.pairwise_sqdist(l[0]);
            let d2 = g.add_scalar(d2, 1e-12);
            let d = g.sqrt(d2);
            let sel = g.gather2d(d, &[(0, 1), (2, 3), (0, 2), (1, 3)]);
            let y = g.relu(sel);
            g.mean(y)
        });
    }

    #[test]
    fn grad_l2_normalize_cosine() {
        check_grad(&[vec![3, 4], vec![2, 4]], 7, |g, l| {
            let a = g.l2_normalize(l[0]);
            let b = g.l2_normalize(l[1]);
            let bt = g.permute(b, &[1, 0]);
            let s = g.matmul(a, bt);
            let sm = g.log_softmax(s);
            g.mean(sm)
        });
    }

    #[test]
    fn grad_broadcast_reductions() {
        check_grad(&[vec![3, 2, 4], vec![4], vec![2, 4]], 8, |g, l| {
            let x = g.add_broadcast(l[0], l[1]);
            let x = g.add_broadcast(x, l[2]);
            let x = g.softplus(x);
            let m = g.mean_axis(x, 0);
            let s = g.sum_axis(m, 1);
            let s2 = g.mul(s, s);
            g.sum(s2)
        });
    }

    #[test]
    fn grad_repeat_gather_rows() {
        check_grad(&[vec![3, 4]], 9, |g, l| {
            let r = g.repeat_leading(l[0], 2);
            let r = g.reshape(r, &[6, 4]);
            let picked = g.gather_rows(r, &[0, 2, 2, 5]);
            let y = g.mul(picked, picked);
            g.sum(y)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[5, 7]);
        let mut g = Graph::new();
        let t = g.constant(x);
        let y = g.softmax(t);
        for row in g.value(y).rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn no_grad_through_constants() {
        let mut g = Graph::new();
        let a = g.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 1.5));
        let c = g.constant(ArrayD::from_elem(IxDyn(&[2, 2]), 2.0));
        let y = g.mul(a, c);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert!(grads.get(a).is_some());
    }
}
