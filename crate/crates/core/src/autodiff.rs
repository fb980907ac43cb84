//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! through [`Graph::param`], which reads them from a borrowed [`ParamStore`];
//! [`Graph::backward`] then returns gradients for exactly the parameters that
//! were read.

use alloc::vec;
use alloc::vec::Vec;

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;
const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    GroupConcat(Var, Vec<Vec<usize>>),
    GroupMean(Var, Vec<Vec<usize>>),
    ScaleByEntry(Var, Var, usize),
    NormalizeSum(Var),
    MeanRows(Var),
    Mse(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters read so far.
    pub fn params_used(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.param_vars
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_some())
            .map(|(i, _)| ParamId(i))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// Adds a `1×cols` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.shape(), (1, av.cols()), "bias shape");
        let out = Tensor::from_fn(av.rows(), av.cols(), |r, c| av.get(r, c) + bv.get(0, c));
        self.push(out, Op::AddBias(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1×cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / libm::sqrt(var + LN_EPS);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let out = Tensor::from_fn(rows, cols, |r, c| xhat.get(r, c) * g.get(0, c) + b.get(0, c));
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let out = Tensor::from_fn(av.rows(), len, |r, c| av.get(r, start + c));
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), rows, "concat_cols rows");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Row `i` of the output is row `idx[i]` of `a`. Indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(idx.len(), av.cols());
        for (i, &src) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(av.row(src));
        }
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols(), cols, "concat_rows cols");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Output row `g` concatenates the rows listed in `groups[g]` (all groups
    /// the same size).
    pub fn group_concat(&mut self, a: Var, groups: &[Vec<usize>]) -> Var {
        let av = self.value(a);
        let k = groups.first().map_or(0, Vec::len);
        let cols = av.cols();
        let mut out = Tensor::zeros(groups.len(), k * cols);
        for (g, members) in groups.iter().enumerate() {
            assert_eq!(members.len(), k, "ragged merge group");
            for (j, &src) in members.iter().enumerate() {
                out.row_mut(g)[j * cols..(j + 1) * cols].copy_from_slice(av.row(src));
            }
        }
        self.push(out, Op::GroupConcat(a, groups.to_vec()))
    }

    /// Output row `g` averages the rows listed in `groups[g]`.
    pub fn group_mean(&mut self, a: Var, groups: &[Vec<usize>]) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(groups.len(), av.cols());
        for (g, members) in groups.iter().enumerate() {
            let inv = 1.0 / members.len() as f64;
            for &src in members {
                for (o, v) in out.row_mut(g).iter_mut().zip(av.row(src)) {
                    *o += v * inv;
                }
            }
        }
        self.push(out, Op::GroupMean(a, groups.to_vec()))
    }

    /// `a * s[0, index]` for a `1×k` tensor `s`.
    pub fn scale_by_entry(&mut self, a: Var, s: Var, index: usize) -> Var {
        let f = self.value(s).get(0, index);
        let out = self.value(a).map(|x| x * f);
        self.push(out, Op::ScaleByEntry(a, s, index))
    }

    /// Divides a `1×k` tensor by the sum of its entries.
    pub fn normalize_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.sum();
        let out = av.map(|x| x / s);
        self.push(out, Op::NormalizeSum(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.sum_rows();
        out.scale_assign(1.0 / av.rows() as f64);
        self.push(out, Op::MeanRows(a))
    }

    /// Mean squared error against a constant target, as a `1×1` value.
    pub fn mse(&mut self, a: Var, target: Tensor) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), target.shape(), "mse shape");
        let n = av.len() as f64;
        let loss = av.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
        self.push(Tensor::full(1, 1, loss), Op::Mse(a, target))
    }

    /// Gradients of the `1×1` node `loss` with respect to every parameter read.
    pub fn backward(&self, loss: Var) -> Grads {
        self.backward_with(loss, Tensor::full(1, 1, 1.0))
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Grads {
        assert_eq!(seed.shape(), self.value(out).shape(), "seed shape");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        let mut result = Grads::empty(self.store.len());
        for i in (0..=out.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, g: Tensor| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => result.set(*id, dy),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    acc(*a, dy.matmul_t(bv));
                    acc(*b, av.t_matmul(&dy));
                }
                Op::AddBias(a, b) => {
                    acc(*b, dy.sum_rows());
                    acc(*a, dy);
                }
                Op::Add(a, b) => {
                    acc(*a, dy.clone());
                    acc(*b, dy);
                }
                Op::Sub(a, b) => {
                    acc(*a, dy.clone());
                    acc(*b, dy.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    acc(*a, dy.zip_map(bv, |g, y| g * y));
                    acc(*b, dy.zip_map(av, |g, x| g * x));
                }
                Op::Scale(a, s) => acc(*a, dy.map(|v| v * s)),
                Op::Gelu(a) => {
                    let av = &self.nodes[a.0].value;
                    acc(*a, dy.zip_map(av, |g, x| g * gelu_grad(x)));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let g = &self.nodes[gamma.0].value;
                    let (rows, cols) = dy.shape();
                    let mut dgamma = Tensor::zeros(1, cols);
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let (dyr, xh) = (dy.row(r), xhat.row(r));
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in 0..cols {
                            let d = dyr[c] * g.get(0, c);
                            sum_dxhat += d;
                            sum_dxhat_xhat += d * xh[c];
                            dgamma.data_mut()[c] += dyr[c] * xh[c];
                        }
                        let n = cols as f64;
                        for c in 0..cols {
                            let d = dyr[c] * g.get(0, c);
                            dx.set(r, c, inv_std[r] / n * (n * d - sum_dxhat - xh[c] * sum_dxhat_xhat));
                        }
                    }
                    acc(*beta, dy.sum_rows());
                    acc(*gamma, dgamma);
                    acc(*x, dx);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = dy.row(r).iter().zip(y.row(r)).map(|(g, p)| g * p).sum();
                        for c in 0..y.cols() {
                            dx.set(r, c, y.get(r, c) * (dy.get(r, c) - dot));
                        }
                    }
                    acc(*a, dx);
                }
                Op::Transpose(a) => acc(*a, dy.transpose()),
                Op::SliceCols(a, start) => {
                    let av = &self.nodes[a.0].value;
                    let mut dx = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..dy.rows() {
                        dx.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                    }
                    acc(*a, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.cols();
                        acc(*p, Tensor::from_fn(dy.rows(), w, |r, c| dy.get(r, offset + c)));
                        offset += w;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let av = &self.nodes[a.0].value;
                    let mut dx = Tensor::zeros(av.rows(), av.cols());
                    for (i, &src) in idx.iter().enumerate() {
                        for (o, g) in dx.row_mut(src).iter_mut().zip(dy.row(i)) {
                            *o += g;
                        }
                    }
                    acc(*a, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = self.nodes[p.0].value.rows();
                        let cols = dy.cols();
                        acc(
                            *p,
                            Tensor::from_vec(h, cols, dy.data()[offset * cols..(offset + h) * cols].to_vec()),
                        );
                        offset += h;
                    }
                }
                Op::GroupConcat(a, groups) => {
                    let av = &self.nodes[a.0].value;
                    let cols = av.cols();
                    let mut dx = Tensor::zeros(av.rows(), cols);
                    for (g, members) in groups.iter().enumerate() {
                        for (j, &src) in members.iter().enumerate() {
                            for (o, v) in dx.row_mut(src).iter_mut().zip(&dy.row(g)[j * cols..(j + 1) * cols]) {
                                *o += v;
                            }
                        }
                    }
                    acc(*a, dx);
                }
                Op::GroupMean(a, groups) => {
                    let av = &self.nodes[a.0].value;
                    let mut dx = Tensor::zeros(av.rows(), av.cols());
                    for (g, members) in groups.iter().enumerate() {
                        let inv = 1.0 / members.len() as f64;
                        for &src in members {
                            for (o, v) in dx.row_mut(src).iter_mut().zip(dy.row(g)) {
                                *o += v * inv;
                            }
                        }
                    }
                    acc(*a, dx);
                }
                Op::ScaleByEntry(a, s, index) => {
                    let (av, sv) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
                    let f = sv.get(0, *index);
                    let mut ds = Tensor::zeros(1, sv.cols());
                    ds.set(0, *index, dy.data().iter().zip(av.data()).map(|(g, x)| g * x).sum());
                    acc(*s, ds);
                    acc(*a, dy.map(|g| g * f));
                }
                Op::NormalizeSum(a) => {
                    let av = &self.nodes[a.0].value;
                    let y = &node.value;
                    let s = av.sum();
                    let dot: f64 = dy.data().iter().zip(y.data()).map(|(g, v)| g * v).sum();
                    acc(*a, dy.map(|g| (g - dot) / s));
                }
                Op::MeanRows(a) => {
                    let av = &self.nodes[a.0].value;
                    let inv = 1.0 / av.rows() as f64;
                    acc(*a, Tensor::from_fn(av.rows(), av.cols(), |_, c| dy.get(0, c) * inv));
                }
                Op::Mse(a, target) => {
                    let av = &self.nodes[a.0].value;
                    let k = 2.0 * dy.get(0, 0) / av.len() as f64;
                    acc(*a, av.zip_map(target, |p, t| k * (p - t)));
                }
            }
        }
        result
    }
}
