//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass. Each
//! node remembers whether its value depends on a trainable parameter; nodes
//! that do not are skipped during [`Graph::backward`], which is what keeps
//! frozen sub-networks out of the gradient set.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Silu(Var),
    Tanh(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    /// `x[N, C, rest..] + e[C]` or `x[N, C, rest..] + e[N, C]`.
    AddChannel { x: Var, e: Var, per_batch: bool },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    Reshape(Var),
    Conv2d(Box<ConvSaved>),
    Upsample2(Var),
    Concat(Var, Var),
    SliceBatch { x: Var, n: usize },
    StackBatch(Vec<Var>),
    GroupNorm(Box<GroupNormSaved>),
    SoftmaxRows(Var),
    SoftmaxChannels(Var),
    LogSoftmaxChannels(Var),
    SumPerChannel(Var),
    MeanSpatial(Var),
    Embedding { table: Var, ids: Vec<usize> },
}

#[derive(Debug)]
struct ConvSaved {
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
    cols: Vec<f64>,
}

#[derive(Debug)]
struct GroupNormSaved {
    x: Var,
    gamma: Var,
    beta: Var,
    groups: usize,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every trainable parameter it touched.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.map.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds `other * scale` into `self`.
    pub fn accumulate(&mut self, other: Gradients, scale: f64) {
        for (id, g) in other.map {
            match self.map.get_mut(&id) {
                Some(cur) => {
                    for (a, b) in cur.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * b;
                    }
                }
                None => {
                    self.map.insert(id, if scale == 1.0 { g } else { g.scale(scale) });
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.map.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    track: bool,
}

impl<'p> Graph<'p> {
    /// A graph that records what it needs for [`Graph::backward`].
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            track: true,
        }
    }

    /// A graph for forward passes only; no intermediate state is kept.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self {
            track: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let needs_grad = self.track && needs_grad;
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), !p.frozen);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        self.value(a).ensure_same_shape(self.value(b))
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| s * x, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x / (1.0 + (-x).exp()), Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(t, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).mean());
        let ng = self.ng(a);
        self.push(t, Op::Mean(a), ng)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Broadcast-add `e` over the channel axis (dim 1) of `x`. `e` is either
    /// `[C]` or `[N, C]`.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let es = self.shape(e).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape(&[0, 0], &xs));
        }
        let (n, c) = (xs[0], xs[1]);
        let per_batch = match es.as_slice() {
            [ec] if *ec == c => false,
            [en, ec] if *en == n && *ec == c => true,
            _ => return Err(Error::shape(&[n, c], &es)),
        };
        let inner: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        let ev = self.value(e).data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let add = if per_batch { ev[ni * c + ci] } else { ev[ci] };
                let base = (ni * c + ci) * inner;
                for v in &mut out.data_mut()[base..base + inner] {
                    *v += add;
                }
            }
        }
        let ng = self.ng(x) || self.ng(e);
        Ok(self.push(out, Op::AddChannel { x, e, per_batch }, ng))
    }

    /// `op(a) · op(b)` for 2-D operands; `ta`/`tb` select the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (m, k1) = dims2(self.shape(a), ta)?;
        let (k2, n) = dims2(self.shape(b), tb)?;
        if k1 != k2 {
            return Err(Error::shape(self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k1, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(a), false)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// 2-D convolution, `x[N, C, H, W]`, `w[O, C, k, k]`, optional `b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::shape(&ws, &xs));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(&ws, &xs));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let ckk = c * k * k;
        let hw = ho * wo;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let keep_cols = self.track && ng && self.ng(w);
        let geom = ConvGeom { c, h, w: wd, k, stride, pad, ho, wo };
        let mut out = vec![0.0; n * o * hw];
        let mut cols_all = if keep_cols { Vec::with_capacity(n * ckk * hw) } else { Vec::new() };
        let mut cols = vec![0.0; ckk * hw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for ni in 0..n {
            im2col(&xv[ni * c * h * wd..(ni + 1) * c * h * wd], &geom, &mut cols);
            gemm(o, ckk, hw, wv, false, &cols, false, &mut out[ni * o * hw..(ni + 1) * o * hw], 0.0);
            if keep_cols {
                cols_all.extend_from_slice(&cols);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != o {
                return Err(Error::shape(&[o], &[bv.len()]));
            }
            for ni in 0..n {
                for oi in 0..o {
                    let base = (ni * o + oi) * hw;
                    for v in &mut out[base..base + hw] {
                        *v += bv[oi];
                    }
                }
            }
        }
        let t = Tensor::new(&[n, o, ho, wo], out)?;
        Ok(self.push(
            t,
            Op::Conv2d(Box::new(ConvSaved { x, w, b, stride, pad, cols: cols_all })),
            ng,
        ))
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(&[0, 0, 0, 0], &s));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; nc * 4 * h * w];
        for p in 0..nc {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[p * 4 * h * w + i * 2 * w + j] = src[p * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?, Op::Upsample2(x), ng))
    }

    /// Concatenate along dim 1.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape(&sa, &sb));
        }
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = Vec::with_capacity(sa[0] * (ca + cb));
        for n in 0..sa[0] {
            out.extend_from_slice(&va[n * ca..(n + 1) * ca]);
            out.extend_from_slice(&vb[n * cb..(n + 1) * cb]);
        }
        let mut shape = sa.clone();
        shape[1] = sa[1] + sb[1];
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(a, b), ng))
    }

    /// Batch item `n` with the leading axis dropped.
    pub fn slice_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if n >= s[0] {
            return Err(Error::shape(&[n + 1], &s));
        }
        let per: usize = s[1..].iter().product();
        let data = self.value(x).data()[n * per..(n + 1) * per].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&s[1..], data)?, Op::SliceBatch { x, n }, ng))
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack_batch(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let mut data = Vec::with_capacity(xs.len() * first.iter().product::<usize>());
        for &v in xs {
            if self.shape(v) != first.as_slice() {
                return Err(Error::shape(&first, self.shape(v)));
            }
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(&first);
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(Tensor::new(&shape, data)?, Op::StackBatch(xs.to_vec()), ng))
    }

    /// Group normalization over `[N, C, rest..]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let s = self.shape(x).to_vec();
        let (n, c) = (s[0], s[1]);
        if c % groups != 0 || self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(&[c], self.shape(gamma)));
        }
        let inner: usize = s[2..].iter().product();
        let cg = c / groups;
        let glen = cg * inner;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; n * groups];
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for gi in 0..groups {
                let base = (ni * c + gi * cg) * inner;
                let seg = &xv[base..base + glen];
                let mean = seg.iter().sum::<f64>() / glen as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / glen as f64;
                let r = 1.0 / (var + EPS).sqrt();
                rstd[ni * groups + gi] = r;
                for (j, v) in seg.iter().enumerate() {
                    let ch = gi * cg + j / inner;
                    let xh = (v - mean) * r;
                    xhat[base + j] = xh;
                    out[base + j] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let t = Tensor::new(&s, out)?;
        Ok(self.push(
            t,
            Op::GroupNorm(Box::new(GroupNormSaved { x, gamma, beta, groups, xhat, rstd })),
            ng,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let cols = *s.last().unwrap_or(&1);
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        let ng = self.ng(x);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    /// Softmax over dim 1 of `[N, C, rest..]`.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let out = channel_apply(self.value(x), false);
        let ng = self.ng(x);
        self.push(out, Op::SoftmaxChannels(x), ng)
    }

    /// Log-softmax over dim 1 of `[N, C, rest..]`.
    pub fn log_softmax_channels(&mut self, x: Var) -> Var {
        let out = channel_apply(self.value(x), true);
        let ng = self.ng(x);
        self.push(out, Op::LogSoftmaxChannels(x), ng)
    }

    /// `[N, C, rest..] -> [C]`.
    pub fn sum_per_channel(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                out[ci] += xv[base..base + inner].iter().sum::<f64>();
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[c], out).expect("shape"), Op::SumPerChannel(x), ng)
    }

    /// `[N, C, rest..] -> [N, C]`, averaging over the trailing axes.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let xv = self.value(x).data();
        let out = (0..n * c)
            .map(|p| xv[p * inner..(p + 1) * inner].iter().sum::<f64>() / inner as f64)
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::new(&[n, c], out).expect("shape"), Op::MeanSpatial(x), ng)
    }

    /// Row lookup into `table[V, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        let (v, d) = (s[0], s[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(Error::shape(&[v], &[i]));
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::Embedding { table, ids: ids.to_vec() },
            ng,
        ))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(&[1], self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backward_node(
        &self,
        node: &Node,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let t = Tensor::new(node.value.shape(), g).expect("grad shape");
                out.accumulate(
                    Gradients {
                        map: HashMap::from([(*id, t)]),
                    },
                    1.0,
                );
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, &g));
                acc(*b, &mut |d| add_into(d, &g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, &g));
                acc(*b, &mut |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / vb[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x += s * y)),
            Op::AddScalar(a) => acc(*a, &mut |d| add_into(d, &g)),
            Op::Square(a) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += 2.0 * va[i] * g[i];
                    }
                });
            }
            Op::Silu(a) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        let s = 1.0 / (1.0 + (-va[i]).exp());
                        d[i] += g[i] * s * (1.0 + va[i] * (1.0 - s));
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        if va[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                acc(*a, &mut |d| {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|x| *x += s)
                });
            }
            Op::AddChannel { x, e, per_batch } => {
                acc(*x, &mut |d| add_into(d, &g));
                let s = node.value.shape();
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                acc(*e, &mut |d| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * inner;
                            let t: f64 = g[base..base + inner].iter().sum();
                            if *per_batch {
                                d[ni * c + ci] += t;
                            } else {
                                d[ci] += t;
                            }
                        }
                    }
                });
            }
            Op::MatMul { a, b, ta, tb } => {
                let (m, k) = dims2(self.shape(*a), *ta).expect("dims");
                let n = node.value.shape()[1];
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    if !ta {
                        gemm(m, n, k, &g, false, vb, !tb, d, 1.0);
                    } else {
                        gemm(k, n, m, vb, *tb, &g, true, d, 1.0);
                    }
                });
                acc(*b, &mut |d| {
                    if !tb {
                        gemm(k, m, n, va, !ta, &g, false, d, 1.0);
                    } else {
                        gemm(n, m, k, &g, true, va, *ta, d, 1.0);
                    }
                });
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let (n, m) = (s[0], s[1]);
                acc(*a, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |d| add_into(d, &g)),
            Op::Conv2d(sv) => self.conv_backward(sv, node, &g, &mut acc),
            Op::Upsample2(x) => {
                let s = node.value.shape();
                let (nc, h2, w2) = (s[0] * s[1], s[2], s[3]);
                let (h, w) = (h2 / 2, w2 / 2);
                acc(*x, &mut |d| {
                    for p in 0..nc {
                        for i in 0..h2 {
                            for j in 0..w2 {
                                d[p * h * w + (i / 2) * w + j / 2] += g[p * h2 * w2 + i * w2 + j];
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let inner: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1] * inner, sb[1] * inner);
                let n = sa[0];
                acc(*a, &mut |d| {
                    for ni in 0..n {
                        add_into(&mut d[ni * ca..(ni + 1) * ca], &g[ni * (ca + cb)..ni * (ca + cb) + ca]);
                    }
                });
                acc(*b, &mut |d| {
                    for ni in 0..n {
                        let off = ni * (ca + cb) + ca;
                        add_into(&mut d[ni * cb..(ni + 1) * cb], &g[off..off + cb]);
                    }
                });
            }
            Op::SliceBatch { x, n } => {
                let per = g.len();
                acc(*x, &mut |d| add_into(&mut d[n * per..(n + 1) * per], &g));
            }
            Op::StackBatch(xs) => {
                let per = g.len() / xs.len();
                for (i, &x) in xs.iter().enumerate() {
                    acc(x, &mut |d| add_into(d, &g[i * per..(i + 1) * per]));
                }
            }
            Op::GroupNorm(sv) => {
                let s = node.value.shape();
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let groups = sv.groups;
                let cg = c / groups;
                let glen = cg * inner;
                let gam = val(sv.gamma);
                acc(sv.gamma, &mut |d| {
                    for (i, (gi, xh)) in g.iter().zip(&sv.xhat).enumerate() {
                        d[(i / inner) % c] += gi * xh;
                    }
                });
                acc(sv.beta, &mut |d| {
                    for (i, gi) in g.iter().enumerate() {
                        d[(i / inner) % c] += gi;
                    }
                });
                acc(sv.x, &mut |d| {
                    for ni in 0..n {
                        for gi in 0..groups {
                            let base = (ni * c + gi * cg) * inner;
                            let r = sv.rstd[ni * groups + gi];
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..glen {
                                let dxh = g[base + j] * gam[gi * cg + j / inner];
                                m1 += dxh;
                                m2 += dxh * sv.xhat[base + j];
                            }
                            m1 /= glen as f64;
                            m2 /= glen as f64;
                            for j in 0..glen {
                                let dxh = g[base + j] * gam[gi * cg + j / inner];
                                d[base + j] += r * (dxh - m1 - sv.xhat[base + j] * m2);
                            }
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap_or(&1);
                acc(*x, &mut |d| {
                    for r in 0..y.len() / cols {
                        let row = r * cols..(r + 1) * cols;
                        let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            d[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::SoftmaxChannels(x) | Op::LogSoftmaxChannels(x) => {
                let log = matches!(node.op, Op::LogSoftmaxChannels(_));
                let s = node.value.shape();
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for ni in 0..n {
                        for p in 0..inner {
                            let idx = |ci: usize| (ni * c + ci) * inner + p;
                            if log {
                                let gs: f64 = (0..c).map(|ci| g[idx(ci)]).sum();
                                for ci in 0..c {
                                    d[idx(ci)] += g[idx(ci)] - y[idx(ci)].exp() * gs;
                                }
                            } else {
                                let dot: f64 = (0..c).map(|ci| g[idx(ci)] * y[idx(ci)]).sum();
                                for ci in 0..c {
                                    d[idx(ci)] += y[idx(ci)] * (g[idx(ci)] - dot);
                                }
                            }
                        }
                    }
                });
            }
            Op::SumPerChannel(x) => {
                let s = self.shape(*x);
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                acc(*x, &mut |d| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * inner;
                            d[base..base + inner].iter_mut().for_each(|v| *v += g[ci]);
                        }
                    }
                });
            }
            Op::MeanSpatial(x) => {
                let s = self.shape(*x);
                let inner: usize = s[2..].iter().product();
                acc(*x, &mut |d| {
                    for (p, gp) in g.iter().enumerate() {
                        let v = gp / inner as f64;
                        d[p * inner..(p + 1) * inner].iter_mut().for_each(|x| *x += v);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dim = node.value.shape()[1];
                acc(*table, &mut |d| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut d[i * dim..(i + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                });
            }
        }
    }

    fn conv_backward(
        &self,
        sv: &ConvSaved,
        node: &Node,
        g: &[f64],
        acc: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [f64])),
    ) {
        let xs = self.shape(sv.x);
        let ws = self.shape(sv.w);
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let os = node.value.shape();
        let (ho, wo) = (os[2], os[3]);
        let hw = ho * wo;
        let ckk = c * k * k;
        let geom = ConvGeom { c, h, w, k, stride: sv.stride, pad: sv.pad, ho, wo };
        if let Some(b) = sv.b {
            acc(b, &mut |d| {
                for ni in 0..n {
                    for oi in 0..o {
                        let base = (ni * o + oi) * hw;
                        d[oi] += g[base..base + hw].iter().sum::<f64>();
                    }
                }
            });
        }
        if !sv.cols.is_empty() {
            acc(sv.w, &mut |d| {
                for ni in 0..n {
                    gemm(
                        o,
                        hw,
                        ckk,
                        &g[ni * o * hw..(ni + 1) * o * hw],
                        false,
                        &sv.cols[ni * ckk * hw..(ni + 1) * ckk * hw],
                        true,
                        d,
                        1.0,
                    );
                }
            });
        }
        let wv = self.value(sv.w).data();
        acc(sv.x, &mut |d| {
            let mut dcols = vec![0.0; ckk * hw];
            for ni in 0..n {
                gemm(ckk, o, hw, wv, true, &g[ni * o * hw..(ni + 1) * o * hw], false, &mut dcols, 0.0);
                col2im(&dcols, &geom, &mut d[ni * c * h * w..(ni + 1) * c * h * w]);
            }
        });
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (x, y) in d.iter_mut().zip(g) {
        *x += y;
    }
}

fn dims2(s: &[usize], t: bool) -> Result<(usize, usize)> {
    match s {
        [a, b] => Ok(if t { (*b, *a) } else { (*a, *b) }),
        _ => Err(Error::shape(&[0, 0], s)),
    }
}

/// `c = op(a)·op(b) + beta·c` where `op(a)` is `[m, k]` and `op(b)` is `[k, n]`.
/// With `ta` set, `a` is stored as `[k, m]`; with `tb`, `b` as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let hw = g.ho * g.wo;
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        dst[oi * g.wo + oj] = if ii >= 0 && jj >= 0 && (ii as usize) < g.h && (jj as usize) < g.w {
                            x[(ci * g.h + ii as usize) * g.w + jj as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw = g.ho * g.wo;
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dx[(ci * g.h + ii as usize) * g.w + jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn channel_apply(x: &Tensor, log: bool) -> Tensor {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let xv = x.data();
    let mut out = vec![0.0; xv.len()];
    for ni in 0..n {
        for p in 0..inner {
            let idx = |ci: usize| (ni * c + ci) * inner + p;
            let m = (0..c).map(|ci| xv[idx(ci)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..c).map(|ci| (xv[idx(ci)] - m).exp()).sum::<f64>().ln();
            for ci in 0..c {
                let l = xv[idx(ci)] - lse;
                out[idx(ci)] = if log { l } else { l.exp() };
            }
        }
    }
    Tensor::new(s, out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` with respect to every entry of `id`.
    fn check_grad(store: &mut ParamStore, id: ParamId, f: &dyn Fn(&mut Graph) -> Var) {
        let analytic = {
            let mut g = Graph::new(store);
            let l = f(&mut g);
            g.backward(l).unwrap().get(id).cloned().expect("param has gradient")
        };
        let h = 1e-6;
        for i in 0..store.value(id).numel() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let lp = {
                let mut g = Graph::inference(store);
                let l = f(&mut g);
                g.value(l).data()[0]
            };
            store.value_mut(id).data_mut()[i] = orig - h;
            let lm = {
                let mut g = Graph::inference(store);
                let l = f(&mut g);
                g.value(l).data()[0]
            };
            store.value_mut(id).data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic.data()[i];
            let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-4));
            assert!(err < 1e-5, "entry {i}: analytic {an} vs fd {fd}");
        }
    }

    fn rand_param(store: &mut ParamStore, name: &str, shape: &[usize], seed: u64) -> ParamId {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        store.insert(name, Tensor::randn(shape, &mut rng)).unwrap()
    }

    #[test]
    fn conv_and_norm_gradients() {
        let mut s = ParamStore::new();
        let x = rand_param(&mut s, "x", &[2, 4, 5, 5], 1);
        let w = rand_param(&mut s, "w", &[3, 4, 3, 3], 2);
        let b = rand_param(&mut s, "b", &[3], 3);
        let gam = rand_param(&mut s, "gamma", &[3], 4);
        let bet = rand_param(&mut s, "beta", &[3], 5);
        let f = |g: &mut Graph| {
            let xv = g.param(x);
            let wv = g.param(w);
            let bv = g.param(b);
            let y = g.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
            let (gv, bv2) = (g.param(gam), g.param(bet));
            let y = g.group_norm(y, gv, bv2, 3).unwrap();
            let y = g.silu(y);
            let y = g.square(y);
            g.mean(y)
        };
        for id in [x, w, b, gam, bet] {
            check_grad(&mut s, id, &f);
        }
    }

    #[test]
    fn matmul_transpose_variants() {
        let mut s = ParamStore::new();
        let a = rand_param(&mut s, "a", &[3, 4], 1);
        let b = rand_param(&mut s, "b", &[4, 2], 2);
        let c = rand_param(&mut s, "c", &[5, 2], 3);
        let f = |g: &mut Graph| {
            let (av, bv, cv) = (g.param(a), g.param(b), g.param(c));
            let ab = g.matmul(av, bv).unwrap(); // [3,2]
            let abc = g.matmul_t(ab, cv, false, true).unwrap(); // [3,5]
            let t = g.matmul_t(av, ab, true, false).unwrap(); // [4,2]
            let tt = g.transpose(t).unwrap();
            let tb = g.matmul_t(tt, bv, false, false).unwrap(); // [2,2]
            let sm = g.softmax_rows(abc);
            let l1 = g.square(sm);
            let l1 = g.sum(l1);
            let l2 = g.tanh(tb);
            let l2 = g.mean(l2);
            g.add(l1, l2).unwrap()
        };
        for id in [a, b, c] {
            check_grad(&mut s, id, &f);
        }
    }

    #[test]
    fn structural_op_gradients() {
        let mut s = ParamStore::new();
        let x = rand_param(&mut s, "x", &[2, 3, 2, 2], 7);
        let y = rand_param(&mut s, "y", &[2, 1, 2, 2], 8);
        let e = rand_param(&mut s, "e", &[2, 4], 9);
        let t = rand_param(&mut s, "t", &[6, 3], 10);
        let f = |g: &mut Graph| {
            let (xv, yv, ev, tv) = (g.param(x), g.param(y), g.param(e), g.param(t));
            let c = g.concat(xv, yv).unwrap(); // [2,4,2,2]
            let c = g.add_channel(c, ev).unwrap();
            let u = g.upsample2(c).unwrap();
            let ls = g.log_softmax_channels(u);
            let sm = g.softmax_channels(c);
            let pc = g.sum_per_channel(sm);
            let ms = g.mean_spatial(ls);
            let i0 = g.slice_batch(ms, 1).unwrap();
            let st = g.stack_batch(&[i0, i0]).unwrap();
            let r = g.reshape(st, &[8]).unwrap();
            let emb = g.embedding(tv, &[0, 5, 5]).unwrap();
            let emb = g.relu(emb);
            let a = g.sum(r);
            let b = g.square(pc);
            let b = g.sum(b);
            let c2 = g.mean(emb);
            let d = g.add_scalar(c2, 3.0);
            let ab = g.add(a, b).unwrap();
            let abd = g.div(ab, d).unwrap();
            g.scale(abd, 0.5)
        };
        for id in [x, y, e, t] {
            check_grad(&mut s, id, &f);
        }
    }

    #[test]
    fn frozen_params_get_no_gradient_but_pass_it_on() {
        let mut s = ParamStore::new();
        let a = rand_param(&mut s, "a", &[2, 2], 1);
        let b = rand_param(&mut s, "b", &[2, 2], 2);
        s.set_frozen_prefix("b", true);
        let mut g = Graph::new(&s);
        let (av, bv) = (g.param(a), g.param(b));
        let p = g.matmul(av, bv).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = ParamStore::new();
        let x = Tensor::randn(&[1, 2, 4, 4], &mut rng);
        let w = Tensor::randn(&[1, 2, 3, 3], &mut rng);
        let mut g = Graph::inference(&s);
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let yv = g.value(y).clone();
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for c in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let (ii, jj) = (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                            if (0..4).contains(&ii) && (0..4).contains(&jj) {
                                acc += x.data()[c * 16 + ii as usize * 4 + jj as usize] * w.data()[c * 9 + ki * 3 + kj];
                            }
                        }
                    }
                }
                assert!((yv.data()[i * 4 + j] - acc).abs() < 1e-12);
            }
        }
    }
}
