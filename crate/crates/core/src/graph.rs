//! Reverse-mode automatic differentiation over a per-rollout tape.
//!
//! Every forward computation appends a node holding its value; `backward`
//! walks the tape once in reverse. Parameters enter the tape through
//! [`Graph::param`], which caches one node per parameter so a recurrent
//! rollout accumulates all of its time steps into a single gradient.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, split_axis, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this module.
///
/// `backward` receives the input values, the forward output and the output
/// gradient, and returns one optional gradient per input.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Real> {
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    GlobalAvgPool(Var),
    ChannelScale {
        x: Var,
        s: Var,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    param_nodes: BTreeMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A leaf whose gradient is tracked (used for gradient checks on inputs).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Stops gradient flow: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn custom(
        &mut self,
        inputs: Vec<Var>,
        value: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Var {
        let needs = self.any_grad(&inputs);
        self.push(value, Op::Custom { inputs, op }, needs)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.value(a).zip_map(self.value(b), f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x + y)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x - y)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x * y)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let k = T::of(factor);
        let value = self.value(a).map(|x| x * k);
        let needs = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, k), needs)
    }

    /// `x · wᵀ + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape(format!(
                "linear: input {:?} incompatible with weight {:?}",
                xs, ws
            )));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * dout];
        gemm(
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            n,
            din,
            dout,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b);
            bias.expect_shape(&[dout])?;
            for row in out.chunks_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.any_grad(&deps);
        Ok(self.push(Tensor::new(&[n, dout], out)?, Op::Linear { x, w, b }, needs))
    }

    /// Square-kernel 2-D convolution on `[n, c, h, w]` tensors.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::Shape(format!(
                "conv2d: input {:?} incompatible with kernel {:?}",
                xs, ws
            )));
        }
        let geo = ConvGeometry::new(&xs, ws[0], ws[2], stride, pad)?;
        let col = geo.im2col(self.value(x).data());
        let cols = geo.n * geo.ho * geo.wo;
        let mut mat = vec![T::zero(); geo.cout * cols];
        gemm(
            self.value(w).data(),
            false,
            &col,
            false,
            &mut mat,
            geo.cout,
            geo.kdim(),
            cols,
            false,
        );
        let bias = match b {
            Some(b) => {
                self.value(b).expect_shape(&[geo.cout])?;
                Some(self.value(b).data())
            }
            None => None,
        };
        let out = geo.mat_to_nchw(&mat, bias);
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.any_grad(&deps);
        Ok(self.push(
            Tensor::new(&[geo.n, geo.cout, geo.ho, geo.wo], out)?,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            needs,
        ))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("upsample2x expects NCHW, got {:?}", s)));
        }
        let (h, w) = (s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len() * 4];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(h * w * 4)) {
            for r in 0..2 * h {
                for c in 0..2 * w {
                    dst[r * 2 * w + c] = plane[(r / 2) * w + c / 2];
                }
            }
        }
        let needs = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?,
            Op::Upsample2x(x),
            needs,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let k = T::of(slope);
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * k });
        let needs = self.any_grad(&[x]);
        self.push(value, Op::LeakyRelu(x, k), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let needs = self.any_grad(&[x]);
        self.push(value, Op::Sigmoid(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let needs = self.any_grad(&[x]);
        self.push(value, Op::Tanh(x), needs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        let needs = self.any_grad(&[x]);
        self.push(value, Op::Exp(x), needs)
    }

    /// Hard clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        let needs = self.any_grad(&[x]);
        self.push(value, Op::Clamp { x, lo, hi }, needs)
    }

    /// Concatenation along axis 1 (features for `[n, d]`, channels for NCHW).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::Shape(format!(
                    "concat: {:?} incompatible with {:?}",
                    s, first
                )));
            }
            axis_total += s[1];
        }
        let (outer, _, inner) = split_axis(&first, 1);
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &p in parts {
                let (_, a, _) = split_axis(self.shape(p), 1);
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * a * inner..(o + 1) * a * inner]);
            }
        }
        let mut shape = first;
        shape[1] = axis_total;
        let needs = self.any_grad(parts);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(parts.to_vec()), needs))
    }

    /// `len` entries of axis 1 starting at `start`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start + len > s[1] {
            return Err(Error::Shape(format!(
                "slice [{}, {}) out of range for {:?}",
                start,
                start + len,
                s
            )));
        }
        let (outer, a, inner) = split_axis(&s, 1);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * a * inner;
            out.extend_from_slice(&src[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { x, start }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool expects NCHW, got {:?}", s)));
        }
        let hw = s[2] * s[3];
        let inv = T::of(1.0 / hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&s[..2], out)?, Op::GlobalAvgPool(x), needs))
    }

    /// Multiplies every channel plane of `x: [n, c, h, w]` by `s: [n, c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(s) != &xs[..2] {
            return Err(Error::Shape(format!(
                "channel_scale: {:?} vs {:?}",
                xs,
                self.shape(s)
            )));
        }
        let hw = xs[2] * xs[3];
        let scales = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (plane, &k) in out.chunks_mut(hw).zip(scales) {
            plane.iter_mut().for_each(|v| *v *= k);
        }
        let needs = self.any_grad(&[x, s]);
        Ok(self.push(Tensor::new(&xs, out)?, Op::ChannelScale { x, s }, needs))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Input | Op::Param);
            if is_leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let params = self
            .param_nodes
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].take().map(|g| (id, g)))
            .collect();
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y).expect("same shape");
                    self.accumulate(grads, *a, ga);
                }
                if self.needs_grad(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y).expect("same shape");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.accumulate(grads, *a, g.map(|v| v * k));
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, din) = (xv.dim(0), xv.dim(1));
                let dout = wv.dim(0);
                if self.needs_grad(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    gemm(g.data(), false, wv.data(), false, &mut dx, n, dout, din, false);
                    self.accumulate(grads, *x, Tensor::new(&[n, din], dx).expect("shape"));
                }
                if self.needs_grad(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    gemm(g.data(), true, xv.data(), false, &mut dw, dout, n, din, false);
                    self.accumulate(grads, *w, Tensor::new(&[dout, din], dw).expect("shape"));
                }
                if let Some(b) = b {
                    if self.needs_grad(*b) {
                        let mut db = vec![T::zero(); dout];
                        for row in g.data().chunks(dout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(&[dout], db).expect("shape"));
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let geo = ConvGeometry::new(xv.shape(), wv.dim(0), wv.dim(2), *stride, *pad)
                    .expect("validated in forward");
                let cols = geo.n * geo.ho * geo.wo;
                let dmat = geo.nchw_to_mat(g.data());
                if self.needs_grad(*w) {
                    let col = geo.im2col(xv.data());
                    let mut dw = vec![T::zero(); geo.cout * geo.kdim()];
                    gemm(&dmat, false, &col, true, &mut dw, geo.cout, cols, geo.kdim(), false);
                    self.accumulate(grads, *w, Tensor::new(wv.shape(), dw).expect("shape"));
                }
                if let Some(b) = b {
                    if self.needs_grad(*b) {
                        let db: Vec<T> = dmat.chunks(cols).map(|r| r.iter().copied().sum()).collect();
                        self.accumulate(grads, *b, Tensor::new(&[geo.cout], db).expect("shape"));
                    }
                }
                if self.needs_grad(*x) {
                    let mut dcol = vec![T::zero(); geo.kdim() * cols];
                    gemm(wv.data(), true, &dmat, false, &mut dcol, geo.kdim(), geo.cout, cols, false);
                    let dx = geo.col2im(&dcol);
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), dx).expect("shape"));
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (dst, src) in dx.chunks_mut(h * w).zip(g.data().chunks(h * w * 4)) {
                    for r in 0..2 * h {
                        for c in 0..2 * w {
                            dst[(r / 2) * w + c / 2] += src[r * 2 * w + c];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s, dx).expect("shape"));
            }
            Op::LeakyRelu(x, k) => {
                let k = *k;
                let dx = g
                    .zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { gv * k })
                    .expect("shape");
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g
                    .zip_map(out, |gv, y| gv * y * (T::one() - y))
                    .expect("shape");
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let dx = g.zip_map(out, |gv, y| gv * (T::one() - y * y)).expect("shape");
                self.accumulate(grads, *x, dx);
            }
            Op::Exp(x) => {
                let dx = g.zip_map(out, |gv, y| gv * y).expect("shape");
                self.accumulate(grads, *x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let dx = g
                    .zip_map(self.value(*x), |gv, xv| {
                        if xv < lo || xv > hi {
                            T::zero()
                        } else {
                            gv
                        }
                    })
                    .expect("shape");
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(parts) => {
                let (outer, total, inner) = split_axis(out.shape(), 1);
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    let a = ps[1];
                    if self.needs_grad(p) {
                        let mut dp = Vec::with_capacity(outer * a * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            dp.extend_from_slice(&g.data()[base..base + a * inner]);
                        }
                        self.accumulate(grads, p, Tensor::new(ps, dp).expect("shape"));
                    }
                    offset += a;
                }
            }
            Op::Slice { x, start } => {
                let xs = self.shape(*x);
                let (outer, a, inner) = split_axis(xs, 1);
                let len = out.dim(1);
                let mut dx = vec![T::zero(); outer * a * inner];
                for o in 0..outer {
                    let dst = o * a * inner + start * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(xs, dx).expect("shape"));
            }
            Op::Reshape(x) => {
                let dx = g.clone().reshape(self.shape(*x)).expect("shape");
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let inv = T::of(1.0 / hw as f64);
                let mut dx = Vec::with_capacity(hw * g.len());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                self.accumulate(grads, *x, Tensor::new(xs, dx).expect("shape"));
            }
            Op::ChannelScale { x, s } => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                let hw = xv.dim(2) * xv.dim(3);
                if self.needs_grad(*x) {
                    let mut dx = g.data().to_vec();
                    for (plane, &k) in dx.chunks_mut(hw).zip(sv.data()) {
                        plane.iter_mut().for_each(|v| *v *= k);
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), dx).expect("shape"));
                }
                if self.needs_grad(*s) {
                    let ds: Vec<T> = g
                        .data()
                        .chunks(hw)
                        .zip(xv.data().chunks(hw))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *s, Tensor::new(sv.shape(), ds).expect("shape"));
                }
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let input_grads = op.backward(&values, out, g);
                debug_assert_eq!(input_grads.len(), inputs.len(), "{}", op.name());
                for (&v, gi) in inputs.iter().zip(input_grads) {
                    if let Some(gi) = gi {
                        self.accumulate(grads, v, gi);
                    }
                }
            }
        }
    }
}

pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a tracked leaf created with [`Graph::variable`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Tensor<T>)> {
        self.params
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Index bookkeeping shared by the convolution forward and backward passes.
struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], cout: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Shape(format!(
                "conv2d: kernel {} stride {} pad {} does not fit {:?}",
                k, stride, pad, xs
            )));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Output columns `oj` whose input column `oj·stride + kj − pad` is inside
    /// the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).div_ceil(self.stride);
        let hi = if self.w + self.pad > kj {
            ((self.w + self.pad - kj - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// `[cin·k·k, n·ho·wo]` patch matrix.
    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let plane = self.ho * self.wo;
        let cols = self.n * plane;
        let mut col = vec![T::zero(); self.kdim() * cols];
        for c in 0..self.cin {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let (lo, hi) = self.valid_cols(kj);
                    for b in 0..self.n {
                        let src = &x[(b * self.cin + c) * self.h * self.w..][..self.h * self.w];
                        for oi in 0..self.ho {
                            let r = (oi * self.stride + ki) as isize - self.pad as isize;
                            if r < 0 || r as usize >= self.h || lo >= hi {
                                continue;
                            }
                            let start = r as usize * self.w + lo * self.stride + kj - self.pad;
                            let drow = &mut dst[b * plane + oi * self.wo + lo..][..hi - lo];
                            if self.stride == 1 {
                                drow.copy_from_slice(&src[start..start + (hi - lo)]);
                            } else {
                                for (d, s) in drow.iter_mut().zip(src[start..].iter().step_by(self.stride)) {
                                    *d = *s;
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Real>(&self, col: &[T]) -> Vec<T> {
        let plane = self.ho * self.wo;
        let cols = self.n * plane;
        let mut x = vec![T::zero(); self.n * self.cin * self.h * self.w];
        for c in 0..self.cin {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &col[row * cols..(row + 1) * cols];
                    let (lo, hi) = self.valid_cols(kj);
                    for b in 0..self.n {
                        let dst = &mut x[(b * self.cin + c) * self.h * self.w..][..self.h * self.w];
                        for oi in 0..self.ho {
                            let r = (oi * self.stride + ki) as isize - self.pad as isize;
                            if r < 0 || r as usize >= self.h || lo >= hi {
                                continue;
                            }
                            let start = r as usize * self.w + lo * self.stride + kj - self.pad;
                            let srow = &src[b * plane + oi * self.wo + lo..][..hi - lo];
                            for (d, s) in dst[start..].iter_mut().step_by(self.stride).zip(srow) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// `[cout, n·p]` -> `[n, cout, p]`, adding the bias.
    fn mat_to_nchw<T: Real>(&self, mat: &[T], bias: Option<&[T]>) -> Vec<T> {
        let plane = self.ho * self.wo;
        let cols = self.n * plane;
        let mut out = vec![T::zero(); self.n * self.cout * plane];
        for co in 0..self.cout {
            let bv = bias.map_or(T::zero(), |b| b[co]);
            for b in 0..self.n {
                let src = &mat[co * cols + b * plane..][..plane];
                let dst = &mut out[(b * self.cout + co) * plane..][..plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        out
    }

    fn nchw_to_mat<T: Real>(&self, g: &[T]) -> Vec<T> {
        let plane = self.ho * self.wo;
        let cols = self.n * plane;
        let mut mat = vec![T::zero(); self.cout * cols];
        for co in 0..self.cout {
            for b in 0..self.n {
                mat[co * cols + b * plane..][..plane]
                    .copy_from_slice(&g[(b * self.cout + co) * plane..][..plane]);
            }
        }
        mat
    }
}
