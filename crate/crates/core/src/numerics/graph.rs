//! Wengert-list reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so replaying the list backwards is
//! a valid topological order for the chain rule. Every forward op checks its
//! output for NaN/Inf and fails with the op name and node index.

use std::collections::HashMap;

use super::kernels;
use super::param::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use super::{NumericsError, Result};

const GAMMA_FLOOR: f64 = 1e-8;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Constant,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Abs(Var),
    Mean(Var),
    Sum(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
    Softmax(Var),
    Gelu(Var),
    LeakyRelu(Var, T),
    LayerNorm { x: Var, inv_std: Vec<T> },
    Conv3x3 { x: Var, w: Var, b: Option<Var> },
    Depthwise3x3 { x: Var, w: Var },
    PixelUnshuffle(Var, usize),
    PixelShuffle(Var, usize),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, len: usize },
    Reshape(Var),
    MeanRows(Var),
    DivAbs { x: Var, g: Var, idx: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Abs(_) => "abs",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::AddBias(..) => "add_bias",
            Op::MulBias(..) => "mul_bias",
            Op::Softmax(_) => "softmax",
            Op::Gelu(_) => "gelu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv3x3 { .. } => "conv3x3",
            Op::Depthwise3x3 { .. } => "depthwise3x3",
            Op::PixelUnshuffle(..) => "pixel_unshuffle",
            Op::PixelShuffle(..) => "pixel_shuffle",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::MeanRows(_) => "mean_rows",
            Op::DivAbs { .. } => "div_abs",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recorded computation. Build one per forward pass.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(msg: String) -> NumericsError {
    NumericsError::ShapeMismatch(msg)
}

/// Interprets a feature map as `[H, W, C]`.
fn hwc(shape: &[usize], op: &str) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w, c] => Ok((*h, *w, *c)),
        _ => Err(mismatch(format!(
            "{op} expects an H×W×C tensor, got {shape:?}"
        ))),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite(format!(
                "output of `{}` (node {})",
                op.name(),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Constant, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.get(id).value.clone(), Op::Param, true)?;
        self.params.insert(id, v);
        Ok(v)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.abs());
        let ng = self.ng(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = T::from_f64(t.numel() as f64);
        let s: T = t.data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::full(&[1], s / n), Op::Mean(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::full(&[1], s), Op::Sum(a), ng)
    }

    /// Mean absolute difference, the L1 loss used throughout training.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d)?;
        self.mean(d)
    }

    /// `a[..., k] · b[k, n] -> [..., n]`; covers both linear layers and 1×1 convolutions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let k = ashape.last().copied().unwrap_or(1);
        if bshape.len() != 2 || bshape[0] != k {
            return Err(mismatch(format!("matmul: {ashape:?} · {bshape:?}")));
        }
        let n = bshape[1];
        let m = self.value(a).numel() / k.max(1);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let mut shape = if ashape.is_empty() { vec![1] } else { ashape };
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let [m, n] = shape[..] else {
            return Err(mismatch(format!("transpose expects rank 2, got {shape:?}")));
        };
        let out = kernels::transpose(self.value(a).data(), m, n);
        let ng = self.ng(a);
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), ng)
    }

    /// Adds a `[n]` vector to every row of `a[..., n]`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.shape(b) != [n] {
            return Err(mismatch(format!(
                "add_bias: {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::AddBias(a, b), ng)
    }

    /// Multiplies every row of `a[..., n]` elementwise by a `[n]` vector.
    pub fn mul_bias(&mut self, a: Var, s: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.shape(s) != [n] {
            return Err(mismatch(format!(
                "mul_bias: {:?} * {:?}",
                self.shape(a),
                self.shape(s)
            )));
        }
        let scale = self.value(s).data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &sv) in row.iter_mut().zip(&scale) {
                *o *= sv;
            }
        }
        let ng = self.ng(a) || self.ng(s);
        self.push(out, Op::MulBias(a, s), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.last_dim();
        let out = kernels::softmax_rows(t.data(), n);
        let shape = t.shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(shape, out)?, Op::Softmax(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = kernels::gelu(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let v = kernels::leaky_relu(self.value(a), slope);
        let ng = self.ng(a);
        self.push(v, Op::LeakyRelu(a, T::from_f64(slope)), ng)
    }

    /// Parameter-free normalization over the last axis.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let n = t.last_dim();
        let (y, inv_std) = kernels::layer_norm_rows(t.data(), n, eps);
        let shape = t.shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(shape, y)?, Op::LayerNorm { x: a, inv_std }, ng)
    }

    /// Full 3×3 convolution of `x[H, W, Cin]` with `w[3, 3, Cin, Cout]`, zero padding.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (h, wd, cin) = hwc(self.shape(x), "conv3x3")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != 3 || ws[1] != 3 || ws[2] != cin {
            return Err(mismatch(format!(
                "conv3x3: kernel {ws:?} does not fit input channels {cin}"
            )));
        }
        let cout = ws[3];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(mismatch(format!(
                    "conv3x3: bias {:?} vs {cout}",
                    self.shape(b)
                )));
            }
        }
        let out = kernels::conv3x3(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            h,
            wd,
            cin,
            cout,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            Tensor::new(vec![h, wd, cout], out)?,
            Op::Conv3x3 { x, w, b },
            ng,
        )
    }

    /// Depth-wise 3×3 convolution of `x[H, W, C]` with `w[3, 3, C]`, zero padding.
    pub fn depthwise3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        let (h, wd, c) = hwc(self.shape(x), "depthwise3x3")?;
        if self.shape(w) != [3, 3, c] {
            return Err(mismatch(format!(
                "depthwise3x3: kernel {:?} vs {c} channels",
                self.shape(w)
            )));
        }
        let out = kernels::depthwise3x3(self.value(x).data(), self.value(w).data(), h, wd, c);
        let ng = self.ng(x) || self.ng(w);
        self.push(
            Tensor::new(vec![h, wd, c], out)?,
            Op::Depthwise3x3 { x, w },
            ng,
        )
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (h, w, c) = hwc(self.shape(x), "pixel_unshuffle")?;
        for extent in [h, w] {
            if r == 0 || extent % r != 0 {
                return Err(NumericsError::NotDivisible { extent, factor: r });
            }
        }
        let out = kernels::pixel_unshuffle(self.value(x).data(), h, w, c, r);
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![h / r, w / r, c * r * r], out)?,
            Op::PixelUnshuffle(x, r),
            ng,
        )
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (h, w, c) = hwc(self.shape(x), "pixel_shuffle")?;
        if r == 0 || c % (r * r) != 0 {
            return Err(NumericsError::NotDivisible {
                extent: c,
                factor: r * r,
            });
        }
        let out = kernels::pixel_shuffle(self.value(x).data(), h, w, c, r);
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![h * r, w * r, c / (r * r)], out)?,
            Op::PixelShuffle(x, r),
            ng,
        )
    }

    /// Concatenation along the last axis; leading extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat of zero tensors".into()))?;
        let lead = self.shape(*first);
        let lead = lead[..lead.len().saturating_sub(1)].to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(mismatch(format!("concat: {lead:?} vs {s:?}")));
            }
            total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let n = t.last_dim();
                out.extend_from_slice(&t.data()[r * n..(r + 1) * n]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), ng)
    }

    /// Channels `start..start + len` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        if start + len > n || len == 0 {
            return Err(mismatch(format!(
                "slice {start}..{} of last axis {n}",
                start + len
            )));
        }
        let out: Vec<T> = t
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(x);
        self.push(Tensor::new(shape, out)?, Op::Slice { x, start, len }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Average over every leading position: `[..., C] -> [C]` (global average pool).
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        let rows = t.numel() / n;
        let mut out = vec![T::ZERO; n];
        for row in t.data().chunks(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::ONE / T::from_f64(rows as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n], out)?, Op::MeanRows(x), ng)
    }

    /// `x / (|g[idx]| + 1e-8)`: division by one learnable temperature.
    pub fn div_abs(&mut self, x: Var, g: Var, idx: usize) -> Result<Var> {
        if idx >= self.value(g).numel() {
            return Err(mismatch(format!(
                "div_abs index {idx} of {:?}",
                self.shape(g)
            )));
        }
        let d = self.value(g).data()[idx].abs() + T::from_f64(GAMMA_FLOOR);
        let v = self.value(x).map(|v| v / d);
        let ng = self.ng(x) || self.ng(g);
        self.push(v, Op::DivAbs { x, g, idx }, ng)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn acc(&mut self, v: Var, g: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, g).expect("gradient shape"));
            }
        }
    }

    /// Back-propagates from a scalar `loss` with seed gradient 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_scaled(loss, 1.0)
    }

    /// Back-propagates from a scalar `loss` with seed gradient `seed`.
    pub fn backward_scaled(&mut self, loss: Var, seed: f64) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(mismatch(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        let shape = self.shape(loss).to_vec();
        self.grads[loss.0] = Some(Tensor::full(&shape, T::from_f64(seed)));
        for i in (0..=loss.0).rev() {
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.backprop_node(i, &op, &gy);
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, op: &Op<T>, gy: &Tensor<T>) {
        let g = gy.data();
        match *op {
            Op::Constant | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(a, g.to_vec());
                self.acc(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(a, g.to_vec());
                self.acc(b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.ng(a) {
                    let bv = self.value(b).data();
                    let ga = g.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                    self.acc(a, ga);
                }
                if self.ng(b) {
                    let av = self.value(a).data();
                    let gb = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    self.acc(b, gb);
                }
            }
            Op::Scale(a, c) => self.acc(a, g.iter().map(|&v| v * c).collect()),
            Op::Abs(a) => {
                let x = self.value(a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| {
                        if xv > T::ZERO {
                            gv
                        } else if xv < T::ZERO {
                            -gv
                        } else {
                            T::ZERO
                        }
                    })
                    .collect();
                self.acc(a, ga);
            }
            Op::Mean(a) => {
                let n = self.value(a).numel();
                let v = g[0] / T::from_f64(n as f64);
                self.acc(a, vec![v; n]);
            }
            Op::Sum(a) => {
                let n = self.value(a).numel();
                self.acc(a, vec![g[0]; n]);
            }
            Op::MatMul(a, b) => {
                let k = self.value(a).last_dim();
                let n = self.value(b).shape()[1];
                let m = self.value(a).numel() / k.max(1);
                let (da, db) = kernels::matmul_backward(
                    self.value(a).data(),
                    self.value(b).data(),
                    g,
                    m,
                    k,
                    n,
                );
                self.acc(a, da);
                self.acc(b, db);
            }
            Op::Transpose(a) => {
                let s = self.shape(a);
                let (m, n) = (s[0], s[1]);
                self.acc(a, kernels::transpose(g, n, m));
            }
            Op::AddBias(a, b) => {
                self.acc(a, g.to_vec());
                if self.ng(b) {
                    let n = self.value(b).numel();
                    let mut gb = vec![T::ZERO; n];
                    for row in g.chunks(n) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.acc(b, gb);
                }
            }
            Op::MulBias(a, s) => {
                let n = self.value(s).numel();
                if self.ng(a) {
                    let sv = self.value(s).data();
                    let mut ga = g.to_vec();
                    for row in ga.chunks_mut(n) {
                        for (o, &v) in row.iter_mut().zip(sv) {
                            *o *= v;
                        }
                    }
                    self.acc(a, ga);
                }
                if self.ng(s) {
                    let av = self.value(a).data();
                    let mut gs = vec![T::ZERO; n];
                    for (grow, arow) in g.chunks(n).zip(av.chunks(n)) {
                        for ((o, &gv), &x) in gs.iter_mut().zip(grow).zip(arow) {
                            *o += gv * x;
                        }
                    }
                    self.acc(s, gs);
                }
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.data();
                let n = self.nodes[i].value.last_dim();
                let ga = kernels::softmax_rows_backward(y, g, n);
                self.acc(a, ga);
            }
            Op::Gelu(a) => {
                let x = self.value(a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| gv * kernels::gelu_grad_scalar(xv))
                    .collect();
                self.acc(a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv >= T::ZERO { gv } else { gv * slope })
                    .collect();
                self.acc(a, ga);
            }
            Op::LayerNorm { x, ref inv_std } => {
                let y = self.nodes[i].value.data();
                let n = self.nodes[i].value.last_dim();
                let gx = kernels::layer_norm_rows_backward(y, inv_std, g, n);
                self.acc(x, gx);
            }
            Op::Conv3x3 { x, w, b } => {
                let s = self.shape(x);
                let (h, wd, cin) = (s[0], s[1], s[2]);
                let cout = self.shape(w)[3];
                let (dx, dw, db) = kernels::conv3x3_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    g,
                    h,
                    wd,
                    cin,
                    cout,
                    self.ng(x),
                );
                if let Some(dx) = dx {
                    self.acc(x, dx);
                }
                self.acc(w, dw);
                if let Some(b) = b {
                    self.acc(b, db);
                }
            }
            Op::Depthwise3x3 { x, w } => {
                let s = self.shape(x);
                let (h, wd, c) = (s[0], s[1], s[2]);
                let (dx, dw) = kernels::depthwise3x3_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    g,
                    h,
                    wd,
                    c,
                );
                self.acc(x, dx);
                self.acc(w, dw);
            }
            Op::PixelUnshuffle(x, r) => {
                let s = self.shape(x);
                let (h, w, c) = (s[0], s[1], s[2]);
                self.acc(x, kernels::pixel_shuffle(g, h / r, w / r, c * r * r, r));
            }
            Op::PixelShuffle(x, r) => {
                let s = self.shape(x);
                let (h, w, c) = (s[0], s[1], s[2]);
                self.acc(x, kernels::pixel_unshuffle(g, h * r, w * r, c / (r * r), r));
            }
            Op::Concat(ref parts) => {
                let total = gy.last_dim();
                let rows = gy.numel() / total;
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).last_dim();
                    if self.ng(p) {
                        let mut gp = Vec::with_capacity(rows * n);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + n]);
                        }
                        self.acc(p, gp);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, start, len } => {
                let n = self.value(x).last_dim();
                let rows = self.value(x).numel() / n;
                let mut gx = vec![T::ZERO; rows * n];
                for r in 0..rows {
                    gx[r * n + start..r * n + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.acc(x, gx);
            }
            Op::Reshape(x) => self.acc(x, g.to_vec()),
            Op::MeanRows(x) => {
                let n = g.len();
                let rows = self.value(x).numel() / n;
                let inv = T::ONE / T::from_f64(rows as f64);
                let row: Vec<T> = g.iter().map(|&v| v * inv).collect();
                let mut gx = Vec::with_capacity(rows * n);
                for _ in 0..rows {
                    gx.extend_from_slice(&row);
                }
                self.acc(x, gx);
            }
            Op::DivAbs { x, g: gam, idx } => {
                let gv = self.value(gam).data()[idx];
                let d = gv.abs() + T::from_f64(GAMMA_FLOOR);
                self.acc(x, g.iter().map(|&v| v / d).collect());
                if self.ng(gam) {
                    // d/dγ (x / (|γ| + δ)) = -x·sign(γ) / (|γ| + δ)²
                    let sign = if gv > T::ZERO {
                        T::ONE
                    } else if gv < T::ZERO {
                        -T::ONE
                    } else {
                        T::ZERO
                    };
                    let xv = self.value(x).data();
                    let dot: T = g.iter().zip(xv).map(|(&a, &b)| a * b).sum();
                    let mut gg = vec![T::ZERO; self.value(gam).numel()];
                    gg[idx] = -dot * sign / (d * d);
                    self.acc(gam, gg);
                }
            }
        }
    }

    /// Parameter gradients after [`Graph::backward`], indexed by parameter id.
    /// Parameters the graph never touched get `None`.
    pub fn param_grads(&self, num_params: usize) -> Vec<Option<Tensor<T>>> {
        let mut out = vec![None; num_params];
        for (&id, &v) in &self.params {
            if id.0 < num_params {
                out[id.0] = self.grad(v).cloned();
            }
        }
        out
    }

    /// Adds this graph's parameter gradients into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        let grads = self.param_grads(store.len());
        store.accumulate_grads(&grads);
    }
}
