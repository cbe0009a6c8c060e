//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value and enough
//! saved state to replay its vector-Jacobian product. [`Tape::backward`]
//! walks the nodes in exact reverse recording order, once.

use crate::error::{shape_err, Error, Result};

use super::kernels::{self, ConvGeom};
use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, b_t: bool },
    Transpose(Var),
    Softmax(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<f64> },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, k: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Resize { x: Var, dims: [usize; 5] },
    PointSample { x: Var, rows: Vec<usize>, taps: Vec<[(usize, f64); 4]> },
    BceRows { p: Var, target: Vec<f64> },
    DiceRows { p: Var, target: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::MulConst(..) => "mul_const",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Softmax(_) => "softmax_last",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool",
            Op::AvgPool { .. } => "avg_pool",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumLast(_) => "sum_last",
            Op::Resize { .. } => "bilinear_resize",
            Op::PointSample { .. } => "point_sample",
            Op::BceRows { .. } => "bce_rows",
            Op::DiceRows { .. } => "dice_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Attention { .. } => "attention",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A forward recording. One backward pass per recording.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient data for `v`, zeros when `v` does not influence the loss.
    pub fn data_or_zeros(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0)?.take()
    }

    /// Node indices whose vector-Jacobian product ran, in visit order.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn expect_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Attention probabilities saved by [`Tape::attention`], laid out
    /// `[heads, queries, keys]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input. Non-finite inputs are rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        expect_same_shape("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    /// `x[..., n] + bias[n]`, broadcasting the bias over leading axes.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = *vx.shape().last().ok_or_else(|| shape_err("add_row", "rank-0 input"))?;
        if vb.numel() != n {
            return Err(shape_err("add_row", format!("{:?} + {:?}", vx.shape(), vb.shape())));
        }
        let mut data = vx.data().to_vec();
        if n > 0 {
            for row in data.chunks_mut(n) {
                for (d, b) in row.iter_mut().zip(vb.data()) {
                    *d += b;
                }
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        self.push(out, Op::AddRow(x, bias), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        expect_same_shape("mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Elementwise product with a constant of the same size (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let vx = self.value(x);
        if vx.numel() != c.len() {
            return Err(shape_err("mul_const", format!("{} vs {}", vx.numel(), c.len())));
        }
        let data = vx.data().iter().zip(&c).map(|(a, b)| a * b).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::MulConst(x, c), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = super::as_matrix("matmul", va)?;
        let (r, c) = super::as_matrix("matmul", vb)?;
        let (k2, n) = if b_t { (c, r) } else { (r, c) };
        if k != k2 {
            return Err(shape_err("matmul", format!("{:?} · {:?} (b_t={b_t})", va.shape(), vb.shape())));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, va.data(), false, vb.data(), b_t, &mut out, false);
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul { a, b, b_t }, rg)
    }

    /// `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (m, n) = super::as_matrix("transpose", vx)?;
        let src = vx.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Transpose(x), rg)
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let out = super::softmax_last(self.value(x))?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let n = *vx.shape().last().ok_or_else(|| shape_err("layer_norm", "rank-0 input"))?;
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.numel() != n || vb.numel() != n || n == 0 {
            return Err(shape_err("layer_norm", format!("x {:?}, gamma {:?}", vx.shape(), vg.shape())));
        }
        let rows = vx.numel() / n;
        let mut xhat = vec![0.0; vx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let src = &vx.data()[r * n..(r + 1) * n];
            let mean = src.iter().sum::<f64>() / n as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = s;
            for j in 0..n {
                let xh = (src[j] - mean) * s;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// 2-D convolution of `x: [cin, h, w]` with `w: [cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, wd) = super::as_chw("conv2d", self.value(x))?;
        let (cout, k) = match self.value(w).shape() {
            &[co, ci, kh, kw] if ci == cin && kh == kw => (co, kh),
            s => return Err(shape_err("conv2d", format!("weight {s:?} for input channels {cin}"))),
        };
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(shape_err("conv2d", "bias length != output channels"));
            }
        }
        let geom = ConvGeom::new(cin, h, wd, k, stride, pad)
            .ok_or_else(|| shape_err("conv2d", format!("kernel {k} does not fit {h}x{wd} (pad {pad})")))?;
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let p = geom.positions();
        let mut out = vec![0.0; cout * p];
        kernels::gemm(cout, geom.patch(), p, self.value(w).data(), false, &cols, false, &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (o, row) in out.chunks_mut(p).enumerate() {
                for v in row {
                    *v += bias[o];
                }
            }
        }
        let out = Tensor::new(vec![cout, geom.oh, geom.ow], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(out, Op::Conv2d { x, w, b, geom, cols }, rg)
    }

    /// 2×2 max pooling with stride 2 on `[c, h, w]`.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = super::as_chw("max_pool", self.value(x))?;
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                            if src[i] > best.0 {
                                best = (src[i], i);
                            }
                        }
                    }
                    let o = (ch * oh + oy) * ow + ox;
                    out[o] = best.0;
                    argmax[o] = best.1;
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::MaxPool { x, argmax }, rg)
    }

    /// `k×k` average pooling with stride `k` on `[c, h, w]`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (c, h, w) = super::as_chw("avg_pool", self.value(x))?;
        if k == 0 {
            return Err(Error::InvalidArgument("avg_pool with k = 0".into()));
        }
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        let norm = 1.0 / (k * k) as f64;
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += src[(ch * h + k * oy + dy) * w + k * ox + dx];
                        }
                    }
                    out[(ch * oh + oy) * ow + ox] = s * norm;
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::AvgPool { x, k }, rg)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        self.push(out, Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    /// The sub-range `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("narrow", format!("{shape:?} axis {axis} [{start}, {})", start + len)));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Narrow { x, axis, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Sums the last axis away.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (&n, lead) = v.shape().split_last().ok_or_else(|| shape_err("sum_last", "rank-0 input"))?;
        let data = if n == 0 {
            vec![0.0; lead.iter().product()]
        } else {
            v.data().chunks(n).map(|r| r.iter().sum()).collect()
        };
        let out = Tensor::new(lead.to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::SumLast(x), rg)
    }

    /// Differentiable align-corners-false bilinear resize of `[c, h, w]`.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let out = super::bilinear_resize(self.value(x), oh, ow)?;
        let (c, h, w) = super::as_chw("bilinear_resize", self.value(x))?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Resize { x, dims: [c, h, w, oh, ow] }, rg)
    }

    /// Samples rows of `x: [n, h, w]` at normalized points.
    ///
    /// Output row `j` is map `rows[j]` evaluated at `points[j]`; every row
    /// must carry the same number of points. The output is `[rows, K]`.
    pub fn point_sample(&mut self, x: Var, rows: &[usize], points: &[&[(f64, f64)]]) -> Result<Var> {
        let (n, h, w) = super::as_chw("point_sample", self.value(x))?;
        if rows.len() != points.len() {
            return Err(shape_err("point_sample", "rows and point sets differ in count"));
        }
        let k = points.first().map_or(0, |p| p.len());
        if points.iter().any(|p| p.len() != k) {
            return Err(shape_err("point_sample", "point sets differ in size"));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err("point_sample", format!("row {r} of {n}")));
        }
        let src = self.value(x).data();
        let mut taps = Vec::with_capacity(rows.len() * k);
        let mut out = Vec::with_capacity(rows.len() * k);
        for (&r, pts) in rows.iter().zip(points) {
            let map = &src[r * h * w..(r + 1) * h * w];
            for &(px, py) in pts.iter() {
                let t = kernels::point_taps(px, py, h, w);
                out.push(kernels::point_value(map, &t));
                taps.push(t);
            }
        }
        let out = Tensor::new(vec![rows.len(), k], out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::PointSample { x, rows: rows.to_vec(), taps }, rg)
    }

    /// Per-row mean binary cross-entropy of logits `p: [m, K]` against
    /// constant targets in `[0, 1]`. Output `[m]`.
    pub fn bce_rows(&mut self, p: Var, target: Vec<f64>) -> Result<Var> {
        let (m, k) = super::as_matrix("bce_rows", self.value(p))?;
        if target.len() != m * k {
            return Err(shape_err("bce_rows", "target size"));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("bce over zero points".into()));
        }
        let data: Vec<f64> = self
            .value(p)
            .data()
            .chunks(k)
            .zip(target.chunks(k))
            .map(|(pr, tr)| pr.iter().zip(tr).map(|(&x, &t)| kernels::softplus(x) - t * x).sum::<f64>() / k as f64)
            .collect();
        let out = Tensor::new(vec![m], data)?;
        let rg = self.rg(&[p]);
        self.push(out, Op::BceRows { p, target }, rg)
    }

    /// Per-row dice loss `1 − (2Σσ(p)t + 1)/(Σσ(p) + Σt + 1)`. Output `[m]`.
    pub fn dice_rows(&mut self, p: Var, target: Vec<f64>) -> Result<Var> {
        let (m, k) = super::as_matrix("dice_rows", self.value(p))?;
        if target.len() != m * k {
            return Err(shape_err("dice_rows", "target size"));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("dice over zero points".into()));
        }
        let data: Vec<f64> = self
            .value(p)
            .data()
            .chunks(k)
            .zip(target.chunks(k))
            .map(|(pr, tr)| {
                let (num, den) = dice_terms(pr, tr);
                1.0 - num / den
            })
            .collect();
        let out = Tensor::new(vec![m], data)?;
        let rg = self.rg(&[p]);
        self.push(out, Op::DiceRows { p, target }, rg)
    }

    /// Weighted mean cross-entropy `Σ wᵢ·CEᵢ / Σ wᵢ` over rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (n, c) = super::as_matrix("cross_entropy", self.value(logits))?;
        if targets.len() != n || weights.len() != n {
            return Err(shape_err("cross_entropy", "targets/weights length"));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err("cross_entropy", format!("target {t} of {c} classes")));
        }
        let wsum: f64 = weights.iter().sum();
        if n == 0 || wsum <= 0.0 {
            return Err(Error::InvalidArgument("cross_entropy with zero total weight".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let x_t = row[targets[i]];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += weights[i] * (lse - x_t);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let out = Tensor::scalar(total / wsum);
        let rg = self.rg(&[logits]);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [n, c]`, `k, v: [m, c]`; heads split `c` into contiguous blocks.
    /// `bias: [n, m]` is added to every head's logits before the softmax
    /// (use [`super::MASKED`] to exclude a key). Output `[n, c]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Option<&Tensor>, heads: usize) -> Result<Var> {
        let (n, c) = super::as_matrix("attention", self.value(q))?;
        let (m, ck) = super::as_matrix("attention", self.value(k))?;
        if self.value(v).shape() != [m, ck] || ck != c {
            return Err(shape_err(
                "attention",
                format!("q {:?} k {:?} v {:?}", self.shape(q), self.shape(k), self.shape(v)),
            ));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::InvalidArgument(format!("{c} channels not divisible by {heads} heads")));
        }
        if let Some(b) = bias {
            if b.shape() != [n, m] {
                return Err(shape_err("attention", format!("bias {:?} for {n}x{m} logits", b.shape())));
            }
        }
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * c];
        for h in 0..heads {
            let off = h * d;
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            kernels::gemm_strided(n, d, m, &qd[off..], (c, 1), &kd[off..], (1, c), 0.0, p, (m, 1));
            for v in p.iter_mut() {
                *v *= scale;
            }
            if let Some(b) = bias {
                for (v, bv) in p.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
            if m > 0 {
                for row in p.chunks_mut(m) {
                    kernels::softmax_in_place(row)?;
                }
            }
            kernels::gemm_strided(n, m, d, p, (m, 1), &vd[off..], (c, 1), 0.0, &mut out[off..], (c, 1));
        }
        let out = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, heads, probs }, rg)
    }

    /// Runs the backward pass from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", format!("loss of shape {:?}", self.shape(loss))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut visited = Vec::new();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            visited.push(i);
            self.vjp(node, g, lower);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes, visited })
    }

    fn vjp(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = slot(nodes, grads, v) {
                        add_into(d, g);
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(d) = slot(nodes, grads, *x) {
                    add_into(d, g);
                }
                if let Some(d) = slot(nodes, grads, *b) {
                    let n = d.len();
                    if n > 0 {
                        for row in g.chunks(n) {
                            add_into(d, row);
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(d) = slot(nodes, grads, *a) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(val(*b)) {
                        *d += g * y;
                    }
                }
                if let Some(d) = slot(nodes, grads, *b) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(val(*a)) {
                        *d += g * x;
                    }
                }
            }
            Op::MulConst(x, c) => {
                if let Some(d) = slot(nodes, grads, *x) {
                    for ((d, g), c) in d.iter_mut().zip(g).zip(c) {
                        *d += g * c;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = slot(nodes, grads, *x) {
                    for (d, g) in d.iter_mut().zip(g) {
                        *d += g * s;
                    }
                }
            }
            Op::MatMul { a, b, b_t } => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = g.len() / m.max(1);
                let (av, bv) = (val(*a), val(*b));
                if let Some(d) = slot(nodes, grads, *a) {
                    // dA = G · Bᵀ (B stored k×n) or G · B (B stored n×k)
                    kernels::gemm(m, n, k, g, false, &bv, !b_t, d, true);
                }
                if let Some(d) = slot(nodes, grads, *b) {
                    if *b_t {
                        // dB (n×k) = Gᵀ · A
                        kernels::gemm(n, m, k, g, true, &av, false, d, true);
                    } else {
                        // dB (k×n) = Aᵀ · G
                        kernels::gemm(k, m, n, &av, true, g, false, d, true);
                    }
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                if let Some(d) = slot(nodes, grads, *x) {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap_or(&1);
                if let Some(d) = slot(nodes, grads, *x) {
                    if n > 0 {
                        for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                                *d += y * (g - dot);
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                if let Some(d) = slot(nodes, grads, *x) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                if let Some(d) = slot(nodes, grads, *x) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                        *d += g * gelu_parts(*x).1;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(d) = slot(nodes, grads, *x) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = val(*gamma);
                let n = gam.len();
                if let Some(d) = slot(nodes, grads, *gamma) {
                    for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((d, g), xh) in d.iter_mut().zip(gr).zip(xr) {
                            *d += g * xh;
                        }
                    }
                }
                if let Some(d) = slot(nodes, grads, *beta) {
                    for gr in g.chunks(n) {
                        add_into(d, gr);
                    }
                }
                if let Some(d) = slot(nodes, grads, *x) {
                    for (r, ((dr, gr), xr)) in d.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..n {
                            let dxh = gr[j] * gam[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xr[j];
                        }
                        mean_dxh /= n as f64;
                        mean_dxh_xh /= n as f64;
                        for j in 0..n {
                            let dxh = gr[j] * gam[j];
                            dr[j] += rstd[r] * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let cout = node.value.shape()[0];
                let p = geom.positions();
                let kdim = geom.patch();
                if let Some(b) = b {
                    if let Some(d) = slot(nodes, grads, *b) {
                        for (o, gr) in g.chunks(p).enumerate() {
                            d[o] += gr.iter().sum::<f64>();
                        }
                    }
                }
                if let Some(d) = slot(nodes, grads, *w) {
                    // dW (cout×kdim) = G (cout×p) · colsᵀ
                    kernels::gemm(cout, p, kdim, g, false, cols, true, d, true);
                }
                let wv = val(*w);
                if let Some(d) = slot(nodes, grads, *x) {
                    let mut dcols = vec![0.0; kdim * p];
                    kernels::gemm(kdim, cout, p, &wv, true, g, false, &mut dcols, false);
                    kernels::col2im(&dcols, geom, d);
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(d) = slot(nodes, grads, *x) {
                    for (g, &i) in g.iter().zip(argmax) {
                        d[i] += g;
                    }
                }
            }
            Op::AvgPool { x, k } => {
                let s = nodes[x.0].value.shape();
                let (h, w) = (s[1], s[2]);
                let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
                let norm = 1.0 / (k * k) as f64;
                if let Some(d) = slot(nodes, grads, *x) {
                    for ch in 0..s[0] {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(ch * oh + oy) * ow + ox] * norm;
                                for dy in 0..*k {
                                    for dx in 0..*k {
                                        d[(ch * h + k * oy + dy) * w + k * ox + dx] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = nodes[p.0].value.shape()[*axis] * inner;
                    if let Some(d) = slot(nodes, grads, *p) {
                        for o in 0..outer {
                            add_into(&mut d[o * chunk..(o + 1) * chunk], &g[o * total + offset..o * total + offset + chunk]);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                if let Some(d) = slot(nodes, grads, *x) {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        add_into(&mut d[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = slot(nodes, grads, *x) {
                    add_into(d, g);
                }
            }
            Op::Sum(x) => {
                if let Some(d) = slot(nodes, grads, *x) {
                    for d in d.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(d) = slot(nodes, grads, *x) {
                    let s = g[0] / d.len() as f64;
                    for d in d.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::SumLast(x) => {
                if let Some(d) = slot(nodes, grads, *x) {
                    let n = *nodes[x.0].value.shape().last().unwrap_or(&1);
                    if n > 0 {
                        for (dr, gv) in d.chunks_mut(n).zip(g) {
                            for d in dr {
                                *d += gv;
                            }
                        }
                    }
                }
            }
            Op::Resize { x, dims } => {
                let [c, h, w, oh, ow] = *dims;
                if let Some(d) = slot(nodes, grads, *x) {
                    kernels::resize_backward(g, d, c, h, w, oh, ow);
                }
            }
            Op::PointSample { x, rows, taps } => {
                let s = nodes[x.0].value.shape();
                let hw = s[1] * s[2];
                let k = node.value.shape()[1];
                if let Some(d) = slot(nodes, grads, *x) {
                    for (j, &r) in rows.iter().enumerate() {
                        let map = &mut d[r * hw..(r + 1) * hw];
                        for i in 0..k {
                            let gv = g[j * k + i];
                            for &(idx, wt) in &taps[j * k + i] {
                                map[idx] += gv * wt;
                            }
                        }
                    }
                }
            }
            Op::BceRows { p, target } => {
                let k = nodes[p.0].value.shape()[1];
                let pv = val(*p);
                if let Some(d) = slot(nodes, grads, *p) {
                    for (r, gv) in g.iter().enumerate() {
                        for i in r * k..(r + 1) * k {
                            d[i] += gv * (kernels::sigmoid(pv[i]) - target[i]) / k as f64;
                        }
                    }
                }
            }
            Op::DiceRows { p, target } => {
                let k = nodes[p.0].value.shape()[1];
                let pv = val(*p);
                if let Some(d) = slot(nodes, grads, *p) {
                    for (r, gv) in g.iter().enumerate() {
                        let (pr, tr) = (&pv[r * k..(r + 1) * k], &target[r * k..(r + 1) * k]);
                        let (num, den) = dice_terms(pr, tr);
                        for i in 0..k {
                            let s = kernels::sigmoid(pr[i]);
                            let dl_ds = -(2.0 * tr[i] * den - num) / (den * den);
                            d[r * k + i] += gv * dl_ds * s * (1.0 - s);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let c = nodes[logits.0].value.shape()[1];
                let wsum: f64 = weights.iter().sum();
                if let Some(d) = slot(nodes, grads, *logits) {
                    for (i, (dr, pr)) in d.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        let s = g[0] * weights[i] / wsum;
                        for (j, (d, p)) in dr.iter_mut().zip(pr).enumerate() {
                            let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                            *d += s * (p - onehot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (n, c) = (nodes[q.0].value.shape()[0], nodes[q.0].value.shape()[1]);
                let m = nodes[k.0].value.shape()[0];
                let dh = c / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut dp = vec![0.0; n * m];
                let mut dq = vec![0.0; n * c];
                let mut dk = vec![0.0; m * c];
                let mut dv = vec![0.0; m * c];
                for h in 0..*heads {
                    let off = h * dh;
                    let p = &probs[h * n * m..(h + 1) * n * m];
                    kernels::gemm_strided(n, dh, m, &g[off..], (c, 1), &vd[off..], (1, c), 0.0, &mut dp, (m, 1));
                    kernels::gemm_strided(m, n, dh, p, (1, m), &g[off..], (c, 1), 1.0, &mut dv[off..], (c, 1));
                    if m > 0 {
                        for (dr, pr) in dp.chunks_mut(m).zip(p.chunks(m)) {
                            let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for (d, p) in dr.iter_mut().zip(pr) {
                                *d = p * (*d - dot) * scale;
                            }
                        }
                    }
                    kernels::gemm_strided(n, m, dh, &dp, (m, 1), &kd[off..], (c, 1), 1.0, &mut dq[off..], (c, 1));
                    kernels::gemm_strided(m, n, dh, &dp, (1, m), &qd[off..], (c, 1), 1.0, &mut dk[off..], (c, 1));
                }
                for (var, src) in [(*q, &dq), (*k, &dk), (*v, &dv)] {
                    if let Some(d) = slot(nodes, grads, var) {
                        add_into(d, src);
                    }
                }
            }
        }
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Dice numerator `2Σσ(p)t + 1` and denominator `Σσ(p) + Σt + 1`.
pub(crate) fn dice_terms(logits: &[f64], target: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut ssum = 0.0;
    let mut tsum = 0.0;
    for (&p, &t) in logits.iter().zip(target) {
        let s = kernels::sigmoid(p);
        inter += s * t;
        ssum += s;
        tsum += t;
    }
    (2.0 * inter + 1.0, ssum + tsum + 1.0)
}
