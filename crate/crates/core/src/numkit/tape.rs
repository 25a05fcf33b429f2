//! Dynamic reverse-mode tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Operations append nodes and
//! return [`Var`] handles; [`Tape::backward`] walks the nodes in reverse and
//! applies each node's analytic adjoint rule. Leaves created from a
//! [`Tensor`] with `requires_grad` set are the only nodes whose gradients are
//! tracked, and everything downstream of them.

use crate::error::{LabError, Result};
use crate::numkit::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Gelu {
        a: Var,
        tanh: Vec<f64>,
    },
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    BroadcastRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        src: Var,
        index: Vec<usize>,
    },
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MeanPoolRows {
        src: Var,
        group: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `target`'s accumulator, if one was produced.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [r, c] => (*r, *c),
        [c] => (1, *c),
        _ => (1, shape.iter().product()),
    }
}

// out[r×d] = a[r×c] · b[c×d]
fn mm(a: &[f64], b: &[f64], r: usize, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * d];
    for i in 0..r {
        let orow = &mut out[i * d..(i + 1) * d];
        for k in 0..c {
            let aik = a[i * c + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * d..(k + 1) * d];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

// out[r×c] = g[r×d] · b[c×d]ᵀ
fn mm_nt(g: &[f64], b: &[f64], r: usize, c: usize, d: usize) -> Vec<f64> {
    let mut bt = vec![0.0; d * c];
    for k in 0..c {
        for j in 0..d {
            bt[j * c + k] = b[k * d + j];
        }
    }
    mm(g, &bt, r, d, c)
}

// out[c×d] = a[r×c]ᵀ · g[r×d]
fn mm_tn(a: &[f64], g: &[f64], r: usize, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * d];
    for i in 0..r {
        let grow = &g[i * d..(i + 1) * d];
        for k in 0..c {
            let aik = a[i * c + k];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[k * d..(k + 1) * d];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += aik * gv;
            }
        }
    }
    out
}

// One `exp` instead of libm `tanh`; absolute error stays near 1e-16.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    /// Registers a tensor; it is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(LabError::shape("matmul", sa, sb));
        }
        let (r, c, d) = (sa[0], sa[1], sb[1]);
        let out = mm(self.value(a), self.value(b), r, c, d);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![r, d], out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(LabError::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), ng))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(LabError::shape(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(i) = self.value(b).iter().position(|&y| y == 0.0) {
            return Err(LabError::Domain(format!("div: zero denominator at index {i}")));
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|&&x| x <= 0.0) {
            return Err(LabError::Domain(format!("ln: non-positive input {x}")));
        }
        Ok(self.unary(a, f64::ln, Op::Ln(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let tanh: Vec<f64> = x.iter().map(|&x| fast_tanh(GELU_C * (x + GELU_A * x * x * x))).collect();
        let out = x.iter().zip(&tanh).map(|(&x, t)| 0.5 * x * (1.0 + t)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(shape, out, Op::Gelu { a, tanh }, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.is_empty() || *s.last().unwrap() == 0 {
            return Err(LabError::shape("softmax_rows", s, &[]));
        }
        let (r, c) = dims2(s);
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_into(&x[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a);
        let shape = s.to_vec();
        Ok(self.push(shape, out, Op::SoftmaxRows(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let ng = self.ng(a);
        self.push(vec![1], vec![m], Op::Mean(a), ng)
    }

    /// Repeats a `[D]` vector over `rows` rows, giving `[rows×D]`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 1 || rows == 0 {
            return Err(LabError::shape("broadcast_rows", s, &[rows]));
        }
        let d = s[0];
        let x = self.value(a);
        let mut out = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            out.extend_from_slice(x);
        }
        let ng = self.ng(a);
        Ok(self.push(vec![rows, d], out, Op::BroadcastRows(a), ng))
    }

    /// `x + b` with `b: [D]` broadcast over the rows of `x: [R×D]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let rows = self.shape(x)[0];
        if self.shape(x).len() != 2 || self.shape(b) != [self.shape(x)[1]] {
            return Err(LabError::shape("add_row", self.shape(x), self.shape(b)));
        }
        let bb = self.broadcast_rows(b, rows)?;
        self.add(x, bb)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(LabError::shape("layer_norm", s, &[]));
        }
        let (r, d) = (s[0], s[1]);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(LabError::shape("layer_norm", s, self.shape(gain)));
        }
        if !(eps > 0.0) {
            return Err(LabError::Domain(format!("layer_norm: eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            vec![r, d],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// `out.flat[k] = src.flat[index[k]]`; the adjoint scatter-adds.
    pub fn gather(&mut self, src: Var, index: Vec<usize>, out_shape: Vec<usize>) -> Result<Var> {
        let n = self.value(src).len();
        if out_shape.iter().product::<usize>() != index.len() {
            return Err(LabError::shape("gather", &out_shape, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(LabError::shape("gather", &[bad], self.shape(src)));
        }
        let x = self.value(src);
        let out = index.iter().map(|&i| x[i]).collect();
        let ng = self.ng(src);
        Ok(self.push(out_shape, out, Op::Gather { src, index }, ng))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, width: usize) -> Result<Var> {
        let s = self.shape(src);
        if s.len() != 2 || width == 0 || start + width > s[1] {
            return Err(LabError::shape("slice_cols", s, &[start, width]));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(src);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + width]);
        }
        let ng = self.ng(src);
        Ok(self.push(vec![r, width], out, Op::SliceCols { src, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(LabError::shape("concat_cols", &[], &[]));
        };
        let r = self.shape(first)[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != r {
                return Err(LabError::shape("concat_cols", self.shape(first), s));
            }
            total += s[1];
        }
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let w = self.shape(p)[1];
            let x = self.value(p);
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(&x[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Averages consecutive blocks of `group` rows: `[(B·group)×D] → [B×D]`.
    pub fn mean_pool_rows(&mut self, src: Var, group: usize) -> Result<Var> {
        let s = self.shape(src);
        if s.len() != 2 || group == 0 || s[0] % group != 0 {
            return Err(LabError::shape("mean_pool_rows", s, &[group]));
        }
        let (r, d) = (s[0], s[1]);
        let b = r / group;
        let x = self.value(src);
        let mut out = vec![0.0; b * d];
        for i in 0..r {
            let o = &mut out[(i / group) * d..(i / group + 1) * d];
            for (ov, xv) in o.iter_mut().zip(&x[i * d..(i + 1) * d]) {
                *ov += xv;
            }
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let ng = self.ng(src);
        Ok(self.push(vec![b, d], out, Op::MeanPoolRows { src, group }, ng))
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// sequences of length `seq`. `q`, `k`, `v` are `[(batch·seq)×D]` with
    /// heads laid out as contiguous column blocks of width `D / heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 2 || self.shape(k) != s || self.shape(v) != s {
            return Err(LabError::shape("attention", &s, self.shape(k)));
        }
        let (rows, d) = (s[0], s[1]);
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(LabError::shape("attention", &s, &[batch, seq, heads]));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq * seq;
                for l in 0..seq {
                    let qrow = &qv[(b * seq + l) * d + h * dh..(b * seq + l) * d + (h + 1) * dh];
                    for m in 0..seq {
                        let krow =
                            &kv[(b * seq + m) * d + h * dh..(b * seq + m) * d + (h + 1) * dh];
                        scores[m] = scale * qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>();
                    }
                    let prow = &mut probs[pbase + l * seq..pbase + (l + 1) * seq];
                    softmax_into(&scores, prow);
                    let orow = &mut out[(b * seq + l) * d + h * dh..(b * seq + l) * d + (h + 1) * dh];
                    for m in 0..seq {
                        let p = prow[m];
                        let vrow =
                            &vv[(b * seq + m) * d + h * dh..(b * seq + m) * d + (h + 1) * dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            vec![rows, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Mean cross-entropy of `logits: [B×C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(LabError::shape("cross_entropy", s, &[labels.len()]));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(LabError::Domain(format!(
                "cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[labels[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            vec![1],
            vec![loss / b as f64],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(LabError::Contract(format!(
                "backward requires a scalar loss, got shape {ls:?}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.ng(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Convenience: backward, then accumulate into each `(var, tensor)` pair.
    pub fn backward_into(&self, loss: Var, params: &mut [(Var, &mut Tensor)]) -> Result<()> {
        let grads = self.backward(loss)?;
        for (v, t) in params.iter_mut() {
            grads.accumulate_into(*v, t)?;
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let send = |grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>| {
            if self.ng(v) {
                add_into(&mut grads[v.0], &d);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, c) = dims2(self.shape(*a));
                let d = self.shape(*b)[1];
                if self.ng(*a) {
                    send(grads, *a, mm_nt(g, self.value(*b), r, c, d));
                }
                if self.ng(*b) {
                    send(grads, *b, mm_tn(self.value(*a), g, r, c, d));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = dims2(self.shape(*a));
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                send(grads, *a, d);
            }
            Op::Add(a, b) => {
                send(grads, *a, g.to_vec());
                send(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(grads, *a, g.to_vec());
                send(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                send(grads, *a, g.iter().zip(y).map(|(g, y)| g * y).collect());
                send(grads, *b, g.iter().zip(x).map(|(g, x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                send(grads, *a, g.iter().zip(y).map(|(g, y)| g / y).collect());
                send(
                    grads,
                    *b,
                    g.iter()
                        .zip(x.iter().zip(y))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect(),
                );
            }
            Op::AddScalar(a) => send(grads, *a, g.to_vec()),
            Op::Scale(a, c) => send(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::Exp(a) => send(
                grads,
                *a,
                g.iter().zip(&node.value).map(|(g, y)| g * y).collect(),
            ),
            Op::Ln(a) => send(
                grads,
                *a,
                g.iter().zip(self.value(*a)).map(|(g, x)| g / x).collect(),
            ),
            Op::Relu(a) => send(
                grads,
                *a,
                g.iter()
                    .zip(self.value(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Gelu { a, tanh } => send(
                grads,
                *a,
                g.iter()
                    .zip(self.value(*a))
                    .zip(tanh)
                    .map(|((g, &x), &t)| {
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect(),
            ),
            Op::SoftmaxRows(a) => {
                let (r, c) = dims2(&node.shape);
                let y = &node.value;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let (yr, gr) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(grads, *a, d);
            }
            Op::Sum(a) => send(grads, *a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                send(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::BroadcastRows(a) => {
                let (r, d) = dims2(&node.shape);
                let mut acc = vec![0.0; d];
                for i in 0..r {
                    for (s, v) in acc.iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *s += v;
                    }
                }
                send(grads, *a, acc);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, d) = dims2(&node.shape);
                let gv = self.value(*gain);
                if self.ng(*gain) || self.ng(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for i in 0..r {
                        for j in 0..d {
                            dg[j] += g[i * d + j] * xhat[i * d + j];
                            db[j] += g[i * d + j];
                        }
                    }
                    send(grads, *gain, dg);
                    send(grads, *bias, db);
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; r * d];
                    let n = d as f64;
                    for i in 0..r {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = g[i * d + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[i * d + j];
                        }
                        for j in 0..d {
                            let dh = g[i * d + j] * gv[j];
                            dx[i * d + j] = inv_std[i] / n * (n * dh - s1 - xhat[i * d + j] * s2);
                        }
                    }
                    send(grads, *x, dx);
                }
            }
            Op::Gather { src, index } => {
                let mut d = vec![0.0; self.value(*src).len()];
                for (gv, &i) in g.iter().zip(index) {
                    d[i] += gv;
                }
                send(grads, *src, d);
            }
            Op::SliceCols { src, start } => {
                let (r, c) = dims2(self.shape(*src));
                let w = node.shape[1];
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                send(grads, *src, d);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = dims2(&node.shape);
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.ng(p) {
                        let mut d = vec![0.0; r * w];
                        for i in 0..r {
                            d[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        send(grads, p, d);
                    }
                    off += w;
                }
            }
            Op::MeanPoolRows { src, group } => {
                let (r, d) = dims2(self.shape(*src));
                let inv = 1.0 / *group as f64;
                let mut dx = vec![0.0; r * d];
                for i in 0..r {
                    let gr = &g[(i / group) * d..(i / group + 1) * d];
                    for (o, v) in dx[i * d..(i + 1) * d].iter_mut().zip(gr) {
                        *o = v * inv;
                    }
                }
                send(grads, *src, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let (rows, d) = dims2(&node.shape);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let pbase = (b * heads + h) * seq * seq;
                        let col = |row: usize| (b * seq + row) * d + h * dh;
                        for l in 0..seq {
                            let prow = &probs[pbase + l * seq..pbase + (l + 1) * seq];
                            let grow = &g[col(l)..col(l) + dh];
                            for m in 0..seq {
                                let vrow = &vv[col(m)..col(m) + dh];
                                dp[m] = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                                let p = prow[m];
                                for (o, gv) in dv[col(m)..col(m) + dh].iter_mut().zip(grow) {
                                    *o += p * gv;
                                }
                            }
                            let dot: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
                            for m in 0..seq {
                                let ds = prow[m] * (dp[m] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    dq[col(l) + c] += ds * kv[col(m) + c];
                                    dk[col(m) + c] += ds * qv[col(l) + c];
                                }
                            }
                        }
                    }
                }
                send(grads, *q, dq);
                send(grads, *k, dk);
                send(grads, *v, dv);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * c + y] -= scale;
                }
                send(grads, *logits, d);
            }
        }
    }
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let mut t = Tape::new();
        let a = t.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = t.constant(mat(2, 1, &[1.0, 1.0]));
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y), &[3.0, 7.0]);
        assert_eq!(t.shape(y), &[2, 1]);
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(mat(2, 3, &[1.0, -2.0, 3.5, 0.25, 5.0, -6.0]));
        let i = t.constant(mat(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let y = t.matmul(a, i).unwrap();
        assert_eq!(t.value(y), t.value(a));
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        match t.matmul(a, b) {
            Err(LabError::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn softmax_symmetric() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[1, 2]));
        let s = t.softmax_rows(a).unwrap();
        assert_eq!(t.value(s), &[0.5, 0.5]);
    }

    #[test]
    fn div_by_hand_and_zero_guard() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_vec(vec![4.0, 6.0]));
        let b = t.constant(Tensor::from_vec(vec![2.0, 2.0]));
        let y = t.div(a, b).unwrap();
        assert_eq!(t.value(y), &[2.0, 3.0]);
        let z = t.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(t.div(a, z), Err(LabError::Domain(_))));
    }

    #[test]
    fn sum_of_linear_leaf() {
        let mut t = Tape::new();
        let mut w = Tensor::from_vec(vec![1.0, 2.0, 3.0]).with_grad(true);
        let wv = t.leaf(&w);
        let s = t.sum(wv);
        t.backward_into(s, &mut [(wv, &mut w)]).unwrap();
        assert_eq!(w.grad().unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_by_hand() {
        let mut t = Tape::new();
        let w = Tensor::from_vec(vec![1.0, -2.0]).with_grad(true);
        let wv = t.leaf(&w);
        let sq = t.mul(wv, wv).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(wv).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn mean_of_squares_by_hand() {
        let mut t = Tape::new();
        let w = Tensor::from_vec(vec![1.0, 2.0, 3.0]).with_grad(true);
        let wv = t.leaf(&w);
        let sq = t.mul(wv, wv).unwrap();
        let m = t.mean(sq);
        let g = t.backward(m).unwrap();
        let got = g.get(wv).unwrap();
        for (a, b) in got.iter().zip([2.0 / 3.0, 4.0 / 3.0, 2.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let w = t.leaf(&Tensor::from_vec(vec![1.0, 2.0]).with_grad(true));
        assert!(matches!(t.backward(w), Err(LabError::Contract(_))));
    }

    #[test]
    fn untracked_tensors_get_no_grad() {
        let mut t = Tape::new();
        let w = t.leaf(&Tensor::from_vec(vec![1.0, 2.0]).with_grad(true));
        let c = t.leaf(&Tensor::from_vec(vec![3.0, 4.0]));
        let p = t.mul(w, c).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut w = Tensor::from_vec(vec![0.5, -1.5]).with_grad(true);
        for _ in 0..2 {
            let mut t = Tape::new();
            let wv = t.leaf(&w);
            let e = t.exp(wv);
            let s = t.sum(e);
            t.backward_into(s, &mut [(wv, &mut w)]).unwrap();
        }
        let g = w.grad().unwrap();
        assert!((g[0] - 2.0 * 0.5f64.exp()).abs() < 1e-14);
        assert!((g[1] - 2.0 * (-1.5f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn layer_norm_by_hand() {
        let mut t = Tape::new();
        let x = t.constant(mat(2, 3, &[1.0, 1.0, 1.0, 0.0, 2.0, 4.0]));
        let g = t.constant(Tensor::full(&[3], 1.0));
        let b = t.constant(Tensor::zeros(&[3]));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        let v = t.value(y);
        assert!(v[..3].iter().all(|x| x.abs() < 1e-12));
        let s = (8.0f64 / 3.0 + 1e-5).sqrt();
        assert!((v[3] + 2.0 / s).abs() < 1e-12 && v[4].abs() < 1e-12 && (v[5] - 2.0 / s).abs() < 1e-12);

        let mut t = Tape::new();
        let x = t.constant(mat(1, 2, &[0.0, 2.0]));
        let g = t.constant(Tensor::full(&[2], 1.0));
        let b = t.constant(Tensor::zeros(&[2]));
        let y = t.layer_norm(x, g, b, 1e-12).unwrap();
        assert!((t.value(y)[0] + 1.0).abs() < 1e-9 && (t.value(y)[1] - 1.0).abs() < 1e-9);
    }
}
