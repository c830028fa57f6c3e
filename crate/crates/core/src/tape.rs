//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Tape`] evaluates eagerly, appends a node holding
//! its value and the handles of its inputs, and returns a [`Var`]. Calling
//! [`Tape::backward`] on a scalar node walks the nodes in reverse recorded
//! order and accumulates adjoints into every node that requires a gradient.
//!
//! ```
//! use csmil::tape::Tape;
//! use csmil::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let half = tape.sum(sq);
//! let loss = tape.scale(half, 0.5);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[1.0, -2.0, 3.0]);
//! ```
//!
//! Broadcasting is limited to bias-add over rows and per-row scaling by a
//! column vector; that is all the MIL network needs.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::TensorError;
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulBt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Log(usize),
    SoftmaxRows(usize),
    ConcatCols(Vec<usize>),
    Column(usize, usize),
    Sum(usize),
    Mean(usize),
    /// `-ln(max(p[class], floor))` on a probability row.
    Nll { input: usize, class: usize, floor: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Handles issued before the reset are
    /// invalidated.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient of the last backward pass, if this node took part in it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = self.node(v);
        node.grad.as_ref().map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).unwrap())
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "Var used with a foreign or reset tape");
        &self.nodes[v.idx]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[Var]) -> bool {
        ids.iter().any(|&v| self.node(v).requires_grad)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.idx, b.idx), rg))
    }

    /// `a · bᵀ`; `b` is stored n×k. This is the layout for weights that map
    /// row features through `W x`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(self.mismatch("matmul_bt", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a.idx, b.idx), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(t, Op::Transpose(a.idx), rg)
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(self.mismatch(op_name, a, b));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a.idx, b.idx), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a.idx, b.idx), rg))
    }

    /// Adds a length-`c` bias to every row of an `r×c` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (r, c) = self.value(x).dims2();
        if self.value(bias).len() != c {
            return Err(self.mismatch("add_bias", x, bias));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            for (o, bv) in data[i * c..(i + 1) * c].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias(x.idx, bias.idx), rg))
    }

    /// Scales row `i` of an `r×c` matrix by `col[i]`; `col` holds `r` values.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var, TensorError> {
        let (r, c) = self.value(x).dims2();
        if self.value(col).len() != r {
            return Err(self.mismatch("mul_col", x, col));
        }
        let s = self.value(col).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            for o in &mut data[i * c..(i + 1) * c] {
                *o *= s[i];
            }
        }
        let rg = self.rg(&[x, col]);
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::MulCol(x.idx, col.idx), rg))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, Op::Scale(a.idx, k), |x| x * k)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a.idx), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a.idx), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a.idx), sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a.idx), f64::ln)
    }

    /// Softmax along the last axis (each row of a matrix; the whole of a
    /// vector). Uses max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (r, c) = v.dims2();
        let mut data = v.data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut data[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(v.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a]);
        self.push(t, Op::SoftmaxRows(a.idx), rg)
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let (r, _) = self.value(first).dims2();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2();
            if pr != r {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        let t = Tensor::new(vec![r, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.iter().map(|p| p.idx).collect()), rg))
    }

    /// Column `j` of a matrix as an `r×1` matrix.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var, TensorError> {
        let (r, c) = self.value(a).dims2();
        if j >= c {
            return Err(TensorError::Invalid {
                op: "column",
                msg: format!("column {j} out of range for {c} columns"),
            });
        }
        let data = (0..r).map(|i| self.value(a).data()[i * c + j]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![r, 1], data)?, Op::Column(a.idx, j), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a.idx), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a.idx), rg)
    }

    /// Negative log-likelihood of `class` under a single probability row,
    /// with the probability clamped from below at `floor`.
    pub fn nll(&mut self, probs: Var, class: usize, floor: f64) -> Result<Var, TensorError> {
        let v = self.value(probs);
        if class >= v.len() {
            return Err(TensorError::Invalid {
                op: "nll",
                msg: format!("class {class} out of range for {} probabilities", v.len()),
            });
        }
        let p = v.data()[class].max(floor);
        let rg = self.rg(&[probs]);
        Ok(self.push(
            Tensor::scalar(-p.ln()),
            Op::Nll {
                input: probs.idx,
                class,
                floor,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Gradients are stored on the tape
    /// and read back with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(TensorError::DetachedLoss("not recorded on this tape"));
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let lv = &self.nodes[loss.idx];
        if lv.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.value.shape().to_vec()));
        }
        if !lv.requires_grad {
            return Err(TensorError::DetachedLoss("no trainable tensor reaches the loss"));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.idx] = Some(vec![1.0]);

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        // Lazily allocated accumulator for input `j`, or None when `j` needs no gradient.
        macro_rules! acc {
            ($j:expr) => {{
                let j = $j;
                if nodes[j].requires_grad {
                    Some(grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]))
                } else {
                    None
                }
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = nodes[a].value.dims2();
                let (_, n) = nodes[b].value.dims2();
                if let Some(ga) = acc!(a) {
                    // dA = dC · Bᵀ
                    matmul_bt_into(g, nodes[b].value.data(), ga, m, n, k);
                }
                if let Some(gb) = acc!(b) {
                    // dB = Aᵀ · dC
                    matmul_at_into(nodes[a].value.data(), g, gb, m, k, n);
                }
            }
            &Op::MatMulBt(a, b) => {
                let (m, k) = nodes[a].value.dims2();
                let (n, _) = nodes[b].value.dims2();
                if let Some(ga) = acc!(a) {
                    // dA = dC · B
                    matmul_into(g, nodes[b].value.data(), ga, m, n, k);
                }
                if let Some(gb) = acc!(b) {
                    // dB = dCᵀ · A
                    matmul_at_into(g, nodes[a].value.data(), gb, m, n, k);
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = out.dims2();
                if let Some(ga) = acc!(a) {
                    for p in 0..r {
                        for q in 0..c {
                            ga[q * r + p] += g[p * c + q];
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for j in [a, b] {
                    if let Some(gj) = acc!(j) {
                        gj.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::AddBias(x, bias) => {
                let (r, c) = out.dims2();
                if let Some(gx) = acc!(x) {
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                if let Some(gb) = acc!(bias) {
                    for row in 0..r {
                        for (p, q) in gb.iter_mut().zip(&g[row * c..(row + 1) * c]) {
                            *p += q;
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = acc!(a) {
                    for ((p, q), y) in ga.iter_mut().zip(g).zip(nodes[b].value.data()) {
                        *p += q * y;
                    }
                }
                if let Some(gb) = acc!(b) {
                    for ((p, q), x) in gb.iter_mut().zip(g).zip(nodes[a].value.data()) {
                        *p += q * x;
                    }
                }
            }
            &Op::MulCol(x, col) => {
                let (r, c) = out.dims2();
                let xv = nodes[x].value.data();
                let cv = nodes[col].value.data();
                if let Some(gx) = acc!(x) {
                    for row in 0..r {
                        for q in 0..c {
                            gx[row * c + q] += g[row * c + q] * cv[row];
                        }
                    }
                }
                if let Some(gc) = acc!(col) {
                    for row in 0..r {
                        let mut s = 0.0;
                        for q in 0..c {
                            s += g[row * c + q] * xv[row * c + q];
                        }
                        gc[row] += s;
                    }
                }
            }
            &Op::Scale(a, k) => {
                if let Some(ga) = acc!(a) {
                    ga.iter_mut().zip(g).for_each(|(p, q)| *p += k * q);
                }
            }
            &Op::Relu(a) => {
                let xv = nodes[a].value.data();
                if let Some(ga) = acc!(a) {
                    for ((p, q), x) in ga.iter_mut().zip(g).zip(xv) {
                        if *x > 0.0 {
                            *p += q;
                        }
                    }
                }
            }
            &Op::Tanh(a) => {
                if let Some(ga) = acc!(a) {
                    for ((p, q), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *p += q * (1.0 - y * y);
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(ga) = acc!(a) {
                    for ((p, q), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *p += q * y * (1.0 - y);
                    }
                }
            }
            &Op::Log(a) => {
                let xv = nodes[a].value.data();
                if let Some(ga) = acc!(a) {
                    for ((p, q), x) in ga.iter_mut().zip(g).zip(xv) {
                        *p += q / x;
                    }
                }
            }
            &Op::SoftmaxRows(a) => {
                let (r, c) = out.dims2();
                let y = out.data();
                if let Some(ga) = acc!(a) {
                    for row in 0..r {
                        let ys = &y[row * c..(row + 1) * c];
                        let gs = &g[row * c..(row + 1) * c];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for q in 0..c {
                            ga[row * c + q] += ys[q] * (gs[q] - dot);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = out.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = nodes[p].value.dims2();
                    if let Some(gp) = acc!(p) {
                        for row in 0..r {
                            for q in 0..w {
                                gp[row * w + q] += g[row * total + offset + q];
                            }
                        }
                    }
                    offset += w;
                }
            }
            &Op::Column(a, j) => {
                let (r, c) = nodes[a].value.dims2();
                if let Some(ga) = acc!(a) {
                    for row in 0..r {
                        ga[row * c + j] += g[row];
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = acc!(a) {
                    ga.iter_mut().for_each(|p| *p += g[0]);
                }
            }
            &Op::Mean(a) => {
                let n = nodes[a].value.len() as f64;
                if let Some(ga) = acc!(a) {
                    ga.iter_mut().for_each(|p| *p += g[0] / n);
                }
            }
            &Op::Nll {
                input,
                class,
                floor,
            } => {
                let p = nodes[input].value.data()[class];
                if let Some(gi) = acc!(input) {
                    if p > floor {
                        gi[class] -= g[0] / p;
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in xs.iter_mut() {
        *x /= z;
    }
}

/// Softmax of a plain slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut out = xs.to_vec();
    softmax_in_place(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn activations() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = t.constant(Tensor::vector(vec![0.0]));
        let th = t.tanh(z);
        let sg = t.sigmoid(z);
        assert_eq!(t.value(th).data(), &[0.0]);
        assert_eq!(t.value(sg).data(), &[0.5]);
    }

    #[test]
    fn softmax_examples() {
        let third = 1.0 / 3.0;
        assert!(close(&softmax(&[7.0, 7.0, 7.0]), &[third; 3], 1e-15));
        let s = softmax(&[0.0, 2f64.ln(), 4f64.ln()]);
        assert!(close(&s, &[1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0], 1e-15));
        let s = softmax(&[1000.0, 0.0]);
        assert!(s.iter().all(|v| v.is_finite()));
        assert!((s[0] - 1.0).abs() < 1e-15 && s[1] < 1e-300);
    }

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::new();
        let w = t.param(Tensor::zeros(vec![2, 3]));
        let l = t.sum(w);
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn half_squared_norm_gives_x() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.5, -1.5, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let l = t.scale(s, 0.5);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.5, -1.5, 2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(TensorError::NonScalarLoss(_))));

        let c = t.constant(Tensor::scalar(3.0));
        assert!(matches!(t.backward(c), Err(TensorError::DetachedLoss(_))));

        let mut other = Tape::new();
        let y = other.param(Tensor::scalar(1.0));
        assert!(matches!(t.backward(y), Err(TensorError::DetachedLoss(_))));

        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.backward(s), Err(TensorError::BackwardTwice));
    }

    #[test]
    fn reset_empties_tape() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(1.0));
        let _ = t.scale(x, 2.0);
        assert_eq!(t.len(), 2);
        t.reset();
        assert!(t.is_empty());
        let x = t.param(Tensor::scalar(1.0));
        let s = t.sum(x);
        t.backward(s).unwrap();
    }

    #[test]
    fn nll_clamps() {
        let mut t = Tape::new();
        let p = t.param(Tensor::vector(vec![1.0 - 1e-15, 1e-15]));
        let l = t.nll(p, 1, 1e-12).unwrap();
        assert!((t.value(l).item() + (1e-12f64).ln()).abs() < 1e-12);
        t.backward(l).unwrap();
        assert_eq!(t.grad(p).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn gradient_skips_constants() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = t.param(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        let l = t.sum(c);
        t.backward(l).unwrap();
        assert!(t.grad(a).is_none());
        assert_eq!(t.grad(b).unwrap().data(), &[1.0, 2.0]);
    }
}
