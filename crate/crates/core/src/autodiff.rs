//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`]. Nodes are stored in creation
//! order, which is a topological order, so [`Tape::backward`] replays them from
//! the end and visits each recorded op exactly once.
//!
//! Binary element-wise ops accept equal shapes or a one-element operand
//! (scalar broadcast). Nothing else broadcasts.

use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Derivative of an element-wise map, given input `x` and output `y`.
pub type UnaryDeriv = fn(f64, f64) -> f64;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Slice {
        src: Var,
        start: usize,
    },
    Row {
        src: Var,
        index: usize,
    },
    Softmax {
        src: Var,
        temperature: f64,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    StraightThrough(Var),
    Map {
        src: Var,
        deriv: UnaryDeriv,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` if nothing upstream of the loss touched it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adjoint of `v` as a tensor, zero-filled when absent.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    Left,
    Right,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Matrix product. A rank-1 left operand is a row vector, a rank-1 right
    /// operand is a column vector; the result drops the unit dimension.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() > 2 || sb.len() > 2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k) = if sa.len() == 1 { (1, sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if sb.len() == 1 { (sb[0], 1) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let out_shape = match (sa.len(), sb.len()) {
            (1, 1) => vec![1],
            (1, _) => vec![n],
            (_, 1) => vec![m],
            _ => vec![m, n],
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (cj, bj) in crow.iter_mut().zip(brow) {
                    *cj += x * bj;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(out_shape, c)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, rg))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if self.value(a).numel() == 1 {
            Ok(Broadcast::Left)
        } else if self.value(b).numel() == 1 {
            Ok(Broadcast::Right)
        } else {
            Err(Error::dim(op, sa, sb))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let mode = self.broadcast(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (shape, data): (Vec<usize>, Vec<f64>) = match mode {
            Broadcast::Same => (
                av.shape().to_vec(),
                av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::Left => {
                let x = av.item();
                (bv.shape().to_vec(), bv.data().iter().map(|&y| f(x, y)).collect())
            }
            Broadcast::Right => {
                let y = bv.item();
                (av.shape().to_vec(), av.data().iter().map(|&x| f(x, y)).collect())
            }
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
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
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Shift(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Element-wise map with a caller-supplied derivative `deriv(x, y)`.
    pub fn map(&mut self, a: Var, f: fn(f64) -> f64, deriv: UnaryDeriv) -> Var {
        self.unary(a, f, Op::Map { src: a, deriv })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Concatenate rank-1 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat", &[], &[]));
        }
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 1 {
                return Err(Error::dim("concat", v.shape(), &[]));
            }
            data.extend_from_slice(v.data());
            rg |= self.rg(p);
        }
        let n = data.len();
        Ok(self.push(Tensor::new(vec![n], data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Contiguous sub-range `[start, start + len)` of a rank-1 tensor.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 1 || len == 0 || start + len > v.numel() {
            return Err(Error::dim("slice", v.shape(), &[start, len]));
        }
        let value = Tensor::vector(&v.data()[start..start + len]);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Slice { src: a, start }, rg))
    }

    /// Row `index` of a rank-2 tensor.
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(Error::dim("row", v.shape(), &[index]));
        }
        if index >= v.rows() {
            return Err(Error::Index {
                op: "row",
                index,
                len: v.rows(),
            });
        }
        let value = Tensor::vector(v.row(index));
        let rg = self.rg(a);
        Ok(self.push(value, Op::Row { src: a, index }, rg))
    }

    /// Embedding table lookup; identical to [`Tape::row`] with a token id.
    pub fn embedding_lookup(&mut self, table: Var, id: usize) -> Result<Var> {
        self.row(table, id).map_err(|e| match e {
            Error::Index { index, len, .. } => Error::Index {
                op: "embedding_lookup",
                index,
                len,
            },
            other => other,
        })
    }

    /// `softmax(x / temperature)` over a rank-1 tensor, with max subtraction.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Numeric(format!("softmax temperature {temperature}")));
        }
        let v = self.value(a);
        if v.rank() != 1 {
            return Err(Error::dim("softmax", v.shape(), &[]));
        }
        if !v.is_finite() {
            return Err(Error::Numeric("softmax input".into()));
        }
        let probs = softmax(v.data(), temperature);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::vector(&probs),
            Op::Softmax {
                src: a,
                temperature,
            },
            rg,
        ))
    }

    /// `-log softmax(logits)[target]` as a one-element tensor.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let v = self.value(logits);
        if v.rank() != 1 {
            return Err(Error::dim("cross_entropy", v.shape(), &[]));
        }
        if target >= v.numel() {
            return Err(Error::Index {
                op: "cross_entropy",
                index: target,
                len: v.numel(),
            });
        }
        if !v.is_finite() {
            return Err(Error::Numeric("cross_entropy logits".into()));
        }
        let x = v.data();
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = x.iter().map(|&xi| (xi - max).exp()).sum();
        let loss = max + sum.ln() - x[target];
        let probs = x.iter().map(|&xi| (xi - max).exp() / sum).collect();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::dim("straight_through", self.shape(soft), hard.shape()));
        }
        let rg = self.rg(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), rg))
    }

    /// One-hot of the argmax in the forward pass, soft gradient backward.
    pub fn straight_through_one_hot(&mut self, soft: Var) -> Result<Var> {
        let v = self.value(soft);
        let hard = Tensor::one_hot(v.numel(), v.argmax())?.reshape(v.shape().to_vec())?;
        self.straight_through(soft, hard)
    }

    /// Threshold at 0.5 in the forward pass, identity gradient backward.
    pub fn straight_through_threshold(&mut self, soft: Var) -> Result<Var> {
        let v = self.value(soft);
        let data = v.data().iter().map(|&x| if x >= 0.5 { 1.0 } else { 0.0 }).collect();
        let hard = Tensor::new(v.shape().to_vec(), data)?;
        self.straight_through(soft, hard)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            let node = &self.nodes[i];
            self.propagate(node, g, before);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes[..=loss.0]
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = self.slot(grads, a) {
                    let bv = self.value(b).data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    let av = self.value(a).data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            let gbrow = &mut gb[p * n..(p + 1) * n];
                            for (d, gj) in gbrow.iter_mut().zip(grow) {
                                *d += x * gj;
                            }
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                self.accumulate_binary(grads, a, b, g, |_, _, g| (g, g));
            }
            &Op::Sub(a, b) => {
                self.accumulate_binary(grads, a, b, g, |_, _, g| (g, -g));
            }
            &Op::Mul(a, b) => {
                self.accumulate_binary(grads, a, b, g, |x, y, g| (g * y, g * x));
            }
            &Op::Div(a, b) => {
                self.accumulate_binary(grads, a, b, g, |x, y, g| (g / y, -g * x / (y * y)));
            }
            &Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, a) {
                    for (d, gi) in ga.iter_mut().zip(g) {
                        *d += c * gi;
                    }
                }
            }
            &Op::Shift(a) | &Op::StraightThrough(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    for (d, gi) in ga.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            &Op::Sigmoid(a) => self.accumulate_unary(grads, a, g, y, |_, y| y * (1.0 - y)),
            &Op::Tanh(a) => self.accumulate_unary(grads, a, g, y, |_, y| 1.0 - y * y),
            &Op::Exp(a) => self.accumulate_unary(grads, a, g, y, |_, y| y),
            &Op::Log(a) => self.accumulate_unary(grads, a, g, y, |x, _| 1.0 / x),
            &Op::Map { src, deriv } => self.accumulate_unary(grads, src, g, y, deriv),
            &Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            &Op::Mean(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    let s = g[0] / ga.len() as f64;
                    for d in ga.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(gp) = self.slot(grads, p) {
                        for (d, gi) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *d += gi;
                        }
                    }
                    offset += n;
                }
            }
            &Op::Slice { src, start } => {
                if let Some(gs) = self.slot(grads, src) {
                    for (d, gi) in gs[start..start + g.len()].iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            &Op::Row { src, index } => {
                let cols = g.len();
                if let Some(gs) = self.slot(grads, src) {
                    for (d, gi) in gs[index * cols..(index + 1) * cols].iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            &Op::Softmax { src, temperature } => {
                if let Some(gs) = self.slot(grads, src) {
                    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    for ((d, gi), yi) in gs.iter_mut().zip(g).zip(y) {
                        *d += yi * (gi - dot) / temperature;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                if let Some(gl) = self.slot(grads, *logits) {
                    for (j, (d, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let t = if j == *target { 1.0 } else { 0.0 };
                        *d += g[0] * (p - t);
                    }
                }
            }
        }
    }

    fn accumulate_unary(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        g: &[f64],
        y: &[f64],
        deriv: impl Fn(f64, f64) -> f64,
    ) {
        let x = self.value(a).data();
        if let Some(ga) = self.slot(grads, a) {
            for i in 0..ga.len() {
                ga[i] += g[i] * deriv(x[i], y[i]);
            }
        }
    }

    fn accumulate_binary(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        b: Var,
        g: &[f64],
        partials: impl Fn(f64, f64, f64) -> (f64, f64),
    ) {
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n = g.len();
        let x = |i: usize| if av.len() == 1 { av[0] } else { av[i] };
        let y = |i: usize| if bv.len() == 1 { bv[0] } else { bv[i] };
        if let Some(ga) = self.slot(grads, a) {
            for i in 0..n {
                let (da, _) = partials(x(i), y(i), g[i]);
                let j = if ga.len() == 1 { 0 } else { i };
                ga[j] += da;
            }
        }
        if let Some(gb) = self.slot(grads, b) {
            for i in 0..n {
                let (_, db) = partials(x(i), y(i), g[i]);
                let j = if gb.len() == 1 { 0 } else { i };
                gb[j] += db;
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

/// Plain-value softmax with temperature and max subtraction.
pub fn softmax(x: &[f64], temperature: f64) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// One-hot vector at the argmax of `xs`.
pub fn one_hot_argmax(xs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; xs.len()];
    out[argmax(xs)] = 1.0;
    out
}
