//! Define-by-run computation graph with reverse-mode gradients.
//!
//! Nodes are appended in topological order and evaluated eagerly as they are
//! added. The op set is closed: everything the denoiser and the losses need,
//! and nothing else.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;
pub type ParamId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Debug)]
pub enum Op {
    Input,
    Param(ParamId),
    /// Elementwise sum; the right operand may be a single row broadcast over
    /// every row of the left operand.
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Gelu(NodeId),
    Relu(NodeId),
    /// Row lookup into a `[rows, cols]` table.
    Gather {
        table: NodeId,
        indices: Vec<usize>,
    },
    Sum(NodeId),
    Mean(NodeId),
    Scale(NodeId, f64),
    /// Concatenation along the last axis.
    Concat(Vec<NodeId>),
    /// Elementwise natural log of a strictly positive tensor.
    Ln(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::MatMul { .. } => "matmul",
            Op::Affine { .. } => "affine",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Gather { .. } => "gather",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Scale(..) => "scale",
            Op::Concat(_) => "concat",
            Op::Ln(_) => "ln",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
            Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Scale(a, _)
            | Op::Ln(a) => vec![*a],
            Op::Gather { table, .. } => vec![*table],
            Op::Concat(v) => v.clone(),
        }
    }
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    /// Per-op saved state (layer norm stores per-row mean and inverse std).
    saved: Vec<f64>,
}

/// Gradients keyed by parameter id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    /// `self += weight * other`, creating missing entries.
    pub fn add_scaled(&mut self, other: &Gradients, weight: f64) {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += weight * b;
                    }
                }
                None => {
                    let mut t = g.clone();
                    t.data_mut().iter_mut().for_each(|v| *v *= weight);
                    self.grads.insert(*id, t);
                }
            }
        }
    }

    pub fn scale(&mut self, weight: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= weight);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: BTreeMap<ParamId, NodeId>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id].op
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Input,
            value: Cow::Owned(value),
            saved: Vec::new(),
        });
        self.nodes.len() - 1
    }

    /// Borrowed parameter leaf. Registering the same id twice returns the
    /// existing node.
    pub fn param(&mut self, id: ParamId, value: &'a Tensor) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: Cow::Borrowed(value),
            saved: Vec::new(),
        });
        let node = self.nodes.len() - 1;
        self.params.insert(id, node);
        node
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul {
            a,
            b,
            transpose_b: false,
        })
    }
    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul {
            a,
            b,
            transpose_b: true,
        })
    }
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Affine { x, w, b })
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(a))
    }
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSoftmax(a))
    }
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::LayerNorm { x, gain, bias })
    }
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Gelu(a))
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }
    pub fn gather(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.push(Op::Gather { table, indices })
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, factor))
    }
    pub fn concat(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        self.push(Op::Concat(parts))
    }
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Ln(a))
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        for i in op.inputs() {
            if i >= self.nodes.len() {
                return Err(Error::shape(op.name(), format!("unknown input node {i}")));
            }
        }
        let (value, saved) = {
            let nodes = &self.nodes;
            compute(&op, &|i| &*nodes[i].value)?
        };
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            saved,
        });
        Ok(self.nodes.len() - 1)
    }

    /// Re-evaluate every node from the leaves and return the value of `output`.
    pub fn evaluate(&self, output: NodeId) -> Result<Tensor> {
        if output >= self.nodes.len() {
            return Err(Error::shape("evaluate", format!("unknown node {output}")));
        }
        let mut values: Vec<Cow<'_, Tensor>> = Vec::with_capacity(output + 1);
        for node in &self.nodes[..=output] {
            let v = match node.op {
                Op::Input | Op::Param(_) => Cow::Borrowed(&*node.value),
                ref op => Cow::Owned(compute(op, &|i| &*values[i])?.0),
            };
            values.push(v);
        }
        Ok(values.pop().map(Cow::into_owned).expect("nonempty"))
    }

    /// Reverse-mode sweep from a scalar node. Every registered parameter gets
    /// an entry, zero when it does not influence `output`.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if output >= self.nodes.len() {
            return Err(Error::shape("backward", format!("unknown node {output}")));
        }
        if self.nodes[output].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "output must be scalar, got shape {:?}",
                    self.nodes[output].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output + 1];
        grads[output] = Some(vec![1.0]);
        for id in (0..=output).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Param(_) | Op::Input = node.op {
                grads[id] = Some(dy);
                continue;
            }
            self.backprop(id, &dy, &mut grads);
        }
        let mut out = Gradients::new();
        for (&pid, &node) in &self.params {
            let g = if node <= output {
                grads[node].take()
            } else {
                None
            };
            let shape = self.nodes[node].value.shape().to_vec();
            let t = match g {
                Some(d) => Tensor::new(shape, d)?,
                None => Tensor::zeros(&shape),
            };
            out.insert(pid, t);
        }
        Ok(out)
    }

    fn backprop(&self, id: NodeId, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = &*node.value;
        let val = |i: NodeId| &*self.nodes[i].value;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, dy);
                let bv = val(*b);
                if bv.len() == dy.len() {
                    accumulate(grads, *b, dy);
                } else {
                    let c = bv.len();
                    let mut db = vec![0.0; c];
                    for row in dy.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let da: Vec<f64> = dy.iter().zip(bv).map(|(d, v)| d * v).collect();
                let db: Vec<f64> = dy.iter().zip(av).map(|(d, v)| d * v).collect();
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = y.shape()[1];
                if *transpose_b {
                    let da = mm(dy, bv.data(), m, n, k);
                    let db = mm_tn(dy, av.data(), m, n, k);
                    accumulate(grads, *a, &da);
                    accumulate(grads, *b, &db);
                } else {
                    let da = mm_nt(dy, bv.data(), m, n, k);
                    let db = mm_tn(av.data(), dy, m, k, n);
                    accumulate(grads, *a, &da);
                    accumulate(grads, *b, &db);
                }
            }
            Op::Affine { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (m, k) = (xv.shape()[0], xv.shape()[1]);
                let n = y.shape()[1];
                let dx = mm_nt(dy, wv.data(), m, n, k);
                let dw = mm_tn(xv.data(), dy, m, k, n);
                let mut db = vec![0.0; n];
                for row in dy.chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(grads, *x, &dx);
                accumulate(grads, *w, &dw);
                accumulate(grads, *b, &db);
            }
            Op::Softmax(a) => {
                let c = y.cols();
                let mut dx = vec![0.0; dy.len()];
                for ((yr, dr), xr) in y.data().chunks(c).zip(dy.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                    for ((o, p), d) in xr.iter_mut().zip(yr).zip(dr) {
                        *o = p * (d - dot);
                    }
                }
                accumulate(grads, *a, &dx);
            }
            Op::LogSoftmax(a) => {
                let c = y.cols();
                let mut dx = vec![0.0; dy.len()];
                for ((yr, dr), xr) in y.data().chunks(c).zip(dy.chunks(c)).zip(dx.chunks_mut(c)) {
                    let total: f64 = dr.iter().sum();
                    for ((o, ly), d) in xr.iter_mut().zip(yr).zip(dr) {
                        *o = d - ly.exp() * total;
                    }
                }
                accumulate(grads, *a, &dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = val(*x);
                let g = val(*gain).data();
                let c = xv.cols();
                let mut dx = vec![0.0; dy.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for (r, ((xr, dr), or)) in xv
                    .data()
                    .chunks(c)
                    .zip(dy.chunks(c))
                    .zip(dx.chunks_mut(c))
                    .enumerate()
                {
                    let mean = node.saved[2 * r];
                    let rstd = node.saved[2 * r + 1];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * rstd;
                        dg[j] += dr[j] * xhat;
                        db[j] += dr[j];
                        let dxhat = dr[j] * g[j];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * rstd;
                        or[j] = rstd * (dr[j] * g[j] - m1 - xhat * m2);
                    }
                }
                accumulate(grads, *x, &dx);
                accumulate(grads, *gain, &dg);
                accumulate(grads, *bias, &db);
            }
            Op::Gelu(a) => {
                let xv = val(*a).data();
                let dx: Vec<f64> = xv
                    .iter()
                    .zip(dy)
                    .map(|(&x, d)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        d * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
                    })
                    .collect();
                accumulate(grads, *a, &dx);
            }
            Op::Relu(a) => {
                let xv = val(*a).data();
                let dx: Vec<f64> = xv
                    .iter()
                    .zip(dy)
                    .map(|(&x, d)| if x > 0.0 { *d } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &dx);
            }
            Op::Gather { table, indices } => {
                let tv = val(*table);
                let c = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (&r, dr) in indices.iter().zip(dy.chunks(c)) {
                    for (o, d) in dt[r * c..(r + 1) * c].iter_mut().zip(dr) {
                        *o += d;
                    }
                }
                accumulate(grads, *table, &dt);
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                accumulate(grads, *a, &vec![dy[0]; n]);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                accumulate(grads, *a, &vec![dy[0] / n as f64; n]);
            }
            Op::Scale(a, f) => {
                let dx: Vec<f64> = dy.iter().map(|d| d * f).collect();
                accumulate(grads, *a, &dx);
            }
            Op::Concat(parts) => {
                let total = y.cols();
                let rows = y.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    let mut dp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        dp.extend_from_slice(&dy[r * total + offset..r * total + offset + c]);
                    }
                    accumulate(grads, p, &dp);
                    offset += c;
                }
            }
            Op::Ln(a) => {
                let xv = val(*a).data();
                let dx: Vec<f64> = xv.iter().zip(dy).map(|(x, d)| d / x).collect();
                accumulate(grads, *a, &dx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, d: &[f64]) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d.to_vec()),
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

/// Forward kernel shared by eager construction and re-evaluation.
fn compute<'v>(op: &Op, val: &dyn Fn(NodeId) -> &'v Tensor) -> Result<(Tensor, Vec<f64>)> {
    let name = op.name();
    let out = match op {
        Op::Input | Op::Param(_) => unreachable!("leaves are never recomputed"),
        Op::Add(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if av.shape() == bv.shape() {
                let d = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
                Tensor::new(av.shape().to_vec(), d)?
            } else if bv.len() == av.cols() && bv.rows() == 1 && av.shape().len() == 2 {
                let c = av.cols();
                let mut d = av.data().to_vec();
                for row in d.chunks_mut(c) {
                    row.iter_mut().zip(bv.data()).for_each(|(x, y)| *x += y);
                }
                Tensor::new(av.shape().to_vec(), d)?
            } else {
                return Err(Error::shape(
                    name,
                    format!("{:?} + {:?}", av.shape(), bv.shape()),
                ));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if av.shape() != bv.shape() {
                return Err(Error::shape(
                    name,
                    format!("{:?} * {:?}", av.shape(), bv.shape()),
                ));
            }
            let d = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
            Tensor::new(av.shape().to_vec(), d)?
        }
        Op::MatMul { a, b, transpose_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = require_2d(name, av)?;
            let (br, bc) = require_2d(name, bv)?;
            if *transpose_b {
                if bc != k {
                    return Err(Error::shape(
                        name,
                        format!("[{m},{k}] x [{br},{bc}]^T"),
                    ));
                }
                Tensor::new(vec![m, br], mm_nt(av.data(), bv.data(), m, k, br))?
            } else {
                if br != k {
                    return Err(Error::shape(name, format!("[{m},{k}] x [{br},{bc}]")));
                }
                Tensor::new(vec![m, bc], mm(av.data(), bv.data(), m, k, bc))?
            }
        }
        Op::Affine { x, w, b } => {
            let (xv, wv, bv) = (val(*x), val(*w), val(*b));
            let (m, k) = require_2d(name, xv)?;
            let (wr, n) = require_2d(name, wv)?;
            if wr != k || bv.len() != n {
                return Err(Error::shape(
                    name,
                    format!("x {:?}, w {:?}, b {:?}", xv.shape(), wv.shape(), bv.shape()),
                ));
            }
            let mut d = mm(xv.data(), wv.data(), m, k, n);
            for row in d.chunks_mut(n) {
                row.iter_mut().zip(bv.data()).for_each(|(o, b)| *o += b);
            }
            Tensor::new(vec![m, n], d)?
        }
        Op::Softmax(a) => {
            let av = val(*a);
            let c = av.cols();
            let mut d = av.data().to_vec();
            if c > 0 {
                for row in d.chunks_mut(c) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        total += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= total);
                }
            }
            Tensor::new(av.shape().to_vec(), d)?
        }
        Op::LogSoftmax(a) => {
            let av = val(*a);
            let c = av.cols();
            let mut d = av.data().to_vec();
            if c > 0 {
                for row in d.chunks_mut(c) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    row.iter_mut().for_each(|v| *v -= lse);
                }
            }
            Tensor::new(av.shape().to_vec(), d)?
        }
        Op::LayerNorm { x, gain, bias } => {
            let (xv, gv, bv) = (val(*x), val(*gain), val(*bias));
            let c = xv.cols();
            if gv.len() != c || bv.len() != c || c == 0 {
                return Err(Error::shape(
                    name,
                    format!("x {:?}, gain {:?}, bias {:?}", xv.shape(), gv.shape(), bv.shape()),
                ));
            }
            let mut d = vec![0.0; xv.len()];
            let mut saved = Vec::with_capacity(2 * xv.rows());
            for (xr, or) in xv.data().chunks(c).zip(d.chunks_mut(c)) {
                let mean = xr.iter().sum::<f64>() / c as f64;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..c {
                    or[j] = (xr[j] - mean) * rstd * gv.data()[j] + bv.data()[j];
                }
                saved.push(mean);
                saved.push(rstd);
            }
            return Ok((Tensor::new(xv.shape().to_vec(), d)?, saved));
        }
        Op::Gelu(a) => {
            let av = val(*a);
            let d = av
                .data()
                .iter()
                .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
                .collect();
            Tensor::new(av.shape().to_vec(), d)?
        }
        Op::Relu(a) => {
            let av = val(*a);
            let d = av.data().iter().map(|&x| x.max(0.0)).collect();
            Tensor::new(av.shape().to_vec(), d)?
        }
        Op::Gather { table, indices } => {
            let tv = val(*table);
            let (r, c) = require_2d(name, tv)?;
            let mut d = Vec::with_capacity(indices.len() * c);
            for &i in indices {
                if i >= r {
                    return Err(Error::shape(name, format!("index {i} >= table rows {r}")));
                }
                d.extend_from_slice(tv.row(i));
            }
            Tensor::new(vec![indices.len(), c], d)?
        }
        Op::Sum(a) => Tensor::scalar(val(*a).sum()),
        Op::Mean(a) => {
            let av = val(*a);
            if av.is_empty() {
                return Err(Error::shape(name, "mean of empty tensor"));
            }
            Tensor::scalar(av.sum() / av.len() as f64)
        }
        Op::Scale(a, f) => {
            let av = val(*a);
            Tensor::new(av.shape().to_vec(), av.data().iter().map(|v| v * f).collect())?
        }
        Op::Concat(parts) => {
            if parts.is_empty() {
                return Err(Error::shape(name, "no inputs"));
            }
            let rows = val(parts[0]).rows();
            let lead = val(parts[0]).shape().len();
            let mut total = 0;
            for &p in parts {
                let pv = val(p);
                if pv.rows() != rows || pv.shape().len() != lead {
                    return Err(Error::shape(
                        name,
                        format!("{:?} vs {:?}", val(parts[0]).shape(), pv.shape()),
                    ));
                }
                total += pv.cols();
            }
            let mut d = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &p in parts {
                    d.extend_from_slice(val(p).row(r));
                }
            }
            let mut shape = val(parts[0]).shape().to_vec();
            match shape.last_mut() {
                Some(last) => *last = total,
                None => shape.push(total),
            }
            Tensor::new(shape, d)?
        }
        Op::Ln(a) => {
            let av = val(*a);
            if let Some(bad) = av.data().iter().find(|v| !(**v > 0.0)) {
                return Err(Error::Support(format!("ln of non-positive value {bad}")));
            }
            Tensor::new(av.shape().to_vec(), av.data().iter().map(|v| v.ln()).collect())?
        }
    };
    Ok((out, Vec::new()))
}

/// `[m,k] · [k,n]`.
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `[m,k] · [n,k]ᵀ`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `[k,m]ᵀ · [k,n]`.
fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in c[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_affine_is_identity() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.25, -1.0]).unwrap());
        let mut eye = vec![0.0; 9];
        (0..3).for_each(|i| eye[i * 3 + i] = 1.0);
        let w = g.input(Tensor::matrix(3, 3, eye).unwrap());
        let b = g.input(Tensor::zeros(&[3]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn log_softmax_exponentiates_to_unit_mass() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.log_softmax(x).unwrap();
        let total: f64 = g.value(y).data().iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        // closed form: log(e^i / (e + e^2 + e^3))
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expect: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v - z.ln()).collect();
        assert!(close(g.value(y).data(), &expect, 1e-14));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let w = Tensor::vector(vec![1.0, 2.0]);
        let mut g = Graph::new();
        let p = g.param(0, &w);
        let sq = g.mul(p, p).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let w = Tensor::vector(vec![1.0, 2.0]);
        let mut g = Graph::new();
        g.param(0, &w);
        let c = g.input(Tensor::scalar(3.0));
        let l = g.scale(c, 2.0).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let w = Tensor::vector(vec![1.0, 2.0]);
        let mut g = Graph::new();
        let p = g.param(0, &w);
        assert!(matches!(g.backward(p), Err(Error::Shape { .. })));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { op, detail }) => {
                assert_eq!(op, "matmul");
                assert!(detail.contains("[2,3]"));
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn parameters_register_once() {
        let w = Tensor::vector(vec![1.0]);
        let mut g = Graph::new();
        let a = g.param(3, &w);
        let b = g.param(3, &w);
        assert_eq!(a, b);
    }

    #[test]
    fn reevaluation_is_bit_identical() {
        let w = Tensor::matrix(2, 2, vec![0.3, -0.2, 0.1, 0.7]).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap());
        let p = g.param(0, &w);
        let h = g.matmul(x, p).unwrap();
        let s = g.softmax(h).unwrap();
        let l = g.sum(s).unwrap();
        assert_eq!(g.evaluate(s).unwrap(), *g.value(s));
        assert_eq!(g.evaluate(l).unwrap().item().to_bits(), g.value(l).item().to_bits());
    }

    #[test]
    fn ln_rejects_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 0.0]));
        assert!(g.ln(x).is_err());
    }
}
