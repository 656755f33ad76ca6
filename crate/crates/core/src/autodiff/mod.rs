//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation eagerly; [`Var`] is a cheap handle into
//! it. Node ids are assigned in creation order, so walking ids backwards from
//! the loss is a valid reverse topological order. Tapes are meant to be
//! rebuilt for every optimisation step.
//!
//! Binary elementwise operations broadcast a `1×c`, `r×1` or `1×1` operand
//! against the other one, and the gradient is summed back to the operand's
//! shape.

mod adam;
mod gradcheck;

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

pub use adam::Adam;
pub use gradcheck::{finite_difference_check, numeric_gradient};

use crate::{Error, Matrix, Result};

/// Slope used by [`Var::leaky_relu`] callers that do not pick their own.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Transpose(usize),
    RowSoftmax(usize),
    RowLogSumExp(usize),
    Sigmoid(usize),
    Relu(usize),
    ClampMin(usize, f64),
    LeakyRelu(usize, f64),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sqrt(usize),
    Powf(usize, f64),
    SignedPow(usize, f64),
    ReduceSum(usize),
    ReduceMean(usize),
    SumRows(usize),
    Mse(usize, usize),
    PairwiseSqDist(usize, usize),
    PairwiseDist(usize, usize),
    GatherRows(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    Attention(Box<AttentionRecord>),
}

#[derive(Debug)]
struct AttentionRecord {
    query: usize,
    key: usize,
    value: usize,
    heads: usize,
    head_dim: usize,
    rows: Rc<Vec<Vec<(usize, f64)>>>,
    offsets: Vec<usize>,
    /// `weights[h * pairs + e]` for head `h` and flattened pair `e`.
    weights: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Rc<Matrix>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({r}x{c})", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Matrix, op: Op, needs_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var { tape: self, id }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].needs_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Matrix> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    /// Trainable leaf; its gradient is kept after [`Tape::backward`].
    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no operands"))?;
        let rows = first.shape().0;
        let mut views = Vec::with_capacity(parts.len());
        for p in parts {
            if p.shape().0 != rows {
                return Err(Error::dim(
                    "concat_cols",
                    format!("row counts {} and {}", rows, p.shape().0),
                ));
            }
            views.push(p.value());
        }
        let refs: Vec<_> = views.iter().map(|m| m.view()).collect();
        let value = ndarray::concatenate(Axis(1), &refs).expect("row counts checked");
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs(&ids);
        Ok(self.push(value, Op::ConcatCols(ids), needs))
    }

    /// Multi-head attention restricted to per-node neighbourhoods.
    ///
    /// `rows[i]` lists `(j, bias_ij)` for every node `j` that `i` attends to.
    /// `query`, `key` and `value` are `n × (heads·head_dim)`; head `h` uses
    /// columns `h·head_dim..(h+1)·head_dim`. For each head the logit of pair
    /// `(i, j)` is `q_i·k_j / sqrt(head_dim) + bias_ij`, normalised by a
    /// softmax over `rows[i]`. Head outputs are averaged, giving `n × head_dim`.
    pub fn neighbor_attention<'t>(
        &'t self,
        query: Var<'t>,
        key: Var<'t>,
        value: Var<'t>,
        heads: usize,
        rows: Rc<Vec<Vec<(usize, f64)>>>,
    ) -> Result<Var<'t>> {
        let (n, width) = query.shape();
        if heads == 0 || width % heads != 0 {
            return Err(Error::dim(
                "neighbor_attention",
                format!("width {width} not divisible into {heads} heads"),
            ));
        }
        if key.shape() != (n, width) || value.shape() != (n, width) {
            return Err(Error::dim(
                "neighbor_attention",
                format!(
                    "query {:?}, key {:?}, value {:?}",
                    query.shape(),
                    key.shape(),
                    value.shape()
                ),
            ));
        }
        if rows.len() != n {
            return Err(Error::dim(
                "neighbor_attention",
                format!("{} neighbourhoods for {n} nodes", rows.len()),
            ));
        }
        if let Some(i) = rows.iter().position(|r| r.is_empty() || r.iter().any(|&(j, _)| j >= n)) {
            return Err(Error::Contract(format!(
                "attention neighbourhood of node {i} is empty or out of range"
            )));
        }
        let head_dim = width / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for r in rows.iter() {
            offsets.push(offsets.last().unwrap() + r.len());
        }
        let pairs = *offsets.last().unwrap();

        let (q, k, v) = (query.value(), key.value(), value.value());
        let mut weights = vec![0.0; heads * pairs];
        let mut out = Array2::zeros((n, head_dim));
        let inv_heads = 1.0 / heads as f64;
        let mut logits = Vec::new();
        for h in 0..heads {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
            for (i, row) in rows.iter().enumerate() {
                logits.clear();
                logits.extend(
                    row.iter()
                        .map(|&(j, b)| qh.row(i).dot(&kh.row(j)) * scale + b),
                );
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    total += *l;
                }
                let base = h * pairs + offsets[i];
                let mut out_i = out.row_mut(i);
                for (slot, (&(j, _), &e)) in row.iter().zip(&logits).enumerate() {
                    let a = e / total;
                    weights[base + slot] = a;
                    out_i.scaled_add(a * inv_heads, &vh.row(j));
                }
            }
        }
        let needs = self.needs(&[query.id, key.id, value.id]);
        Ok(self.push(
            out,
            Op::Attention(Box::new(AttentionRecord {
                query: query.id,
                key: key.id,
                value: value.id,
                heads,
                head_dim,
                rows,
                offsets,
                weights,
            })),
            needs,
        ))
    }

    /// Attention weights recorded by a [`Tape::neighbor_attention`] node, as
    /// `result[i]` = `(j, weight)` pairs for the given head.
    pub fn attention_weights(&self, var: Var<'_>, head: usize) -> Option<Vec<Vec<(usize, f64)>>> {
        let inner = self.inner.borrow();
        let Op::Attention(rec) = &inner.nodes[var.id].op else {
            return None;
        };
        if head >= rec.heads {
            return None;
        }
        let pairs = *rec.offsets.last().unwrap();
        Some(
            rec.rows
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(slot, &(j, _))| (j, rec.weights[head * pairs + rec.offsets[i] + slot]))
                        .collect()
                })
                .collect(),
        )
    }

    /// Back-propagates from a `1×1` loss, adding `∂loss/∂node` into the
    /// gradient accumulator of every node that depends on a trainable leaf.
    ///
    /// Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if loss.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                loss.shape()
            )));
        }
        let mut inner = self.inner.borrow_mut();
        let Inner { nodes, grads: acc } = &mut *inner;
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Array2::ones((1, 1)));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].needs_grad {
                continue;
            }
            for (parent, contribution) in backward_rule(nodes, id, &g) {
                if !nodes[parent].needs_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(existing) => *existing += &contribution,
                    slot @ None => *slot = Some(contribution),
                }
            }
            if acc.len() < nodes.len() {
                acc.resize(nodes.len(), None);
            }
            match &mut acc[id] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Accumulated gradient of `var`, if any was propagated to it.
    pub fn grad(&self, var: Var<'_>) -> Option<Matrix> {
        self.inner.borrow().grads.get(var.id).cloned().flatten()
    }

    /// Accumulated gradient, or zeros of the value's shape.
    pub fn grad_or_zeros(&self, var: Var<'_>) -> Matrix {
        self.grad(var)
            .unwrap_or_else(|| Array2::zeros(var.shape()))
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grads.clear();
    }
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::dim(op, format!("cannot broadcast {a:?} with {b:?}"))),
    }
}

/// Sums a broadcast gradient back down to `shape`.
fn unbroadcast(g: Matrix, shape: (usize, usize)) -> Matrix {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn binary_map(a: &Matrix, b: &Matrix, shape: (usize, usize), f: impl Fn(f64, f64) -> f64) -> Matrix {
    let a = a.broadcast(shape).expect("shape checked");
    let b = b.broadcast(shape).expect("shape checked");
    ndarray::Zip::from(&a).and(&b).map_collect(|&x, &y| f(x, y))
}

fn backward_rule(nodes: &[Node], id: usize, g: &Matrix) -> Vec<(usize, Matrix)> {
    let val = |i: usize| &*nodes[i].value;
    let out = val(id);
    match &nodes[id].op {
        Op::Leaf => vec![],
        &Op::MatMul(a, b) => vec![(a, g.dot(&val(b).t())), (b, val(a).t().dot(g))],
        &Op::Add(a, b) => vec![
            (a, unbroadcast(g.clone(), val(a).dim())),
            (b, unbroadcast(g.clone(), val(b).dim())),
        ],
        &Op::Sub(a, b) => vec![
            (a, unbroadcast(g.clone(), val(a).dim())),
            (b, unbroadcast(-g, val(b).dim())),
        ],
        &Op::Hadamard(a, b) => {
            let shape = g.dim();
            vec![
                (a, unbroadcast(binary_map(g, val(b), shape, |x, y| x * y), val(a).dim())),
                (b, unbroadcast(binary_map(g, val(a), shape, |x, y| x * y), val(b).dim())),
            ]
        }
        &Op::Div(a, b) => {
            let shape = g.dim();
            let ga = binary_map(g, val(b), shape, |x, y| x / y);
            let gb = ndarray::Zip::from(&ga)
                .and(out)
                .map_collect(|&gq, &q| -gq * q);
            vec![
                (a, unbroadcast(ga, val(a).dim())),
                (b, unbroadcast(gb, val(b).dim())),
            ]
        }
        &Op::Scale(a, c) => vec![(a, g * c)],
        &Op::AddScalar(a) => vec![(a, g.clone())],
        &Op::Transpose(a) => vec![(a, g.t().to_owned())],
        &Op::RowSoftmax(a) => {
            let dot = (g * out).sum_axis(Axis(1)).insert_axis(Axis(1));
            vec![(a, out * &(g - &dot))]
        }
        &Op::RowLogSumExp(a) => {
            let x = val(a);
            let soft = (x - out).mapv(f64::exp);
            vec![(a, soft * g)]
        }
        &Op::Sigmoid(a) => vec![(a, ndarray::Zip::from(g).and(out).map_collect(|&g, &y| g * y * (1.0 - y)))],
        &Op::Relu(a) => vec![(a, ndarray::Zip::from(g).and(val(a)).map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 }))],
        &Op::LeakyRelu(a, slope) => vec![(
            a,
            ndarray::Zip::from(g)
                .and(val(a))
                .map_collect(|&g, &x| if x > 0.0 { g } else { slope * g }),
        )],
        &Op::Exp(a) => vec![(a, g * out)],
        &Op::ClampMin(a, lo) => vec![(a, ndarray::Zip::from(g).and(val(a)).map_collect(|&g, &x| if x > lo { g } else { 0.0 }))],
        &Op::Log(a) => vec![(a, g / val(a))],
        &Op::Square(a) => vec![(a, ndarray::Zip::from(g).and(val(a)).map_collect(|&g, &x| 2.0 * x * g))],
        &Op::Sqrt(a) => vec![(a, ndarray::Zip::from(g).and(out).map_collect(|&g, &y| g / (2.0 * y)))],
        &Op::Powf(a, p) => vec![(
            a,
            ndarray::Zip::from(g)
                .and(val(a))
                .map_collect(|&g, &x| g * p * x.powf(p - 1.0)),
        )],
        &Op::SignedPow(a, p) => vec![(
            a,
            ndarray::Zip::from(g).and(val(a)).map_collect(|&g, &x| {
                if x == 0.0 {
                    if p == 1.0 {
                        g
                    } else {
                        0.0
                    }
                } else {
                    g * p * x.abs().powf(p - 1.0)
                }
            }),
        )],
        &Op::ReduceSum(a) => vec![(a, Array2::from_elem(val(a).dim(), g[[0, 0]]))],
        &Op::ReduceMean(a) => {
            let x = val(a);
            vec![(a, Array2::from_elem(x.dim(), g[[0, 0]] / x.len() as f64))]
        }
        &Op::SumRows(a) => vec![(a, g.broadcast(val(a).dim()).expect("column").to_owned())],
        &Op::Mse(a, b) => {
            let (x, y) = (val(a), val(b));
            let c = 2.0 * g[[0, 0]] / x.len() as f64;
            let ga = (x - y) * c;
            let gb = -&ga;
            vec![(a, ga), (b, gb)]
        }
        &Op::PairwiseSqDist(a, b) => pairwise_backward(a, b, val(a), val(b), g.mapv(|x| 2.0 * x)),
        &Op::PairwiseDist(a, b) => {
            let h = ndarray::Zip::from(g)
                .and(out)
                .map_collect(|&g, &d| if d > 0.0 { g / d } else { 0.0 });
            pairwise_backward(a, b, val(a), val(b), h)
        }
        Op::GatherRows(a, idx) => {
            let mut ga = Array2::zeros(val(*a).dim());
            for (r, &src) in idx.iter().enumerate() {
                let mut row = ga.row_mut(src);
                row += &g.row(r);
            }
            vec![(*a, ga)]
        }
        Op::ConcatCols(parts) => {
            let mut start = 0;
            parts
                .iter()
                .map(|&p| {
                    let w = val(p).ncols();
                    let piece = g.slice(s![.., start..start + w]).to_owned();
                    start += w;
                    (p, piece)
                })
                .collect()
        }
        Op::Attention(rec) => attention_backward(rec, val(rec.query), val(rec.key), val(rec.value), g),
    }
}

/// Gradient of `Σ_ij h_ij·‖a_i − b_j‖²/2` with respect to `a` and `b`.
fn pairwise_backward(a: usize, b: usize, x: &Matrix, y: &Matrix, h: Matrix) -> Vec<(usize, Matrix)> {
    let row = h.sum_axis(Axis(1)).insert_axis(Axis(1));
    let col = h.sum_axis(Axis(0)).insert_axis(Axis(1));
    let ga = x * &row - h.dot(y);
    let gb = y * &col - h.t().dot(x);
    vec![(a, ga), (b, gb)]
}

fn pairwise_sq(x: &Matrix, y: &Matrix) -> Matrix {
    let mut out = Array2::zeros((x.nrows(), y.nrows()));
    for (i, xi) in x.rows().into_iter().enumerate() {
        for (j, yj) in y.rows().into_iter().enumerate() {
            out[[i, j]] = xi.iter().zip(yj).map(|(p, q)| (p - q) * (p - q)).sum();
        }
    }
    out
}

fn attention_backward(
    rec: &AttentionRecord,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    g: &Matrix,
) -> Vec<(usize, Matrix)> {
    let mut gq = Array2::zeros(q.dim());
    let mut gk = Array2::zeros(k.dim());
    let mut gv = Array2::zeros(v.dim());
    let d = rec.head_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let inv_heads = 1.0 / rec.heads as f64;
    let pairs = *rec.offsets.last().unwrap();
    let mut ga = Vec::new();
    for h in 0..rec.heads {
        let cols = s![.., h * d..(h + 1) * d];
        let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
        for (i, row) in rec.rows.iter().enumerate() {
            let base = h * pairs + rec.offsets[i];
            let weights = &rec.weights[base..base + row.len()];
            let gi = g.row(i);
            ga.clear();
            ga.extend(row.iter().map(|&(j, _)| inv_heads * gi.dot(&vh.row(j))));
            let mean: f64 = weights.iter().zip(&ga).map(|(a, x)| a * x).sum();
            for (slot, &(j, _)) in row.iter().enumerate() {
                let a = weights[slot];
                gv.slice_mut(cols).row_mut(j).scaled_add(a * inv_heads, &gi);
                let gs = a * (ga[slot] - mean) * scale;
                gq.slice_mut(cols).row_mut(i).scaled_add(gs, &kh.row(j));
                gk.slice_mut(cols).row_mut(j).scaled_add(gs, &qh.row(i));
            }
        }
    }
    vec![(rec.query, gq), (rec.key, gk), (rec.value, gv)]
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Rc<Matrix> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.inner.borrow().nodes[self.id].value.dim()
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self) -> f64 {
        self.value()[[0, 0]]
    }

    pub fn grad(&self) -> Option<Matrix> {
        self.tape.grad(*self)
    }

    fn same_tape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract(format!("{op}: operands live on different tapes")))
        }
    }

    fn unary(&self, value: Matrix, op: Op) -> Var<'t> {
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, op, needs)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        self.value().mapv(f)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other, name)?;
        let shape = broadcast_shape(name, self.shape(), other.shape())?;
        let value = binary_map(&self.value(), &other.value(), shape, f);
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, op(self.id, other.id), needs))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other, "matmul")?;
        let (a, b) = (self.value(), other.value());
        if a.ncols() != b.nrows() {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", a.dim(), b.dim()),
            ));
        }
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(a.dot(&*b), Op::MatMul(self.id, other.id), needs))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "hadamard", |x, y| x * y, Op::Hadamard)
    }

    /// Elementwise quotient.
    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |x, y| x / y, Op::Div)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(self.map(|x| x * c), Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(self.map(|x| x + c), Op::AddScalar(self.id))
    }

    pub fn transpose(&self) -> Var<'t> {
        let v = self.value().t().to_owned();
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn row_softmax(&self) -> Var<'t> {
        let x = self.value();
        let mut y = x.as_ref().clone();
        for mut row in y.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row /= total;
        }
        self.unary(y, Op::RowSoftmax(self.id))
    }

    /// `log Σ_j exp(x_ij)` per row, as an `r×1` column.
    pub fn row_logsumexp(&self) -> Var<'t> {
        let x = self.value();
        let col: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|row| {
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
            })
            .collect();
        let n = col.len();
        let y = Array2::from_shape_vec((n, 1), col).expect("column");
        self.unary(y, Op::RowLogSumExp(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(self.map(|x| 1.0 / (1.0 + (-x).exp())), Op::Sigmoid(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(self.map(|x| x.max(0.0)), Op::Relu(self.id))
    }

    /// `max(x, lo)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&self, lo: f64) -> Var<'t> {
        self.unary(self.map(|x| x.max(lo)), Op::ClampMin(self.id, lo))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        self.unary(
            self.map(|x| if x > 0.0 { x } else { slope * x }),
            Op::LeakyRelu(self.id, slope),
        )
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(self.map(f64::exp), Op::Exp(self.id))
    }

    pub fn log(&self) -> Var<'t> {
        self.unary(self.map(f64::ln), Op::Log(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(self.map(|x| x * x), Op::Square(self.id))
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(self.map(f64::sqrt), Op::Sqrt(self.id))
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(self.map(|x| x.powf(p)), Op::Powf(self.id, p))
    }

    /// `sgn(x)·|x|^p`. At `x = 0` the derivative is taken as 1 for `p = 1`
    /// and 0 otherwise.
    pub fn signed_pow(&self, p: f64) -> Var<'t> {
        self.unary(
            self.map(|x| x.signum() * x.abs().powf(p) * f64::from(x != 0.0)),
            Op::SignedPow(self.id, p),
        )
    }

    pub fn reduce_sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.unary(Array2::from_elem((1, 1), s), Op::ReduceSum(self.id))
    }

    pub fn reduce_mean(&self) -> Var<'t> {
        let v = self.value();
        let m = v.sum() / v.len() as f64;
        self.unary(Array2::from_elem((1, 1), m), Op::ReduceMean(self.id))
    }

    /// Row sums as an `r×1` column.
    pub fn sum_rows(&self) -> Var<'t> {
        let s = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(s, Op::SumRows(self.id))
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other, "mse")?;
        let (a, b) = (self.value(), other.value());
        if a.dim() != b.dim() {
            return Err(Error::dim("mse", format!("{:?} vs {:?}", a.dim(), b.dim())));
        }
        let m = ndarray::Zip::from(&*a)
            .and(&*b)
            .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y))
            / a.len() as f64;
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self
            .tape
            .push(Array2::from_elem((1, 1), m), Op::Mse(self.id, other.id), needs))
    }

    /// `out_ij = ‖self_i − other_j‖²` over rows; exactly zero for equal rows.
    pub fn pairwise_sq_dist(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other, "pairwise_sq_dist")?;
        let (a, b) = (self.value(), other.value());
        if a.ncols() != b.ncols() {
            return Err(Error::dim(
                "pairwise_sq_dist",
                format!("{:?} vs {:?}", a.dim(), b.dim()),
            ));
        }
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(pairwise_sq(&a, &b), Op::PairwiseSqDist(self.id, other.id), needs))
    }

    /// Euclidean distance between rows. The gradient at zero distance is 0.
    pub fn pairwise_dist(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other, "pairwise_dist")?;
        let (a, b) = (self.value(), other.value());
        if a.ncols() != b.ncols() {
            return Err(Error::dim(
                "pairwise_dist",
                format!("{:?} vs {:?}", a.dim(), b.dim()),
            ));
        }
        let needs = self.tape.needs(&[self.id, other.id]);
        let d = pairwise_sq(&a, &b).mapv(f64::sqrt);
        Ok(self.tape.push(d, Op::PairwiseDist(self.id, other.id), needs))
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.nrows()) {
            return Err(Error::dim(
                "gather_rows",
                format!("row {bad} out of {}", v.nrows()),
            ));
        }
        let out = v.select(Axis(0), idx);
        Ok(self.unary(out, Op::GatherRows(self.id, idx.to_vec())))
    }
}
