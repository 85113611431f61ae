//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value on a [`Tape`] is a 2-D matrix; scalars are `1 × 1`. The tape
//! borrows a [`ParamStore`] immutably, so a forward pass never mutates
//! parameters and several tapes may run over the same store concurrently.
//! Operations are recorded in execution order and [`Tape::backward`] walks
//! them in reverse.

mod param;

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

pub use param::{trunc_normal, ParamId, ParamStore};

use crate::error::{invalid_input, shape, Result};

/// Scalar types the tape can differentiate over (`f32` for training, `f64`
/// for finite-difference checks).
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + FromPrimitive
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from(x).expect("representable literal")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Gelu(Var),
    Exp(Var),
    ClampMax(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        rstd: Array1<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<T>>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    L2NormalizeRows {
        x: Var,
        norms: Array1<T>,
    },
    SqErrSum {
        pred: Var,
        target: Array2<T>,
        rows: Vec<usize>,
    },
    DiagonalCrossEntropy {
        logits: Var,
        probs: Array2<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Array2<T>,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Option<Array2<T>>,
    requires_grad: bool,
}

pub struct Tape<'p, T: Real> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Array2<T>>>,
    params: Vec<Option<Array2<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient w.r.t. a parameter; `None` when the parameter did not take
    /// part in the loss.
    pub fn param(&self, id: ParamId) -> Option<&Array2<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn var(&self, v: Var) -> Option<&Array2<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn into_params(self) -> Vec<Option<Array2<T>>> {
        self.params
    }
}

fn same_shape<T>(a: &Array2<T>, b: &Array2<T>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

fn softmax_rows<T: Real>(m: ArrayView2<T>) -> Array2<T> {
    let mut out = m.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum: T = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

/// Row-wise log-sum-exp with max subtraction.
fn logsumexp_rows<T: Real>(m: &Array2<T>) -> Array1<T> {
    m.rows()
        .into_iter()
        .map(|row| {
            let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
            max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
        })
        .collect()
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Array2<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(x), _) => x,
            (None, Op::Param(id)) => self.store.get(*id),
            (None, _) => unreachable!("non-parameter node without value"),
        }
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[[0, 0]]
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.push(Op::Input, value, false)
    }

    /// Learnable parameter. Repeated calls return the same node so gradients
    /// from every use accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(shape(format!("matmul {:?} x {:?}", av.dim(), bv.dim())));
        }
        let out = av.dot(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(Op::Transpose(a), out, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "add")?;
        let out = av + bv;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    /// Adds a `1 × m` row to every row of an `n × m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != av.ncols() {
            return Err(shape(format!("add_row {:?} + {:?}", av.dim(), rv.dim())));
        }
        let out = av + rv;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Op::AddRow(a, row), out, rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a) * c;
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), out, rg)
    }

    /// Multiplies a matrix by a `1 × 1` node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.dim() != (1, 1) {
            return Err(shape(format!("mul_scalar by {:?}", sv.dim())));
        }
        let out = self.value(a) * sv[[0, 0]];
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(Op::MulScalar(a, s), out, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| gelu_parts(x).0);
        let rg = self.rg(a);
        self.push(Op::Gelu(a), out, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(T::exp);
        let rg = self.rg(a);
        self.push(Op::Exp(a), out, rg)
    }

    /// `min(x, c)`; the gradient is zero where the clamp is active.
    pub fn clamp_max(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).mapv(|x| x.min(c));
        let rg = self.rg(a);
        self.push(Op::ClampMax(a, c), out, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.ncols();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.dim() != (1, d) || bv.dim() != (1, d) {
            return Err(shape(format!(
                "layer_norm over width {d} with gamma {:?}, beta {:?}",
                gv.dim(),
                bv.dim()
            )));
        }
        let n = T::from(d).unwrap();
        let mut xhat = xv.to_owned();
        let mut rstd = Array1::zeros(xv.nrows());
        for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * r);
            rstd[i] = r;
        }
        let out = &xhat * gv + bv;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            out,
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention over pre-projected
    /// queries, keys, and values (each `n × d`, `d` divisible by `heads`).
    /// The output concatenates the heads along columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        same_shape(qv, kv, "attention q/k")?;
        same_shape(qv, vv, "attention q/v")?;
        let (n, d) = qv.dim();
        if heads == 0 || d % heads != 0 {
            return Err(shape(format!("width {d} not divisible into {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::one() / T::from(dh).unwrap().sqrt();
        let mut out = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let scores = qv.slice(cols).dot(&kv.slice(cols).t()) * scale;
            let p = softmax_rows(scores.view());
            out.slice_mut(cols).assign(&p.dot(&vv.slice(cols)));
            probs.push(p);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            out,
            rg,
        ))
    }

    /// Per-head attention probabilities recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[Array2<T>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Row gather; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.nrows()) {
            return Err(invalid_input(format!(
                "row index {bad} out of range for {} rows",
                av.nrows()
            )));
        }
        let out = av.select(Axis(0), &idx);
        let rg = self.rg(a);
        Ok(self.push(Op::GatherRows(a, idx), out, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid_input("concat of zero parts"));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| shape(format!("concat_rows: {e}")))?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, rg))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = av
            .mean_axis(Axis(0))
            .ok_or_else(|| invalid_input("mean of zero rows"))?
            .insert_axis(Axis(0));
        let rg = self.rg(a);
        Ok(self.push(Op::MeanRows(a), out, rg))
    }

    /// Divides each row by its Euclidean norm. Zero rows are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let norms: Array1<T> = xv
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        if let Some(i) = norms.iter().position(|&n| n == T::zero() || !n.is_finite()) {
            return Err(invalid_input(format!(
                "feature row {i} has degenerate norm; cannot normalize"
            )));
        }
        let out = xv / &norms.view().insert_axis(Axis(1));
        let rg = self.rg(x);
        Ok(self.push(Op::L2NormalizeRows { x, norms }, out, rg))
    }

    /// Sum of squared differences between `pred` and a constant target over
    /// the selected rows. Produces a `1 × 1` node.
    pub fn sq_err_sum(&mut self, pred: Var, target: Array2<T>, rows: Vec<usize>) -> Result<Var> {
        let pv = self.value(pred);
        same_shape(pv, &target, "squared error")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= pv.nrows()) {
            return Err(invalid_input(format!("row {bad} out of range")));
        }
        let mut total = T::zero();
        for &r in &rows {
            for (&p, &t) in pv.row(r).iter().zip(target.row(r)) {
                total += (p - t) * (p - t);
            }
        }
        let rg = self.rg(pred);
        Ok(self.push(
            Op::SqErrSum { pred, target, rows },
            Array2::from_elem((1, 1), total),
            rg,
        ))
    }

    /// Mean cross entropy of each row against its diagonal entry, i.e. the
    /// InfoNCE objective with in-batch negatives. Produces a `1 × 1` node.
    pub fn diagonal_cross_entropy(&mut self, logits: Var) -> Result<Var> {
        let lv = self.value(logits);
        let (n, m) = lv.dim();
        if n != m {
            return Err(shape(format!("contrastive logits must be square, got {n}x{m}")));
        }
        let labels: Vec<usize> = (0..n).collect();
        let (loss, probs) = cross_entropy_forward(lv, &labels);
        let rg = self.rg(logits);
        Ok(self.push(
            Op::DiagonalCrossEntropy { logits, probs },
            Array2::from_elem((1, 1), loss),
            rg,
        ))
    }

    /// Mean softmax cross entropy against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.nrows() {
            return Err(shape(format!("{} labels for {} rows", labels.len(), lv.nrows())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= lv.ncols()) {
            return Err(invalid_input(format!("label {bad} out of range")));
        }
        let (loss, probs) = cross_entropy_forward(lv, &labels);
        let rg = self.rg(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            },
            Array2::from_elem((1, 1), loss),
            rg,
        ))
    }

    /// Backpropagates from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).dim() != (1, 1) {
            return Err(shape("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let mut params = vec![None; self.store.len()];
        for (&id, &v) in &self.params {
            params[id.0] = grads[v.0].clone();
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let mut acc = |v: Var, delta: Array2<T>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::MulScalar(a, s) => {
                let sv = self.value(*s)[[0, 0]];
                if self.rg(*a) {
                    acc(*a, g * sv);
                }
                if self.rg(*s) {
                    let ds = (g * self.value(*a)).sum();
                    acc(*s, Array2::from_elem((1, 1), ds));
                }
            }
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(|x| gelu_parts(x).1);
                d *= g;
                acc(*a, d);
            }
            Op::Exp(a) => {
                let y = node.value.as_ref().unwrap();
                acc(*a, g * y);
            }
            Op::ClampMax(a, c) => {
                let x = self.value(*a);
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(x).for_each(|d, &x| {
                    if x > *c {
                        *d = T::zero();
                    }
                });
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                if self.rg(*beta) {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*gamma) {
                    acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let gv = self.value(*gamma);
                    let dxhat = g * gv;
                    let n = T::from(xhat.ncols()).unwrap();
                    let mut dx = Array2::zeros(xhat.dim());
                    for i in 0..xhat.nrows() {
                        let dr = dxhat.row(i);
                        let xr = xhat.row(i);
                        let mean_d = dr.sum() / n;
                        let mean_dx = dr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for j in 0..xhat.ncols() {
                            dx[[i, j]] = rstd[i] * (dr[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.ncols();
                let dh = d / heads;
                let scale = T::one() / T::from(dh).unwrap().sqrt();
                let mut dq = Array2::zeros(qv.dim());
                let mut dk = Array2::zeros(kv.dim());
                let mut dv = Array2::zeros(vv.dim());
                for (h, p) in probs.iter().enumerate() {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    let go = g.slice(cols);
                    let dp = go.dot(&vv.slice(cols).t());
                    dv.slice_mut(cols).assign(&p.t().dot(&go));
                    let mut ds = Array2::zeros(p.dim());
                    for i in 0..p.nrows() {
                        let dot: T = p.row(i).iter().zip(dp.row(i)).map(|(&a, &b)| a * b).sum();
                        for j in 0..p.ncols() {
                            ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
                        }
                    }
                    dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                    dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::GatherRows(a, idx) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(r);
                }
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).nrows();
                    acc(p, g.slice(s![start..start + rows, ..]).to_owned());
                    start += rows;
                }
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let n = T::from(av.nrows()).unwrap();
                let row = g.row(0).mapv(|x| x / n);
                let d = row.broadcast(av.dim()).unwrap().to_owned();
                acc(*a, d);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.as_ref().unwrap();
                let mut dx = g.clone();
                for i in 0..y.nrows() {
                    let dot: T = y.row(i).iter().zip(g.row(i)).map(|(&a, &b)| a * b).sum();
                    for j in 0..y.ncols() {
                        dx[[i, j]] = (g[[i, j]] - y[[i, j]] * dot) / norms[i];
                    }
                }
                acc(*x, dx);
            }
            Op::SqErrSum { pred, target, rows } => {
                let pv = self.value(*pred);
                let gs = g[[0, 0]];
                let two = T::lit(2.0);
                let mut d = Array2::zeros(pv.dim());
                for &r in rows {
                    for j in 0..pv.ncols() {
                        d[[r, j]] = two * (pv[[r, j]] - target[[r, j]]) * gs;
                    }
                }
                acc(*pred, d);
            }
            Op::DiagonalCrossEntropy { logits, probs } => {
                let n = T::from(probs.nrows()).unwrap();
                let mut d = probs.clone();
                for i in 0..probs.nrows() {
                    d[[i, i]] -= T::one();
                }
                d *= g[[0, 0]] / n;
                acc(*logits, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = T::from(probs.nrows()).unwrap();
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[[i, l]] -= T::one();
                }
                d *= g[[0, 0]] / n;
                acc(*logits, d);
            }
        }
    }
}

fn cross_entropy_forward<T: Real>(logits: &Array2<T>, labels: &[usize]) -> (T, Array2<T>) {
    let lse = logsumexp_rows(logits);
    let n = T::from(logits.nrows()).unwrap();
    let loss = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| lse[i] - logits[[i, l]])
        .sum::<T>()
        / n;
    let mut probs = logits.clone();
    for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|x| (x - lse[i]).exp());
    }
    (loss, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn finite_diff(
        store: &mut ParamStore<f64>,
        id: ParamId,
        idx: (usize, usize),
        f: &dyn Fn(&ParamStore<f64>) -> f64,
    ) -> f64 {
        let eps = 1e-6;
        let orig = store.get(id)[idx];
        store.get_mut(id)[idx] = orig + eps;
        let up = f(store);
        store.get_mut(id)[idx] = orig - eps;
        let down = f(store);
        store.get_mut(id)[idx] = orig;
        (up - down) / (2.0 * eps)
    }

    fn check_all(store: &mut ParamStore<f64>, f: &dyn Fn(&mut Tape<f64>) -> Var) {
        let eval = |s: &ParamStore<f64>| {
            let mut t = Tape::new(s);
            let l = f(&mut t);
            t.scalar(l)
        };
        let analytic = {
            let mut t = Tape::new(store);
            let l = f(&mut t);
            t.backward(l).unwrap().into_params()
        };
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).dim();
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let num = finite_diff(store, id, (i, j), &eval);
                    let ana = analytic[id.0].as_ref().map_or(0.0, |g| g[[i, j]]);
                    let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                    assert!(err < 1e-5, "{}[{i},{j}]: {ana} vs {num}", store.name(id));
                }
            }
        }
    }

    fn rand_store(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore<f64> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for &(name, r, c) in shapes {
            store.add(name, trunc_normal(r, c, 0.5, &mut rng)).unwrap();
        }
        store
    }

    #[test]
    fn attention_and_layer_norm_gradients() {
        let mut store = rand_store(
            &[("x", 4, 6), ("g", 1, 6), ("b", 1, 6), ("wq", 6, 6), ("wk", 6, 6)],
            1,
        );
        check_all(&mut store, &|t| {
            let ids: Vec<_> = t.store().ids().collect();
            let x = t.param(ids[0]);
            let (g, b) = (t.param(ids[1]), t.param(ids[2]));
            let h = t.layer_norm(x, g, b, 1e-5).unwrap();
            let wq = t.param(ids[3]);
            let wk = t.param(ids[4]);
            let q = t.matmul(h, wq).unwrap();
            let k = t.matmul(h, wk).unwrap();
            let a = t.attention(q, k, h, 2).unwrap();
            let a = t.gelu(a);
            t.sq_err_sum(a, Array2::zeros((4, 6)), vec![0, 2, 3]).unwrap()
        });
    }

    #[test]
    fn contrastive_path_gradients() {
        let mut store = rand_store(&[("a", 3, 4), ("b", 3, 4), ("s", 1, 1)], 2);
        check_all(&mut store, &|t| {
            let ids: Vec<_> = t.store().ids().collect();
            let a = t.param(ids[0]);
            let b = t.param(ids[1]);
            let s = t.param(ids[2]);
            let an = t.l2_normalize_rows(a).unwrap();
            let bn = t.l2_normalize_rows(b).unwrap();
            let es = t.exp(s);
            let es = t.clamp_max(es, 100.0);
            let bt = t.transpose(bn);
            let lg = t.matmul(an, bt).unwrap();
            let lg = t.mul_scalar(lg, es).unwrap();
            let lt = t.transpose(lg);
            let l1 = t.diagonal_cross_entropy(lg).unwrap();
            let l2 = t.diagonal_cross_entropy(lt).unwrap();
            t.add(l1, l2).unwrap()
        });
    }

    #[test]
    fn gather_concat_mean_gradients() {
        let mut store = rand_store(&[("a", 3, 2), ("b", 1, 2), ("r", 1, 2)], 3);
        check_all(&mut store, &|t| {
            let ids: Vec<_> = t.store().ids().collect();
            let a = t.param(ids[0]);
            let b = t.param(ids[1]);
            let r = t.param(ids[2]);
            let c = t.concat_rows(&[a, b]).unwrap();
            let gth = t.gather_rows(c, vec![3, 0, 3, 1]).unwrap();
            let gth = t.add_row(gth, r).unwrap();
            let m = t.mean_rows(gth).unwrap();
            let m = t.scale(m, 3.0);
            let logits = t.concat_rows(&[m, gth]).unwrap();
            t.cross_entropy(logits, vec![0, 1, 0, 1, 1]).unwrap()
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(array![[1.0f64, 2.0, 3.0], [1000.0, -1000.0, 0.0]].view());
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors_are_reported() {
        let store = ParamStore::<f32>::new();
        let mut t = Tape::new(&store);
        let a = t.input(Array2::zeros((2, 3)));
        let b = t.input(Array2::zeros((2, 3)));
        assert!(t.matmul(a, b).is_err());
        assert!(t.diagonal_cross_entropy(a).is_err());
        let z = t.input(Array2::zeros((1, 3)));
        assert!(t.l2_normalize_rows(z).is_err());
    }
}
