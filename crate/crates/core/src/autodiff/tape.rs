//! Reverse-mode tape.
//!
//! Every forward operation appends a node holding its output value and the
//! handles of its inputs. `backward` walks the nodes once in reverse and
//! applies each node's vector-Jacobian rule. Nodes whose inputs are all
//! untracked are never visited by the backward pass.

use super::array::Array;
use super::flops::{FlopCounter, FlopScope};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    ExclusiveCumsum {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        x: Var,
    },
    ClampMin {
        x: Var,
        lo: f64,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ReplaceRow {
        base: Var,
        row: usize,
        value: Var,
    },
    SelectRow {
        x: Var,
        row: usize,
    },
    SumLast {
        x: Var,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        items: Vec<Var>,
        weights: Var,
    },
    Reshape {
        x: Var,
    },
}

pub(crate) struct Node {
    pub(crate) value: Array,
    pub(crate) requires_grad: bool,
    pub(crate) tracked_leaf: bool,
    pub(crate) op: Op,
}

/// Ordered record of one forward computation.
///
/// A tape is single-threaded; independent tapes share nothing.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    scope: FlopScope,
    flops: FlopCounter,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            scope: FlopScope::Other,
            flops: FlopCounter::default(),
        }
    }

    /// Records a leaf. Tracked leaves receive gradients.
    pub fn leaf(&mut self, value: Array, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: tracked,
            tracked_leaf: tracked,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Array) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sets the accounting scope for subsequent operations and returns the previous one.
    pub fn set_scope(&mut self, scope: FlopScope) -> FlopScope {
        std::mem::replace(&mut self.scope, scope)
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    pub(crate) fn count_matmul(&mut self, flops: u64) {
        self.flops.add_matmul(self.scope, flops);
    }

    pub(crate) fn count_elementwise(&mut self, flops: u64) {
        self.flops.add_elementwise(self.scope, flops);
    }

    pub(crate) fn push(&mut self, value: Array, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            tracked_leaf: false,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.apply_rule(idx, &g, &mut grads);
            if node.tracked_leaf {
                grads[idx] = Some(g);
            }
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if !n.tracked_leaf {
                    return None;
                }
                Some(grads[i].take().unwrap_or_else(|| vec![0.0; n.value.len()]))
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn apply_rule(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, p, n) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * p];
                    for i in 0..m {
                        for k in 0..p {
                            let brow = &bv.data()[k * n..(k + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            da[i * p + k] = dot(grow, brow);
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; p * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for k in 0..p {
                            let a_ik = av.data()[i * p + k];
                            if a_ik == 0.0 {
                                continue;
                            }
                            let dst = &mut db[k * n..(k + 1) * n];
                            axpy(a_ik, grow, dst);
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                // C = A·Bᵀ with A m×p, B n×p
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, p, n) = (av.rows(), av.cols(), bv.rows());
                if self.needs(*a) {
                    let mut da = vec![0.0; m * p];
                    for i in 0..m {
                        let dst = &mut da[i * p..(i + 1) * p];
                        for j in 0..n {
                            axpy(g[i * n + j], &bv.data()[j * p..(j + 1) * p], dst);
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; n * p];
                    for i in 0..m {
                        let arow = &av.data()[i * p..(i + 1) * p];
                        for j in 0..n {
                            axpy(g[i * n + j], arow, &mut db[j * p..(j + 1) * p]);
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (m, din, dout) = (xv.rows(), xv.cols(), wv.rows());
                if self.needs(*x) {
                    let mut dx = vec![0.0; m * din];
                    for i in 0..m {
                        let dst = &mut dx[i * din..(i + 1) * din];
                        for o in 0..dout {
                            axpy(g[i * dout + o], &wv.data()[o * din..(o + 1) * din], dst);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; dout * din];
                    for i in 0..m {
                        let xrow = &xv.data()[i * din..(i + 1) * din];
                        for o in 0..dout {
                            axpy(g[i * dout + o], xrow, &mut dw[o * din..(o + 1) * din]);
                        }
                    }
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0; dout];
                        for i in 0..m {
                            for o in 0..dout {
                                db[o] += g[i * dout + o];
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::Affine { x, scale } => {
                self.accumulate(grads, *x, g.iter().map(|v| v * scale).collect());
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let s: f64 = (0..*n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*n {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - s);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ExclusiveCumsum { x } => {
                let cols = node.value.cols();
                let mut dx = vec![0.0; g.len()];
                for (grow, drow) in g.chunks(cols).zip(dx.chunks_mut(cols)) {
                    let mut acc = 0.0;
                    for j in (0..cols).rev() {
                        drow[j] = acc;
                        acc += grow[j];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = node.value.cols();
                let gv = self.value(*gain).data();
                if self.needs(*gain) {
                    let mut dg = vec![0.0; cols];
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; cols];
                    for grow in g.chunks(cols) {
                        for j in 0..cols {
                            db[j] += grow[j];
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let nf = cols as f64;
                    for (r, ((grow, hrow), drow)) in g
                        .chunks(cols)
                        .zip(xhat.chunks(cols))
                        .zip(dx.chunks_mut(cols))
                        .enumerate()
                    {
                        let dh: Vec<f64> = (0..cols).map(|j| grow[j] * gv[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / nf;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for j in 0..cols {
                            drow[j] = rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                let dx = xv.iter().zip(g).map(|(&x, &g)| g * gelu_grad(x)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::ClampMin { x, lo } => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x >= *lo { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { logits, label, probs } => {
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                d[*label] -= g[0];
                self.accumulate(grads, *logits, d);
            }
            Op::GatherRows { table, rows } => {
                if self.needs(*table) {
                    let tv = self.value(*table);
                    let cols = tv.cols();
                    let mut dt = vec![0.0; tv.len()];
                    for (i, &r) in rows.iter().enumerate() {
                        let src = &g[i * cols..(i + 1) * cols];
                        let dst = &mut dt[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dst[j] += src[j];
                        }
                    }
                    self.accumulate(grads, *table, dt);
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (rows, cols) = (xv.rows(), xv.cols());
                let width = node.value.cols();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + width].copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let width = self.value(*p).cols();
                    if self.needs(*p) {
                        let mut dp = vec![0.0; rows * width];
                        for r in 0..rows {
                            dp[r * width..(r + 1) * width]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + width]);
                        }
                        self.accumulate(grads, *p, dp);
                    }
                    offset += width;
                }
            }
            Op::ReplaceRow { base, row, value } => {
                let cols = node.value.cols();
                if self.needs(*base) {
                    let mut db = g.to_vec();
                    db[row * cols..(row + 1) * cols].iter_mut().for_each(|v| *v = 0.0);
                    self.accumulate(grads, *base, db);
                }
                self.accumulate(grads, *value, g[row * cols..(row + 1) * cols].to_vec());
            }
            Op::SelectRow { x, row } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                dx[row * cols..(row + 1) * cols].copy_from_slice(g);
                self.accumulate(grads, *x, dx);
            }
            Op::SumLast { x } => {
                let cols = self.value(*x).cols();
                let dx = g.iter().flat_map(|&v| std::iter::repeat_n(v, cols)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::WeightedSum { items, weights } => {
                let w = self.value(*weights).data();
                for (i, item) in items.iter().enumerate() {
                    if self.needs(*item) {
                        self.accumulate(grads, *item, g.iter().map(|v| v * w[i]).collect());
                    }
                }
                if self.needs(*weights) {
                    let dw = items.iter().map(|item| dot(g, self.value(*item).data())).collect();
                    self.accumulate(grads, *weights, dw);
                }
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, g.to_vec());
            }
        }
    }
}

/// Gradients of a scalar loss with respect to every tracked leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a tracked leaf; `None` for untracked or intermediate values.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
