//! Minimal tape-based reverse-mode autodiff over `Array2<f64>`.
//!
//! Every forward pass builds a fresh tape; `backward` walks it in reverse
//! and accumulates parameter gradients into a dense per-parameter table.
//! Subtrees with no trainable leaves are skipped entirely, which is what
//! makes frozen-base training cheap.

use ndarray::{Array2, Axis};

/// Index of a parameter tensor inside the model's registry.
pub type ParamId = usize;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf(Option<ParamId>),
    /// y = a . b
    MatMul(usize, usize),
    /// y = a . b^T
    MatMulNT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    /// broadcast-add a (1 x d) row to every row of x
    AddRow(usize, usize),
    /// broadcast a (1 x d) row to n rows
    BroadcastRow(usize),
    MulConst(usize, f64),
    /// multiply by a learnable (1 x 1) scalar node
    MulScalar(usize, usize),
    Tanh(usize),
    SoftmaxRows(usize),
    /// y = gain * (x - mu) / sigma + bias, per row
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Square(usize),
    /// elementwise natural log
    Ln(usize),
    /// sum of all elements -> (1 x 1)
    SumAll(usize),
    /// column sums -> (1 x d)
    SumRows(usize),
    /// stack inputs vertically
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize, usize),
    /// zero rows before/after x
    PadRows { x: usize, before: usize },
    /// select rows of x by index (embedding lookup)
    GatherRows(usize, Vec<usize>),
}

struct Node {
    value: Array2<f64>,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = &self.nodes[v.0].value;
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, false, Op::Leaf(None))
    }

    /// Trainable parameter leaf. `trainable` is false for frozen groups.
    pub fn param(&mut self, id: ParamId, value: Array2<f64>, trainable: bool) -> Var {
        self.push(value, trainable, Op::Leaf(if trainable { Some(id) } else { None }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::MatMul(a.0, b.0))
    }

    /// a . b^T
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::MatMulNT(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Sub(a.0, b.0))
    }

    /// x + row (row broadcast over all rows of x).
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let v = &self.nodes[x.0].value + &self.nodes[row.0].value;
        let rg = self.rg(x) || self.rg(row);
        self.push(v, rg, Op::AddRow(x.0, row.0))
    }

    pub fn broadcast_row(&mut self, row: Var, n: usize) -> Var {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let d = self.nodes[row.0].value.ncols();
        let mut v = Array2::zeros((n, d));
        for mut r in v.rows_mut() {
            r.assign(&self.nodes[row.0].value.row(0));
        }
        let rg = self.rg(row);
        self.push(v, rg, Op::BroadcastRow(row.0))
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        let v = &self.nodes[x.0].value * c;
        let rg = self.rg(x);
        self.push(v, rg, Op::MulConst(x.0, c))
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let v = &self.nodes[x.0].value * c;
        let rg = self.rg(x) || self.rg(s);
        self.push(v, rg, Op::MulScalar(x.0, s.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(f64::tanh);
        let rg = self.rg(x);
        self.push(v, rg, Op::Tanh(x.0))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.nodes[x.0].value.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|e| (e - m).exp());
            let s = row.sum();
            row.mapv_inplace(|e| e / s);
        }
        let rg = self.rg(x);
        self.push(v, rg, Op::SoftmaxRows(x.0))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let d = xv.ncols() as f64;
        let mut v = xv.clone();
        for mut row in v.rows_mut() {
            let mu = row.sum() / d;
            let var = row.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / d;
            let sigma = (var + eps).sqrt();
            row.mapv_inplace(|e| (e - mu) / sigma);
        }
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let v = &v * g + b;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(v, rg, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, eps })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| e * e);
        let rg = self.rg(x);
        self.push(v, rg, Op::Square(x.0))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(f64::ln);
        let rg = self.rg(x);
        self.push(v, rg, Op::Ln(x.0))
    }

    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.sum_axis(Axis(0)).insert_axis(Axis(0));
        let rg = self.rg(x);
        self.push(v, rg, Op::SumRows(x.0))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let rg = self.rg(x);
        self.push(Array2::from_elem((1, 1), s), rg, Op::SumAll(x.0))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.nodes[parts[0].0].value.ncols();
        let rows: usize = parts.iter().map(|p| self.nodes[p.0].value.nrows()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            v.slice_mut(ndarray::s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, rg, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[x.0].value.slice(ndarray::s![start..end, ..]).to_owned();
        let rg = self.rg(x);
        self.push(v, rg, Op::SliceRows(x.0, start, end))
    }

    pub fn pad_rows(&mut self, x: Var, before: usize, total: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut v = Array2::zeros((total, xv.ncols()));
        v.slice_mut(ndarray::s![before..before + xv.nrows(), ..]).assign(xv);
        let rg = self.rg(x);
        self.push(v, rg, Op::PadRows { x: x.0, before })
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let tv = &self.nodes[table.0].value;
        let mut v = Array2::zeros((indices.len(), tv.ncols()));
        for (i, &ix) in indices.iter().enumerate() {
            v.row_mut(i).assign(&tv.row(ix));
        }
        let rg = self.rg(table);
        self.push(v, rg, Op::GatherRows(table.0, indices.to_vec()))
    }

    /// Mean of squared elements of (a - b), as a (1,1) node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let d = self.sub(a, b);
        let sq = self.square(d);
        let s = self.sum_all(sq);
        self.mul_const(s, 1.0 / n)
    }

    /// Reverse pass from the scalar node `loss`; accumulates into `grads`
    /// (indexed by `ParamId`, lazily allocated).
    pub fn backward(&self, loss: Var, grads: &mut [Option<Array2<f64>>]) {
        let n = self.nodes.len();
        let mut adj: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf(Some(pid)) => match &mut grads[*pid] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                },
                Op::Leaf(None) => {}
                Op::MatMul(a, b) => {
                    if self.nodes[*a].requires_grad {
                        let ga = g.dot(&self.nodes[*b].value.t());
                        accumulate(&mut adj[*a], ga);
                    }
                    if self.nodes[*b].requires_grad {
                        let gb = self.nodes[*a].value.t().dot(&g);
                        accumulate(&mut adj[*b], gb);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.nodes[*a].requires_grad {
                        let ga = g.dot(&self.nodes[*b].value);
                        accumulate(&mut adj[*a], ga);
                    }
                    if self.nodes[*b].requires_grad {
                        let gb = g.t().dot(&self.nodes[*a].value);
                        accumulate(&mut adj[*b], gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[*a].requires_grad {
                        accumulate(&mut adj[*a], g.clone());
                    }
                    if self.nodes[*b].requires_grad {
                        accumulate(&mut adj[*b], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[*a].requires_grad {
                        accumulate(&mut adj[*a], g.clone());
                    }
                    if self.nodes[*b].requires_grad {
                        accumulate(&mut adj[*b], -g);
                    }
                }
                Op::AddRow(x, row) => {
                    if self.nodes[*x].requires_grad {
                        accumulate(&mut adj[*x], g.clone());
                    }
                    if self.nodes[*row].requires_grad {
                        let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut adj[*row], summed);
                    }
                }
                Op::BroadcastRow(row) => {
                    if self.nodes[*row].requires_grad {
                        let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut adj[*row], summed);
                    }
                }
                Op::MulConst(x, c) => {
                    if self.nodes[*x].requires_grad {
                        accumulate(&mut adj[*x], &g * *c);
                    }
                }
                Op::MulScalar(x, s) => {
                    if self.nodes[*x].requires_grad {
                        let c = self.nodes[*s].value[[0, 0]];
                        accumulate(&mut adj[*x], &g * c);
                    }
                    if self.nodes[*s].requires_grad {
                        let gs = (&g * &self.nodes[*x].value).sum();
                        accumulate(&mut adj[*s], Array2::from_elem((1, 1), gs));
                    }
                }
                Op::Tanh(x) => {
                    if self.nodes[*x].requires_grad {
                        let y = &self.nodes[i].value;
                        accumulate(&mut adj[*x], &g * &y.mapv(|e| 1.0 - e * e));
                    }
                }
                Op::SoftmaxRows(x) => {
                    if self.nodes[*x].requires_grad {
                        let y = &self.nodes[i].value;
                        let mut gx = Array2::zeros(y.dim());
                        for r in 0..y.nrows() {
                            let yr = y.row(r);
                            let gr = g.row(r);
                            let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                            for c in 0..y.ncols() {
                                gx[[r, c]] = yr[c] * (gr[c] - dot);
                            }
                        }
                        accumulate(&mut adj[*x], gx);
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let xv = &self.nodes[*x].value;
                    let gv = &self.nodes[*gain].value;
                    let d = xv.ncols() as f64;
                    // recompute normalized activations
                    let mut xhat = xv.clone();
                    let mut sigmas = Vec::with_capacity(xv.nrows());
                    for mut row in xhat.rows_mut() {
                        let mu = row.sum() / d;
                        let var = row.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / d;
                        let sigma = (var + eps).sqrt();
                        sigmas.push(sigma);
                        row.mapv_inplace(|e| (e - mu) / sigma);
                    }
                    if self.nodes[*gain].requires_grad {
                        let gg = (&g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut adj[*gain], gg);
                    }
                    if self.nodes[*bias].requires_grad {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut adj[*bias], gb);
                    }
                    if self.nodes[*x].requires_grad {
                        let mut gx = Array2::zeros(xv.dim());
                        for r in 0..xv.nrows() {
                            let sigma = sigmas[r];
                            // dL/dxhat for this row
                            let dxh: Vec<f64> = (0..xv.ncols())
                                .map(|c| g[[r, c]] * gv[[0, c]])
                                .collect();
                            let mean_dxh = dxh.iter().sum::<f64>() / d;
                            let mean_dxh_xhat = dxh
                                .iter()
                                .enumerate()
                                .map(|(c, v)| v * xhat[[r, c]])
                                .sum::<f64>()
                                / d;
                            for c in 0..xv.ncols() {
                                gx[[r, c]] = (dxh[c] - mean_dxh - xhat[[r, c]] * mean_dxh_xhat)
                                    / sigma;
                            }
                        }
                        accumulate(&mut adj[*x], gx);
                    }
                }
                Op::Square(x) => {
                    if self.nodes[*x].requires_grad {
                        accumulate(&mut adj[*x], &g * &(&self.nodes[*x].value * 2.0));
                    }
                }
                Op::Ln(x) => {
                    if self.nodes[*x].requires_grad {
                        accumulate(&mut adj[*x], &g / &self.nodes[*x].value);
                    }
                }
                Op::SumRows(x) => {
                    if self.nodes[*x].requires_grad {
                        let mut gx = Array2::zeros(self.nodes[*x].value.dim());
                        for mut row in gx.rows_mut() {
                            row.assign(&g.row(0));
                        }
                        accumulate(&mut adj[*x], gx);
                    }
                }
                Op::SumAll(x) => {
                    if self.nodes[*x].requires_grad {
                        let gv = g[[0, 0]];
                        accumulate(
                            &mut adj[*x],
                            Array2::from_elem(self.nodes[*x].value.dim(), gv),
                        );
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let nr = self.nodes[*p].value.nrows();
                        if self.nodes[*p].requires_grad {
                            let gp = g.slice(ndarray::s![at..at + nr, ..]).to_owned();
                            accumulate(&mut adj[*p], gp);
                        }
                        at += nr;
                    }
                }
                Op::SliceRows(x, start, end) => {
                    if self.nodes[*x].requires_grad {
                        let mut gx = Array2::zeros(self.nodes[*x].value.dim());
                        gx.slice_mut(ndarray::s![*start..*end, ..]).assign(&g);
                        accumulate(&mut adj[*x], gx);
                    }
                }
                Op::PadRows { x, before, .. } => {
                    if self.nodes[*x].requires_grad {
                        let nr = self.nodes[*x].value.nrows();
                        let gx = g.slice(ndarray::s![*before..*before + nr, ..]).to_owned();
                        accumulate(&mut adj[*x], gx);
                    }
                }
                Op::GatherRows(table, indices) => {
                    if self.nodes[*table].requires_grad {
                        let mut gt = Array2::zeros(self.nodes[*table].value.dim());
                        for (r, &ix) in indices.iter().enumerate() {
                            let mut dst = gt.row_mut(ix);
                            dst += &g.row(r);
                        }
                        accumulate(&mut adj[*table], gt);
                    }
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
