//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward computation together
//! with its value. [`Graph::backward`] walks the tape in reverse and
//! accumulates vector-Jacobian products into every node that requires a
//! gradient. Leaves created with [`Graph::constant`] never receive one, which
//! is how parameters are frozen for a pass: bind them as constants and the
//! backward sweep skips their products entirely.

use ndarray::{s, Array1, Array2, Axis, Zip};

use crate::mask;

pub type Tensor = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a . b^T`
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a + b` with `b` a `1 x n` row broadcast over every row of `a`.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Tensor,
        inv_std: Array1<f64>,
    },
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    Sum(Var),
    RowMeans(Var),
    Pick(Var, usize, usize),
    Mask(Var, Var),
    SigmaTransform(Var, f64, f64),
    Blend {
        x: Var,
        m: Var,
        b: Var,
        keep: Vec<bool>,
        invert: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

/// Recorded computation; see the module docs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if no path reaches it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient per parameter slot, summed over every leaf bound to that slot.
    pub fn param_grads(&self, num_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; num_params];
        for &(node, slot) in &self.params {
            if let Some(g) = &self.grads[node] {
                match &mut out[slot] {
                    Some(acc) => *acc += g,
                    empty => *empty = Some(g.clone()),
                }
            }
        }
        out
    }
}

fn row_of(v: &Tensor) -> Tensor {
    v.sum_axis(Axis(0)).insert_axis(Axis(0))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.dim(), (1, 1));
        t[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Trainable leaf bound to parameter slot `slot`.
    pub fn param(&mut self, value: Tensor, slot: usize) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(slot);
        v
    }

    /// Copy of `v` cut off from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulBt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1 x n row");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// Sum of several same-shaped nodes, left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut it = terms.iter().copied();
        let first = it.next().expect("add_all needs at least one term");
        it.fold(first, |acc, t| self.add(acc, t))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(mask::sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(mask::softplus);
        let rg = self.rg(a);
        self.push(value, Op::Softplus(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let z = row.sum();
            row /= z;
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (`1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut normed = xv.clone();
        let mut inv_std = Array1::zeros(xv.nrows());
        for (mut row, inv) in normed.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            *inv = 1.0 / (var + LN_EPS).sqrt();
            row *= *inv;
        }
        let value = &normed * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            rg,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let value = self.value(table).select(Axis(0), ids);
        let rg = self.rg(table);
        self.push(value, Op::Gather(table, ids.to_vec()), rg)
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// `r x 1` column of row means.
    pub fn row_means(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(1))
            .expect("row_means of an empty matrix")
            .insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(value, Op::RowMeans(a), rg)
    }

    /// Entry `(r, c)` as a `1 x 1` node.
    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a)[[r, c]]);
        let rg = self.rg(a);
        self.push(value, Op::Pick(a, r, c), rg)
    }

    /// Row-wise smooth mask over default token positions; see [`mask::compute_mask`].
    ///
    /// Panics if any width is non-positive; callers route widths through
    /// [`Graph::sigma_transform`].
    pub fn mask(&mut self, w: Var, sigma: Var) -> Var {
        let (wv, sv) = (self.value(w), self.value(sigma));
        assert_eq!(wv.dim(), sv.dim(), "mask: w and sigma shapes differ");
        let positions = mask::default_positions(wv.ncols());
        let mut value = Array2::zeros(wv.dim());
        for c in (0..wv.nrows()).filter(|_| wv.ncols() > 0) {
            let row = mask::compute_mask(&wv.row(c).to_vec(), &sv.row(c).to_vec(), &positions)
                .expect("mask widths must be positive");
            value.row_mut(c).assign(&Array1::from(row));
        }
        let rg = self.rg(w) || self.rg(sigma);
        self.push(value, Op::Mask(w, sigma), rg)
    }

    pub fn sigma_transform(&mut self, raw: Var, min: f64, max: f64) -> Var {
        let value = self
            .value(raw)
            .mapv(|r| mask::sigma_transform(r, min, max));
        let rg = self.rg(raw);
        self.push(value, Op::SigmaTransform(raw, min, max), rg)
    }

    /// Blend rows of `x` toward the `1 x dim` background `b` with the
    /// `1 x rows` mask `m`; `invert` blends with `1 - m` instead. Rows flagged
    /// in `keep` pass through untouched.
    pub fn blend(&mut self, x: Var, m: Var, b: Var, keep: &[bool], invert: bool) -> Var {
        let (xv, mv, bv) = (self.value(x), self.value(m), self.value(b));
        assert_eq!(mv.dim(), (1, xv.nrows()), "blend: one mask value per row");
        assert_eq!(bv.dim(), (1, xv.ncols()), "blend: background width");
        assert_eq!(keep.len(), xv.nrows(), "blend: one keep flag per row");
        let mut value = xv.clone();
        for (j, mut row) in value.rows_mut().into_iter().enumerate() {
            if keep[j] {
                continue;
            }
            let mj = if invert { 1.0 - mv[[0, j]] } else { mv[[0, j]] };
            Zip::from(&mut row)
                .and(bv.row(0))
                .for_each(|v, &bg| *v = mj * *v + (1.0 - mj) * bg);
        }
        let rg = self.rg(x) || self.rg(m) || self.rg(b);
        self.push(
            value,
            Op::Blend {
                x,
                m,
                b,
                keep: keep.to_vec(),
                invert,
            },
            rg,
        )
    }

    /// Reverse sweep from the `1 x 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(Array2::ones(self.value(loss).dim()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Gradients { grads, params }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.dot(self.value(*b)));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*row) {
                    self.acc(grads, *row, row_of(g));
                }
            }
            Op::Scale(a, k) => self.acc(grads, *a, g * *k),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(|x| {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
                });
                d *= g;
                self.acc(grads, *a, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = node.value.mapv(|y| y * (1.0 - y)) * g;
                self.acc(grads, *a, d);
            }
            Op::Softplus(a) => {
                let d = self.value(*a).mapv(mask::sigmoid) * g;
                self.acc(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    Zip::from(&mut drow).and(yrow).for_each(|dv, &yv| *dv -= yv * dot);
                }
                self.acc(grads, *a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = g.clone();
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(node.value.rows()) {
                    let total = drow.sum();
                    Zip::from(&mut drow)
                        .and(yrow)
                        .for_each(|dv, &ly| *dv -= ly.exp() * total);
                }
                self.acc(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                if self.rg(*gamma) {
                    self.acc(grads, *gamma, row_of(&(g * normed)));
                }
                if self.rg(*beta) {
                    self.acc(grads, *beta, row_of(g));
                }
                if self.rg(*x) {
                    let dxhat = g * self.value(*gamma);
                    let n = dxhat.ncols() as f64;
                    let mut dx = Array2::zeros(dxhat.dim());
                    for r in 0..dxhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = normed.row(r);
                        let s1 = dh.sum();
                        let s2 = dh.dot(&xh);
                        let inv = inv_std[r];
                        Zip::from(dx.row_mut(r))
                            .and(dh)
                            .and(xh)
                            .for_each(|o, &d, &h| *o = inv / n * (n * d - s1 - h * s2));
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.t().to_owned()),
            Op::SliceRows(a, start) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.acc(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.rg(p) {
                        self.acc(grads, p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::Gather(table, ids) => {
                let mut d = Array2::zeros(self.value(*table).dim());
                for (r, &id) in ids.iter().enumerate() {
                    let mut row = d.row_mut(id);
                    row += &g.row(r);
                }
                self.acc(grads, *table, d);
            }
            Op::Sum(a) => {
                let d = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                self.acc(grads, *a, d);
            }
            Op::RowMeans(a) => {
                let (r, c) = self.value(*a).dim();
                let d = Array2::from_shape_fn((r, c), |(i, _)| g[[i, 0]] / c as f64);
                self.acc(grads, *a, d);
            }
            Op::Pick(a, r, c) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d[[*r, *c]] = g[[0, 0]];
                self.acc(grads, *a, d);
            }
            Op::Mask(w, sigma) => {
                let (wv, sv) = (self.value(*w), self.value(*sigma));
                let positions = mask::default_positions(wv.ncols());
                let mut gw = Array2::zeros(wv.dim());
                let mut gs = Array2::zeros(wv.dim());
                for c in 0..wv.nrows() {
                    let (dw, ds) = mask::compute_mask_backward(
                        &wv.row(c).to_vec(),
                        &sv.row(c).to_vec(),
                        &positions,
                        &node.value.row(c).to_vec(),
                        &g.row(c).to_vec(),
                    );
                    gw.row_mut(c).assign(&Array1::from(dw));
                    gs.row_mut(c).assign(&Array1::from(ds));
                }
                self.acc(grads, *w, gw);
                self.acc(grads, *sigma, gs);
            }
            Op::SigmaTransform(raw, min, max) => {
                let d = self
                    .value(*raw)
                    .mapv(|r| mask::sigma_transform_grad(r, *min, *max))
                    * g;
                self.acc(grads, *raw, d);
            }
            Op::Blend {
                x,
                m,
                b,
                keep,
                invert,
            } => {
                let (xv, mv, bv) = (self.value(*x), self.value(*m), self.value(*b));
                let sign = if *invert { -1.0 } else { 1.0 };
                let coef = |j: usize| {
                    if *invert {
                        1.0 - mv[[0, j]]
                    } else {
                        mv[[0, j]]
                    }
                };
                if self.rg(*m) {
                    let mut dm = Array2::zeros(mv.dim());
                    for (j, _) in keep.iter().enumerate().take(xv.nrows()).filter(|(_, &k)| !k) {
                        let diff: f64 = g
                            .row(j)
                            .iter()
                            .zip(xv.row(j))
                            .zip(bv.row(0))
                            .map(|((&gv, &xv), &bg)| gv * (xv - bg))
                            .sum();
                        dm[[0, j]] = sign * diff;
                    }
                    self.acc(grads, *m, dm);
                }
                if self.rg(*x) {
                    let mut dx = g.clone();
                    for (j, mut row) in dx.rows_mut().into_iter().enumerate() {
                        if !keep[j] {
                            row *= coef(j);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.rg(*b) {
                    let mut db = Array2::zeros(bv.dim());
                    for (j, _) in keep.iter().enumerate().take(xv.nrows()).filter(|(_, &k)| !k) {
                        let k = 1.0 - coef(j);
                        let mut row = db.row_mut(0);
                        row.scaled_add(k, &g.row(j));
                    }
                    self.acc(grads, *b, db);
                }
            }
        }
    }
}
