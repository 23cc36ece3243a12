//! A small reverse-mode tape over row-major matrices.
//!
//! Every tensor in the toy networks is a 2-D matrix whose rows are tokens
//! (pixels, condition tokens, pooled features) and whose columns are
//! channels. Spatial structure is expressed through [`RowMap`] (pooling,
//! upsampling, broadcasting), [`Grid`] (3x3 neighbourhood gathering) and
//! [`AttnPlan`] (which rows attend to which).

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use ndarray::{s, Array2, Array3, ArrayView2, Axis, Slice, Zip};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

pub type Mat<T> = Array2<T>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sparse linear map acting on rows: `out[i] = sum_j w_ij * x[src_ij]`.
#[derive(Debug, Clone)]
pub struct RowMap<T> {
    rows_in: usize,
    offsets: Vec<usize>,
    src: Vec<usize>,
    weight: Vec<T>,
}

impl<T: Scalar> RowMap<T> {
    pub fn from_rows(rows_in: usize, rows: Vec<Vec<(usize, T)>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut src = Vec::new();
        let mut weight = Vec::new();
        offsets.push(0);
        for row in rows {
            for (s, w) in row {
                debug_assert!(s < rows_in);
                src.push(s);
                weight.push(w);
            }
            offsets.push(src.len());
        }
        Self {
            rows_in,
            offsets,
            src,
            weight,
        }
    }

    pub fn rows_out(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn rows_in(&self) -> usize {
        self.rows_in
    }

    /// 2x2 average pooling of `frames` stacked `height x width` grids.
    pub fn avg_pool2(frames: usize, height: usize, width: usize) -> Self {
        let (oh, ow) = (height / 2, width / 2);
        let quarter = T::lit(0.25);
        let mut rows = Vec::with_capacity(frames * oh * ow);
        for f in 0..frames {
            for y in 0..oh {
                for x in 0..ow {
                    let base = f * height * width;
                    rows.push(vec![
                        (base + (2 * y) * width + 2 * x, quarter),
                        (base + (2 * y) * width + 2 * x + 1, quarter),
                        (base + (2 * y + 1) * width + 2 * x, quarter),
                        (base + (2 * y + 1) * width + 2 * x + 1, quarter),
                    ]);
                }
            }
        }
        Self::from_rows(frames * height * width, rows)
    }

    /// Nearest-neighbour 2x upsampling; inverse layout of [`RowMap::avg_pool2`].
    pub fn upsample2(frames: usize, height: usize, width: usize) -> Self {
        let (oh, ow) = (height * 2, width * 2);
        let mut rows = Vec::with_capacity(frames * oh * ow);
        for f in 0..frames {
            for y in 0..oh {
                for x in 0..ow {
                    rows.push(vec![(f * height * width + (y / 2) * width + x / 2, T::one())]);
                }
            }
        }
        Self::from_rows(frames * height * width, rows)
    }

    /// Repeats each input row `repeat` times consecutively.
    pub fn repeat_rows(rows_in: usize, repeat: usize) -> Self {
        let rows = (0..rows_in * repeat).map(|i| vec![(i / repeat, T::one())]).collect();
        Self::from_rows(rows_in, rows)
    }

    /// Mean over consecutive blocks of `block` rows.
    pub fn block_mean(rows_out: usize, block: usize) -> Self {
        let w = T::one() / T::lit(block as f64);
        let rows = (0..rows_out)
            .map(|i| (0..block).map(|j| (i * block + j, w)).collect())
            .collect();
        Self::from_rows(rows_out * block, rows)
    }

    fn apply(&self, x: &Mat<T>) -> Mat<T> {
        let mut out = Mat::zeros((self.rows_out(), x.ncols()));
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            for e in self.offsets[i]..self.offsets[i + 1] {
                let w = self.weight[e];
                row.scaled_add(w, &x.row(self.src[e]));
            }
        }
        out
    }

    fn apply_transpose(&self, g: &Mat<T>) -> Mat<T> {
        let mut out = Mat::zeros((self.rows_in, g.ncols()));
        for i in 0..self.rows_out() {
            let grow = g.row(i);
            for e in self.offsets[i]..self.offsets[i + 1] {
                out.row_mut(self.src[e]).scaled_add(self.weight[e], &grow);
            }
        }
        out
    }
}

/// Layout of `frames` stacked `height x width` pixel grids, frame-major,
/// then row-major within a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width }
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn rows(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn halved(&self) -> Self {
        Self::new(self.frames, self.height / 2, self.width / 2)
    }

    /// Row index of the neighbour at offset `(dy, dx)`, or `None` when it
    /// falls outside the frame.
    fn neighbour(&self, row: usize, dy: isize, dx: isize) -> Option<usize> {
        let hw = self.positions();
        let f = row / hw;
        let p = row % hw;
        let y = (p / self.width) as isize + dy;
        let x = (p % self.width) as isize + dx;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some(f * hw + y as usize * self.width + x as usize)
        }
    }
}

/// An arithmetic progression of row indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rows {
    pub start: usize,
    pub step: usize,
    pub len: usize,
}

impl Rows {
    pub fn contiguous(start: usize, len: usize) -> Self {
        Self { start, step: 1, len }
    }

    pub fn strided(start: usize, step: usize, len: usize) -> Self {
        Self { start, step, len }
    }

    fn slice(&self) -> Slice {
        let end = self.start + self.step * (self.len - 1) + 1;
        Slice::new(self.start as isize, Some(end as isize), self.step as isize)
    }
}

/// One softmax attention problem: the query rows attend over the key rows.
#[derive(Debug, Clone)]
pub struct AttnGroup {
    pub queries: Rows,
    pub keys: Rows,
}

/// Multi-head attention over independent groups of rows. Probabilities
/// are stored per group as `(heads, queries, keys)`.
#[derive(Debug, Clone)]
pub struct AttnPlan {
    pub heads: usize,
    pub groups: Vec<AttnGroup>,
}

/// Callback invoked between the softmax and the value product. It may
/// overwrite any group's probabilities in place and returns, per group,
/// whether that group was replaced. Replaced probabilities are treated as
/// constants by the backward pass.
pub type ProbEditor<'a, T> = dyn FnMut(&mut [Array3<T>]) -> Result<Vec<bool>> + 'a;

const MASS_EPS: f64 = 1e-6;

/// Localization loss of column `c` and its derivative with respect to the
/// head-averaged probabilities of every row: the cross-entropy of the
/// column's normalized spatial distribution, smoothed by `MASS_EPS` of its
/// total, against the uniform distribution over flagged rows, plus the
/// column's mean over unflagged rows.
fn column_loss<T: Scalar>(p: &Array3<T>, inside: &[bool], c: usize) -> (f64, Vec<f64>) {
    let heads = p.dim().0;
    let rows = inside.len() as f64;
    let pbar: Vec<f64> = (0..inside.len())
        .map(|r| (0..heads).map(|h| p[[h, r, c]].as_f64()).sum::<f64>() / heads as f64)
        .collect();
    let n_in = inside.iter().filter(|&&b| b).count() as f64;
    let n_out = rows - n_in;
    let total = pbar.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    let smooth = |v: f64| v + MASS_EPS * total / rows;
    let mut value = (total * (1.0 + MASS_EPS)).ln();
    let mut spread = 0.0;
    for (r, &is_in) in inside.iter().enumerate() {
        if is_in {
            value -= smooth(pbar[r]).ln() / n_in;
            spread += 1.0 / smooth(pbar[r]);
        }
    }
    let base = 1.0 / total - MASS_EPS * spread / (rows * n_in);
    let mut grad = vec![base; inside.len()];
    let outside: f64 = pbar.iter().zip(inside).filter(|(_, &b)| !b).map(|(v, _)| v).sum();
    for (r, &is_in) in inside.iter().enumerate() {
        if is_in {
            grad[r] -= 1.0 / (n_in * smooth(pbar[r]));
        } else {
            grad[r] += 1.0 / n_out;
        }
    }
    if n_out > 0.0 {
        value += outside / n_out;
    }
    (value, grad)
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat<T>,
        rstd: Vec<T>,
    },
    RowMap(Var, Rc<RowMap<T>>),
    Im2Col(Var, Grid),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        plan: Rc<AttnPlan>,
        probs: Vec<Array3<T>>,
        frozen: Vec<bool>,
    },
    AttnMass {
        q: Var,
        k: Var,
        plan: Rc<AttnPlan>,
        columns: Vec<usize>,
        inside: Vec<Vec<bool>>,
        probs: Vec<Array3<T>>,
        terms: usize,
    },
    Mse {
        a: Var,
        target: Mat<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Mat<T>,
    },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to the parameters it touched.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    pub by_param: BTreeMap<ParamId, Mat<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Mat<T>> {
        self.by_param.get(&id)
    }

    pub fn global_norm(&self) -> T {
        self.by_param
            .values()
            .map(|g| g.iter().map(|&x| x * x).sum::<T>())
            .sum::<T>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for g in self.by_param.values_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }

    /// Adds `other * s` into `self`.
    pub fn accumulate(&mut self, other: &Gradients<T>, s: T) {
        for (id, g) in &other.by_param {
            match self.by_param.get_mut(id) {
                Some(mine) => mine.scaled_add(s, g),
                None => {
                    self.by_param.insert(*id, g.mapv(|x| x * s));
                }
            }
        }
    }
}

/// Computation tape. Build a forward pass with the op methods, then call
/// [`Graph::backward`] on a `1x1` loss node.
pub struct Graph<'p, T> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    grad: bool,
}

fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// `grad = false` builds a forward-only tape: parameters are still read
    /// from `store` but nothing is retained for a backward pass.
    pub fn new(store: &'p ParamStore<T>, grad: bool) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            param_vars: HashMap::new(),
            grad,
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> Var {
        let needs_grad = self.grad && needs_grad;
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a + bias` with `bias` a single row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let value = self.value(a) + &self.value(bias).row(0);
        let ng = self.ng(a) || self.ng(bias);
        self.push(value, Op::AddRow(a, bias), ng)
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let w = self.param(w);
        let y = self.matmul(x, w);
        match b {
            Some(b) => {
                let b = self.param(b);
                self.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).mapv(|x| x * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(silu);
        let ng = self.ng(a);
        self.push(value, Op::Silu(a), ng)
    }

    /// Per-row layer normalisation with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Var {
        let gamma = self.param(gamma);
        let beta = self.param(beta);
        let xv = self.value(x);
        let d = T::lit(xv.ncols() as f64);
        let eps = T::lit(1e-5);
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.axis_iter_mut(Axis(0)) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            let r = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * r);
            rstd.push(r);
        }
        let g = self.value(gamma).row(0).to_owned();
        let b = self.value(beta).row(0).to_owned();
        let value = &xhat * &g + &b;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: if ng && self.grad { xhat } else { Mat::zeros((0, 0)) },
            rstd,
        };
        self.push(value, op, ng)
    }

    pub fn row_map(&mut self, x: Var, map: Rc<RowMap<T>>) -> Var {
        assert_eq!(
            map.rows_in(),
            self.value(x).nrows(),
            "row map expects {} rows",
            map.rows_in()
        );
        let value = map.apply(self.value(x));
        let ng = self.ng(x);
        self.push(value, Op::RowMap(x, map), ng)
    }

    /// Gathers each row's 3x3 neighbourhood (zero padded) into `9 * C`
    /// columns, ordered `(dy, dx)` row-major then channel.
    pub fn im2col3(&mut self, x: Var, grid: Grid) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), grid.rows());
        let c = xv.ncols();
        let mut out = Mat::zeros((grid.rows(), 9 * c));
        for r in 0..grid.rows() {
            let mut j = 0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(n) = grid.neighbour(r, dy, dx) {
                        out.slice_mut(s![r, j * c..(j + 1) * c]).assign(&xv.row(n));
                    }
                    j += 1;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Im2Col(x, grid), ng)
    }

    /// 3x3 same-padded convolution: `im2col(x) W + b`.
    pub fn conv3(&mut self, x: Var, grid: Grid, w: ParamId, b: ParamId) -> Var {
        let cols = self.im2col3(x, grid);
        self.linear(cols, w, Some(b))
    }

    /// Row-major reinterpretation with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), rows * cols);
        let flat: Vec<T> = av.iter().copied().collect();
        let value = Mat::from_shape_vec((rows, cols), flat).expect("reshape");
        let ng = self.ng(a);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts match");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    /// Multi-head scaled dot-product attention. `editor` sees the softmax
    /// probabilities of every group before the value product.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        plan: Rc<AttnPlan>,
        editor: Option<&mut ProbEditor<'_, T>>,
    ) -> Result<Var> {
        let (qv, vv) = (self.value(q), self.value(v));
        let heads = plan.heads;
        let dv = vv.ncols() / heads;
        if vv.ncols() % heads != 0 {
            return Err(Error::Shape(format!(
                "attention value width {} with {heads} heads",
                vv.ncols()
            )));
        }
        let mut probs = self.attention_probs(q, k, &plan)?;
        let frozen = match editor {
            Some(edit) => {
                let frozen = edit(&mut probs)?;
                if frozen.len() != probs.len() {
                    return Err(Error::Shape("editor returned wrong group count".into()));
                }
                frozen
            }
            None => vec![false; probs.len()],
        };
        let mut out = Mat::zeros((qv.nrows(), vv.ncols()));
        for (g, p) in plan.groups.iter().zip(&probs) {
            let vg = vv.slice_axis(Axis(0), g.keys.slice());
            for h in 0..heads {
                let vh = vg.slice(s![.., h * dv..(h + 1) * dv]);
                let o = p.slice(s![h, .., ..]).dot(&vh);
                let mut dst = out.slice_axis_mut(Axis(0), g.queries.slice());
                dst.slice_mut(s![.., h * dv..(h + 1) * dv]).assign(&o);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let keep = ng && self.grad;
        let op = Op::Attention {
            q,
            k,
            v,
            plan,
            probs: if keep { probs } else { Vec::new() },
            frozen,
        };
        Ok(self.push(out, op, ng))
    }

    fn attention_probs(&self, q: Var, k: Var, plan: &AttnPlan) -> Result<Vec<Array3<T>>> {
        let (qv, kv) = (self.value(q), self.value(k));
        let heads = plan.heads;
        if qv.ncols() != kv.ncols() || qv.ncols() % heads != 0 {
            return Err(Error::Shape(format!(
                "attention widths q={} k={} heads={heads}",
                qv.ncols(),
                kv.ncols()
            )));
        }
        let dqk = qv.ncols() / heads;
        let scale = T::one() / T::lit(dqk as f64).sqrt();
        let mut probs = Vec::with_capacity(plan.groups.len());
        for g in &plan.groups {
            let qg = qv.slice_axis(Axis(0), g.queries.slice());
            let kg = kv.slice_axis(Axis(0), g.keys.slice());
            let mut p = Array3::zeros((heads, g.queries.len, g.keys.len));
            for h in 0..heads {
                let qh = qg.slice(s![.., h * dqk..(h + 1) * dqk]);
                let kh = kg.slice(s![.., h * dqk..(h + 1) * dqk]);
                let mut scores = qh.dot(&kh.t());
                for mut row in scores.axis_iter_mut(Axis(0)) {
                    let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
                    row.mapv_inplace(|x| ((x - m) * scale).exp());
                    let z = row.sum();
                    row.mapv_inplace(|x| x / z);
                }
                p.slice_mut(s![h, .., ..]).assign(&scores);
            }
            probs.push(p);
        }
        Ok(probs)
    }

    /// Mean over groups and `columns` of the localization loss of each
    /// column against the rows flagged in `inside[group]`: the
    /// cross-entropy of the column's head-averaged spatial distribution
    /// against the uniform distribution over flagged rows, plus its mean
    /// over unflagged rows. Groups without flagged rows are skipped.
    /// Returns a `1x1` node.
    pub fn attention_mass_loss(
        &mut self,
        q: Var,
        k: Var,
        plan: Rc<AttnPlan>,
        columns: &[usize],
        inside: Vec<Vec<bool>>,
    ) -> Result<Var> {
        if inside.len() != plan.groups.len() {
            return Err(Error::Shape(format!(
                "{} inside sets for {} attention groups",
                inside.len(),
                plan.groups.len()
            )));
        }
        for (g, m) in plan.groups.iter().zip(&inside) {
            if m.len() != g.queries.len {
                return Err(Error::Shape(format!(
                    "inside set of {} rows for {} queries",
                    m.len(),
                    g.queries.len
                )));
            }
            if let Some(&c) = columns.iter().find(|&&c| c >= g.keys.len) {
                return Err(Error::Shape(format!("column {c} outside {} keys", g.keys.len)));
            }
        }
        let probs = self.attention_probs(q, k, &plan)?;
        let mut total = 0.0;
        let mut terms = 0usize;
        for (p, m) in probs.iter().zip(&inside) {
            if !m.iter().any(|&b| b) {
                continue;
            }
            for &c in columns {
                total += column_loss(p, m, c).0;
                terms += 1;
            }
        }
        let value = if terms == 0 { 0.0 } else { total / terms as f64 };
        let ng = self.ng(q) || self.ng(k);
        let keep = ng && self.grad && terms > 0;
        let op = Op::AttnMass {
            q,
            k,
            plan,
            columns: columns.to_vec(),
            inside,
            probs: if keep { probs } else { Vec::new() },
            terms,
        };
        Ok(self.push(Mat::from_elem((1, 1), T::lit(value)), op, keep))
    }

    /// Mean squared error against a constant target; returns a `1x1` node.
    pub fn mse(&mut self, a: Var, target: Mat<T>) -> Var {
        let av = self.value(a);
        assert_eq!(av.dim(), target.dim());
        let n = T::lit(av.len() as f64);
        let sse: T = Zip::from(av)
            .and(&target)
            .fold(T::zero(), |acc, &x, &y| acc + (x - y) * (x - y));
        let value = Mat::from_elem((1, 1), sse / n);
        let ng = self.ng(a);
        self.push(value, Op::Mse { a, target }, ng)
    }

    /// Mean softmax cross-entropy of each row against its label.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), labels.len());
        let mut probs = lv.clone();
        let mut total = T::zero();
        for (mut row, &y) in probs.axis_iter_mut(Axis(0)).zip(labels) {
            let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
            total -= row[y].max(T::lit(1e-30)).ln();
        }
        let value = Mat::from_elem((1, 1), total / T::lit(labels.len() as f64));
        let ng = self.ng(logits);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(value, op, ng)
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[[0, 0]]
    }

    /// Back-propagates from a `1x1` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be 1x1");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), T::one()));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let send = |grads: &mut Vec<Option<Mat<T>>>, v: Var, d: Mat<T>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += &d,
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    out.by_param.insert(*id, g);
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let da = g.dot(&self.value(*b).t());
                        send(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let db = self.value(*a).t().dot(&g);
                        send(&mut grads, *b, db);
                    }
                }
                Op::AddRow(a, b) => {
                    if self.ng(*b) {
                        let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        send(&mut grads, *b, db);
                    }
                    send(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    send(&mut grads, *b, g.clone());
                    send(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        send(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.ng(*b) {
                        send(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    send(&mut grads, *a, g.mapv(|x| x * s));
                }
                Op::Silu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                        let sg = sigmoid(x);
                        *d *= sg * (T::one() + x * (T::one() - sg));
                    });
                    send(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    if self.ng(*beta) {
                        send(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*gamma) {
                        let dg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        send(&mut grads, *gamma, dg);
                    }
                    if self.ng(*x) {
                        let gam = self.value(*gamma).row(0).to_owned();
                        let d = T::lit(xhat.ncols() as f64);
                        let mut dx = &g * &gam;
                        for ((mut drow, xrow), &r) in dx.axis_iter_mut(Axis(0)).zip(xhat.axis_iter(Axis(0))).zip(rstd) {
                            let sum_d = drow.sum();
                            let sum_dx = drow.iter().zip(xrow.iter()).map(|(&a, &b)| a * b).sum::<T>();
                            Zip::from(&mut drow).and(&xrow).for_each(|dv, &xh| {
                                *dv = r / d * (d * *dv - sum_d - xh * sum_dx);
                            });
                        }
                        send(&mut grads, *x, dx);
                    }
                }
                Op::RowMap(x, map) => {
                    send(&mut grads, *x, map.apply_transpose(&g));
                }
                Op::Im2Col(x, grid) => {
                    let c = g.ncols() / 9;
                    let mut dx = Mat::zeros((grid.rows(), c));
                    for r in 0..grid.rows() {
                        let mut j = 0;
                        for dy in -1..=1 {
                            for dxo in -1..=1 {
                                if let Some(n) = grid.neighbour(r, dy, dxo) {
                                    let src = g.slice(s![r, j * c..(j + 1) * c]);
                                    let mut dst = dx.row_mut(n);
                                    dst += &src;
                                }
                                j += 1;
                            }
                        }
                    }
                    send(&mut grads, *x, dx);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.shape(*a);
                    let flat: Vec<T> = g.iter().copied().collect();
                    send(&mut grads, *a, Mat::from_shape_vec((r, c), flat).expect("reshape"));
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        if self.ng(p) {
                            send(&mut grads, p, g.slice(s![start..start + n, ..]).to_owned());
                        }
                        start += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    send(&mut grads, *a, d);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    send(&mut grads, *a, d);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    plan,
                    probs,
                    frozen,
                } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, plan, probs, frozen, &g);
                    send(&mut grads, *q, dq);
                    send(&mut grads, *k, dk);
                    send(&mut grads, *v, dv);
                }
                Op::AttnMass {
                    q,
                    k,
                    plan,
                    columns,
                    inside,
                    probs,
                    terms,
                } => {
                    let (dq, dk) = self.mass_backward(*q, *k, plan, columns, inside, probs, *terms, g[[0, 0]]);
                    send(&mut grads, *q, dq);
                    send(&mut grads, *k, dk);
                }
                Op::Mse { a, target } => {
                    let av = self.value(*a);
                    let s = g[[0, 0]] * T::lit(2.0) / T::lit(av.len() as f64);
                    let mut d = av - target;
                    d.mapv_inplace(|x| x * s);
                    send(&mut grads, *a, d);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let s = g[[0, 0]] / T::lit(labels.len() as f64);
                    let mut d = probs.clone();
                    for (mut row, &y) in d.axis_iter_mut(Axis(0)).zip(labels) {
                        row[y] -= T::one();
                        row.mapv_inplace(|x| x * s);
                    }
                    send(&mut grads, *logits, d);
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        plan: &AttnPlan,
        probs: &[Array3<T>],
        frozen: &[bool],
        g: &Mat<T>,
    ) -> (Mat<T>, Mat<T>, Mat<T>) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let heads = plan.heads;
        let dvw = vv.ncols() / heads;
        let mut dq = Mat::zeros(qv.dim());
        let mut dk = Mat::zeros(kv.dim());
        let mut dv = Mat::zeros(vv.dim());
        for ((grp, p), &fz) in plan.groups.iter().zip(probs).zip(frozen) {
            let qs = grp.queries.slice();
            let ks = grp.keys.slice();
            let gq = g.slice_axis(Axis(0), qs);
            for h in 0..heads {
                let ph = p.slice(s![h, .., ..]);
                let go = gq.slice(s![.., h * dvw..(h + 1) * dvw]);
                let vh = vv.slice_axis(Axis(0), ks);
                let vh = vh.slice(s![.., h * dvw..(h + 1) * dvw]);
                {
                    let mut dvg = dv.slice_axis_mut(Axis(0), ks);
                    let mut dvh = dvg.slice_mut(s![.., h * dvw..(h + 1) * dvw]);
                    dvh += &ph.t().dot(&go);
                }
                if fz {
                    continue;
                }
                let dp = go.dot(&vh.t());
                self.scores_backward(q, k, grp, heads, h, ph, dp, &mut dq, &mut dk);
            }
        }
        (dq, dk, dv)
    }

    #[allow(clippy::too_many_arguments)]
    fn mass_backward(
        &self,
        q: Var,
        k: Var,
        plan: &AttnPlan,
        columns: &[usize],
        inside: &[Vec<bool>],
        probs: &[Array3<T>],
        terms: usize,
        upstream: T,
    ) -> (Mat<T>, Mat<T>) {
        let mut dq = Mat::zeros(self.value(q).dim());
        let mut dk = Mat::zeros(self.value(k).dim());
        if terms == 0 {
            return (dq, dk);
        }
        let heads = plan.heads;
        let w = upstream.as_f64() / (terms as f64 * heads as f64);
        for ((grp, p), m) in plan.groups.iter().zip(probs).zip(inside) {
            if !m.iter().any(|&b| b) {
                continue;
            }
            let (nq, nk) = (grp.queries.len, grp.keys.len);
            let mut dpbar = Mat::<T>::zeros((nq, nk));
            for &c in columns {
                for (r, d) in column_loss(p, m, c).1.into_iter().enumerate() {
                    dpbar[[r, c]] += T::lit(d * w);
                }
            }
            for h in 0..heads {
                let ph = p.slice(s![h, .., ..]);
                self.scores_backward(q, k, grp, heads, h, ph, dpbar.clone(), &mut dq, &mut dk);
            }
        }
        (dq, dk)
    }

    /// Back-propagates `dL/dP` of one head and group through the softmax
    /// into the query and key gradients.
    #[allow(clippy::too_many_arguments)]
    fn scores_backward(
        &self,
        q: Var,
        k: Var,
        grp: &AttnGroup,
        heads: usize,
        h: usize,
        ph: ArrayView2<'_, T>,
        dp: Mat<T>,
        dq: &mut Mat<T>,
        dk: &mut Mat<T>,
    ) {
        let (qv, kv) = (self.value(q), self.value(k));
        let dqk = qv.ncols() / heads;
        let scale = T::one() / T::lit(dqk as f64).sqrt();
        let (qs, ks) = (grp.queries.slice(), grp.keys.slice());
        let mut ds = dp;
        for (mut drow, prow) in ds.axis_iter_mut(Axis(0)).zip(ph.axis_iter(Axis(0))) {
            let dot = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum::<T>();
            Zip::from(&mut drow)
                .and(&prow)
                .for_each(|d, &pp| *d = pp * (*d - dot) * scale);
        }
        let kh = kv.slice_axis(Axis(0), ks);
        let kh = kh.slice(s![.., h * dqk..(h + 1) * dqk]);
        let qh = qv.slice_axis(Axis(0), qs);
        let qh = qh.slice(s![.., h * dqk..(h + 1) * dqk]);
        {
            let mut dqg = dq.slice_axis_mut(Axis(0), qs);
            let mut dqh = dqg.slice_mut(s![.., h * dqk..(h + 1) * dqk]);
            dqh += &ds.dot(&kh);
        }
        let mut dkg = dk.slice_axis_mut(Axis(0), ks);
        let mut dkh = dkg.slice_mut(s![.., h * dqk..(h + 1) * dqk]);
        dkh += &ds.t().dot(&qh);
    }
}
