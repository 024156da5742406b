//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] walks the record in reverse and returns gradients for
//! the parameters that were marked trainable when the graph was created.
//! Nodes that cannot reach a trainable parameter are never differentiated, so
//! a frozen encoder costs only its forward pass.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};
use rand::Rng;

use crate::params::{Gradients, ParamId, ParamMask, ParamStore};
use crate::Mat;

/// Node handle inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Scatter {
        src: Var,
        targets: Vec<(usize, usize)>,
    },
    Reshape(Var),
    Transpose(Var),
    MaskedSoftmax(Var),
    SumAll(Var),
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Mat,
    },
    BceLogits {
        logits: Var,
        targets: Mat,
        weights: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// A recording of one forward computation.
pub struct Graph {
    nodes: Vec<Node>,
    mask: ParamMask,
    param_vars: HashMap<ParamId, Var>,
}

impl Graph {
    /// Graph that tracks gradients for parameters in `mask`.
    pub fn new(mask: ParamMask) -> Self {
        Self {
            nodes: Vec::new(),
            mask,
            param_vars: HashMap::new(),
        }
    }

    /// Graph with no trainable parameters.
    pub fn inference() -> Self {
        Self::new(ParamMask::none())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Array2::zeros((rows, cols)))
    }

    /// Bring a stored parameter into the graph. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let trainable = self.mask.contains(id);
        let v = self.push(store.get(id).clone(), Op::Param(id), trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Elementwise product of equally shaped matrices.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a (n×m) + row (1×m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ra, ca) = self.value(a).dim();
        assert_eq!(self.value(row).dim(), (1, ca), "add_row: shape mismatch");
        let value = self.value(a) + self.value(row);
        debug_assert_eq!(value.nrows(), ra);
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// `a (n×m) * col (n×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let ra = self.value(a).nrows();
        assert_eq!(self.value(col).dim(), (ra, 1), "mul_col: shape mismatch");
        let value = self.value(a) * self.value(col);
        let ng = self.needs(a) || self.needs(col);
        self.push(value, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, factor), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let ng = self.needs(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.needs(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// Inverted dropout: zero each entry with probability `p`, scale survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let (r, c) = self.value(a).dim();
        let mask = Array2::from_shape_fn((r, c), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: col mismatch");
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Columns `start..start+width`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let value = self
            .value(a)
            .slice(s![.., start..start + width])
            .to_owned();
        let ng = self.needs(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    /// Rows `start..start+height`.
    pub fn slice_rows(&mut self, a: Var, start: usize, height: usize) -> Var {
        let value = self
            .value(a)
            .slice(s![start..start + height, ..])
            .to_owned();
        let ng = self.needs(a);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    /// Row lookup; repeated indices accumulate gradient.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let src = self.value(a);
        let cols = src.ncols();
        let mut value = Array2::zeros((indices.len(), cols));
        for (k, &i) in indices.iter().enumerate() {
            value.row_mut(k).assign(&src.row(i));
        }
        let ng = self.needs(a);
        self.push(value, Op::GatherRows(a, indices.to_vec()), ng)
    }

    /// Place row `i` of `src` into block `targets[i].1` of row `targets[i].0` of a
    /// zero matrix with `rows` rows and `blocks` column blocks of `src`'s width.
    pub fn scatter_blocks(
        &mut self,
        src: Var,
        targets: &[(usize, usize)],
        rows: usize,
        blocks: usize,
    ) -> Var {
        let source = self.value(src);
        assert_eq!(source.nrows(), targets.len(), "scatter_blocks: target count");
        let width = source.ncols();
        let mut value = Array2::zeros((rows, blocks * width));
        for (i, &(r, b)) in targets.iter().enumerate() {
            assert!(r < rows && b < blocks, "scatter_blocks: target out of range");
            let mut dst = value.slice_mut(s![r, b * width..(b + 1) * width]);
            dst += &source.row(i);
        }
        let ng = self.needs(src);
        self.push(
            value,
            Op::Scatter {
                src,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape: size mismatch");
        let data: Vec<f64> = src.iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), data).expect("reshape");
        let ng = self.needs(a);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().as_standard_layout().to_owned();
        let ng = self.needs(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// Row-wise softmax restricted to entries where `mask` is nonzero.
    /// Masked entries get weight exactly zero; every row needs one unmasked entry.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &Mat) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), mask.dim(), "masked_softmax_rows: mask shape");
        let mut value = Array2::zeros(x.dim());
        for (r, (xr, mr)) in x.outer_iter().zip(mask.outer_iter()).enumerate() {
            let max = xr
                .iter()
                .zip(mr.iter())
                .filter(|(_, m)| **m != 0.0)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max.is_finite(), "masked_softmax_rows: row {r} fully masked");
            let mut total = 0.0;
            for (c, (v, m)) in xr.iter().zip(mr.iter()).enumerate() {
                if *m != 0.0 {
                    let e = (v - max).exp();
                    value[[r, c]] = e;
                    total += e;
                }
            }
            value.row_mut(r).mapv_inplace(|e| e / total);
        }
        let ng = self.needs(a);
        self.push(value, Op::MaskedSoftmax(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.needs(a);
        self.push(value, Op::SumAll(a), ng)
    }

    /// `Σ_r weights[r] · CE(softmax(logits[r]), targets[r])` as a 1×1 node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), targets.len(), "softmax_cross_entropy: target count");
        assert_eq!(x.nrows(), weights.len(), "softmax_cross_entropy: weight count");
        let mut probs = Array2::zeros(x.dim());
        let mut loss = 0.0;
        for (r, row) in x.outer_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let mut total = 0.0;
            for (c, v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[[r, c]] = e;
                total += e;
            }
            probs.row_mut(r).mapv_inplace(|e| e / total);
            if weights[r] != 0.0 {
                let log_p = row[targets[r]] - max - total.ln();
                loss -= weights[r] * log_p;
            }
        }
        let ng = self.needs(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// `Σ weights · BCE(σ(logits), targets)` with soft targets in `[0,1]`, as a 1×1 node.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Mat, weights: &Mat) -> Var {
        let x = self.value(logits);
        assert_eq!(x.dim(), targets.dim(), "bce_with_logits: target shape");
        assert_eq!(x.dim(), weights.dim(), "bce_with_logits: weight shape");
        let mut loss = 0.0;
        for ((v, y), w) in x.iter().zip(targets.iter()).zip(weights.iter()) {
            if *w != 0.0 {
                loss += w * (softplus(*v) - y * v);
            }
        }
        let ng = self.needs(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::BceLogits {
                logits,
                targets: targets.clone(),
                weights: weights.clone(),
            },
            ng,
        )
    }

    /// Back-propagate from the 1×1 node `loss`, seeding its gradient with `seed`.
    pub fn backward(&self, loss: Var, seed: f64) -> Gradients {
        let mut grads = Gradients::new();
        assert_eq!(self.value(loss).dim(), (1, 1), "backward: loss must be 1x1");
        if !self.needs(loss) {
            return grads;
        }
        let mut adj: Vec<Option<Mat>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Array2::from_elem((1, 1), seed));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        self.acc(&mut adj, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        self.acc(&mut adj, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        self.acc(&mut adj, *b, g.clone());
                    }
                    self.acc(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        self.acc(&mut adj, *b, -&g);
                    }
                    self.acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let ga = &g * self.value(*b);
                        self.acc(&mut adj, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = &g * self.value(*a);
                        self.acc(&mut adj, *b, gb);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut adj, *row, gr);
                    }
                    self.acc(&mut adj, *a, g);
                }
                Op::MulCol(a, col) => {
                    if self.needs(*col) {
                        let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        self.acc(&mut adj, *col, gc);
                    }
                    if self.needs(*a) {
                        let ga = &g * self.value(*col);
                        self.acc(&mut adj, *a, ga);
                    }
                }
                Op::Scale(a, f) => self.acc(&mut adj, *a, g * *f),
                Op::Sigmoid(a) => {
                    let ga = ndarray::Zip::from(&g)
                        .and(&node.value)
                        .map_collect(|g, y| g * y * (1.0 - y));
                    self.acc(&mut adj, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = ndarray::Zip::from(&g)
                        .and(&node.value)
                        .map_collect(|g, y| g * (1.0 - y * y));
                    self.acc(&mut adj, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = ndarray::Zip::from(&g)
                        .and(&node.value)
                        .map_collect(|g, y| if *y > 0.0 { *g } else { 0.0 });
                    self.acc(&mut adj, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.needs(*p) {
                            let gp = g.slice(s![.., offset..offset + w]).to_owned();
                            self.acc(&mut adj, *p, gp);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        if self.needs(*p) {
                            let gp = g.slice(s![offset..offset + h, ..]).to_owned();
                            self.acc(&mut adj, *p, gp);
                        }
                        offset += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    self.acc(&mut adj, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    self.acc(&mut adj, *a, ga);
                }
                Op::GatherRows(a, indices) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (k, &r) in indices.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(k);
                    }
                    self.acc(&mut adj, *a, ga);
                }
                Op::Scatter { src, targets } => {
                    let width = self.value(*src).ncols();
                    let mut gs = Array2::zeros((targets.len(), width));
                    for (k, &(r, b)) in targets.iter().enumerate() {
                        gs.row_mut(k)
                            .assign(&g.slice(s![r, b * width..(b + 1) * width]));
                    }
                    self.acc(&mut adj, *src, gs);
                }
                Op::Reshape(a) => {
                    let dim = self.value(*a).dim();
                    let data: Vec<f64> = g.iter().copied().collect();
                    let ga = Array2::from_shape_vec(dim, data).expect("reshape backward");
                    self.acc(&mut adj, *a, ga);
                }
                Op::Transpose(a) => {
                    let ga = g.t().as_standard_layout().to_owned();
                    self.acc(&mut adj, *a, ga);
                }
                Op::MaskedSoftmax(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(&g - &dot);
                    self.acc(&mut adj, *a, ga);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    self.acc(&mut adj, *a, ga);
                }
                Op::SoftmaxCe {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let scale = g[[0, 0]];
                    let mut ga = probs.clone();
                    for (r, mut row) in ga.outer_iter_mut().enumerate() {
                        row[targets[r]] -= 1.0;
                        let w = weights[r] * scale;
                        row.mapv_inplace(|v| v * w);
                    }
                    self.acc(&mut adj, *logits, ga);
                }
                Op::BceLogits {
                    logits,
                    targets,
                    weights,
                } => {
                    let scale = g[[0, 0]];
                    let ga = ndarray::Zip::from(self.value(*logits))
                        .and(targets)
                        .and(weights)
                        .map_collect(|x, y, w| w * scale * (sigmoid(*x) - y));
                    self.acc(&mut adj, *logits, ga);
                }
            }
        }
        grads
    }

    fn acc(&self, adj: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.needs(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
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

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
