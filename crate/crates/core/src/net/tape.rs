//! Reverse-mode differentiation over a recorded sequence of matrix ops.
//!
//! Nodes are appended in evaluation order, so a node's inputs always have
//! smaller ids and the backward sweep is a single reverse pass. Parameter
//! blocks bound as frozen behave like constants and receive no gradient.

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::net::matrix::{gemm, Matrix, Op as Trans};
use crate::net::params::{layer_offsets, Activation, Gradient, LayerSpec};
use crate::spatial::SpatialIndex;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a parameter block bound to a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param { block: usize, offset: usize },
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Tanh(Var),
    MaxRows(Var, Vec<usize>),
    Concat(Vec<Var>),
    Broadcast(Var),
    RepeatRows(Var, usize),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Chamfer(Var, Matrix),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
struct Block {
    values: Vec<f64>,
    layout: Vec<LayerSpec>,
    offsets: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    blocks: Vec<Block>,
}

/// Diagnostics of one Chamfer evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ChamferParts {
    pub forward: f64,
    pub backward: f64,
}

fn shape_err(what: &'static str, expected: usize, found: usize) -> Error {
    Error::ShapeMismatch {
        what,
        expected,
        found,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter block; only trainable blocks get gradients.
    pub fn bind(&mut self, values: Vec<f64>, layout: &[LayerSpec], trainable: bool) -> BlockId {
        self.blocks.push(Block {
            values,
            offsets: layer_offsets(layout),
            layout: layout.to_vec(),
            trainable,
        });
        BlockId(self.blocks.len() - 1)
    }

    pub fn block_len(&self, block: BlockId) -> usize {
        self.blocks[block.0].values.len()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant, false)
    }

    /// A `rows x cols` window of a parameter block starting at `offset`.
    pub fn param(&mut self, block: BlockId, offset: usize, rows: usize, cols: usize) -> Var {
        let b = &self.blocks[block.0];
        let data = b.values[offset..offset + rows * cols].to_vec();
        let trainable = b.trainable;
        let m = Matrix::from_vec(rows, cols, data).expect("window size");
        self.push(
            m,
            Op::Param {
                block: block.0,
                offset,
            },
            trainable,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err("matmul inner dimension", av.cols(), bv.rows()));
        }
        let mut out = Matrix::zeros(av.rows(), bv.cols());
        gemm(av, Trans::N, bv, Trans::N, 0.0, &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err("bias row width", av.cols(), rv.cols()));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("elementwise add", av.data().len(), bv.data().len()));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(shape_err("column scale rows", av.rows(), cv.rows()));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            let s = cv.data()[r];
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        let ng = self.needs(a) || self.needs(col);
        Ok(self.push(out, Op::MulCol(a, col), ng))
    }

    /// `scale * a + shift`, element-wise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = scale * *v + shift;
        }
        let ng = self.needs(a);
        self.push(out, Op::Affine(a, scale), ng)
    }

    /// Rectifier; the subgradient at exactly zero is taken as one so that
    /// zero-initialized output layers still receive a signal.
    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = v.max(0.0);
        }
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = v.tanh();
        }
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    /// Column-wise maximum over rows, a `1 x cols` result.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rows() == 0 {
            return Err(Error::EmptyInput);
        }
        let mut out = Matrix::zeros(1, av.cols());
        let mut arg = vec![0usize; av.cols()];
        out.data_mut().copy_from_slice(av.row(0));
        for r in 1..av.rows() {
            for (c, &v) in av.row(r).iter().enumerate() {
                if v > out.data()[c] {
                    out.data_mut()[c] = v;
                    arg[c] = r;
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(out, Op::MaxRows(a, arg), ng))
    }

    /// Horizontal concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(shape_err("concat rows", rows, pv.rows()));
            }
            for r in 0..rows {
                out.row_mut(r)[at..at + pv.cols()].copy_from_slice(pv.row(r));
            }
            at += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    /// Repeats a single row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != 1 {
            return Err(shape_err("broadcast source rows", 1, av.rows()));
        }
        let mut out = Matrix::zeros(n, av.cols());
        for r in 0..n {
            out.row_mut(r).copy_from_slice(av.row(0));
        }
        let ng = self.needs(a);
        Ok(self.push(out, Op::Broadcast(a), ng))
    }

    /// Each row repeated `k` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(av.rows() * k, av.cols());
        for r in 0..av.rows() {
            for j in 0..k {
                out.row_mut(r * k + j).copy_from_slice(av.row(r));
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::RepeatRows(a, k), ng)
    }

    pub fn gather_rows(&mut self, a: Var, ids: &[usize]) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(ids.len(), av.cols());
        for (t, &i) in ids.iter().enumerate() {
            out.row_mut(t).copy_from_slice(av.row(i));
        }
        let ng = self.needs(a);
        self.push(out, Op::Gather(a, ids.to_vec()), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let av = self.value(a);
        if av.data().len() != rows * cols {
            return Err(shape_err("reshape size", av.data().len(), rows * cols));
        }
        let out = av.clone().reshaped(rows, cols);
        let ng = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Mean-normalized squared Chamfer distance between the `n x 3` points
    /// in `pred` and a fixed target. Nearest-neighbour assignments are
    /// frozen at this call; the backward pass differentiates the resulting
    /// sum of squared distances.
    pub fn chamfer(&mut self, pred: Var, target: &SpatialIndex) -> Result<(Var, ChamferParts)> {
        let pv = self.value(pred);
        if pv.cols() != 3 {
            return Err(shape_err("chamfer point width", 3, pv.cols()));
        }
        if pv.rows() == 0 || target.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let cloud = matrix_to_cloud(pv)?;
        let pred_index = SpatialIndex::build(&cloud);
        let (n, m) = (cloud.len() as f64, target.len() as f64);
        let mut grad = Matrix::zeros(cloud.len(), 3);
        let mut forward = 0.0;
        for (i, &p) in cloud.iter().enumerate() {
            let (j, d) = target.nearest(p)?;
            forward += d;
            let diff = p - target.source()[j];
            let g = grad.row_mut(i);
            g[0] += 2.0 * diff.x / n;
            g[1] += 2.0 * diff.y / n;
            g[2] += 2.0 * diff.z / n;
        }
        let mut backward = 0.0;
        for &q in target.source() {
            let (i, d) = pred_index.nearest(q)?;
            backward += d;
            let diff = cloud[i] - q;
            let g = grad.row_mut(i);
            g[0] += 2.0 * diff.x / m;
            g[1] += 2.0 * diff.y / m;
            g[2] += 2.0 * diff.z / m;
        }
        let parts = ChamferParts {
            forward: forward / n,
            backward: backward / m,
        };
        let ng = self.needs(pred);
        let v = self.push(
            Matrix::scalar(parts.forward + parts.backward),
            Op::Chamfer(pred, grad),
            ng,
        );
        Ok((v, parts))
    }

    /// Applies dense layer `layer` of `block` to the rows of `x`.
    pub fn dense(&mut self, block: BlockId, layer: usize, x: Var) -> Result<Var> {
        let b = &self.blocks[block.0];
        let spec = b.layout[layer];
        let offset = b.offsets[layer];
        if self.value(x).cols() != spec.input {
            return Err(shape_err("dense input width", spec.input, self.value(x).cols()));
        }
        let w = self.param(block, offset, spec.input, spec.output);
        let bias = self.param(block, offset + spec.input * spec.output, 1, spec.output);
        let h = self.matmul(x, w)?;
        let h = self.add_row(h, bias)?;
        Ok(match spec.kind {
            Activation::Relu => self.relu(h),
            Activation::Tanh => self.tanh(h),
            Activation::None => h,
        })
    }

    /// Consecutive dense layers `layers` of `block`.
    pub fn mlp(&mut self, block: BlockId, layers: std::ops::Range<usize>, x: Var) -> Result<Var> {
        layers.into_iter().try_fold(x, |h, l| self.dense(block, l, h))
    }

    /// Shared per-element MLP followed by a coordinate-wise max over
    /// elements. Returns `(global, per_element)`.
    pub fn set_encode(
        &mut self,
        block: BlockId,
        layers: std::ops::Range<usize>,
        x: Var,
    ) -> Result<(Var, Var)> {
        if self.value(x).rows() == 0 {
            return Err(Error::EmptyInput);
        }
        let per = self.mlp(block, layers, x)?;
        let global = self.max_rows(per)?;
        Ok((global, per))
    }

    /// Gradients of the scalar `loss` with respect to every bound block;
    /// frozen blocks yield `None`.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Gradient>>> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut out: Vec<Option<Gradient>> = self
            .blocks
            .iter()
            .map(|b| b.trainable.then(|| Gradient::zeros(b.values.len())))
            .collect();
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Param { block, offset } => {
                    if let Some(acc) = out[*block].as_mut() {
                        for (a, v) in acc.values[*offset..*offset + g.data().len()]
                            .iter_mut()
                            .zip(g.data())
                        {
                            *a += v;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let bv = self.value(*b);
                        let ga = slot(&mut grads, &self.nodes, *a);
                        gemm(&g, Trans::N, bv, Trans::T, 1.0, ga);
                    }
                    if self.needs(*b) {
                        let av = self.value(*a);
                        let gb = slot(&mut grads, &self.nodes, *b);
                        gemm(av, Trans::T, &g, Trans::N, 1.0, gb);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        let s = g.column_sums();
                        slot(&mut grads, &self.nodes, *row).add_assign(&s);
                    }
                    if self.needs(*a) {
                        slot(&mut grads, &self.nodes, *a).add_assign(&g);
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if self.needs(*v) {
                            slot(&mut grads, &self.nodes, *v).add_assign(&g);
                        }
                    }
                }
                Op::MulCol(a, col) => {
                    if self.needs(*col) {
                        let av = self.value(*a);
                        let gc = slot(&mut grads, &self.nodes, *col);
                        for r in 0..g.rows() {
                            let s: f64 = g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum();
                            gc.data_mut()[r] += s;
                        }
                    }
                    if self.needs(*a) {
                        let cv = self.value(*col);
                        let ga = slot(&mut grads, &self.nodes, *a);
                        for r in 0..g.rows() {
                            let s = cv.data()[r];
                            for (o, x) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                                *o += x * s;
                            }
                        }
                    }
                }
                Op::Affine(a, scale) => {
                    let ga = slot(&mut grads, &self.nodes, *a);
                    for (o, x) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += scale * x;
                    }
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let ga = slot(&mut grads, &self.nodes, *a);
                    for ((o, x), &pre) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        if pre >= 0.0 {
                            *o += x;
                        }
                    }
                }
                Op::Tanh(a) => {
                    let ga = slot(&mut grads, &self.nodes, *a);
                    for ((o, x), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(node.value.data()) {
                        *o += x * (1.0 - y * y);
                    }
                }
                Op::MaxRows(a, arg) => {
                    let ga = slot(&mut grads, &self.nodes, *a);
                    for (c, &r) in arg.iter().enumerate() {
                        let cols = ga.cols();
                        ga.data_mut()[r * cols + c] += g.data()[c];
                    }
                }
                Op::Concat(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if self.needs(*p) {
                            let gp = slot(&mut grads, &self.nodes, *p);
                            for r in 0..g.rows() {
                                for (o, x) in gp.row_mut(r).iter_mut().zip(&g.row(r)[at..at + w]) {
                                    *o += x;
                                }
                            }
                        }
                        at += w;
                    }
                }
                Op::Broadcast(a) => {
                    let s = g.column_sums();
                    slot(&mut grads, &self.nodes, *a).add_assign(&s);
                }
                Op::RepeatRows(a, k) => {
                    let ga = slot(&mut grads, &self.nodes, *a);
                    for r in 0..g.rows() {
                        for (o, x) in ga.row_mut(r / k).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
                Op::Gather(a, ids) => {
                    let ga = slot(&mut grads, &self.nodes, *a);
                    for (t, &i) in ids.iter().enumerate() {
                        for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(t)) {
                            *o += x;
                        }
                    }
                }
                Op::Reshape(a) => {
                    let ga = slot(&mut grads, &self.nodes, *a);
                    for (o, x) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += x;
                    }
                }
                Op::Chamfer(pred, local) => {
                    let s = g.data()[0];
                    let gp = slot(&mut grads, &self.nodes, *pred);
                    for (o, x) in gp.data_mut().iter_mut().zip(local.data()) {
                        *o += s * x;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn slot<'a>(grads: &'a mut [Option<Matrix>], nodes: &[Node], v: Var) -> &'a mut Matrix {
    grads[v.0].get_or_insert_with(|| {
        let (r, c) = nodes[v.0].value.shape();
        Matrix::zeros(r, c)
    })
}

/// Interprets an `n x 3` matrix as a point cloud.
pub fn matrix_to_cloud(m: &Matrix) -> Result<PointCloud> {
    if m.cols() != 3 {
        return Err(shape_err("point matrix width", 3, m.cols()));
    }
    PointCloud::new(
        (0..m.rows())
            .map(|r| {
                let row = m.row(r);
                Point3::new(row[0], row[1], row[2])
            })
            .collect(),
    )
}

pub fn cloud_to_matrix(c: &PointCloud) -> Matrix {
    Matrix::from_vec(c.len(), 3, c.iter().flat_map(|p| p.to_array()).collect())
        .expect("n x 3 layout")
}

/// Value-level set encoding with a shared MLP and max pooling.
pub fn set_encode(
    params: &[f64],
    layout: &[LayerSpec],
    input: &Matrix,
) -> Result<(Vec<f64>, Matrix)> {
    let mut tape = Tape::new();
    let b = tape.bind(params.to_vec(), layout, false);
    let x = tape.constant(input.clone());
    let (g, per) = tape.set_encode(b, 0..layout.len(), x)?;
    Ok((tape.value(g).data().to_vec(), tape.value(per).clone()))
}
