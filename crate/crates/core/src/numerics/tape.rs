//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the record from the output back to index 0 and applies each
//! node's vector-Jacobian product. Matrix-valued ops treat the last axis
//! as columns and flatten the rest into rows.

use super::{Real, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    AddRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat { parts: Vec<usize>, axis: usize },
    SliceCols { src: usize, start: usize },
    GatherRows { src: usize, rows: Vec<usize> },
    MaskRows { src: usize, masked: Vec<bool> },
    Softmax(usize),
    LogSumExp(usize),
    Normalize { src: usize, norms: Vec<T> },
    Mean { src: usize, axis: usize },
    Sum(usize),
    Pick { src: usize, index: usize },
    Relu(usize),
    LayerNorm { src: usize, inv_std: Vec<T> },
    SqEuclidean(usize, usize),
    Cosine(usize, usize),
    Ln(usize),
    Exp(usize),
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

impl<T> Node<T> {
    fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    fn rows(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.value.len() / self.cols()
        }
    }
}

/// Operation record for one forward pass.
///
/// A tape and the vars it hands out belong to a single worker.
#[derive(Debug, Clone)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    degenerate: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    order: Vec<usize>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `var`, or zeros of length `len` when unreachable.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<T> {
        self.get(var).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }

    /// Adds the gradient of `var` into `tensor`'s buffer.
    pub fn accumulate(&self, var: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![T::zero(); tensor.len()]),
        }
    }

    /// Node indices in the order their backward rules ran.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), degenerate: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Count of zero-norm rows seen by `normalize` and `cosine`.
    pub fn degenerate_events(&self) -> usize {
        self.degenerate
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>().max(1), value.len().max(1));
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor, tracking gradients when the tensor asks for them.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a tensor that never receives gradients.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Records a tensor that always receives gradients.
    pub fn variable(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant_vec(&mut self, data: Vec<T>) -> Var {
        self.push(vec![data.len()], data, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa != sb {
            return Err(Error::shapes(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, rec: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self.node(a).value.iter().zip(&self.node(b).value).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.node(a).shape.clone();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, rec, rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, rec: Op<T>) -> Var {
        let value = self.node(a).value.iter().map(|&x| f(x)).collect();
        let shape = self.node(a).shape.clone();
        let rg = self.rg(&[a]);
        self.push(shape, value, rec, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x * c, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a.0))
    }

    /// Adds a row vector to every row of `mat`.
    pub fn add_row(&mut self, mat: Var, row: Var) -> Result<Var> {
        let (m, r) = (self.node(mat), self.node(row));
        if r.value.len() != m.cols() || r.shape.len() > 1 && r.rows() != 1 {
            return Err(Error::shapes("add_row", &m.shape, &r.shape));
        }
        let c = m.cols();
        let value = m.value.iter().enumerate().map(|(i, &x)| x + r.value[i % c]).collect();
        let shape = m.shape.clone();
        let rg = self.rg(&[mat, row]);
        Ok(self.push(shape, value, Op::AddRow(mat.0, row.0), rg))
    }

    /// `[m,k] x [k,n] -> [m,n]`; a rank-1 left operand yields a rank-1 result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape.len() > 2 || nb.shape.len() != 2 || na.shape.is_empty() {
            return Err(Error::shapes("matmul", &na.shape, &nb.shape));
        }
        let k = na.cols();
        let m = na.rows();
        if nb.shape[0] != k {
            return Err(Error::shapes("matmul", &na.shape, &nb.shape));
        }
        let n = nb.shape[1];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &na.value[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let brow = &nb.value[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let shape = if na.shape.len() == 1 { vec![n] } else { vec![m, n] };
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a);
        if na.shape.len() != 2 {
            return Err(Error::contract("transpose", format!("expected a matrix, got {:?}", na.shape)));
        }
        let (r, c) = (na.shape[0], na.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = na.value[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![c, r], out, Op::Transpose(a.0), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let na = self.node(a);
        if shape.iter().product::<usize>() != na.value.len() {
            return Err(Error::shapes("reshape", &na.shape, &shape));
        }
        let value = na.value.clone();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, Op::Reshape(a.0), rg))
    }

    /// Joins rank-1 parts end to end (`axis` 0), stacks matrices by rows
    /// (`axis` 0) or places them side by side (`axis` 1).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat", "no inputs"))?;
        let rank = self.node(*first).shape.len();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(Error::contract("concat", format!("axis {axis} on rank {rank}")));
        }
        for p in parts {
            let s = &self.node(*p).shape;
            let s0 = &self.node(*first).shape;
            let ok = s.len() == rank && (rank == 1 || if axis == 0 { s[1] == s0[1] } else { s[0] == s0[0] });
            if !ok {
                return Err(Error::shapes("concat", s0, s));
            }
        }
        let (shape, value) = if axis == 0 {
            let value: Vec<T> = parts.iter().flat_map(|p| self.node(*p).value.iter().copied()).collect();
            let shape = if rank == 1 {
                vec![value.len()]
            } else {
                vec![parts.iter().map(|p| self.node(*p).shape[0]).sum(), self.node(*first).shape[1]]
            };
            (shape, value)
        } else {
            let rows = self.node(*first).shape[0];
            let total: usize = parts.iter().map(|p| self.node(*p).shape[1]).sum();
            let mut value = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for p in parts {
                    let n = self.node(*p);
                    value.extend_from_slice(&n.value[i * n.shape[1]..(i + 1) * n.shape[1]]);
                }
            }
            (vec![rows, total], value)
        };
        let rg = self.rg(parts);
        let idx = parts.iter().map(|p| p.0).collect();
        Ok(self.push(shape, value, Op::Concat { parts: idx, axis }, rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let na = self.node(a);
        if na.shape.len() != 2 || start + len > na.shape[1] || len == 0 {
            return Err(Error::contract("slice_cols", format!("{start}..{} of {:?}", start + len, na.shape)));
        }
        let (r, c) = (na.shape[0], na.shape[1]);
        let mut value = Vec::with_capacity(r * len);
        for i in 0..r {
            value.extend_from_slice(&na.value[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![r, len], value, Op::SliceCols { src: a.0, start }, rg))
    }

    /// Selected rows of a matrix, in the given order.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let na = self.node(a);
        if na.shape.len() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= na.shape[0]) {
            return Err(Error::contract("gather_rows", format!("rows {rows:?} of {:?}", na.shape)));
        }
        let c = na.shape[1];
        let value = rows.iter().flat_map(|&r| na.value[r * c..(r + 1) * c].iter().copied()).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![rows.len(), c], value, Op::GatherRows { src: a.0, rows: rows.to_vec() }, rg))
    }

    /// Zeroes the rows flagged in `masked`; the mask itself is constant.
    pub fn mask_rows(&mut self, a: Var, masked: &[bool]) -> Result<Var> {
        let na = self.node(a);
        if na.rows() != masked.len() {
            return Err(Error::contract("mask_rows", format!("mask of length {} for {:?}", masked.len(), na.shape)));
        }
        let c = na.cols();
        let value = na
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| if masked[i / c] { T::zero() } else { x })
            .collect();
        let shape = na.shape.clone();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, Op::MaskRows { src: a.0, masked: masked.to_vec() }, rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a);
        if na.value.iter().any(|x| !x.is_finite()) {
            return Err(Error::Degenerate { op: "softmax", detail: "non-finite input".into() });
        }
        let c = na.cols();
        let mut value = na.value.clone();
        for row in value.chunks_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let shape = na.shape.clone();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, Op::Softmax(a.0), rg))
    }

    /// Row-wise `ln(sum(exp(x)))`, one value per row.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let na = self.node(a);
        let c = na.cols();
        let value: Vec<T> = na
            .value
            .chunks(c)
            .map(|row| {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
            })
            .collect();
        let shape = if na.shape.len() <= 1 { vec![] } else { na.shape[..na.shape.len() - 1].to_vec() };
        let rg = self.rg(&[a]);
        self.push(shape, value, Op::LogSumExp(a.0), rg)
    }

    /// Row-wise L2 normalization. Zero rows map to zero and are counted in
    /// [`Tape::degenerate_events`].
    pub fn normalize(&mut self, a: Var) -> Var {
        let na = self.node(a);
        let c = na.cols();
        let mut value = na.value.clone();
        let mut norms = Vec::with_capacity(na.rows());
        let mut zero = 0;
        for row in value.chunks_mut(c) {
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if n > T::zero() {
                row.iter_mut().for_each(|x| *x /= n);
            } else {
                zero += 1;
            }
            norms.push(n);
        }
        let shape = na.shape.clone();
        if zero > 0 {
            log::warn!("normalize: {zero} zero-norm row(s) mapped to zero");
            self.degenerate += zero;
        }
        let rg = self.rg(&[a]);
        self.push(shape, value, Op::Normalize { src: a.0, norms }, rg)
    }

    /// Mean along `axis`: for a matrix, axis 0 averages rows, axis 1 columns.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let na = self.node(a);
        let (shape, value) = match (na.shape.len(), axis) {
            (1, 0) => {
                let n = T::of(na.value.len() as f64);
                (vec![], vec![na.value.iter().copied().sum::<T>() / n])
            }
            (2, 0) => {
                let (r, c) = (na.shape[0], na.shape[1]);
                let mut out = vec![T::zero(); c];
                for row in na.value.chunks(c) {
                    out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
                }
                let n = T::of(r as f64);
                out.iter_mut().for_each(|o| *o /= n);
                (vec![c], out)
            }
            (2, 1) => {
                let c = na.shape[1];
                let n = T::of(c as f64);
                (vec![na.shape[0]], na.value.chunks(c).map(|row| row.iter().copied().sum::<T>() / n).collect())
            }
            _ => return Err(Error::contract("mean", format!("axis {axis} on {:?}", na.shape))),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, Op::Mean { src: a.0, axis }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.node(a).value.iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Sum(a.0), rg)
    }

    /// Scalar at flat position `index`.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let na = self.node(a);
        let v = *na
            .value
            .get(index)
            .ok_or_else(|| Error::contract("pick", format!("index {index} out of {:?}", na.shape)))?;
        let rg = self.rg(&[a]);
        Ok(self.push(vec![], vec![v], Op::Pick { src: a.0, index }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a.0))
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let na = self.node(a);
        let c = na.cols();
        let n = T::of(c as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut value = na.value.clone();
        let mut inv_std = Vec::with_capacity(na.rows());
        for row in value.chunks_mut(c) {
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / n;
            let is = (var + eps).sqrt().recip();
            row.iter_mut().for_each(|x| *x = (*x - mu) * is);
            inv_std.push(is);
        }
        let shape = na.shape.clone();
        let rg = self.rg(&[a]);
        self.push(shape, value, Op::LayerNorm { src: a.0, inv_std }, rg)
    }

    /// `||a - b||^2` over all elements.
    pub fn sq_euclidean(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sq_euclidean", a, b)?;
        let d = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>();
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![], vec![d], Op::SqEuclidean(a.0, b.0), rg))
    }

    /// Cosine similarity of two equally shaped tensors; 0 when either is zero.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        let dot = va.iter().zip(vb).map(|(&x, &y)| x * y).sum::<T>();
        let na = va.iter().map(|&x| x * x).sum::<T>().sqrt();
        let nb = vb.iter().map(|&x| x * x).sum::<T>().sqrt();
        let s = if na > T::zero() && nb > T::zero() {
            dot / (na * nb)
        } else {
            log::warn!("cosine: zero-norm operand");
            self.degenerate += 1;
            T::zero()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![], vec![s], Op::Cosine(a.0, b.0), rg))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, |x| x.ln(), Op::Ln(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, |x| x.exp(), Op::Exp(a.0))
    }

    /// `x @ w + b` for a matrix or vector `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        if self.shape(y).len() == 1 {
            self.add(y, b)
        } else {
            self.add_row(y, b)
        }
    }

    /// Propagates gradients from a scalar output back to every node that
    /// requires them.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        let n_out = self.node(out);
        if n_out.value.len() != 1 {
            return Err(Error::contract("backward", format!("output must be scalar, got {:?}", n_out.shape)));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; out.0 + 1];
        let mut order = Vec::new();
        if !n_out.requires_grad {
            log::warn!("backward called on an output with no gradient-tracking inputs");
            return Ok(Gradients { grads, order });
        }
        grads[out.0] = Some(vec![T::one()]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            order.push(i);
            self.apply_vjp(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, order })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], idx: usize) -> Option<&'g mut Vec<T>> {
        let n = &self.nodes[idx];
        if !n.requires_grad {
            return None;
        }
        Some(grads[idx].get_or_insert_with(|| vec![T::zero(); n.value.len()]))
    }

    fn apply_vjp(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g.iter().zip(vb)).for_each(|(x, (&y, &w))| *x += y * w);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g.iter().zip(va)).for_each(|(x, (&y, &w))| *x += y * w);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::AddRow(m, r) => {
                let c = nodes[*m].cols();
                if let Some(gm) = self.acc(grads, *m) {
                    gm.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gr) = self.acc(grads, *r) {
                    for row in g.chunks(c) {
                        gr.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (na, nb) = (&nodes[*a], &nodes[*b]);
                let (m, k, n) = (na.rows(), na.cols(), nb.shape[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &nb.value[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<T>();
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = na.value[i * k + p];
                            if av == T::zero() {
                                continue;
                            }
                            gb[p * n..(p + 1) * n].iter_mut().zip(grow).for_each(|(x, &y)| *x += av * y);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let len = nodes[p].value.len();
                        if let Some(gp) = self.acc(grads, p) {
                            gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, &y)| *x += y);
                        }
                        off += len;
                    }
                } else {
                    let total = node.shape[1];
                    let rows = node.shape[0];
                    let mut col = 0;
                    for &p in parts {
                        let w = nodes[p].shape[1];
                        if let Some(gp) = self.acc(grads, p) {
                            for i in 0..rows {
                                gp[i * w..(i + 1) * w]
                                    .iter_mut()
                                    .zip(&g[i * total + col..i * total + col + w])
                                    .for_each(|(x, &y)| *x += y);
                            }
                        }
                        col += w;
                    }
                }
            }
            Op::SliceCols { src, start } => {
                let c = nodes[*src].shape[1];
                let len = node.shape[1];
                if let Some(gs) = self.acc(grads, *src) {
                    for (i, row) in g.chunks(len).enumerate() {
                        gs[i * c + start..i * c + start + len].iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::GatherRows { src, rows } => {
                let c = node.shape[1];
                if let Some(gs) = self.acc(grads, *src) {
                    for (k, &r) in rows.iter().enumerate() {
                        gs[r * c..(r + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::MaskRows { src, masked } => {
                let c = node.cols();
                if let Some(gs) = self.acc(grads, *src) {
                    for (i, (x, &y)) in gs.iter_mut().zip(g).enumerate() {
                        if !masked[i / c] {
                            *x += y;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let c = node.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, yr), out) in g.chunks(c).zip(node.value.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum::<T>();
                        for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LogSumExp(a) => {
                let na = &nodes[*a];
                let c = na.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, (xr, out)) in na.value.chunks(c).zip(ga.chunks_mut(c)).enumerate() {
                        let lse = node.value[r];
                        for (o, &x) in out.iter_mut().zip(xr) {
                            *o += g[r] * (x - lse).exp();
                        }
                    }
                }
            }
            Op::Normalize { src, norms } => {
                let c = node.cols();
                if let Some(gs) = self.acc(grads, *src) {
                    for (r, ((gr, yr), out)) in g.chunks(c).zip(node.value.chunks(c)).zip(gs.chunks_mut(c)).enumerate() {
                        let n = norms[r];
                        if n <= T::zero() {
                            continue;
                        }
                        let dot = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum::<T>();
                        for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o += (gi - yi * dot) / n;
                        }
                    }
                }
            }
            Op::Mean { src, axis } => {
                let ns = &nodes[*src];
                if let Some(gs) = self.acc(grads, *src) {
                    match (ns.shape.len(), axis) {
                        (1, _) => {
                            let share = g[0] / T::of(ns.value.len() as f64);
                            gs.iter_mut().for_each(|x| *x += share);
                        }
                        (_, 0) => {
                            let (r, c) = (ns.shape[0], ns.shape[1]);
                            let inv = T::of(r as f64).recip();
                            for row in gs.chunks_mut(c) {
                                row.iter_mut().zip(g).for_each(|(x, &y)| *x += y * inv);
                            }
                        }
                        _ => {
                            let c = ns.shape[1];
                            let inv = T::of(c as f64).recip();
                            for (row, &y) in gs.chunks_mut(c).zip(g) {
                                row.iter_mut().for_each(|x| *x += y * inv);
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Pick { src, index } => {
                if let Some(gs) = self.acc(grads, *src) {
                    gs[*index] += g[0];
                }
            }
            Op::Relu(a) => {
                let va = &nodes[*a].value;
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(va) {
                        if x > T::zero() {
                            *o += gi;
                        }
                    }
                }
            }
            Op::LayerNorm { src, inv_std } => {
                let c = node.cols();
                let n = T::of(c as f64);
                if let Some(gs) = self.acc(grads, *src) {
                    for (r, ((gr, xh), out)) in g.chunks(c).zip(node.value.chunks(c)).zip(gs.chunks_mut(c)).enumerate() {
                        let mg = gr.iter().copied().sum::<T>() / n;
                        let mgx = gr.iter().zip(xh).map(|(&x, &y)| x * y).sum::<T>() / n;
                        for ((o, &gi), &xi) in out.iter_mut().zip(gr).zip(xh) {
                            *o += inv_std[r] * (gi - mg - xi * mgx);
                        }
                    }
                }
            }
            Op::SqEuclidean(a, b) => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                let two = T::of(2.0) * g[0];
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(va).zip(vb) {
                        *o += two * (x - y);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &x), &y) in gb.iter_mut().zip(va).zip(vb) {
                        *o -= two * (x - y);
                    }
                }
            }
            Op::Cosine(a, b) => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                let na = va.iter().map(|&x| x * x).sum::<T>().sqrt();
                let nb = vb.iter().map(|&x| x * x).sum::<T>().sqrt();
                if na > T::zero() && nb > T::zero() {
                    let s = node.value[0];
                    let gs = g[0];
                    if let Some(ga) = self.acc(grads, *a) {
                        for ((o, &x), &y) in ga.iter_mut().zip(va).zip(vb) {
                            *o += gs * (y / (na * nb) - s * x / (na * na));
                        }
                    }
                    if let Some(gb) = self.acc(grads, *b) {
                        for ((o, &x), &y) in gb.iter_mut().zip(va).zip(vb) {
                            *o += gs * (x / (na * nb) - s * y / (nb * nb));
                        }
                    }
                }
            }
            Op::Ln(a) => {
                let va = &nodes[*a].value;
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(va) {
                        *o += gi / x;
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *o += gi * y;
                    }
                }
            }
        }
    }
}
