//! Wengert-list tape for reverse-mode differentiation.
//!
//! Operations append nodes; `backward` replays them in reverse and never
//! mutates the tape, so repeated calls return identical gradients.

use std::ops::Range;

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    Reshape(Var),
    MaskedSoftmax(Var),
    RowNormalize(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    LayerNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    Mean {
        input: Var,
        axis: usize,
    },
    Sum(Var),
    SelectRows {
        mask: Vec<bool>,
        on_true: Var,
        on_false: Var,
    },
    StraightThrough(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::RowNormalize(..) => "row_normalize",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Mean { .. } => "mean",
            Op::Sum(..) => "sum",
            Op::SelectRows { .. } => "select_rows",
            Op::StraightThrough(..) => "straight_through",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A single forward computation. Build it, call [`Tape::backward`] on a
/// scalar node, then drop it.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that requires one.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn softmax_rows(z: &Tensor) -> Result<Tensor> {
    let (r, c) = z.dims2("masked_softmax")?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = z.row(i);
        let max = row
            .iter()
            .copied()
            .filter(|v| *v != f64::NEG_INFINITY)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let o = &mut out[i * c..(i + 1) * c];
        let mut total = 0.0;
        for (o, &v) in o.iter_mut().zip(row) {
            if v != f64::NEG_INFINITY {
                *o = (v - max).exp();
                total += *o;
            }
        }
        for o in o.iter_mut() {
            *o /= total;
        }
    }
    Tensor::matrix(r, c, out)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Concat { inputs, .. } => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
            other => self
                .parents(other)
                .iter()
                .any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::SelectRows {
                on_true, on_false, ..
            } => vec![*on_true, *on_false],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Reshape(a)
            | Op::MaskedSoftmax(a)
            | Op::RowNormalize(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::StraightThrough(a) => vec![*a],
            Op::Slice { input, .. } | Op::LayerNorm { input, .. } | Op::Mean { input, .. } => {
                vec![*input]
            }
        }
    }

    /// Leaf that receives a gradient.
    pub fn var(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, value);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transposed()?;
        Ok(self.push(Op::Transpose(a), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "div", |x, y| x / y)?;
        Ok(self.push(Op::Div(a, b), out))
    }

    fn row_broadcast(
        &self,
        op: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, rv) = (self.value(a), self.value(row));
        let (r, c) = av.dims2(op)?;
        if rv.shape() != [1, c] {
            return Err(mismatch(op, av, rv));
        }
        let b = rv.data();
        let data = av
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(b).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::matrix(r, c, data)
    }

    /// `a + bias` with `bias` of shape `[1, cols]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", a, bias, |x, y| x + y)?;
        Ok(self.push(Op::AddRow(a, bias), out))
    }

    /// `a * gain` with `gain` of shape `[1, cols]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", a, gain, |x, y| x * y)?;
        Ok(self.push(Op::MulRow(a, gain), out))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        self.push(Op::Scale(a, s), out)
    }

    /// Concatenates rank-2 tensors along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        if axis > 1 {
            return Err(AutodiffError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for rank-2 tensors"),
            });
        }
        let (r0, c0) = self.value(first).dims2("concat")?;
        for v in inputs {
            let (r, c) = self.value(*v).dims2("concat")?;
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(mismatch("concat", self.value(first), self.value(*v)));
            }
        }
        let out = if axis == 0 {
            let rows: usize = inputs.iter().map(|v| self.value(*v).rows()).sum();
            let data = inputs
                .iter()
                .flat_map(|v| self.value(*v).data().iter().copied())
                .collect();
            Tensor::matrix(rows, c0, data)?
        } else {
            let cols: usize = inputs.iter().map(|v| self.value(*v).cols()).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for v in inputs {
                    data.extend_from_slice(self.value(*v).row(i));
                }
            }
            Tensor::matrix(r0, cols, data)?
        };
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            out,
        ))
    }

    /// Rectangular block `rows x cols` of a rank-2 tensor.
    pub fn slice(&mut self, a: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2("slice")?;
        if rows.start >= rows.end || cols.start >= cols.end || rows.end > r || cols.end > c {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                msg: format!("block {rows:?} x {cols:?} outside shape {:?}", av.shape()),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            data.extend_from_slice(&av.row(i)[cols.clone()]);
        }
        let out = Tensor::matrix(rows.len(), cols.len(), data)?;
        Ok(self.push(
            Op::Slice {
                input: a,
                rows,
                cols,
            },
            out,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, rows: Range<usize>) -> Result<Var> {
        let c = self.value(a).dims2("slice")?.1;
        self.slice(a, rows, 0..c)
    }

    pub fn slice_cols(&mut self, a: Var, cols: Range<usize>) -> Result<Var> {
        let r = self.value(a).dims2("slice")?.0;
        self.slice(a, 0..r, cols)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self
            .value(a)
            .reshaped(shape)
            .map_err(|_| AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.value(a).shape().to_vec(),
                rhs: shape.to_vec(),
            })?;
        Ok(self.push(Op::Reshape(a), out))
    }

    /// Row-wise softmax of `a + mask`. `mask` holds `0` (keep) or `-inf`
    /// (drop); dropped entries come out exactly zero and a fully dropped row
    /// yields a zero row.
    pub fn masked_softmax(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        let av = self.value(a);
        av.dims2("masked_softmax")?;
        let z = av.zip_map(mask, "masked_softmax", |x, m| x + m)?;
        let out = softmax_rows(&z)?;
        Ok(self.push(Op::MaskedSoftmax(a), out))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mask = Tensor::zeros(self.shape(a));
        self.masked_softmax(a, &mask)
    }

    /// Divides each row by its sum; an all-zero row stays zero.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2("row_normalize")?;
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            let s: f64 = row.iter().sum();
            if s == 0.0 {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        let out = Tensor::matrix(r, c, data)?;
        Ok(self.push(Op::RowNormalize(a), out))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(Op::Log(a), out)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2("layer_norm")?;
        let mut data = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = av.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std.push(s);
            data.extend(row.iter().map(|x| (x - mean) * s));
        }
        let out = Tensor::matrix(r, c, data)?;
        Ok(self.push(Op::LayerNorm { input: a, inv_std }, out))
    }

    /// Mean along `axis` of a rank-2 tensor, keeping the reduced axis as 1.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2("mean")?;
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; c];
                for row in av.data().chunks(c) {
                    acc.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                Tensor::matrix(1, c, acc.into_iter().map(|s| s / r as f64).collect())?
            }
            1 => Tensor::matrix(
                r,
                1,
                av.data()
                    .chunks(c)
                    .map(|row| row.iter().sum::<f64>() / c as f64)
                    .collect(),
            )?,
            _ => {
                return Err(AutodiffError::InvalidArgument {
                    op: "mean",
                    msg: format!("axis {axis} out of range"),
                })
            }
        };
        Ok(self.push(Op::Mean { input: a, axis }, out))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out)
    }

    /// Row `i` is copied from `on_true` where `mask[i]` holds, otherwise from
    /// `on_false`. Rows are copied verbatim, no arithmetic.
    pub fn select_rows(&mut self, mask: &[bool], on_true: Var, on_false: Var) -> Result<Var> {
        let (t, f) = (self.value(on_true), self.value(on_false));
        t.check_same(f, "select_rows")?;
        let (r, c) = t.dims2("select_rows")?;
        if mask.len() != r {
            return Err(AutodiffError::ShapeMismatch {
                op: "select_rows",
                lhs: vec![mask.len()],
                rhs: t.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(r * c);
        for (i, &keep) in mask.iter().enumerate() {
            data.extend_from_slice(if keep { t.row(i) } else { f.row(i) });
        }
        let out = Tensor::matrix(r, c, data)?;
        Ok(self.push(
            Op::SelectRows {
                mask: mask.to_vec(),
                on_true,
                on_false,
            },
            out,
        ))
    }

    /// Forward: one-hot of each row's argmax (zero rows stay zero).
    /// Backward: identity.
    pub fn straight_through(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2("straight_through")?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = av.row(i);
            if row.iter().all(|v| *v == 0.0) {
                continue;
            }
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            data[i * c + best] = 1.0;
        }
        let out = Tensor::matrix(r, c, data)?;
        Ok(self.push(Op::StraightThrough(a), out))
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul(&bv.transposed()?)?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, av.transposed()?.matmul(g)?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transposed()?),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(bv, "mul", |g, b| g * b)?);
                self.accumulate(grads, *b, g.zip_map(av, "mul", |g, a| g * a)?);
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(bv, "div", |g, b| g / b)?);
                let gb = g
                    .zip_map(av, "div", |g, a| g * a)?
                    .zip_map(bv, "div", |ga, b| -ga / (b * b))?;
                self.accumulate(grads, *b, gb);
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *bias, col_sums(g)?);
            }
            Op::MulRow(a, gain) => {
                let (av, gv) = (self.value(*a), self.value(*gain));
                let c = gv.cols();
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, gk)| gk * gv.data()[k % c])
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), ga)?);
                self.accumulate(
                    grads,
                    *gain,
                    col_sums(&g.zip_map(av, "mul_row", |g, a| g * a)?)?,
                );
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scaled(*s)),
            Op::Concat { inputs, axis } => {
                let mut offset = 0;
                for v in inputs {
                    let (r, c) = self.value(*v).dims2("concat")?;
                    let part = if *axis == 0 {
                        let cols = g.cols();
                        Tensor::matrix(r, c, g.data()[offset * cols..(offset + r) * cols].to_vec())?
                    } else {
                        let mut d = Vec::with_capacity(r * c);
                        for i in 0..r {
                            d.extend_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        Tensor::matrix(r, c, d)?
                    };
                    offset += if *axis == 0 { r } else { c };
                    self.accumulate(grads, *v, part);
                }
            }
            Op::Slice { input, rows, cols } => {
                let shape = self.value(*input).shape().to_vec();
                let full_cols = shape[1];
                let mut d = vec![0.0; shape[0] * full_cols];
                for (k, i) in rows.clone().enumerate() {
                    d[i * full_cols + cols.start..i * full_cols + cols.end]
                        .copy_from_slice(g.row(k));
                }
                self.accumulate(grads, *input, Tensor::new(shape, d)?);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.reshaped(&shape)?);
            }
            Op::MaskedSoftmax(a) => {
                let c = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    d.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::RowNormalize(a) => {
                let xv = self.value(*a);
                let c = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for ((xr, yr), gr) in xv
                    .data()
                    .chunks(c)
                    .zip(y.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let s: f64 = xr.iter().sum();
                    if s == 0.0 {
                        d.extend(std::iter::repeat_n(0.0, c));
                    } else {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        d.extend(gr.iter().map(|g| (g - dot) / s));
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, g.zip_map(y, "tanh", |g, y| g * (1.0 - y * y))?)
            }
            Op::Sigmoid(a) => self.accumulate(
                grads,
                *a,
                g.zip_map(y, "sigmoid", |g, y| g * y * (1.0 - y))?,
            ),
            Op::Relu(a) => {
                let xv = self.value(*a);
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(xv, "relu", |g, x| if x > 0.0 { g } else { 0.0 })?,
                )
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, "exp", |g, y| g * y)?),
            Op::Log(a) => {
                let xv = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(xv, "log", |g, x| g / x)?)
            }
            Op::LayerNorm { input, inv_std } => {
                let c = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for ((yr, gr), s) in y.data().chunks(c).zip(g.data().chunks(c)).zip(inv_std) {
                    let mean_g = gr.iter().sum::<f64>() / c as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / c as f64;
                    d.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(g, y)| s * (g - mean_g - y * mean_gy)),
                    );
                }
                self.accumulate(grads, *input, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Mean { input, axis } => {
                let (r, c) = self.value(*input).dims2("mean")?;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = if *axis == 0 {
                            g.data()[j] / r as f64
                        } else {
                            g.data()[i] / c as f64
                        };
                    }
                }
                self.accumulate(grads, *input, Tensor::matrix(r, c, d)?);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.data()[0]));
            }
            Op::SelectRows {
                mask,
                on_true,
                on_false,
            } => {
                let c = g.cols();
                let mut dt = g.data().to_vec();
                let mut df = g.data().to_vec();
                for (i, &keep) in mask.iter().enumerate() {
                    let zero = if keep { &mut df } else { &mut dt };
                    zero[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                }
                self.accumulate(grads, *on_true, Tensor::new(g.shape().to_vec(), dt)?);
                self.accumulate(grads, *on_false, Tensor::new(g.shape().to_vec(), df)?);
            }
            Op::StraightThrough(a) => self.accumulate(grads, *a, g.clone()),
        }
        Ok(())
    }
}

fn col_sums(g: &Tensor) -> Result<Tensor> {
    let (_, c) = g.dims2("col_sums")?;
    let mut acc = vec![0.0; c];
    for row in g.data().chunks(c) {
        acc.iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    Tensor::matrix(1, c, acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::identity(2));
        let b = t.constant(m(2, 1, &[3.0, 4.0]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = t.constant(Tensor::zeros(&[3, 2]));
        assert!(t.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn uniform_softmax() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[1, 3]));
        let s = t.softmax(a).unwrap();
        for v in t.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_softmax_drops_entry() {
        let mut t = Tape::new();
        let a = t.constant(m(1, 3, &[1.0, 2.0, 3.0]));
        let mask = m(1, 3, &[0.0, f64::NEG_INFINITY, 0.0]);
        let s = t.masked_softmax(a, &mask).unwrap();
        let y = t.value(s).data();
        // closed form: e^1/(e^1+e^3), e^3/(e^1+e^3)
        let (e1, e3) = (1f64.exp(), 3f64.exp());
        assert_eq!(y[1], 0.0);
        assert!((y[0] - e1 / (e1 + e3)).abs() < 1e-15);
        assert!((y[2] - e3 / (e1 + e3)).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let mut t = Tape::new();
        let a = t.var(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let mask = m(2, 2, &[f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, 0.0]);
        let s = t.masked_softmax(a, &mask).unwrap();
        assert_eq!(&t.value(s).data()[..2], &[0.0, 0.0]);
        let l = t.sum(s);
        let g = t.backward(l).unwrap();
        assert!(g.get(a).unwrap().is_finite());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let p = t.var(m(2, 2, &[0.3, -1.0, 2.0, 5.0]));
        let l = t.sum(p);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let p = t.var(m(1, 3, &[1.0, 2.0, 3.0]));
        let sq = t.mul(p, p).unwrap();
        let l = t.sum(sq);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let p = t.var(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            t.backward(p),
            Err(AutodiffError::NonScalarRoot(_))
        ));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let p = t.var(m(1, 2, &[1.0, 2.0]));
        let c = t.constant(m(1, 2, &[3.0, 4.0]));
        let x = t.mul(p, c).unwrap();
        let l = t.sum(x);
        let g = t.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn select_rows_copies_verbatim() {
        let mut t = Tape::new();
        let a = t.var(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = t.var(m(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let s = t.select_rows(&[true, false], a, b).unwrap();
        assert_eq!(t.value(s).data(), &[1.0, 2.0, 7.0, 8.0]);
        let l = t.sum(s);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(g.get(b).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn straight_through_forward_one_hot() {
        let mut t = Tape::new();
        let a = t.var(m(2, 3, &[0.2, 0.5, 0.3, 0.0, 0.0, 0.0]));
        let s = t.straight_through(a).unwrap();
        assert_eq!(t.value(s).data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn row_normalize_zero_row() {
        let mut t = Tape::new();
        let a = t.var(m(2, 2, &[1.0, 3.0, 0.0, 0.0]));
        let s = t.row_normalize(a).unwrap();
        assert_eq!(t.value(s).data(), &[0.25, 0.75, 0.0, 0.0]);
    }
}
