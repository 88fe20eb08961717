//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! Every operation appends a node to a [`Tape`]; nodes are created in a
//! topological order by construction, so [`Tape::backward`] is a single
//! reverse sweep that visits each node once and accumulates vector-Jacobian
//! products into its inputs. Broadcasting exists only for the bias of
//! [`Tape::affine`]; every other binary op requires identical shapes.
//!
//! Domain-specific kernels (pose transforms, costs) plug in through
//! [`CustomOp`].

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::{wrap_angle, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),
    #[error("backward called before any forward operation was recorded")]
    BackwardBeforeForward,
    #[error("parameter store error: {0}")]
    Params(String),
}

pub type Result<T, E = GradError> = std::result::Result<T, E>;

fn mismatch(op: &'static str, detail: impl Into<String>) -> GradError {
    GradError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]{:?}", self.rows, self.cols, self.data)
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(mismatch(
                "tensor",
                format!("{} values for shape {rows}x{cols}", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::from_vec(rows, cols, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn row(values: &[T]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An externally defined differentiable kernel.
///
/// `backward` returns one optional gradient per input, each laid out like the
/// corresponding input tensor; the tape accumulates them.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &[T],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Const,
    Detach,
    Affine { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    MatMulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    ColScale { x: Var, scale: Vec<T> },
    Relu { x: Var },
    Tanh { x: Var },
    Sin { x: Var },
    Cos { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape { x: Var },
    GatherRows { x: Var, index: Vec<usize> },
    MaskedMax { x: Var, argmax: Vec<usize> },
    MaskedSoftmax { x: Var },
    L1Pose { a: Var, b: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of primitive applications.
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the seeded outputs with respect to every node that requires one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` or zeros of length `len` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); len])
    }
}

const NO_ARGMAX: usize = usize::MAX;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, v: Var) -> Result<&Tensor<T>> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(GradError::UnknownVar(v.0))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Const, false)
    }

    /// Same value as `x`, but gradients stop here.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let v = self.check(x)?.clone();
        Ok(self.push(v, Op::Detach, false))
    }

    /// `x * w + b` with `x: n x i`, `w: i x o`, `b: 1 x o`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.check(x)?, self.check(w)?);
        if xv.cols != wv.rows {
            return Err(mismatch(
                "affine",
                format!("input {:?} vs weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (n, i, o) = (xv.rows, xv.cols, wv.cols);
        let mut out = Tensor::zeros(n, o);
        if let Some(b) = b {
            let bv = self.check(b)?;
            if bv.shape() != (1, o) {
                return Err(mismatch(
                    "affine",
                    format!("bias {:?} for output width {o}", bv.shape()),
                ));
            }
            for r in 0..n {
                out.data[r * o..(r + 1) * o].copy_from_slice(&bv.data);
            }
        }
        let (xv, wv) = (self.check(x)?, self.check(w)?);
        T::gemm(
            n,
            i,
            o,
            T::one(),
            &xv.data,
            i as isize,
            1,
            &wv.data,
            o as isize,
            1,
            T::one(),
            &mut out.data,
            o as isize,
            1,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Affine { x, w, b }, rg))
    }

    /// `a * b` with `a: m x k`, `b: k x n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if av.cols != bv.rows {
            return Err(mismatch(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.rows, av.cols, bv.cols);
        let mut out = Tensor::zeros(m, n);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &av.data,
            k as isize,
            1,
            &bv.data,
            n as isize,
            1,
            T::zero(),
            &mut out.data,
            n as isize,
            1,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b }, rg))
    }

    /// `a * b^T` with `a: m x k`, `b: n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if av.cols != bv.cols {
            return Err(mismatch(
                "matmul_nt",
                format!("{:?} x {:?}^T", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.rows, av.cols, bv.rows);
        let mut out = Tensor::zeros(m, n);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &av.data,
            k as isize,
            1,
            &bv.data,
            1,
            k as isize,
            T::zero(),
            &mut out.data,
            n as isize,
            1,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulNT { a, b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if av.shape() != bv.shape() {
            return Err(mismatch(
                op,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor {
            rows: av.rows,
            cols: av.cols,
            data,
        };
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul { a, b }))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let xv = self.check(x)?;
        let out = Tensor {
            rows: xv.rows,
            cols: xv.cols,
            data: xv.data.iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(&[x]);
        Ok(self.push(out, op, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.map(x, |v| v * c, Op::Scale { x, c })
    }

    /// Multiplies column `j` by the constant `scale[j]`.
    pub fn col_scale(&mut self, x: Var, scale: &[T]) -> Result<Var> {
        let xv = self.check(x)?;
        if xv.cols != scale.len() {
            return Err(mismatch(
                "col_scale",
                format!("{} columns vs {} factors", xv.cols, scale.len()),
            ));
        }
        let cols = xv.cols;
        let data = xv
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v * scale[i % cols])
            .collect();
        let out = Tensor {
            rows: xv.rows,
            cols,
            data,
        };
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::ColScale {
                x,
                scale: scale.to_vec(),
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| v.sin(), Op::Sin { x })
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| v.cos(), Op::Cos { x })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.check(x)?.data.iter().copied().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?;
        if xv.is_empty() {
            return Err(mismatch("mean", "empty input"));
        }
        let s: T = xv.data.iter().copied().sum();
        let m = s / T::lit(xv.len() as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::Mean { x }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.check(*parts.first().ok_or_else(|| mismatch("concat_cols", "no inputs"))?)?;
        let rows = first.rows;
        let mut cols = 0;
        for &p in parts {
            let pv = self.check(p)?;
            if pv.rows != rows {
                return Err(mismatch(
                    "concat_cols",
                    format!("row counts {rows} vs {}", pv.rows),
                ));
            }
            cols += pv.cols;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row_slice(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor { rows, cols, data },
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.check(*parts.first().ok_or_else(|| mismatch("concat_rows", "no inputs"))?)?;
        let cols = first.cols;
        let mut rows = 0;
        for &p in parts {
            let pv = self.check(p)?;
            if pv.cols != cols {
                return Err(mismatch(
                    "concat_rows",
                    format!("column counts {cols} vs {}", pv.cols),
                ));
            }
            rows += pv.rows;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor { rows, cols, data },
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.check(x)?;
        if start + len > xv.rows {
            return Err(mismatch(
                "slice_rows",
                format!("rows {start}..{} of {}", start + len, xv.rows),
            ));
        }
        let cols = xv.cols;
        let data = xv.data[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                rows: len,
                cols,
                data,
            },
            Op::SliceRows { x, start },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.check(x)?;
        if start + len > xv.cols {
            return Err(mismatch(
                "slice_cols",
                format!("cols {start}..{} of {}", start + len, xv.cols),
            ));
        }
        let mut data = Vec::with_capacity(xv.rows * len);
        for r in 0..xv.rows {
            data.extend_from_slice(&xv.row_slice(r)[start..start + len]);
        }
        let rows = xv.rows;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                rows,
                cols: len,
                data,
            },
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let xv = self.check(x)?;
        if xv.len() != rows * cols {
            return Err(mismatch(
                "reshape",
                format!("{:?} into {rows}x{cols}", xv.shape()),
            ));
        }
        let data = xv.data.clone();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { rows, cols, data }, Op::Reshape { x }, rg))
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.check(x)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.rows) {
            return Err(mismatch(
                "gather_rows",
                format!("row {bad} of {}", xv.rows),
            ));
        }
        let cols = xv.cols;
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            data.extend_from_slice(xv.row_slice(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                rows: index.len(),
                cols,
                data,
            },
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Column-wise max over each row segment, skipping rows whose mask is false.
    ///
    /// Output has one row per segment. Ties resolve to the lowest row index; a
    /// segment with no available rows yields zeros and receives no gradient.
    pub fn masked_max(
        &mut self,
        x: Var,
        segments: &[Range<usize>],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let xv = self.check(x)?;
        if let Some(m) = mask {
            if m.len() != xv.rows {
                return Err(mismatch(
                    "masked_max",
                    format!("mask of {} for {} rows", m.len(), xv.rows),
                ));
            }
        }
        if let Some(s) = segments.iter().find(|s| s.end > xv.rows || s.start > s.end) {
            return Err(mismatch(
                "masked_max",
                format!("segment {s:?} of {} rows", xv.rows),
            ));
        }
        let cols = xv.cols;
        let mut out = Tensor::zeros(segments.len(), cols);
        let mut argmax = vec![NO_ARGMAX; segments.len() * cols];
        for (si, seg) in segments.iter().enumerate() {
            let o = &mut out.data[si * cols..(si + 1) * cols];
            let am = &mut argmax[si * cols..(si + 1) * cols];
            for r in seg.clone() {
                if mask.map_or(false, |m| !m[r]) {
                    continue;
                }
                let row = &xv.data[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    if am[c] == NO_ARGMAX || row[c] > o[c] {
                        o[c] = row[c];
                        am[c] = r;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaskedMax { x, argmax }, rg))
    }

    /// Row-wise softmax over the columns whose mask is true; masked entries are 0.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.check(x)?;
        if mask.len() != xv.cols {
            return Err(mismatch(
                "masked_softmax",
                format!("mask of {} for {} columns", mask.len(), xv.cols),
            ));
        }
        let cols = xv.cols;
        let mut out = Tensor::zeros(xv.rows, cols);
        for r in 0..xv.rows {
            let row = xv.row_slice(r);
            let mut m = T::neg_infinity();
            for c in 0..cols {
                if mask[c] && row[c] > m {
                    m = row[c];
                }
            }
            if m == T::neg_infinity() {
                continue;
            }
            let o = &mut out.data[r * cols..(r + 1) * cols];
            let mut z = T::zero();
            for c in 0..cols {
                if mask[c] {
                    o[c] = (row[c] - m).exp();
                    z += o[c];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaskedSoftmax { x }, rg))
    }

    /// `softmax(q k^T / sqrt(d)) v` with masked keys.
    pub fn scaled_dot_product(&mut self, q: Var, k: Var, v: Var, key_mask: &[bool]) -> Result<Var> {
        let d = self.check(q)?.cols;
        let scores = self.matmul_nt(q, k)?;
        let scores = self.scale(scores, T::one() / T::lit(d as f64).sqrt())?;
        let weights = self.masked_softmax(scores, key_mask)?;
        self.matmul(weights, v)
    }

    /// Sum over rows of `|dx| + |dy| + |wrap(dyaw)|` for two `n x 3` pose blocks.
    pub fn l1_pose(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_pose", a, b)?;
        let av = &self.nodes[a.0].value;
        if av.cols != 3 {
            return Err(mismatch("l1_pose", format!("{} columns, expected 3", av.cols)));
        }
        let bv = &self.nodes[b.0].value;
        let mut s = T::zero();
        for r in 0..av.rows {
            let (pa, pb) = (av.row_slice(r), bv.row_slice(r));
            s += (pa[0] - pb[0]).abs() + (pa[1] - pb[1]).abs() + wrap_angle(pa[2] - pb[2]).abs();
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::L1Pose { a, b }, rg))
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp<T>>) -> Result<Var> {
        let mut vals = Vec::with_capacity(inputs.len());
        for &i in inputs {
            vals.push(self.check(i)?);
        }
        let out = op.forward(&vals)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        ))
    }

    /// Reverse sweep from `seeds` (output var, d objective / d output).
    pub fn backward(&self, seeds: &[(Var, &[T])]) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(GradError::BackwardBeforeForward);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for &(v, g) in seeds {
            let val = self.check(v)?;
            if g.len() != val.len() {
                return Err(mismatch(
                    "backward",
                    format!("seed of {} for {:?}", g.len(), val.shape()),
                ));
            }
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); g.len()]);
            for (s, &x) in slot.iter_mut().zip(g) {
                *s += x;
            }
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Backward from a scalar output with unit seed.
    pub fn backward_scalar(&self, v: Var) -> Result<Gradients<T>> {
        let one = [T::one()];
        self.backward(&[(v, &one)])
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let n = &self.nodes[v.0];
        if !n.requires_grad {
            return None;
        }
        let len = n.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Const | Op::Detach => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, i, o) = (xv.rows, xv.cols, wv.cols);
                if let Some(gx) = self.slot(grads, *x) {
                    // dX += dY W^T
                    T::gemm(n, o, i, T::one(), g, o as isize, 1, &wv.data, 1, o as isize, T::one(), gx, i as isize, 1);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    // dW += X^T dY
                    T::gemm(i, n, o, T::one(), &xv.data, 1, i as isize, g, o as isize, 1, T::one(), gw, o as isize, 1);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        for r in 0..n {
                            for c in 0..o {
                                gb[c] += g[r * o + c];
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows, av.cols, bv.cols);
                if let Some(ga) = self.slot(grads, *a) {
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, &bv.data, 1, n as isize, T::one(), ga, k as isize, 1);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    T::gemm(k, m, n, T::one(), &av.data, 1, k as isize, g, n as isize, 1, T::one(), gb, n as isize, 1);
                }
            }
            Op::MatMulNT { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows, av.cols, bv.rows);
                if let Some(ga) = self.slot(grads, *a) {
                    // dA += dY B
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, &bv.data, k as isize, 1, T::one(), ga, k as isize, 1);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB += dY^T A
                    T::gemm(n, m, k, T::one(), g, 1, n as isize, &av.data, k as isize, 1, T::one(), gb, k as isize, 1);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (s, &x) in gb.iter_mut().zip(g) {
                        *s -= x;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a).data.clone(), val(*b).data.clone());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((s, &x), &y) in ga.iter_mut().zip(g).zip(&bv) {
                        *s += x * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((s, &x), &y) in gb.iter_mut().zip(g).zip(&av) {
                        *s += x * y;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (s, &v) in gx.iter_mut().zip(g) {
                        *s += v * *c;
                    }
                }
            }
            Op::ColScale { x, scale } => {
                let cols = scale.len();
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, (s, &v)) in gx.iter_mut().zip(g).enumerate() {
                        *s += v * scale[i % cols];
                    }
                }
            }
            Op::Relu { x } => {
                let out = &node.value.data;
                if let Some(gx) = self.slot(grads, *x) {
                    for ((s, &v), &y) in gx.iter_mut().zip(g).zip(out) {
                        if y > T::zero() {
                            *s += v;
                        }
                    }
                }
            }
            Op::Tanh { x } => {
                let out = &node.value.data;
                if let Some(gx) = self.slot(grads, *x) {
                    for ((s, &v), &y) in gx.iter_mut().zip(g).zip(out) {
                        *s += v * (T::one() - y * y);
                    }
                }
            }
            Op::Sin { x } => {
                let xv = val(*x).data.clone();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((s, &v), &u) in gx.iter_mut().zip(g).zip(&xv) {
                        *s += v * u.cos();
                    }
                }
            }
            Op::Cos { x } => {
                let xv = val(*x).data.clone();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((s, &v), &u) in gx.iter_mut().zip(g).zip(&xv) {
                        *s -= v * u.sin();
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for s in gx.iter_mut() {
                        *s += g[0];
                    }
                }
            }
            Op::Mean { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let d = g[0] / T::lit(gx.len() as f64);
                    for s in gx.iter_mut() {
                        *s += d;
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.value.cols;
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).cols;
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..node.value.rows {
                            let src = &g[r * total + offset..r * total + offset + pc];
                            add_into(&mut gp[r * pc..(r + 1) * pc], src);
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = node.value.cols;
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(&mut gx[start * cols..start * cols + g.len()], g);
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, len) = node.value.shape();
                let xc = val(*x).cols;
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        add_into(
                            &mut gx[r * xc + start..r * xc + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::GatherRows { x, index } => {
                let cols = node.value.cols;
                if let Some(gx) = self.slot(grads, *x) {
                    for (o, &i) in index.iter().enumerate() {
                        add_into(&mut gx[i * cols..(i + 1) * cols], &g[o * cols..(o + 1) * cols]);
                    }
                }
            }
            Op::MaskedMax { x, argmax } => {
                let cols = node.value.cols;
                if let Some(gx) = self.slot(grads, *x) {
                    for (k, &r) in argmax.iter().enumerate() {
                        if r != NO_ARGMAX {
                            gx[r * cols + k % cols] += g[k];
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x } => {
                let (rows, cols) = node.value.shape();
                let y = &node.value.data;
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            gx[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::L1Pose { a, b } => {
                let (av, bv) = (val(*a).data.clone(), val(*b).data.clone());
                let signs: Vec<T> = av
                    .iter()
                    .zip(&bv)
                    .enumerate()
                    .map(|(i, (&x, &y))| {
                        let d = if i % 3 == 2 { wrap_angle(x - y) } else { x - y };
                        sign(d) * g[0]
                    })
                    .collect();
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, &signs);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (s, &v) in gb.iter_mut().zip(&signs) {
                        *s -= v;
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&vals, &node.value, g);
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if let Some(gv) = self.slot(grads, v) {
                            add_into(gv, &gi);
                        }
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named dense learnable arrays plus Adam moment slots.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f64> {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    values: Vec<Vec<T>>,
    index: BTreeMap<String, usize>,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`]'s insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T = f64> {
    pub grads: Vec<Vec<T>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store.values.iter().map(|v| vec![T::zero(); v.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            add_into(a, b);
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in &mut self.grads {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn flat(&self) -> Vec<T> {
        self.grads.iter().flatten().copied().collect()
    }

    pub fn max_abs_diff(&self, other: &ParamGrads<T>) -> T {
        self.grads
            .iter()
            .flatten()
            .zip(other.grads.iter().flatten())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> T {
        self.grads.iter().flatten().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }
}

/// Leaves created by [`ParamStore::bind`], in store order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step: 0,
        }
    }

    /// Registers a parameter; returns its index.
    pub fn insert(&mut self, name: &str, rows: usize, cols: usize, values: Vec<T>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(GradError::Params(format!("duplicate parameter {name}")));
        }
        if values.len() != rows * cols {
            return Err(mismatch(
                "param",
                format!("{name}: {} values for {rows}x{cols}", values.len()),
            ));
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.shapes.push((rows, cols));
        self.first_moment.push(vec![T::zero(); values.len()]);
        self.second_moment.push(vec![T::zero(); values.len()]);
        self.values.push(values);
        self.index.insert(name.to_string(), i);
        Ok(i)
    }

    /// Glorot-uniform weights scaled by `gain`.
    pub fn insert_glorot(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<usize> {
        let limit = gain * (6.0 / (rows + cols) as f64).sqrt();
        let v = (0..rows * cols)
            .map(|_| T::lit(rng.gen_range(-limit..limit)))
            .collect();
        self.insert(name, rows, cols, v)
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<usize> {
        self.insert(name, rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn shape(&self, i: usize) -> (usize, usize) {
        self.shapes[i]
    }

    pub fn values(&self, i: usize) -> &[T] {
        &self.values[i]
    }

    pub fn values_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.values[i]
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, i: usize) -> (&[T], &[T]) {
        (&self.first_moment[i], &self.second_moment[i])
    }

    /// Restores optimizer state (used when loading checkpoints).
    pub fn set_optimizer_state(&mut self, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<()> {
        let ok = m.len() == self.len()
            && v.len() == self.len()
            && m.iter().zip(&self.values).all(|(a, b)| a.len() == b.len())
            && v.iter().zip(&self.values).all(|(a, b)| a.len() == b.len());
        if !ok {
            return Err(GradError::Params("optimizer state shape mismatch".into()));
        }
        self.step = step;
        self.first_moment = m;
        self.second_moment = v;
        Ok(())
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        let vars = self
            .values
            .iter()
            .zip(&self.shapes)
            .map(|(v, &(r, c))| {
                tape.leaf(Tensor {
                    rows: r,
                    cols: c,
                    data: v.clone(),
                })
            })
            .collect();
        BoundParams { vars }
    }

    pub fn collect_grads(&self, bound: &BoundParams, grads: &Gradients<T>) -> ParamGrads<T> {
        ParamGrads {
            grads: bound
                .vars
                .iter()
                .zip(&self.values)
                .map(|(&v, p)| grads.get_or_zeros(v, p.len()))
                .collect(),
        }
    }

    pub fn adam_step(&mut self, grads: &ParamGrads<T>, lr: f64, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let c1 = T::lit(1.0 - cfg.beta1.powf(t));
        let c2 = T::lit(1.0 - cfg.beta2.powf(t));
        let (lr, eps) = (T::lit(lr), T::lit(cfg.eps));
        for (i, g) in grads.grads.iter().enumerate() {
            let (p, m, v) = (
                &mut self.values[i],
                &mut self.first_moment[i],
                &mut self.second_moment[i],
            );
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    /// Adds `delta[k]` to the k-th scalar in flat store order.
    pub fn perturb_flat(&mut self, delta: &[T]) {
        let mut k = 0;
        for v in &mut self.values {
            for x in v.iter_mut() {
                *x += delta[k];
                k += 1;
            }
        }
    }
}
