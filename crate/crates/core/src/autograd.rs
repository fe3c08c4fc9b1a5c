//! Reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! A [`Tape`] records every operation as it is evaluated. Handles ([`Var`])
//! are plain indices into the tape, so expressions are built by calling tape
//! methods: `tape.matmul(x, w)?`. [`Tape::backward`] then walks the records in
//! reverse and accumulates gradients, which makes reused intermediate values
//! sum their contributions.
//!
//! Every operation checks its output for NaN/Inf and fails with the name of
//! the producing operation. Sparse matrices enter only as constants.

use std::cell::{Ref, RefCell};
use std::fmt;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::Float;
use thiserror::Error;

use crate::sparse::SparseMatrix;

/// Element type a tape can operate on (`f32` for training, `f64` for checks).
pub trait Scalar:
    Float + LinalgScalar + ScalarOperand + fmt::Debug + fmt::Display + Send + Sync + Default + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, AutogradError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(ArrayView2<'_, T>, ArrayView2<'_, T>, ArrayView2<'_, T>) -> Array2<T>>;

enum Op<'a, T: Scalar> {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Sparse(&'a SparseMatrix, Var),
    Transpose(Var),
    Elu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, T, T),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    TransposeBlocks { x: Var, a: usize, b: usize, c: usize },
    Custom(Var, BackwardFn<T>),
}

struct Node<'a, T: Scalar> {
    value: Array2<T>,
    op: Op<'a, T>,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass. Single-threaded.
pub struct Tape<'a, T: Scalar> {
    nodes: RefCell<Vec<Node<'a, T>>>,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `x − x` is zero for finite `x` and NaN otherwise; eight independent
/// lanes let the loop vectorize.
fn all_finite<T: Scalar>(s: &[T]) -> bool {
    let mut acc = [T::zero(); 8];
    let chunks = s.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            acc[k] = acc[k] + (c[k] - c[k]);
        }
    }
    acc.iter().all(|a| *a == T::zero()) && rest.iter().all(|v| v.is_finite())
}

fn array_finite<T: Scalar>(a: &Array2<T>) -> bool {
    match a.as_slice_memory_order() {
        Some(s) => all_finite(s),
        None => a.iter().all(|v| v.is_finite()),
    }
}

fn check_finite<T: Scalar>(op: &'static str, a: &Array2<T>) -> Result<()> {
    if array_finite(a) {
        Ok(())
    } else {
        Err(AutogradError::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(AutogradError::Shape { op, lhs: a, rhs: b })
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op_name: &'static str, value: Array2<T>, op: Op<'a, T>, requires_grad: bool) -> Result<Var> {
        check_finite(op_name, &value)?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Array2<T>) -> Result<Var> {
        self.push("param", value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Array2<T>) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Array2<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dim()
    }

    /// Value of a `1×1` result.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value[[0, 0]]
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(&Array2<T>, &Array2<T>) -> Array2<T>,
        op: Op<'a, T>,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            same_shape(name, x.dim(), y.dim())?;
            f(x, y)
        };
        self.push(name, value, op, self.rg(&[a, b]))
    }

    fn unary(&self, name: &'static str, a: Var, f: impl Fn(&Array2<T>) -> Array2<T>, op: Op<'a, T>) -> Result<Var> {
        let value = f(&self.nodes.borrow()[a.0].value);
        self.push(name, value, op, self.rg(&[a]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x + row` where `row` is `1×n`, broadcast over the rows of `x`.
    pub fn add_row(&self, x: Var, row: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, rv) = (&nodes[x.0].value, &nodes[row.0].value);
            if rv.nrows() != 1 || rv.ncols() != xv.ncols() {
                return Err(AutogradError::Shape {
                    op: "add_row",
                    lhs: xv.dim(),
                    rhs: rv.dim(),
                });
            }
            xv + rv
        };
        self.push("add_row", value, Op::AddRow(x, row), self.rg(&[x, row]))
    }

    pub fn scale(&self, x: Var, c: T) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.ncols() != y.nrows() {
                return Err(AutogradError::Shape {
                    op: "matmul",
                    lhs: x.dim(),
                    rhs: y.dim(),
                });
            }
            x.dot(y)
        };
        self.push("matmul", value, Op::MatMul(a, b), self.rg(&[a, b]))
    }

    /// `s · x` with a constant sparse left operand.
    pub fn sparse_matmul(&self, s: &'a SparseMatrix, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            s.matmul(xv.view()).map_err(|_| AutogradError::Shape {
                op: "sparse_matmul",
                lhs: s.shape(),
                rhs: xv.dim(),
            })?
        };
        self.push("sparse_matmul", value, Op::Sparse(s, x), self.rg(&[x]))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        self.unary("transpose", x, |v| v.t().as_standard_layout().into_owned(), Op::Transpose(x))
    }

    /// ELU with α = 1.
    pub fn elu(&self, x: Var) -> Result<Var> {
        self.unary(
            "elu",
            x,
            |v| v.mapv(|a| if a > T::zero() { a } else { a.exp_m1() }),
            Op::Elu(x),
        )
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.mapv(T::exp), Op::Exp(x))
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary("log", x, |v| v.mapv(T::ln), Op::Log(x))
    }

    pub fn abs(&self, x: Var) -> Result<Var> {
        self.unary("abs", x, |v| v.mapv(T::abs), Op::Abs(x))
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v.mapv(|a| a * a), Op::Square(x))
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.unary("clamp", x, |v| v.mapv(|a| a.max(lo).min(hi)), Op::Clamp(x, lo, hi))
    }

    /// Row-major reshape.
    pub fn reshape(&self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            if v.len() != rows * cols {
                return Err(AutogradError::Shape {
                    op: "reshape",
                    lhs: v.dim(),
                    rhs: (rows, cols),
                });
            }
            v.as_standard_layout()
                .into_owned()
                .into_shape_with_order((rows, cols))
                .expect("element count checked")
        };
        self.push("reshape", value, Op::Reshape(x), self.rg(&[x]))
    }

    /// Concatenation along `axis` (0 stacks rows, 1 stacks columns).
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(AutogradError::Invalid {
                op: "concat",
                msg: "needs at least one input and axis 0 or 1".into(),
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            let other = 1 - axis;
            let first = views[0].dim();
            for v in &views[1..] {
                if v.len_of(Axis(other)) != views[0].len_of(Axis(other)) {
                    return Err(AutogradError::Shape {
                        op: "concat",
                        lhs: first,
                        rhs: v.dim(),
                    });
                }
            }
            concatenate(Axis(axis), &views).expect("shapes checked")
        };
        self.push("concat", value, Op::Concat(parts.to_vec(), axis), self.rg(parts))
    }

    /// Rows (`axis = 0`) or columns (`axis = 1`) `start..end`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            if axis > 1 || start > end || end > v.len_of(Axis(axis)) {
                return Err(AutogradError::Invalid {
                    op: "slice",
                    msg: format!("range {start}..{end} on axis {axis} of {:?}", v.dim()),
                });
            }
            match axis {
                0 => v.slice(s![start..end, ..]).to_owned(),
                _ => v.slice(s![.., start..end]).to_owned(),
            }
        };
        self.push("slice", value, Op::Slice { x, axis, start }, self.rg(&[x]))
    }

    /// Sum of all entries as a `1×1` value.
    pub fn sum(&self, x: Var) -> Result<Var> {
        self.unary("sum", x, |v| Array2::from_elem((1, 1), v.sum()), Op::Sum(x))
    }

    /// Mean of all entries as a `1×1` value.
    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.nodes.borrow()[x.0].value.len();
        if n == 0 {
            return Err(AutogradError::Invalid {
                op: "mean",
                msg: "empty input".into(),
            });
        }
        self.unary(
            "mean",
            x,
            |v| Array2::from_elem((1, 1), v.sum() / T::from_f64(n as f64)),
            Op::Mean(x),
        )
    }

    /// Column means as a `1×n` row.
    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        let rows = self.shape(x).0;
        if rows == 0 {
            return Err(AutogradError::Invalid {
                op: "mean_rows",
                msg: "no rows".into(),
            });
        }
        self.unary(
            "mean_rows",
            x,
            |v| v.sum_axis(Axis(0)).insert_axis(Axis(0)) / T::from_f64(rows as f64),
            Op::MeanRows(x),
        )
    }

    /// Reads an `a × (b·c)` value as `(a, b, c)` blocks and returns `b × (a·c)`.
    ///
    /// With `a` vertices, `b` batch entries and `c` channels this converts a
    /// vertex-major feature matrix into one flattened row per batch entry.
    pub fn transpose_blocks(&self, x: Var, a: usize, b: usize, c: usize) -> Result<Var> {
        let dim = self.shape(x);
        if dim != (a, b * c) {
            return Err(AutogradError::Shape {
                op: "transpose_blocks",
                lhs: dim,
                rhs: (a, b * c),
            });
        }
        self.unary(
            "transpose_blocks",
            x,
            |v| permute_blocks(v.view(), a, b, c),
            Op::TransposeBlocks { x, a, b, c },
        )
    }

    /// Elementwise op with caller-supplied forward and backward.
    ///
    /// `backward(input, output, grad_output)` must return the input gradient.
    pub fn custom_unary(
        &self,
        name: &'static str,
        x: Var,
        forward: impl Fn(ArrayView2<'_, T>) -> Array2<T>,
        backward: impl Fn(ArrayView2<'_, T>, ArrayView2<'_, T>, ArrayView2<'_, T>) -> Array2<T> + 'static,
    ) -> Result<Var> {
        let value = forward(self.nodes.borrow()[x.0].value.view());
        same_shape(name, value.dim(), self.shape(x))?;
        self.push(name, value, Op::Custom(x, Box::new(backward)), self.rg(&[x]))
    }

    /// Back-propagates from a `1×1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.0].value.dim();
        if out_shape != (1, 1) {
            return Err(AutogradError::Shape {
                op: "backward",
                lhs: out_shape,
                rhs: (1, 1),
            });
        }
        let mut grads: Vec<Option<Array2<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::from_elem((1, 1), T::one()));

        for i in (0..=output.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let value = |v: Var| &nodes[v.0].value;
            let mut acc = |v: Var, contrib: Array2<T>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.zip_mut_with(&contrib, |a, &b| *a = *a + b),
                    slot => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::AddRow(x, r) => {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*x, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*b, g.mapv(|v| -v));
                    acc(*a, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * value(*b));
                    acc(*b, &g * value(*a));
                }
                Op::Scale(x, c) => acc(*x, &g * *c),
                Op::MatMul(a, b) => {
                    if nodes[a.0].requires_grad {
                        acc(*a, g.dot(&value(*b).t()));
                    }
                    if nodes[b.0].requires_grad {
                        acc(*b, value(*a).t().dot(&g));
                    }
                }
                Op::Sparse(s, x) => {
                    let mut gx = Array2::zeros(value(*x).dim());
                    s.transpose_matmul_acc(g.view(), &mut gx);
                    acc(*x, gx);
                }
                Op::Transpose(x) => acc(*x, g.t().as_standard_layout().into_owned()),
                Op::Elu(x) => {
                    let mut d = g.clone();
                    ndarray::Zip::from(&mut d)
                        .and(value(*x))
                        .and(&node.value)
                        .for_each(|d, &xi, &yi| {
                            if xi <= T::zero() {
                                *d = *d * (yi + T::one());
                            }
                        });
                    acc(*x, d);
                }
                Op::Exp(x) => acc(*x, &g * &node.value),
                Op::Log(x) => acc(*x, &g / value(*x)),
                Op::Abs(x) => acc(*x, &g * &value(*x).mapv(T::signum_zero)),
                Op::Square(x) => acc(*x, &g * &value(*x).mapv(|a| a + a)),
                Op::Clamp(x, lo, hi) => {
                    let mask = value(*x).mapv(|a| if a >= *lo && a <= *hi { T::one() } else { T::zero() });
                    acc(*x, &g * &mask);
                }
                Op::Reshape(x) => {
                    let dim = value(*x).dim();
                    acc(*x, g.into_shape_with_order(dim).expect("same element count"));
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = value(*p).len_of(Axis(*axis));
                        let piece = match axis {
                            0 => g.slice(s![offset..offset + len, ..]).to_owned(),
                            _ => g.slice(s![.., offset..offset + len]).to_owned(),
                        };
                        acc(*p, piece);
                        offset += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let mut gx = Array2::zeros(value(*x).dim());
                    let len = g.len_of(Axis(*axis));
                    match axis {
                        0 => gx.slice_mut(s![*start..*start + len, ..]).assign(&g),
                        _ => gx.slice_mut(s![.., *start..*start + len]).assign(&g),
                    }
                    acc(*x, gx);
                }
                Op::Sum(x) => acc(*x, Array2::from_elem(value(*x).dim(), g[[0, 0]])),
                Op::Mean(x) => {
                    let n = T::from_f64(value(*x).len() as f64);
                    acc(*x, Array2::from_elem(value(*x).dim(), g[[0, 0]] / n));
                }
                Op::MeanRows(x) => {
                    let dim = value(*x).dim();
                    let row = &g / T::from_f64(dim.0 as f64);
                    acc(*x, row.broadcast(dim).expect("1×n broadcasts").to_owned());
                }
                Op::TransposeBlocks { x, a, b, c } => acc(*x, permute_blocks(g.view(), *b, *a, *c)),
                Op::Custom(x, backward) => {
                    let gx = backward(value(*x).view(), node.value.view(), g.view());
                    acc(*x, gx);
                }
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !array_finite(g) {
                    return Err(AutogradError::NonFinite {
                        op: op_name(&nodes[i].op),
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }
}

trait SignumZero {
    fn signum_zero(self) -> Self;
}

impl<T: Float> SignumZero for T {
    fn signum_zero(self) -> Self {
        if self > T::zero() {
            T::one()
        } else if self < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    }
}

fn op_name<T: Scalar>(op: &Op<'_, T>) -> &'static str {
    match op {
        Op::Leaf => "leaf gradient",
        Op::Add(..) => "add backward",
        Op::AddRow(..) => "add_row backward",
        Op::Sub(..) => "sub backward",
        Op::Mul(..) => "mul backward",
        Op::Scale(..) => "scale backward",
        Op::MatMul(..) => "matmul backward",
        Op::Sparse(..) => "sparse_matmul backward",
        Op::Transpose(..) => "transpose backward",
        Op::Elu(..) => "elu backward",
        Op::Exp(..) => "exp backward",
        Op::Log(..) => "log backward",
        Op::Abs(..) => "abs backward",
        Op::Square(..) => "square backward",
        Op::Clamp(..) => "clamp backward",
        Op::Reshape(..) => "reshape backward",
        Op::Concat(..) => "concat backward",
        Op::Slice { .. } => "slice backward",
        Op::Sum(..) => "sum backward",
        Op::Mean(..) => "mean backward",
        Op::MeanRows(..) => "mean_rows backward",
        Op::TransposeBlocks { .. } => "transpose_blocks backward",
        Op::Custom(..) => "custom backward",
    }
}

/// `(a, b, c)` blocks of an `a × (b·c)` array, returned as `b × (a·c)`.
fn permute_blocks<T: Scalar>(v: ArrayView2<'_, T>, a: usize, b: usize, c: usize) -> Array2<T> {
    let v = v.as_standard_layout();
    let v3 = v.view().into_shape_with_order((a, b, c)).expect("checked by caller");
    let p = v3.permuted_axes([1, 0, 2]);
    p.as_standard_layout()
        .into_owned()
        .into_shape_with_order((b, a * c))
        .expect("element count preserved")
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` if it does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zero-filled when it does not influence the output.
    pub fn get_or_zeros(&self, v: Var, dim: (usize, usize)) -> Array2<T> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(dim))
    }
}
