//! Chebyshev spectral graph convolution.
//!
//! `y = Σ_{k<K} T_k(L̃)·x·θ_k + b`, with the polynomials evaluated by the
//! recurrence `T_0 x = x`, `T_1 x = L̃x`, `T_k x = 2L̃·T_{k−1}x − T_{k−2}x`.
//!
//! Signals are batched column-wise: a batch of `B` signals with `C` channels
//! on `N` vertices is one `N × (B·C)` matrix, so each sparse product serves
//! the whole batch. The coefficients of order `k` occupy rows
//! `k·C_in .. (k+1)·C_in` of the `(K·C_in) × C_out` theta matrix.

use ndarray::Array2;

use crate::autograd::{AutogradError, Result, Scalar, Tape, Var};
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct ChebLayerParams<T> {
    /// `(K·C_in) × C_out`, the `K × C_in × C_out` coefficient tensor in row-major order.
    pub theta: Array2<T>,
    /// `1 × C_out`.
    pub bias: Array2<T>,
    pub order: usize,
}

impl<T: Scalar> ChebLayerParams<T> {
    pub fn zeros(order: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            theta: Array2::zeros((order * c_in, c_out)),
            bias: Array2::zeros((1, c_out)),
            order,
        }
    }

    pub fn c_in(&self) -> usize {
        self.theta.nrows() / self.order
    }

    pub fn c_out(&self) -> usize {
        self.theta.ncols()
    }
}

/// Batched convolution on the tape. `x` is `N × (batch·c_in)`.
pub fn cheb_conv_tape<'a, T: Scalar>(
    tape: &Tape<'a, T>,
    x: Var,
    laplacian: &'a SparseMatrix,
    theta: Var,
    bias: Var,
    order: usize,
    batch: usize,
) -> Result<Var> {
    let (n, width) = tape.shape(x);
    if order == 0 {
        return Err(AutogradError::Invalid {
            op: "cheb_conv",
            msg: "order must be at least 1".into(),
        });
    }
    if laplacian.rows() != n {
        return Err(AutogradError::Shape {
            op: "cheb_conv",
            lhs: laplacian.shape(),
            rhs: (n, width),
        });
    }
    let (theta_rows, c_out) = tape.shape(theta);
    if batch == 0 || width % batch != 0 || theta_rows != order * (width / batch) {
        return Err(AutogradError::Shape {
            op: "cheb_conv",
            lhs: (n, width),
            rhs: (theta_rows, c_out),
        });
    }
    let c_in = width / batch;

    let mut terms = vec![x];
    if order > 1 {
        terms.push(tape.sparse_matmul(laplacian, x)?);
    }
    for k in 2..order {
        let lx = tape.sparse_matmul(laplacian, terms[k - 1])?;
        let twice = tape.scale(lx, T::from_f64(2.0))?;
        terms.push(tape.sub(twice, terms[k - 2])?);
    }
    let rows: Vec<Var> = terms
        .iter()
        .map(|&t| tape.reshape(t, n * batch, c_in))
        .collect::<Result<_>>()?;
    let stacked = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 1)? };
    let y = tape.matmul(stacked, theta)?;
    let y = tape.add_row(y, bias)?;
    tape.reshape(y, n, batch * c_out)
}

/// Single-signal convolution of an `N × C_in` array.
pub fn cheb_conv<T: Scalar>(x: &Array2<T>, laplacian: &SparseMatrix, params: &ChebLayerParams<T>) -> Result<Array2<T>> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let theta = tape.constant(params.theta.clone())?;
    let bias = tape.constant(params.bias.clone())?;
    let y = cheb_conv_tape(&tape, xv, laplacian, theta, bias, params.order, 1)?;
    let out = tape.value(y).clone();
    Ok(out)
}
