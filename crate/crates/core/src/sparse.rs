//! Sparse matrices in canonical coordinate form.
//!
//! Entries are kept sorted row-major with duplicates merged, so two matrices
//! with the same content have the same byte representation. A row-pointer
//! array is derived on construction for row-wise products.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("entry ({row}, {col}) outside a {rows}x{cols} matrix")]
    OutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("dimension mismatch: {lhs:?} times {rhs:?}")]
    Dimension { lhs: (usize, usize), rhs: (usize, usize) },
    #[error("corrupt sparse matrix file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
    row_ptr: Vec<usize>,
}

impl SparseMatrix {
    /// Builds a matrix from unordered triplets; duplicate positions are summed.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self, SparseError> {
        if let Some(&(row, col, _)) = triplets.iter().find(|t| t.0 >= rows || t.1 >= cols) {
            return Err(SparseError::OutOfRange { row, col, rows, cols });
        }
        // stable sort keeps the summation order of duplicates deterministic
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut entries: Vec<(usize, usize, f64)> = Vec::with_capacity(triplets.len());
        for (r, c, v) in triplets {
            match entries.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => entries.push((r, c, v)),
            }
        }
        Ok(Self::from_canonical(rows, cols, entries))
    }

    fn from_canonical(rows: usize, cols: usize, entries: Vec<(usize, usize, f64)>) -> Self {
        let mut row_ptr = vec![0usize; rows + 1];
        for &(r, _, _) in &entries {
            row_ptr[r + 1] += 1;
        }
        for i in 0..rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            rows,
            cols,
            entries,
            row_ptr,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_canonical(n, n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn row(&self, r: usize) -> &[(usize, usize, f64)] {
        &self.entries[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r)
            .binary_search_by_key(&c, |e| e.1)
            .map(|i| self.row(r)[i].2)
            .unwrap_or(0.0)
    }

    pub fn transpose(&self) -> Self {
        let t = self.entries.iter().map(|&(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.cols, self.rows, t).expect("transpose keeps indices in range")
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut d = Array2::zeros((self.rows, self.cols));
        for &(r, c, v) in &self.entries {
            d[[r, c]] = v;
        }
        d
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols && self.entries.iter().all(|&(r, c, v)| self.get(c, r) == v)
    }

    /// `self · x` for a dense right-hand side.
    pub fn matmul<T: Float + 'static>(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>, SparseError> {
        if x.nrows() != self.cols {
            return Err(SparseError::Dimension {
                lhs: self.shape(),
                rhs: x.dim(),
            });
        }
        let mut out = Array2::zeros((self.rows, x.ncols()));
        self.matmul_into(x, out.view_mut());
        Ok(out)
    }

    fn matmul_into<T: Float + 'static>(&self, x: ArrayView2<'_, T>, mut out: ArrayViewMut2<'_, T>) {
        for (r, mut out_row) in out.axis_iter_mut(Axis(0)).enumerate() {
            for &(_, c, v) in self.row(r) {
                let v = T::from(v).unwrap();
                out_row.zip_mut_with(&x.row(c), |o, &xi| *o = *o + v * xi);
            }
        }
    }

    /// Accumulates `selfᵀ · g` into `acc` without materializing the transpose.
    pub fn transpose_matmul_acc<T: Float + 'static>(&self, g: ArrayView2<'_, T>, acc: &mut Array2<T>) {
        debug_assert_eq!(g.nrows(), self.rows);
        debug_assert_eq!(acc.nrows(), self.cols);
        for &(r, c, v) in &self.entries {
            let v = T::from(v).unwrap();
            acc.row_mut(c).zip_mut_with(&g.row(r), |a, &gi| *a = *a + v * gi);
        }
    }

    /// Little-endian binary form: `u64 rows, u64 cols, u64 nnz`, then
    /// `nnz × (u64 row, u64 col, f64 value)`.
    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for &(r, c, v) in &self.entries {
            w.write_all(&(r as u64).to_le_bytes())?;
            w.write_all(&(c as u64).to_le_bytes())?;
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(24 + 24 * self.entries.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, SparseError> {
        let mut word = [0u8; 8];
        let mut next = |r: &mut dyn Read| -> Result<[u8; 8], SparseError> {
            r.read_exact(&mut word)
                .map_err(|e| SparseError::Corrupt(format!("truncated: {e}")))?;
            Ok(word)
        };
        let rows = u64::from_le_bytes(next(r)?) as usize;
        let cols = u64::from_le_bytes(next(r)?) as usize;
        let nnz = u64::from_le_bytes(next(r)?) as usize;
        let mut entries = Vec::with_capacity(nnz.min(1 << 24));
        for _ in 0..nnz {
            let row = u64::from_le_bytes(next(r)?) as usize;
            let col = u64::from_le_bytes(next(r)?) as usize;
            let v = f64::from_le_bytes(next(r)?);
            entries.push((row, col, v));
        }
        let canonical = entries.windows(2).all(|w| (w[0].0, w[0].1) < (w[1].0, w[1].1));
        if !canonical {
            return Err(SparseError::Corrupt("entries not in canonical order".into()));
        }
        if let Some(&(row, col, _)) = entries.iter().find(|e| e.0 >= rows || e.1 >= cols) {
            return Err(SparseError::OutOfRange { row, col, rows, cols });
        }
        Ok(Self::from_canonical(rows, cols, entries))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SparseError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SparseError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}
