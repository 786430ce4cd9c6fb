//! Compressed sparse row matrices for the assembled bilinear forms.
//!
//! The assembly path needs only a narrow set of operations — build from
//! triplets, matrix-vector product, bilinear evaluation uᵀMv, dense export,
//! entrywise linear combination on a shared pattern, and a deterministic
//! coordinate dump — so a small dedicated type beats a general sparse
//! library here. Symmetry of the stored matrices is a structural property of
//! the assembly loop (both (i,j) and (j,i) receive the same contribution
//! sequence), not something this type enforces.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Square sparse matrix in compressed sparse row form.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds an `n x n` matrix from coordinate triplets, summing duplicates.
    ///
    /// Duplicate entries are accumulated in their order of appearance, so a
    /// fixed triplet sequence yields a bitwise-reproducible matrix.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.sort_by_key(|&idx| (triplets[idx].0, triplets[idx].1, idx));

        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        let mut last: Option<(usize, usize)> = None;
        for &idx in &order {
            let (r, c, v) = triplets[idx];
            assert!(r < n && c < n, "triplet ({r}, {c}) out of range for n = {n}");
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                row_ptr[r + 1] += 1;
                col_idx.push(c);
                vals.push(v);
                last = Some((r, c));
            }
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        CsrMatrix { n, row_ptr, col_idx, vals }
    }

    /// Matrix dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of stored entries.
    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Stored value at `(i, j)`, zero if the entry is not present.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        match self.col_idx[lo..hi].binary_search(&j) {
            Ok(pos) => self.vals[lo + pos],
            Err(_) => 0.0,
        }
    }

    /// `y = M x`.
    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.n, "matvec dimension mismatch");
        let mut y = DVector::zeros(self.n);
        for r in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            y[r] = acc;
        }
        y
    }

    /// `uᵀ M v`.
    pub fn bilinear(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        if u.len() != self.n || v.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "bilinear form of size {} applied to vectors of length {} and {}",
                self.n,
                u.len(),
                v.len()
            )));
        }
        let mut acc = 0.0;
        for (r, &ur) in u.iter().enumerate().take(self.n) {
            let mut row = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                row += self.vals[k] * v[self.col_idx[k]];
            }
            acc += ur * row;
        }
        Ok(acc)
    }

    /// Dense copy.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[(r, self.col_idx[k])] = self.vals[k];
            }
        }
        out
    }

    /// `self + alpha * other`, merging the two sparsity patterns.
    pub fn scaled_add(&self, alpha: f64, other: &CsrMatrix) -> Result<CsrMatrix> {
        if self.n != other.n {
            return Err(Error::DimensionMismatch(format!(
                "cannot add matrices of size {} and {}",
                self.n, other.n
            )));
        }
        let mut triplets = Vec::with_capacity(self.nnz() + other.nnz());
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                triplets.push((r, self.col_idx[k], self.vals[k]));
            }
            for k in other.row_ptr[r]..other.row_ptr[r + 1] {
                triplets.push((r, other.col_idx[k], alpha * other.vals[k]));
            }
        }
        Ok(CsrMatrix::from_triplets(self.n, &triplets))
    }

    /// Largest absolute asymmetry `max |m_ij - m_ji|` (diagnostic).
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                if c > r {
                    worst = worst.max((self.vals[k] - self.get(c, r)).abs());
                }
            }
        }
        worst
    }

    /// Coordinate-format debug dump: `row col value` per line, sorted by
    /// (row, col), values at 17 significant digits.
    pub fn dump_coo(&self) -> String {
        let mut out = String::new();
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out.push_str(&format!("{} {} {:.16e}\n", r, self.col_idx[k], self.vals[k]));
            }
        }
        out
    }
}
