//! Sparse storage, the forward-problem linear solvers and a few dense helpers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T> {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> CsrMatrix<T> {
    /// Builds a matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, mut triplets: Vec<(usize, usize, T)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<T> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates `(col, value)` over the stored entries of `row`.
    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let range = self.row_ptr[row]..self.row_ptr[row + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.row(row)
            .find(|&(c, _)| c == col)
            .map(|(_, v)| v)
            .unwrap_or_else(T::zero)
    }

    pub fn mul_vec(&self, x: &DVector<T>) -> DVector<T> {
        assert_eq!(x.len(), self.ncols);
        DVector::from_fn(self.nrows, |i, _| {
            self.row(i).fold(T::zero(), |acc, (c, v)| acc + v * x[c])
        })
    }

    /// `selfᵀ x`.
    pub fn tr_mul_vec(&self, x: &DVector<T>) -> DVector<T> {
        assert_eq!(x.len(), self.nrows);
        let mut out = DVector::zeros(self.ncols);
        for i in 0..self.nrows {
            let xi = x[i];
            for (c, v) in self.row(i) {
                out[c] += v * xi;
            }
        }
        out
    }

    /// `self · dense`.
    pub fn mul_dense(&self, dense: &DMatrix<T>) -> DMatrix<T> {
        assert_eq!(dense.nrows(), self.ncols);
        let mut out = DMatrix::zeros(self.nrows, dense.ncols());
        for i in 0..self.nrows {
            for (c, v) in self.row(i) {
                for k in 0..dense.ncols() {
                    out[(i, k)] += v * dense[(c, k)];
                }
            }
        }
        out
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (c, v) in self.row(i) {
                out[(i, c)] += v;
            }
        }
        out
    }

    /// Largest `|i - j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        (0..self.nrows)
            .flat_map(|i| self.row(i).map(move |(c, _)| c.abs_diff(i)))
            .max()
            .unwrap_or(0)
    }

    pub fn diagonal(&self) -> DVector<T> {
        DVector::from_fn(self.nrows.min(self.ncols), |i, _| self.get(i, i))
    }
}

/// Cholesky factor of a symmetric positive-definite banded matrix.
///
/// Storage is row-wise: `band[i][k]` holds `L[i, i - bw + k]`.
#[derive(Debug, Clone)]
pub struct BandedCholesky<T> {
    n: usize,
    bw: usize,
    band: Vec<T>,
}

impl<T: Real> BandedCholesky<T> {
    pub fn factor(a: &CsrMatrix<T>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::invalid("banded Cholesky needs a square matrix"));
        }
        let bw = a.bandwidth();
        let w = bw + 1;
        let mut band = vec![T::zero(); n * w];
        for i in 0..n {
            for (c, v) in a.row(i) {
                if c <= i {
                    band[i * w + (c + bw - i)] = v;
                }
            }
        }
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let mut sum = band[i * w + (j + bw - i)];
                let k0 = j0.max(j.saturating_sub(bw));
                for k in k0..j {
                    sum -= band[i * w + (k + bw - i)] * band[j * w + (k + bw - j)];
                }
                if j == i {
                    if sum <= T::zero() || !sum.is_finite_value() {
                        return Err(Error::Singular(format!(
                            "non-positive pivot {:e} at row {i}",
                            sum.as_f64()
                        )));
                    }
                    band[i * w + bw] = sum.sqrt();
                } else {
                    band[i * w + (j + bw - i)] = sum / band[j * w + bw];
                }
            }
        }
        Ok(Self { n, bw, band })
    }

    pub fn solve(&self, b: &DVector<T>) -> DVector<T> {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        let mut x = b.clone();
        for i in 0..n {
            let mut s = x[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.band[i * w + (k + bw - i)] * x[k];
            }
            x[i] = s / self.band[i * w + bw];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n.min(i + bw + 1) {
                s -= self.band[k * w + (i + bw - k)] * x[k];
            }
            x[i] = s / self.band[i * w + bw];
        }
        x
    }
}

/// Jacobi-preconditioned conjugate gradients for SPD systems.
pub fn pcg<T: Real>(
    a: &CsrMatrix<T>,
    b: &DVector<T>,
    rel_tol: T,
    max_iter: usize,
) -> Result<DVector<T>> {
    let diag = a.diagonal();
    if diag.iter().any(|&d| d <= T::zero()) {
        return Err(Error::Singular("non-positive diagonal in CG system".into()));
    }
    let b_norm = b.norm();
    let mut x = DVector::zeros(b.len());
    if b_norm == T::zero() {
        return Ok(x);
    }
    let mut r = b.clone();
    let mut z = r.component_div(&diag);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for _ in 0..max_iter {
        let ap = a.mul_vec(&p);
        let alpha = rz / p.dot(&ap);
        x.axpy(alpha, &p, T::one());
        r.axpy(-alpha, &ap, T::one());
        if r.norm() <= rel_tol * b_norm {
            return Ok(x);
        }
        z = r.component_div(&diag);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + &p * beta;
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        residual: (r.norm() / b_norm).as_f64(),
    })
}

/// `(m + mᵀ) / 2` together with the relative asymmetry `‖m − mᵀ‖_F / ‖m‖_F`.
pub fn symmetrize<T: Real>(m: &DMatrix<T>) -> (DMatrix<T>, T) {
    let t = m.transpose();
    let norm = m.norm();
    let asym = if norm > T::zero() {
        (m - &t).norm() / norm
    } else {
        T::zero()
    };
    ((m + t) * T::lit(0.5), asym)
}

/// Symmetric eigendecomposition sorted by nonincreasing eigenvalue, with each
/// eigenvector's largest-magnitude entry made positive.
pub fn sorted_symmetric_eigen<T: Real>(m: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let eig = SymmetricEigen::new(m.clone());
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]);
    let mut vectors = DMatrix::zeros(m.nrows(), n);
    for (dst, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let pivot = col.iter().copied().fold(T::zero(), |best, v| {
            if v.abs() > best.abs() {
                v
            } else {
                best
            }
        });
        let sign = if pivot < T::zero() { -T::one() } else { T::one() };
        vectors.set_column(dst, &(col * sign));
    }
    (values, vectors)
}

/// `log |det m|` and the sign of the determinant, via LU.
pub fn log_abs_det<T: Real>(m: &DMatrix<T>) -> (T, T) {
    let lu = m.clone().lu();
    let u = lu.u();
    let mut log = T::zero();
    let mut sign = T::one();
    for i in 0..u.nrows() {
        let d = u[(i, i)];
        if d == T::zero() {
            return (T::from_f64(f64::NEG_INFINITY).unwrap(), T::zero());
        }
        if d < T::zero() {
            sign = -sign;
        }
        log += d.abs().ln();
    }
    let parity: T = lu.p().determinant();
    (log, sign * parity)
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse<T: Real>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular("matrix is not positive definite".into()))
}

/// Relative Frobenius distance `‖a − b‖_F / ‖b‖_F`.
pub fn rel_frobenius<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    (a - b).norm() / b.norm()
}
