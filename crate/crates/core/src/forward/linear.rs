use nalgebra::{DMatrix, DVector};

use super::ForwardMap;
use crate::error::check_dim;
use crate::{Error, Result};

/// Smallest admissible singular value relative to the largest.
const RANK_TOL: f64 = 1e-10;

/// `y = A u` with its compact SVD `A = V S U^T` and an orthonormal basis of
/// the null space of `A` (the augmentation rows).
#[derive(Debug, Clone)]
pub struct LinearMap {
    matrix: DMatrix<f64>,
    data_basis: DMatrix<f64>,
    singular_values: DVector<f64>,
    param_basis: DMatrix<f64>,
    complement: DMatrix<f64>,
}

impl LinearMap {
    /// Factor a full-rank `n × m` matrix.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let (data_basis, singular_values, param_basis) = compact_svd(&matrix)?;
        let complement = complement_rows(&param_basis);
        Ok(Self { matrix, data_basis, singular_values, param_basis, complement })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if n == 0 || m == 0 {
            return Err(Error::InvalidInput("matrix must be nonempty".into()));
        }
        for r in rows {
            check_dim(m, r.len())?;
        }
        Self::new(DMatrix::from_row_slice(n, m, &rows.concat()))
    }

    pub fn diag(d: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `V`: orthonormal basis of the range of `A` (n × r).
    pub fn data_basis(&self) -> &DMatrix<f64> {
        &self.data_basis
    }

    /// Diagonal of `S`, strictly positive.
    pub fn singular_values(&self) -> &DVector<f64> {
        &self.singular_values
    }

    /// `U`: orthonormal basis of the row space of `A` (m × r).
    pub fn param_basis(&self) -> &DMatrix<f64> {
        &self.param_basis
    }

    /// `Ã`: rows span the null space of `A`; `(m − r) × m`, empty when `n ≥ m`.
    pub fn complement(&self) -> &DMatrix<f64> {
        &self.complement
    }

    pub fn sigma_max(&self) -> f64 {
        self.singular_values.max()
    }

    pub fn is_under_determined(&self) -> bool {
        self.matrix.nrows() < self.matrix.ncols()
    }

    pub fn is_over_determined(&self) -> bool {
        self.matrix.nrows() > self.matrix.ncols()
    }

    /// `Ã u`.
    pub fn complement_apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.matrix.ncols(), u.len())?;
        Ok((&self.complement * DVector::from_column_slice(u)).as_slice().to_vec())
    }
}

impl ForwardMap for LinearMap {
    fn in_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn out_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.in_dim(), u.len())?;
        Ok((&self.matrix * DVector::from_column_slice(u)).as_slice().to_vec())
    }

    fn grad_adjoint(&self, _u: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.out_dim(), xi.len())?;
        Ok(self.matrix.tr_mul(&DVector::from_column_slice(xi)).as_slice().to_vec())
    }
}

/// `(V, S, U)` with `A = V diag(S) U^T`, rejecting rank-deficient input.
fn compact_svd(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    if a.is_empty() || a.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("matrix must be nonempty and finite".into()));
    }
    let svd = a.clone().svd(true, true);
    let s = svd.singular_values.clone();
    let smax = s.max();
    if !(smax > 0.0) || s.min() <= RANK_TOL * smax {
        return Err(Error::NotFullRank);
    }
    let v = svd.u.expect("left singular vectors requested");
    let u = svd.v_t.expect("right singular vectors requested").transpose();
    Ok((v, s, u))
}

/// Rows forming an orthonormal basis of the orthogonal complement of the
/// columns of `basis`, by pivoted Gram–Schmidt on the standard basis.
/// Each row's first entry above `1e-12` in magnitude is made positive.
pub(crate) fn complement_rows(basis: &DMatrix<f64>) -> DMatrix<f64> {
    let m = basis.nrows();
    let k = m - basis.ncols();
    let mut found: Vec<DVector<f64>> = basis.column_iter().map(|c| c.into_owned()).collect();
    let mut rows = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<DVector<f64>> = None;
        for i in 0..m {
            let mut v = DVector::zeros(m);
            v[i] = 1.0;
            // Two passes of classical Gram–Schmidt.
            for _ in 0..2 {
                for b in &found {
                    let c = b.dot(&v);
                    v.axpy(-c, b, 1.0);
                }
            }
            if best.as_ref().is_none_or(|b| v.norm() > b.norm()) {
                best = Some(v);
            }
        }
        let mut v = best.expect("m >= 1");
        v /= v.norm();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.neg_mut();
            }
        }
        found.push(v.clone());
        rows.push(v);
    }
    let mut out = DMatrix::zeros(k, m);
    for (r, v) in rows.iter().enumerate() {
        out.row_mut(r).copy_from(&v.transpose());
    }
    out
}

/// Orthonormal rows spanning `null(A)` for a full-row-rank flat `A`; empty
/// when `A` has at least as many rows as columns.
pub fn augment(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (_, _, u) = compact_svd(a)?;
    Ok(complement_rows(&u))
}
