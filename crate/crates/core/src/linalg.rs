//! Column-major vectorization and the Kronecker helpers used by the weight
//! Jacobian.
//!
//! `vec` stacks the columns of a matrix, so that
//! `vec(A B C) = (C^T ⊗ A) vec(B)` holds verbatim. Weight matrices are stored
//! in the flat parameter vector in exactly this order.

use nalgebra::DMatrix;

/// Stacks the columns of `m` into one vector of length `rows * cols`.
pub fn vec(m: &DMatrix<f64>) -> Vec<f64> {
    // nalgebra storage is column-major already
    m.as_slice().to_vec()
}

/// Inverse of [`vec`].
///
/// Panics if `v.len() != rows * cols`.
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    assert_eq!(v.len(), rows * cols, "unvec: length does not match shape");
    DMatrix::from_column_slice(rows, cols, v)
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// `I_k ⊗ v^T`, a `k × (k·len(v))` matrix with `v^T` repeated along the
/// block diagonal.
pub fn identity_kron_row(k: usize, v: &[f64]) -> DMatrix<f64> {
    let l = v.len();
    let mut out = DMatrix::zeros(k, k * l);
    for b in 0..k {
        for (a, &va) in v.iter().enumerate() {
            out[(b, b * l + a)] = va;
        }
    }
    out
}

/// `v^T ⊗ I_k`. Not used by the Jacobian; kept so the gradient check can
/// demonstrate that the transposed factor ordering is wrong under
/// column-major `vec`.
pub fn row_kron_identity(v: &[f64], k: usize) -> DMatrix<f64> {
    let l = v.len();
    let mut out = DMatrix::zeros(k, k * l);
    for (a, &va) in v.iter().enumerate() {
        for b in 0..k {
            out[(b, a * k + b)] = va;
        }
    }
    out
}
