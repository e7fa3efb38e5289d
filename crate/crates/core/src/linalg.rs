//! Dense linear-algebra helpers shared by the analysis modules.
//!
//! Vectorization is column-major throughout: `vec(X)` stacks the columns of
//! `X`, which is also nalgebra's storage order, so `vec(A X B) = (Bᵀ ⊗ A) vec(X)`.

use nalgebra::{Complex, DMatrix, DVector, Schur};

use crate::error::{Error, Result};

pub type Complex64 = Complex<f64>;

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Kronecker product of a column vector with a matrix, `v ⊗ M`.
pub fn kron_vec_mat(v: &DVector<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let mut out = DMatrix::zeros(v.len() * r, c);
    for (i, vi) in v.iter().enumerate() {
        out.view_mut((i * r, 0), (r, c)).copy_from(&(m * *vi));
    }
    out
}

/// Kronecker product of a matrix with a column vector, `M ⊗ v`.
pub fn kron_mat_vec(m: &DMatrix<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    let vm = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    m.kronecker(&vm)
}

pub fn kron_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() * b.len());
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            out[i * b.len() + j] = ai * bj;
        }
    }
    out
}

pub fn vec_col(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v)
}

/// Replaces `m` by `(m + mᵀ)/2` and returns the largest asymmetry that was removed.
pub fn symmetrize(m: &mut DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut drift = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            let a = m[(i, j)];
            let b = m[(j, i)];
            drift = drift.max((a - b).abs());
            let avg = 0.5 * (a + b);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    drift
}

/// `‖actual − reference‖ / ‖reference‖`, falling back to the absolute
/// difference when the reference is zero.
pub fn rel_diff(actual: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(actual.len(), reference.len(), "rel_diff length mismatch");
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, r) in actual.iter().zip(reference) {
        num += (a - r) * (a - r);
        den += r * r;
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    }
}

/// All eigenvalues of a real square matrix from a real Schur decomposition.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    if !m.is_square() {
        return Err(Error::invalid(format!(
            "eigenvalues need a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    let max_iter = 10_000 + 200 * m.nrows();
    let schur = Schur::try_new(m.clone(), f64::EPSILON, max_iter)
        .ok_or_else(|| Error::Numerical("Schur iteration did not converge".into()))?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

/// Number of singular values above `tol`.
pub fn rank_complex(m: &DMatrix<Complex64>, tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let svd = m.clone().svd(false, false);
    svd.singular_values.iter().filter(|s| **s > tol).count()
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|x| Complex64::new(x, 0.0))
}

/// Solves `a x = b` by LU with partial pivoting.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    if !a.is_square() || a.nrows() != b.len() {
        return Err(Error::invalid(format!(
            "{what}: cannot solve {}x{} system with rhs of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let x = a
        .clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Singular(what.to_string()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(what.to_string()));
    }
    Ok(x)
}

/// Smallest singular value relative to the largest; 0 for an empty matrix.
pub fn inverse_condition(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 1.0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.max();
    if max == 0.0 {
        0.0
    } else {
        sv.min() / max
    }
}

pub fn is_probability_vector(p: &DVector<f64>, tol: f64) -> bool {
    p.iter().all(|x| x.is_finite() && *x >= -tol) && (p.sum() - 1.0).abs() <= tol
}
