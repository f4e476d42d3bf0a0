//! Small dense helpers on `f64` slices. Iterates and gradients are plain
//! `Vec<f64>`; matrices that need factorizations go through nalgebra.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn add_assign(y: &mut [f64], x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Row-major `d x d` matrix times vector, written into `out`.
pub fn matvec(mat: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (row, o) in mat.chunks_exact(d).zip(out.iter_mut()) {
        *o = dot(row, x);
    }
}

/// Symmetric eigendecomposition with eigenvalues clipped below at zero.
/// Fails if any eigenvalue is below `-tol`.
pub fn psd_eigen(m: &DMatrix<f64>, tol: f64) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = sym.symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -tol {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    eig.eigenvalues.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(eig)
}

/// Principal square root of a symmetric PSD matrix.
pub fn sqrt_psd(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m, tol)?;
    let q = &eig.eigenvectors;
    let s = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(q * s * q.transpose())
}
