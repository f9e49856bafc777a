//! Small dense linear-algebra helpers shared by the model builders and solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{AamError, Result};

/// Condition numbers above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e13;

/// Ratio of extreme eigenvalue magnitudes of a symmetric matrix.
pub fn condition_estimate(h: &DMatrix<f64>) -> f64 {
    if h.nrows() == 0 {
        return 1.0;
    }
    let eig = SymmetricEigen::new(h.clone());
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min == 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Cholesky factor of a symmetric positive-definite matrix, rejecting
/// numerically singular input with a condition estimate.
pub fn spd_factor(h: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(AamError::Numerical("non-finite Hessian".into()));
    }
    let chol = Cholesky::new(h.clone()).ok_or_else(|| AamError::RankDeficient {
        cond: condition_estimate(h),
    })?;
    let l = chol.l_dirty();
    let mut dmax = 0.0_f64;
    let mut dmin = f64::INFINITY;
    for i in 0..l.nrows() {
        let d = l[(i, i)] * l[(i, i)];
        dmax = dmax.max(d);
        dmin = dmin.min(d);
    }
    if l.nrows() > 0 && (dmin <= 0.0 || dmax / dmin > MAX_CONDITION) {
        return Err(AamError::RankDeficient {
            cond: condition_estimate(h),
        });
    }
    Ok(chol)
}

/// Solves `h x = b` for symmetric positive-definite `h`.
pub fn solve_spd(h: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(spd_factor(h)?.solve(b))
}

/// Solves `h X = B` for symmetric positive-definite `h`.
pub fn solve_spd_mat(h: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(spd_factor(h)?.solve(b))
}

/// Solves a general square system by LU with a singularity check.
pub fn solve_general(h: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(AamError::Numerical("non-finite system matrix".into()));
    }
    let lu = h.clone().lu();
    let x = lu.solve(b).ok_or(AamError::RankDeficient {
        cond: f64::INFINITY,
    })?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(AamError::RankDeficient {
            cond: f64::INFINITY,
        });
    }
    Ok(x)
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
pub fn sym_eigen_desc(m: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

/// Principal components of the rows-as-samples data set `samples`
/// (each entry one vector). Returns the mean, the eigenvalues (descending,
/// unbiased normalisation) and unit eigenvectors as columns. Only components
/// with eigenvalue above `1e-12 * largest` are returned.
pub fn pca(samples: &[DVector<f64>]) -> (DVector<f64>, DVector<f64>, DMatrix<f64>) {
    let n = samples.len();
    let dim = samples[0].len();
    let mut mean = DVector::zeros(dim);
    for s in samples {
        mean += s;
    }
    mean /= n as f64;
    let mut centered = DMatrix::zeros(dim, n);
    for (j, s) in samples.iter().enumerate() {
        centered.set_column(j, &(s - &mean));
    }
    let denom = (n.max(2) - 1) as f64;
    let (vals, vecs) = if n < dim {
        let gram = centered.transpose() * &centered / denom;
        let (vals, u) = sym_eigen_desc(gram);
        let vecs = &centered * u;
        (vals, vecs)
    } else {
        let cov = &centered * centered.transpose() / denom;
        sym_eigen_desc(cov)
    };
    let top = vals.iter().cloned().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..vals.len())
        .filter(|&i| vals[i] > 1e-12 * top && vals[i] > 0.0)
        .collect();
    let mut out_vecs = DMatrix::zeros(dim, keep.len());
    let mut out_vals = DVector::zeros(keep.len());
    for (dst, &i) in keep.iter().enumerate() {
        let mut col = vecs.column(i).into_owned();
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
        out_vecs.set_column(dst, &col);
        out_vals[dst] = vals[i];
    }
    (mean, out_vals, out_vecs)
}

/// Gram-Schmidt (two passes) of `cols` against an orthonormal `fixed` block
/// and among themselves. Columns whose residual norm falls below `drop_tol`
/// times their original norm are removed; the indices of kept columns are
/// returned alongside the orthonormal block.
pub fn orthonormalize_against(
    fixed: &DMatrix<f64>,
    cols: &DMatrix<f64>,
    drop_tol: f64,
) -> (DMatrix<f64>, Vec<usize>) {
    let dim = cols.nrows();
    let mut kept: Vec<DVector<f64>> = Vec::new();
    let mut idx = Vec::new();
    for j in 0..cols.ncols() {
        let mut v = cols.column(j).into_owned();
        let orig = v.norm();
        if orig == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for f in fixed.column_iter() {
                let d = f.dot(&v);
                v.axpy(-d, &f, 1.0);
            }
            for k in &kept {
                let d = k.dot(&v);
                v.axpy(-d, k, 1.0);
            }
        }
        let norm = v.norm();
        if norm > drop_tol * orig {
            kept.push(v / norm);
            idx.push(j);
        }
    }
    let mut out = DMatrix::zeros(dim, kept.len());
    for (j, k) in kept.iter().enumerate() {
        out.set_column(j, k);
    }
    (out, idx)
}

/// Largest absolute entry of `m - I`.
pub fn identity_defect(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((m[(i, j)] - target).abs());
        }
    }
    worst
}
