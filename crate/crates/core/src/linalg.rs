//! Small numerical helpers shared by the estimators and the adjustment code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Column means of a T x N matrix.
pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let t = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / t))
}

/// Subtract column means; returns the centered matrix and the means.
pub fn center_columns(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let means = column_means(m);
    let mut y = m.clone();
    for j in 0..y.ncols() {
        let mu = means[j];
        for i in 0..y.nrows() {
            y[(i, j)] -= mu;
        }
    }
    (y, means)
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// decreasing order and deterministically fixed column signs.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    fix_column_signs(&mut vectors);
    (values, vectors)
}

/// Flip each column so its largest-magnitude entry is positive.
/// Makes eigenvector-based constructions reproducible across code paths.
pub fn fix_column_signs(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for i in 0..m.nrows() {
            let a = m[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if m[(best, j)] < 0.0 {
            for i in 0..m.nrows() {
                m[(i, j)] = -m[(i, j)];
            }
        }
    }
}

/// Orthonormal basis (N x M) of the row span of an M x N matrix, via QR of
/// the transpose. Errors if the rows are not linearly independent.
pub fn row_span_orthonormal(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (m, _n) = (x.nrows(), x.ncols());
    let qr = x.transpose().qr();
    let r = qr.r();
    let scale = x.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-300);
    for i in 0..m {
        if r[(i, i)].abs() <= 1e-12 * scale * (x.ncols() as f64) {
            return Err(Error::RankDeficient(format!(
                "exposure row span has rank < {m} (pivot {i} negligible)"
            )));
        }
    }
    let mut q = qr.q();
    fix_column_signs(&mut q);
    Ok(q)
}

/// Orthonormal basis of the orthogonal complement of the column span of `q`
/// (q is N x M with orthonormal columns); returns N x (N - M).
pub fn orthonormal_complement(q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = q.nrows();
    let m = q.ncols();
    // Eigenvectors of the projector I - QQ' with eigenvalue ~1 span the complement.
    let mut proj = DMatrix::identity(n, n) - q * q.transpose();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (proj[(i, j)] + proj[(j, i)]);
            proj[(i, j)] = v;
            proj[(j, i)] = v;
        }
    }
    let (_vals, vecs) = sym_eigen_desc(&proj);
    vecs.columns(0, n - m).into_owned()
}

/// Largest absolute entry of M'M - I; orthonormality defect.
pub fn orthonormality_defect(m: &DMatrix<f64>) -> f64 {
    let g = m.transpose() * m;
    let mut worst = 0.0f64;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

/// Quadratic forms p_i' C p_i for every column p_i of `basis`.
pub fn quadratic_forms(cov: &DMatrix<f64>, basis: &DMatrix<f64>) -> DVector<f64> {
    let cp = cov * basis;
    DVector::from_iterator(
        basis.ncols(),
        basis.column_iter().zip(cp.column_iter()).map(|(p, c)| p.dot(&c)),
    )
}

/// Frobenius-relative distance ||a - b|| / ||b||.
pub fn frobenius_relative(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}
