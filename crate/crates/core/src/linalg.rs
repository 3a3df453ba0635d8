//! Small dense complex linear algebra shared by the solver and the designer.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Eigen-decomposition of a Hermitian matrix, eigenvalues sorted descending.
pub fn hermitian_eigen(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(hermitian_part(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Largest eigenvalue and a unit-norm eigenvector for it.
pub fn principal_eigen(m: &CMatrix) -> (f64, CVector) {
    let (values, vectors) = hermitian_eigen(m);
    let mut v = vectors.column(0).into_owned();
    let norm = v.norm();
    v /= Complex64::new(norm, 0.0);
    (values[0], v)
}

pub fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * Complex64::new(0.5, 0.0)
}

/// Euclidean projection of `v` onto `{x >= 0, sum x = total}`.
pub fn project_simplex(v: &[f64], total: f64) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut shift = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        cumulative += x;
        let candidate = (cumulative - total) / (i + 1) as f64;
        if x - candidate > 0.0 {
            shift = candidate;
        }
    }
    v.iter().map(|&x| (x - shift).max(0.0)).collect()
}

/// Projection onto the unit-trace PSD set (the spectraplex).
pub fn project_spectraplex(m: &CMatrix) -> CMatrix {
    let n = m.nrows();
    let (values, vectors) = hermitian_eigen(m);
    let clipped = project_simplex(&values, 1.0);
    let mut out = CMatrix::zeros(n, n);
    for (k, &lambda) in clipped.iter().enumerate() {
        if lambda > 0.0 {
            let col = vectors.column(k);
            out.gerc(Complex64::new(lambda, 0.0), &col, &col, Complex64::new(1.0, 0.0));
        }
    }
    hermitian_part(&out)
}

/// Real part of the Frobenius inner product `<a, b> = Re Tr(a^H b)`.
pub fn inner(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x.conj() * y).re).sum()
}

/// `Re(c^H U c)`.
pub fn quadratic_form(u: &CMatrix, c: &CVector) -> f64 {
    let n = c.len();
    let (data, cs) = (u.as_slice(), c.as_slice());
    let mut total = 0.0;
    for (j, cj) in cs.iter().enumerate() {
        let column = &data[j * n..(j + 1) * n];
        let mut acc = Complex64::new(0.0, 0.0);
        for (ci, uij) in cs.iter().zip(column) {
            acc += ci.conj() * uij;
        }
        total += (acc * cj).re;
    }
    total
}

pub fn outer(c: &CVector) -> CMatrix {
    c * c.adjoint()
}

/// Rotates `v` so its first non-negligible coordinate is real and non-negative.
pub fn canonicalize_phase(v: &mut CVector) {
    let scale = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if let Some(pivot) = v.iter().find(|z| z.norm() > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        let rotation = pivot.conj() / pivot.norm();
        *v *= rotation;
    }
}

/// Singular values of a complex matrix, descending.
pub fn singular_values(m: &CMatrix) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}
