//! Dense complex linear-algebra helpers shared by every stage.
//!
//! Everything is complex double precision; real data is embedded with zero
//! imaginary parts.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

pub(crate) const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub(crate) const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Embeds a real matrix.
pub fn from_real(m: &DMatrix<f64>) -> CMatrix {
    m.map(|x| Complex64::new(x, 0.0))
}

/// Builds a complex matrix from real row-major data.
pub fn real_matrix(rows: usize, cols: usize, row_major: &[f64]) -> CMatrix {
    assert_eq!(row_major.len(), rows * cols, "real_matrix: data length");
    CMatrix::from_fn(rows, cols, |i, j| Complex64::new(row_major[i * cols + j], 0.0))
}

pub fn real_vector(values: &[f64]) -> CVector {
    CVector::from_iterator(values.len(), values.iter().map(|&x| Complex64::new(x, 0.0)))
}

pub fn identity(n: usize) -> CMatrix {
    CMatrix::identity(n, n)
}

pub fn scaled_identity(n: usize, s: f64) -> CMatrix {
    CMatrix::from_diagonal_element(n, n, Complex64::new(s, 0.0))
}

/// True when every imaginary part is exactly zero.
pub fn is_real(m: &CMatrix) -> bool {
    m.iter().all(|z| z.im == 0.0)
}

/// `(M + M*) / 2`.
pub fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()).scale(0.5)
}

/// Relative Frobenius distance between `M` and `M*`.
pub fn hermitian_defect(m: &CMatrix) -> f64 {
    let scale = m.norm();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.adjoint()).norm() / scale
}

/// Eigenvalues of a general complex square matrix via the complex Schur form.
pub fn eigenvalues(m: &CMatrix) -> Result<Vec<Complex64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "eigenvalues of a non-square {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 1000 * n.max(10))
        .ok_or_else(|| Error::Numerical("Schur decomposition did not converge".into()))?;
    let (_, t) = schur.unpack();
    Ok((0..n).map(|i| t[(i, i)]).collect())
}

/// Largest eigenvalue modulus; zero for an empty matrix.
pub fn spectral_radius(m: &CMatrix) -> Result<f64> {
    Ok(eigenvalues(m)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Thin SVD `m = U diag(s) V*` with `s` non-increasing.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: CMatrix,
    pub s: Vec<f64>,
    pub v_t: CMatrix,
}

impl Svd {
    fn reconstruction_error(&self, m: &CMatrix) -> f64 {
        let mut us = self.u.clone();
        for (j, s) in self.s.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        (us * &self.v_t - m).norm()
    }

    fn sorted(u: CMatrix, s: &[f64], v_t: CMatrix) -> Self {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
        Self {
            u: CMatrix::from_fn(u.nrows(), idx.len(), |i, k| u[(i, idx[k])]),
            s: idx.iter().map(|&k| s[k]).collect(),
            v_t: CMatrix::from_fn(idx.len(), v_t.ncols(), |k, j| v_t[(idx[k], j)]),
        }
    }
}

fn plain_svd(m: &CMatrix, eps: f64) -> Option<Svd> {
    let svd = m.clone().try_svd(true, true, eps, 10_000)?;
    Some(Svd::sorted(svd.u?, svd.singular_values.as_slice(), svd.v_t?))
}

/// One-sided (Hestenes) Jacobi SVD. Slow but accurate on rank-deficient
/// input; columns of `U` belonging to zero singular values are left zero.
fn jacobi_svd(m: &CMatrix) -> Svd {
    if m.nrows() < m.ncols() {
        let t = jacobi_svd(&m.adjoint());
        return Svd {
            u: t.v_t.adjoint(),
            s: t.s,
            v_t: t.u.adjoint(),
        };
    }
    let n = m.ncols();
    let mut u = m.clone();
    let mut v = identity(n);
    for _ in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = u.column(p).norm_squared();
                let beta = u.column(q).norm_squared();
                let gamma = u.column(p).dotc(&u.column(q));
                let g = gamma.norm();
                if g <= 1e-15 * (alpha * beta).sqrt() || g == 0.0 {
                    continue;
                }
                rotated = true;
                // rotate the phase of column q so that u_p* u_q is real
                let phase = (gamma / g).conj();
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = c * t;
                for mat in [&mut u, &mut v] {
                    for i in 0..mat.nrows() {
                        let a = mat[(i, p)];
                        let b = mat[(i, q)] * phase;
                        mat[(i, p)] = a * c - b * sn;
                        mat[(i, q)] = a * sn + b * c;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let s: Vec<f64> = (0..n).map(|j| u.column(j).norm()).collect();
    for (j, &sj) in s.iter().enumerate() {
        if sj > 0.0 {
            u.column_mut(j).unscale_mut(sj);
        }
    }
    Svd::sorted(u, &s, v.adjoint())
}

/// nalgebra's bidiagonal iteration occasionally returns factors that do not
/// reproduce a rank-deficient input, so every result is checked and retried
/// with a looser deflation threshold, then by one-sided Jacobi.
pub fn svd(m: &CMatrix) -> Result<Svd> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(Svd {
            u: CMatrix::zeros(rows, 0),
            s: Vec::new(),
            v_t: CMatrix::zeros(0, cols),
        });
    }
    let tol = 64.0 * rows.max(cols) as f64 * f64::EPSILON * m.norm();
    let attempts: [&dyn Fn() -> Option<Svd>; 3] = [
        &|| plain_svd(m, f64::EPSILON),
        &|| plain_svd(m, 1e-14),
        &|| Some(jacobi_svd(m)),
    ];
    let mut worst = f64::INFINITY;
    for cand in attempts.iter().filter_map(|f| f()) {
        let err = cand.reconstruction_error(m);
        if err <= tol {
            return Ok(cand);
        }
        worst = worst.min(err);
    }
    Err(Error::Numerical(format!(
        "SVD failed to reproduce a {rows} x {cols} matrix (residual {worst:.3e})"
    )))
}

/// Singular values in non-increasing order.
pub fn singular_values(m: &CMatrix) -> Vec<f64> {
    match svd(m) {
        Ok(d) => d.s,
        Err(_) => {
            let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
            s.sort_by(|a, b| b.total_cmp(a));
            s
        }
    }
}

/// Standard numerical-rank cutoff `max(dim) * eps * sigma_max`.
pub fn rank_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

pub fn numerical_rank(m: &CMatrix) -> usize {
    let s = singular_values(m);
    let Some(&smax) = s.first() else { return 0 };
    if smax == 0.0 {
        return 0;
    }
    let tol = rank_tolerance(m.nrows(), m.ncols(), smax);
    s.iter().filter(|&&x| x > tol).count()
}

/// Eigenvalues (ascending) of the Hermitian part of `m`.
pub fn hermitian_eigenvalues(m: &CMatrix) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(hermitian_part(m))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Returns `L` with `L L* = M` for a Hermitian positive-semidefinite `M`,
/// including singular ones. Eigenvalues below `-tol * max|lambda|` are rejected.
pub fn psd_factor(m: &CMatrix) -> Result<CMatrix> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::Dimension("psd_factor needs a square matrix".into()));
    }
    if n == 0 {
        return Ok(CMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(hermitian_part(m));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    let tol = 1e-10 * scale.max(f64::MIN_POSITIVE);
    let mut factor = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -tol {
            return Err(Error::InconsistentStatistics(format!(
                "covariance has negative eigenvalue {lambda:.3e}"
            )));
        }
        let s = lambda.max(0.0).sqrt();
        factor.column_mut(j).scale_mut(s);
    }
    Ok(factor)
}

/// Solves `X = A X A* + Q` for stable `A` by Smith's doubling iteration.
pub fn discrete_lyapunov(a: &CMatrix, q: &CMatrix) -> Result<CMatrix> {
    let n = a.nrows();
    if a.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::Dimension(format!(
            "lyapunov: A is {}x{}, Q is {}x{}",
            a.nrows(),
            a.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    let rho = spectral_radius(a)?;
    if rho >= 1.0 {
        return Err(Error::Unstable(format!(
            "discrete Lyapunov equation needs a stable A, spectral radius {rho}"
        )));
    }
    let mut x = q.clone();
    let mut ak = a.clone();
    for _ in 0..64 {
        let increment = &ak * &x * ak.adjoint();
        let inc_norm = increment.norm();
        x += increment;
        if !x.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            break;
        }
        if inc_norm <= 1e-16 * x.norm() || inc_norm == 0.0 {
            return Ok(hermitian_part(&x));
        }
        ak = &ak * &ak;
    }
    Err(Error::Unstable(
        "discrete Lyapunov iteration did not converge (A not stable?)".into(),
    ))
}

/// Dense least squares `min ||A x - b||` through Householder QR; `A` must have
/// full column rank and at least as many rows as columns.
pub fn solve_least_squares(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    if a.nrows() < a.ncols() {
        return Err(Error::Dimension(format!(
            "least squares needs rows >= cols, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if b.nrows() != a.nrows() {
        return Err(Error::Dimension("least squares right-hand side rows".into()));
    }
    let qr = a.clone().qr();
    let qtb = qr.q().adjoint() * b;
    qr.r()
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::Numerical("singular triangular factor in least squares".into()))
}

/// Relative Frobenius error `||est - reference|| / ||reference||`.
pub fn relative_difference(est: &CMatrix, reference: &CMatrix) -> f64 {
    let denom = reference.norm();
    let diff = (est - reference).norm();
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spectral_radius_of_triangular() {
        let a = real_matrix(2, 2, &[0.5, 3.0, 0.0, -0.8]);
        assert_relative_eq!(spectral_radius(&a).unwrap(), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn lyapunov_scalar() {
        // x = a^2 x + q  =>  x = q / (1 - a^2)
        let a = real_matrix(1, 1, &[0.5]);
        let q = real_matrix(1, 1, &[1.0]);
        let x = discrete_lyapunov(&a, &q).unwrap();
        assert_relative_eq!(x[(0, 0)].re, 1.0 / 0.75, epsilon = 1e-14);
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        let a = real_matrix(1, 1, &[1.1]);
        let q = real_matrix(1, 1, &[1.0]);
        assert!(discrete_lyapunov(&a, &q).is_err());
    }

    #[test]
    fn psd_factor_of_singular_matrix() {
        let m = real_matrix(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = psd_factor(&m).unwrap();
        assert!((&l * l.adjoint() - &m).norm() < 1e-12);
        assert!(psd_factor(&real_matrix(1, 1, &[-1.0])).is_err());
    }

    #[test]
    fn rank_counts_dependent_columns() {
        let m = real_matrix(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert_eq!(numerical_rank(&m), 1);
        assert_eq!(numerical_rank(&CMatrix::zeros(2, 2)), 0);
    }

    #[test]
    fn jacobi_svd_of_complex_matrices() {
        for (rows, cols) in [(5, 3), (3, 5), (4, 4)] {
            let m = CMatrix::from_fn(rows, cols, |i, j| {
                Complex64::new((i * 7 + j * 3) as f64 % 5.0 - 2.0, (i + 2 * j) as f64 % 3.0)
            });
            let d = jacobi_svd(&m);
            let k = rows.min(cols);
            assert!(d.reconstruction_error(&m) < 1e-12 * m.norm());
            assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
            let vv = &d.v_t * d.v_t.adjoint();
            assert!((vv - identity(k)).norm() < 1e-12);
            let reference = singular_values(&m);
            for (a, b) in d.s.iter().zip(&reference) {
                assert_relative_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn svd_of_rank_one_matrix() {
        let m = real_matrix(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 3.0, 6.0, 9.0]);
        let d = svd(&m).unwrap();
        assert_relative_eq!(d.s[0], 14.0, epsilon = 1e-12);
        assert!(d.s[1] < 1e-14);
    }
}
