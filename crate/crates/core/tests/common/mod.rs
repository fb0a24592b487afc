#![allow(dead_code)]

use arinput::autocorr::CorrelationSequence;
use arinput::linalg::{spectral_radius, CMatrix};
use arinput::lti::LtiSystem;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CMatrix {
    CMatrix::from_fn(rows, cols, |_, _| {
        Complex64::new(rng.sample::<f64, _>(StandardNormal), 0.0)
    })
}

/// Real Gaussian `A` rescaled to spectral radius `rho`.
pub fn stable_matrix(rng: &mut ChaCha8Rng, n: usize, rho: f64) -> CMatrix {
    loop {
        let a = gaussian(rng, n, n);
        let r = spectral_radius(&a).unwrap();
        if r > 1e-3 {
            return a.scale(rho / r);
        }
    }
}

/// Random stable real system with `rank(C A B) = p` (checked, redrawn).
pub fn random_system(seed: u64, n: usize, p: usize, q: usize) -> LtiSystem {
    assert!(p <= n && p <= q, "rank(C A B) = p needs p <= min(n, q)");
    let mut r = rng(seed);
    loop {
        let rho = r.random_range(0.3..0.85);
        let a = stable_matrix(&mut r, n, rho);
        let b = gaussian(&mut r, n, p);
        let c = gaussian(&mut r, q, n);
        let cab = &c * &a * &b;
        if cab.rank(1e-6 * cab.norm()) < p {
            continue;
        }
        return LtiSystem::noiseless(a, b, c).unwrap();
    }
}

/// `X = A X A* + Q` by a dense Kronecker solve:
/// `(I - conj(A) (x) A) vec(X) = vec(Q)`.
pub fn kron_lyapunov(a: &CMatrix, q: &CMatrix) -> CMatrix {
    let n = a.nrows();
    let mut k = CMatrix::identity(n * n, n * n);
    for j in 0..n {
        for l in 0..n {
            let s = a[(j, l)].conj();
            for i in 0..n {
                for m in 0..n {
                    // column-major vec: entry (i, j) at i + n j
                    k[(i + n * j, m + n * l)] -= s * a[(i, m)];
                }
            }
        }
    }
    let rhs = nalgebra::DVector::from_iterator(n * n, q.iter().copied());
    let x = k.lu().solve(&rhs).expect("Lyapunov operator is invertible");
    CMatrix::from_column_slice(n, n, x.as_slice())
}

/// Block companion of `u_k = sum_i a_i u_{k-i} + e_k`, built independently of
/// the library.
pub fn companion(a: &[CMatrix]) -> CMatrix {
    let p = a[0].nrows();
    let m = a.len();
    CMatrix::from_fn(m * p, m * p, |i, j| {
        let (bi, bj) = (i / p, j / p);
        if bi == 0 {
            a[bj][(i, j % p)]
        } else if bj + 1 == bi && i % p == j % p {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    })
}

/// Exact `R(m) = E[u_k u_{k+m}*]` of a stationary AR process, via the
/// Kronecker Lyapunov solve on the companion form.
pub fn ar_autocorrelation(a: &[CMatrix], omega: &CMatrix, max_lag: usize) -> CorrelationSequence {
    let p = omega.nrows();
    let f = companion(a);
    let mut q = CMatrix::zeros(f.nrows(), f.nrows());
    q.view_mut((0, 0), (p, p)).copy_from(omega);
    let sigma = kron_lyapunov(&f, &q);
    // E[s_{k+m} s_k*] = F^m Sigma, and R(m) is the adjoint of its leading block
    let mut fm = CMatrix::identity(f.nrows(), f.nrows());
    let mut lags = Vec::new();
    for _ in 0..=max_lag {
        lags.push((&fm * &sigma).view((0, 0), (p, p)).adjoint());
        fm = &f * fm;
    }
    CorrelationSequence::from_nonnegative(lags).unwrap()
}

/// Random stationary AR(k) of dimension p with positive definite residual.
pub fn random_ar(seed: u64, p: usize, k: usize) -> (Vec<CMatrix>, CMatrix) {
    let mut r = rng(seed);
    loop {
        let a: Vec<CMatrix> = (0..k).map(|_| gaussian(&mut r, p, p).scale(0.35)).collect();
        if spectral_radius(&companion(&a)).unwrap() < 0.9 {
            let l = gaussian(&mut r, p, p);
            let omega = &l * l.adjoint() + CMatrix::identity(p, p).scale(0.5);
            return (a, omega);
        }
    }
}

pub fn max_rel(est: &CMatrix, truth: &CMatrix) -> f64 {
    (est - truth).norm() / truth.norm().max(f64::MIN_POSITIVE)
}

/// Largest relative lag error over `|m| <= lags`.
pub fn sequence_error(est: &CorrelationSequence, truth: &CorrelationSequence, lags: usize) -> f64 {
    let l = lags as i64;
    (-l..=l)
        .map(|m| max_rel(est.lag(m), truth.lag(m)))
        .fold(0.0, f64::max)
}

pub fn real_dmatrix(m: &CMatrix) -> DMatrix<f64> {
    m.map(|z| z.re)
}

/// Fixed 4-state, 2-input, 2-output test plant with eigenvalues
/// `0.8, -0.6, 0.5 +- 0.3i`.
pub fn fixture_system() -> LtiSystem {
    use arinput::linalg::real_matrix;
    let a = real_matrix(
        4,
        4,
        &[
            0.8, 0.0, 0.0, 0.0, //
            0.0, -0.6, 0.0, 0.0, //
            0.0, 0.0, 0.5, 0.3, //
            0.0, 0.0, -0.3, 0.5,
        ],
    );
    let b = real_matrix(4, 2, &[1.0, 0.0, 0.5, 1.0, 0.0, 0.7, -0.4, 0.2]);
    let c = real_matrix(2, 4, &[1.0, 0.3, 0.0, 0.5, 0.0, 1.0, 0.8, -0.2]);
    LtiSystem::noiseless(a, b, c).unwrap()
}

/// Input `u_{k+1} = phi u_k + e_k` with `e ~ N(0, I)` driving `sys`; returns
/// the exact input and output autocorrelations from one Lyapunov solve on
/// the joint state `[x; u]`.
pub fn ar1_driven_statistics(
    sys: &LtiSystem,
    phi: f64,
    max_lag: usize,
) -> (CorrelationSequence, CorrelationSequence) {
    let (n, p, q) = (sys.state_dim(), sys.input_dim(), sys.output_dim());
    let d = n + p;
    let mut az = CMatrix::zeros(d, d);
    az.view_mut((0, 0), (n, n)).copy_from(sys.a());
    az.view_mut((0, n), (n, p)).copy_from(sys.b());
    az.view_mut((n, n), (p, p)).copy_from(&CMatrix::identity(p, p).scale(phi));
    let mut qz = CMatrix::zeros(d, d);
    qz.view_mut((n, n), (p, p)).copy_from(&CMatrix::identity(p, p));
    let sigma = kron_lyapunov(&az, &qz);
    let mut cy = CMatrix::zeros(q, d);
    cy.view_mut((0, 0), (q, n)).copy_from(sys.c());
    let mut cu = CMatrix::zeros(p, d);
    cu.view_mut((0, n), (p, p)).copy_from(&CMatrix::identity(p, p));
    // R(m) = C Sigma (A^m)* C*
    let mut power = CMatrix::identity(d, d);
    let (mut ruu, mut ryy) = (Vec::new(), Vec::new());
    for _ in 0..=max_lag {
        let right = &sigma * power.adjoint();
        ruu.push(&cu * &right * cu.adjoint());
        ryy.push(&cy * &right * cy.adjoint());
        power = &az * power;
    }
    (
        CorrelationSequence::from_nonnegative(ruu).unwrap(),
        CorrelationSequence::from_nonnegative(ryy).unwrap(),
    )
}

/// `R_yy(m) = sum_{i,j} h_i R_uu(m + i - j) h_j*` summed term by term.
pub fn forward_oracle(
    h: &[CMatrix],
    ruu: &CorrelationSequence,
    out_lags: usize,
) -> CorrelationSequence {
    let q = h[0].nrows();
    let ni = ruu.max_lag() as i64;
    let lags = (0..=out_lags as i64)
        .map(|m| {
            let mut acc = CMatrix::zeros(q, q);
            for (i, hi) in h.iter().enumerate() {
                for (j, hj) in h.iter().enumerate() {
                    let l = m + i as i64 - j as i64;
                    if l.abs() <= ni {
                        acc += hi * ruu.lag(l) * hj.adjoint();
                    }
                }
            }
            acc
        })
        .collect();
    CorrelationSequence::from_nonnegative(lags).unwrap()
}

/// Random conjugate-symmetric sequence supported on `|m| <= n`.
pub fn random_sequence(seed: u64, p: usize, n: usize) -> CorrelationSequence {
    let mut r = rng(seed);
    let lags = (0..=n)
        .map(|_| {
            let re = gaussian(&mut r, p, p);
            let im = gaussian(&mut r, p, p);
            re + im.map(|z| Complex64::new(0.0, z.re))
        })
        .collect();
    CorrelationSequence::from_nonnegative(lags).unwrap()
}
