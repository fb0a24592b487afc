//! Vector autoregressive models fitted to input autocorrelations, and the
//! innovations state-space model that reproduces their statistics.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::autocorr::CorrelationSequence;
use crate::error::{Error, Result};
use crate::linalg::{
    discrete_lyapunov, hermitian_eigenvalues, hermitian_part, identity, is_real, numerical_rank,
    spectral_radius, CMatrix, CVector, ONE, ZERO,
};
use crate::lti::MarkovSequence;
use crate::realization::{era, EraOrder, StateSpaceRealization};
use crate::rng::{standard_normal, SeedSplitter};
use crate::serial::{self, cmatrix, cmatrix_list};

/// Eigenvalues of the residual covariance below `-NEGATIVE_TOLERANCE` (scaled
/// by its trace) are rejected.
pub const NEGATIVE_TOLERANCE: f64 = 1e-10;

/// Largest order tried by automatic order selection.
pub const MAX_AUTO_ORDER: usize = 20;

/// `u_k = sum_i a_i u_{k-i} + eps_k` with `E[eps eps*] = Omega_r`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "ArModelFile")]
pub struct ArModel {
    order: usize,
    #[serde(with = "cmatrix_list")]
    a: Vec<CMatrix>,
    #[serde(rename = "Omega_r", with = "cmatrix")]
    omega_r: CMatrix,
}

#[derive(Deserialize)]
struct ArModelFile {
    #[serde(with = "cmatrix_list")]
    a: Vec<CMatrix>,
    #[serde(rename = "Omega_r", with = "cmatrix")]
    omega_r: CMatrix,
}

impl TryFrom<ArModelFile> for ArModel {
    type Error = Error;

    fn try_from(f: ArModelFile) -> Result<Self> {
        ArModel::new(f.a, f.omega_r)
    }
}

impl ArModel {
    /// Validates shapes, that `Omega_r` is Hermitian PSD and that the model is
    /// stationary.
    pub fn new(a: Vec<CMatrix>, omega_r: CMatrix) -> Result<Self> {
        let Some(first) = a.first() else {
            return Err(Error::Precondition("AR order must be positive".into()));
        };
        let p = first.nrows();
        if a.iter().any(|m| m.shape() != (p, p)) || omega_r.shape() != (p, p) {
            return Err(Error::Dimension("AR coefficients and Omega_r must be p x p".into()));
        }
        let omega_r = hermitian_part(&omega_r);
        check_psd(&omega_r)?;
        let model = Self {
            order: a.len(),
            a,
            omega_r,
        };
        let rho = spectral_radius(&model.companion())?;
        if rho >= 1.0 {
            return Err(Error::Unstable(format!(
                "AR model is not stationary (companion spectral radius {rho:.6})"
            )));
        }
        Ok(model)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.omega_r.nrows()
    }

    pub fn coefficients(&self) -> &[CMatrix] {
        &self.a
    }

    pub fn residual_covariance(&self) -> &CMatrix {
        &self.omega_r
    }

    /// Block companion matrix acting on `[u_k; u_{k-1}; ..; u_{k-M+1}]`.
    pub fn companion(&self) -> CMatrix {
        let (p, m) = (self.dim(), self.order);
        let mut f = CMatrix::zeros(m * p, m * p);
        for (i, ai) in self.a.iter().enumerate() {
            f.view_mut((0, i * p), (p, p)).copy_from(ai);
        }
        for i in 1..m {
            f.view_mut((i * p, (i - 1) * p), (p, p)).copy_from(&identity(p));
        }
        f
    }

    /// Exact autocorrelation of the stationary process for lags `-N..=N`.
    pub fn implied_autocorrelation(&self, max_lag: usize) -> Result<CorrelationSequence> {
        let (p, m) = (self.dim(), self.order);
        let f = self.companion();
        let mut q = CMatrix::zeros(m * p, m * p);
        q.view_mut((0, 0), (p, p)).copy_from(&self.omega_r);
        let sigma = discrete_lyapunov(&f, &q)?;
        // R(m) = E[u_k u_{k+m}*] = (Sigma (F^m)*)_{00}
        let mut cov = sigma;
        let mut next = cov.clone();
        let mut lags = Vec::with_capacity(max_lag + 1);
        for _ in 0..=max_lag {
            lags.push(cov.view((0, 0), (p, p)).into_owned());
            next.gemm(ONE, &cov, &f.adjoint(), ZERO);
            std::mem::swap(&mut cov, &mut next);
        }
        CorrelationSequence::from_nonnegative(lags)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        serial::write_json(path, self)
    }
}

fn check_psd(omega: &CMatrix) -> Result<()> {
    let scale = omega.trace().re.abs().max(f64::MIN_POSITIVE);
    if let Some(&lowest) = hermitian_eigenvalues(omega).first() {
        if lowest < -NEGATIVE_TOLERANCE * scale {
            return Err(Error::InconsistentStatistics(format!(
                "residual covariance is indefinite (eigenvalue {lowest:.3e})"
            )));
        }
    }
    Ok(())
}

/// Block Toeplitz matrix with block `(i, j) = R(i - j)`, `i, j = 0..order`.
fn toeplitz(ruu: &CorrelationSequence, order: usize) -> CMatrix {
    let p = ruu.dim();
    let mut t = CMatrix::zeros(order * p, order * p);
    for i in 0..order {
        for j in 0..order {
            t.view_mut((i * p, j * p), (p, p))
                .copy_from(ruu.lag(i as i64 - j as i64));
        }
    }
    t
}

/// Coefficients from `[R(-1) .. R(-M)] = [a_1 .. a_M] T`, solved as the
/// Hermitian system `T [a_1*; ..; a_M*] = [R(1); ..; R(M)]`.
fn yule_walker_coefficients(ruu: &CorrelationSequence, order: usize) -> Result<Vec<CMatrix>> {
    if order == 0 {
        return Err(Error::Precondition("AR order must be positive".into()));
    }
    if ruu.max_lag() < order {
        return Err(Error::Precondition(format!(
            "order {order} needs lags up to {order}, sequence has {}",
            ruu.max_lag()
        )));
    }
    let p = ruu.dim();
    let t = toeplitz(ruu, order);
    if numerical_rank(&t) < order * p {
        return Err(Error::DegenerateProcess(format!(
            "block Toeplitz matrix of order {order} is singular"
        )));
    }
    let mut rhs = CMatrix::zeros(order * p, p);
    for m in 0..order {
        rhs.view_mut((m * p, 0), (p, p)).copy_from(ruu.lag(m as i64 + 1));
    }
    let qr = t.qr();
    let x = qr
        .r()
        .solve_upper_triangular(&qr.q().ad_mul(&rhs))
        .ok_or_else(|| Error::DegenerateProcess("singular Toeplitz factor".into()))?;
    Ok((0..order)
        .map(|i| x.view((i * p, 0), (p, p)).adjoint())
        .collect())
}

fn residual_from_coefficients(ruu: &CorrelationSequence, a: &[CMatrix]) -> Result<CMatrix> {
    let m = a.len();
    if m == 0 || ruu.max_lag() + 1 < m {
        return Err(Error::Precondition(format!(
            "residual covariance of order {m} needs lags up to {}",
            m.saturating_sub(1)
        )));
    }
    let mut omega = ruu.lag(0).clone();
    for (i, ai) in a.iter().enumerate() {
        for (j, aj) in a.iter().enumerate() {
            omega -= ai * ruu.lag(i as i64 - j as i64) * aj.adjoint();
        }
    }
    let omega = hermitian_part(&omega);
    check_psd(&omega)?;
    Ok(omega)
}

/// `Omega_r = R(0) - sum_{i,j} a_i R(i - j) a_j*`, Hermitian-symmetrized.
pub fn residual_covariance(ruu: &CorrelationSequence, model: &ArModel) -> Result<CMatrix> {
    if ruu.dim() != model.dim() {
        return Err(Error::Dimension("sequence and model dimensions differ".into()));
    }
    residual_from_coefficients(ruu, model.coefficients())
}

/// Fits an order-`order` AR model by the Yule-Walker equations.
pub fn fit_yule_walker(ruu: &CorrelationSequence, order: usize) -> Result<ArModel> {
    let a = yule_walker_coefficients(ruu, order)?;
    let omega_r = residual_from_coefficients(ruu, &a)?;
    ArModel::new(a, omega_r)
}

#[derive(Clone, Debug, Serialize)]
pub struct OrderSelection {
    pub order: usize,
    /// `(order, criterion)` for every order that could be fitted.
    pub scores: Vec<(usize, f64)>,
}

/// Minimizes the final prediction error
/// `log det Omega_r(k) + p log((T + k p + 1) / (T - k p - 1))`
/// over `k = 1..=min(20, N/2)` where `N` is the largest available lag and
/// `T` the number of samples behind the estimate.
pub fn select_order_fpe(ruu: &CorrelationSequence, samples: usize) -> Result<OrderSelection> {
    let p = ruu.dim();
    let max_order = MAX_AUTO_ORDER.min(ruu.max_lag() / 2).max(1);
    let t = samples as f64;
    let mut scores = Vec::new();
    for k in 1..=max_order {
        let dof = (k * p + 1) as f64;
        if t <= dof {
            break;
        }
        let model = match fit_yule_walker(ruu, k) {
            Ok(m) => m,
            Err(e) => {
                debug!("order {k} skipped: {e}");
                continue;
            }
        };
        let det = model.residual_covariance().determinant().re;
        let log_det = if det > 0.0 { det.ln() } else { f64::NEG_INFINITY };
        scores.push((k, log_det + p as f64 * ((t + dof) / (t - dof)).ln()));
    }
    let best = scores
        .iter()
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .map(|&(k, _)| k)
        .ok_or_else(|| Error::DegenerateProcess("no AR order could be fitted".into()))?;
    Ok(OrderSelection {
        order: best,
        scores,
    })
}

/// Markov parameters of `(I - sum_i a_i z^{-i})^{-1} - I`:
/// `h_k = sum_{j=1}^{min(k, M)} a_j h_{k-j}` with `h_0 = I`.
pub fn closed_loop_markov(model: &ArModel, count: usize) -> Result<MarkovSequence> {
    if count == 0 {
        return Err(Error::Precondition("need at least one Markov parameter".into()));
    }
    let p = model.dim();
    let a = model.coefficients();
    let mut g: Vec<CMatrix> = Vec::with_capacity(count + 1);
    g.push(identity(p));
    for k in 1..=count {
        let mut acc = CMatrix::zeros(p, p);
        for j in 1..=k.min(a.len()) {
            acc.gemm(ONE, &a[j - 1], &g[k - j], ONE);
        }
        g.push(acc);
    }
    g.remove(0);
    MarkovSequence::new(g)
}

/// Hankel block counts used when realizing an AR model of order `m`.
pub fn hankel_blocks(order: usize) -> usize {
    (2 * order).max(20)
}

/// `eta_k = A_cl eta_{k-1} + B_n P w_{k-1}`, `u_k = C_n eta_k + P w_k` with
/// `A_cl = A_n + B_n C_n` and unit white `w`.
#[derive(Clone, Debug)]
pub struct InnovationsModel {
    ar: ArModel,
    realization: StateSpaceRealization,
    a_n: CMatrix,
    p: CMatrix,
    jittered: bool,
}

#[derive(Serialize)]
struct InnovationsFile<'a> {
    order: usize,
    #[serde(with = "cmatrix_list")]
    a: &'a [CMatrix],
    #[serde(rename = "Omega_r", with = "cmatrix")]
    omega_r: &'a CMatrix,
    #[serde(rename = "A_n", with = "cmatrix")]
    a_n: &'a CMatrix,
    #[serde(rename = "B_n", with = "cmatrix")]
    b_n: &'a CMatrix,
    #[serde(rename = "C_n", with = "cmatrix")]
    c_n: &'a CMatrix,
    #[serde(rename = "P", with = "cmatrix")]
    p: &'a CMatrix,
    singular_values: &'a [f64],
}

impl Serialize for InnovationsModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        InnovationsFile {
            order: self.ar.order(),
            a: self.ar.coefficients(),
            omega_r: self.ar.residual_covariance(),
            a_n: &self.a_n,
            b_n: self.realization.b(),
            c_n: self.realization.c(),
            p: &self.p,
            singular_values: self.realization.singular_values(),
        }
        .serialize(s)
    }
}

impl InnovationsModel {
    pub fn ar(&self) -> &ArModel {
        &self.ar
    }

    pub fn realization(&self) -> &StateSpaceRealization {
        &self.realization
    }

    pub fn state_dim(&self) -> usize {
        self.realization.order()
    }

    pub fn closed_loop_a(&self) -> &CMatrix {
        self.realization.a()
    }

    pub fn a_n(&self) -> &CMatrix {
        &self.a_n
    }

    pub fn b_n(&self) -> &CMatrix {
        self.realization.b()
    }

    pub fn c_n(&self) -> &CMatrix {
        self.realization.c()
    }

    /// Lower-triangular `P` with `P P* = Omega_r`.
    pub fn p(&self) -> &CMatrix {
        &self.p
    }

    /// True when `Omega_r` needed diagonal jitter before factoring.
    pub fn jittered(&self) -> bool {
        self.jittered
    }

    /// Exact output autocorrelation for lags `-N..=N`.
    pub fn output_autocorrelation(&self, max_lag: usize) -> Result<CorrelationSequence> {
        let acl = self.closed_loop_a();
        let (bn, cn) = (self.b_n(), self.c_n());
        let pp = &self.p * self.p.adjoint();
        let sigma = discrete_lyapunov(acl, &(bn * &pp * bn.adjoint()))?;
        let mut lags = Vec::with_capacity(max_lag + 1);
        lags.push(cn * &sigma * cn.adjoint() + &pp);
        // power = (A_cl*)^{m-1}
        let mut power = identity(acl.nrows());
        let cross = &pp * bn.adjoint();
        for _ in 1..=max_lag {
            let next = &power * acl.adjoint();
            lags.push(cn * &sigma * &next * cn.adjoint() + &cross * &power * cn.adjoint());
            power = next;
        }
        CorrelationSequence::from_nonnegative(lags)
    }

    /// Draws `u_0 .. u_{steps-1}` after `burn_in` discarded steps from
    /// `eta = 0`. Noise is real when the model is real.
    pub fn simulate(&self, steps: usize, burn_in: usize, seed: u64) -> Vec<CVector> {
        let real = is_real(self.closed_loop_a())
            && is_real(self.b_n())
            && is_real(self.c_n())
            && is_real(&self.p);
        let p = self.p.nrows();
        let mut rng = SeedSplitter::new(seed).rng(0);
        let bp = self.b_n() * &self.p;
        let mut eta = CVector::zeros(self.state_dim());
        let mut next = eta.clone();
        let mut out = Vec::with_capacity(steps);
        for k in 0..steps + burn_in {
            let w = standard_normal(&mut rng, p, !real);
            if k >= burn_in {
                out.push(self.c_n() * &eta + &self.p * &w);
            }
            next.gemv(ONE, self.closed_loop_a(), &eta, ZERO);
            next.gemv(ONE, &bp, &w, ONE);
            std::mem::swap(&mut eta, &mut next);
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        serial::write_json(path, self)
    }
}

/// Lower Cholesky factor, retrying once with `1e-10 tr(M)/p` on the diagonal.
pub fn cholesky_with_jitter(m: &CMatrix) -> Result<(CMatrix, bool)> {
    let h = hermitian_part(m);
    if let Some(c) = h.clone().cholesky() {
        return Ok((c.l(), false));
    }
    let p = h.nrows();
    let jitter = 1e-10 * h.trace().re.abs() / p.max(1) as f64;
    let boosted = &h + identity(p).scale(jitter);
    boosted
        .cholesky()
        .map(|c| (c.l(), true))
        .ok_or_else(|| Error::Cholesky("residual covariance is not positive definite".into()))
}

/// ERA on the closed-loop Markov parameters of `model`, then
/// `A_n = A_cl - B_n C_n` and `P = chol(Omega_r)`.
pub fn realize_innovations(model: &ArModel, order: EraOrder) -> Result<InnovationsModel> {
    let blocks = hankel_blocks(model.order());
    let h = closed_loop_markov(model, 2 * blocks)?;
    let realization = era(&h, blocks, blocks, order)?;
    if realization.order() > 0 {
        let rho = spectral_radius(realization.a())?;
        if rho >= 1.0 {
            return Err(Error::Realization(format!(
                "closed-loop realization is unstable (spectral radius {rho:.6})"
            )));
        }
    }
    let a_n = realization.a() - realization.b() * realization.c();
    let (p, jittered) = cholesky_with_jitter(model.residual_covariance())?;
    Ok(InnovationsModel {
        ar: model.clone(),
        realization,
        a_n,
        p,
        jittered,
    })
}
