//! Augmented-state Kalman filtering and estimation metrics.

use std::io::Write;

use serde::Serialize;

use crate::armodel::InnovationsModel;
use crate::error::{Error, Result};
use crate::linalg::{
    discrete_lyapunov, hermitian_part, identity, is_real, psd_factor, spectral_radius, CMatrix,
    CVector, ONE, ZERO,
};
use crate::lti::LtiSystem;
use crate::rng::{standard_normal, streams, GaussianSource, SeedSplitter};

/// `z_{k+1} = A z_k + G w_k`, `y_k = C z_k + v_k` with unit white `w` and
/// `E[v v*] = Omega`. The first `plant_dim` states belong to the plant.
#[derive(Clone, Debug)]
pub struct AugmentedSystem {
    a: CMatrix,
    g: CMatrix,
    c: CMatrix,
    omega: CMatrix,
    plant_dim: usize,
}

impl AugmentedSystem {
    pub fn new(a: CMatrix, g: CMatrix, c: CMatrix, omega: CMatrix, plant_dim: usize) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || g.nrows() != n || c.ncols() != n {
            return Err(Error::Dimension(format!(
                "augmented system: A {:?}, G {:?}, C {:?}",
                a.shape(),
                g.shape(),
                c.shape()
            )));
        }
        if omega.shape() != (c.nrows(), c.nrows()) {
            return Err(Error::Dimension("Omega must be q x q".into()));
        }
        if plant_dim > n {
            return Err(Error::Dimension("plant dimension exceeds state dimension".into()));
        }
        let rho = spectral_radius(&a)?;
        if rho >= 1.0 {
            return Err(Error::Unstable(format!(
                "augmented system has spectral radius {rho:.6}"
            )));
        }
        Ok(Self {
            a,
            g,
            c,
            omega: hermitian_part(&omega),
            plant_dim,
        })
    }

    pub fn a(&self) -> &CMatrix {
        &self.a
    }

    pub fn g(&self) -> &CMatrix {
        &self.g
    }

    pub fn c(&self) -> &CMatrix {
        &self.c
    }

    pub fn omega(&self) -> &CMatrix {
        &self.omega
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn plant_dim(&self) -> usize {
        self.plant_dim
    }

    pub fn is_real(&self) -> bool {
        is_real(&self.a) && is_real(&self.g) && is_real(&self.c) && is_real(&self.omega)
    }

    pub fn with_omega(&self, omega: CMatrix) -> Result<Self> {
        Self::new(self.a.clone(), self.g.clone(), self.c.clone(), omega, self.plant_dim)
    }

    /// Stationary state covariance `Sigma = A Sigma A* + G G*`.
    pub fn steady_state_covariance(&self) -> Result<CMatrix> {
        discrete_lyapunov(&self.a, &(&self.g * self.g.adjoint()))
    }

    /// Stationary noisy trajectory of `steps` samples. The initial state is
    /// drawn from the stationary distribution; process and measurement noise
    /// use separate streams of `seeds`.
    pub fn simulate(&self, steps: usize, seeds: &SeedSplitter) -> Result<Trajectory> {
        if steps == 0 {
            return Err(Error::InsufficientData("zero-length simulation".into()));
        }
        let complex = !self.is_real();
        let init = psd_factor(&self.steady_state_covariance()?)?;
        let meas = GaussianSource::new(&self.omega)?.with_complex(complex);
        let mut proc_rng = seeds.rng(streams::INPUT);
        let mut meas_rng = seeds.rng(streams::MEASUREMENT);
        let mut z = &init * standard_normal(&mut proc_rng, init.ncols(), complex);
        let mut next = z.clone();
        let mut states = Vec::with_capacity(steps);
        let mut outputs = Vec::with_capacity(steps);
        for k in 0..steps {
            if k > 0 {
                let w = standard_normal(&mut proc_rng, self.g.ncols(), complex);
                next.gemv(ONE, &self.a, &z, ZERO);
                next.gemv(ONE, &self.g, &w, ONE);
                std::mem::swap(&mut z, &mut next);
            }
            outputs.push(&self.c * &z + meas.draw(&mut meas_rng));
            states.push(z.clone());
        }
        Ok(Trajectory { states, outputs })
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<CVector>,
    pub outputs: Vec<CVector>,
}

/// Plant `(A, B, C, Omega)` driven by the innovations model:
/// `A_aug = [[A, B C_n], [0, A_cl]]`, `G = [B P; B_n P]`, `C_aug = [C 0]`.
pub fn build_augmented(sys: &LtiSystem, inn: &InnovationsModel) -> Result<AugmentedSystem> {
    let (n, p) = (sys.state_dim(), sys.input_dim());
    if inn.p().nrows() != p {
        return Err(Error::Dimension(format!(
            "plant has {p} inputs, innovations model has {} outputs",
            inn.p().nrows()
        )));
    }
    let r = inn.state_dim();
    if r > 0 {
        let rho = spectral_radius(inn.closed_loop_a())?;
        if rho >= 1.0 {
            return Err(Error::Realization(format!(
                "innovations model is unstable (spectral radius {rho:.6})"
            )));
        }
    }
    let mut a = CMatrix::zeros(n + r, n + r);
    a.view_mut((0, 0), (n, n)).copy_from(sys.a());
    a.view_mut((0, n), (n, r)).copy_from(&(sys.b() * inn.c_n()));
    a.view_mut((n, n), (r, r)).copy_from(inn.closed_loop_a());
    let mut g = CMatrix::zeros(n + r, p);
    g.view_mut((0, 0), (n, p)).copy_from(&(sys.b() * inn.p()));
    g.view_mut((n, 0), (r, p)).copy_from(&(inn.b_n() * inn.p()));
    let mut c = CMatrix::zeros(sys.output_dim(), n + r);
    c.view_mut((0, 0), (sys.output_dim(), n)).copy_from(sys.c());
    AugmentedSystem::new(a, g, c, sys.omega().clone(), n)
}

#[derive(Clone, Debug)]
pub struct FilterState {
    pub mean: CVector,
    pub covariance: CMatrix,
    pub step: usize,
}

impl FilterState {
    pub fn new(mean: CVector, covariance: CMatrix) -> Self {
        Self {
            mean,
            covariance: hermitian_part(&covariance),
            step: 0,
        }
    }

    /// Zero mean with covariance `(tr(Sigma_xx) / n) I`, the average stationary
    /// plant-state variance of the filter model.
    pub fn default_for(sys: &AugmentedSystem) -> Result<Self> {
        Ok(Self::scaled_identity(sys.state_dim(), initial_variance(sys)?))
    }

    /// Zero mean with covariance `variance I`.
    pub fn scaled_identity(dim: usize, variance: f64) -> Self {
        Self::new(CVector::zeros(dim), identity(dim).scale(variance.max(f64::MIN_POSITIVE)))
    }

    /// `sqrt(P_ii)` for every state.
    pub fn std_devs(&self) -> Vec<f64> {
        self.covariance.diagonal().iter().map(|z| z.re.max(0.0).sqrt()).collect()
    }
}

/// Average stationary variance of the plant states, `tr(Sigma_xx) / n`.
pub fn initial_variance(sys: &AugmentedSystem) -> Result<f64> {
    let sigma = sys.steady_state_covariance()?;
    let n = sys.plant_dim().max(1);
    Ok((0..n).map(|i| sigma[(i, i)].re).sum::<f64>() / n as f64)
}

#[derive(Clone, Debug)]
pub struct Innovation {
    /// `y - C x_prior`
    pub value: CVector,
    /// `C P_prior C* + Omega`
    pub covariance: CMatrix,
}

/// Time update with `(A, G G*)`.
pub fn kalman_predict(state: &FilterState, sys: &AugmentedSystem) -> FilterState {
    let a = sys.a();
    let cov = a * &state.covariance * a.adjoint() + sys.g() * sys.g().adjoint();
    FilterState {
        mean: a * &state.mean,
        covariance: hermitian_part(&cov),
        step: state.step + 1,
    }
}

/// Measurement update in Joseph form.
pub fn kalman_update(
    prior: &FilterState,
    sys: &AugmentedSystem,
    y: &CVector,
) -> Result<(FilterState, Innovation)> {
    if y.len() != sys.output_dim() {
        return Err(Error::Dimension(format!(
            "measurement of length {}, expected {}",
            y.len(),
            sys.output_dim()
        )));
    }
    let c = sys.c();
    let pc = &prior.covariance * c.adjoint();
    let s = hermitian_part(&(c * &pc + sys.omega()));
    let chol = s.clone().cholesky().ok_or_else(|| Error::FilterDivergence {
        step: prior.step,
        reason: "innovation covariance is not positive definite".into(),
    })?;
    // K = P C* S^{-1}
    let gain = chol.solve(&pc.adjoint()).adjoint();
    let innovation = y - c * &prior.mean;
    let mean = &prior.mean + &gain * &innovation;
    let ikc = identity(prior.mean.len()) - &gain * c;
    let cov = &ikc * &prior.covariance * ikc.adjoint() + &gain * sys.omega() * gain.adjoint();
    if !cov.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        return Err(Error::FilterDivergence {
            step: prior.step,
            reason: "non-finite covariance".into(),
        });
    }
    Ok((
        FilterState {
            mean,
            covariance: hermitian_part(&cov),
            step: prior.step,
        },
        Innovation {
            value: innovation,
            covariance: s,
        },
    ))
}

/// Predict then update.
pub fn kalman_step(
    state: &FilterState,
    sys: &AugmentedSystem,
    y: &CVector,
) -> Result<(FilterState, Innovation)> {
    kalman_update(&kalman_predict(state, sys), sys, y)
}

#[derive(Clone, Debug)]
pub struct FilterRun {
    /// Posterior means, one per measurement.
    pub estimates: Vec<CVector>,
    /// Posterior standard deviations.
    pub std_devs: Vec<Vec<f64>>,
    pub innovations: Vec<Innovation>,
}

/// Filters `y_0 .. y_{T-1}`: `init` is the prior for the state at step 0, which
/// only receives a measurement update.
pub fn run_filter(sys: &AugmentedSystem, outputs: &[CVector], init: &FilterState) -> Result<FilterRun> {
    let mut run = FilterRun {
        estimates: Vec::with_capacity(outputs.len()),
        std_devs: Vec::with_capacity(outputs.len()),
        innovations: Vec::with_capacity(outputs.len()),
    };
    let mut state = init.clone();
    for (k, y) in outputs.iter().enumerate() {
        let prior = if k == 0 { state.clone() } else { kalman_predict(&state, sys) };
        let (post, inn) = kalman_update(&prior, sys, y)?;
        run.estimates.push(post.mean.clone());
        run.std_devs.push(post.std_devs());
        run.innovations.push(inn);
        state = post;
    }
    Ok(run)
}

/// Steady-state prior and posterior covariances by iterating the Riccati
/// difference equation `P = A P A* + G G* - A P C* (C P C* + Omega)^{-1} C P A*`.
pub fn riccati_steady_state(
    sys: &AugmentedSystem,
    tol: f64,
    max_iter: usize,
) -> Result<(CMatrix, CMatrix)> {
    let (a, c) = (sys.a(), sys.c());
    let q = sys.g() * sys.g().adjoint();
    let mut p = q.clone();
    for k in 0..max_iter {
        let s = c * &p * c.adjoint() + sys.omega();
        let inv = s.try_inverse().ok_or_else(|| Error::FilterDivergence {
            step: k,
            reason: "singular innovation covariance in Riccati iteration".into(),
        })?;
        let apc = a * &p * c.adjoint();
        let next = hermitian_part(&(a * &p * a.adjoint() + &q - &apc * &inv * apc.adjoint()));
        let change = (&next - &p).norm();
        p = next;
        if change <= tol * p.norm().max(f64::MIN_POSITIVE) {
            let s = c * &p * c.adjoint() + sys.omega();
            let inv = s.try_inverse().ok_or_else(|| Error::FilterDivergence {
                step: k,
                reason: "singular innovation covariance".into(),
            })?;
            let pc = &p * c.adjoint();
            let post = hermitian_part(&(&p - &pc * inv * pc.adjoint()));
            return Ok((p, post));
        }
    }
    Err(Error::Convergence {
        iterations: max_iter,
        residual: f64::NAN,
    })
}

/// `(1/n) sum_i sqrt(sum_k |xhat_i(k) - x_i(k)|^2 / T)`.
pub fn armse(estimates: &[CVector], truth: &[CVector]) -> Result<f64> {
    if estimates.len() != truth.len() || estimates.is_empty() {
        return Err(Error::Dimension(format!(
            "{} estimates vs {} truth samples",
            estimates.len(),
            truth.len()
        )));
    }
    let n = truth[0].len();
    if estimates.iter().chain(truth).any(|v| v.len() != n) || n == 0 {
        return Err(Error::Dimension("trajectory vectors differ in length".into()));
    }
    let steps = truth.len() as f64;
    let total: f64 = (0..n)
        .map(|i| {
            let ss: f64 = estimates
                .iter()
                .zip(truth)
                .map(|(e, t)| (e[i] - t[i]).norm_sqr())
                .sum();
            (ss / steps).sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

/// Leading `count` components of every vector.
pub fn leading_components(traj: &[CVector], count: usize) -> Vec<CVector> {
    traj.iter().map(|v| v.rows(0, count).into_owned()).collect()
}

/// `sqrt(|omega_i| / E[x_i x_i*])` with the variance taken from the stationary
/// covariance of `sys`.
pub fn nsr(sys: &AugmentedSystem, component: usize, omega_i: f64) -> Result<f64> {
    if component >= sys.state_dim() {
        return Err(Error::Dimension(format!("component {component} out of range")));
    }
    let var = sys.steady_state_covariance()?[(component, component)].re;
    nsr_from_variance(var, omega_i)
}

pub fn nsr_from_variance(variance: f64, omega_i: f64) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::UndefinedRatio(format!(
            "signal variance {variance:.3e} is not positive"
        )));
    }
    Ok((omega_i.abs() / variance).sqrt())
}

/// Fraction of steps with `|error_i| <= 3 sigma_i`, per listed component.
pub fn three_sigma_fraction(
    run: &FilterRun,
    truth: &[CVector],
    components: &[usize],
) -> Result<Vec<f64>> {
    if run.estimates.len() != truth.len() || truth.is_empty() {
        return Err(Error::Dimension("filter run and truth differ in length".into()));
    }
    Ok(components
        .iter()
        .map(|&i| {
            let inside = run
                .estimates
                .iter()
                .zip(truth)
                .zip(&run.std_devs)
                .filter(|((e, t), s)| (e[i] - t[i]).norm() <= 3.0 * s[i])
                .count();
            inside as f64 / truth.len() as f64
        })
        .collect())
}

/// Autocorrelation coefficients at lags `1..=max_lag` of each component of
/// the whitened innovations `L^{-1} e_k` with `L L* = S_k`.
pub fn innovation_whiteness(run: &FilterRun, max_lag: usize) -> Result<Vec<Vec<f64>>> {
    let normalized: Vec<CVector> = run
        .innovations
        .iter()
        .map(|inn| {
            let l = inn
                .covariance
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numerical("innovation covariance not PD".into()))?
                .l();
            l.solve_lower_triangular(&inn.value)
                .ok_or_else(|| Error::Numerical("singular innovation factor".into()))
        })
        .collect::<Result<_>>()?;
    let t = normalized.len();
    if t <= max_lag {
        return Err(Error::InsufficientData("too few innovations".into()));
    }
    let q = normalized[0].len();
    Ok((0..q)
        .map(|i| {
            let mean = normalized.iter().map(|e| e[i]).sum::<num_complex::Complex64>() / t as f64;
            let centered: Vec<_> = normalized.iter().map(|e| e[i] - mean).collect();
            let r0: f64 = centered.iter().map(|z| z.norm_sqr()).sum();
            (1..=max_lag)
                .map(|m| {
                    let rm: num_complex::Complex64 =
                        (0..t - m).map(|k| centered[k] * centered[k + m].conj()).sum();
                    if r0 > 0.0 {
                        rm.norm() / r0
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct EstimationSummary {
    pub armse: f64,
    pub nsr: f64,
    pub three_sigma_fraction: Vec<f64>,
}

/// `step,component,truth_re,truth_im,est_re,est_im,err_abs,sigma3`
pub fn write_estimation_csv<W: Write>(
    mut w: W,
    run: &FilterRun,
    truth: &[CVector],
    components: &[usize],
) -> Result<()> {
    writeln!(w, "step,component,truth_re,truth_im,est_re,est_im,err_abs,sigma3")?;
    for (k, ((e, t), s)) in run.estimates.iter().zip(truth).zip(&run.std_devs).enumerate() {
        for &i in components {
            writeln!(
                w,
                "{k},{i},{:e},{:e},{:e},{:e},{:e},{:e}",
                t[i].re,
                t[i].im,
                e[i].re,
                e[i].im,
                (e[i] - t[i]).norm(),
                3.0 * s[i]
            )?;
        }
    }
    Ok(())
}
