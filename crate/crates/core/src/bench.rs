//! Benchmark problems and the end-to-end experiment harness: the heated slab
//! plant, stationary input generators, the perturbed-model baseline and
//! Monte-Carlo noise sweeps.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::armodel::{
    fit_yule_walker, realize_innovations, select_order_fpe, ArModel, InnovationsModel,
};
use crate::autocorr::{
    relative_error, sample_autocorrelation, significant_lags, CorrelationSequence, RelativeErrors,
};
use crate::error::{Error, Result};
use crate::filtering::{
    armse, build_augmented, innovation_whiteness, leading_components, run_filter,
    three_sigma_fraction, initial_variance, AugmentedSystem, FilterRun, FilterState, Trajectory,
};
use crate::linalg::{
    discrete_lyapunov, eigenvalues, is_real, psd_factor, real_matrix, scaled_identity,
    singular_values, spectral_radius, svd, CMatrix, CVector, ONE, ZERO,
};
use crate::lti::{LtiSystem, MarkovSequence};
use crate::realization::{bpod_reduce, BpodBasis, EraOrder, StateSpaceRealization};
use crate::recovery::{
    solve_input_autocorr_with, CgOptions, CoefficientMatrix, Recovery, SolveMethod,
    DEFAULT_CG_TOLERANCE, DEFAULT_MEMORY_BUDGET,
};
use crate::rng::{standard_normal, streams, SeedSplitter};
use crate::serial::{self, cmatrix};

/// Noise-to-signal ratios of the comparison table.
pub const TABLE_NSR_LEVELS: [f64; 5] = [0.002215, 0.068704, 0.135171, 0.203456, 0.269467];

// ---------------------------------------------------------------------------
// heated slab

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeatScheme {
    /// `A = exp(dt alpha L_h)`.
    #[default]
    Exponential,
    /// `A = I + dt alpha L_h`, requires `dt <= dx^2 / (2 alpha)`.
    ExplicitEuler,
}

/// One-dimensional slab on `(0, L]` with `T(0) = 0` and an insulated right
/// end, discretized on `grid` interior-plus-boundary nodes `x_i = i L / grid`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatModel {
    pub grid: usize,
    pub length: f64,
    pub diffusivity: f64,
    pub dt: f64,
    pub sources: Vec<f64>,
    pub sensors: Vec<f64>,
    pub scheme: HeatScheme,
}

impl Default for HeatModel {
    fn default() -> Self {
        Self {
            grid: 50,
            length: 1.0,
            diffusivity: 0.01,
            dt: 2.0,
            sources: vec![0.5, 0.6],
            sensors: vec![0.5, 0.6],
            scheme: HeatScheme::Exponential,
        }
    }
}

impl HeatModel {
    pub fn dx(&self) -> f64 {
        self.length / self.grid as f64
    }

    /// Largest stable explicit-Euler step.
    pub fn explicit_limit(&self) -> f64 {
        self.dx() * self.dx() / (2.0 * self.diffusivity)
    }

    /// Explicit-Euler configuration at `fraction` of the stability limit.
    pub fn explicit(fraction: f64) -> Self {
        let mut m = Self {
            scheme: HeatScheme::ExplicitEuler,
            ..Self::default()
        };
        m.dt = fraction * m.explicit_limit();
        m
    }

    /// 0-based index of the node nearest `x`.
    pub fn node_index(&self, x: f64) -> Result<usize> {
        if !(x > 0.0 && x <= self.length) {
            return Err(Error::Config(format!(
                "location {x} outside the slab (0, {}]",
                self.length
            )));
        }
        let i = (x / self.dx()).round() as usize;
        Ok(i.clamp(1, self.grid) - 1)
    }

    fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(Error::Config("heat grid needs at least 2 nodes".into()));
        }
        if !(self.length > 0.0 && self.diffusivity > 0.0 && self.dt > 0.0) {
            return Err(Error::Config(
                "length, diffusivity and dt must be positive".into(),
            ));
        }
        if self.sources.is_empty() || self.sensors.is_empty() {
            return Err(Error::Config("need at least one source and one sensor".into()));
        }
        if self.scheme == HeatScheme::ExplicitEuler && self.dt > self.explicit_limit() {
            return Err(Error::Precondition(format!(
                "explicit Euler step {} exceeds the stability limit {}",
                self.dt,
                self.explicit_limit()
            )));
        }
        Ok(())
    }

    /// Second-difference operator with the Dirichlet and ghost-node Neumann
    /// boundary rows.
    pub fn laplacian(&self) -> CMatrix {
        let n = self.grid;
        let inv = 1.0 / (self.dx() * self.dx());
        let mut l = CMatrix::zeros(n, n);
        for i in 0..n {
            l[(i, i)] = Complex64::new(-2.0 * inv, 0.0);
            if i > 0 {
                l[(i, i - 1)] = Complex64::new(inv, 0.0);
            }
            if i + 1 < n {
                l[(i, i + 1)] = Complex64::new(inv, 0.0);
            }
        }
        l[(n - 1, n - 2)] = Complex64::new(2.0 * inv, 0.0);
        l
    }
}

/// Noise-free heat plant; `B` columns are `dt` times the source indicators and
/// `C` rows pick the sensor nodes.
pub fn build_heat_system(cfg: &HeatModel) -> Result<LtiSystem> {
    cfg.validate()?;
    let n = cfg.grid;
    let step = cfg.laplacian().scale(cfg.dt * cfg.diffusivity);
    let a = match cfg.scheme {
        HeatScheme::ExplicitEuler => CMatrix::identity(n, n) + step,
        HeatScheme::Exponential => step.exp(),
    };
    let mut b = CMatrix::zeros(n, cfg.sources.len());
    for (j, &x) in cfg.sources.iter().enumerate() {
        b[(cfg.node_index(x)?, j)] = Complex64::new(cfg.dt, 0.0);
    }
    let mut c = CMatrix::zeros(cfg.sensors.len(), n);
    for (i, &x) in cfg.sensors.iter().enumerate() {
        c[(i, cfg.node_index(x)?)] = ONE;
    }
    LtiSystem::noiseless(a, b, c)
}

// ---------------------------------------------------------------------------
// stationary input models

/// `xi_k = A_e xi_{k-1} + B_e nu_{k-1}`, `u_k = C_e xi_k + mu_k`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "InputModelFile")]
pub struct TrueInputModel {
    #[serde(rename = "A_e", with = "cmatrix")]
    a_e: CMatrix,
    #[serde(rename = "B_e", with = "cmatrix")]
    b_e: CMatrix,
    #[serde(rename = "C_e", with = "cmatrix")]
    c_e: CMatrix,
    #[serde(rename = "Q_nu", with = "cmatrix")]
    q_nu: CMatrix,
    #[serde(rename = "Q_mu", with = "cmatrix")]
    q_mu: CMatrix,
}

#[derive(Deserialize)]
struct InputModelFile {
    #[serde(rename = "A_e", with = "cmatrix")]
    a_e: CMatrix,
    #[serde(rename = "B_e", with = "cmatrix")]
    b_e: CMatrix,
    #[serde(rename = "C_e", with = "cmatrix")]
    c_e: CMatrix,
    #[serde(rename = "Q_nu", with = "cmatrix")]
    q_nu: CMatrix,
    #[serde(rename = "Q_mu", with = "cmatrix")]
    q_mu: CMatrix,
}

impl TryFrom<InputModelFile> for TrueInputModel {
    type Error = Error;

    fn try_from(f: InputModelFile) -> Result<Self> {
        TrueInputModel::new(f.a_e, f.b_e, f.c_e, f.q_nu, f.q_mu)
    }
}

impl TrueInputModel {
    pub fn new(
        a_e: CMatrix,
        b_e: CMatrix,
        c_e: CMatrix,
        q_nu: CMatrix,
        q_mu: CMatrix,
    ) -> Result<Self> {
        let s = a_e.nrows();
        if a_e.ncols() != s
            || b_e.nrows() != s
            || c_e.ncols() != s
            || q_nu.shape() != (b_e.ncols(), b_e.ncols())
            || q_mu.shape() != (c_e.nrows(), c_e.nrows())
        {
            return Err(Error::Dimension("input model matrix shapes disagree".into()));
        }
        let rho = spectral_radius(&a_e)?;
        if rho >= 1.0 {
            return Err(Error::Unstable(format!(
                "input model spectral radius {rho:.6} is not below 1"
            )));
        }
        psd_factor(&q_nu)?;
        psd_factor(&q_mu)?;
        Ok(Self {
            a_e,
            b_e,
            c_e,
            q_nu,
            q_mu,
        })
    }

    pub fn a_e(&self) -> &CMatrix {
        &self.a_e
    }

    pub fn b_e(&self) -> &CMatrix {
        &self.b_e
    }

    pub fn c_e(&self) -> &CMatrix {
        &self.c_e
    }

    pub fn q_nu(&self) -> &CMatrix {
        &self.q_nu
    }

    pub fn q_mu(&self) -> &CMatrix {
        &self.q_mu
    }

    pub fn input_dim(&self) -> usize {
        self.c_e.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.a_e.nrows()
    }

    /// Stationary covariance of `xi`.
    pub fn state_covariance(&self) -> Result<CMatrix> {
        discrete_lyapunov(&self.a_e, &(&self.b_e * &self.q_nu * self.b_e.adjoint()))
    }

    /// Exact `R_uu(m)` for `|m| <= max_lag`.
    pub fn exact_autocorrelation(&self, max_lag: usize) -> Result<CorrelationSequence> {
        let sigma = self.state_covariance()?;
        let mut lags = Vec::with_capacity(max_lag + 1);
        lags.push(&self.c_e * &sigma * self.c_e.adjoint() + &self.q_mu);
        let mut right = sigma;
        for _ in 1..=max_lag {
            right = right * self.a_e.adjoint();
            lags.push(&self.c_e * &right * self.c_e.adjoint());
        }
        CorrelationSequence::from_nonnegative(lags)
    }

    /// `[[A, B C_e], [0, A_e]]` with noise `[[B L_mu, 0], [0, B_e L_nu]]` and
    /// the plant's measurement noise.
    pub fn augment(&self, plant: &LtiSystem) -> Result<AugmentedSystem> {
        let (n, p, q) = (plant.state_dim(), plant.input_dim(), plant.output_dim());
        if p != self.input_dim() {
            return Err(Error::Dimension(format!(
                "plant has {p} inputs, input model produces {}",
                self.input_dim()
            )));
        }
        let s = self.state_dim();
        let l_mu = psd_factor(&self.q_mu)?;
        let l_nu = psd_factor(&self.q_nu)?;
        let (wm, wn) = (l_mu.ncols(), l_nu.ncols());
        let mut a = CMatrix::zeros(n + s, n + s);
        a.view_mut((0, 0), (n, n)).copy_from(plant.a());
        a.view_mut((0, n), (n, s)).copy_from(&(plant.b() * &self.c_e));
        a.view_mut((n, n), (s, s)).copy_from(&self.a_e);
        let mut g = CMatrix::zeros(n + s, wm + wn);
        g.view_mut((0, 0), (n, wm)).copy_from(&(plant.b() * l_mu));
        g.view_mut((n, wm), (s, wn)).copy_from(&(&self.b_e * l_nu));
        let mut c = CMatrix::zeros(q, n + s);
        c.view_mut((0, 0), (q, n)).copy_from(plant.c());
        AugmentedSystem::new(a, g, c, plant.omega().clone(), n)
    }

    /// Stationary input sequence `u_0 .. u_{steps-1}`.
    pub fn generate(&self, steps: usize, seeds: &SeedSplitter) -> Result<Vec<CVector>> {
        let complex = !(is_real(&self.a_e)
            && is_real(&self.b_e)
            && is_real(&self.c_e)
            && is_real(&self.q_nu)
            && is_real(&self.q_mu));
        let l_xi = psd_factor(&self.state_covariance()?)?;
        let l_nu = psd_factor(&self.q_nu)?;
        let l_mu = psd_factor(&self.q_mu)?;
        let mut rng = seeds.rng(streams::INPUT);
        let mut xi = &l_xi * standard_normal(&mut rng, l_xi.ncols(), complex);
        let mut next = xi.clone();
        let mut out = Vec::with_capacity(steps);
        for k in 0..steps {
            if k > 0 {
                let nu = &l_nu * standard_normal(&mut rng, l_nu.ncols(), complex);
                next.gemv(ONE, &self.a_e, &xi, ZERO);
                next.gemv(ONE, &self.b_e, &nu, ONE);
                std::mem::swap(&mut xi, &mut next);
            }
            let mu = &l_mu * standard_normal(&mut rng, l_mu.ncols(), complex);
            out.push(&self.c_e * &xi + mu);
        }
        Ok(out)
    }

    /// Same structure with the eigenvalues of `A_e` (sorted by decreasing
    /// real part) shifted by `shifts`, eigenvectors kept.
    pub fn with_shifted_eigenvalues(&self, shifts: &[f64]) -> Result<Self> {
        let a_o = shift_eigenvalues(&self.a_e, shifts)?;
        Self::new(
            a_o,
            self.b_e.clone(),
            self.c_e.clone(),
            self.q_nu.clone(),
            self.q_mu.clone(),
        )
    }
}

/// Eigenvalues sorted by decreasing real part with matching unit eigenvectors.
fn eigen_decomposition(a: &CMatrix) -> Result<(Vec<Complex64>, CMatrix)> {
    let n = a.nrows();
    let mut lambdas = eigenvalues(a)?;
    lambdas.sort_by(|x, y| y.re.total_cmp(&x.re).then(y.im.total_cmp(&x.im)));
    let mut v = CMatrix::zeros(n, n);
    for (k, &lambda) in lambdas.iter().enumerate() {
        let shifted = a - CMatrix::identity(n, n) * lambda;
        // right singular vector of the smallest singular value
        let v_t = svd(&shifted)?.v_t;
        for i in 0..n {
            v[(i, k)] = v_t[(n - 1, i)].conj();
        }
    }
    if singular_values(&v).last().copied().unwrap_or(0.0) < 1e-10 {
        return Err(Error::Numerical("matrix is not diagonalizable".into()));
    }
    Ok((lambdas, v))
}

/// `V (Lambda + diag(shifts)) V^{-1}`.
pub fn shift_eigenvalues(a: &CMatrix, shifts: &[f64]) -> Result<CMatrix> {
    if shifts.len() != a.nrows() {
        return Err(Error::Dimension("one shift per eigenvalue".into()));
    }
    let (lambdas, v) = eigen_decomposition(a)?;
    let inv = v
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("eigenvector matrix is singular".into()))?;
    let diag = CMatrix::from_diagonal(&CVector::from_iterator(
        lambdas.len(),
        lambdas.iter().zip(shifts).map(|(l, s)| l + s),
    ));
    let mut out = &v * diag * inv;
    if is_real(a) && lambdas.iter().all(|l| l.im == 0.0) {
        out.apply(|z| z.im = 0.0);
    }
    Ok(out)
}

/// `A_e = [[0.3, 0.5], [0.4, 0.2]]`, `B_e = C_e = I`, `nu = 0`,
/// `mu ~ N(0, 10 I)`.
pub fn paper_input_model() -> TrueInputModel {
    TrueInputModel::new(
        real_matrix(2, 2, &[0.3, 0.5, 0.4, 0.2]),
        scaled_identity(2, 1.0),
        scaled_identity(2, 1.0),
        CMatrix::zeros(2, 2),
        scaled_identity(2, 10.0),
    )
    .expect("fixed input model is valid")
}

/// Same `A_e` with the noise entering the state: `nu ~ N(0, 10 I)`, `mu = 0`.
/// Gives a genuinely colored input.
pub fn colored_input_model() -> TrueInputModel {
    TrueInputModel::new(
        real_matrix(2, 2, &[0.3, 0.5, 0.4, 0.2]),
        scaled_identity(2, 1.0),
        scaled_identity(2, 1.0),
        scaled_identity(2, 10.0),
        CMatrix::zeros(2, 2),
    )
    .expect("fixed input model is valid")
}

/// Half-widths of the uniform eigenvalue perturbations.
pub const PERTURBATION_WIDTHS: [f64; 2] = [0.3, 0.8];

/// Assumed model of the baseline filter: `eta_{k+1} = A_o eta_k + v_k` with
/// `v ~ N(0, 10 I)` and the fixed `A_o`.
pub fn paper_perturbed_model() -> TrueInputModel {
    TrueInputModel::new(
        real_matrix(2, 2, &[0.4569, 0.2768, 0.2214, 0.4016]),
        scaled_identity(2, 1.0),
        scaled_identity(2, 1.0),
        scaled_identity(2, 10.0),
        CMatrix::zeros(2, 2),
    )
    .expect("fixed perturbed model is valid")
}

/// Random draw of the baseline: eigenvalues of `A_e` shifted by
/// `U[-0.3, 0.3]` and `U[-0.8, 0.8]`, redrawn (at most 100 times) until
/// stable.
pub fn perturbed_input_model(seed: u64) -> Result<TrueInputModel> {
    let base = colored_input_model();
    let mut rng = SeedSplitter::new(seed).rng(streams::PERTURBATION);
    for _ in 0..100 {
        let shifts: Vec<f64> = PERTURBATION_WIDTHS
            .iter()
            .map(|&w| rng.random_range(-w..=w))
            .collect();
        match base.with_shifted_eigenvalues(&shifts) {
            Ok(m) => return Ok(m),
            Err(Error::Unstable(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Unstable("no stable perturbation in 100 draws".into()))
}

// ---------------------------------------------------------------------------
// scenario configuration

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantSpec {
    Heat(HeatModel),
    /// Path to an `LtiSystem` JSON file (relative to the config file).
    File(PathBuf),
    System(LtiSystem),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputModelSpec {
    Paper,
    Colored,
    Custom(TrueInputModel),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineSpec {
    /// Fixed `A_o` instance.
    Paper,
    /// Eigenvalue perturbation drawn from this seed.
    Random(u64),
    Custom(TrueInputModel),
}

/// Measurement noise, either explicit or from a target noise-to-signal ratio
/// (`Omega_j = nsr^2 Var(y_j)` per sensor).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSpec {
    Nsr(f64),
    Variance(f64),
    #[serde(with = "cmatrix")]
    Matrix(CMatrix),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignParams {
    /// Number of Markov parameters.
    #[serde(rename = "M")]
    pub markov: usize,
    #[serde(rename = "N_i")]
    pub input_lags: usize,
    #[serde(rename = "N_o")]
    pub output_lags: usize,
    /// AR order; chosen by final prediction error when absent.
    #[serde(rename = "M_i")]
    pub ar_order: Option<usize>,
    /// Samples used to estimate the output autocorrelation.
    #[serde(rename = "T")]
    pub samples: usize,
    #[serde(deserialize_with = "deserialize_era_order")]
    pub era_order: EraOrder,
}

impl Default for DesignParams {
    fn default() -> Self {
        Self {
            markov: 400,
            input_lags: 40,
            output_lags: 200,
            ar_order: None,
            samples: 200_000,
            era_order: EraOrder::Auto,
        }
    }
}

fn deserialize_era_order<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<EraOrder, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Count(usize),
        Text(String),
        Tagged(EraOrder),
    }
    match Raw::deserialize(d)? {
        Raw::Count(n) => Ok(EraOrder::Fixed(n)),
        Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        Raw::Tagged(o) => Ok(o),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    pub method: SolveMethod,
    pub cg_tol: f64,
    pub cg_max_iter: Option<usize>,
    pub memory_budget: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            method: SolveMethod::Direct,
            cg_tol: DEFAULT_CG_TOLERANCE,
            cg_max_iter: None,
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    pub steps: usize,
    pub monte_carlo: usize,
    pub nsr_levels: Vec<f64>,
    pub baseline: BaselineSpec,
    /// Plant state components written to the per-step CSV; defaults to the
    /// sensor nodes.
    pub monitored: Option<Vec<usize>>,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            steps: 200,
            monte_carlo: 10,
            nsr_levels: TABLE_NSR_LEVELS.to_vec(),
            baseline: BaselineSpec::Paper,
            monitored: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RomParams {
    pub order: usize,
    pub snapshots: Option<usize>,
    /// Number of Markov parameters compared between full model and ROM.
    pub compare: usize,
}

impl Default for RomParams {
    fn default() -> Self {
        Self {
            order: 20,
            snapshots: None,
            compare: 50,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_plant")]
    pub plant: PlantSpec,
    #[serde(default = "default_input_model")]
    pub input_model: InputModelSpec,
    #[serde(default = "default_noise")]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub design: DesignParams,
    #[serde(default)]
    pub solver: SolverParams,
    #[serde(default)]
    pub filter: FilterParams,
    #[serde(default)]
    pub rom: RomParams,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_plant() -> PlantSpec {
    PlantSpec::Heat(HeatModel::default())
}

fn default_input_model() -> InputModelSpec {
    InputModelSpec::Paper
}

fn default_noise() -> NoiseSpec {
    NoiseSpec::Nsr(TABLE_NSR_LEVELS[0])
}

impl Default for Scenario {
    fn default() -> Self {
        Self::desk_heat()
    }
}

impl Scenario {
    /// Heat benchmark with `M = 400`, `N_i = 40`, `N_o = 200`, `T = 2e5`.
    pub fn desk_heat() -> Self {
        Self {
            plant: default_plant(),
            input_model: default_input_model(),
            noise: default_noise(),
            design: DesignParams::default(),
            solver: SolverParams::default(),
            filter: FilterParams::default(),
            rom: RomParams::default(),
            seed: 2017,
            output_dir: None,
        }
    }

    /// Heat benchmark with `M = 4000`, `N_i = 200`, `N_o = 2000`.
    pub fn paper_heat() -> Self {
        let mut s = Self::desk_heat();
        s.design.markov = 4000;
        s.design.input_lags = 200;
        s.design.output_lags = 2000;
        s.design.samples = 1_000_000;
        s
    }

    /// Reads a JSON scenario; relative plant file paths resolve against the
    /// config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut scn: Scenario = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let PlantSpec::File(p) = &mut scn.plant {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        scn.validate()?;
        Ok(scn)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.design;
        if d.markov == 0 || d.samples == 0 {
            return Err(Error::Config("M and T must be positive".into()));
        }
        if d.input_lags > d.output_lags {
            return Err(Error::Config(format!(
                "N_i = {} must not exceed N_o = {}",
                d.input_lags, d.output_lags
            )));
        }
        if d.samples <= d.output_lags {
            return Err(Error::Config("T must exceed N_o".into()));
        }
        if d.ar_order == Some(0) {
            return Err(Error::Config("M_i must be positive".into()));
        }
        if let Some(m) = d.ar_order {
            if m > d.input_lags {
                return Err(Error::Config(format!(
                    "M_i = {m} needs at least that many recovered lags, N_i = {}",
                    d.input_lags
                )));
            }
        }
        if self.filter.steps == 0 || self.filter.monte_carlo == 0 {
            return Err(Error::Config("filter steps and runs must be positive".into()));
        }
        if self.rom.order == 0 {
            return Err(Error::Config("ROM order must be positive".into()));
        }
        match &self.noise {
            NoiseSpec::Nsr(x) | NoiseSpec::Variance(x) if !(*x >= 0.0) => {
                Err(Error::Config("noise level must be non-negative".into()))
            }
            _ => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// pipeline

/// Plant with measurement noise set, the true input model and the true
/// augmented system.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub plant: LtiSystem,
    pub input_model: TrueInputModel,
    pub truth: AugmentedSystem,
    /// Achieved noise-to-signal ratio per sensor.
    pub nsr: Vec<f64>,
}

pub fn build_plant(spec: &PlantSpec) -> Result<LtiSystem> {
    match spec {
        PlantSpec::Heat(h) => build_heat_system(h),
        PlantSpec::File(p) => LtiSystem::load(p)
            .map_err(|e| Error::Config(format!("plant file {}: {e}", p.display()))),
        PlantSpec::System(s) => Ok(s.clone()),
    }
}

pub fn build_input_model(spec: &InputModelSpec) -> TrueInputModel {
    match spec {
        InputModelSpec::Paper => paper_input_model(),
        InputModelSpec::Colored => colored_input_model(),
        InputModelSpec::Custom(m) => m.clone(),
    }
}

pub fn build_baseline(spec: &BaselineSpec) -> Result<TrueInputModel> {
    match spec {
        BaselineSpec::Paper => Ok(paper_perturbed_model()),
        BaselineSpec::Random(seed) => perturbed_input_model(*seed),
        BaselineSpec::Custom(m) => Ok(m.clone()),
    }
}

/// Noise-free output variance `diag(C Sigma C*)` of the true system.
pub fn output_signal_variance(plant: &LtiSystem, model: &TrueInputModel) -> Result<Vec<f64>> {
    let noiseless = plant.with_omega(CMatrix::zeros(plant.output_dim(), plant.output_dim()))?;
    let sigma = model.augment(&noiseless)?.steady_state_covariance()?;
    let n = plant.state_dim();
    let sx = sigma.view((0, 0), (n, n)).into_owned();
    let cov = plant.c() * sx * plant.c().adjoint();
    Ok(cov.diagonal().iter().map(|z| z.re).collect())
}

/// Measurement-noise covariance for a noise specification.
pub fn noise_covariance(plant: &LtiSystem, model: &TrueInputModel, spec: &NoiseSpec) -> Result<CMatrix> {
    let q = plant.output_dim();
    match spec {
        NoiseSpec::Variance(v) => Ok(scaled_identity(q, *v)),
        NoiseSpec::Matrix(m) => Ok(m.clone()),
        NoiseSpec::Nsr(level) => {
            let var = output_signal_variance(plant, model)?;
            let mut omega = CMatrix::zeros(q, q);
            for (j, v) in var.iter().enumerate() {
                if !(*v > 0.0) {
                    return Err(Error::UndefinedRatio(format!(
                        "sensor {j} has zero signal variance"
                    )));
                }
                omega[(j, j)] = Complex64::new(level * level * v, 0.0);
            }
            Ok(omega)
        }
    }
}

pub fn prepare(scn: &Scenario) -> Result<Prepared> {
    prepare_with_noise(scn, &scn.noise)
}

pub fn prepare_with_noise(scn: &Scenario, noise: &NoiseSpec) -> Result<Prepared> {
    let plant = build_plant(&scn.plant)?;
    let input_model = build_input_model(&scn.input_model);
    let omega = noise_covariance(&plant, &input_model, noise)?;
    let plant = plant.with_omega(omega.clone())?;
    let truth = input_model.augment(&plant)?;
    let var = output_signal_variance(&plant, &input_model)?;
    let nsr = var
        .iter()
        .enumerate()
        .map(|(j, v)| crate::filtering::nsr_from_variance(*v, omega[(j, j)].re))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        plant,
        input_model,
        truth,
        nsr,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Default)]
struct Stopwatch {
    times: Vec<StageTime>,
}

impl Stopwatch {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f();
        self.times.push(StageTime {
            stage: stage.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }
}

/// Steps 1 to 3: output statistics, coefficient matrix, least squares.
#[derive(Clone, Debug)]
pub struct RecoveryOutcome {
    pub ryy: CorrelationSequence,
    pub recovery: Recovery,
    pub exact: CorrelationSequence,
    pub errors: RelativeErrors,
    pub markov_tail: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RecoverySummary {
    pub diagnostics: crate::recovery::SolverDiagnostics,
    pub markov_tail_norm: f64,
    /// Lags within 10 of zero holding at least 1% of `||R_uu(0)||`.
    pub significant_lags: Vec<i64>,
    pub max_relative_error_significant: f64,
    pub relative_errors: RelativeErrors,
}

impl RecoveryOutcome {
    pub fn summary(&self) -> RecoverySummary {
        let lags = significant_lags(&self.exact, 0.01, 10);
        RecoverySummary {
            diagnostics: self.recovery.diagnostics.clone(),
            markov_tail_norm: self.markov_tail,
            max_relative_error_significant: self.errors.max_relative(|m| lags.contains(&m)),
            significant_lags: lags,
            relative_errors: self.errors.clone(),
        }
    }
}

/// Output autocorrelation `R_hat_yy` (noise floor removed) from a fresh
/// simulation of `T` samples.
pub fn estimate_output_autocorrelation(
    scn: &Scenario,
    prep: &Prepared,
    seeds: &SeedSplitter,
) -> Result<CorrelationSequence> {
    let traj = prep.truth.simulate(scn.design.samples, seeds)?;
    let ryy = sample_autocorrelation(&traj.outputs, scn.design.output_lags)?;
    ryy.subtract_noise_floor(prep.plant.omega())
}

/// Recovers `R_uu` from `ryy` with the given Markov parameters.
pub fn recover_from(
    scn: &Scenario,
    prep: &Prepared,
    markov: &MarkovSequence,
    ryy: &CorrelationSequence,
) -> Result<RecoveryOutcome> {
    let d = &scn.design;
    let cm = CoefficientMatrix::with_budget(
        markov,
        d.input_lags,
        d.output_lags,
        scn.solver.memory_budget,
    )
    .map_err(Error::stage(2, "coefficient matrix"))?;
    let recovery = solve_input_autocorr_with(
        &cm,
        ryy,
        scn.solver.method,
        CgOptions {
            tol: scn.solver.cg_tol,
            max_iter: scn.solver.cg_max_iter,
        },
    )
    .map_err(Error::stage(3, "input autocorrelation least squares"))?;
    let exact = prep.input_model.exact_autocorrelation(d.input_lags)?;
    let errors = relative_error(&exact, &recovery.sequence)?;
    Ok(RecoveryOutcome {
        ryy: ryy.clone(),
        recovery,
        exact,
        errors,
        markov_tail: markov.tail_norm(),
    })
}

fn plant_markov(plant: &LtiSystem, count: usize) -> Result<MarkovSequence> {
    let h = plant.markov_parameters(count)?;
    let head = h.get(1).norm();
    if h.tail_norm() > 1e-6 * head {
        warn!(
            "||h_M|| = {:.3e} is not negligible against ||h_1|| = {:.3e}; consider a larger M",
            h.tail_norm(),
            head
        );
    }
    Ok(h)
}

/// Steps 4 to 7: AR fit, residual covariance, realization, Cholesky factor.
#[derive(Clone, Debug)]
pub struct Identification {
    pub ar: ArModel,
    pub order_scores: Vec<(usize, f64)>,
    pub innovations: InnovationsModel,
}

pub fn identify(scn: &Scenario, ruu: &CorrelationSequence) -> Result<Identification> {
    let (order, scores) = match scn.design.ar_order {
        Some(m) => (m, Vec::new()),
        None => {
            let sel = select_order_fpe(ruu, scn.design.samples)
                .map_err(Error::stage(4, "AR order selection"))?;
            (sel.order, sel.scores)
        }
    };
    let ar = fit_yule_walker(ruu, order).map_err(|e| match e {
        Error::InconsistentStatistics(_) => Error::stage(5, "residual covariance")(e),
        other => Error::stage(4, "Yule-Walker fit")(other),
    })?;
    let innovations = realize_innovations(&ar, scn.design.era_order).map_err(|e| match e {
        Error::Cholesky(_) => Error::stage(7, "innovations model")(e),
        other => Error::stage(6, "realization")(other),
    })?;
    Ok(Identification {
        ar,
        order_scores: scores,
        innovations,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct FilterMetrics {
    pub armse: f64,
    /// Fraction of steps inside the 3-sigma band, per monitored component.
    pub three_sigma_fraction: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FilterComparison {
    pub nsr: Vec<f64>,
    pub ar_based: FilterMetrics,
    pub baseline: FilterMetrics,
    /// Largest whitened-innovation autocorrelation coefficient over lags 1..5
    /// for the AR-based filter.
    pub ar_whiteness_max: f64,
    pub whiteness_bound: f64,
}

/// One seeded comparison run: truth, AR-based filter and baseline filter.
#[derive(Clone, Debug)]
pub struct ComparisonRun {
    pub truth: Trajectory,
    pub ar_run: FilterRun,
    pub baseline_run: FilterRun,
    pub monitored: Vec<usize>,
    pub metrics: FilterComparison,
}

/// Default monitored states: the nodes read by the sensors.
pub fn monitored_components(scn: &Scenario, plant: &LtiSystem) -> Vec<usize> {
    if let Some(m) = &scn.filter.monitored {
        return m.clone();
    }
    (0..plant.output_dim())
        .map(|i| {
            let row = plant.c().row(i);
            (0..row.len())
                .max_by(|&a, &b| row[a].norm().total_cmp(&row[b].norm()))
                .unwrap_or(0)
        })
        .collect()
}

pub fn compare_filters(
    scn: &Scenario,
    prep: &Prepared,
    innovations: &InnovationsModel,
    baseline: &TrueInputModel,
    seeds: &SeedSplitter,
) -> Result<ComparisonRun> {
    let tag = || Error::stage(8, "augmented-state filtering");
    let ar_sys = build_augmented(&prep.plant, innovations).map_err(tag())?;
    let base_sys = baseline.augment(&prep.plant).map_err(tag())?;
    let truth = prep.truth.simulate(scn.filter.steps, seeds).map_err(tag())?;
    let n = prep.plant.state_dim();
    let monitored = monitored_components(scn, &prep.plant);
    if monitored.iter().any(|&i| i >= n) {
        return Err(Error::Config("monitored component outside the plant state".into()));
    }
    // both filters start from the same prior, sized by the AR-based model
    let variance = initial_variance(&ar_sys).map_err(tag())?;
    let run_one = |sys: &AugmentedSystem| -> Result<FilterRun> {
        run_filter(
            sys,
            &truth.outputs,
            &FilterState::scaled_identity(sys.state_dim(), variance),
        )
    };
    let ar_run = run_one(&ar_sys).map_err(tag())?;
    let baseline_run = run_one(&base_sys).map_err(tag())?;
    let plant_truth = leading_components(&truth.states, n);
    let metrics_for = |run: &FilterRun| -> Result<FilterMetrics> {
        Ok(FilterMetrics {
            armse: armse(&leading_components(&run.estimates, n), &plant_truth)?,
            three_sigma_fraction: three_sigma_fraction(run, &truth.states, &monitored)?,
        })
    };
    let whiteness = innovation_whiteness(&ar_run, 5)?;
    let metrics = FilterComparison {
        nsr: prep.nsr.clone(),
        ar_based: metrics_for(&ar_run)?,
        baseline: metrics_for(&baseline_run)?,
        ar_whiteness_max: whiteness.iter().flatten().fold(0.0, |a: f64, &b| a.max(b)),
        whiteness_bound: 3.0 / (scn.filter.steps as f64).sqrt(),
    };
    Ok(ComparisonRun {
        truth,
        ar_run,
        baseline_run,
        monitored,
        metrics,
    })
}

/// Everything a full pipeline run produces.
#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub prepared: Prepared,
    pub recovery: RecoveryOutcome,
    pub identification: Identification,
    pub comparison: ComparisonRun,
    pub report: PipelineReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineReport {
    pub recovery: RecoverySummary,
    pub ar_order: usize,
    pub order_scores: Vec<(usize, f64)>,
    pub innovations_states: usize,
    pub era_truncated: bool,
    pub cholesky_jitter: bool,
    pub filter: FilterComparison,
    pub timings: Vec<StageTime>,
}

/// Seeds for identification and for filter run `k`.
pub fn identification_seeds(root: u64) -> SeedSplitter {
    SeedSplitter::new(root).child(streams::INPUT)
}

pub fn filter_seeds(root: u64, run: u64) -> SeedSplitter {
    SeedSplitter::new(root).child(streams::MONTE_CARLO).child(run)
}

/// Steps 1 to 7 on the full plant, then the filter comparison.
pub fn run_pipeline(scn: &Scenario) -> Result<PipelineOutcome> {
    scn.validate()?;
    let mut sw = Stopwatch::default();
    let prep = sw.time("setup", || prepare(scn))?;
    prep.plant.require_assumptions()?;
    let ryy = sw
        .time("output autocorrelation", || {
            estimate_output_autocorrelation(scn, &prep, &identification_seeds(scn.seed))
        })
        .map_err(Error::stage(1, "output autocorrelation"))?;
    let markov = sw
        .time("markov parameters", || plant_markov(&prep.plant, scn.design.markov))
        .map_err(Error::stage(2, "coefficient matrix"))?;
    let recovery = sw.time("least squares", || recover_from(scn, &prep, &markov, &ryy))?;
    let ident = sw.time("identification", || identify(scn, &recovery.recovery.sequence))?;
    let baseline = build_baseline(&scn.filter.baseline)?;
    let comparison = sw.time("filtering", || {
        compare_filters(scn, &prep, &ident.innovations, &baseline, &filter_seeds(scn.seed, 0))
    })?;
    info!(
        "recovery max error {:.3e}, AR order {}, ARMSE {:.4e} (baseline {:.4e})",
        recovery.summary().max_relative_error_significant,
        ident.ar.order(),
        comparison.metrics.ar_based.armse,
        comparison.metrics.baseline.armse
    );
    let report = PipelineReport {
        recovery: recovery.summary(),
        ar_order: ident.ar.order(),
        order_scores: ident.order_scores.clone(),
        innovations_states: ident.innovations.state_dim(),
        era_truncated: ident.innovations.realization().was_truncated(),
        cholesky_jitter: ident.innovations.jittered(),
        filter: comparison.metrics.clone(),
        timings: sw.times,
    };
    Ok(PipelineOutcome {
        prepared: prep,
        recovery,
        identification: ident,
        comparison,
        report,
    })
}

/// Recovery (steps 1 to 3) only.
pub fn run_recovery(scn: &Scenario) -> Result<(Prepared, RecoveryOutcome)> {
    scn.validate()?;
    let prep = prepare(scn)?;
    prep.plant.require_assumptions()?;
    let ryy = estimate_output_autocorrelation(scn, &prep, &identification_seeds(scn.seed))
        .map_err(Error::stage(1, "output autocorrelation"))?;
    let markov = plant_markov(&prep.plant, scn.design.markov)
        .map_err(Error::stage(2, "coefficient matrix"))?;
    let out = recover_from(scn, &prep, &markov, &ryy)?;
    Ok((prep, out))
}

// ---------------------------------------------------------------------------
// reduced-order pipeline

#[derive(Clone, Debug)]
pub struct RomOutcome {
    pub rom: StateSpaceRealization,
    pub basis: BpodBasis,
    /// Relative error of the first `compare` ROM Markov parameters.
    pub markov_errors: Vec<f64>,
    pub full: RecoveryOutcome,
    pub reduced: RecoveryOutcome,
}

#[derive(Clone, Debug, Serialize)]
pub struct RomReport {
    pub order: usize,
    pub truncated: bool,
    pub hankel_singular_values: Vec<f64>,
    pub biorthogonality_defect: f64,
    pub max_markov_error: f64,
    pub full_max_error: f64,
    pub rom_max_error: f64,
}

impl RomOutcome {
    pub fn report(&self) -> RomReport {
        RomReport {
            order: self.rom.order(),
            truncated: self.rom.was_truncated(),
            hankel_singular_values: self.rom.singular_values().to_vec(),
            biorthogonality_defect: self.basis.biorthogonality_defect(),
            max_markov_error: self.markov_errors.iter().copied().fold(0.0, f64::max),
            full_max_error: self.full.summary().max_relative_error_significant,
            rom_max_error: self.reduced.summary().max_relative_error_significant,
        }
    }
}

/// BPOD reduction of the plant only.
pub fn reduce_plant(
    plant: &LtiSystem,
    rom: &RomParams,
) -> Result<(StateSpaceRealization, BpodBasis, Vec<f64>)> {
    let (red, basis) = bpod_reduce(plant, rom.snapshots, rom.order)?;
    let full = plant.markov_parameters(rom.compare)?;
    let approx = red.markov_parameters(rom.compare)?;
    let errors = (1..=rom.compare)
        .map(|k| crate::linalg::relative_difference(approx.get(k), full.get(k)))
        .collect();
    Ok((red, basis, errors))
}

/// Recovery with the full plant and with the BPOD ROM Markov parameters on
/// the same output data.
pub fn run_rom_pipeline(scn: &Scenario) -> Result<RomOutcome> {
    scn.validate()?;
    let prep = prepare(scn)?;
    let (rom, basis, markov_errors) = reduce_plant(&prep.plant, &scn.rom)?;
    let ryy = estimate_output_autocorrelation(scn, &prep, &identification_seeds(scn.seed))
        .map_err(Error::stage(1, "output autocorrelation"))?;
    let full_h = plant_markov(&prep.plant, scn.design.markov)
        .map_err(Error::stage(2, "coefficient matrix"))?;
    let rom_h = rom
        .markov_parameters(scn.design.markov)
        .map_err(Error::stage(2, "coefficient matrix"))?;
    let full = recover_from(scn, &prep, &full_h, &ryy)?;
    let reduced = recover_from(scn, &prep, &rom_h, &ryy)?;
    Ok(RomOutcome {
        rom,
        basis,
        markov_errors,
        full,
        reduced,
    })
}

// ---------------------------------------------------------------------------
// noise sweep

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub nsr_target: f64,
    /// Achieved ratio at the first sensor.
    pub nsr: f64,
    pub ar_order: usize,
    pub ar_armse: f64,
    pub baseline_armse: f64,
    pub ar_armse_runs: Vec<f64>,
    pub baseline_armse_runs: Vec<f64>,
}

/// For every noise level: identify once, then average the AR-based and
/// baseline ARMSE over `monte_carlo` runs. Random numbers are common to both
/// filters and to all levels, so levels differ only in the noise scale.
pub fn nsr_sweep(scn: &Scenario, levels: &[f64]) -> Result<Vec<SweepRow>> {
    scn.validate()?;
    let baseline = build_baseline(&scn.filter.baseline)?;
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let prep = prepare_with_noise(scn, &NoiseSpec::Nsr(level))?;
        let ryy = estimate_output_autocorrelation(scn, &prep, &identification_seeds(scn.seed))
            .map_err(Error::stage(1, "output autocorrelation"))?;
        let markov = plant_markov(&prep.plant, scn.design.markov)
            .map_err(Error::stage(2, "coefficient matrix"))?;
        let rec = recover_from(scn, &prep, &markov, &ryy)?;
        let ident = identify(scn, &rec.recovery.sequence)?;
        let runs: Vec<(f64, f64)> = (0..scn.filter.monte_carlo as u64)
            .into_par_iter()
            .map(|k| {
                let run = compare_filters(
                    scn,
                    &prep,
                    &ident.innovations,
                    &baseline,
                    &filter_seeds(scn.seed, k),
                )?;
                Ok((run.metrics.ar_based.armse, run.metrics.baseline.armse))
            })
            .collect::<Result<_>>()?;
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let ar_runs: Vec<f64> = runs.iter().map(|r| r.0).collect();
        let base_runs: Vec<f64> = runs.iter().map(|r| r.1).collect();
        info!(
            "NSR {:.4}%: AR-based ARMSE {:.4e}, baseline {:.4e}",
            100.0 * level,
            mean(&ar_runs),
            mean(&base_runs)
        );
        rows.push(SweepRow {
            nsr_target: level,
            nsr: prep.nsr[0],
            ar_order: ident.ar.order(),
            ar_armse: mean(&ar_runs),
            baseline_armse: mean(&base_runs),
            ar_armse_runs: ar_runs,
            baseline_armse_runs: base_runs,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: std::io::Write>(mut w: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "nsr_target,nsr,ar_order,ar_armse,baseline_armse")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.nsr_target, r.nsr, r.ar_order, r.ar_armse, r.baseline_armse
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// run manifest

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: Scenario,
    pub timings: Vec<StageTime>,
    pub files: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config: &Scenario) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.seed,
            config: config.clone(),
            timings: Vec::new(),
            files: Vec::new(),
        }
    }

    /// Records `name` under `dir` and returns its full path.
    pub fn file(&mut self, dir: &Path, name: &str) -> PathBuf {
        self.files.push(PathBuf::from(name));
        dir.join(name)
    }

    pub fn write(&mut self, dir: &Path) -> Result<PathBuf> {
        let path = self.file(dir, "manifest.json");
        serial::write_json(&path, self)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn heat_system_shape_and_placement() {
        let cfg = HeatModel::default();
        let sys = build_heat_system(&cfg).unwrap();
        assert_eq!((sys.state_dim(), sys.input_dim(), sys.output_dim()), (50, 2, 2));
        assert_eq!(cfg.node_index(0.5).unwrap(), 24);
        assert_eq!(cfg.node_index(0.6).unwrap(), 29);
        assert_eq!(sys.b()[(24, 0)].re, cfg.dt);
        assert_eq!(sys.b().column(0).iter().filter(|z| z.norm() > 0.0).count(), 1);
        assert_eq!(sys.c()[(1, 29)].re, 1.0);
        assert!(sys.check_assumptions().all_passed());
    }

    #[test]
    fn explicit_scheme_limits() {
        let ok = HeatModel::explicit(0.4);
        assert!(build_heat_system(&ok).is_ok());
        let mut bad = ok.clone();
        bad.dt = 1.01 * bad.explicit_limit();
        assert!(matches!(build_heat_system(&bad), Err(Error::Precondition(_))));
    }

    #[test]
    fn heat_decays_without_input() {
        let sys = build_heat_system(&HeatModel::default()).unwrap();
        let x0 = CVector::from_element(50, ONE);
        let u = vec![CVector::zeros(2); 400];
        let traj = sys.simulate_with_states(&u, 0, &x0).unwrap();
        assert!(traj.states.last().unwrap().norm() < 1e-6 * x0.norm());
    }

    #[test]
    fn paper_model_eigenvalues() {
        let m = paper_input_model();
        let mut ev: Vec<f64> = eigenvalues(m.a_e()).unwrap().iter().map(|z| z.re).collect();
        ev.sort_by(f64::total_cmp);
        assert_relative_eq!(ev[0], -0.2, epsilon = 1e-12);
        assert_relative_eq!(ev[1], 0.7, epsilon = 1e-12);
        assert_eq!(m.q_mu(), &scaled_identity(2, 10.0));
    }

    #[test]
    fn paper_perturbed_eigenvalues() {
        let m = paper_perturbed_model();
        let mut ev: Vec<f64> = eigenvalues(m.a_e()).unwrap().iter().map(|z| z.re).collect();
        ev.sort_by(f64::total_cmp);
        assert!((ev[0] - 0.1802).abs() < 1e-4);
        assert!((ev[1] - 0.6783).abs() < 1e-4);
    }

    #[test]
    fn zero_shift_round_trip() {
        let a = paper_input_model().a_e().clone();
        let back = shift_eigenvalues(&a, &[0.0, 0.0]).unwrap();
        assert!((back - a).norm() < 1e-12);
    }

    #[test]
    fn random_perturbation_is_stable_and_seeded() {
        let a = perturbed_input_model(5).unwrap();
        let b = perturbed_input_model(5).unwrap();
        assert_eq!(a.a_e(), b.a_e());
        assert!(spectral_radius(a.a_e()).unwrap() < 1.0);
    }

    #[test]
    fn white_input_model_autocorrelation() {
        let r = paper_input_model().exact_autocorrelation(3).unwrap();
        assert_eq!(r.lag(0), &scaled_identity(2, 10.0));
        assert!(r.lag(1).norm() < 1e-14);
    }

    #[test]
    fn scenario_json_defaults() {
        let scn: Scenario = serde_json::from_str(r#"{"design": {"M": 50, "era_order": 3}}"#).unwrap();
        assert_eq!(scn.design.markov, 50);
        assert_eq!(scn.design.input_lags, 40);
        assert_eq!(scn.design.era_order, EraOrder::Fixed(3));
        let scn: Scenario =
            serde_json::from_str(r#"{"input_model": "colored", "noise": {"variance": 0.1}}"#)
                .unwrap();
        assert!(matches!(scn.input_model, InputModelSpec::Colored));
        assert!(serde_json::from_str::<Scenario>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn scenario_validation() {
        let mut s = Scenario::desk_heat();
        s.design.input_lags = 300;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn nsr_noise_matches_target() {
        let scn = Scenario::desk_heat();
        let prep = prepare_with_noise(&scn, &NoiseSpec::Nsr(0.1)).unwrap();
        for v in &prep.nsr {
            assert_relative_eq!(*v, 0.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_signal_is_undefined_ratio() {
        let mut scn = Scenario::desk_heat();
        scn.input_model = InputModelSpec::Custom(
            TrueInputModel::new(
                scaled_identity(2, 0.5),
                scaled_identity(2, 1.0),
                scaled_identity(2, 1.0),
                CMatrix::zeros(2, 2),
                CMatrix::zeros(2, 2),
            )
            .unwrap(),
        );
        assert!(matches!(prepare(&scn), Err(Error::UndefinedRatio(_))));
    }
}
