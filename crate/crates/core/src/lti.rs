//! Complex discrete-time LTI plants
//!
//! ```text
//! x_k = A x_{k-1} + B u_{k-1}
//! y_k = C x_k + v_k,        E[v_k v_k*] = Omega
//! ```
//!
//! with their Markov parameters, seeded simulation and the standing
//! assumption checks (stability, detectability, rank conditions).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    eigenvalues, hermitian_defect, hermitian_eigenvalues, identity, is_real, numerical_rank,
    CMatrix, CVector, ONE, ZERO,
};
use crate::rng::{GaussianSource, SeedSplitter};
use crate::serial::{self, cmatrix};

/// Spectral radius must stay below `1 - STABILITY_MARGIN`.
pub const STABILITY_MARGIN: f64 = 1e-9;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "SystemFile")]
pub struct LtiSystem {
    #[serde(rename = "A", with = "cmatrix")]
    a: CMatrix,
    #[serde(rename = "B", with = "cmatrix")]
    b: CMatrix,
    #[serde(rename = "C", with = "cmatrix")]
    c: CMatrix,
    #[serde(rename = "Omega", with = "cmatrix")]
    omega: CMatrix,
}

#[derive(Deserialize)]
struct SystemFile {
    #[serde(rename = "A", with = "cmatrix")]
    a: CMatrix,
    #[serde(rename = "B", with = "cmatrix")]
    b: CMatrix,
    #[serde(rename = "C", with = "cmatrix")]
    c: CMatrix,
    #[serde(rename = "Omega", with = "cmatrix")]
    omega: CMatrix,
}

impl TryFrom<SystemFile> for LtiSystem {
    type Error = Error;

    fn try_from(f: SystemFile) -> Result<Self> {
        LtiSystem::new(f.a, f.b, f.c, f.omega)
    }
}

impl LtiSystem {
    /// Validates shapes and that `omega` is Hermitian PSD. Stability and the
    /// rank conditions are reported by [`LtiSystem::check_assumptions`].
    pub fn new(a: CMatrix, b: CMatrix, c: CMatrix, omega: CMatrix) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension(format!("A must be square, got {}x{}", n, a.ncols())));
        }
        if b.nrows() != n {
            return Err(Error::Dimension(format!("B has {} rows, A has {}", b.nrows(), n)));
        }
        if c.ncols() != n {
            return Err(Error::Dimension(format!("C has {} columns, A has {}", c.ncols(), n)));
        }
        let q = c.nrows();
        if omega.nrows() != q || omega.ncols() != q {
            return Err(Error::Dimension(format!(
                "Omega must be {q}x{q}, got {}x{}",
                omega.nrows(),
                omega.ncols()
            )));
        }
        if hermitian_defect(&omega) > 1e-12 {
            return Err(Error::Precondition("Omega is not Hermitian".into()));
        }
        if let Some(&lowest) = hermitian_eigenvalues(&omega).first() {
            let scale = omega.norm().max(f64::MIN_POSITIVE);
            if lowest < -1e-12 * scale {
                return Err(Error::Precondition(format!(
                    "Omega is not positive semidefinite (eigenvalue {lowest:.3e})"
                )));
            }
        }
        Ok(Self { a, b, c, omega })
    }

    /// Plant without measurement noise.
    pub fn noiseless(a: CMatrix, b: CMatrix, c: CMatrix) -> Result<Self> {
        let q = c.nrows();
        Self::new(a, b, c, CMatrix::zeros(q, q))
    }

    pub fn with_omega(&self, omega: CMatrix) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), self.c.clone(), omega)
    }

    pub fn a(&self) -> &CMatrix {
        &self.a
    }

    pub fn b(&self) -> &CMatrix {
        &self.b
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

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    /// All matrices have zero imaginary parts.
    pub fn is_real(&self) -> bool {
        is_real(&self.a) && is_real(&self.b) && is_real(&self.c) && is_real(&self.omega)
    }

    pub fn load(path: &Path) -> Result<Self> {
        serial::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        serial::write_json(path, self)
    }

    /// `h_i = C A^{i-1} B` for `i = 1..=count`, propagated as `A X` on the
    /// columns of `B`.
    pub fn markov_parameters(&self, count: usize) -> Result<MarkovSequence> {
        if count == 0 {
            return Err(Error::Precondition("need at least one Markov parameter".into()));
        }
        let mut cols = self.b.clone();
        let mut next = cols.clone();
        let mut h = Vec::with_capacity(count);
        for i in 0..count {
            h.push(&self.c * &cols);
            if i + 1 < count {
                next.gemm(ONE, &self.a, &cols, ZERO);
                std::mem::swap(&mut cols, &mut next);
            }
        }
        MarkovSequence::new(h)
    }

    /// Simulates from `x0` and returns `y_0 .. y_{T-1}` for an input of length
    /// `T`. Measurement noise is real Gaussian for real systems and circular
    /// complex Gaussian otherwise; both have covariance `Omega`.
    pub fn simulate(&self, input: &[CVector], noise_seed: u64, x0: &CVector) -> Result<Vec<CVector>> {
        let mut outputs = Vec::with_capacity(input.len());
        self.run(input, noise_seed, x0, |_, y| outputs.push(y.clone()))?;
        Ok(outputs)
    }

    /// Like [`LtiSystem::simulate`] but also keeps the states `x_0 .. x_{T-1}`.
    pub fn simulate_with_states(
        &self,
        input: &[CVector],
        noise_seed: u64,
        x0: &CVector,
    ) -> Result<Trajectory> {
        let mut states = Vec::with_capacity(input.len());
        let mut outputs = Vec::with_capacity(input.len());
        self.run(input, noise_seed, x0, |x, y| {
            states.push(x.clone());
            outputs.push(y.clone());
        })?;
        Ok(Trajectory { states, outputs })
    }

    fn run<F: FnMut(&CVector, &CVector)>(
        &self,
        input: &[CVector],
        noise_seed: u64,
        x0: &CVector,
        mut sink: F,
    ) -> Result<()> {
        let (n, p, q) = (self.state_dim(), self.input_dim(), self.output_dim());
        if input.is_empty() {
            return Err(Error::InsufficientData("simulation input is empty".into()));
        }
        if x0.len() != n {
            return Err(Error::Dimension(format!("x0 has length {}, expected {n}", x0.len())));
        }
        if let Some(bad) = input.iter().find(|u| u.len() != p) {
            return Err(Error::Dimension(format!(
                "input vector of length {}, expected {p}",
                bad.len()
            )));
        }
        let noisy = self.omega.iter().any(|z| *z != ZERO);
        let noise = GaussianSource::new(&self.omega)?.with_complex(!self.is_real());
        let mut rng = SeedSplitter::new(noise_seed).rng(0);

        let mut x = x0.clone();
        let mut next = CVector::zeros(n);
        let mut y = CVector::zeros(q);
        for k in 0..input.len() {
            if k > 0 {
                next.gemv(ONE, &self.a, &x, ZERO);
                next.gemv(ONE, &self.b, &input[k - 1], ONE);
                std::mem::swap(&mut x, &mut next);
            }
            y.gemv(ONE, &self.c, &x, ZERO);
            if noisy {
                y += noise.draw(&mut rng);
            }
            sink(&x, &y);
        }
        Ok(())
    }

    /// Pass/fail report for stability, detectability and the rank conditions.
    pub fn check_assumptions(&self) -> AssumptionReport {
        let (n, p, q) = (self.state_dim(), self.input_dim(), self.output_dim());
        let mut checks = Vec::new();

        let eig = eigenvalues(&self.a);
        let radius = eig
            .as_ref()
            .map(|e| e.iter().map(|z| z.norm()).fold(0.0, f64::max))
            .unwrap_or(f64::NAN);
        checks.push(AssumptionCheck {
            kind: CheckKind::Stability,
            passed: radius < 1.0 - STABILITY_MARGIN,
            detail: format!("spectral radius {radius:.6}"),
        });

        let detectable = match &eig {
            Ok(values) => {
                let mut ok = true;
                for lambda in values.iter().filter(|z| z.norm() >= 1.0 - STABILITY_MARGIN) {
                    let mut pbh = CMatrix::zeros(n + q, n);
                    pbh.view_mut((0, 0), (n, n))
                        .copy_from(&(identity(n) * *lambda - &self.a));
                    pbh.view_mut((n, 0), (q, n)).copy_from(&self.c);
                    if numerical_rank(&pbh) < n {
                        ok = false;
                    }
                }
                ok
            }
            Err(_) => false,
        };
        checks.push(AssumptionCheck {
            kind: CheckKind::Detectability,
            passed: detectable,
            detail: "unobservable modes strictly inside the unit circle".into(),
        });

        let rank_b = numerical_rank(&self.b);
        checks.push(AssumptionCheck {
            kind: CheckKind::RankB,
            passed: rank_b == p,
            detail: format!("rank(B) = {rank_b}, p = {p}"),
        });
        let rank_c = numerical_rank(&self.c);
        checks.push(AssumptionCheck {
            kind: CheckKind::RankC,
            passed: rank_c == q,
            detail: format!("rank(C) = {rank_c}, q = {q}"),
        });
        checks.push(AssumptionCheck {
            kind: CheckKind::InputsNotExceedOutputs,
            passed: p <= q,
            detail: format!("p = {p}, q = {q}"),
        });
        let rank_cab = numerical_rank(&(&self.c * &self.a * &self.b));
        checks.push(AssumptionCheck {
            kind: CheckKind::RankCab,
            passed: rank_cab == p,
            detail: format!("rank(CAB) = {rank_cab}, p = {p}"),
        });

        AssumptionReport {
            spectral_radius: radius,
            checks,
        }
    }

    /// Errors with the list of failed checks unless every assumption holds.
    pub fn require_assumptions(&self) -> Result<AssumptionReport> {
        let report = self.check_assumptions();
        if report.all_passed() {
            Ok(report)
        } else {
            Err(Error::Precondition(format!(
                "plant violates standing assumptions: {}",
                report.failures().join("; ")
            )))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<CVector>,
    pub outputs: Vec<CVector>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CheckKind {
    Stability,
    Detectability,
    RankB,
    RankC,
    InputsNotExceedOutputs,
    RankCab,
}

impl CheckKind {
    /// Which standing assumption the check belongs to.
    pub fn assumption(self) -> &'static str {
        match self {
            CheckKind::Stability | CheckKind::Detectability => "A1",
            _ => "A2",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AssumptionCheck {
    pub kind: CheckKind,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct AssumptionReport {
    pub spectral_radius: f64,
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn passed(&self, kind: CheckKind) -> bool {
        self.checks.iter().any(|c| c.kind == kind && c.passed)
    }

    /// True when every check belonging to the named assumption passed.
    pub fn assumption_holds(&self, name: &str) -> bool {
        self.checks
            .iter()
            .filter(|c| c.kind.assumption() == name)
            .all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{} {:?} ({})", c.kind.assumption(), c.kind, c.detail))
            .collect()
    }
}

/// Impulse-response matrices `h_1 .. h_M` (index 0 holds `h_1`).
#[derive(Clone, Debug)]
pub struct MarkovSequence {
    h: Vec<CMatrix>,
    tail_tolerance: f64,
}

impl MarkovSequence {
    pub fn new(h: Vec<CMatrix>) -> Result<Self> {
        let Some(first) = h.first() else {
            return Err(Error::Precondition("empty Markov sequence".into()));
        };
        let shape = first.shape();
        if h.iter().any(|m| m.shape() != shape) {
            return Err(Error::Dimension("Markov parameters differ in shape".into()));
        }
        Ok(Self {
            h,
            tail_tolerance: f64::INFINITY,
        })
    }

    /// Declares that `||h_M||_F <= tol`; fails if the last parameter is larger.
    pub fn with_tail_tolerance(mut self, tol: f64) -> Result<Self> {
        let tail = self.tail_norm();
        if tail > tol {
            return Err(Error::Precondition(format!(
                "||h_M|| = {tail:.3e} exceeds tail tolerance {tol:.3e}; increase M"
            )));
        }
        self.tail_tolerance = tol;
        Ok(self)
    }

    pub fn tail_tolerance(&self) -> f64 {
        self.tail_tolerance
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    /// `h_i`, 1-based as in `C A^{i-1} B`.
    pub fn get(&self, i: usize) -> &CMatrix {
        &self.h[i - 1]
    }

    pub fn as_slice(&self) -> &[CMatrix] {
        &self.h
    }

    pub fn output_dim(&self) -> usize {
        self.h[0].nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.h[0].ncols()
    }

    pub fn tail_norm(&self) -> f64 {
        self.h.last().map_or(0.0, |m| m.norm())
    }

    pub fn truncated(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.h.len() {
            return Err(Error::Precondition(format!(
                "cannot truncate {} Markov parameters to {count}",
                self.h.len()
            )));
        }
        MarkovSequence::new(self.h[..count].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{real_matrix, real_vector, scaled_identity};
    use approx::assert_relative_eq;

    fn scalar(a: f64, b: f64, c: f64) -> LtiSystem {
        LtiSystem::noiseless(
            real_matrix(1, 1, &[a]),
            real_matrix(1, 1, &[b]),
            real_matrix(1, 1, &[c]),
        )
        .unwrap()
    }

    #[test]
    fn scalar_markov_parameters_are_geometric() {
        let h = scalar(0.5, 2.0, 3.0).markov_parameters(6).unwrap();
        let expected = [6.0, 3.0, 1.5, 0.75, 0.375, 0.1875];
        for (i, e) in expected.iter().enumerate() {
            assert_relative_eq!(h.get(i + 1)[(0, 0)].re, *e, epsilon = 1e-15);
        }
    }

    #[test]
    fn nilpotent_plant_has_single_markov_parameter() {
        let sys = LtiSystem::noiseless(
            CMatrix::zeros(2, 2),
            real_matrix(2, 1, &[1.0, 2.0]),
            real_matrix(1, 2, &[3.0, -1.0]),
        )
        .unwrap();
        let h = sys.markov_parameters(5).unwrap();
        assert_relative_eq!(h.get(1)[(0, 0)].re, 1.0);
        for i in 2..=5 {
            assert_eq!(h.get(i).norm(), 0.0);
        }
    }

    #[test]
    fn zero_input_zero_noise_gives_zero_output() {
        let sys = scalar(0.9, 1.0, 1.0);
        let input = vec![real_vector(&[0.0]); 20];
        let y = sys.simulate(&input, 1, &real_vector(&[0.0])).unwrap();
        assert!(y.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn impulse_response_reproduces_markov_parameters() {
        let a = real_matrix(2, 2, &[0.5, 0.1, -0.2, 0.3]);
        let b = real_matrix(2, 2, &[1.0, 0.0, 0.5, 1.0]);
        let c = real_matrix(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let sys = LtiSystem::noiseless(a, b, c).unwrap();
        let h = sys.markov_parameters(10).unwrap();
        for j in 0..2 {
            let mut input = vec![real_vector(&[0.0, 0.0]); 11];
            input[0][j] = ONE;
            let y = sys.simulate(&input, 0, &CVector::zeros(2)).unwrap();
            for k in 1..=10 {
                assert!((&y[k] - h.get(k).column(j)).norm() <= 1e-12 * h.get(1).norm());
            }
        }
    }

    #[test]
    fn simulation_is_seed_deterministic() {
        let sys = scalar(0.5, 1.0, 1.0).with_omega(real_matrix(1, 1, &[0.3])).unwrap();
        let input = vec![real_vector(&[1.0]); 50];
        let y1 = sys.simulate(&input, 9, &real_vector(&[0.0])).unwrap();
        let y2 = sys.simulate(&input, 9, &real_vector(&[0.0])).unwrap();
        let y3 = sys.simulate(&input, 10, &real_vector(&[0.0])).unwrap();
        assert_eq!(y1, y2);
        assert_ne!(y1, y3);
    }

    #[test]
    fn assumptions_pass_for_half_identity() {
        let sys = LtiSystem::noiseless(scaled_identity(2, 0.5), identity(2), identity(2)).unwrap();
        let report = sys.check_assumptions();
        assert!(report.all_passed(), "{:?}", report.failures());
    }

    #[test]
    fn unstable_eigenvalue_fails_stability() {
        let sys = LtiSystem::noiseless(
            real_matrix(2, 2, &[1.1, 0.0, 0.0, 0.2]),
            identity(2),
            identity(2),
        )
        .unwrap();
        let report = sys.check_assumptions();
        assert!(!report.passed(CheckKind::Stability));
        assert!(!report.assumption_holds("A1"));
        assert!(report.assumption_holds("A2"));
    }

    #[test]
    fn rank_deficient_b_fails_rank_condition() {
        let sys = LtiSystem::noiseless(
            scaled_identity(3, 0.5),
            real_matrix(3, 2, &[1.0, 2.0, 1.0, 2.0, 0.0, 0.0]),
            identity(3),
        )
        .unwrap();
        let report = sys.check_assumptions();
        assert!(!report.passed(CheckKind::RankB));
        assert!(!report.assumption_holds("A2"));
        assert!(sys.require_assumptions().is_err());
    }

    #[test]
    fn undetectable_unstable_mode_is_reported() {
        // second state unstable and invisible in C
        let sys = LtiSystem::noiseless(
            real_matrix(2, 2, &[0.5, 0.0, 0.0, 1.2]),
            real_matrix(2, 1, &[1.0, 0.0]),
            real_matrix(1, 2, &[1.0, 0.0]),
        )
        .unwrap();
        assert!(!sys.check_assumptions().passed(CheckKind::Detectability));
    }

    #[test]
    fn rejects_bad_shapes_and_indefinite_noise() {
        assert!(LtiSystem::noiseless(identity(2), identity(3), identity(2)).is_err());
        let sys = LtiSystem::noiseless(identity(2), identity(2), identity(2)).unwrap();
        assert!(sys.with_omega(real_matrix(2, 2, &[1.0, 0.0, 0.0, -1.0])).is_err());
        assert!(sys.with_omega(real_matrix(2, 2, &[1.0, 0.5, 0.0, 1.0])).is_err());
    }

    #[test]
    fn tail_tolerance_is_enforced() {
        let h = scalar(0.5, 1.0, 1.0).markov_parameters(10).unwrap();
        assert!(h.clone().with_tail_tolerance(1e-2).is_ok());
        assert!(h.with_tail_tolerance(1e-4).is_err());
    }

    #[test]
    fn json_round_trip_keeps_matrices() {
        let sys = LtiSystem::new(
            real_matrix(1, 1, &[0.5]),
            real_matrix(1, 1, &[2.0]),
            real_matrix(1, 1, &[3.0]),
            real_matrix(1, 1, &[0.1]),
        )
        .unwrap();
        let text = serde_json::to_string(&sys).unwrap();
        assert!(text.contains("\"Omega\""));
        let back: LtiSystem = serde_json::from_str(&text).unwrap();
        assert_eq!(back.a(), sys.a());
        assert_eq!(back.omega(), sys.omega());
    }
}
