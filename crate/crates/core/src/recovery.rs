//! Recovery of input autocorrelations from output autocorrelations.
//!
//! With Markov parameters `h_1..h_M` of the plant, every output lag satisfies
//!
//! ```text
//! vec(R_hat_yy(m)) = sum_{i,j=1..M} (conj(h_j) (x) h_i) vec(R_uu(m + i - j)),   |m + i - j| <= N_i
//! ```
//!
//! Stacking `m = -N_o..N_o` and `l = -N_i..N_i` gives an overdetermined system
//! `C_yu vec(R_uu) = vec(R_hat_yy)` that is solved in the least-squares sense.
//! Block `(m, l)` of `C_yu` only depends on `d = l - m`, so the matrix is
//! block Toeplitz and is assembled from the `2M - 1` lag blocks
//! `G(d) = sum_{i - j = d} conj(h_j) (x) h_i`.

use num_complex::Complex64;
use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::autocorr::CorrelationSequence;
use crate::error::{Error, Result};
use crate::linalg::{rank_tolerance, singular_values, CMatrix, CVector, ONE, ZERO};
use crate::lti::MarkovSequence;

/// Above this many entries `C_yu` is applied block by block instead of
/// being materialized.
pub const DEFAULT_MEMORY_BUDGET: usize = 200_000_000;

pub const DEFAULT_CG_TOLERANCE: f64 = 1e-10;

/// Column stacking.
pub fn vec(x: &CMatrix) -> CVector {
    CVector::from_column_slice(x.as_slice())
}

/// Inverse of [`vec`].
pub fn unvec(v: &[Complex64], rows: usize, cols: usize) -> CMatrix {
    CMatrix::from_column_slice(rows, cols, v)
}

/// `A (x) B`: block `(i, j)` is `a_ij B`.
pub fn kronecker(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = CMatrix::zeros(ar * br, ac * bc);
    for j in 0..ac {
        for i in 0..ar {
            let aij = a[(i, j)];
            if aij == ZERO {
                continue;
            }
            out.view_mut((i * br, j * bc), (br, bc)).zip_apply(b, |o, bv| *o = aij * bv);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    /// Householder QR on `C_yu`.
    #[default]
    Direct,
    /// Conjugate gradients on the normal equations.
    #[serde(alias = "cg")]
    ConjugateGradient,
}

impl std::str::FromStr for SolveMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" | "qr" => Ok(SolveMethod::Direct),
            "cg" | "conjugate_gradient" => Ok(SolveMethod::ConjugateGradient),
            other => Err(Error::Config(format!("unknown solver method '{other}'"))),
        }
    }
}

/// The coefficient matrix `C_yu`, dense or implicit.
#[derive(Clone, Debug)]
pub struct CoefficientMatrix {
    p: usize,
    q: usize,
    markov_len: usize,
    input_lags: usize,
    output_lags: usize,
    /// `G(d)` for `d = -span..=span`.
    lag_blocks: Vec<CMatrix>,
    span: usize,
    dense: Option<DenseFactor>,
    singular_values: Vec<f64>,
    rank: usize,
}

#[derive(Clone, Debug)]
struct DenseFactor {
    matrix: CMatrix,
    q: CMatrix,
    r: CMatrix,
}

/// Assembles `C_yu` for output lags `-N_o..N_o` and input lags `-N_i..N_i`.
pub fn build_coefficient_matrix(
    h: &MarkovSequence,
    input_lags: usize,
    output_lags: usize,
) -> Result<CoefficientMatrix> {
    CoefficientMatrix::with_budget(h, input_lags, output_lags, DEFAULT_MEMORY_BUDGET)
}

impl CoefficientMatrix {
    pub fn with_budget(
        h: &MarkovSequence,
        input_lags: usize,
        output_lags: usize,
        memory_budget: usize,
    ) -> Result<Self> {
        if input_lags > output_lags {
            return Err(Error::Precondition(format!(
                "N_i = {input_lags} exceeds N_o = {output_lags}; input lags beyond the output \
                 support cannot be recovered"
            )));
        }
        let (q, p) = (h.output_dim(), h.input_dim());
        let m_len = h.len();
        let span = (m_len - 1).min(input_lags + output_lags);
        let hs = h.as_slice();
        let conj: Vec<CMatrix> = hs.iter().map(|m| m.map(|z| z.conj())).collect();

        let mut lag_blocks = Vec::with_capacity(2 * span + 1);
        for d in -(span as i64)..=span as i64 {
            let mut g = CMatrix::zeros(q * q, p * p);
            // i - j = d with 1 <= i, j <= M
            let j_lo = 1.max(1 - d) as usize;
            let j_hi = (m_len as i64).min(m_len as i64 - d) as usize;
            for j in j_lo..=j_hi {
                let i = (j as i64 + d) as usize;
                accumulate_kron(&mut g, &conj[j - 1], &hs[i - 1]);
            }
            lag_blocks.push(g);
        }

        let mut cm = Self {
            p,
            q,
            markov_len: m_len,
            input_lags,
            output_lags,
            lag_blocks,
            span,
            dense: None,
            singular_values: Vec::new(),
            rank: 0,
        };

        let (rows, cols) = cm.shape();
        if rows.saturating_mul(cols) <= memory_budget {
            let matrix = cm.assemble();
            let qr = matrix.clone().qr();
            let (qf, r) = (qr.q(), qr.r());
            cm.singular_values = singular_values(&r);
            cm.dense = Some(DenseFactor { matrix, q: qf, r });
        } else {
            let gram = cm.gram();
            let mut ev: Vec<f64> = SymmetricEigen::new(gram)
                .eigenvalues
                .iter()
                .map(|&x| x.max(0.0).sqrt())
                .collect();
            ev.sort_by(|a, b| b.total_cmp(a));
            cm.singular_values = ev;
        }
        let smax = cm.singular_values.first().copied().unwrap_or(0.0);
        let tol = rank_tolerance(rows, cols, smax);
        cm.rank = if smax > 0.0 {
            cm.singular_values.iter().filter(|&&s| s > tol).count()
        } else {
            0
        };
        Ok(cm)
    }

    /// `(q^2 (2 N_o + 1), p^2 (2 N_i + 1))`.
    pub fn shape(&self) -> (usize, usize) {
        (
            self.q * self.q * (2 * self.output_lags + 1),
            self.p * self.p * (2 * self.input_lags + 1),
        )
    }

    pub fn unknowns(&self) -> usize {
        self.shape().1
    }

    pub fn input_lags(&self) -> usize {
        self.input_lags
    }

    pub fn output_lags(&self) -> usize {
        self.output_lags
    }

    pub fn markov_len(&self) -> usize {
        self.markov_len
    }

    pub fn input_dim(&self) -> usize {
        self.p
    }

    pub fn output_dim(&self) -> usize {
        self.q
    }

    pub fn is_materialized(&self) -> bool {
        self.dense.is_some()
    }

    /// Singular values of `C_yu`, non-increasing. Exact (from the QR factor)
    /// when materialized, from the Gram matrix otherwise.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn condition_estimate(&self) -> f64 {
        match (self.singular_values.first(), self.singular_values.last()) {
            (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
            _ => f64::INFINITY,
        }
    }

    pub fn has_full_column_rank(&self) -> bool {
        self.rank == self.unknowns()
    }

    /// Block `(m, l)` for output lag `m` and input lag `l`.
    pub fn block(&self, m: i64, l: i64) -> CMatrix {
        let d = l - m;
        if d.unsigned_abs() as usize > self.span {
            CMatrix::zeros(self.q * self.q, self.p * self.p)
        } else {
            self.lag_blocks[(d + self.span as i64) as usize].clone()
        }
    }

    fn lag_block(&self, d: i64) -> Option<&CMatrix> {
        if d.unsigned_abs() as usize > self.span {
            None
        } else {
            Some(&self.lag_blocks[(d + self.span as i64) as usize])
        }
    }

    fn assemble(&self) -> CMatrix {
        let (rows, cols) = self.shape();
        let (bq, bp) = (self.q * self.q, self.p * self.p);
        let (no, ni) = (self.output_lags as i64, self.input_lags as i64);
        let mut out = CMatrix::zeros(rows, cols);
        for (mi, m) in (-no..=no).enumerate() {
            for (li, l) in (-ni..=ni).enumerate() {
                if let Some(g) = self.lag_block(l - m) {
                    out.view_mut((mi * bq, li * bp), (bq, bp)).copy_from(g);
                }
            }
        }
        out
    }

    /// Dense copy of `C_yu`.
    pub fn to_dense(&self) -> CMatrix {
        match &self.dense {
            Some(d) => d.matrix.clone(),
            None => self.assemble(),
        }
    }

    fn row_block(&self, m: i64) -> CMatrix {
        let (bq, bp) = (self.q * self.q, self.p * self.p);
        let ni = self.input_lags as i64;
        let mut out = CMatrix::zeros(bq, self.unknowns());
        for (li, l) in (-ni..=ni).enumerate() {
            if let Some(g) = self.lag_block(l - m) {
                out.view_mut((0, li * bp), (bq, bp)).copy_from(g);
            }
        }
        out
    }

    fn gram(&self) -> CMatrix {
        let n = self.unknowns();
        let mut gram = CMatrix::zeros(n, n);
        let no = self.output_lags as i64;
        for m in -no..=no {
            let rb = self.row_block(m);
            gram.gemm_ad(ONE, &rb, &rb, ONE);
        }
        gram
    }

    /// `C_yu v`.
    pub fn apply(&self, v: &CVector) -> CVector {
        if let Some(d) = &self.dense {
            return &d.matrix * v;
        }
        let (bq, bp) = (self.q * self.q, self.p * self.p);
        let (no, ni) = (self.output_lags as i64, self.input_lags as i64);
        let mut out = CVector::zeros(self.shape().0);
        for (mi, m) in (-no..=no).enumerate() {
            let mut seg = out.rows_mut(mi * bq, bq);
            for (li, l) in (-ni..=ni).enumerate() {
                if let Some(g) = self.lag_block(l - m) {
                    seg.gemv(ONE, g, &v.rows(li * bp, bp), ONE);
                }
            }
        }
        out
    }

    /// `C_yu* w`.
    pub fn apply_adjoint(&self, w: &CVector) -> CVector {
        if let Some(d) = &self.dense {
            return d.matrix.ad_mul(w);
        }
        let (bq, bp) = (self.q * self.q, self.p * self.p);
        let (no, ni) = (self.output_lags as i64, self.input_lags as i64);
        let mut out = CVector::zeros(self.unknowns());
        for (li, l) in (-ni..=ni).enumerate() {
            let mut seg = out.rows_mut(li * bp, bp);
            for (mi, m) in (-no..=no).enumerate() {
                if let Some(g) = self.lag_block(l - m) {
                    seg.gemv_ad(ONE, g, &w.rows(mi * bq, bq), ONE);
                }
            }
        }
        out
    }

    fn stack_input(&self, ruu: &CorrelationSequence) -> Result<CVector> {
        if ruu.dim() != self.p {
            return Err(Error::Dimension(format!(
                "input sequence dim {} but plant has p = {}",
                ruu.dim(),
                self.p
            )));
        }
        let ni = self.input_lags as i64;
        let bp = self.p * self.p;
        let mut v = CVector::zeros(self.unknowns());
        for (li, l) in (-ni..=ni).enumerate() {
            if let Some(r) = ruu.try_lag(l) {
                v.rows_mut(li * bp, bp).copy_from(&vec(r));
            }
        }
        Ok(v)
    }

    fn stack_output(&self, ryy: &CorrelationSequence) -> Result<CVector> {
        if ryy.dim() != self.q {
            return Err(Error::Dimension(format!(
                "output sequence dim {} but plant has q = {}",
                ryy.dim(),
                self.q
            )));
        }
        if ryy.max_lag() < self.output_lags {
            return Err(Error::InsufficientData(format!(
                "output autocorrelation has lags up to {}, N_o = {}",
                ryy.max_lag(),
                self.output_lags
            )));
        }
        let no = self.output_lags as i64;
        let bq = self.q * self.q;
        let mut b = CVector::zeros(self.shape().0);
        for (mi, m) in (-no..=no).enumerate() {
            b.rows_mut(mi * bq, bq).copy_from(&vec(ryy.lag(m)));
        }
        Ok(b)
    }

    /// Noise-free forward map: the output autocorrelation (lags `-N_o..N_o`)
    /// that an input sequence supported on `|l| <= N_i` produces.
    pub fn forward(&self, ruu: &CorrelationSequence) -> Result<CorrelationSequence> {
        let y = self.apply(&self.stack_input(ruu)?);
        let bq = self.q * self.q;
        let lags = (0..2 * self.output_lags + 1)
            .map(|mi| unvec(y.rows(mi * bq, bq).as_slice(), self.q, self.q))
            .collect();
        Ok(CorrelationSequence::from_two_sided_unchecked(lags))
    }
}

fn accumulate_kron(out: &mut CMatrix, a: &CMatrix, b: &CMatrix) {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    for j in 0..ac {
        for i in 0..ar {
            let aij = a[(i, j)];
            if aij == ZERO {
                continue;
            }
            let mut blk = out.view_mut((i * br, j * bc), (br, bc));
            blk.zip_apply(b, |o, bv| *o += aij * bv);
        }
    }
}

#[derive(Clone, Debug)]
pub struct CgSolution {
    pub x: CVector,
    pub iterations: usize,
    /// `||r_k||_2` for `k = 0..=iterations`.
    pub residual_history: Vec<f64>,
}

/// Conjugate gradients for Hermitian PSD `cs x = ls`, stopping when
/// `||r|| <= tol ||ls||`.
pub fn conjugate_gradient_solve(
    cs: &CMatrix,
    ls: &CVector,
    x0: &CVector,
    tol: f64,
    max_iter: usize,
) -> Result<CgSolution> {
    if cs.nrows() != cs.ncols() || cs.nrows() != ls.len() || ls.len() != x0.len() {
        return Err(Error::Dimension("conjugate gradient operand sizes".into()));
    }
    conjugate_gradient_with(|v| cs * v, ls, x0, tol, max_iter)
}

/// Matrix-free variant: `apply(v)` must return `C_s v`.
pub fn conjugate_gradient_with<F>(
    apply: F,
    ls: &CVector,
    x0: &CVector,
    tol: f64,
    max_iter: usize,
) -> Result<CgSolution>
where
    F: Fn(&CVector) -> CVector,
{
    let target = tol * ls.norm();
    let mut x = x0.clone();
    let mut r = ls - apply(&x);
    let mut rr = r.norm_squared();
    let mut history = vec![rr.sqrt()];
    if rr.sqrt() <= target {
        return Ok(CgSolution {
            x,
            iterations: 0,
            residual_history: history,
        });
    }
    let mut p = r.clone();
    for k in 0..max_iter {
        let cp = apply(&p);
        let curvature = p.dotc(&cp).re;
        if !(curvature > 0.0) {
            return Err(Error::Convergence {
                iterations: k,
                residual: rr.sqrt(),
            });
        }
        let alpha = rr / curvature;
        x.axpy(Complex64::new(alpha, 0.0), &p, ONE);
        r.axpy(Complex64::new(-alpha, 0.0), &cp, ONE);
        let rr_next = r.norm_squared();
        history.push(rr_next.sqrt());
        if rr_next.sqrt() <= target {
            return Ok(CgSolution {
                x,
                iterations: k + 1,
                residual_history: history,
            });
        }
        let beta = rr_next / rr;
        p = &r + p.scale(beta);
        rr = rr_next;
    }
    Err(Error::Convergence {
        iterations: max_iter,
        residual: rr.sqrt(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SolverDiagnostics {
    pub method: SolveMethod,
    pub rows: usize,
    pub unknowns: usize,
    pub materialized: bool,
    pub rank: usize,
    pub condition_estimate: f64,
    /// `||C_yu x - vec(R_hat_yy)||_2` before symmetrization.
    pub residual_norm: f64,
    pub relative_residual: f64,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    /// Largest relative `||R(l) - R(-l)*||` of the raw solution.
    pub asymmetry_before_symmetrization: f64,
}

#[derive(Clone, Debug)]
pub struct Recovery {
    pub sequence: CorrelationSequence,
    /// Raw least-squares solution `vec(R_uu)` before symmetrization.
    pub solution: CVector,
    pub diagnostics: SolverDiagnostics,
}

#[derive(Clone, Copy, Debug)]
pub struct CgOptions {
    pub tol: f64,
    /// Defaults to ten times the number of unknowns.
    pub max_iter: Option<usize>,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_CG_TOLERANCE,
            max_iter: None,
        }
    }
}

/// Least-squares `R_uu` over lags `-N_i..N_i`, symmetrized afterwards.
pub fn solve_input_autocorr(
    cm: &CoefficientMatrix,
    ryy_hat: &CorrelationSequence,
    method: SolveMethod,
) -> Result<Recovery> {
    solve_input_autocorr_with(cm, ryy_hat, method, CgOptions::default())
}

pub fn solve_input_autocorr_with(
    cm: &CoefficientMatrix,
    ryy_hat: &CorrelationSequence,
    method: SolveMethod,
    cg: CgOptions,
) -> Result<Recovery> {
    let (rows, unknowns) = cm.shape();
    if !cm.has_full_column_rank() {
        return Err(Error::IllPosed {
            rank: cm.rank(),
            unknowns,
            condition: cm.condition_estimate(),
        });
    }
    let b = cm.stack_output(ryy_hat)?;
    let (x, iterations, history) = match method {
        SolveMethod::Direct => {
            let x = match &cm.dense {
                Some(f) => f
                    .r
                    .solve_upper_triangular(&f.q.ad_mul(&b))
                    .ok_or_else(|| Error::Numerical("singular R factor".into()))?,
                None => {
                    // implicit C_yu: Cholesky on the normal equations
                    let chol = cm.gram().cholesky().ok_or(Error::IllPosed {
                        rank: cm.rank(),
                        unknowns,
                        condition: cm.condition_estimate(),
                    })?;
                    chol.solve(&cm.apply_adjoint(&b))
                }
            };
            (x, 0, Vec::new())
        }
        SolveMethod::ConjugateGradient => {
            let ls = cm.apply_adjoint(&b);
            let max_iter = cg.max_iter.unwrap_or(10 * unknowns);
            let sol = conjugate_gradient_with(
                |v| cm.apply_adjoint(&cm.apply(v)),
                &ls,
                &CVector::zeros(unknowns),
                cg.tol,
                max_iter,
            )?;
            (sol.x, sol.iterations, sol.residual_history)
        }
    };
    let residual_norm = (cm.apply(&x) - &b).norm();
    let bnorm = b.norm();

    let bp = cm.p * cm.p;
    let raw: Vec<CMatrix> = (0..2 * cm.input_lags + 1)
        .map(|li| unvec(x.rows(li * bp, bp).as_slice(), cm.p, cm.p))
        .collect();
    let (sequence, asymmetry) = CorrelationSequence::symmetrized(raw)?;
    Ok(Recovery {
        sequence,
        solution: x,
        diagnostics: SolverDiagnostics {
            method,
            rows,
            unknowns,
            materialized: cm.is_materialized(),
            rank: cm.rank(),
            condition_estimate: cm.condition_estimate(),
            residual_norm,
            relative_residual: if bnorm > 0.0 { residual_norm / bnorm } else { 0.0 },
            iterations,
            residual_history: history,
            asymmetry_before_symmetrization: asymmetry,
        },
    })
}
