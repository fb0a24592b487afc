//! Matrix-valued autocorrelation sequences `R(m) = E[y_k y_{k+m}*]`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{hermitian_part, CMatrix, CVector};

/// Lags whose true norm is below this are reported as absolute errors and
/// left out of relative aggregates.
pub const NEGLIGIBLE_NORM: f64 = 1e-12;

/// `R(m)` for `m` in `-N..=N`, stored at index `m + N`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationSequence {
    dim: usize,
    max_lag: usize,
    lags: Vec<CMatrix>,
}

impl CorrelationSequence {
    /// Builds the sequence from `R(0) .. R(N)`; negative lags are filled with
    /// `R(-m) = R(m)*` and `R(0)` is made Hermitian.
    pub fn from_nonnegative(mut nonneg: Vec<CMatrix>) -> Result<Self> {
        let Some(first) = nonneg.first_mut() else {
            return Err(Error::Precondition("correlation sequence needs lag 0".into()));
        };
        let dim = first.nrows();
        *first = hermitian_part(first);
        if nonneg.iter().any(|m| m.nrows() != dim || m.ncols() != dim) {
            return Err(Error::Dimension("correlation lags must be square and equal-sized".into()));
        }
        let max_lag = nonneg.len() - 1;
        let mut lags = Vec::with_capacity(2 * max_lag + 1);
        lags.extend(nonneg[1..].iter().rev().map(|m| m.adjoint()));
        lags.extend(nonneg);
        Ok(Self { dim, max_lag, lags })
    }

    /// Enforces `R(-m) = R(m)*` on a raw two-sided sequence by averaging each
    /// pair. Returns the sequence and the largest relative asymmetry seen
    /// before averaging.
    pub fn symmetrized(raw: Vec<CMatrix>) -> Result<(Self, f64)> {
        if raw.len() % 2 == 0 {
            return Err(Error::Precondition("two-sided sequence needs odd length".into()));
        }
        let max_lag = raw.len() / 2;
        let dim = raw[max_lag].nrows();
        if raw.iter().any(|m| m.nrows() != dim || m.ncols() != dim) {
            return Err(Error::Dimension("correlation lags must be square and equal-sized".into()));
        }
        let mut asymmetry = 0.0f64;
        let nonneg: Vec<CMatrix> = (0..=max_lag)
            .map(|m| {
                let pos = &raw[max_lag + m];
                let neg_adj = raw[max_lag - m].adjoint();
                let scale = pos.norm().max(neg_adj.norm());
                if scale > 0.0 {
                    asymmetry = asymmetry.max((pos - &neg_adj).norm() / scale);
                }
                (pos + neg_adj).scale(0.5)
            })
            .collect();
        Ok((Self::from_nonnegative(nonneg)?, asymmetry))
    }

    pub fn zeros(dim: usize, max_lag: usize) -> Self {
        Self {
            dim,
            max_lag,
            lags: vec![CMatrix::zeros(dim, dim); 2 * max_lag + 1],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_lag(&self) -> usize {
        self.max_lag
    }

    /// `R(m)`; panics outside `-N..=N`.
    pub fn lag(&self, m: i64) -> &CMatrix {
        self.try_lag(m)
            .unwrap_or_else(|| panic!("lag {m} outside [-{0}, {0}]", self.max_lag))
    }

    pub fn try_lag(&self, m: i64) -> Option<&CMatrix> {
        let idx = m + self.max_lag as i64;
        if idx < 0 {
            return None;
        }
        self.lags.get(idx as usize)
    }

    /// `(m, R(m))` in increasing lag order.
    pub fn iter(&self) -> impl Iterator<Item = (i64, &CMatrix)> + '_ {
        let n = self.max_lag as i64;
        self.lags.iter().enumerate().map(move |(i, r)| (i as i64 - n, r))
    }

    pub fn truncated(&self, max_lag: usize) -> Result<Self> {
        if max_lag > self.max_lag {
            return Err(Error::InsufficientData(format!(
                "sequence has {} lags, {max_lag} requested",
                self.max_lag
            )));
        }
        let start = self.max_lag - max_lag;
        Ok(Self {
            dim: self.dim,
            max_lag,
            lags: self.lags[start..start + 2 * max_lag + 1].to_vec(),
        })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            max_lag: self.max_lag,
            lags: self.lags.iter().map(|m| m.scale(factor)).collect(),
        }
    }

    /// `R_hat(m) = R(m) - Omega` at `m = 0`, unchanged elsewhere.
    pub fn subtract_noise_floor(&self, omega: &CMatrix) -> Result<Self> {
        if omega.nrows() != self.dim || omega.ncols() != self.dim {
            return Err(Error::Dimension(format!(
                "noise covariance is {}x{}, sequence dim is {}",
                omega.nrows(),
                omega.ncols(),
                self.dim
            )));
        }
        let mut out = self.clone();
        out.lags[self.max_lag] -= omega;
        Ok(out)
    }

    /// Largest Frobenius norm of `R(m) - R(-m)*` over all lags.
    pub fn symmetry_defect(&self) -> f64 {
        (0..=self.max_lag as i64)
            .map(|m| (self.lag(m) - self.lag(-m).adjoint()).norm())
            .fold(0.0, f64::max)
    }

    /// Writes `lag,row,col,re,im` rows, lags ascending.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "lag,row,col,re,im")?;
        for (m, r) in self.iter() {
            for i in 0..self.dim {
                for j in 0..self.dim {
                    let z = r[(i, j)];
                    writeln!(w, "{m},{i},{j},{},{}", z.re, z.im)?;
                }
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Reads the CSV layout of [`CorrelationSequence::write_csv`]. The lag
    /// range must be symmetric; entries not present stay zero.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rows: Vec<(i64, usize, usize, Complex64)> = Vec::new();
        for (lineno, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(Error::Config(format!("line {}: expected 5 fields", lineno + 1)));
            }
            let bad = |e: &dyn std::fmt::Display| Error::Config(format!("line {}: {e}", lineno + 1));
            let m: i64 = fields[0].parse().map_err(|e| bad(&e))?;
            let i: usize = fields[1].parse().map_err(|e| bad(&e))?;
            let j: usize = fields[2].parse().map_err(|e| bad(&e))?;
            let re: f64 = fields[3].parse().map_err(|e| bad(&e))?;
            let im: f64 = fields[4].parse().map_err(|e| bad(&e))?;
            rows.push((m, i, j, Complex64::new(re, im)));
        }
        let max_lag = rows.iter().map(|r| r.0.unsigned_abs()).max().unwrap_or(0) as usize;
        let dim = rows.iter().map(|r| r.1.max(r.2) + 1).max().unwrap_or(0);
        let mut seq = Self::zeros(dim, max_lag);
        for (m, i, j, z) in rows {
            seq.lags[(m + max_lag as i64) as usize][(i, j)] = z;
        }
        Ok(seq)
    }

    pub(crate) fn from_two_sided_unchecked(lags: Vec<CMatrix>) -> Self {
        let max_lag = lags.len() / 2;
        let dim = lags[max_lag].nrows();
        Self { dim, max_lag, lags }
    }
}

/// Biased estimator `R(m) = (1/T) sum_{k} y_k y_{k+m}*` for `m = 0..=N`,
/// with negative lags from conjugate symmetry.
pub fn sample_autocorrelation(data: &[CVector], max_lag: usize) -> Result<CorrelationSequence> {
    let t = data.len();
    if t <= max_lag {
        return Err(Error::InsufficientData(format!(
            "{t} samples cannot estimate lags up to {max_lag}"
        )));
    }
    let d = data[0].len();
    if data.iter().any(|y| y.len() != d) {
        return Err(Error::Dimension("samples differ in length".into()));
    }
    let flat: Vec<Complex64> = data.iter().flat_map(|y| y.iter().copied()).collect();
    let conj: Vec<Complex64> = flat.iter().map(|z| z.conj()).collect();
    let inv_t = 1.0 / t as f64;
    let nonneg: Vec<CMatrix> = (0..=max_lag)
        .into_par_iter()
        .map(|m| {
            let mut acc = vec![Complex64::new(0.0, 0.0); d * d];
            for k in 0..t - m {
                let a = &flat[k * d..(k + 1) * d];
                let b = &conj[(k + m) * d..(k + m + 1) * d];
                for (i, ai) in a.iter().enumerate() {
                    let row = &mut acc[i * d..(i + 1) * d];
                    for (slot, bj) in row.iter_mut().zip(b) {
                        *slot += ai * bj;
                    }
                }
            }
            CMatrix::from_row_slice(d, d, &acc).scale(inv_t)
        })
        .collect();
    CorrelationSequence::from_nonnegative(nonneg)
}

#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct LagError {
    pub lag: i64,
    pub value: f64,
    /// Set when the true lag is negligible and `value` is an absolute error.
    pub absolute: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RelativeErrors {
    pub entries: Vec<LagError>,
}

impl RelativeErrors {
    /// Largest relative (non-flagged) error among lags accepted by `keep`.
    pub fn max_relative<F: Fn(i64) -> bool>(&self, keep: F) -> f64 {
        self.entries
            .iter()
            .filter(|e| !e.absolute && keep(e.lag))
            .map(|e| e.value)
            .fold(0.0, f64::max)
    }

    pub fn get(&self, lag: i64) -> Option<&LagError> {
        self.entries.iter().find(|e| e.lag == lag)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "lag,error,absolute")?;
        for e in &self.entries {
            writeln!(w, "{},{},{}", e.lag, e.value, e.absolute)?;
        }
        Ok(())
    }
}

/// Per-lag `||R_true(m) - R_est(m)||_F / ||R_true(m)||_F` over the common lag
/// range.
pub fn relative_error(
    truth: &CorrelationSequence,
    est: &CorrelationSequence,
) -> Result<RelativeErrors> {
    if truth.dim != est.dim {
        return Err(Error::Dimension(format!(
            "sequence dims differ: {} vs {}",
            truth.dim, est.dim
        )));
    }
    let n = truth.max_lag.min(est.max_lag) as i64;
    let entries = (-n..=n)
        .map(|m| {
            let t = truth.lag(m);
            let diff = (est.lag(m) - t).norm();
            let norm = t.norm();
            if norm < NEGLIGIBLE_NORM {
                LagError {
                    lag: m,
                    value: diff,
                    absolute: true,
                }
            } else {
                LagError {
                    lag: m,
                    value: diff / norm,
                    absolute: false,
                }
            }
        })
        .collect();
    Ok(RelativeErrors { entries })
}

/// Lags with `||R(m)|| >= fraction * ||R(0)||` and `|m| <= within`.
pub fn significant_lags(seq: &CorrelationSequence, fraction: f64, within: usize) -> Vec<i64> {
    let floor = fraction * seq.lag(0).norm();
    let n = within.min(seq.max_lag) as i64;
    (-n..=n).filter(|&m| seq.lag(m).norm() >= floor).collect()
}
