//! State-space realization from Markov parameters (ERA) and balanced
//! truncation from impulse snapshots (BPOD).

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{rank_tolerance, svd, CMatrix, Svd, ONE, ZERO};
use crate::lti::{LtiSystem, MarkovSequence};
use crate::serial::{self, cmatrix};

/// Relative singular-value cutoff used when the order is chosen automatically.
pub const AUTO_ORDER_THRESHOLD: f64 = 1e-8;

/// Upper bound on the default BPOD snapshot horizon.
pub const MAX_SNAPSHOTS: usize = 2000;

/// Decay (relative to the peak) that ends the default snapshot horizon.
pub const SNAPSHOT_DECAY: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EraOrder {
    /// Keep `sigma_k / sigma_1 > 1e-8`.
    #[default]
    Auto,
    Fixed(usize),
}

impl std::str::FromStr for EraOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(EraOrder::Auto);
        }
        s.parse()
            .map(EraOrder::Fixed)
            .map_err(|_| Error::Config(format!("order must be 'auto' or an integer, got '{s}'")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StateSpaceRealization {
    #[serde(rename = "A", with = "cmatrix")]
    a: CMatrix,
    #[serde(rename = "B", with = "cmatrix")]
    b: CMatrix,
    #[serde(rename = "C", with = "cmatrix")]
    c: CMatrix,
    /// Retained Hankel singular values.
    singular_values: Vec<f64>,
    /// Set when the requested order exceeded the numerical rank.
    #[serde(default)]
    truncated: bool,
}

impl StateSpaceRealization {
    pub fn new(a: CMatrix, b: CMatrix, c: CMatrix, singular_values: Vec<f64>) -> Result<Self> {
        let r = a.nrows();
        if a.ncols() != r || b.nrows() != r || c.ncols() != r || singular_values.len() != r {
            return Err(Error::Dimension(format!(
                "realization of order {r}: A {:?}, B {:?}, C {:?}, {} singular values",
                a.shape(),
                b.shape(),
                c.shape(),
                singular_values.len()
            )));
        }
        Ok(Self {
            a,
            b,
            c,
            singular_values,
            truncated: false,
        })
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

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// True when the requested order was cut down to the numerical rank.
    pub fn was_truncated(&self) -> bool {
        self.truncated
    }

    pub fn markov_parameters(&self, count: usize) -> Result<MarkovSequence> {
        if count == 0 {
            return Err(Error::Precondition("need at least one Markov parameter".into()));
        }
        let mut cols = self.b.clone();
        let mut next = cols.clone();
        let mut h = Vec::with_capacity(count);
        for _ in 0..count {
            h.push(&self.c * &cols);
            next.gemm(ONE, &self.a, &cols, ZERO);
            std::mem::swap(&mut cols, &mut next);
        }
        MarkovSequence::new(h)
    }

    pub fn to_system(&self, omega: CMatrix) -> Result<LtiSystem> {
        LtiSystem::new(self.a.clone(), self.b.clone(), self.c.clone(), omega)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        serial::write_json(path, self)
    }
}

/// Eigensystem realization from `h_1 .. h_{alpha + beta}` with `alpha` block
/// rows and `beta` block columns in the Hankel matrices.
pub fn era(
    h: &MarkovSequence,
    alpha: usize,
    beta: usize,
    order: EraOrder,
) -> Result<StateSpaceRealization> {
    if alpha == 0 || beta == 0 {
        return Err(Error::Precondition("Hankel block counts must be positive".into()));
    }
    if h.len() < alpha + beta {
        return Err(Error::Precondition(format!(
            "ERA with alpha = {alpha}, beta = {beta} needs {} Markov parameters, got {}",
            alpha + beta,
            h.len()
        )));
    }
    let (q, p) = (h.output_dim(), h.input_dim());
    let hs = h.as_slice();
    let mut h0 = CMatrix::zeros(alpha * q, beta * p);
    let mut h1 = CMatrix::zeros(alpha * q, beta * p);
    for i in 0..alpha {
        for j in 0..beta {
            // h_{1+i+j} lives at index i + j
            h0.view_mut((i * q, j * p), (q, p)).copy_from(&hs[i + j]);
            h1.view_mut((i * q, j * p), (q, p)).copy_from(&hs[i + j + 1]);
        }
    }

    let Svd { u, s: sigma, v_t } = svd(&h0)?;
    let smax = sigma.first().copied().unwrap_or(0.0);

    let rank = if smax > 0.0 {
        let tol = rank_tolerance(h1.nrows(), h1.ncols(), smax);
        sigma.iter().filter(|&&s| s > tol).count()
    } else {
        0
    };
    let (n, truncated) = match order {
        EraOrder::Auto if smax > 0.0 => (
            sigma.iter().filter(|&&s| s / smax > AUTO_ORDER_THRESHOLD).count(),
            false,
        ),
        EraOrder::Auto => (0, false),
        EraOrder::Fixed(r) if r > 0 && rank == 0 => {
            return Err(Error::Realization(format!(
                "Hankel matrix is numerically zero; cannot realize order {r}"
            )));
        }
        EraOrder::Fixed(r) if r > rank => {
            warn!("ERA order {r} exceeds Hankel rank {rank}; truncating");
            (rank, true)
        }
        EraOrder::Fixed(r) => (r, false),
    };

    let rn = u.columns(0, n).into_owned();
    let sn = v_t.rows(0, n).adjoint();
    let sqrt_s: Vec<f64> = sigma[..n].iter().map(|s| s.sqrt()).collect();

    let mut a = rn.ad_mul(&(&h1 * &sn));
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] /= sqrt_s[i] * sqrt_s[j];
        }
    }
    // B = first p columns of Sigma^{1/2} S_n*
    let b = CMatrix::from_fn(n, p, |i, j| sn[(j, i)].conj() * sqrt_s[i]);
    // C = first q rows of R_n Sigma^{1/2}
    let c = CMatrix::from_fn(q, n, |i, j| rn[(i, j)] * sqrt_s[j]);

    let mut real = StateSpaceRealization::new(a, b, c, sigma[..n].to_vec())?;
    real.truncated = truncated;
    Ok(real)
}

/// Oblique projection pair with `T_l* T_r = I`.
#[derive(Clone, Debug)]
pub struct BpodBasis {
    pub t_r: CMatrix,
    pub t_l: CMatrix,
}

impl BpodBasis {
    /// `||T_l* T_r - I||_max`.
    pub fn biorthogonality_defect(&self) -> f64 {
        let g = self.t_l.ad_mul(&self.t_r);
        let r = g.nrows();
        let mut worst = 0.0f64;
        for i in 0..r {
            for j in 0..r {
                let target = if i == j { ONE } else { ZERO };
                worst = worst.max((g[(i, j)] - target).norm());
            }
        }
        worst
    }
}

/// Snapshot horizon: steps until `||A^k B||` drops below `1e-8` of its peak,
/// at most [`MAX_SNAPSHOTS`].
pub fn default_snapshot_horizon(sys: &LtiSystem) -> usize {
    let decay = |start: CMatrix, a: &CMatrix| -> usize {
        let mut x = start;
        let mut next = x.clone();
        let mut peak = 0.0f64;
        for k in 0..MAX_SNAPSHOTS {
            let nrm = x.norm();
            peak = peak.max(nrm);
            if peak == 0.0 || (k > 0 && nrm < SNAPSHOT_DECAY * peak) {
                return (k + 1).max(1);
            }
            next.gemm(ONE, a, &x, ZERO);
            std::mem::swap(&mut x, &mut next);
        }
        MAX_SNAPSHOTS
    };
    let primal = decay(sys.b().clone(), sys.a());
    let adjoint = decay(sys.c().adjoint(), &sys.a().adjoint());
    primal.max(adjoint)
}

/// Stacks `[M, A M, A^2 M, ..]` column blocks, `count` of them.
fn snapshots(a: &CMatrix, seed: &CMatrix, count: usize) -> CMatrix {
    let (n, w) = seed.shape();
    let mut out = CMatrix::zeros(n, w * count);
    let mut x = seed.clone();
    let mut next = x.clone();
    for k in 0..count {
        out.view_mut((0, k * w), (n, w)).copy_from(&x);
        if k + 1 < count {
            next.gemm(ONE, a, &x, ZERO);
            std::mem::swap(&mut x, &mut next);
        }
    }
    out
}

/// Balanced POD: primal snapshots from the columns of `B`, adjoint snapshots
/// from the columns of `C*`, projected onto the leading `r` modes of `Y* X`.
/// `snapshot_count = None` uses [`default_snapshot_horizon`].
pub fn bpod_reduce(
    sys: &LtiSystem,
    snapshot_count: Option<usize>,
    r: usize,
) -> Result<(StateSpaceRealization, BpodBasis)> {
    if r == 0 {
        return Err(Error::Precondition("reduced order must be positive".into()));
    }
    let count = snapshot_count.unwrap_or_else(|| default_snapshot_horizon(sys));
    if count == 0 {
        return Err(Error::Precondition("need at least one snapshot".into()));
    }
    let (p, q) = (sys.input_dim(), sys.output_dim());
    if r > (p * count).min(q * count) {
        return Err(Error::Precondition(format!(
            "order {r} exceeds min(p, q) * snapshots = {}",
            (p * count).min(q * count)
        )));
    }

    let x = snapshots(sys.a(), sys.b(), count);
    let y = snapshots(&sys.a().adjoint(), &sys.c().adjoint(), count);

    // X = R1* Q1*, Y = R2* Q2*, so Y* X = Q2 (R2 R1*) Q1*
    let r1 = x.adjoint().qr().r();
    let r2 = y.adjoint().qr().r();
    let k = &r2 * r1.adjoint();
    let Svd {
        u: uk,
        s: sigma,
        v_t: vk_t,
    } = svd(&k)?;
    let smax = sigma.first().copied().unwrap_or(0.0);
    let rank = if smax > 0.0 {
        let tol = rank_tolerance(q * count, p * count, smax);
        sigma.iter().filter(|&&s| s > tol).count()
    } else {
        0
    };
    if rank == 0 {
        return Err(Error::Realization("impulse snapshots are numerically zero".into()));
    }
    let (order, truncated) = if r > rank {
        warn!("BPOD order {r} exceeds Hankel rank {rank}; truncating");
        (rank, true)
    } else {
        (r, false)
    };

    let inv_sqrt: Vec<f64> = sigma[..order].iter().map(|s| 1.0 / s.sqrt()).collect();
    let u1 = CMatrix::from_fn(uk.nrows(), order, |i, j| uk[(i, j)] * inv_sqrt[j]);
    let v1 = CMatrix::from_fn(vk_t.ncols(), order, |i, j| vk_t[(j, i)].conj() * inv_sqrt[j]);
    let t_r = r1.adjoint() * v1;
    let t_l = r2.adjoint() * u1;

    let a_r = t_l.ad_mul(&(sys.a() * &t_r));
    let b_r = t_l.ad_mul(sys.b());
    let c_r = sys.c() * &t_r;
    let mut rom = StateSpaceRealization::new(a_r, b_r, c_r, sigma[..order].to_vec())?;
    rom.truncated = truncated;
    Ok((rom, BpodBasis { t_r, t_l }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::real_matrix;
    use approx::assert_relative_eq;

    fn scalar_markov(a: f64, b: f64, c: f64, n: usize) -> MarkovSequence {
        MarkovSequence::new(
            (0..n)
                .map(|k| real_matrix(1, 1, &[c * a.powi(k as i32) * b]))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn one_state_system_is_recovered() {
        let h = scalar_markov(0.7, 2.0, -0.5, 12);
        let real = era(&h, 5, 5, EraOrder::Auto).unwrap();
        assert_eq!(real.order(), 1);
        assert_relative_eq!(real.a()[(0, 0)].re, 0.7, epsilon = 1e-12);
        let back = real.markov_parameters(10).unwrap();
        for k in 1..=10 {
            let want = -0.5 * 0.7f64.powi(k as i32 - 1) * 2.0;
            assert!((back.get(k)[(0, 0)].re - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_markov_parameters() {
        let h = MarkovSequence::new(vec![CMatrix::zeros(2, 1); 6]).unwrap();
        let real = era(&h, 3, 3, EraOrder::Auto).unwrap();
        assert_eq!(real.order(), 0);
        assert!(matches!(era(&h, 3, 3, EraOrder::Fixed(1)), Err(Error::Realization(_))));
    }

    #[test]
    fn too_few_parameters() {
        let h = scalar_markov(0.5, 1.0, 1.0, 5);
        assert!(matches!(era(&h, 3, 3, EraOrder::Auto), Err(Error::Precondition(_))));
    }

    #[test]
    fn fixed_order_above_rank_is_truncated() {
        let h = scalar_markov(0.5, 1.0, 1.0, 10);
        let real = era(&h, 4, 4, EraOrder::Fixed(3)).unwrap();
        assert_eq!(real.order(), 1);
        assert!(real.was_truncated());
    }

    #[test]
    fn order_parses() {
        assert_eq!("auto".parse::<EraOrder>().unwrap(), EraOrder::Auto);
        assert_eq!("4".parse::<EraOrder>().unwrap(), EraOrder::Fixed(4));
        assert!("x".parse::<EraOrder>().is_err());
    }

    #[test]
    fn bpod_scalar_is_similarity() {
        let sys = LtiSystem::noiseless(
            real_matrix(1, 1, &[0.6]),
            real_matrix(1, 1, &[3.0]),
            real_matrix(1, 1, &[0.25]),
        )
        .unwrap();
        let (rom, basis) = bpod_reduce(&sys, Some(30), 1).unwrap();
        assert!(basis.biorthogonality_defect() < 1e-12);
        let full = sys.markov_parameters(10).unwrap();
        let red = rom.markov_parameters(10).unwrap();
        for k in 1..=10 {
            assert!((full.get(k) - red.get(k)).norm() < 1e-12);
        }
    }

    #[test]
    fn realization_json_has_singular_values() {
        let h = scalar_markov(0.5, 1.0, 1.0, 6);
        let real = era(&h, 3, 3, EraOrder::Auto).unwrap();
        let v = serde_json::to_value(&real).unwrap();
        assert!(v.get("singular_values").unwrap().is_array());
        assert!(v.get("A").is_some() && v.get("B").is_some() && v.get("C").is_some());
    }
}
