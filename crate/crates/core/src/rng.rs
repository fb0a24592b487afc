//! Seeded random streams.
//!
//! One root seed fans out into independent ChaCha streams indexed by a
//! counter, so the order in which stages draw numbers never changes what
//! another stage sees.

use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::linalg::{is_real, psd_factor, CMatrix, CVector};

/// Stream identifiers used by the benchmark harness.
pub mod streams {
    pub const INPUT: u64 = 1;
    pub const MEASUREMENT: u64 = 2;
    pub const PERTURBATION: u64 = 3;
    pub const FILTER_INPUT: u64 = 4;
    pub const FILTER_MEASUREMENT: u64 = 5;
    pub const MONTE_CARLO: u64 = 6;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedSplitter {
    root: u64,
}

impl SeedSplitter {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.root);
        rng.set_stream(stream);
        rng
    }

    /// Seed for a nested splitter, e.g. one per Monte-Carlo run.
    pub fn child(&self, stream: u64) -> SeedSplitter {
        SeedSplitter::new(self.rng(stream).next_u64())
    }
}

/// Standard Gaussian vector. The complex variant is circular with
/// `E[w w*] = I`.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, dim: usize, complex: bool) -> CVector {
    CVector::from_fn(dim, |_, _| {
        if complex {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
        } else {
            Complex64::new(rng.sample(StandardNormal), 0.0)
        }
    })
}

/// Zero-mean Gaussian source with a prescribed Hermitian PSD covariance.
/// Draws are real when the covariance is real, circular complex otherwise
/// unless forced complex.
#[derive(Clone, Debug)]
pub struct GaussianSource {
    factor: CMatrix,
    complex: bool,
}

impl GaussianSource {
    pub fn new(covariance: &CMatrix) -> Result<Self> {
        let complex = !is_real(covariance);
        Ok(Self {
            factor: psd_factor(covariance)?,
            complex,
        })
    }

    pub fn with_complex(mut self, complex: bool) -> Self {
        self.complex = self.complex || complex;
        self
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn is_complex(&self) -> bool {
        self.complex
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> CVector {
        let w = standard_normal(rng, self.factor.ncols(), self.complex);
        &self.factor * w
    }
}
