mod common;

use arinput::autocorr::sample_autocorrelation;
use arinput::linalg::{real_matrix, CVector};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sample_estimate_is_conjugate_symmetric(
        seed in any::<u64>(),
        d in 1usize..=3,
        t in 5usize..60,
        complex in any::<bool>(),
    ) {
        let mut r = common::rng(seed);
        let data: Vec<CVector> = (0..t)
            .map(|_| CVector::from_fn(d, |_, _| {
                let im = if complex { r.sample(StandardNormal) } else { 0.0 };
                Complex64::new(r.sample(StandardNormal), im)
            }))
            .collect();
        let n = t / 2;
        let seq = sample_autocorrelation(&data, n).unwrap();
        for m in 0..=n as i64 {
            prop_assert_eq!(seq.lag(-m), &seq.lag(m).adjoint());
        }
        let r0 = seq.lag(0);
        prop_assert_eq!(r0, &r0.adjoint());
        prop_assert!(r0.symmetric_eigenvalues().iter().all(|&e| e >= -1e-12));
    }
}

/// Scalar AR(1) `u_k = 0.7 u_{k-1} + e_k`, started from stationarity.
fn ar1_path(seed: u64, t: usize) -> Vec<CVector> {
    let mut r = common::rng(seed);
    let phi: f64 = 0.7;
    let mut u = r.sample::<f64, _>(StandardNormal) / (1.0 - phi * phi).sqrt();
    (0..t)
        .map(|_| {
            let out = CVector::from_element(1, Complex64::new(u, 0.0));
            u = phi * u + r.sample::<f64, _>(StandardNormal);
            out
        })
        .collect()
}

#[test]
fn estimate_improves_as_the_record_grows() {
    let lags = 10;
    let truth = common::ar_autocorrelation(
        &[real_matrix(1, 1, &[0.7])],
        &real_matrix(1, 1, &[1.0]),
        lags,
    );
    let errors: Vec<f64> = (0..6)
        .map(|k| {
            let t = 2000usize << k;
            // average over independent records to tame single-path noise
            (0..8u64)
                .map(|rep| {
                    let est = sample_autocorrelation(&ar1_path(1000 * k as u64 + rep, t), lags).unwrap();
                    common::sequence_error(&est, &truth, lags)
                })
                .sum::<f64>()
                / 8.0
        })
        .collect();
    let inversions = errors.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(inversions <= 1, "errors {errors:?}");
    assert!(errors[5] < errors[0], "errors {errors:?}");
}
