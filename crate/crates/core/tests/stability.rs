mod common;

use epiflow_core::stability::{companion_matrix, eigen_magnitudes, gamma_from_roots, simulate_active};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn planted_roots_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..200 {
        let degree = rng.gen_range(1..=14);
        let roots = common::planted_roots(&mut rng, degree, 0.05, 1.5, 0.05);
        let gamma = gamma_from_roots(&roots);
        let spectrum = eigen_magnitudes(&companion_matrix(&gamma), 1e-9).unwrap_or_else(|e| panic!("case {case}: {e}"));
        let want = common::sorted_magnitudes(&roots);
        for (got, want) in spectrum.magnitudes.iter().zip(&want) {
            assert!(
                (got - want).abs() <= 1e-8,
                "case {case} (degree {degree}): {got} vs {want}"
            );
        }
        assert!(spectrum.max_residual <= 1e-6);
    }
}

#[test]
fn quadratic_closed_form() {
    let s = eigen_magnitudes(&companion_matrix(&[0.0, 0.25]), 1e-9).unwrap();
    let r2 = 2f64.sqrt();
    assert!((s.magnitudes[0] - (1.0 + r2) / 2.0).abs() <= 1e-10);
    assert!((s.magnitudes[1] - (r2 - 1.0) / 2.0).abs() <= 1e-10);
}

#[test]
fn radius_predicts_growth_of_the_difference_equation() {
    let roots = [Complex64::new(0.8, 0.0), Complex64::new(-0.3, 0.0)];
    let gamma = gamma_from_roots(&roots);
    let a = simulate_active(&gamma, &[1.0, 2.0], 200).unwrap();
    assert!(a.last().unwrap().abs() < 1e-15);
    let roots = [Complex64::new(1.05, 0.0), Complex64::new(0.2, 0.0)];
    let gamma = gamma_from_roots(&roots);
    let a = simulate_active(&gamma, &[1.0, 2.0], 200).unwrap();
    assert!(a.last().unwrap().abs() > 1e3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    // Vieta: the product of root magnitudes is |det C| (|gamma_n| once
    // n > 1) and the sum of roots is the trace 1 + gamma_1.
    #[test]
    fn vieta_identities(gamma in prop::collection::vec(-0.8f64..0.8, 1..10)) {
        let n = gamma.len();
        let s = eigen_magnitudes(&companion_matrix(&gamma), 1e-6);
        prop_assume!(s.is_ok());
        let s = s.unwrap();
        prop_assert_eq!(s.magnitudes.len(), n);
        let product: f64 = s.magnitudes.iter().product();
        let det = if n == 1 { 1.0 + gamma[0] } else { gamma[n - 1] };
        prop_assert!((product - det.abs()).abs() <= 1e-7 * (1.0 + product));
        let trace: Complex64 = s.roots.iter().sum();
        prop_assert!((trace.re - (1.0 + gamma[0])).abs() <= 1e-7);
        prop_assert!(trace.im.abs() <= 1e-7);
        prop_assert!(s.magnitudes.windows(2).all(|w| w[0] >= w[1]));
    }
}
