mod common;

use epiflow_core::dynamics::{assemble_propagator, step_window};
use epiflow_core::stability::simulate_active;
use epiflow_core::timeseries::Window;
use epiflow_core::{BlendedGains, GainMode, StackedState, StateVector};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_window(rng: &mut impl Rng, regions: usize, n_tau: usize) -> Window {
    let per_region = (0..regions)
        .map(|_| {
            (0..n_tau)
                .map(|_| {
                    StateVector::new(
                        rng.gen_range(100.0..1e4),
                        rng.gen_range(0.0..50.0),
                        rng.gen_range(0.0..500.0),
                    )
                })
                .collect()
        })
        .collect();
    Window::new(40, per_region).unwrap()
}

#[test]
fn summation_matrix_and_difference_forms_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..100 {
        let r = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=6);
        let beta = rng.gen_range(0.0..=1.0);
        let g_diag = common::random_tensor(&mut rng, r, n, GainMode::Quarantined);
        let g_full = common::random_tensor(&mut rng, r, n, GainMode::Interstate);
        let w = random_window(&mut rng, r, n);

        let summed =
            StackedState::stack(&step_window(&w, &BlendedGains::new(&g_diag, &g_full, beta).unwrap()).unwrap());
        let y = DVector::from_column_slice(StackedState::stack(&w).as_slice());
        let dense = common::dense_propagator_oracle(&g_diag, &g_full, beta) * &y;
        let structured = assemble_propagator(&g_diag, &g_full, beta).unwrap();
        let applied = structured.apply(&StackedState::stack(&w)).unwrap();
        let library_dense = structured.to_dense() * &y;

        assert!(
            common::rel_diff(summed.as_slice(), dense.as_slice()) <= 1e-10,
            "case {case}"
        );
        assert!(
            common::rel_diff(applied.as_slice(), dense.as_slice()) <= 1e-10,
            "case {case}"
        );
        assert!(
            common::rel_diff(library_dense.as_slice(), dense.as_slice()) <= 1e-10,
            "case {case}"
        );

        // Single region, self-gains: active cases follow the scalar
        // difference equation.
        if r == 1 {
            let gamma: Vec<f64> = (1..=n)
                .map(|h| {
                    let k = g_diag.get(0, 0, h);
                    let f = g_full.get(0, 0, h);
                    let c = |v: [f64; 3]| v[0] - v[1] - v[2];
                    beta * c(k) + (1.0 - beta) * c(f)
                })
                .collect();
            let history: Vec<f64> = w.region(0).iter().map(|x| x.active()).collect();
            let next = simulate_active(&gamma, &history, 1).unwrap()[0];
            let got = summed.newest(0).active();
            assert!(
                (got - next).abs() <= 1e-10 * next.abs().max(1.0),
                "case {case}: {got} vs {next}"
            );
        }
    }
}

#[test]
fn two_steps_equal_squared_propagator() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (r, n) = (rng.gen_range(1..=3), rng.gen_range(2..=5));
        let g = common::random_tensor(&mut rng, r, n, GainMode::Interstate);
        let blend = BlendedGains::single(&g, 0.0).unwrap();
        let w = random_window(&mut rng, r, n);
        let recursive = step_window(&step_window(&w, &blend).unwrap(), &blend).unwrap();
        let l = common::dense_propagator_oracle(&g, &g, 0.0);
        let y = DVector::from_column_slice(StackedState::stack(&w).as_slice());
        let squared = &l * &l * y;
        assert!(common::rel_diff(StackedState::stack(&recursive).as_slice(), squared.as_slice()) <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn propagator_is_affine_in_beta(seed in any::<u64>(), beta in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, n) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
        let g_diag = common::random_tensor(&mut rng, r, n, GainMode::Quarantined);
        let g_full = common::random_tensor(&mut rng, r, n, GainMode::Interstate);
        let at = |b: f64| assemble_propagator(&g_diag, &g_full, b).unwrap().to_dense();
        let (l0, l1, lb) = (at(0.0), at(1.0), at(beta));
        let n3 = 3 * n;
        for row in 0..lb.nrows() {
            for col in 0..lb.ncols() {
                let blended = beta * l1[(row, col)] + (1.0 - beta) * l0[(row, col)];
                let is_shift = row / n3 == col / n3 && row % n3 < 3 * (n - 1) && col % n3 == row % n3 + 3;
                if is_shift {
                    prop_assert_eq!(lb[(row, col)], 1.0);
                    prop_assert_eq!(l0[(row, col)], 1.0);
                    prop_assert_eq!(l1[(row, col)], 1.0);
                } else {
                    prop_assert!((lb[(row, col)] - blended).abs() <= 1e-14);
                }
            }
        }
    }

    #[test]
    fn one_step_conserves_the_active_identity(seed in any::<u64>()) {
        // Spatial law: each predicted state's active count equals cases
        // minus deaths minus recoveries of that predicted state.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, n) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
        let g = common::random_tensor(&mut rng, r, n, GainMode::Interstate);
        let w = random_window(&mut rng, r, n);
        let next = step_window(&w, &BlendedGains::single(&g, 0.3).unwrap()).unwrap();
        for i in 0..r {
            let x = next.newest(i);
            prop_assert_eq!(x.active(), x.cases - x.deaths - x.recoveries);
            prop_assert!(x.cases >= w.newest(i).cases);
            prop_assert!(x.deaths >= w.newest(i).deaths);
        }
    }
}
