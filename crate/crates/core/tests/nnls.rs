mod common;

use epiflow_core::learning::solve_nnls;
use epiflow_core::{NnlsOptions, NnlsProblem};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_exhaustive_oracle_on_random_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..500 {
        let p = common::random_nnls_problem(&mut rng);
        let s = solve_nnls(&p, &NnlsOptions::default()).unwrap();
        let (_, best) = common::brute_force_nnls(&p);
        let got = p.objective(&s.x);
        assert!((got - best).abs() <= 1e-9, "case {case}: {got} vs {best}");
        assert!(s.x.iter().all(|&v| v >= 0.0));
        assert!(s.kkt_violation <= 1e-10, "case {case}: kkt {}", s.kkt_violation);
    }
}

#[test]
fn full_rank_problem_recovers_planted_solution() {
    let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    let x = DVector::from_row_slice(&[2.0, 0.5]);
    let p = NnlsProblem::unweighted(a.clone(), &a * &x).unwrap();
    let s = solve_nnls(&p, &NnlsOptions::default()).unwrap();
    assert!((&s.x - x).norm() < 1e-14);
    assert!(s.residual_norm < 1e-14);
}

fn problem() -> impl Strategy<Value = NnlsProblem> {
    (1usize..=8, 1usize..=5).prop_flat_map(|(m, n)| {
        (
            prop::collection::vec(-3.0f64..3.0, m * n),
            prop::collection::vec(-5.0f64..5.0, m),
            prop::collection::vec(0.1f64..3.0, m),
        )
            .prop_map(move |(a, b, w)| {
                NnlsProblem::new(
                    DMatrix::from_row_slice(m, n, &a),
                    DVector::from_vec(b),
                    DVector::from_vec(w),
                )
                .unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn solution_satisfies_kkt(p in problem()) {
        let s = solve_nnls(&p, &NnlsOptions::default()).unwrap();
        let g = p.gradient(&s.x);
        let scale = 1.0 + p.a().norm() * p.b().norm();
        for (x, gi) in s.x.iter().zip(g.iter()) {
            prop_assert!(*x >= 0.0);
            prop_assert!(*gi >= -1e-9 * scale);
            prop_assert!((x * gi).abs() <= 1e-9 * scale * (1.0 + x.abs()));
        }
    }

    #[test]
    fn response_scaling_scales_solution(p in problem(), c in 0.1f64..100.0) {
        let s = solve_nnls(&p, &NnlsOptions::default()).unwrap();
        let scaled = NnlsProblem::new(p.a().clone(), p.b() * c, p.w().clone()).unwrap();
        let sc = solve_nnls(&scaled, &NnlsOptions::default()).unwrap();
        let f_direct = scaled.objective(&sc.x);
        let f_mapped = scaled.objective(&(&s.x * c));
        prop_assert!((f_direct - f_mapped).abs() <= 1e-8 * (1.0 + f_direct.abs()));
    }

    #[test]
    fn never_worse_than_zero_or_oracle(p in problem()) {
        let s = solve_nnls(&p, &NnlsOptions::default()).unwrap();
        let f = p.objective(&s.x);
        prop_assert!(f <= p.objective(&DVector::zeros(p.cols())) + 1e-12);
        let (_, best) = common::brute_force_nnls(&p);
        prop_assert!((f - best).abs() <= 1e-8 * (1.0 + best));
    }
}
