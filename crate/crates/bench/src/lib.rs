//! Fixtures shared by the benchmarks.

use epiflow_core::synth;
use epiflow_core::{GainMode, GainTensor, NnlsProblem, PandemicSeries};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Weighted NNLS problem with `m` rows, `n` columns and a planted
/// non-negative solution plus noise.
pub fn nnls_problem(m: usize, n: usize, seed: u64) -> NnlsProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(0.0..1.0));
    let x = DVector::from_fn(n, |i, _| if i % 3 == 0 { 0.0 } else { rng.gen_range(0.0..2.0) });
    let b = &a * x + DVector::from_fn(m, |_, _| rng.gen_range(-0.1..0.1));
    NnlsProblem::new(a, b, DVector::from_element(m, 1.0)).expect("valid problem")
}

/// Exactly generated independent regions.
pub fn quarantined_series(regions: usize, n_tau: usize, days: usize) -> PandemicSeries {
    synth::quarantined(regions, n_tau, days, 1)
        .expect("planted series")
        .series
}

/// Exactly generated coupled regions.
pub fn interstate_series(regions: usize, n_tau: usize, days: usize) -> PandemicSeries {
    synth::interstate(regions, n_tau, days, 1)
        .expect("planted series")
        .series
}

/// Dense gain tensor with small random entries.
pub fn random_gains(regions: usize, n_tau: usize, mode: GainMode, seed: u64) -> GainTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = GainTensor::zeros(regions, n_tau, n_tau + 1, mode);
    for i in 0..regions {
        for j in 0..regions {
            if mode == GainMode::Quarantined && i != j {
                continue;
            }
            for h in 1..=n_tau {
                g.set(
                    i,
                    j,
                    h,
                    [
                        rng.gen_range(0.0..0.02),
                        rng.gen_range(0.0..0.002),
                        rng.gen_range(0.0..0.01),
                    ],
                )
                .expect("non-negative gains");
            }
        }
    }
    g
}

/// Companion coefficients with planted roots inside `[0.3, 1.1]`.
pub fn characteristic(degree: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut poly = vec![1.0];
    for _ in 0..degree {
        let r = rng.gen_range(0.3..1.1) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let mut next = vec![0.0; poly.len() + 1];
        for (k, c) in poly.iter().enumerate() {
            next[k] -= r * c;
            next[k + 1] += c;
        }
        poly = next;
    }
    poly
}
