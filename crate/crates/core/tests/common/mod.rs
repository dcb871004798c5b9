//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use epiflow_core::dynamics::GainTensor;
use epiflow_core::{LabeledWindow, NnlsProblem};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Exhaustive NNLS: the optimum is the unconstrained least-squares solution
/// on some support set whose solution is non-negative.
pub fn brute_force_nnls(p: &NnlsProblem) -> (DVector<f64>, f64) {
    let (m, n) = p.a().shape();
    let sw: Vec<f64> = p.w().iter().map(|w| w.sqrt()).collect();
    let mut best = (DVector::zeros(n), p.objective(&DVector::zeros(n)));
    for mask in 1u32..(1 << n) {
        let cols: Vec<usize> = (0..n).filter(|c| mask & (1 << c) != 0).collect();
        let a = DMatrix::from_fn(m, cols.len(), |r, c| sw[r] * p.a()[(r, cols[c])]);
        let b = DVector::from_fn(m, |r, _| sw[r] * p.b()[r]);
        let Ok(xs) = a.svd(true, true).solve(&b, 1e-13) else {
            continue;
        };
        if xs.iter().any(|&v| v < -1e-12) {
            continue;
        }
        let mut x = DVector::zeros(n);
        for (k, &c) in cols.iter().enumerate() {
            x[c] = xs[k].max(0.0);
        }
        let f = p.objective(&x);
        if f < best.1 {
            best = (x, f);
        }
    }
    best
}

pub fn random_nnls_problem(rng: &mut impl Rng) -> NnlsProblem {
    let m = rng.gen_range(1..=10);
    let n = rng.gen_range(1..=6);
    let mut a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
    if n > 1 && rng.gen_bool(0.15) {
        // Duplicate a column to exercise rank deficiency.
        let src = a.column(0).clone_owned();
        a.set_column(n - 1, &src);
    }
    let b = DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0));
    let w = DVector::from_fn(m, |_, _| rng.gen_range(0.1..2.0));
    NnlsProblem::new(a, b, w).unwrap()
}

/// Random roots closed under conjugation with magnitudes in `[lo, hi]` and
/// pairwise separation at least `sep`.
pub fn planted_roots(rng: &mut impl Rng, degree: usize, lo: f64, hi: f64, sep: f64) -> Vec<Complex64> {
    'retry: loop {
        let mut roots: Vec<Complex64> = Vec::with_capacity(degree);
        while roots.len() < degree {
            let r = rng.gen_range(lo..=hi);
            let new: Vec<Complex64> = if degree - roots.len() >= 2 && rng.gen_bool(0.6) {
                let z = Complex64::from_polar(r, rng.gen_range(0.2..std::f64::consts::PI - 0.2));
                vec![z, z.conj()]
            } else {
                vec![Complex64::new(if rng.gen_bool(0.5) { r } else { -r }, 0.0)]
            };
            for z in &new {
                if roots.iter().any(|q| (q - z).norm() < sep) {
                    continue 'retry;
                }
            }
            roots.extend(new);
        }
        return roots;
    }
}

pub fn sorted_magnitudes(roots: &[Complex64]) -> Vec<f64> {
    let mut m: Vec<f64> = roots.iter().map(|z| z.norm()).collect();
    m.sort_by(|a, b| b.total_cmp(a));
    m
}

/// Dense propagator written out entry by entry from its definition:
/// shift identities above the diagonal of every region block, and a last
/// block row holding `I + E_{i,i,1}` at the newest slot and `E_{i,j,h}`
/// elsewhere, with `E = (1-beta) G_full + [i==j] beta G_diag` and
/// `G[c][col] = K[c] * (1, -1, -1)[col]`.
pub fn dense_propagator_oracle(g_diag: &GainTensor, g_full: &GainTensor, beta: f64) -> DMatrix<f64> {
    let (r, n) = (g_full.regions(), g_full.n_tau());
    let stride = 3 * n;
    let dim = r * stride;
    let sign = [1.0, -1.0, -1.0];
    let mut l = DMatrix::zeros(dim, dim);
    for i in 0..r {
        for m in 0..n - 1 {
            for c in 0..3 {
                l[(i * stride + 3 * m + c, i * stride + 3 * (m + 1) + c)] = 1.0;
            }
        }
        let row0 = i * stride + 3 * (n - 1);
        for c in 0..3 {
            l[(row0 + c, row0 + c)] += 1.0;
        }
        for j in 0..r {
            for h in 1..=n {
                let full = g_full.get(i, j, h);
                let own = g_diag.get(i, i, h);
                let col0 = j * stride + 3 * (n - h);
                for c in 0..3 {
                    for col in 0..3 {
                        let mut e = (1.0 - beta) * full[c] * sign[col];
                        if i == j {
                            e += beta * own[c] * sign[col];
                        }
                        l[(row0 + c, col0 + col)] += e;
                    }
                }
            }
        }
    }
    l
}

pub fn random_tensor(rng: &mut impl Rng, regions: usize, n_tau: usize, mode: epiflow_core::GainMode) -> GainTensor {
    let mut g = GainTensor::zeros(regions, n_tau, n_tau + 1, mode);
    for i in 0..regions {
        for j in 0..regions {
            if mode == epiflow_core::GainMode::Quarantined && i != j {
                continue;
            }
            for h in 1..=n_tau {
                g.set(
                    i,
                    j,
                    h,
                    [
                        rng.gen_range(0.0..0.3),
                        rng.gen_range(0.0..0.05),
                        rng.gen_range(0.0..0.2),
                    ],
                )
                .unwrap();
            }
        }
    }
    g
}

/// Relative distance between two vectors, `|x - y| / max(1, |y|)`.
pub fn rel_diff(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let num: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = y.iter().map(|b| b * b).sum::<f64>().sqrt();
    num / den.max(1.0)
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_differences(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            p[k] = x[k] + h;
            let up = f(&p);
            p[k] = x[k] - h;
            let down = f(&p);
            p[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Two Gaussian clusters separated along a random direction.
pub fn separable(rng: &mut impl Rng, n: usize, input: usize) -> Vec<LabeledWindow> {
    let noise = Normal::new(0.0, 1.0).unwrap();
    let direction: Vec<f64> = (0..input).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (0..n)
        .map(|s| {
            let label = (s % 2) as f64;
            let sign = if label == 1.0 { 1.0 } else { -1.0 };
            LabeledWindow {
                features: direction
                    .iter()
                    .map(|d| 10.0 + 3.0 * sign * d + 0.3 * noise.sample(rng))
                    .collect(),
                label,
                day: s + 1,
            }
        })
        .collect()
}
