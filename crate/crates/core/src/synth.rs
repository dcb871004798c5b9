//! Series generated exactly by known gains, for oracle tests and benchmarks.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{step_window, BlendedGains, GainMode, GainTensor, StateVector};
use crate::error::{Error, Result};
use crate::stability::gamma_from_roots;
use crate::timeseries::{PandemicSeries, RegionRegistry, Window};

/// Runs the summation-form model forward from `seed` (one oldest-first
/// history of `n_tau` days per region) until the series covers `days` days.
pub fn simulate(
    registry: RegionRegistry,
    epoch: NaiveDate,
    seed: Vec<Vec<StateVector>>,
    gains: &BlendedGains<'_>,
    days: usize,
) -> Result<PandemicSeries> {
    let n = gains.n_tau();
    let mut window = Window::new(1, seed)?;
    if window.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "seed holds {} days, gains need {n}",
            window.len()
        )));
    }
    if days < n {
        return Err(Error::InvalidInput(format!("{days} days is shorter than the seed")));
    }
    let mut trajectories: Vec<Vec<StateVector>> = (0..window.regions()).map(|i| window.region(i).to_vec()).collect();
    for _ in n..days {
        window = step_window(&window, gains)?;
        for (i, t) in trajectories.iter_mut().enumerate() {
            t.push(window.newest(i));
        }
    }
    PandemicSeries::from_trajectories(registry, epoch, trajectories)
}

/// Splits `gamma_h = omega_h - lambda_h - theta_h` into non-negative gains,
/// each at least `floor`, so every channel is excited.
pub fn split_gamma(gamma: &[f64], floor: f64) -> Vec<[f64; 3]> {
    gamma
        .iter()
        .map(|&g| {
            let omega = g.max(0.0) + 2.0 * floor;
            let loss = (omega - g) / 2.0;
            [omega, loss, loss]
        })
        .collect()
}

/// Default planted self-dynamics: one slowly growing mode plus damped
/// oscillations (and an alternating mode for odd remainders), all close to
/// the unit circle so every mode stays visible in the data and windows keep
/// full rank over long series.
pub fn planted_roots(n_tau: usize, scale: f64) -> Vec<Complex64> {
    let mut roots = vec![Complex64::new(1.02 * scale, 0.0)];
    let mut m = 1;
    while roots.len() + 2 <= n_tau {
        let z = Complex64::from_polar(0.98 * scale, 2.0 * std::f64::consts::PI * m as f64 / (n_tau + 1) as f64);
        roots.extend([z, z.conj()]);
        m += 1;
    }
    if roots.len() < n_tau {
        roots.push(Complex64::new(-0.96 * scale, 0.0));
    }
    roots
}

/// An exactly generated dataset with the gains that produced it.
#[derive(Debug, Clone)]
pub struct Planted {
    pub series: PandemicSeries,
    pub gains: GainTensor,
}

fn registry(regions: usize) -> Result<RegionRegistry> {
    RegionRegistry::from_codes((0..regions).map(|i| format!("S{i:02}")))
}

fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 3, 12).expect("valid date")
}

fn seed_history(regions: usize, n_tau: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<StateVector>> {
    (0..regions)
        .map(|_| {
            let mut x = StateVector::new(
                rng.gen_range(500.0..1500.0),
                rng.gen_range(5.0..20.0),
                rng.gen_range(50.0..150.0),
            );
            (0..n_tau)
                .map(|_| {
                    let step = StateVector::new(
                        rng.gen_range(20.0..60.0),
                        rng.gen_range(0.0..2.0),
                        rng.gen_range(5.0..15.0),
                    );
                    x = x + step;
                    x
                })
                .collect()
        })
        .collect()
}

/// Independent regions, each driven by its own planted self-gains.
pub fn quarantined(regions: usize, n_tau: usize, days: usize, seed: u64) -> Result<Planted> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gains = GainTensor::zeros(regions, n_tau, days, GainMode::Quarantined);
    for i in 0..regions {
        let scale = 1.0 - 0.01 * i as f64;
        let gamma = gamma_from_roots(&planted_roots(n_tau, scale));
        for (h, k) in split_gamma(&gamma, 0.002 + 0.001 * i as f64).into_iter().enumerate() {
            gains.set(i, i, h + 1, k)?;
        }
    }
    let series = simulate(
        registry(regions)?,
        epoch(),
        seed_history(regions, n_tau, &mut rng),
        &BlendedGains::single(&gains, 1.0)?,
        days,
    )?;
    Ok(Planted { series, gains })
}

/// Roots for the `m`-th independent mode of a coupled system: the default
/// set for `m = 0`, then rotated complex pairs near the unit circle.
fn mode_roots(n_tau: usize, m: usize) -> Vec<Complex64> {
    if m == 0 {
        return planted_roots(n_tau, 1.0);
    }
    let radius = 0.985 - 0.005 * m as f64;
    let mut roots = Vec::with_capacity(n_tau);
    let mut p = 0;
    while roots.len() + 2 <= n_tau {
        let angle = std::f64::consts::PI * (p + 1) as f64 / (n_tau + 2) as f64 + 0.25 * m as f64;
        let z = Complex64::from_polar(radius, angle.min(3.0));
        roots.extend([z, z.conj()]);
        p += 1;
    }
    if roots.len() < n_tau {
        roots.push(Complex64::new(radius, 0.0));
    }
    roots
}

/// Coupled regions with every `(i, j, h)` gain non-zero. Active cases are
/// `a = P b` for a fixed mixing matrix `P` and independent modes `b_m`, each
/// following its own scalar recurrence, so the regions' histories are
/// linearly independent and every window has full rank.
pub fn interstate(regions: usize, n_tau: usize, days: usize, seed: u64) -> Result<Planted> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = regions;
    let mix = DMatrix::from_fn(r, r, |i, j| if i == j { 1.0 } else { 0.25 });
    let unmix = mix
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidInput("mixing matrix is singular".into()))?;
    let mode_gamma: Vec<Vec<f64>> = (0..r).map(|m| gamma_from_roots(&mode_roots(n_tau, m))).collect();

    let mut gains = GainTensor::zeros(r, n_tau, days, GainMode::Interstate);
    for h in 1..=n_tau {
        let d = DMatrix::from_diagonal(&DVector::from_fn(r, |m, _| mode_gamma[m][h - 1]));
        let gamma = &mix * d * &unmix;
        for i in 0..r {
            for j in 0..r {
                let floor = 0.002 + 0.0005 * ((i + 2 * j + h) % 5) as f64;
                gains.set(i, j, h, split_gamma(&[gamma[(i, j)]], floor)[0])?;
            }
        }
    }

    let modes: Vec<Vec<f64>> = (0..r)
        .map(|m| {
            (0..n_tau)
                .map(|t| {
                    let t = t as f64;
                    if m == 0 {
                        1000.0 + 20.0 * t + rng.gen_range(20.0..40.0) * (-1f64).powf(t)
                    } else {
                        rng.gen_range(100.0..200.0) * (1.1 * t + m as f64).cos()
                    }
                })
                .collect()
        })
        .collect();
    let seed_states = (0..r)
        .map(|i| {
            let mut d = rng.gen_range(5.0..20.0);
            let mut rec = rng.gen_range(50.0..150.0);
            (0..n_tau)
                .map(|t| {
                    d += rng.gen_range(0.0..2.0);
                    rec += rng.gen_range(5.0..15.0);
                    let a: f64 = (0..r).map(|m| mix[(i, m)] * modes[m][t]).sum();
                    StateVector::new(a + d + rec, d, rec)
                })
                .collect()
        })
        .collect();
    let series = simulate(
        registry(r)?,
        epoch(),
        seed_states,
        &BlendedGains::single(&gains, 0.0)?,
        days,
    )?;
    Ok(Planted { series, gains })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_reproduces_gamma() {
        let gamma = [0.3, -0.2, 0.0];
        for (k, g) in split_gamma(&gamma, 0.01).iter().zip(gamma) {
            assert!(k.iter().all(|&v| v >= 0.01));
            assert!((k[0] - k[1] - k[2] - g).abs() < 1e-15);
        }
    }

    #[test]
    fn planted_series_stay_positive() {
        let q = quarantined(3, 4, 80, 7).unwrap();
        let s = &q.series;
        for i in 0..3 {
            for k in 1..=80 {
                assert!(s.active_cases(i, k).unwrap() > 0.0, "region {i}, day {k}");
            }
        }
        let p = interstate(2, 2, 60, 3).unwrap();
        for i in 0..2 {
            assert!(p.series.active_cases(i, 60).unwrap() > 0.0);
        }
    }
}
