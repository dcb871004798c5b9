//! Stability of active-case growth.
//!
//! With self-gains `K_h = [omega_h, lambda_h, theta_h]` the active cases obey
//! `a[k] = (1 + gamma_1) a[k-1] + gamma_2 a[k-2] + ... + gamma_n a[k-n]`
//! where `gamma_h = omega_h - lambda_h - theta_h`. Growth is stable on a day
//! when every root of the companion polynomial
//! `z^n - (1 + gamma_1) z^(n-1) - gamma_2 z^(n-2) - ... - gamma_n`
//! lies strictly inside the unit disk.

mod roots;

pub use roots::{aberth_roots, eval_with_derivative, Roots};

use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dynamics::GainTensor;
use crate::error::{Error, Result};
use crate::timeseries::PandemicSeries;

const MAX_ITER: usize = 500;

/// Which gains the coefficients were taken from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StabilityScope {
    /// Gains learned on the single-region national aggregate.
    National,
    /// Self-gains of one region of a multi-region tensor.
    Region(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaCoefficients {
    /// `gamma[h - 1]` for lags `h = 1..=n_tau`.
    pub gamma: Vec<f64>,
    pub scope: StabilityScope,
    pub day: usize,
}

pub fn gamma_from_gains(g: &GainTensor, scope: &StabilityScope) -> Result<GammaCoefficients> {
    let i = match *scope {
        StabilityScope::National => {
            if g.regions() != 1 {
                return Err(Error::InvalidInput(format!(
                    "national scope needs gains learned on the aggregate, got {} regions",
                    g.regions()
                )));
            }
            0
        }
        StabilityScope::Region(i) => {
            if i >= g.regions() {
                return Err(Error::out_of_range("region", i, 0, g.regions() - 1));
            }
            i
        }
    };
    let gamma = (1..=g.n_tau())
        .map(|h| {
            let [w, l, t] = g.get(i, i, h);
            w - l - t
        })
        .collect();
    Ok(GammaCoefficients {
        gamma,
        scope: scope.clone(),
        day: g.day(),
    })
}

/// Super-diagonal ones, last row `[gamma_n, ..., gamma_2, 1 + gamma_1]`.
pub fn companion_matrix(gamma: &[f64]) -> DMatrix<f64> {
    let n = gamma.len();
    assert!(n > 0, "companion matrix needs at least one coefficient");
    let mut m = DMatrix::zeros(n, n);
    for r in 0..n - 1 {
        m[(r, r + 1)] = 1.0;
    }
    for c in 0..n {
        m[(n - 1, c)] = gamma[n - 1 - c];
    }
    m[(n - 1, n - 1)] += 1.0;
    m
}

/// Ascending coefficients of `det(zI - C)` for a companion matrix `C`.
pub fn characteristic_polynomial(companion: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = companion.nrows();
    if n == 0 || companion.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "companion matrix must be square and non-empty, got {}x{}",
            n,
            companion.ncols()
        )));
    }
    for r in 0..n - 1 {
        for c in 0..n {
            let expected = if c == r + 1 { 1.0 } else { 0.0 };
            if companion[(r, c)] != expected {
                return Err(Error::InvalidInput(format!(
                    "matrix is not in companion form at ({r}, {c})"
                )));
            }
        }
    }
    let mut coeffs: Vec<f64> = (0..n).map(|c| -companion[(n - 1, c)]).collect();
    coeffs.push(1.0);
    Ok(coeffs)
}

/// Eigenvalues of a companion matrix with their magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    #[serde(skip)]
    pub roots: Vec<Complex64>,
    /// Sorted descending.
    pub magnitudes: Vec<f64>,
    pub spectral_radius: f64,
    /// Largest `|p(z)| / max(1, |z|^n)` over the returned roots.
    pub max_residual: f64,
    /// Largest final Newton correction.
    pub max_correction: f64,
    pub iterations: usize,
}

/// Magnitudes of all eigenvalues of `companion`, each certified by the
/// residual `|p(z)| <= 1e-6 max(1, |z|^n)` and a final Newton correction
/// of at most `tol`.
pub fn eigen_magnitudes(companion: &DMatrix<f64>, tol: f64) -> Result<Spectrum> {
    let coeffs = characteristic_polynomial(companion)?;
    spectrum_of_polynomial(&coeffs, tol)
}

pub(crate) fn spectrum_of_polynomial(coeffs: &[f64], tol: f64) -> Result<Spectrum> {
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput("non-finite polynomial coefficient".into()));
    }
    let n = coeffs.len() - 1;
    let found = aberth_roots(coeffs, MAX_ITER);
    let max_residual = found
        .roots
        .iter()
        .map(|&z| eval_with_derivative(coeffs, z).0.norm() / z.norm().powi(n as i32).max(1.0))
        .fold(0.0, f64::max);
    let max_correction = found.corrections.iter().copied().fold(0.0, f64::max);
    let mut magnitudes: Vec<f64> = found.roots.iter().map(|z| z.norm()).collect();
    magnitudes.sort_by(|a, b| b.total_cmp(a));
    let mut roots = found.roots;
    roots.sort_by(|a, b| b.norm().total_cmp(&a.norm()).then(b.im.total_cmp(&a.im)));
    let spectrum = Spectrum {
        spectral_radius: magnitudes.first().copied().unwrap_or(0.0),
        magnitudes,
        roots,
        max_residual,
        max_correction,
        iterations: found.iterations,
    };
    if spectrum.roots.len() != n
        || max_residual.is_nan()
        || max_residual > 1e-6
        || max_correction.is_nan()
        || max_correction > tol
    {
        return Err(Error::NonConvergence {
            best: Box::new(spectrum),
        });
    }
    Ok(spectrum)
}

/// Gamma coefficients whose companion polynomial has the given roots.
/// Complex roots must come in conjugate pairs.
pub fn gamma_from_roots(roots: &[Complex64]) -> Vec<f64> {
    // Expand prod (z - r) into descending coefficients [1, e_1, ..., e_n].
    let mut poly = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); poly.len() + 1];
        for (d, &c) in poly.iter().enumerate() {
            next[d] += c;
            next[d + 1] -= c * r;
        }
        poly = next;
    }
    (1..poly.len())
        .map(|h| if h == 1 { -poly[1].re - 1.0 } else { -poly[h].re })
        .collect()
}

/// Iterates `a[k] = a[k-1] + sum_h gamma_h a[k-h]` from an oldest-first
/// history of length `n_tau`, returning the `steps` new values.
pub fn simulate_active(gamma: &[f64], history: &[f64], steps: usize) -> Result<Vec<f64>> {
    let n = gamma.len();
    if history.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "history has {} days, gamma {n} lags",
            history.len()
        )));
    }
    let mut a = history.to_vec();
    for _ in 0..steps {
        let len = a.len();
        let mut next = a[len - 1];
        for h in 1..=n {
            next += gamma[h - 1] * a[len - h];
        }
        a.push(next);
    }
    Ok(a.split_off(n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayStability {
    pub k: usize,
    pub magnitudes: Vec<f64>,
    pub spectral_radius: f64,
    pub stable: bool,
    /// `1 - tol_margin - spectral_radius`; positive when stable.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub scope: StabilityScope,
    pub tol_margin: f64,
    pub days: Vec<DayStability>,
    /// First day of the trailing run of stable days, if the last day is
    /// stable.
    pub first_stable_day: Option<usize>,
}

impl StabilityReport {
    /// Days whose spectral radius is on the other side of 1 than the day
    /// before.
    pub fn crossings(&self) -> Vec<usize> {
        self.days
            .windows(2)
            .filter(|w| (w[0].spectral_radius > 1.0) != (w[1].spectral_radius > 1.0))
            .map(|w| w[1].k)
            .collect()
    }

    pub fn unstable_days(&self) -> impl Iterator<Item = usize> + '_ {
        self.days.iter().filter(|d| d.spectral_radius > 1.0).map(|d| d.k)
    }

    /// One row per root: `k,date,scope,rank,magnitude,spectral_radius,stable`,
    /// rank 1 being the largest magnitude. Dates come from `series`.
    pub fn write_csv<W: Write>(&self, out: W, series: &PandemicSeries, scope: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "date", "scope", "rank", "magnitude", "spectral_radius", "stable"])?;
        for d in &self.days {
            let date = series.date_of(d.k).to_string();
            for (rank, m) in d.magnitudes.iter().enumerate() {
                w.write_record([
                    d.k.to_string(),
                    date.clone(),
                    scope.to_string(),
                    (rank + 1).to_string(),
                    format!("{m:e}"),
                    format!("{:e}", d.spectral_radius),
                    d.stable.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// Per-day spectra for gains learned on consecutive days.
pub fn stability_timeline(
    gains: &[GainTensor],
    scope: &StabilityScope,
    tol_margin: f64,
    tol: f64,
) -> Result<StabilityReport> {
    if !(0.0..1.0).contains(&tol_margin) {
        return Err(Error::InvalidInput(format!("tol_margin {tol_margin} outside [0, 1)")));
    }
    if gains.windows(2).any(|w| w[1].day() != w[0].day() + 1) {
        return Err(Error::InvalidInput("gain days must be contiguous and ascending".into()));
    }
    let mut days = Vec::with_capacity(gains.len());
    for g in gains {
        let gamma = gamma_from_gains(g, scope)?;
        let spectrum = eigen_magnitudes(&companion_matrix(&gamma.gamma), tol)?;
        let limit = 1.0 - tol_margin;
        days.push(DayStability {
            k: g.day(),
            stable: spectrum.spectral_radius < limit,
            gap: limit - spectrum.spectral_radius,
            spectral_radius: spectrum.spectral_radius,
            magnitudes: spectrum.magnitudes,
        });
    }
    let first_stable_day = match days.iter().rposition(|d| !d.stable) {
        None => days.first().map(|d| d.k),
        Some(p) => days.get(p + 1).map(|d| d.k),
    };
    Ok(StabilityReport {
        scope: scope.clone(),
        tol_margin,
        days,
        first_stable_day,
    })
}
