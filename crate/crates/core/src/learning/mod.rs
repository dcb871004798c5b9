//! Learning gains from a trailing window of recorded data.
//!
//! For a target day `k` and fit window `W_f`, every residual day
//! `kappa = k-W_f+1 ..= k` contributes one equation per (region, channel):
//! the recorded increment into `kappa` should equal the gains applied to
//! recorded active cases on days `kappa-1 ..= kappa-n_tau`. Increments are
//! clamped at zero since non-negative gains on non-negative regressors can
//! never produce a negative target.

mod nnls;

pub use nnls::{solve_nnls, NnlsOptions, NnlsProblem, NnlsSolution};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{GainMode, GainTensor};
use crate::error::{Error, Result};
use crate::timeseries::{Channel, PandemicSeries};

/// Per-channel residual weights (the diagonal of the weight matrix).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelWeights {
    pub cases: f64,
    pub deaths: f64,
    pub recoveries: f64,
}

impl Default for ChannelWeights {
    fn default() -> Self {
        Self {
            cases: 1.0,
            deaths: 1.0,
            recoveries: 1.0,
        }
    }
}

impl ChannelWeights {
    pub fn get(&self, c: Channel) -> f64 {
        match c {
            Channel::Cases => self.cases,
            Channel::Deaths => self.deaths,
            Channel::Recoveries => self.recoveries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnOptions {
    pub n_tau: usize,
    /// Residual days per fit; `None` means `n_tau`.
    pub fit_days: Option<usize>,
    pub weights: ChannelWeights,
    pub nnls: NnlsOptions,
}

impl Default for LearnOptions {
    fn default() -> Self {
        Self {
            n_tau: 14,
            fit_days: None,
            weights: ChannelWeights::default(),
            nnls: NnlsOptions::default(),
        }
    }
}

impl LearnOptions {
    pub fn with_n_tau(n_tau: usize) -> Self {
        Self {
            n_tau,
            ..Self::default()
        }
    }

    pub fn fit_days(&self) -> usize {
        self.fit_days.unwrap_or(self.n_tau)
    }

    /// Smallest day whose fit window stays inside the series.
    pub fn first_learnable_day(&self) -> usize {
        self.n_tau + self.fit_days()
    }

    fn validate(&self) -> Result<()> {
        if self.n_tau == 0 || self.fit_days() == 0 {
            return Err(Error::InvalidInput("n_tau and fit_days must be positive".into()));
        }
        for c in Channel::ALL {
            let w = self.weights.get(c);
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::InvalidInput(format!("weight for {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// One (region, channel) least-squares problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelProblem {
    pub region: usize,
    pub channel: Channel,
    pub problem: NnlsProblem,
    /// Fewer equations than unknowns.
    pub underdetermined: bool,
}

fn check_window(series: &PandemicSeries, k: usize, opts: &LearnOptions) -> Result<()> {
    opts.validate()?;
    let min_k = opts.first_learnable_day();
    if k > series.days() {
        return Err(Error::out_of_range("day", k, min_k, series.days()));
    }
    if k < min_k {
        return Err(Error::InsufficientHistory { k, min_k });
    }
    Ok(())
}

/// Clamped increments of region `i` for residual days `k-W_f+1 ..= k`.
fn responses(series: &PandemicSeries, i: usize, k: usize, fit_days: usize) -> [Vec<f64>; 3] {
    let mut out: [Vec<f64>; 3] = Default::default();
    for kappa in k + 1 - fit_days..=k {
        let u = (series.at(i, kappa) - series.at(i, kappa - 1)).to_array();
        for c in 0..3 {
            out[c].push(u[c].max(0.0));
        }
    }
    out
}

fn assemble(
    design: DMatrix<f64>,
    region: usize,
    targets: [Vec<f64>; 3],
    opts: &LearnOptions,
) -> Result<Vec<ChannelProblem>> {
    let underdetermined = design.nrows() < design.ncols();
    Channel::ALL
        .into_iter()
        .zip(targets)
        .map(|(channel, b)| {
            let w = DVector::from_element(b.len(), opts.weights.get(channel));
            Ok(ChannelProblem {
                region,
                channel,
                problem: NnlsProblem::new(design.clone(), DVector::from_vec(b), w)?,
                underdetermined,
            })
        })
        .collect()
}

/// Problems for intra-region gains: columns are lags `h = 1..=n_tau` of the
/// region's own active cases.
pub fn build_quarantined_problems(
    series: &PandemicSeries,
    k: usize,
    opts: &LearnOptions,
) -> Result<Vec<ChannelProblem>> {
    check_window(series, k, opts)?;
    let (n, wf) = (opts.n_tau, opts.fit_days());
    let mut out = Vec::with_capacity(series.regions() * 3);
    for i in 0..series.regions() {
        let design = DMatrix::from_fn(wf, n, |row, col| {
            let kappa = k + 1 - wf + row;
            series.at(i, kappa - (col + 1)).active()
        });
        out.extend(assemble(design, i, responses(series, i, k, wf), opts)?);
    }
    Ok(out)
}

/// Problems for inter-region gains: columns are `(source j, lag h)` with
/// `j` major, so column `j * n_tau + h - 1` holds `a_j[kappa - h]`.
pub fn build_interstate_problems(
    series: &PandemicSeries,
    k: usize,
    opts: &LearnOptions,
) -> Result<Vec<ChannelProblem>> {
    check_window(series, k, opts)?;
    let (n, wf, r) = (opts.n_tau, opts.fit_days(), series.regions());
    let design = DMatrix::from_fn(wf, r * n, |row, col| {
        let kappa = k + 1 - wf + row;
        let (j, h) = (col / n, col % n + 1);
        series.at(j, kappa - h).active()
    });
    if wf < r * n {
        log::debug!("day {k}: {wf} equations for {} unknowns per channel", r * n);
    }
    let mut out = Vec::with_capacity(r * 3);
    for i in 0..r {
        out.extend(assemble(design.clone(), i, responses(series, i, k, wf), opts)?);
    }
    Ok(out)
}

/// Aggregated solver diagnostics for one learned tensor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearnDiagnostics {
    pub problems: usize,
    pub underdetermined: usize,
    pub ill_conditioned: usize,
    pub not_converged: usize,
    pub max_kkt_violation: f64,
    pub max_residual_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedGains {
    pub tensor: GainTensor,
    pub diagnostics: LearnDiagnostics,
}

/// Learns a [`GainTensor`] for day `k`, reading only days `<= k`.
pub fn learn_gains(series: &PandemicSeries, k: usize, mode: GainMode, opts: &LearnOptions) -> Result<LearnedGains> {
    let problems = match mode {
        GainMode::Quarantined => build_quarantined_problems(series, k, opts)?,
        GainMode::Interstate => build_interstate_problems(series, k, opts)?,
    };
    let n = opts.n_tau;
    let mut tensor = GainTensor::zeros(series.regions(), n, k, mode);
    let mut diag = LearnDiagnostics::default();
    for cp in &problems {
        let sol = solve_nnls(&cp.problem, &opts.nnls)?;
        diag.problems += 1;
        diag.underdetermined += usize::from(cp.underdetermined);
        diag.ill_conditioned += usize::from(sol.ill_conditioned);
        diag.not_converged += usize::from(!sol.converged);
        diag.max_kkt_violation = diag.max_kkt_violation.max(sol.kkt_violation);
        diag.max_residual_norm = diag.max_residual_norm.max(sol.residual_norm);
        let c = cp.channel.index();
        for (col, &v) in sol.x.iter().enumerate() {
            let (j, h) = match mode {
                GainMode::Quarantined => (cp.region, col + 1),
                GainMode::Interstate => (col / n, col % n + 1),
            };
            let mut k3 = tensor.get(cp.region, j, h);
            k3[c] = v;
            tensor.set(cp.region, j, h, k3)?;
        }
    }
    if diag.not_converged > 0 {
        log::warn!("day {k}: {} NNLS problems hit the iteration cap", diag.not_converged);
    }
    Ok(LearnedGains {
        tensor,
        diagnostics: diag,
    })
}
