//! M-step forecasts and their relative errors against recorded data.
//!
//! A forecast anchored at day `k0` stacks the recorded window ending at `k0`,
//! applies the propagator built from the day-`k0` gains `M` times, and reads
//! each region's newest state. Gains stay frozen over the horizon unless
//! `relearn_each_step` is set.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::RangeInclusive;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::betanet::{snap, window_features, BetaNet};
use crate::dynamics::{BlendedGains, BlockPropagator, GainMode, GainTensor, StackedState, StateVector};
use crate::error::{Error, Result};
use crate::learning::{learn_gains, LearnOptions};
use crate::timeseries::{Channel, PandemicSeries};

/// Scope label for the sum over all regions.
pub const NATIONAL_SCOPE: &str = "national";

#[derive(Debug, Clone)]
pub enum BetaSource {
    Fixed(f64),
    /// `beta` from the network on the anchor window; `threshold` snaps it
    /// to 0 or 1 at 0.5.
    Network {
        net: Arc<BetaNet>,
        threshold: bool,
    },
}

impl BetaSource {
    pub fn describe(&self) -> String {
        match self {
            Self::Fixed(b) => format!("fixed:{b}"),
            Self::Network { threshold: false, .. } => "network".into(),
            Self::Network { threshold: true, .. } => "network-threshold".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForecastMode {
    /// Self-gains only (`beta = 1`).
    Quarantined,
    /// Full coupling (`beta = 0`).
    Interstate,
    /// Both tensors, weighted by the configured beta source.
    Blended,
}

impl ForecastMode {
    pub fn gain_modes(self) -> &'static [GainMode] {
        match self {
            Self::Quarantined => &[GainMode::Quarantined],
            Self::Interstate => &[GainMode::Interstate],
            Self::Blended => &[GainMode::Quarantined, GainMode::Interstate],
        }
    }
}

/// Gains learned for one anchor day.
#[derive(Debug, Clone, PartialEq)]
pub struct DayGains {
    pub quarantined: Option<GainTensor>,
    pub interstate: Option<GainTensor>,
}

impl DayGains {
    pub fn learn(series: &PandemicSeries, k: usize, mode: ForecastMode, opts: &LearnOptions) -> Result<Self> {
        Self::from_provider(series, k, mode, &|s, k, m| Ok(learn_gains(s, k, m, opts)?.tensor))
    }

    pub fn from_provider(
        series: &PandemicSeries,
        k: usize,
        mode: ForecastMode,
        provider: &GainProvider<'_>,
    ) -> Result<Self> {
        let mut out = Self {
            quarantined: None,
            interstate: None,
        };
        for &m in mode.gain_modes() {
            let g = provider(series, k, m)?;
            match m {
                GainMode::Quarantined => out.quarantined = Some(g),
                GainMode::Interstate => out.interstate = Some(g),
            }
        }
        Ok(out)
    }

    fn any(&self) -> &GainTensor {
        self.quarantined
            .as_ref()
            .or(self.interstate.as_ref())
            .expect("at least one tensor")
    }

    pub fn n_tau(&self) -> usize {
        self.any().n_tau()
    }

    /// Latest day any tensor was learned on.
    pub fn day(&self) -> usize {
        [&self.quarantined, &self.interstate]
            .into_iter()
            .flatten()
            .map(GainTensor::day)
            .max()
            .unwrap_or(0)
    }
}

/// Supplies the gain tensor of a given mode for a day of a series.
pub type GainProvider<'a> = dyn Fn(&PandemicSeries, usize, GainMode) -> Result<GainTensor> + Sync + 'a;

#[derive(Debug, Clone)]
pub struct ForecastConfig {
    pub mode: ForecastMode,
    pub learn: LearnOptions,
    pub beta: BetaSource,
    pub relearn_each_step: bool,
    /// Adds a row summing all regions when the series has more than one.
    pub national: bool,
}

impl ForecastConfig {
    pub fn new(mode: ForecastMode, learn: LearnOptions) -> Self {
        let beta = match mode {
            ForecastMode::Quarantined => BetaSource::Fixed(1.0),
            ForecastMode::Interstate | ForecastMode::Blended => BetaSource::Fixed(0.0),
        };
        Self {
            mode,
            learn,
            beta,
            relearn_each_step: false,
            national: true,
        }
    }
}

/// Predictions for horizons `1..=horizon` from one anchor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForecastRun {
    pub k0: usize,
    pub horizon: usize,
    pub beta: f64,
    pub beta_source: String,
    /// Day the gains were learned on.
    pub gains_day: usize,
    /// `predictions[m - 1][i]` is region `i` at day `k0 + m`.
    pub predictions: Vec<Vec<StateVector>>,
}

impl ForecastRun {
    pub fn at(&self, m: usize) -> &[StateVector] {
        &self.predictions[m - 1]
    }
}

fn resolve_beta(
    series: &PandemicSeries,
    k0: usize,
    n_tau: usize,
    mode: ForecastMode,
    source: &BetaSource,
) -> Result<f64> {
    match mode {
        ForecastMode::Quarantined => Ok(1.0),
        ForecastMode::Interstate => Ok(0.0),
        ForecastMode::Blended => match source {
            BetaSource::Fixed(b) => Ok(*b),
            BetaSource::Network { net, threshold } => {
                let beta = net.forward(&window_features(&series.window(k0, n_tau)?))?;
                Ok(if *threshold { snap(beta) } else { beta })
            }
        },
    }
}

fn propagator(gains: &DayGains, beta: f64) -> Result<BlockPropagator> {
    let blend = match (&gains.quarantined, &gains.interstate) {
        (Some(q), Some(s)) => BlendedGains::new(q, s, beta)?,
        (Some(q), None) => BlendedGains::single(q, 1.0)?,
        (None, Some(s)) => BlendedGains::single(s, 0.0)?,
        (None, None) => return Err(Error::InvalidInput("no gains supplied".into())),
    };
    BlockPropagator::from_blend(&blend)
}

fn check_anchor(series: &PandemicSeries, k0: usize, horizon: usize, n_tau: usize) -> Result<()> {
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon must be at least 1".into()));
    }
    if horizon > n_tau {
        return Err(Error::HorizonTooLong { horizon, n_tau });
    }
    if k0 < n_tau {
        return Err(Error::InsufficientHistory { k: k0, min_k: n_tau });
    }
    if k0 > series.days() {
        return Err(Error::out_of_range("anchor day", k0, n_tau, series.days()));
    }
    Ok(())
}

/// Forecasts days `k0 + 1 ..= k0 + horizon` with gains held fixed.
pub fn predict_m_step(
    series: &PandemicSeries,
    k0: usize,
    horizon: usize,
    gains: &DayGains,
    mode: ForecastMode,
    beta_source: &BetaSource,
) -> Result<ForecastRun> {
    let n = gains.n_tau();
    check_anchor(series, k0, horizon, n)?;
    if gains.day() > k0 {
        return Err(Error::InvalidInput(format!(
            "gains from day {} would look ahead of anchor {k0}",
            gains.day()
        )));
    }
    let beta = resolve_beta(series, k0, n, mode, beta_source)?;
    let l = propagator(gains, beta)?;
    let mut y = StackedState::stack(&series.window(k0, n)?);
    let mut predictions = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        y = l.apply(&y)?;
        predictions.push((0..series.regions()).map(|i| y.newest(i)).collect());
    }
    Ok(ForecastRun {
        k0,
        horizon,
        beta,
        beta_source: beta_source.describe(),
        gains_day: gains.day(),
        predictions,
    })
}

/// Like [`predict_m_step`], but relearns gains after every step on the
/// recorded data extended with the forecasts so far.
fn predict_relearning(
    series: &PandemicSeries,
    k0: usize,
    horizon: usize,
    cfg: &ForecastConfig,
    provider: &GainProvider<'_>,
) -> Result<ForecastRun> {
    let n = cfg.learn.n_tau;
    check_anchor(series, k0, horizon, n)?;
    let mut extended = series.truncate(k0)?;
    let first = DayGains::from_provider(&extended, k0, cfg.mode, provider)?;
    let beta = resolve_beta(series, k0, n, cfg.mode, &cfg.beta)?;
    let mut gains = first;
    let mut predictions = Vec::with_capacity(horizon);
    for m in 1..=horizon {
        let day = k0 + m - 1;
        if m > 1 {
            gains = DayGains::from_provider(&extended, day, cfg.mode, provider)?;
        }
        let y = StackedState::stack(&extended.window(day, n)?);
        let next = propagator(&gains, beta)?.apply(&y)?;
        let states: Vec<StateVector> = (0..series.regions()).map(|i| next.newest(i)).collect();
        extended = extended.with_appended_day(&clamp_nonnegative(&states))?;
        predictions.push(states);
    }
    Ok(ForecastRun {
        k0,
        horizon,
        beta,
        beta_source: cfg.beta.describe(),
        gains_day: k0,
        predictions,
    })
}

// The series type rejects negative totals; forecasts can dip below zero.
fn clamp_nonnegative(states: &[StateVector]) -> Vec<StateVector> {
    states
        .iter()
        .map(|x| StateVector::from_array(x.to_array().map(|v| v.max(0.0))))
        .collect()
}

/// One cell of the error report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    /// Anchor day.
    pub k: usize,
    pub date: chrono::NaiveDate,
    pub horizon: usize,
    pub scope: String,
    pub channel: Channel,
    pub predicted: f64,
    pub actual: f64,
    /// `(predicted - actual) / actual`; `None` when `actual` is 0.
    pub rel_error: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Sorted by anchor, horizon, scope (regions in registry order, then the
    /// national sum) and channel.
    pub rows: Vec<ErrorRow>,
}

pub fn relative_error(predicted: f64, actual: f64) -> Option<f64> {
    if actual == 0.0 {
        None
    } else {
        Some((predicted - actual) / actual)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:e}"))
}

impl ErrorReport {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows for `scope`, in report order.
    pub fn scope<'a>(&'a self, scope: &'a str) -> impl Iterator<Item = &'a ErrorRow> + 'a {
        self.rows.iter().filter(move |r| r.scope == scope)
    }

    /// `k,date,horizon,scope,channel,predicted,actual,rel_error`; undefined
    /// errors are empty fields.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "k",
            "date",
            "horizon",
            "scope",
            "channel",
            "predicted",
            "actual",
            "rel_error",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.k.to_string(),
                r.date.to_string(),
                r.horizon.to_string(),
                r.scope.clone(),
                r.channel.name().to_string(),
                format!("{:e}", r.predicted),
                format!("{:e}", r.actual),
                fmt_opt(r.rel_error),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Long format keyed by target day: one row per (series, value).
    pub fn write_plot_csv<W: Write>(&self, out: W, series: &PandemicSeries) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "target_k",
            "target_date",
            "horizon",
            "scope",
            "channel",
            "kind",
            "value",
        ])?;
        for r in &self.rows {
            let target = r.k + r.horizon;
            for (kind, v) in [("predicted", r.predicted), ("actual", r.actual)] {
                w.write_record([
                    target.to_string(),
                    series.date_of(target).to_string(),
                    r.horizon.to_string(),
                    r.scope.clone(),
                    r.channel.name().to_string(),
                    kind.to_string(),
                    format!("{v:e}"),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn rows_for_run(series: &PandemicSeries, run: &ForecastRun, national: bool) -> Vec<ErrorRow> {
    let mut rows = Vec::new();
    let date = series.date_of(run.k0);
    for m in 1..=run.horizon {
        let target = run.k0 + m;
        let mut scopes: Vec<(String, StateVector, StateVector)> = (0..series.regions())
            .map(|i| {
                let actual = series.trajectory(i)[target - 1];
                (series.registry().code(i).to_string(), run.at(m)[i], actual)
            })
            .collect();
        if national && series.regions() > 1 {
            let sum = scopes
                .iter()
                .fold((StateVector::zero(), StateVector::zero()), |(p, a), s| {
                    (p + s.1, a + s.2)
                });
            scopes.push((NATIONAL_SCOPE.to_string(), sum.0, sum.1));
        }
        for (scope, p, a) in scopes {
            for c in Channel::ALL {
                let (pv, av) = (p.to_array()[c.index()], a.to_array()[c.index()]);
                rows.push(ErrorRow {
                    k: run.k0,
                    date,
                    horizon: m,
                    scope: scope.clone(),
                    channel: c,
                    predicted: pv,
                    actual: av,
                    rel_error: relative_error(pv, av),
                });
            }
        }
    }
    rows
}

/// Learns gains on every anchor in `ks` and scores horizons against the
/// recorded data. Anchors whose target day lies past the series end are
/// skipped for that horizon.
pub fn rolling_evaluate(
    series: &PandemicSeries,
    ks: RangeInclusive<usize>,
    horizons: &[usize],
    cfg: &ForecastConfig,
) -> Result<ErrorReport> {
    let opts = cfg.learn.clone();
    rolling_evaluate_with(series, ks, horizons, cfg, &move |s, k, m| {
        Ok(learn_gains(s, k, m, &opts)?.tensor)
    })
}

/// [`rolling_evaluate`] with gains supplied by `provider` (e.g. a cache).
/// Anchors are processed in parallel; the report does not depend on the
/// number of worker threads.
pub fn rolling_evaluate_with(
    series: &PandemicSeries,
    ks: RangeInclusive<usize>,
    horizons: &[usize],
    cfg: &ForecastConfig,
    provider: &GainProvider<'_>,
) -> Result<ErrorReport> {
    let n = cfg.learn.n_tau;
    let mut horizons = horizons.to_vec();
    horizons.sort_unstable();
    horizons.dedup();
    let max_h = *horizons
        .last()
        .ok_or_else(|| Error::InvalidInput("no horizons".into()))?;
    if horizons[0] == 0 {
        return Err(Error::InvalidInput("horizons start at 1".into()));
    }
    if max_h > n {
        return Err(Error::HorizonTooLong {
            horizon: max_h,
            n_tau: n,
        });
    }
    let min_k = cfg.learn.first_learnable_day();
    if *ks.start() < min_k {
        return Err(Error::InsufficientHistory { k: *ks.start(), min_k });
    }
    if let BetaSource::Fixed(b) = cfg.beta {
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::InvalidInput(format!("beta = {b} is outside [0, 1]")));
        }
    }
    let anchors: Vec<usize> = ks.filter(|&k| k + horizons[0] <= series.days()).collect();
    let per_anchor: Vec<Vec<ErrorRow>> = anchors
        .par_iter()
        .map(|&k0| {
            let reach = max_h.min(series.days() - k0);
            let run = if cfg.relearn_each_step {
                predict_relearning(series, k0, reach, cfg, provider)?
            } else {
                let gains = DayGains::from_provider(series, k0, cfg.mode, provider)?;
                predict_m_step(series, k0, reach, &gains, cfg.mode, &cfg.beta)?
            };
            let mut rows = rows_for_run(series, &run, cfg.national);
            rows.retain(|r| horizons.binary_search(&r.horizon).is_ok());
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(ErrorReport {
        rows: per_anchor.into_iter().flatten().collect(),
    })
}

/// Statistics for one (scope, horizon, channel) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scope: String,
    pub horizon: usize,
    pub channel: Channel,
    pub defined: usize,
    pub undefined: usize,
    pub max_abs: Option<f64>,
    pub mean_abs: Option<f64>,
    pub fraction_below: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub threshold: f64,
    pub groups: Vec<SummaryRow>,
}

impl Summary {
    pub fn group(&self, scope: &str, horizon: usize, channel: Channel) -> Option<&SummaryRow> {
        self.groups
            .iter()
            .find(|g| g.scope == scope && g.horizon == horizon && g.channel == channel)
    }
}

/// Descriptive statistics of `|rel_error|`; undefined cells are counted but
/// excluded.
pub fn summarize(report: &ErrorReport, threshold: f64) -> Result<Summary> {
    if report.is_empty() {
        return Err(Error::EmptyReport);
    }
    // Keyed by first appearance so groups follow report order.
    let mut order: Vec<(String, usize, Channel)> = Vec::new();
    let mut groups: BTreeMap<usize, Vec<Option<f64>>> = BTreeMap::new();
    for r in &report.rows {
        let key = (r.scope.clone(), r.horizon, r.channel);
        let idx = match order.iter().position(|k| *k == key) {
            Some(p) => p,
            None => {
                order.push(key);
                order.len() - 1
            }
        };
        groups.entry(idx).or_default().push(r.rel_error);
    }
    let mut out = Vec::with_capacity(order.len());
    let mut keys: Vec<(usize, (String, usize, Channel))> = order.into_iter().enumerate().collect();
    keys.sort_by(|a, b| (a.1 .1, &a.1 .0, a.1 .2.index()).cmp(&(b.1 .1, &b.1 .0, b.1 .2.index())));
    for (idx, (scope, horizon, channel)) in keys {
        let cells = &groups[&idx];
        let defined: Vec<f64> = cells.iter().flatten().map(|e| e.abs()).collect();
        let n = defined.len();
        let (max_abs, mean_abs, fraction_below) = if n == 0 {
            (None, None, None)
        } else {
            let max = defined.iter().copied().fold(0.0, f64::max);
            let mean = defined.iter().sum::<f64>() / n as f64;
            let below = defined.iter().filter(|&&e| e < threshold).count() as f64 / n as f64;
            (Some(max), Some(mean), Some(below))
        };
        out.push(SummaryRow {
            scope,
            horizon,
            channel,
            defined: n,
            undefined: cells.len() - n,
            max_abs,
            mean_abs,
            fraction_below,
        });
    }
    Ok(Summary { threshold, groups: out })
}
