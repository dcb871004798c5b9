//! The subcommands. Each resolves its inputs, does the work on a sized
//! worker pool and writes reports under the output directory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use chrono::NaiveDate;
use epiflow_core::betanet::{self, LabelProtocol};
use epiflow_core::forecast::{self, DayGains, NATIONAL_SCOPE};
use epiflow_core::learning::learn_gains;
use epiflow_core::stability::{stability_timeline, StabilityScope};
use epiflow_core::timeseries::{ingest_csv, Ingested};
use epiflow_core::{
    BetaNet, BetaSource, ErrorReport, ForecastConfig, ForecastMode, GainMode, IngestOptions, PandemicSeries,
    RegionRegistry,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::cache::GainCache;
use crate::config::{BetaSpec, RunConfig};

/// What the reports cover.
#[derive(Debug, Clone, PartialEq)]
pub enum Scope {
    /// The sum over all regions, modelled as one region.
    National,
    /// Every region of the full model, plus their sum.
    All,
    /// One region of the full model.
    Region(usize, String),
}

impl Scope {
    fn parse(s: &str, registry: &RegionRegistry) -> Result<Self> {
        if let Some(i) = registry.index_of(s) {
            return Ok(Self::Region(i, s.to_string()));
        }
        match s {
            "national" | "US" => Ok(Self::National),
            "all" => Ok(Self::All),
            _ => bail!("scope `{s}` is neither `national`, `all` nor a region in the data"),
        }
    }

    fn keeps(&self, row_scope: &str) -> bool {
        match self {
            Self::National | Self::All => true,
            Self::Region(_, code) => row_scope == code,
        }
    }
}

/// Ingested data plus everything derived from the configuration.
pub struct Run {
    pub cfg: RunConfig,
    pub ingested: Ingested,
    /// The series the models are fitted to (aggregated for national scope).
    pub series: PandemicSeries,
    pub scope: Scope,
    /// Relearn gains even when cached.
    pub force: bool,
    pool: rayon::ThreadPool,
}

impl Run {
    pub fn open(cfg: RunConfig, force: bool) -> Result<Self> {
        cfg.validate()?;
        let ingested = ingest(&cfg)?;
        let full = &ingested.series;
        if full.recoveries_synthetic() {
            log::warn!("recoveries column absent: recoveries are zero-filled");
        }
        let scope = Scope::parse(&cfg.scope, full.registry())?;
        let series = match scope {
            Scope::National if full.regions() > 1 => full.aggregate(NATIONAL_SCOPE),
            _ => full.clone(),
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs.unwrap_or(0))
            .build()
            .context("building worker pool")?;
        std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
        Ok(Self {
            cfg,
            ingested,
            series,
            scope,
            force,
            pool,
        })
    }

    fn out(&self, name: &str) -> std::path::PathBuf {
        self.cfg.out.join(name)
    }

    fn first_learnable_day(&self) -> usize {
        self.cfg.learn_options().first_learnable_day()
    }

    /// `from ..= to` in day numbers, defaulting to the whole learnable span.
    fn day_range(&self, default_from: usize, default_to: usize) -> Result<(usize, usize)> {
        let from = match self.cfg.from {
            Some(d) => d.resolve(&self.series)?,
            None => default_from,
        };
        let to = match self.cfg.to {
            Some(d) => d.resolve(&self.series)?,
            None => default_to,
        };
        let min = self.first_learnable_day();
        ensure!(
            from >= min,
            "day range starts at {from}, but the first learnable day is k = {min} (n_tau + fit_days)"
        );
        ensure!(from <= to, "empty day range {from} ..= {to}");
        ensure!(
            to <= self.series.days(),
            "day {to} is past the last day {}",
            self.series.days()
        );
        Ok((from, to))
    }

    fn gain_cache(&self) -> Result<GainCache> {
        GainCache::open(&self.cfg.out, &self.series, &self.cfg.learn_options(), self.force)
    }

    fn beta_source(&self) -> Result<BetaSource> {
        if self.cfg.mode != ForecastMode::Blended {
            return Ok(BetaSource::Fixed(if self.cfg.mode == ForecastMode::Quarantined {
                1.0
            } else {
                0.0
            }));
        }
        let net = match &self.cfg.beta {
            BetaSpec::Fixed(b) => return Ok(BetaSource::Fixed(*b)),
            BetaSpec::Network(path) => BetaNet::load(path).with_context(|| format!("loading {}", path.display()))?,
            BetaSpec::Train => self.train_network()?.0,
        };
        ensure!(
            net.regions() == self.series.regions() && net.n_tau() == self.cfg.n_tau,
            "network expects {} regions x {} days, the run has {} x {}",
            net.regions(),
            net.n_tau(),
            self.series.regions(),
            self.cfg.n_tau
        );
        Ok(BetaSource::Network {
            net: Arc::new(net),
            threshold: self.cfg.threshold,
        })
    }

    fn forecast_config(&self, beta: BetaSource) -> ForecastConfig {
        ForecastConfig {
            mode: self.cfg.mode,
            learn: self.cfg.learn_options(),
            beta,
            relearn_each_step: self.cfg.relearn_each_step,
            national: self.scope == Scope::All,
        }
    }

    /// Trains on the label protocol and saves the network as `betanet.json`.
    fn train_network(&self) -> Result<(BetaNet, TrainSummary)> {
        let protocol = self.cfg.label_protocol();
        let data = protocol.dataset(&self.series, self.cfg.n_tau)?;
        ensure!(!data.is_empty(), "no labeled windows fall inside the series");
        let positives = data.iter().filter(|w| w.label == 1.0).count();
        let cfg = self.cfg.train_config();
        log::info!(
            "training beta network on {} windows ({positives} labeled 1)",
            data.len()
        );
        let outcome = self
            .pool
            .install(|| betanet::train(&data, self.series.regions(), self.cfg.n_tau, &cfg))?;
        outcome.net.save(&self.out("betanet.json"))?;
        let mut w = csv_out(&self.out("losses.csv"))?;
        writeln!(w, "epoch,loss")?;
        for (e, l) in outcome.losses.iter().enumerate() {
            writeln!(w, "{e},{l:e}")?;
        }
        w.flush()?;
        let summary = TrainSummary {
            windows: data.len(),
            labeled_one: positives,
            initial_loss: outcome.losses[0],
            final_loss: *outcome.losses.last().expect("initial loss is recorded"),
            train_accuracy: outcome.net.accuracy(&data)?,
            protocol,
        };
        log::info!(
            "loss {:.4e} -> {:.4e}, training accuracy {:.3}",
            summary.initial_loss,
            summary.final_loss,
            summary.train_accuracy
        );
        Ok((outcome.net, summary))
    }

    fn evaluate(&self, from: usize, to: usize, beta: BetaSource) -> Result<ErrorReport> {
        let fcfg = self.forecast_config(beta);
        let mut report = if self.cfg.relearn_each_step {
            // Relearning fits extended series, which the cache does not hold.
            let opts = fcfg.learn.clone();
            self.pool.install(|| {
                forecast::rolling_evaluate_with(&self.series, from..=to, self.cfg.horizons(), &fcfg, &|s, k, m| {
                    Ok(learn_gains(s, k, m, &opts)?.tensor)
                })
            })?
        } else {
            let cache = self.gain_cache()?;
            let report = self.pool.install(|| {
                forecast::rolling_evaluate_with(&self.series, from..=to, self.cfg.horizons(), &fcfg, &|s, k, m| {
                    cache.get(s, k, m).map_err(core_error)
                })
            })?;
            log::info!("gain cache: {} hits, {} learned", cache.hits(), cache.misses());
            report
        };
        report.rows.retain(|r| self.scope.keeps(&r.scope));
        ensure!(
            !report.is_empty(),
            "no anchor in {from} ..= {to} has a target day inside the series"
        );
        Ok(report)
    }

    fn write_error_reports(&self, report: &ErrorReport) -> Result<forecast::Summary> {
        report.write_csv(csv_out(&self.out("errors.csv"))?)?;
        report.write_plot_csv(csv_out(&self.out("plot.csv"))?, &self.series)?;
        let summary = forecast::summarize(report, self.cfg.error_threshold)?;
        write_json(&self.out("summary.json"), &summary)?;
        for g in &summary.groups {
            log::info!(
                "{} M={} {}: {} defined, max |e| = {}, share below {} = {}",
                g.scope,
                g.horizon,
                g.channel.name(),
                g.defined,
                g.max_abs.map_or("n/a".into(), |v| format!("{v:.3e}")),
                summary.threshold,
                g.fraction_below.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
        }
        Ok(summary)
    }

    /// Logs how far a fixed-beta one-step forecast is from the matching
    /// mix of the two endpoint forecasts; the model is affine in beta.
    fn blend_spot_check(&self, k0: usize, beta: f64) -> Result<()> {
        let cache = self.gain_cache()?;
        let gains = DayGains {
            quarantined: Some(cache.get(&self.series, k0, GainMode::Quarantined)?),
            interstate: Some(cache.get(&self.series, k0, GainMode::Interstate)?),
        };
        let at = |b: f64| -> Result<Vec<f64>> {
            let run = forecast::predict_m_step(
                &self.series,
                k0,
                1,
                &gains,
                ForecastMode::Blended,
                &BetaSource::Fixed(b),
            )?;
            Ok(run.at(1).iter().flat_map(|s| s.to_array()).collect())
        };
        let (p, p1, p0) = (at(beta)?, at(1.0)?, at(0.0)?);
        let dev = p
            .iter()
            .zip(p1.iter().zip(&p0))
            .map(|(v, (a, b))| (v - (beta * a + (1.0 - beta) * b)).abs() / v.abs().max(1.0))
            .fold(0.0, f64::max);
        log::info!("blend check at k = {k0}: beta = {beta} lies between the fixed:1 and fixed:0 runs, max relative deviation {dev:.2e}");
        Ok(())
    }
}

/// Errors from the core library inside a gain provider.
fn core_error(e: anyhow::Error) -> epiflow_core::Error {
    match e.downcast::<epiflow_core::Error>() {
        Ok(e) => e,
        Err(e) => epiflow_core::Error::InvalidInput(format!("{e:#}")),
    }
}

fn ingest(cfg: &RunConfig) -> Result<Ingested> {
    let registry = cfg
        .regions
        .as_ref()
        .map(|r| RegionRegistry::from_codes(r.iter().cloned()))
        .transpose()?;
    let opts = IngestOptions {
        schema: cfg.schema.clone(),
        epoch: cfg.epoch,
        registry,
    };
    let ingested = ingest_csv(cfg.data(), &opts).with_context(|| format!("ingesting {}", cfg.data().display()))?;
    let r = &ingested.report;
    log::info!(
        "{} regions x {} days from {} ({} rows)",
        r.regions,
        r.days,
        r.epoch,
        r.rows_read
    );
    Ok(ingested)
}

fn csv_out(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

/// Records the resolved configuration of `command` in `provenance.json`,
/// keeping the entries of other commands run into the same directory.
pub fn write_provenance(out: &Path, command: &str, cfg: &RunConfig, dataset_hash: Option<&str>) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("provenance.json");
    let mut runs: BTreeMap<String, Value> = std::fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str::<Value>(&t).ok())
        .and_then(|v| v.get("runs").cloned())
        .and_then(|v| serde_json::from_value(v).ok())
        .unwrap_or_default();
    runs.insert(
        command.to_string(),
        json!({ "config": cfg, "dataset_sha256": dataset_hash }),
    );
    let doc = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "core_version": epiflow_core::VERSION,
        "runs": runs,
    });
    write_json(&path, &doc)
}

/// Outcome of a command: warnings map to a distinct exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Clean,
    Warnings,
}

pub fn ingest_cmd(cfg: RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let ingested = match ingest(&cfg) {
        Ok(i) => i,
        Err(e) => {
            write_json(&cfg.out.join("validation.json"), &json!({ "error": format!("{e:#}") }))?;
            write_provenance(&cfg.out, "ingest", &cfg, None)?;
            return Err(e);
        }
    };
    ingested.series.export_csv(&cfg.out.join("dataset.csv"))?;
    write_json(&cfg.out.join("validation.json"), &ingested.report)?;
    write_provenance(&cfg.out, "ingest", &cfg, Some(&ingested.series.content_hash()))?;
    let r = &ingested.report;
    if r.has_warnings() {
        log::warn!(
            "{} duplicate rows, {} negative active counts, {} clamped increments",
            r.duplicate_rows.len(),
            r.negative_active.len(),
            r.clamped_increments.len()
        );
        return Ok(Outcome::Warnings);
    }
    Ok(Outcome::Clean)
}

pub fn learn_cmd(cfg: RunConfig, force: bool) -> Result<Outcome> {
    let run = Run::open(cfg, force)?;
    let (from, to) = run.day_range(run.first_learnable_day(), run.series.days())?;
    let cache = run.gain_cache()?;
    let modes = run.cfg.mode.gain_modes();
    run.pool.install(|| {
        (from..=to)
            .into_par_iter()
            .try_for_each(|k| modes.iter().try_for_each(|&m| cache.get(&run.series, k, m).map(drop)))
    })?;
    log::info!("gain cache: {} hits, {} learned", cache.hits(), cache.misses());
    let index = json!({
        "scope": run.cfg.scope,
        "from": from,
        "to": to,
        "modes": modes.iter().map(|m| m.name()).collect::<Vec<_>>(),
        "directory": cache.dir().strip_prefix(&run.cfg.out).unwrap_or(cache.dir()),
    });
    write_json(&run.out("learn.json"), &index)?;
    write_provenance(
        &run.cfg.out,
        "learn",
        &run.cfg,
        Some(&run.ingested.series.content_hash()),
    )?;
    Ok(Outcome::Clean)
}

pub fn predict_cmd(cfg: RunConfig, force: bool) -> Result<Outcome> {
    let run = Run::open(cfg, force)?;
    let last = run.series.days();
    let (from, to) = run.day_range(last.max(run.first_learnable_day()), last)?;
    let beta = run.beta_source()?;
    let horizon = *run.cfg.horizons().iter().max().expect("validated");
    let cache = run.gain_cache()?;
    let runs = run.pool.install(|| {
        (from..=to)
            .into_par_iter()
            .map(|k0| -> Result<forecast::ForecastRun> {
                let gains = DayGains::from_provider(&run.series, k0, run.cfg.mode, &|s, k, m| {
                    cache.get(s, k, m).map_err(core_error)
                })?;
                Ok(forecast::predict_m_step(
                    &run.series,
                    k0,
                    horizon,
                    &gains,
                    run.cfg.mode,
                    &beta,
                )?)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut w = csv_out(&run.out("predictions.csv"))?;
    writeln!(
        w,
        "k,date,horizon,target_k,target_date,scope,beta,cases,deaths,recoveries"
    )?;
    let series = &run.series;
    for r in &runs {
        for &m in run.cfg.horizons() {
            let target = r.k0 + m;
            let target_date = series.epoch() + chrono::Days::new(target as u64 - 1);
            let mut rows: Vec<(String, epiflow_core::StateVector)> = (0..series.regions())
                .map(|i| (series.registry().code(i).to_string(), r.at(m)[i]))
                .collect();
            if run.scope == Scope::All && series.regions() > 1 {
                let sum = r.at(m).iter().fold(epiflow_core::StateVector::zero(), |a, &b| a + b);
                rows.push((NATIONAL_SCOPE.to_string(), sum));
            }
            for (scope, s) in rows.into_iter().filter(|(s, _)| run.scope.keeps(s)) {
                writeln!(
                    w,
                    "{},{},{m},{target},{target_date},{scope},{:e},{:e},{:e},{:e}",
                    r.k0,
                    series.date_of(r.k0),
                    r.beta,
                    s.cases,
                    s.deaths,
                    s.recoveries
                )?;
            }
        }
    }
    w.flush()?;
    log::info!("gain cache: {} hits, {} learned", cache.hits(), cache.misses());
    write_provenance(
        &run.cfg.out,
        "predict",
        &run.cfg,
        Some(&run.ingested.series.content_hash()),
    )?;
    Ok(Outcome::Clean)
}

pub fn eval_cmd(cfg: RunConfig, force: bool) -> Result<Outcome> {
    let run = Run::open(cfg, force)?;
    let (from, to) = run.day_range(run.first_learnable_day(), run.series.days())?;
    let beta = run.beta_source()?;
    if let (ForecastMode::Blended, BetaSource::Fixed(b)) = (run.cfg.mode, &beta) {
        run.blend_spot_check(from, *b)?;
    }
    let report = run.evaluate(from, to, beta)?;
    run.write_error_reports(&report)?;
    write_provenance(
        &run.cfg.out,
        "eval",
        &run.cfg,
        Some(&run.ingested.series.content_hash()),
    )?;
    Ok(Outcome::Clean)
}

#[derive(Serialize)]
struct DayRef {
    k: usize,
    date: NaiveDate,
}

#[derive(Serialize)]
struct StabilitySummary {
    scope: String,
    tol_margin: f64,
    from: usize,
    to: usize,
    /// First day of the trailing run of stable days.
    first_stable_day: Option<DayRef>,
    /// Days whose spectral radius crosses 1 relative to the day before.
    crossings: Vec<DayRef>,
    unstable_days: usize,
    max_spectral_radius: f64,
    max_spectral_radius_day: usize,
}

pub fn stability_cmd(cfg: RunConfig, force: bool) -> Result<Outcome> {
    let run = Run::open(cfg, force)?;
    let (from, to) = run.day_range(run.first_learnable_day(), run.series.days())?;
    let (scope, label) = match &run.scope {
        Scope::National => (StabilityScope::National, NATIONAL_SCOPE.to_string()),
        Scope::Region(i, code) => (StabilityScope::Region(*i), code.clone()),
        Scope::All => bail!("stability needs `--scope national` or a single region"),
    };
    let mode = if run.cfg.mode == ForecastMode::Interstate {
        GainMode::Interstate
    } else {
        GainMode::Quarantined
    };
    let cache = run.gain_cache()?;
    let gains = run.pool.install(|| {
        (from..=to)
            .into_par_iter()
            .map(|k| cache.get(&run.series, k, mode))
            .collect::<Result<Vec<_>>>()
    })?;
    log::info!("gain cache: {} hits, {} learned", cache.hits(), cache.misses());
    let report = run
        .pool
        .install(|| stability_timeline(&gains, &scope, run.cfg.tol_margin, run.cfg.root_tol))?;
    report.write_csv(csv_out(&run.out("stability.csv"))?, &run.series, &label)?;
    let day = |k: usize| DayRef {
        k,
        date: run.series.date_of(k),
    };
    let peak = report
        .days
        .iter()
        .max_by(|a, b| a.spectral_radius.total_cmp(&b.spectral_radius))
        .expect("non-empty range");
    let summary = StabilitySummary {
        scope: label,
        tol_margin: report.tol_margin,
        from,
        to,
        first_stable_day: report.first_stable_day.map(day),
        crossings: report.crossings().into_iter().map(day).collect(),
        unstable_days: report.unstable_days().count(),
        max_spectral_radius: peak.spectral_radius,
        max_spectral_radius_day: peak.k,
    };
    log::info!(
        "{} of {} days with spectral radius above 1; {} crossings",
        summary.unstable_days,
        report.days.len(),
        summary.crossings.len()
    );
    write_json(&run.out("stability.json"), &summary)?;
    write_provenance(
        &run.cfg.out,
        "stability",
        &run.cfg,
        Some(&run.ingested.series.content_hash()),
    )?;
    Ok(Outcome::Clean)
}

#[derive(Serialize)]
struct TrainSummary {
    windows: usize,
    labeled_one: usize,
    initial_loss: f64,
    final_loss: f64,
    train_accuracy: f64,
    protocol: LabelProtocol,
}

pub fn train_beta_cmd(mut cfg: RunConfig, force: bool) -> Result<Outcome> {
    cfg.mode = ForecastMode::Blended;
    let run = Run::open(cfg, force)?;
    let (net, summary) = run.train_network()?;
    write_json(&run.out("train.json"), &summary)?;

    let min = run.first_learnable_day();
    let anchors: Vec<usize> = LabelProtocol::days_in(
        &run.series,
        summary.protocol.test_from,
        summary.protocol.test_to,
        run.cfg.n_tau,
    )
    .into_iter()
    .filter(|&k| k >= min && k < run.series.days())
    .collect();
    let (&from, &to) = match (anchors.first(), anchors.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => bail!(
            "the test period {} ..= {} has no anchor day with history and a target inside the series",
            summary.protocol.test_from,
            summary.protocol.test_to
        ),
    };
    let mut w = csv_out(&run.out("betas.csv"))?;
    writeln!(w, "k,date,beta")?;
    for k in from..=to {
        let beta = net.forward(&betanet::window_features(&run.series.window(k, run.cfg.n_tau)?))?;
        let beta = if run.cfg.threshold { betanet::snap(beta) } else { beta };
        writeln!(w, "{k},{},{beta:e}", run.series.date_of(k))?;
    }
    w.flush()?;

    let beta = BetaSource::Network {
        net: Arc::new(net),
        threshold: run.cfg.threshold,
    };
    let report = run.evaluate(from, to, beta)?;
    let errors = run.write_error_reports(&report)?;
    let worst = errors.groups.iter().filter_map(|g| g.max_abs).fold(0.0, f64::max);
    log::info!("test period {from} ..= {to}: largest |relative error| {worst:.3e}");
    write_provenance(
        &run.cfg.out,
        "train-beta",
        &run.cfg,
        Some(&run.ingested.series.content_hash()),
    )?;
    Ok(Outcome::Clean)
}
