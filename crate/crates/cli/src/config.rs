//! Run configuration: TOML file, then command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, ensure, Context, Result};
use chrono::NaiveDate;
use epiflow_core::betanet::LabelProtocol;
use epiflow_core::learning::ChannelWeights;
use epiflow_core::timeseries::CsvSchema;
use epiflow_core::{ForecastMode, LearnOptions, NnlsOptions, PandemicSeries, TrainConfig};
use serde::{Deserialize, Serialize};

/// A day given either as a 1-based index or as a calendar date.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DaySpec {
    Index(usize),
    Date(NaiveDate),
}

impl DaySpec {
    pub fn resolve(self, series: &PandemicSeries) -> Result<usize> {
        match self {
            Self::Index(k) => Ok(k),
            Self::Date(d) => series.day_of(d).with_context(|| {
                format!(
                    "{d} is outside the series ({} .. {})",
                    series.epoch(),
                    series.date_of(series.days())
                )
            }),
        }
    }
}

impl FromStr for DaySpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(k) = s.parse() {
            return Ok(Self::Index(k));
        }
        NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .map(Self::Date)
            .with_context(|| format!("`{s}` is neither a day number nor an ISO date"))
    }
}

/// Where the blending weight comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BetaSpec {
    Fixed(f64),
    Network(PathBuf),
    /// Train on the configured label protocol, then use the network.
    Train,
}

impl FromStr for BetaSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "train" {
            return Ok(Self::Train);
        }
        if let Some(v) = s.strip_prefix("fixed:") {
            let b: f64 = v.parse().with_context(|| format!("beta `{v}` is not a number"))?;
            ensure!((0.0..=1.0).contains(&b), "beta {b} is outside [0, 1]");
            return Ok(Self::Fixed(b));
        }
        if let Some(p) = s.strip_prefix("network:") {
            ensure!(!p.is_empty(), "network checkpoint path is empty");
            return Ok(Self::Network(PathBuf::from(p)));
        }
        bail!("beta must be `fixed:<value>`, `network:<path>` or `train`, got `{s}`")
    }
}

impl TryFrom<String> for BetaSpec {
    type Error = anyhow::Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BetaSpec> for String {
    fn from(b: BetaSpec) -> Self {
        b.to_string()
    }
}

impl fmt::Display for BetaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fixed(b) => write!(f, "fixed:{b}"),
            Self::Network(p) => write!(f, "network:{}", p.display()),
            Self::Train => f.write_str("train"),
        }
    }
}

/// Everything a run needs. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub epoch: Option<NaiveDate>,
    /// Expected region codes; defaults to those present in the data.
    pub regions: Option<Vec<String>>,
    pub schema: CsvSchema,
    pub n_tau: usize,
    pub fit_days: Option<usize>,
    pub mode: ForecastMode,
    pub beta: BetaSpec,
    pub threshold: bool,
    pub relearn_each_step: bool,
    /// Defaults to `1..=min(5, n_tau)`.
    pub horizons: Option<Vec<usize>>,
    pub from: Option<DaySpec>,
    pub to: Option<DaySpec>,
    /// `national`, `all`, or a region code.
    pub scope: String,
    /// Worker threads; `None` uses every core.
    pub jobs: Option<usize>,
    pub seed: u64,
    /// Relative-error bound reported in evaluation summaries.
    pub error_threshold: f64,
    pub tol_margin: f64,
    pub root_tol: f64,
    pub weights: ChannelWeights,
    pub nnls: NnlsOptions,
    pub train: TrainConfig,
    /// Label rules for `train-beta`; defaults to the Vermont protocol.
    pub labels: Option<LabelProtocol>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            out: PathBuf::from("out"),
            epoch: None,
            regions: None,
            schema: CsvSchema::default(),
            n_tau: 14,
            fit_days: None,
            mode: ForecastMode::Quarantined,
            beta: BetaSpec::Fixed(0.5),
            threshold: false,
            relearn_each_step: false,
            horizons: None,
            from: None,
            to: None,
            scope: "national".into(),
            jobs: None,
            seed: 0,
            error_threshold: 0.01,
            tol_margin: 0.0,
            root_tol: 1e-12,
            weights: ChannelWeights::default(),
            nnls: NnlsOptions::default(),
            train: TrainConfig::default(),
            labels: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Fills defaults that depend on other fields, then validates.
    pub fn resolve(mut self) -> Result<Self> {
        if self.horizons.is_none() {
            self.horizons = Some((1..=self.n_tau.min(5)).collect());
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.data.is_some(), "no data file given (use --data or `data = ...`)");
        ensure!(self.n_tau > 0, "n_tau must be positive");
        ensure!(self.fit_days != Some(0), "fit_days must be positive");
        let horizons = self.horizons();
        ensure!(!horizons.is_empty(), "no horizons given");
        for &m in horizons {
            ensure!(
                (1..=self.n_tau).contains(&m),
                "horizon {m} is outside 1..={} (horizons cannot exceed n_tau)",
                self.n_tau
            );
        }
        ensure!(self.jobs != Some(0), "jobs must be at least 1");
        ensure!((0.0..1.0).contains(&self.tol_margin), "tol_margin must lie in [0, 1)");
        ensure!(self.error_threshold > 0.0, "error_threshold must be positive");
        ensure!(self.root_tol > 0.0, "root_tol must be positive");
        ensure!(
            self.train.hidden > 0 && self.train.batch > 0,
            "network hidden size and batch must be positive"
        );
        Ok(())
    }

    pub fn horizons(&self) -> &[usize] {
        self.horizons.as_deref().unwrap_or(&[])
    }

    pub fn data(&self) -> &Path {
        self.data.as_deref().expect("validated")
    }

    pub fn learn_options(&self) -> LearnOptions {
        LearnOptions {
            n_tau: self.n_tau,
            fit_days: self.fit_days,
            weights: self.weights,
            nnls: self.nnls,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn label_protocol(&self) -> LabelProtocol {
        self.labels.clone().unwrap_or_else(LabelProtocol::vermont)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn day_spec_parses_both_forms() {
        assert_eq!("15".parse::<DaySpec>().unwrap(), DaySpec::Index(15));
        assert_eq!(
            "2020-10-02".parse::<DaySpec>().unwrap(),
            DaySpec::Date(NaiveDate::from_ymd_opt(2020, 10, 2).unwrap())
        );
        assert!("yesterday".parse::<DaySpec>().is_err());
    }

    #[test]
    fn beta_spec_round_trips() {
        for s in ["fixed:0.25", "network:net.json", "train"] {
            assert_eq!(s.parse::<BetaSpec>().unwrap().to_string(), s);
        }
        assert!("fixed:1.5".parse::<BetaSpec>().is_err());
        assert!("logistic".parse::<BetaSpec>().is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(toml::from_str::<RunConfig>("n_tau = 7\nbogus = 1\n").is_err());
        let cfg: RunConfig =
            toml::from_str("n_tau = 7\nfrom = \"2020-04-01\"\nto = 40\n[train]\nepochs = 5\n").unwrap();
        assert_eq!(cfg.n_tau, 7);
        assert_eq!(cfg.to, Some(DaySpec::Index(40)));
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.hidden, TrainConfig::default().hidden);
    }

    #[test]
    fn resolved_config_survives_toml() {
        let cfg = RunConfig {
            data: Some("d.csv".into()),
            beta: BetaSpec::Network("n.json".into()),
            from: Some(DaySpec::Index(20)),
            ..RunConfig::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}
