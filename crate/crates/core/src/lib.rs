//! Conservation-law model of epidemic spread across coupled regions.
//!
//! Cumulative totals of cases, deaths and recoveries advance by daily
//! increments that are linear, non-negative combinations of lagged active
//! cases (`active = cases - deaths - recoveries`). The crate learns those
//! gains by non-negative least squares on a trailing window, forecasts a few
//! days ahead by propagating a block companion system, blends intra-region
//! and inter-region dynamics with a small neural network, and checks the
//! stability of active-case growth through companion-matrix eigenvalues.
//!
//! Conventions used throughout:
//!
//! * regions are zero-based positions in a [`RegionRegistry`]; files and
//!   reports use the registry codes (or 1-based numbers where a numeric index
//!   is required);
//! * days `k` are 1-based, `k = 1` being the series epoch;
//! * the increment into day `k` is driven by active cases on days
//!   `k-1, ..., k-n_tau` (lag `h = 1` is the most recent day).

/// Version of this crate, recorded in run provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod betanet;
pub mod dynamics;
pub mod error;
pub mod forecast;
pub mod learning;
pub mod stability;
pub mod synth;
pub mod timeseries;

pub use betanet::{BetaNet, LabeledWindow, TrainConfig, TrainOutcome};
pub use dynamics::{ActiveHistory, BlendedGains, BlockPropagator, GainMode, GainTensor, StackedState, StateVector};
pub use error::{Error, Result};
pub use forecast::{BetaSource, ErrorReport, ForecastConfig, ForecastMode, ForecastRun, Summary};
pub use learning::{LearnOptions, LearnedGains, NnlsOptions, NnlsProblem, NnlsSolution};
pub use stability::{GammaCoefficients, Spectrum, StabilityReport};
pub use timeseries::{
    Channel, CleaningMode, IncrementSeries, IngestOptions, PandemicSeries, Region, RegionRegistry, ValidationReport,
    Window,
};
