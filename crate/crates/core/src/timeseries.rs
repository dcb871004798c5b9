//! Per-region cumulative time series: ingestion, validation and access.
//!
//! A [`PandemicSeries`] is dense over `regions x days` and immutable once
//! built. Totals are stored region-major, day-minor so that extracting a
//! trailing window for one region touches contiguous memory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::StateVector;
use crate::error::{Error, Result};

/// One of the three cumulative channels tracked per region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Cases,
    Deaths,
    Recoveries,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Cases, Channel::Deaths, Channel::Recoveries];

    pub fn index(self) -> usize {
        match self {
            Channel::Cases => 0,
            Channel::Deaths => 1,
            Channel::Recoveries => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Cases => "cases",
            Channel::Deaths => "deaths",
            Channel::Recoveries => "recoveries",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A region as positioned in a [`RegionRegistry`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    /// Zero-based position; reports that need a number use `index + 1`.
    pub index: usize,
    pub code: String,
    pub name: String,
}

/// Ordered, bijective mapping between region codes and indices.
///
/// Regions are sorted alphabetically by name (ties broken by code), so the
/// index of a region never depends on the order of rows in an input file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionRegistry {
    regions: Vec<Region>,
    by_code: HashMap<String, usize>,
}

impl RegionRegistry {
    /// Builds a registry from `(code, name)` pairs.
    pub fn new<I, C, N>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (C, N)>,
        C: Into<String>,
        N: Into<String>,
    {
        let mut pairs: Vec<(String, String)> = entries.into_iter().map(|(c, n)| (c.into(), n.into())).collect();
        if pairs.is_empty() {
            return Err(Error::InvalidInput("region registry is empty".into()));
        }
        pairs.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        let mut by_code = HashMap::with_capacity(pairs.len());
        let mut regions = Vec::with_capacity(pairs.len());
        for (index, (code, name)) in pairs.into_iter().enumerate() {
            if code.trim().is_empty() {
                return Err(Error::InvalidInput("empty region code".into()));
            }
            if by_code.insert(code.clone(), index).is_some() {
                return Err(Error::InvalidInput(format!("duplicate region code `{code}`")));
            }
            regions.push(Region { index, code, name });
        }
        Ok(Self { regions, by_code })
    }

    /// Registry where each region's name is its code.
    pub fn from_codes<I, S>(codes: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(codes.into_iter().map(|c| {
            let c = c.into();
            (c.clone(), c)
        }))
    }

    /// The 50 US states plus the District of Columbia, sorted by name.
    pub fn us_states() -> Self {
        Self::new(US_STATES.iter().copied()).expect("static registry is valid")
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Region> {
        self.regions.get(index)
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.by_code.get(code).copied()
    }

    pub fn code(&self, index: usize) -> &str {
        &self.regions[index].code
    }

    pub fn iter(&self) -> impl Iterator<Item = &Region> {
        self.regions.iter()
    }
}

impl Serialize for RegionRegistry {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.regions.serialize(s)
    }
}

impl<'de> Deserialize<'de> for RegionRegistry {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Entry {
            code: String,
            #[serde(default)]
            name: Option<String>,
        }
        let entries = Vec::<Entry>::deserialize(d)?;
        RegionRegistry::new(entries.into_iter().map(|e| {
            let name = e.name.unwrap_or_else(|| e.code.clone());
            (e.code, name)
        }))
        .map_err(serde::de::Error::custom)
    }
}

const US_STATES: [(&str, &str); 51] = [
    ("AL", "Alabama"),
    ("AK", "Alaska"),
    ("AZ", "Arizona"),
    ("AR", "Arkansas"),
    ("CA", "California"),
    ("CO", "Colorado"),
    ("CT", "Connecticut"),
    ("DE", "Delaware"),
    ("DC", "District of Columbia"),
    ("FL", "Florida"),
    ("GA", "Georgia"),
    ("HI", "Hawaii"),
    ("ID", "Idaho"),
    ("IL", "Illinois"),
    ("IN", "Indiana"),
    ("IA", "Iowa"),
    ("KS", "Kansas"),
    ("KY", "Kentucky"),
    ("LA", "Louisiana"),
    ("ME", "Maine"),
    ("MD", "Maryland"),
    ("MA", "Massachusetts"),
    ("MI", "Michigan"),
    ("MN", "Minnesota"),
    ("MS", "Mississippi"),
    ("MO", "Missouri"),
    ("MT", "Montana"),
    ("NE", "Nebraska"),
    ("NV", "Nevada"),
    ("NH", "New Hampshire"),
    ("NJ", "New Jersey"),
    ("NM", "New Mexico"),
    ("NY", "New York"),
    ("NC", "North Carolina"),
    ("ND", "North Dakota"),
    ("OH", "Ohio"),
    ("OK", "Oklahoma"),
    ("OR", "Oregon"),
    ("PA", "Pennsylvania"),
    ("RI", "Rhode Island"),
    ("SC", "South Carolina"),
    ("SD", "South Dakota"),
    ("TN", "Tennessee"),
    ("TX", "Texas"),
    ("UT", "Utah"),
    ("VT", "Vermont"),
    ("VA", "Virginia"),
    ("WA", "Washington"),
    ("WV", "West Virginia"),
    ("WI", "Wisconsin"),
    ("WY", "Wyoming"),
];

/// Dense per-region, per-day cumulative totals.
#[derive(Debug, Clone, PartialEq)]
pub struct PandemicSeries {
    registry: RegionRegistry,
    epoch: NaiveDate,
    days: usize,
    totals: Vec<StateVector>,
    recoveries_synthetic: bool,
}

impl PandemicSeries {
    /// `totals` is region-major: entry `i * days + (k - 1)` holds region `i`
    /// on day `k`.
    pub fn new(
        registry: RegionRegistry,
        epoch: NaiveDate,
        days: usize,
        totals: Vec<StateVector>,
        recoveries_synthetic: bool,
    ) -> Result<Self> {
        if days == 0 {
            return Err(Error::InvalidInput("series must cover at least one day".into()));
        }
        if totals.len() != registry.len() * days {
            return Err(Error::DimensionMismatch(format!(
                "expected {} totals for {} regions x {days} days, got {}",
                registry.len() * days,
                registry.len(),
                totals.len()
            )));
        }
        for (n, x) in totals.iter().enumerate() {
            for (c, v) in x.to_array().into_iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "total {} of region `{}` on day {} is {v}",
                        Channel::ALL[c],
                        registry.code(n / days),
                        n % days + 1
                    )));
                }
            }
        }
        Ok(Self {
            registry,
            epoch,
            days,
            totals,
            recoveries_synthetic,
        })
    }

    /// Builds a series from one oldest-first trajectory per region.
    pub fn from_trajectories(
        registry: RegionRegistry,
        epoch: NaiveDate,
        trajectories: Vec<Vec<StateVector>>,
    ) -> Result<Self> {
        if trajectories.len() != registry.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} trajectories for {} regions",
                trajectories.len(),
                registry.len()
            )));
        }
        let days = trajectories.first().map_or(0, Vec::len);
        if trajectories.iter().any(|t| t.len() != days) {
            return Err(Error::DimensionMismatch("trajectories differ in length".into()));
        }
        let totals = trajectories.into_iter().flatten().collect();
        Self::new(registry, epoch, days, totals, false)
    }

    pub fn registry(&self) -> &RegionRegistry {
        &self.registry
    }

    pub fn regions(&self) -> usize {
        self.registry.len()
    }

    /// Last day `K_max`.
    pub fn days(&self) -> usize {
        self.days
    }

    pub fn epoch(&self) -> NaiveDate {
        self.epoch
    }

    pub fn recoveries_synthetic(&self) -> bool {
        self.recoveries_synthetic
    }

    pub fn date_of(&self, k: usize) -> NaiveDate {
        self.epoch + Duration::days(k as i64 - 1)
    }

    /// Day index of `date`, if it falls inside the series.
    pub fn day_of(&self, date: NaiveDate) -> Option<usize> {
        let k = (date - self.epoch).num_days() + 1;
        (k >= 1 && k as usize <= self.days).then_some(k as usize)
    }

    #[inline]
    pub(crate) fn at(&self, i: usize, k: usize) -> StateVector {
        self.totals[i * self.days + (k - 1)]
    }

    fn check(&self, i: usize, k: usize) -> Result<()> {
        if i >= self.regions() {
            return Err(Error::out_of_range("region", i, 0, self.regions() - 1));
        }
        if k == 0 || k > self.days {
            return Err(Error::out_of_range("day", k, 1, self.days));
        }
        Ok(())
    }

    pub fn totals(&self, i: usize, k: usize) -> Result<StateVector> {
        self.check(i, k)?;
        Ok(self.at(i, k))
    }

    /// `t - d - r`; negative values indicate downward corrections in the data.
    pub fn active_cases(&self, i: usize, k: usize) -> Result<f64> {
        self.totals(i, k).map(|x| x.active())
    }

    /// Full oldest-first trajectory of one region.
    pub fn trajectory(&self, i: usize) -> &[StateVector] {
        &self.totals[i * self.days..(i + 1) * self.days]
    }

    pub fn increments(&self, mode: CleaningMode) -> Result<IncrementSeries> {
        if self.days < 2 {
            return Err(Error::InsufficientHistory { k: self.days, min_k: 2 });
        }
        let per_region = self.days - 1;
        let mut data = Vec::with_capacity(self.regions() * per_region);
        let mut clamped_count = 0;
        for i in 0..self.regions() {
            let traj = self.trajectory(i);
            for pair in traj.windows(2) {
                let mut u = (pair[1] - pair[0]).to_array();
                if mode == CleaningMode::ClampNonnegative {
                    for v in &mut u {
                        if *v < 0.0 {
                            *v = 0.0;
                            clamped_count += 1;
                        }
                    }
                }
                data.push(u);
            }
        }
        Ok(IncrementSeries {
            regions: self.regions(),
            days: self.days,
            mode,
            data,
            clamped_count,
        })
    }

    /// States of every region for days `k-n+1 ..= k`, oldest first.
    pub fn window(&self, k: usize, n: usize) -> Result<Window> {
        if n == 0 {
            return Err(Error::InvalidInput("window length must be positive".into()));
        }
        if k > self.days {
            return Err(Error::out_of_range("day", k, 1, self.days));
        }
        if k < n {
            return Err(Error::InsufficientHistory { k, min_k: n });
        }
        let start = k + 1 - n;
        let per_region = (0..self.regions())
            .map(|i| self.trajectory(i)[start - 1..k].to_vec())
            .collect();
        Window::new(start, per_region)
    }

    /// The same series restricted to days `1..=k`.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.days {
            return Err(Error::out_of_range("day", k, 1, self.days));
        }
        let totals = (0..self.regions())
            .flat_map(|i| self.trajectory(i)[..k].iter().copied())
            .collect();
        Ok(Self {
            registry: self.registry.clone(),
            epoch: self.epoch,
            days: k,
            totals,
            recoveries_synthetic: self.recoveries_synthetic,
        })
    }

    /// Appends one day of states (one per region) after the last day.
    pub fn with_appended_day(&self, states: &[StateVector]) -> Result<Self> {
        if states.len() != self.regions() {
            return Err(Error::DimensionMismatch(format!(
                "{} states for {} regions",
                states.len(),
                self.regions()
            )));
        }
        let days = self.days + 1;
        let mut totals = Vec::with_capacity(self.regions() * days);
        for (i, s) in states.iter().enumerate() {
            totals.extend_from_slice(self.trajectory(i));
            totals.push(*s);
        }
        Self::new(
            self.registry.clone(),
            self.epoch,
            days,
            totals,
            self.recoveries_synthetic,
        )
    }

    /// Sums every region into a single region named `code`.
    pub fn aggregate(&self, code: &str) -> Self {
        let totals = (1..=self.days)
            .map(|k| {
                (0..self.regions())
                    .map(|i| self.at(i, k))
                    .fold(StateVector::zero(), |acc, x| acc + x)
            })
            .collect();
        Self {
            registry: RegionRegistry::from_codes([code]).expect("single code is valid"),
            epoch: self.epoch,
            days: self.days,
            totals,
            recoveries_synthetic: self.recoveries_synthetic,
        }
    }

    /// Scans for negative active cases and negative daily differences.
    pub fn validation_report(&self) -> ValidationReport {
        let mut report = ValidationReport {
            regions: self.regions(),
            days: self.days,
            epoch: self.epoch,
            recoveries_synthetic: self.recoveries_synthetic,
            ..ValidationReport::default()
        };
        for region in self.registry.iter() {
            let traj = self.trajectory(region.index);
            for (n, x) in traj.iter().enumerate() {
                let k = n + 1;
                let active = x.active();
                if active < 0.0 {
                    report.negative_active.push(NegativeActive {
                        region: region.code.clone(),
                        k,
                        date: self.date_of(k),
                        active,
                    });
                }
                if k >= 2 {
                    let u = (*x - traj[n - 1]).to_array();
                    for c in Channel::ALL {
                        if u[c.index()] < 0.0 {
                            report.clamped_increments.push(ClampedIncrement {
                                region: region.code.clone(),
                                k,
                                date: self.date_of(k),
                                channel: c,
                                raw: u[c.index()],
                            });
                        }
                    }
                }
            }
        }
        report
    }

    /// Writes the series in the input CSV layout, date-major then registry
    /// order. The recoveries column is omitted for zero-filled recoveries so
    /// a re-ingest restores the synthetic flag.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.recoveries_synthetic {
            w.write_record(["date", "region", "total_cases", "total_deaths"])?;
        } else {
            w.write_record(["date", "region", "total_cases", "total_deaths", "total_recoveries"])?;
        }
        for k in 1..=self.days {
            let date = self.date_of(k).to_string();
            for region in self.registry.iter() {
                let x = self.at(region.index, k);
                let mut rec = vec![
                    date.clone(),
                    region.code.clone(),
                    x.cases.to_string(),
                    x.deaths.to_string(),
                ];
                if !self.recoveries_synthetic {
                    rec.push(x.recoveries.to_string());
                }
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// SHA-256 of the normalized CSV rendering, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        hex::encode(Sha256::digest(&buf))
    }
}

/// How negative daily differences are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CleaningMode {
    Raw,
    ClampNonnegative,
}

/// Daily increments `total[k] - total[k-1]` for days `2..=K_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementSeries {
    regions: usize,
    days: usize,
    mode: CleaningMode,
    data: Vec<[f64; 3]>,
    clamped_count: usize,
}

impl IncrementSeries {
    pub fn mode(&self) -> CleaningMode {
        self.mode
    }

    /// Number of entries replaced by zero (always 0 in raw mode).
    pub fn clamped_count(&self) -> usize {
        self.clamped_count
    }

    /// New cases, deaths and recoveries of region `i` on day `k >= 2`.
    pub fn get(&self, i: usize, k: usize) -> Result<[f64; 3]> {
        if i >= self.regions {
            return Err(Error::out_of_range("region", i, 0, self.regions - 1));
        }
        if k < 2 || k > self.days {
            return Err(Error::out_of_range("day", k, 2, self.days));
        }
        Ok(self.data[i * (self.days - 1) + (k - 2)])
    }

    /// One channel of region `i` for days `2..=K_max`.
    pub fn channel(&self, i: usize, channel: Channel) -> Vec<f64> {
        let per_region = self.days - 1;
        self.data[i * per_region..(i + 1) * per_region]
            .iter()
            .map(|u| u[channel.index()])
            .collect()
    }
}

/// Trailing states of every region over consecutive days, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    start: usize,
    per_region: Vec<Vec<StateVector>>,
}

impl Window {
    /// `start` is the day of the first (oldest) entry.
    pub fn new(start: usize, per_region: Vec<Vec<StateVector>>) -> Result<Self> {
        let len = per_region.first().map_or(0, Vec::len);
        if len == 0 || per_region.iter().any(|w| w.len() != len) {
            return Err(Error::DimensionMismatch(
                "window needs equal, non-empty histories for every region".into(),
            ));
        }
        Ok(Self { start, per_region })
    }

    pub fn regions(&self) -> usize {
        self.per_region.len()
    }

    pub fn len(&self) -> usize {
        self.per_region[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Day of the oldest entry.
    pub fn first_day(&self) -> usize {
        self.start
    }

    /// Day of the newest entry.
    pub fn last_day(&self) -> usize {
        self.start + self.len() - 1
    }

    pub fn region(&self, i: usize) -> &[StateVector] {
        &self.per_region[i]
    }

    pub fn newest(&self, i: usize) -> StateVector {
        *self.per_region[i].last().expect("window is non-empty")
    }

    pub fn newest_states(&self) -> Vec<StateVector> {
        (0..self.regions()).map(|i| self.newest(i)).collect()
    }

    /// Drops the oldest day and appends `next` (one state per region).
    pub fn advance(&self, next: &[StateVector]) -> Result<Self> {
        if next.len() != self.regions() {
            return Err(Error::DimensionMismatch(format!(
                "{} states for a {}-region window",
                next.len(),
                self.regions()
            )));
        }
        let per_region = self
            .per_region
            .iter()
            .zip(next)
            .map(|(w, x)| w[1..].iter().copied().chain(std::iter::once(*x)).collect())
            .collect();
        Ok(Self {
            start: self.start + 1,
            per_region,
        })
    }

    pub fn into_inner(self) -> Vec<Vec<StateVector>> {
        self.per_region
    }
}

/// Column names of the input CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub date: String,
    pub region: String,
    pub total_cases: String,
    pub total_deaths: String,
    pub total_recoveries: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            date: "date".into(),
            region: "region".into(),
            total_cases: "total_cases".into(),
            total_deaths: "total_deaths".into(),
            total_recoveries: "total_recoveries".into(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    pub schema: CsvSchema,
    /// Calendar date of day 1; defaults to the earliest date in the file.
    /// Rows dated before it are dropped and counted.
    pub epoch: Option<NaiveDate>,
    /// Expected region set; defaults to the regions found in the file.
    pub registry: Option<RegionRegistry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplicateRow {
    pub region: String,
    pub date: NaiveDate,
    pub line: u64,
    pub replaced_line: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeActive {
    pub region: String,
    pub k: usize,
    pub date: NaiveDate,
    pub active: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClampedIncrement {
    pub region: String,
    pub k: usize,
    pub date: NaiveDate,
    pub channel: Channel,
    pub raw: f64,
}

/// Data-quality findings emitted alongside an ingested series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub regions: usize,
    pub days: usize,
    pub epoch: NaiveDate,
    pub recoveries_synthetic: bool,
    pub rows_read: usize,
    pub rows_before_epoch: usize,
    pub duplicate_rows: Vec<DuplicateRow>,
    pub negative_active: Vec<NegativeActive>,
    pub clamped_increments: Vec<ClampedIncrement>,
}

impl Default for ValidationReport {
    fn default() -> Self {
        Self {
            regions: 0,
            days: 0,
            epoch: NaiveDate::MIN,
            recoveries_synthetic: false,
            rows_read: 0,
            rows_before_epoch: 0,
            duplicate_rows: Vec::new(),
            negative_active: Vec::new(),
            clamped_increments: Vec::new(),
        }
    }
}

impl ValidationReport {
    pub fn has_warnings(&self) -> bool {
        !(self.duplicate_rows.is_empty() && self.negative_active.is_empty() && self.clamped_increments.is_empty())
    }
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub series: PandemicSeries,
    pub report: ValidationReport,
}

pub fn ingest_csv(path: &Path, opts: &IngestOptions) -> Result<Ingested> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(std::io::BufReader::new(file), opts)
}

pub fn ingest_reader<R: Read>(reader: R, opts: &IngestOptions) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let required = |name: &str| {
        column(name).ok_or_else(|| Error::UnparseableRow {
            line: 1,
            reason: format!("header lacks column `{name}`"),
        })
    };
    let schema = &opts.schema;
    let date_col = required(&schema.date)?;
    let region_col = required(&schema.region)?;
    let cases_col = required(&schema.total_cases)?;
    let deaths_col = required(&schema.total_deaths)?;
    let recoveries_col = column(&schema.total_recoveries);
    if recoveries_col.is_none() {
        log::warn!(
            "no `{}` column: recoveries are zero-filled and flagged synthetic",
            schema.total_recoveries
        );
    }

    // (region, date) -> (line, totals); last row wins.
    let mut rows: HashMap<(String, NaiveDate), (u64, StateVector)> = HashMap::new();
    let mut duplicates = Vec::new();
    let mut rows_read = 0;
    let mut record = csv::StringRecord::new();
    while rdr.read_record(&mut record)? {
        rows_read += 1;
        let line = record.position().map_or(0, |p| p.line());
        let field = |col: usize| {
            record.get(col).ok_or_else(|| Error::UnparseableRow {
                line,
                reason: format!("missing field {}", col + 1),
            })
        };
        let date = NaiveDate::parse_from_str(field(date_col)?, "%Y-%m-%d").map_err(|e| Error::UnparseableRow {
            line,
            reason: format!("bad date `{}`: {e}", record.get(date_col).unwrap_or("")),
        })?;
        let region = field(region_col)?.to_string();
        if region.is_empty() {
            return Err(Error::UnparseableRow {
                line,
                reason: "empty region".into(),
            });
        }
        let count = |col: usize, name: &str| -> Result<f64> {
            let raw = field(col)?;
            let v: f64 = raw.parse().map_err(|_| Error::UnparseableRow {
                line,
                reason: format!("`{name}` is not a number: `{raw}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::UnparseableRow {
                    line,
                    reason: format!("`{name}` is not finite"),
                });
            }
            if v < 0.0 {
                return Err(Error::NegativeTotal {
                    line,
                    column: name.to_string(),
                    value: v,
                });
            }
            Ok(v)
        };
        let x = StateVector::new(
            count(cases_col, &schema.total_cases)?,
            count(deaths_col, &schema.total_deaths)?,
            match recoveries_col {
                Some(col) => count(col, &schema.total_recoveries)?,
                None => 0.0,
            },
        );
        if let Some((prev_line, _)) = rows.insert((region.clone(), date), (line, x)) {
            log::warn!("duplicate row for {region} on {date} at line {line}; keeping the later row");
            duplicates.push(DuplicateRow {
                region,
                date,
                line,
                replaced_line: prev_line,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput("input has no data rows".into()));
    }

    let registry = match &opts.registry {
        Some(r) => {
            if let Some((code, _)) = rows.keys().find(|(c, _)| r.index_of(c).is_none()) {
                return Err(Error::UnknownRegion(code.clone()));
            }
            r.clone()
        }
        None => {
            let codes: BTreeSet<&String> = rows.keys().map(|(c, _)| c).collect();
            RegionRegistry::from_codes(codes.into_iter().cloned())?
        }
    };

    let epoch = opts
        .epoch
        .unwrap_or_else(|| rows.keys().map(|(_, d)| *d).min().expect("non-empty"));
    let before = rows.keys().filter(|(_, d)| *d < epoch).count();
    if before > 0 {
        log::info!("dropping {before} rows dated before the epoch {epoch}");
    }
    let last = rows
        .keys()
        .map(|(_, d)| *d)
        .filter(|d| *d >= epoch)
        .max()
        .ok_or_else(|| Error::InvalidInput(format!("no rows on or after the epoch {epoch}")))?;
    let days = (last - epoch).num_days() as usize + 1;

    let mut by_region: BTreeMap<usize, Vec<Option<StateVector>>> = BTreeMap::new();
    for ((code, date), (_, x)) in &rows {
        if *date < epoch {
            continue;
        }
        let i = registry.index_of(code).expect("checked above");
        let k = (*date - epoch).num_days() as usize;
        by_region.entry(i).or_insert_with(|| vec![None; days])[k] = Some(*x);
    }
    let mut totals = Vec::with_capacity(registry.len() * days);
    for region in registry.iter() {
        let Some(traj) = by_region.remove(&region.index) else {
            return Err(Error::MissingRegion(region.code.clone()));
        };
        for (n, x) in traj.into_iter().enumerate() {
            match x {
                Some(x) => totals.push(x),
                None => {
                    return Err(Error::GapInSeries {
                        region: region.code.clone(),
                        date: epoch + Duration::days(n as i64),
                    })
                }
            }
        }
    }

    duplicates.sort_by_key(|d| d.line);
    let series = PandemicSeries::new(registry, epoch, days, totals, recoveries_col.is_none())?;
    let mut report = series.validation_report();
    report.rows_read = rows_read;
    report.rows_before_epoch = before;
    report.duplicate_rows = duplicates;
    Ok(Ingested { series, report })
}
