//! Model state, learned gains and the propagation operators built from them.
//!
//! Two routes advance the model by one day and must agree:
//!
//! * the summation form, [`new_input`] / [`propagate_one_step`], which
//!   weights lagged active cases directly with the gains;
//! * the matrix form, [`BlockPropagator`], a block companion operator over a
//!   [`StackedState`] whose gain blocks are `G = K a` with
//!   `K = [omega, lambda, theta]^T` and `a = [1, -1, -1]`.
//!
//! Within a region's stacked block days run oldest first, so the identity
//! blocks on the super-diagonal shift time forward and the gain blocks sit in
//! the last block row.

use std::io::{Read, Write};
use std::ops::{Add, Mul, Sub};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix3, RowVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeseries::Window;

/// Estimated (or recorded) totals of one region on one day.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateVector {
    pub cases: f64,
    pub deaths: f64,
    pub recoveries: f64,
}

impl StateVector {
    pub const fn new(cases: f64, deaths: f64, recoveries: f64) -> Self {
        Self {
            cases,
            deaths,
            recoveries,
        }
    }

    pub const fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.cases, self.deaths, self.recoveries]
    }

    /// Active cases, `cases - deaths - recoveries`.
    pub fn active(self) -> f64 {
        self.cases - self.deaths - self.recoveries
    }

    pub fn is_finite(self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl Add for StateVector {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(
            self.cases + o.cases,
            self.deaths + o.deaths,
            self.recoveries + o.recoveries,
        )
    }
}

impl Sub for StateVector {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(
            self.cases - o.cases,
            self.deaths - o.deaths,
            self.recoveries - o.recoveries,
        )
    }
}

impl Mul<f64> for StateVector {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self::new(self.cases * s, self.deaths * s, self.recoveries * s)
    }
}

/// The row vector mapping a state to its active cases.
pub fn active_row() -> RowVector3<f64> {
    RowVector3::new(1.0, -1.0, -1.0)
}

/// Which learning problem produced a [`GainTensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GainMode {
    /// Each region driven only by its own history (off-diagonal gains zero).
    Quarantined,
    /// Each region driven by every region's history.
    Interstate,
}

impl GainMode {
    pub fn name(self) -> &'static str {
        match self {
            GainMode::Quarantined => "quarantined",
            GainMode::Interstate => "interstate",
        }
    }
}

/// Non-negative gains `[omega, lambda, theta]` indexed by target region,
/// source region and lag `h = 1..=n_tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainTensor {
    regions: usize,
    n_tau: usize,
    day: usize,
    mode: GainMode,
    k: Vec<[f64; 3]>,
}

/// JSON sidecar stored next to a gain CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainMeta {
    #[serde(rename = "R")]
    pub regions: usize,
    pub n_tau: usize,
    pub day: usize,
    pub beta_mode: GainMode,
}

impl GainTensor {
    pub fn zeros(regions: usize, n_tau: usize, day: usize, mode: GainMode) -> Self {
        assert!(regions > 0 && n_tau > 0, "gain tensor needs R >= 1 and n_tau >= 1");
        Self {
            regions,
            n_tau,
            day,
            mode,
            k: vec![[0.0; 3]; regions * regions * n_tau],
        }
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn n_tau(&self) -> usize {
        self.n_tau
    }

    /// Day the gains were learned for.
    pub fn day(&self) -> usize {
        self.day
    }

    pub fn mode(&self) -> GainMode {
        self.mode
    }

    pub fn meta(&self) -> GainMeta {
        GainMeta {
            regions: self.regions,
            n_tau: self.n_tau,
            day: self.day,
            beta_mode: self.mode,
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize, h: usize) -> usize {
        (i * self.regions + j) * self.n_tau + (h - 1)
    }

    fn check(&self, i: usize, j: usize, h: usize) -> Result<()> {
        let r = self.regions - 1;
        if i > r {
            return Err(Error::out_of_range("target region", i, 0, r));
        }
        if j > r {
            return Err(Error::out_of_range("source region", j, 0, r));
        }
        if h == 0 || h > self.n_tau {
            return Err(Error::out_of_range("lag", h, 1, self.n_tau));
        }
        Ok(())
    }

    /// `[omega, lambda, theta]` for target `i`, source `j`, lag `h`.
    ///
    /// Panics when an index is out of range; see [`GainTensor::try_get`].
    #[inline]
    pub fn get(&self, i: usize, j: usize, h: usize) -> [f64; 3] {
        self.k[self.idx(i, j, h)]
    }

    pub fn try_get(&self, i: usize, j: usize, h: usize) -> Result<[f64; 3]> {
        self.check(i, j, h)?;
        Ok(self.get(i, j, h))
    }

    pub fn set(&mut self, i: usize, j: usize, h: usize, k: [f64; 3]) -> Result<()> {
        self.check(i, j, h)?;
        if k.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "gain ({i},{j},{h}) = {k:?} must be finite and non-negative"
            )));
        }
        let idx = self.idx(i, j, h);
        self.k[idx] = k;
        Ok(())
    }

    /// The 3x3 block `K a`: rows `(w,-w,-w)`, `(l,-l,-l)`, `(t,-t,-t)`.
    pub fn gain_block(&self, i: usize, j: usize, h: usize) -> Result<Matrix3<f64>> {
        let k = self.try_get(i, j, h)?;
        Ok(Vector3::from(k) * active_row())
    }

    /// Copy with every off-diagonal (`i != j`) entry set to zero.
    pub fn restricted_to_diagonal(&self) -> Self {
        let mut out = Self::zeros(self.regions, self.n_tau, self.day, self.mode);
        for i in 0..self.regions {
            for h in 1..=self.n_tau {
                let idx = self.idx(i, i, h);
                out.k[idx] = self.k[idx];
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.k.len(), other.k.len(), "tensor shapes differ");
        self.k
            .iter()
            .zip(&other.k)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.k.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    /// Flat CSV `i,j,h,omega,lambda,theta` with 1-based region numbers and
    /// 17 significant digits per gain.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "h", "omega", "lambda", "theta"])?;
        for i in 0..self.regions {
            for j in 0..self.regions {
                for h in 1..=self.n_tau {
                    let k = self.get(i, j, h);
                    w.write_record([
                        (i + 1).to_string(),
                        (j + 1).to_string(),
                        h.to_string(),
                        format!("{:.16e}", k[0]),
                        format!("{:.16e}", k[1]),
                        format!("{:.16e}", k[2]),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, meta: &GainMeta) -> Result<Self> {
        let mut g = Self::zeros(meta.regions, meta.n_tau, meta.day, meta.beta_mode);
        let mut seen = vec![false; g.k.len()];
        let mut rdr = csv::Reader::from_reader(input);
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |reason: String| Error::UnparseableRow { line, reason };
            if rec.len() != 6 {
                return Err(bad(format!("expected 6 fields, got {}", rec.len())));
            }
            let index = |n: usize| -> Result<usize> {
                rec[n]
                    .parse::<usize>()
                    .map_err(|e| bad(format!("index `{}`: {e}", &rec[n])))
            };
            let value = |n: usize| -> Result<f64> {
                rec[n]
                    .parse::<f64>()
                    .map_err(|e| bad(format!("gain `{}`: {e}", &rec[n])))
            };
            let (i, j, h) = (index(0)?, index(1)?, index(2)?);
            if i == 0 || j == 0 {
                return Err(bad("region numbers are 1-based".into()));
            }
            g.set(i - 1, j - 1, h, [value(3)?, value(4)?, value(5)?])?;
            seen[g.idx(i - 1, j - 1, h)] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let per_target = meta.regions * meta.n_tau;
            return Err(Error::InvalidInput(format!(
                "gain file is not dense: entry i={}, j={}, h={} missing",
                missing / per_target + 1,
                (missing % per_target) / meta.n_tau + 1,
                missing % meta.n_tau + 1
            )));
        }
        Ok(g)
    }

    /// Writes `{stem}.csv` and `{stem}.json`; returns the CSV path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(std::io::BufWriter::new(file))?;
        let meta = serde_json::to_string_pretty(&self.meta())?;
        std::fs::write(&json_path, meta + "\n").map_err(|e| Error::io(&json_path, e))?;
        Ok(csv_path)
    }

    /// Loads a tensor saved by [`GainTensor::save`], given its CSV path.
    pub fn load(csv_path: &Path) -> Result<Self> {
        let json_path = csv_path.with_extension("json");
        let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let meta: GainMeta = serde_json::from_str(&text)?;
        let file = std::fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
        Self::read_csv(std::io::BufReader::new(file), &meta)
    }
}

/// Gains for the intra-region term (weight `beta`) and the inter-region term
/// (weight `1 - beta`). The inter-region sum runs over every source region,
/// the target included.
#[derive(Debug, Clone, Copy)]
pub struct BlendedGains<'a> {
    intra: &'a GainTensor,
    inter: &'a GainTensor,
    beta: f64,
}

impl<'a> BlendedGains<'a> {
    pub fn new(intra: &'a GainTensor, inter: &'a GainTensor, beta: f64) -> Result<Self> {
        if intra.regions != inter.regions || intra.n_tau != inter.n_tau {
            return Err(Error::DimensionMismatch(format!(
                "intra gains are {}x{} lags, inter gains {}x{} lags",
                intra.regions, intra.n_tau, inter.regions, inter.n_tau
            )));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidInput(format!("beta = {beta} is outside [0, 1]")));
        }
        Ok(Self { intra, inter, beta })
    }

    /// Uses one tensor for both terms.
    pub fn single(g: &'a GainTensor, beta: f64) -> Result<Self> {
        Self::new(g, g, beta)
    }

    pub fn intra(&self) -> &'a GainTensor {
        self.intra
    }

    pub fn inter(&self) -> &'a GainTensor {
        self.inter
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn regions(&self) -> usize {
        self.intra.regions
    }

    pub fn n_tau(&self) -> usize {
        self.intra.n_tau
    }
}

/// Lagged active cases of every region; lag 1 is the most recent day.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveHistory {
    regions: usize,
    n_tau: usize,
    a: Vec<f64>,
}

impl ActiveHistory {
    /// `f(j, h)` gives the active cases of region `j` at lag `h`.
    pub fn from_fn(regions: usize, n_tau: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut a = Vec::with_capacity(regions * n_tau);
        for j in 0..regions {
            for h in 1..=n_tau {
                a.push(f(j, h));
            }
        }
        Self { regions, n_tau, a }
    }

    /// Lags `1..=len` taken from the newest end of the window.
    pub fn from_window(w: &Window) -> Self {
        let n = w.len();
        Self::from_fn(w.regions(), n, |j, h| w.region(j)[n - h].active())
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn n_tau(&self) -> usize {
        self.n_tau
    }

    #[inline]
    pub fn get(&self, j: usize, h: usize) -> f64 {
        self.a[j * self.n_tau + (h - 1)]
    }
}

/// Predicted daily increments `(new cases, new deaths, new recoveries)` of
/// region `i`:
///
/// `u_c = beta * sum_h K_intra[i,i,h][c] a_i(h)
///      + (1 - beta) * sum_h sum_j K_inter[i,j,h][c] a_j(h)`.
///
/// Summation order is fixed (lag outer, source region inner) so results are
/// bit-reproducible.
pub fn new_input(gains: &BlendedGains<'_>, i: usize, history: &ActiveHistory) -> Result<[f64; 3]> {
    let (r, n) = (gains.regions(), gains.n_tau());
    if history.regions != r || history.n_tau != n {
        return Err(Error::DimensionMismatch(format!(
            "history covers {} regions x {} lags, gains expect {r} x {n}",
            history.regions, history.n_tau
        )));
    }
    if i >= r {
        return Err(Error::out_of_range("region", i, 0, r - 1));
    }
    let beta = gains.beta;
    let mut own = [0.0; 3];
    let mut coupled = [0.0; 3];
    for h in 1..=n {
        let k = gains.intra.get(i, i, h);
        let a = history.get(i, h);
        for c in 0..3 {
            own[c] += k[c] * a;
        }
        for j in 0..r {
            let k = gains.inter.get(i, j, h);
            let a = history.get(j, h);
            for c in 0..3 {
                coupled[c] += k[c] * a;
            }
        }
    }
    Ok(std::array::from_fn(|c| beta * own[c] + (1.0 - beta) * coupled[c]))
}

/// Advances every region by one day: `x[k+1] = x[k] + u[k]`.
pub fn propagate_one_step(
    states: &[StateVector],
    history: &ActiveHistory,
    gains: &BlendedGains<'_>,
) -> Result<Vec<StateVector>> {
    if states.len() != gains.regions() {
        return Err(Error::DimensionMismatch(format!(
            "{} states for {} regions",
            states.len(),
            gains.regions()
        )));
    }
    states
        .iter()
        .enumerate()
        .map(|(i, x)| Ok(*x + StateVector::from_array(new_input(gains, i, history)?)))
        .collect()
}

/// One summation-form step applied to a trailing window of `n_tau` days;
/// returns the window shifted forward by one day.
pub fn step_window(window: &Window, gains: &BlendedGains<'_>) -> Result<Window> {
    if window.len() != gains.n_tau() {
        return Err(Error::DimensionMismatch(format!(
            "window holds {} days, gains need {}",
            window.len(),
            gains.n_tau()
        )));
    }
    let history = ActiveHistory::from_window(window);
    let next = propagate_one_step(&window.newest_states(), &history, gains)?;
    window.advance(&next)
}

/// The stacked history of all regions: region-major, and oldest-first inside
/// each region's block of `3 * n_tau` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedState {
    regions: usize,
    n_tau: usize,
    day: usize,
    y: Vec<f64>,
}

impl StackedState {
    pub fn from_vec(regions: usize, n_tau: usize, day: usize, y: Vec<f64>) -> Result<Self> {
        if y.len() != 3 * n_tau * regions {
            return Err(Error::DimensionMismatch(format!(
                "stacked vector has {} entries, expected {}",
                y.len(),
                3 * n_tau * regions
            )));
        }
        Ok(Self { regions, n_tau, day, y })
    }

    /// Stacks a window; the day of the result is the window's newest day.
    pub fn stack(window: &Window) -> Self {
        let n_tau = window.len();
        let mut y = Vec::with_capacity(3 * n_tau * window.regions());
        for i in 0..window.regions() {
            for x in window.region(i) {
                y.extend_from_slice(&x.to_array());
            }
        }
        Self {
            regions: window.regions(),
            n_tau,
            day: window.last_day(),
            y,
        }
    }

    pub fn unstack(&self) -> Window {
        let per_region = (0..self.regions)
            .map(|i| (0..self.n_tau).map(|m| self.state(i, m)).collect())
            .collect();
        Window::new(self.day + 1 - self.n_tau, per_region).expect("stacked state is non-empty")
    }

    /// Offset of region `i`, lag slot `m` (`m = 0` oldest).
    #[inline]
    pub fn offset(&self, i: usize, m: usize) -> usize {
        i * 3 * self.n_tau + 3 * m
    }

    pub fn state(&self, i: usize, m: usize) -> StateVector {
        let o = self.offset(i, m);
        StateVector::new(self.y[o], self.y[o + 1], self.y[o + 2])
    }

    /// Region `i`'s entry for the newest day.
    pub fn newest(&self, i: usize) -> StateVector {
        self.state(i, self.n_tau - 1)
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn n_tau(&self) -> usize {
        self.n_tau
    }

    pub fn day(&self) -> usize {
        self.day
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.y
    }
}

/// Which blend a propagator was assembled for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// `beta = 0`: every region coupled.
    Lambda0,
    /// `beta = 1`: block diagonal.
    Lambda1,
    Blended,
}

/// The block companion operator `L = beta * Lambda1 + (1 - beta) * Lambda0`.
///
/// Stored block-sparse: only the effective gain blocks of each region pair
/// and lag; the identity shift blocks are implicit. [`BlockPropagator::to_dense`]
/// materializes the full `3 n_tau R` square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPropagator {
    regions: usize,
    n_tau: usize,
    beta: f64,
    provenance: Provenance,
    blocks: Vec<Matrix3<f64>>,
}

/// Assembles the propagator from the diagonal entries of `g_diag` (the
/// quarantined gains) and all entries of `g_full` (the interstate gains).
pub fn assemble_propagator(g_diag: &GainTensor, g_full: &GainTensor, beta: f64) -> Result<BlockPropagator> {
    let blend = BlendedGains::new(g_diag, g_full, beta)?;
    BlockPropagator::from_blend(&blend)
}

impl BlockPropagator {
    pub fn from_blend(gains: &BlendedGains<'_>) -> Result<Self> {
        let (r, n, beta) = (gains.regions(), gains.n_tau(), gains.beta());
        let mut blocks = Vec::with_capacity(r * r * n);
        for i in 0..r {
            for j in 0..r {
                for h in 1..=n {
                    let mut e = gains.inter.gain_block(i, j, h)? * (1.0 - beta);
                    if i == j {
                        e += gains.intra.gain_block(i, i, h)? * beta;
                    }
                    blocks.push(e);
                }
            }
        }
        let provenance = if beta == 1.0 {
            Provenance::Lambda1
        } else if beta == 0.0 {
            Provenance::Lambda0
        } else {
            Provenance::Blended
        };
        Ok(Self {
            regions: r,
            n_tau: n,
            beta,
            provenance,
            blocks,
        })
    }

    pub fn dim(&self) -> usize {
        3 * self.n_tau * self.regions
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Effective gain block for target `i`, source `j`, lag `h`.
    pub fn block(&self, i: usize, j: usize, h: usize) -> &Matrix3<f64> {
        &self.blocks[(i * self.regions + j) * self.n_tau + (h - 1)]
    }

    /// `L y`, exploiting the block structure.
    pub fn apply(&self, y: &StackedState) -> Result<StackedState> {
        if y.regions != self.regions || y.n_tau != self.n_tau {
            return Err(Error::DimensionMismatch(format!(
                "stacked state is {}x{}, propagator {}x{}",
                y.regions, y.n_tau, self.regions, self.n_tau
            )));
        }
        let n = self.n_tau;
        let mut out = vec![0.0; y.y.len()];
        for i in 0..self.regions {
            let base = i * 3 * n;
            out[base..base + 3 * (n - 1)].copy_from_slice(&y.y[base + 3..base + 3 * n]);
            let mut next = Vector3::from(y.newest(i).to_array());
            for j in 0..self.regions {
                for h in 1..=n {
                    let x = Vector3::from(y.state(j, n - h).to_array());
                    next += self.block(i, j, h) * x;
                }
            }
            out[base + 3 * (n - 1)..base + 3 * n].copy_from_slice(next.as_slice());
        }
        StackedState::from_vec(self.regions, n, y.day + 1, out)
    }

    /// `L^m y` by repeated application.
    pub fn apply_n(&self, y: &StackedState, m: usize) -> Result<StackedState> {
        let mut cur = y.clone();
        for _ in 0..m {
            cur = self.apply(&cur)?;
        }
        Ok(cur)
    }

    /// Dense matrix of the operator.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n_tau;
        let stride = 3 * n;
        let mut l = DMatrix::zeros(self.dim(), self.dim());
        for i in 0..self.regions {
            for m in 0..n - 1 {
                let (row, col) = (i * stride + 3 * m, i * stride + 3 * (m + 1));
                l.fixed_view_mut::<3, 3>(row, col).copy_from(&Matrix3::identity());
            }
            let row = i * stride + 3 * (n - 1);
            let newest = i * stride + 3 * (n - 1);
            let mut diag = l.fixed_view_mut::<3, 3>(row, newest);
            diag += Matrix3::identity();
            for j in 0..self.regions {
                for h in 1..=n {
                    let col = j * stride + 3 * (n - h);
                    let mut view = l.fixed_view_mut::<3, 3>(row, col);
                    view += self.block(i, j, h);
                }
            }
        }
        l
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    type Entry = ((usize, usize, usize), [f64; 3]);

    fn tensor(r: usize, n: usize, entries: &[Entry]) -> GainTensor {
        let mut g = GainTensor::zeros(r, n, 1, GainMode::Interstate);
        for &((i, j, h), k) in entries {
            g.set(i, j, h, k).unwrap();
        }
        g
    }

    #[test]
    fn gain_block_examples() {
        let zero = GainTensor::zeros(1, 1, 1, GainMode::Quarantined);
        assert_eq!(zero.gain_block(0, 0, 1).unwrap(), Matrix3::zeros());

        let g = tensor(1, 1, &[((0, 0, 1), [1.0, 0.0, 0.0])]);
        let expected = Matrix3::new(1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(g.gain_block(0, 0, 1).unwrap(), expected);

        // K (a x): a x = 100 - 10 - 20 = 70.
        let g = tensor(1, 1, &[((0, 0, 1), [0.2, 0.05, 0.1])]);
        let x = Vector3::new(100.0, 10.0, 20.0);
        let got = g.gain_block(0, 0, 1).unwrap() * x;
        assert_relative_eq!(got, Vector3::new(14.0, 3.5, 7.0), epsilon = 1e-12);

        assert!(matches!(g.gain_block(0, 0, 2), Err(Error::OutOfRange { .. })));
        assert!(matches!(g.gain_block(1, 0, 1), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn gains_must_be_nonnegative() {
        let mut g = GainTensor::zeros(1, 1, 1, GainMode::Quarantined);
        assert!(g.set(0, 0, 1, [-0.1, 0.0, 0.0]).is_err());
        assert!(g.set(0, 0, 1, [f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn new_input_examples() {
        let g = tensor(2, 1, &[((0, 0, 1), [0.1, 0.0, 0.0]), ((0, 1, 1), [0.2, 0.0, 0.0])]);
        let hist = ActiveHistory::from_fn(2, 1, |j, _| if j == 0 { 50.0 } else { 100.0 });
        let blend = BlendedGains::single(&g, 0.0).unwrap();
        let u = new_input(&blend, 0, &hist).unwrap();
        assert_relative_eq!(u[0], 25.0, epsilon = 1e-12);
        assert_eq!(u[1], 0.0);
        assert_eq!(u[2], 0.0);

        let zero_hist = ActiveHistory::from_fn(2, 1, |_, _| 0.0);
        assert_eq!(new_input(&blend, 0, &zero_hist).unwrap(), [0.0; 3]);

        // beta = 1 sees only the region's own history.
        let own = BlendedGains::single(&g, 1.0).unwrap();
        let other = ActiveHistory::from_fn(2, 1, |j, _| if j == 0 { 50.0 } else { 1e9 });
        assert_eq!(new_input(&own, 0, &hist).unwrap(), new_input(&own, 0, &other).unwrap());

        let short = ActiveHistory::from_fn(1, 1, |_, _| 1.0);
        assert!(matches!(new_input(&blend, 0, &short), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn one_step_examples() {
        let g = tensor(2, 1, &[((0, 0, 1), [0.1, 0.0, 0.0]), ((0, 1, 1), [0.2, 0.0, 0.0])]);
        let blend = BlendedGains::single(&g, 0.0).unwrap();
        let hist = ActiveHistory::from_fn(2, 1, |j, _| if j == 0 { 50.0 } else { 100.0 });
        let states = [StateVector::new(200.0, 20.0, 30.0), StateVector::new(5.0, 0.0, 0.0)];
        let next = propagate_one_step(&states, &hist, &blend).unwrap();
        assert_relative_eq!(next[0].cases, 225.0, epsilon = 1e-12);
        assert_eq!(next[0].deaths, 20.0);
        assert_eq!(next[0].recoveries, 30.0);

        let zero = GainTensor::zeros(2, 1, 1, GainMode::Interstate);
        let blend = BlendedGains::single(&zero, 0.3).unwrap();
        assert_eq!(propagate_one_step(&states, &hist, &blend).unwrap(), states.to_vec());
    }

    #[test]
    fn blend_rejects_bad_beta_and_shapes() {
        let a = GainTensor::zeros(2, 1, 1, GainMode::Quarantined);
        let b = GainTensor::zeros(2, 2, 1, GainMode::Interstate);
        assert!(BlendedGains::new(&a, &b, 0.5).is_err());
        assert!(BlendedGains::single(&a, 1.5).is_err());
        assert!(BlendedGains::single(&a, -0.1).is_err());
    }

    #[test]
    fn zero_gain_propagator_is_a_pure_shift() {
        let zero = GainTensor::zeros(1, 2, 1, GainMode::Quarantined);
        let l = assemble_propagator(&zero, &zero, 0.5).unwrap().to_dense();
        let mut expected = DMatrix::zeros(6, 6);
        for d in 0..3 {
            expected[(d, 3 + d)] = 1.0;
            expected[(3 + d, 3 + d)] = 1.0;
        }
        assert_eq!(l, expected);
    }

    #[test]
    fn beta_one_ignores_interstate_gains() {
        let diag = tensor(2, 2, &[((0, 0, 1), [0.1, 0.01, 0.02]), ((1, 1, 2), [0.3, 0.0, 0.1])]);
        let full = tensor(2, 2, &[((0, 1, 1), [0.5, 0.5, 0.5]), ((1, 0, 2), [0.7, 0.1, 0.1])]);
        let zero = GainTensor::zeros(2, 2, 1, GainMode::Interstate);
        let a = assemble_propagator(&diag, &full, 1.0).unwrap();
        let b = assemble_propagator(&diag, &zero, 1.0).unwrap();
        assert_eq!(a.to_dense(), b.to_dense());
        assert_eq!(a.provenance(), Provenance::Lambda1);
    }

    #[test]
    fn constant_history_is_a_fixed_point_without_gains() {
        let zero = GainTensor::zeros(2, 3, 1, GainMode::Interstate);
        let l = assemble_propagator(&zero, &zero, 0.0).unwrap();
        let x = StateVector::new(7.0, 1.0, 2.0);
        let w = Window::new(1, vec![vec![x; 3], vec![x * 2.0; 3]]).unwrap();
        let y = StackedState::stack(&w);
        let next = l.apply(&y).unwrap();
        assert_eq!(next.as_slice(), y.as_slice());
        assert_eq!(next.day(), y.day() + 1);
    }

    #[test]
    fn stack_ordering_and_offsets() {
        let w = Window::new(
            4,
            vec![vec![StateVector::new(1.0, 0.0, 0.0), StateVector::new(2.0, 0.0, 0.0)]],
        )
        .unwrap();
        let y = StackedState::stack(&w);
        assert_eq!(y.as_slice(), &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        assert_eq!(y.day(), 5);
        assert_eq!(y.unstack(), w);

        let w2 = Window::new(1, vec![vec![StateVector::zero(); 4]; 2]).unwrap();
        let y2 = StackedState::stack(&w2);
        assert_eq!(y2.offset(1, 0), 3 * 4);
        assert!(StackedState::from_vec(1, 2, 1, vec![0.0; 5]).is_err());
    }

    #[test]
    fn gain_csv_round_trip_is_bit_exact() {
        let mut g = GainTensor::zeros(2, 2, 40, GainMode::Interstate);
        g.set(0, 1, 2, [0.1, 1.0 / 3.0, std::f64::consts::PI * 1e-7]).unwrap();
        g.set(1, 1, 1, [5e-324, 1e300, 0.30000000000000004]).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let back = GainTensor::read_csv(buf.as_slice(), &g.meta()).unwrap();
        assert_eq!(back, g);

        let dir = tempfile::tempdir().unwrap();
        let path = g.save(dir.path(), "day_40").unwrap();
        assert_eq!(GainTensor::load(&path).unwrap(), g);
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(path.with_extension("json")).unwrap()).unwrap();
        assert_eq!(meta["R"], 2);
        assert_eq!(meta["beta_mode"], "interstate");
    }

    #[test]
    fn sparse_gain_file_is_rejected() {
        let g = GainTensor::zeros(1, 2, 1, GainMode::Quarantined);
        let text = "i,j,h,omega,lambda,theta\n1,1,1,0,0,0\n";
        assert!(GainTensor::read_csv(text.as_bytes(), &g.meta()).is_err());
    }
}
