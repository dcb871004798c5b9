//! A one-hidden-layer network mapping a trailing window of every region's
//! totals to the blending weight `beta` in `(0, 1)`.
//!
//! `beta = sigmoid(w2 . relu(W1 scale(x) + b1) + b2)`, trained with binary
//! cross-entropy and plain mini-batch gradient descent. All sums run in
//! ascending index order (features, then hidden units, then batch rows), so
//! a fixed seed reproduces weights bit for bit on one platform.

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{propagate_one_step, ActiveHistory, BlendedGains, GainTensor, StackedState, StateVector};
use crate::error::{Error, Result};
use crate::timeseries::{PandemicSeries, Window};

const SCHEMA: &str = "epiflow.betanet/1";
const LOG_CLAMP: f64 = 1e-12;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Network weights plus the input scaler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaNet {
    schema: String,
    regions: usize,
    n_tau: usize,
    hidden: usize,
    /// Row-major `hidden x input`.
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
    /// Multiplicative per-feature factors (`1 / max |x|`, or 0).
    scaler: Vec<f64>,
}

/// Same shape as the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl Gradient {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.w1.len() + 2 * self.b1.len() + 1);
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v
    }
}

/// Features of one window with its target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledWindow {
    /// Totals of every region over the window, region-major, oldest day
    /// first, `(cases, deaths, recoveries)` innermost.
    pub features: Vec<f64>,
    pub label: f64,
    /// Newest day of the window.
    pub day: usize,
}

/// Flattened features of a window (the same layout as the stacked state).
pub fn window_features(w: &Window) -> Vec<f64> {
    StackedState::stack(w).as_slice().to_vec()
}

impl BetaNet {
    /// All weights zero and an identity scaler.
    pub fn zeros(regions: usize, n_tau: usize, hidden: usize) -> Self {
        let input = 3 * n_tau * regions;
        Self {
            schema: SCHEMA.into(),
            regions,
            n_tau,
            hidden,
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
            scaler: vec![1.0; input],
        }
    }

    /// Uniform `[-s, s]` weights with `s = sqrt(6 / (fan_in + fan_out))`,
    /// zero biases.
    pub fn xavier(regions: usize, n_tau: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros(regions, n_tau, hidden);
        let input = net.input_len();
        let s1 = (6.0 / (input + hidden) as f64).sqrt();
        for w in &mut net.w1 {
            *w = rng.gen_range(-s1..=s1);
        }
        let s2 = (6.0 / (hidden + 1) as f64).sqrt();
        for w in &mut net.w2 {
            *w = rng.gen_range(-s2..=s2);
        }
        net
    }

    pub fn input_len(&self) -> usize {
        3 * self.n_tau * self.regions
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn n_tau(&self) -> usize {
        self.n_tau
    }

    pub fn scaler(&self) -> &[f64] {
        &self.scaler
    }

    pub fn set_scaler(&mut self, scaler: Vec<f64>) -> Result<()> {
        if scaler.len() != self.input_len() || scaler.iter().any(|s| !s.is_finite()) {
            return Err(Error::DimensionMismatch(format!(
                "scaler has {} entries, network expects {} finite ones",
                scaler.len(),
                self.input_len()
            )));
        }
        self.scaler = scaler;
        Ok(())
    }

    /// Max-abs scaling fitted on `features`; all-zero features map to 0.
    pub fn fit_scaler(&mut self, data: &[LabeledWindow]) -> Result<()> {
        let mut max = vec![0.0f64; self.input_len()];
        for w in data {
            self.check_len(&w.features)?;
            for (m, x) in max.iter_mut().zip(&w.features) {
                *m = m.max(x.abs());
            }
        }
        self.scaler = max.into_iter().map(|m| if m > 0.0 { 1.0 / m } else { 0.0 }).collect();
        Ok(())
    }

    /// Flat parameter vector: `w1`, `b1`, `w2`, `b2`.
    pub fn params(&self) -> Vec<f64> {
        Gradient {
            w1: self.w1.clone(),
            b1: self.b1.clone(),
            w2: self.w2.clone(),
            b2: self.b2,
        }
        .to_flat()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        let (n1, h) = (self.w1.len(), self.hidden);
        if p.len() != n1 + 2 * h + 1 {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters for a network with {}",
                p.len(),
                n1 + 2 * h + 1
            )));
        }
        self.w1.copy_from_slice(&p[..n1]);
        self.b1.copy_from_slice(&p[n1..n1 + h]);
        self.w2.copy_from_slice(&p[n1 + h..n1 + 2 * h]);
        self.b2 = p[n1 + 2 * h];
        Ok(())
    }

    fn check_len(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.input_len() {
            return Err(Error::DimensionMismatch(format!(
                "{} features, network expects {}",
                features.len(),
                self.input_len()
            )));
        }
        Ok(())
    }

    /// Hidden activations and the output logit.
    fn hidden_and_logit(&self, features: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let input = self.input_len();
        let x: Vec<f64> = features.iter().zip(&self.scaler).map(|(x, s)| x * s).collect();
        let mut act = vec![0.0; self.hidden];
        for (u, a) in act.iter_mut().enumerate() {
            let row = &self.w1[u * input..(u + 1) * input];
            let mut z = self.b1[u];
            for (w, xi) in row.iter().zip(&x) {
                z += w * xi;
            }
            *a = z.max(0.0);
        }
        let mut logit = self.b2;
        for (w, a) in self.w2.iter().zip(&act) {
            logit += w * a;
        }
        (x, act, logit)
    }

    /// `beta` for one feature vector.
    pub fn forward(&self, features: &[f64]) -> Result<f64> {
        self.check_len(features)?;
        let (_, _, logit) = self.hidden_and_logit(features);
        // Keeps the output strictly inside (0, 1) even when the logit
        // saturates the sigmoid in floating point.
        Ok(sigmoid(logit).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
    }

    /// Mean binary cross-entropy over `batch` and its exact gradient.
    pub fn loss_and_gradient(&self, batch: &[LabeledWindow]) -> Result<(f64, Gradient)> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let input = self.input_len();
        let mut g = Gradient {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.hidden],
            w2: vec![0.0; self.hidden],
            b2: 0.0,
        };
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for sample in batch {
            self.check_len(&sample.features)?;
            let (x, act, logit) = self.hidden_and_logit(&sample.features);
            let beta = sigmoid(logit);
            let clamped = beta.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
            let y = sample.label;
            loss -= y * clamped.ln() + (1.0 - y) * (1.0 - clamped).ln();
            // d loss / d logit for sigmoid + cross-entropy.
            let dz = (beta - y) * scale;
            g.b2 += dz;
            for (u, &a) in act.iter().enumerate() {
                g.w2[u] += dz * a;
                if a > 0.0 {
                    let dh = dz * self.w2[u];
                    g.b1[u] += dh;
                    let row = &mut g.w1[u * input..(u + 1) * input];
                    for (gw, xi) in row.iter_mut().zip(&x) {
                        *gw += dh * xi;
                    }
                }
            }
        }
        Ok((loss * scale, g))
    }

    fn descend(&mut self, g: &Gradient, lr: f64) {
        for (w, d) in self.w1.iter_mut().zip(&g.w1) {
            *w -= lr * d;
        }
        for (w, d) in self.b1.iter_mut().zip(&g.b1) {
            *w -= lr * d;
        }
        for (w, d) in self.w2.iter_mut().zip(&g.w2) {
            *w -= lr * d;
        }
        self.b2 -= lr * g.b2;
    }

    pub fn accuracy(&self, data: &[LabeledWindow]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InvalidInput("no samples to score".into()));
        }
        let mut hits = 0usize;
        for w in data {
            let predicted = if self.forward(&w.features)? >= 0.5 { 1.0 } else { 0.0 };
            hits += usize::from(predicted == w.label);
        }
        Ok(hits as f64 / data.len() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(s)?;
        if net.schema != SCHEMA {
            return Err(Error::InvalidInput(format!(
                "checkpoint schema `{}`, expected `{SCHEMA}`",
                net.schema
            )));
        }
        let input = net.input_len();
        if net.w1.len() != net.hidden * input
            || net.b1.len() != net.hidden
            || net.w2.len() != net.hidden
            || net.scaler.len() != input
        {
            return Err(Error::DimensionMismatch(
                "checkpoint arrays disagree with its dimensions".into(),
            ));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 51,
            lr: 0.01,
            epochs: 200,
            batch: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub net: BetaNet,
    /// Full-dataset loss before training, then after every epoch.
    pub losses: Vec<f64>,
}

/// Fits the scaler on `data`, initializes from `cfg.seed`, and runs
/// `cfg.epochs` shuffled passes of mini-batch gradient descent.
pub fn train(data: &[LabeledWindow], regions: usize, n_tau: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if cfg.hidden == 0 || cfg.batch == 0 || !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::InvalidInput("hidden, batch and lr must be positive".into()));
    }
    if data.iter().any(|w| w.label != 0.0 && w.label != 1.0) {
        return Err(Error::InvalidInput("labels must be 0 or 1".into()));
    }
    if !(data.iter().any(|w| w.label == 0.0) && data.iter().any(|w| w.label == 1.0)) {
        log::warn!("training set holds a single label; the fit will be degenerate");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = BetaNet::xavier(regions, n_tau, cfg.hidden, &mut rng);
    net.fit_scaler(data)?;

    let mut losses = vec![net.loss_and_gradient(data)?.0];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            batch.clear();
            batch.extend(chunk.iter().map(|&n| data[n].clone()));
            let (_, g) = net.loss_and_gradient(&batch)?;
            net.descend(&g, cfg.lr);
        }
        let loss = net.loss_and_gradient(data)?.0;
        if !loss.is_finite() || net.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { epoch, loss });
        }
        log::debug!("epoch {epoch}: loss {loss:.6}");
        losses.push(loss);
    }
    Ok(TrainOutcome { net, losses })
}

/// One labeled date range for one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRule {
    pub region: String,
    pub from: NaiveDate,
    pub to: NaiveDate,
    pub label: f64,
}

/// Training rules and the held-out test period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelProtocol {
    pub rules: Vec<LabelRule>,
    pub test_from: NaiveDate,
    pub test_to: NaiveDate,
}

impl LabelProtocol {
    /// Vermont: quarantined (1) until 2020-10-01, interstate (0) until
    /// 2021-04-23, tested on 2021-04-24 ..= 2021-10-01.
    pub fn vermont() -> Self {
        let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).expect("valid date");
        Self {
            rules: vec![
                LabelRule {
                    region: "VT".into(),
                    from: d(2020, 3, 12),
                    to: d(2020, 10, 1),
                    label: 1.0,
                },
                LabelRule {
                    region: "VT".into(),
                    from: d(2020, 10, 2),
                    to: d(2021, 4, 23),
                    label: 0.0,
                },
            ],
            test_from: d(2021, 4, 24),
            test_to: d(2021, 10, 1),
        }
    }

    /// Days of `series` inside `[from, to]` that have a full `n_tau` window.
    pub fn days_in(series: &PandemicSeries, from: NaiveDate, to: NaiveDate, n_tau: usize) -> Vec<usize> {
        (n_tau.max(1)..=series.days())
            .filter(|&k| {
                let d = series.date_of(k);
                d >= from && d <= to
            })
            .collect()
    }

    /// Labeled windows for every rule day with enough history. Days claimed
    /// by two rules with different labels are rejected.
    pub fn dataset(&self, series: &PandemicSeries, n_tau: usize) -> Result<Vec<LabeledWindow>> {
        let mut out: Vec<LabeledWindow> = Vec::new();
        for rule in &self.rules {
            if series.registry().index_of(&rule.region).is_none() {
                return Err(Error::UnknownRegion(rule.region.clone()));
            }
            if rule.label != 0.0 && rule.label != 1.0 {
                return Err(Error::InvalidInput(format!("label {} is not 0 or 1", rule.label)));
            }
            for k in Self::days_in(series, rule.from, rule.to, n_tau) {
                if let Some(prev) = out.iter().find(|w| w.day == k) {
                    if prev.label != rule.label {
                        return Err(Error::InvalidInput(format!("day {k} carries both labels")));
                    }
                    continue;
                }
                out.push(LabeledWindow {
                    features: window_features(&series.window(k, n_tau)?),
                    label: rule.label,
                    day: k,
                });
            }
        }
        out.sort_by_key(|w| w.day);
        Ok(out)
    }
}

/// Snaps `beta` to 0 or 1 at 0.5.
pub fn snap(beta: f64) -> f64 {
    if beta >= 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Next-day states for every region with `beta` taken from the network
/// (snapped to 0 or 1 when `threshold` is set). Returns the `beta` used
/// along with the prediction.
pub fn predict_with_beta(
    series: &PandemicSeries,
    k: usize,
    g_diag: &GainTensor,
    g_full: &GainTensor,
    net: &BetaNet,
    threshold: bool,
) -> Result<(f64, Vec<StateVector>)> {
    let n = g_diag.n_tau();
    if net.n_tau() != n || net.regions() != series.regions() {
        return Err(Error::DimensionMismatch(format!(
            "network expects {} regions x {} days, gains {} x {n}",
            net.regions(),
            net.n_tau(),
            series.regions()
        )));
    }
    let window = series.window(k, n)?;
    let mut beta = net.forward(&window_features(&window))?;
    if threshold {
        beta = snap(beta);
    }
    let gains = BlendedGains::new(g_diag, g_full, beta)?;
    let next = propagate_one_step(&window.newest_states(), &ActiveHistory::from_window(&window), &gains)?;
    Ok((beta, next))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(features: Vec<f64>, label: f64) -> LabeledWindow {
        LabeledWindow {
            features,
            label,
            day: 1,
        }
    }

    #[test]
    fn zero_net_outputs_half() {
        let net = BetaNet::zeros(1, 2, 3);
        assert_eq!(net.forward(&[1.0; 6]).unwrap(), 0.5);
        assert!(net.forward(&[1.0; 5]).is_err());
    }

    #[test]
    fn saturated_bias() {
        let mut net = BetaNet::zeros(1, 1, 1);
        net.b2 = 10.0;
        let beta = net.forward(&[0.0; 3]).unwrap();
        assert!(beta > 0.999 && beta < 1.0);
        net.b2 = 1e4;
        let beta = net.forward(&[0.0; 3]).unwrap();
        assert!(beta < 1.0);
        net.b2 = -1e4;
        assert!(net.forward(&[0.0; 3]).unwrap() > 0.0);
    }

    #[test]
    fn single_unit_hand_value() {
        let mut net = BetaNet::zeros(1, 1, 1);
        net.w1 = vec![1.0, 0.0, 0.0];
        net.w2 = vec![1.0];
        net.scaler = vec![0.5, 1.0, 1.0];
        let beta = net.forward(&[4.0, 0.0, 0.0]).unwrap();
        assert!((beta - 0.880_797_077_977_882_3).abs() < 1e-15);
    }

    #[test]
    fn loss_closed_form_and_mean_reduction() {
        let net = BetaNet::zeros(1, 1, 2);
        let one = [sample(vec![1.0, 2.0, 3.0], 1.0)];
        let (loss, _) = net.loss_and_gradient(&one).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        let two = [one[0].clone(), one[0].clone()];
        let (loss2, g2) = net.loss_and_gradient(&two).unwrap();
        let (_, g1) = net.loss_and_gradient(&one).unwrap();
        assert_eq!(loss, loss2);
        assert_eq!(g1, g2);
        assert!(net.loss_and_gradient(&[]).is_err());
    }

    #[test]
    fn extreme_logit_keeps_loss_finite() {
        let mut net = BetaNet::zeros(1, 1, 1);
        net.b2 = -1e3;
        let (loss, g) = net.loss_and_gradient(&[sample(vec![0.0; 3], 1.0)]).unwrap();
        assert!((loss + (1e-12f64).ln()).abs() < 1e-9);
        assert!((g.b2 + 1.0).abs() < 1e-12);
    }

    #[test]
    fn scaler_maps_zero_columns_to_zero() {
        let mut net = BetaNet::zeros(1, 1, 1);
        net.fit_scaler(&[sample(vec![2.0, 0.0, -4.0], 0.0), sample(vec![1.0, 0.0, 1.0], 1.0)])
            .unwrap();
        assert_eq!(net.scaler(), [0.5, 0.0, 0.25]);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = vec![sample(vec![1.0, 0.0, 0.0], 1.0), sample(vec![0.0, 1.0, 0.0], 0.0)];
        let cfg = TrainConfig {
            hidden: 3,
            epochs: 0,
            seed: 9,
            ..TrainConfig::default()
        };
        let out = train(&data, 1, 1, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut init = BetaNet::xavier(1, 1, 3, &mut rng);
        init.fit_scaler(&data).unwrap();
        assert_eq!(out.net, init);
        assert_eq!(out.losses.len(), 1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = BetaNet::xavier(2, 3, 4, &mut rng);
        let back = BetaNet::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back, net);
        let tampered = net.to_json().unwrap().replace(SCHEMA, "other/9");
        assert!(BetaNet::from_json(&tampered).is_err());
    }
}
