//! Learned gains stored under the output directory, keyed by content hash.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{Context, Result};
use epiflow_core::learning::learn_gains;
use epiflow_core::{GainMode, GainTensor, LearnOptions, PandemicSeries};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
struct Key<'a> {
    dataset: &'a str,
    learn: &'a LearnOptions,
}

/// Gains for one series and one set of learning options. Each day and mode
/// lives in `gains/<key>/<mode>/day_<k>.{csv,json}`, where `<key>` hashes
/// the series content together with the options, so a changed input never
/// reads a stale tensor.
pub struct GainCache {
    dir: PathBuf,
    opts: LearnOptions,
    force: bool,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl GainCache {
    pub fn open(out: &Path, series: &PandemicSeries, opts: &LearnOptions, force: bool) -> Result<Self> {
        let dataset = series.content_hash();
        let key = Key {
            dataset: &dataset,
            learn: opts,
        };
        let digest = hex::encode(Sha256::digest(serde_json::to_vec(&key)?));
        let dir = out.join("gains").join(&digest[..16]);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("key.json"), serde_json::to_string_pretty(&key)? + "\n")?;
        Ok(Self {
            dir,
            opts: opts.clone(),
            force,
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, k: usize, mode: GainMode) -> PathBuf {
        self.dir.join(mode.name()).join(format!("day_{k}.csv"))
    }

    /// Cached gains for day `k`, learning and storing them on a miss.
    /// `series` must be the series the cache was opened for.
    pub fn get(&self, series: &PandemicSeries, k: usize, mode: GainMode) -> Result<GainTensor> {
        let path = self.path(k, mode);
        if !self.force && path.exists() && path.with_extension("json").exists() {
            if let Ok(g) = GainTensor::load(&path) {
                if g.day() == k && g.mode() == mode && g.n_tau() == self.opts.n_tau {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(g);
                }
            }
            log::warn!("discarding unreadable cache entry {}", path.display());
        }
        let learned = learn_gains(series, k, mode, &self.opts)?;
        let d = &learned.diagnostics;
        if d.ill_conditioned > 0 || d.not_converged > 0 || d.underdetermined > 0 {
            log::warn!(
                "day {k} {}: {} of {} fits ill-conditioned, {} not converged, {} underdetermined",
                mode.name(),
                d.ill_conditioned,
                d.problems,
                d.not_converged,
                d.underdetermined
            );
        }
        let parent = path.parent().expect("cache paths have a parent");
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        learned.tensor.save(parent, &format!("day_{k}"))?;
        self.misses.fetch_add(1, Ordering::Relaxed);
        Ok(learned.tensor)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}
