//! Run configuration: one TOML file plus CLI flag overrides.
//!
//! Relative paths in the file are resolved against the file's directory.
//! Defaults reproduce the released constants exactly; any override is
//! carried into the run metadata so experimental runs are always
//! distinguishable.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::Deserialize;

use crate::anonymize::EpsilonShares;
use crate::error::{Error, Result};
use crate::ingest::Level;

pub const DEFAULT_WINDOW_SIZE: usize = 20;
pub const DEFAULT_SWITCH_THRESHOLD: usize = 11;
pub const DEFAULT_DROP_FRACTION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    hierarchy: String,
    lexicon: String,
    log: String,
    output_dir: String,
    master_seed: u64,
    date_range: Option<RawDateRange>,
    sample_period: Option<RawDateRange>,
    calibration_window: Option<RawDateRange>,
    levels: Option<Vec<u8>>,
    window_size: Option<usize>,
    switch_threshold: Option<usize>,
    drop_fraction_threshold: Option<f64>,
    epsilon: Option<RawEpsilon>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDateRange {
    start: String,
    end: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEpsilon {
    symptom: [f64; 3],
    normalization: [f64; 3],
}

/// Fully resolved configuration of one pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub hierarchy_path: PathBuf,
    pub lexicon_path: PathBuf,
    pub log_path: PathBuf,
    pub output_dir: PathBuf,
    pub master_seed: u64,
    pub date_range: Option<(NaiveDate, NaiveDate)>,
    pub sample_period: Option<(NaiveDate, NaiveDate)>,
    pub calibration_window: Option<(NaiveDate, NaiveDate)>,
    pub levels: Vec<Level>,
    pub window_size: usize,
    pub switch_threshold: usize,
    pub drop_fraction_threshold: f64,
    pub shares: EpsilonShares,
    pub debug_unsafe: bool,
}

impl PipelineConfig {
    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        let raw: RawConfig = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));

        let levels = match raw.levels {
            Some(levels) => parse_levels(&levels)?,
            None => Level::ALL.to_vec(),
        };
        let shares = match raw.epsilon {
            Some(eps) => {
                let shares = EpsilonShares {
                    symptom: eps.symptom,
                    normalization: eps.normalization,
                };
                validate_shares(&shares)?;
                shares
            }
            None => EpsilonShares::default(),
        };
        let config = Self {
            hierarchy_path: resolve(base, &raw.hierarchy),
            lexicon_path: resolve(base, &raw.lexicon),
            log_path: resolve(base, &raw.log),
            output_dir: resolve(base, &raw.output_dir),
            master_seed: raw.master_seed,
            date_range: parse_range(raw.date_range.as_ref())?,
            sample_period: parse_range(raw.sample_period.as_ref())?,
            calibration_window: parse_range(raw.calibration_window.as_ref())?,
            levels,
            window_size: raw.window_size.unwrap_or(DEFAULT_WINDOW_SIZE),
            switch_threshold: raw.switch_threshold.unwrap_or(DEFAULT_SWITCH_THRESHOLD),
            drop_fraction_threshold: raw
                .drop_fraction_threshold
                .unwrap_or(DEFAULT_DROP_FRACTION_THRESHOLD),
            shares,
            debug_unsafe: false,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        levels: Option<&[u8]>,
        debug_unsafe: bool,
    ) -> Result<()> {
        if let Some(seed) = seed {
            self.master_seed = seed;
        }
        if let Some(levels) = levels {
            self.levels = parse_levels(levels)?;
        }
        self.debug_unsafe = debug_unsafe;
        self.validate()
    }

    fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidConfig("no levels selected".to_owned()));
        }
        if self.window_size == 0 {
            return Err(Error::InvalidConfig("window_size must be positive".to_owned()));
        }
        if self.switch_threshold == 0 || self.switch_threshold > self.window_size {
            return Err(Error::InvalidConfig(format!(
                "switch_threshold {} outside 1..={}",
                self.switch_threshold, self.window_size
            )));
        }
        if !(0.0..=1.0).contains(&self.drop_fraction_threshold) {
            return Err(Error::InvalidConfig(format!(
                "drop_fraction_threshold {} outside [0, 1]",
                self.drop_fraction_threshold
            )));
        }
        Ok(())
    }

    /// True when every privacy-relevant parameter is the released default.
    pub fn uses_default_constants(&self) -> bool {
        self.shares.is_default() && self.levels == Level::ALL.to_vec()
    }

    /// Canonical JSON echo of the effective configuration. serde_json maps
    /// are sorted, so the string is deterministic and hashable.
    pub fn canonical_value(&self) -> serde_json::Value {
        let range = |r: &Option<(NaiveDate, NaiveDate)>| match r {
            Some((start, end)) => {
                serde_json::json!({ "start": start.to_string(), "end": end.to_string() })
            }
            None => serde_json::Value::Null,
        };
        serde_json::json!({
            "hierarchy": self.hierarchy_path.display().to_string(),
            "lexicon": self.lexicon_path.display().to_string(),
            "log": self.log_path.display().to_string(),
            "output_dir": self.output_dir.display().to_string(),
            "master_seed": self.master_seed,
            "date_range": range(&self.date_range),
            "sample_period": range(&self.sample_period),
            "calibration_window": range(&self.calibration_window),
            "levels": self.levels.iter().map(|l| l.as_u8()).collect::<Vec<_>>(),
            "window_size": self.window_size,
            "switch_threshold": self.switch_threshold,
            "drop_fraction_threshold": self.drop_fraction_threshold,
            "epsilon_symptom": self.shares.symptom,
            "epsilon_normalization": self.shares.normalization,
            "debug_unsafe": self.debug_unsafe,
        })
    }
}

fn resolve(base: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_owned()
    } else {
        base.join(p)
    }
}

fn parse_levels(levels: &[u8]) -> Result<Vec<Level>> {
    let mut out = Vec::new();
    for level in levels {
        let level = Level::new(*level)?;
        if !out.contains(&level) {
            out.push(level);
        }
    }
    out.sort();
    Ok(out)
}

fn parse_range(range: Option<&RawDateRange>) -> Result<Option<(NaiveDate, NaiveDate)>> {
    let Some(range) = range else {
        return Ok(None);
    };
    let parse = |s: &str| {
        NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .map_err(|_| Error::InvalidConfig(format!("date `{s}` is not YYYY-MM-DD")))
    };
    let start = parse(&range.start)?;
    let end = parse(&range.end)?;
    if start > end {
        return Err(Error::InvalidConfig(format!(
            "range start {start} is after end {end}"
        )));
    }
    Ok(Some((start, end)))
}

fn validate_shares(shares: &EpsilonShares) -> Result<()> {
    for eps in shares.symptom.iter().chain(shares.normalization.iter()) {
        if !(eps.is_finite() && *eps > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon shares must be positive and finite, got {eps}"
            )));
        }
    }
    Ok(())
}
