//! Post-processing of anonymized tables into the published dataset.
//!
//! Everything here operates on noisy counts only, so it consumes no privacy
//! budget: the metric formula, the reliability filter, the per-region
//! scaling factor and the daily/weekly granularity decision.
//!
//! The reliability rule keeps a metric only if a confidence interval for the
//! raw ratio stays within 25% (relative) of the noisy ratio. The interval is
//! built from independent per-count Laplace quantile intervals at coverage
//! sqrt(1/2) each, combined by interval arithmetic on the ratio, which gives
//! joint coverage of at least 1/2 by independence:
//!
//!   t_X = -b_X * ln(1 - sqrt(1/2))        (~1.2279 * b_X)
//!   l   = max(A - t_A, 0) / (B + t_B)
//!   r   = (A + t_A) / (B - t_B), or +inf when B <= t_B.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;

use crate::aggregate::{CountKey, CountKind, CountTable, Granularity, KeyspaceConfig};
use crate::anonymize::{
    anonymize_symptom_series, empty_noisy_symptom_table, BudgetLedger, EpsilonShares, NoiseParams,
    NoiseStream,
};
use crate::error::{Error, Result};
use crate::ingest::{Level, RegionHierarchy, RegionId, SymptomId};

/// Relative radius of the keep test: both CI endpoints must lie within this
/// fraction of the noisy ratio.
pub const RELATIVE_CI_RADIUS: f64 = 0.25;

/// Per-count two-sided coverage; squaring it gives the joint 50% target.
pub const CI_PER_COUNT_COVERAGE: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Half-width of the two-sided Laplace interval with per-count coverage.
pub fn laplace_tail_width(scale_b: f64) -> f64 {
    -scale_b * (1.0 - CI_PER_COUNT_COVERAGE).ln()
}

/// The published metric: `c * max(A / B, 0)`. Callers must ensure `b > 0`;
/// non-positive denominators are dropped by the filter before this point.
pub fn compute_metric(a: f64, b: f64, c: f64) -> f64 {
    c * (a / b).max(0.0)
}

/// Interval for the raw ratio `a*/b*` with joint coverage >= 1/2, from the
/// noisy counts alone. The upper end is +inf when `b <= t_b`, which the
/// filter treats as an automatic drop.
pub fn confidence_interval(a: f64, b: f64, scale_a: f64, scale_b: f64) -> (f64, f64) {
    let t_a = laplace_tail_width(scale_a);
    let t_b = laplace_tail_width(scale_b);
    let lower = (a - t_a).max(0.0) / (b + t_b);
    let upper = if b - t_b > 0.0 {
        (a + t_a) / (b - t_b)
    } else {
        f64::INFINITY
    };
    (lower, upper)
}

/// Both endpoints within the relative radius of the ratio.
pub fn ci_within_relative_radius(ratio: f64, lower: f64, upper: f64) -> bool {
    (ratio - lower).abs() <= RELATIVE_CI_RADIUS * ratio
        && (ratio - upper).abs() <= RELATIVE_CI_RADIUS * ratio
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    NonpositiveNormalization,
    NonpositiveRatio,
    CiUnbounded,
    CiTooWide,
    /// Kept by the filter, but the region had no kept metric inside the
    /// calibration window, so no scaling factor exists to publish it with.
    NoScalingFactor,
}

impl DropReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            DropReason::NonpositiveNormalization => "nonpositive_normalization",
            DropReason::NonpositiveRatio => "nonpositive_ratio",
            DropReason::CiUnbounded => "ci_unbounded",
            DropReason::CiTooWide => "ci_too_wide",
            DropReason::NoScalingFactor => "no_scaling_factor",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: bool,
    pub reason: Option<DropReason>,
    pub ci: Option<(f64, f64)>,
}

/// The keep/drop decision for one noisy (A, B) pair. Kept means: B > 0,
/// A/B > 0, finite upper end, and both endpoints inside the 25% radius.
pub fn filter_unreliable(a: f64, b: f64, scale_a: f64, scale_b: f64) -> FilterOutcome {
    if b <= 0.0 {
        return FilterOutcome {
            kept: false,
            reason: Some(DropReason::NonpositiveNormalization),
            ci: None,
        };
    }
    let ratio = a / b;
    let (lower, upper) = confidence_interval(a, b, scale_a, scale_b);
    let ci = Some((lower, upper));
    let reason = if ratio <= 0.0 {
        Some(DropReason::NonpositiveRatio)
    } else if upper.is_infinite() {
        Some(DropReason::CiUnbounded)
    } else if !ci_within_relative_radius(ratio, lower, upper) {
        Some(DropReason::CiTooWide)
    } else {
        None
    };
    FilterOutcome {
        kept: reason.is_none(),
        reason,
        ci,
    }
}

/// One published or dropped metric cell.
#[derive(Debug, Clone)]
pub struct MetricRecord {
    pub period: NaiveDate,
    pub granularity: Granularity,
    pub level: Level,
    pub region: RegionId,
    pub symptom: SymptomId,
    pub a: f64,
    pub b: f64,
    pub ratio: Option<f64>,
    pub kept: bool,
    pub reason: Option<DropReason>,
    pub ci: Option<(f64, f64)>,
}

/// Evaluate the filter over every cell of a noisy symptom table, dividing by
/// the matching-granularity noisy normalization count of the same period and
/// region.
pub fn compute_metric_records(
    noisy_symptom: &CountTable,
    noisy_norm: &CountTable,
    symptom_params: &NoiseParams,
    norm_params: &NoiseParams,
) -> Result<Vec<MetricRecord>> {
    if noisy_symptom.granularity() != noisy_norm.granularity()
        || noisy_symptom.level() != noisy_norm.level()
    {
        return Err(Error::ParamsMismatch {
            expected: format!(
                "{}/L{}",
                noisy_symptom.granularity(),
                noisy_symptom.level()
            ),
            found: format!("{}/L{}", noisy_norm.granularity(), noisy_norm.level()),
        });
    }
    let mut records = Vec::with_capacity(noisy_symptom.len());
    for (key, a) in noisy_symptom.iter() {
        let symptom = key
            .symptom
            .clone()
            .ok_or_else(|| Error::MissingCell {
                key: format!("{key} lacks a symptom"),
            })?;
        let norm_key = CountKey {
            period: key.period,
            symptom: None,
            region: key.region.clone(),
        };
        let b = noisy_norm.get(&norm_key).ok_or_else(|| Error::MissingCell {
            key: norm_key.to_string(),
        })?;
        let outcome = filter_unreliable(a, b, symptom_params.scale_b, norm_params.scale_b);
        records.push(MetricRecord {
            period: key.period,
            granularity: noisy_symptom.granularity(),
            level: noisy_symptom.level(),
            region: key.region.clone(),
            symptom,
            a,
            b,
            ratio: (b > 0.0).then(|| a / b),
            kept: outcome.kept,
            reason: outcome.reason,
            ci: outcome.ci,
        });
    }
    Ok(records)
}

/// Per-region scaling factor: over the calibration window every kept metric
/// of the region maps into [0, 100], with the maximum hitting exactly 100.
/// Computed purely from noisy counts.
#[derive(Debug, Clone)]
pub struct ScalingFactor {
    pub region: RegionId,
    pub c: f64,
    pub window_start: NaiveDate,
    pub window_end: NaiveDate,
}

/// `c = 100 / M` where `M` is the largest kept ratio of the region in the
/// window. `None` when the region kept nothing there: its rows cannot be
/// published.
pub fn calibrate_scaling(
    region: &RegionId,
    kept_window_ratios: &[f64],
    window: (NaiveDate, NaiveDate),
) -> Option<ScalingFactor> {
    let max = kept_window_ratios
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if max > 0.0 {
        Some(ScalingFactor {
            region: region.clone(),
            c: 100.0 / max,
            window_start: window.0,
            window_end: window.1,
        })
    } else {
        None
    }
}

/// Calibrate every region that kept at least one metric inside the window.
pub fn calibrate_all_regions(
    records: &[MetricRecord],
    window: (NaiveDate, NaiveDate),
) -> BTreeMap<RegionId, ScalingFactor> {
    let mut ratios: BTreeMap<RegionId, Vec<f64>> = BTreeMap::new();
    for record in records {
        if !record.kept || record.period < window.0 || record.period > window.1 {
            continue;
        }
        if let Some(ratio) = record.ratio {
            ratios.entry(record.region.clone()).or_default().push(ratio);
        }
    }
    ratios
        .iter()
        .filter_map(|(region, values)| {
            calibrate_scaling(region, values, window).map(|sf| (region.clone(), sf))
        })
        .collect()
}

/// Order regions descending by total noisy daily normalization count over
/// the sample period; ties break by region id. Uses anonymized counts only,
/// so the ordering spends no extra budget.
pub fn order_regions_by_activity(
    candidates: &[RegionId],
    noisy_norm_daily: &CountTable,
    sample: (NaiveDate, NaiveDate),
) -> Result<Vec<RegionId>> {
    let mut totals: Vec<(RegionId, f64)> = Vec::with_capacity(candidates.len());
    for region in candidates {
        let mut total = 0.0;
        for (key, value) in noisy_norm_daily.iter() {
            if key.region == *region && key.period >= sample.0 && key.period <= sample.1 {
                total += value;
            }
        }
        totals.push((region.clone(), total));
    }
    totals.sort_by(|(ra, ta), (rb, tb)| {
        tb.partial_cmp(ta)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| ra.cmp(rb))
    });
    Ok(totals.into_iter().map(|(region, _)| region).collect())
}

/// The ordered walk deciding daily vs weekly publication.
///
/// For each region we inspect the last `min(window_size, published)` regions
/// already published daily. With a full window the switch fires at
/// `switch_threshold` or more bad regions; with a shorter window it fires on
/// a strict majority. Once fired, this and every remaining region is
/// weekly, so assignments always match `daily* weekly*`. `is_bad` is only
/// consulted for regions visited while still in daily mode.
pub fn granularity_walk<R: Clone, E>(
    ordered: &[R],
    mut is_bad: impl FnMut(&R) -> std::result::Result<bool, E>,
    window_size: usize,
    switch_threshold: usize,
) -> std::result::Result<Vec<(R, Granularity)>, E> {
    let mut assignments = Vec::with_capacity(ordered.len());
    let mut published_bad: Vec<bool> = Vec::new();
    let mut switched = false;
    for region in ordered {
        if !switched && window_trips(&published_bad, window_size, switch_threshold) {
            switched = true;
        }
        if switched {
            assignments.push((region.clone(), Granularity::Weekly));
        } else {
            published_bad.push(is_bad(region)?);
            assignments.push((region.clone(), Granularity::Daily));
        }
    }
    Ok(assignments)
}

fn window_trips(published_bad: &[bool], window_size: usize, switch_threshold: usize) -> bool {
    let len = published_bad.len().min(window_size);
    if len == 0 {
        return false;
    }
    let bad = published_bad[published_bad.len() - len..]
        .iter()
        .filter(|b| **b)
        .count();
    if len == window_size {
        bad >= switch_threshold
    } else {
        2 * bad > len
    }
}

/// Final daily/weekly assignment per `(symptom, region)`.
#[derive(Debug, Clone, Default)]
pub struct GranularityPlan {
    assignment: BTreeMap<(SymptomId, RegionId), Granularity>,
}

impl GranularityPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, symptom: SymptomId, region: RegionId, granularity: Granularity) {
        self.assignment.insert((symptom, region), granularity);
    }

    pub fn get(&self, symptom: &SymptomId, region: &RegionId) -> Option<Granularity> {
        self.assignment
            .get(&(symptom.clone(), region.clone()))
            .copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(SymptomId, RegionId), Granularity)> {
        self.assignment.iter().map(|(k, g)| (k, *g))
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn merge(&mut self, other: GranularityPlan) {
        self.assignment.extend(other.assignment);
    }

    /// CSV `symptom,region_id,granularity`, sorted by (symptom, region).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |source| Error::Csv {
            path: "<writer>".into(),
            source,
        };
        w.write_record(["symptom", "region_id", "granularity"])
            .map_err(io)?;
        for ((symptom, region), granularity) in &self.assignment {
            w.write_record([symptom.as_str(), region.as_str(), &granularity.to_string()])
                .map_err(io)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: "<writer>".into(),
            source,
        })?;
        Ok(())
    }
}

/// Decision parameters for the walk, with the released defaults 20 / 11 /
/// 0.5, plus the sample period the drop statistics are computed over.
#[derive(Debug, Clone)]
pub struct PlanParams {
    pub window_size: usize,
    pub switch_threshold: usize,
    pub drop_fraction_threshold: f64,
    pub sample_start: NaiveDate,
    pub sample_end: NaiveDate,
}

pub struct LevelStageInputs<'a> {
    pub level: Level,
    pub raw_symptom_daily: &'a CountTable,
    pub raw_symptom_weekly: &'a CountTable,
    pub noisy_norm_daily: &'a CountTable,
    pub hierarchy: &'a RegionHierarchy,
    pub keyspace: &'a KeyspaceConfig,
}

pub struct LevelStageOutput {
    pub plan: GranularityPlan,
    pub noisy_symptom_daily: CountTable,
    pub noisy_symptom_weekly: CountTable,
}

/// Decide granularity and noise the symptom series of one level.
///
/// Level 0 publishes everything daily. For levels 1 and 2, regions sharing a
/// level-0 ancestor are walked in order of decreasing noisy search activity;
/// a region visited in daily mode gets its daily series noised on the spot
/// (that noise is the basis of its drop statistics), regions after the
/// switch get weekly noise only. Each series is therefore noised at exactly
/// one granularity and the level's symptom budget is charged once.
pub fn plan_and_anonymize_level(
    inputs: &LevelStageInputs<'_>,
    shares: &EpsilonShares,
    master_seed: u64,
    plan_params: &PlanParams,
    ledger: &mut BudgetLedger,
) -> Result<LevelStageOutput> {
    let level = inputs.level;
    let keyspace = inputs.keyspace;
    let params = shares.params(level, CountKind::Symptom);
    let norm_params = shares.params(level, CountKind::Normalization);
    let stream_daily =
        NoiseStream::for_table(master_seed, CountKind::Symptom, Granularity::Daily, level);
    let stream_weekly =
        NoiseStream::for_table(master_seed, CountKind::Symptom, Granularity::Weekly, level);

    let mut plan = GranularityPlan::new();
    let mut noisy_daily = empty_noisy_symptom_table(Granularity::Daily, level);
    let mut noisy_weekly = empty_noisy_symptom_table(Granularity::Weekly, level);

    if level == Level::COUNTRY {
        for symptom in keyspace.symptoms() {
            for region in keyspace.regions(level) {
                anonymize_symptom_series(
                    inputs.raw_symptom_daily,
                    symptom,
                    region,
                    &params,
                    &stream_daily,
                    ledger,
                    &mut noisy_daily,
                )?;
                plan.insert(symptom.clone(), region.clone(), Granularity::Daily);
            }
        }
        return Ok(LevelStageOutput {
            plan,
            noisy_symptom_daily: noisy_daily,
            noisy_symptom_weekly: noisy_weekly,
        });
    }

    let sample_days: Vec<NaiveDate> = keyspace
        .days()
        .into_iter()
        .filter(|d| *d >= plan_params.sample_start && *d <= plan_params.sample_end)
        .collect();

    // One activity ordering per level-0 ancestor, shared by all symptoms.
    let mut ordered_groups: Vec<Vec<RegionId>> = Vec::new();
    for ancestor in keyspace.regions(Level::COUNTRY) {
        let mut members = Vec::new();
        for region in keyspace.regions(level) {
            if inputs.hierarchy.ancestor_at(region, Level::COUNTRY)? == ancestor {
                members.push(region.clone());
            }
        }
        if members.is_empty() {
            continue;
        }
        ordered_groups.push(order_regions_by_activity(
            &members,
            inputs.noisy_norm_daily,
            (plan_params.sample_start, plan_params.sample_end),
        )?);
    }

    for symptom in keyspace.symptoms() {
        for ordered in &ordered_groups {
            let assignments = granularity_walk(
                ordered,
                |region| -> Result<bool> {
                    anonymize_symptom_series(
                        inputs.raw_symptom_daily,
                        symptom,
                        region,
                        &params,
                        &stream_daily,
                        ledger,
                        &mut noisy_daily,
                    )?;
                    if sample_days.is_empty() {
                        return Ok(false);
                    }
                    let mut dropped = 0usize;
                    for day in &sample_days {
                        let a_key = CountKey {
                            period: *day,
                            symptom: Some(symptom.clone()),
                            region: region.clone(),
                        };
                        let a = noisy_daily.get(&a_key).ok_or_else(|| Error::MissingCell {
                            key: a_key.to_string(),
                        })?;
                        let b_key = CountKey {
                            period: *day,
                            symptom: None,
                            region: region.clone(),
                        };
                        let b = inputs.noisy_norm_daily.get(&b_key).ok_or_else(|| {
                            Error::MissingCell {
                                key: b_key.to_string(),
                            }
                        })?;
                        if !filter_unreliable(a, b, params.scale_b, norm_params.scale_b).kept {
                            dropped += 1;
                        }
                    }
                    let fraction = dropped as f64 / sample_days.len() as f64;
                    Ok(fraction > plan_params.drop_fraction_threshold)
                },
                plan_params.window_size,
                plan_params.switch_threshold,
            )?;

            for (region, granularity) in assignments {
                if granularity == Granularity::Weekly {
                    anonymize_symptom_series(
                        inputs.raw_symptom_weekly,
                        symptom,
                        &region,
                        &params,
                        &stream_weekly,
                        ledger,
                        &mut noisy_weekly,
                    )?;
                }
                plan.insert(symptom.clone(), region, granularity);
            }
        }
    }

    Ok(LevelStageOutput {
        plan,
        noisy_symptom_daily: noisy_daily,
        noisy_symptom_weekly: noisy_weekly,
    })
}

pub struct EmitSummary {
    pub kept_rows: usize,
    pub dropped_rows: usize,
    pub data_path: PathBuf,
    pub diagnostics_path: PathBuf,
    pub plan_path: PathBuf,
}

/// Write the published dataset, diagnostics and plan files. Rows are sorted
/// by (region, symptom, period) and values printed with two decimals, so
/// equal inputs produce byte-identical files.
pub fn emit_dataset(
    records: &[MetricRecord],
    scaling: &BTreeMap<RegionId, ScalingFactor>,
    plan: &GranularityPlan,
    out_dir: &Path,
) -> Result<EmitSummary> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&i, &j| {
        let a = &records[i];
        let b = &records[j];
        a.region
            .cmp(&b.region)
            .then_with(|| a.symptom.cmp(&b.symptom))
            .then_with(|| a.period.cmp(&b.period))
    });

    let data_path = out_dir.join("data.csv");
    let diagnostics_path = out_dir.join("diagnostics.csv");
    let plan_path = out_dir.join("plan.csv");

    let mut data = csv_writer(&data_path)?;
    let mut diagnostics = csv_writer(&diagnostics_path)?;
    let io_err = |path: &Path| {
        let path = path.to_owned();
        move |source| Error::Csv { path, source }
    };
    data.write_record(["period_start", "granularity", "level", "region_id", "symptom", "value"])
        .map_err(io_err(&data_path))?;
    diagnostics
        .write_record(["period_start", "level", "region_id", "symptom", "reason"])
        .map_err(io_err(&diagnostics_path))?;

    let mut kept_rows = 0usize;
    let mut dropped_rows = 0usize;
    for &idx in &order {
        let record = &records[idx];
        let scale = scaling.get(&record.region);
        if record.kept {
            if let Some(scale) = scale {
                let ratio = record.ratio.unwrap_or(0.0);
                let value = compute_metric(ratio * record.b, record.b, scale.c);
                data.write_record([
                    record.period.to_string().as_str(),
                    &record.granularity.to_string(),
                    &record.level.to_string(),
                    record.region.as_str(),
                    record.symptom.as_str(),
                    &format!("{value:.2}"),
                ])
                .map_err(io_err(&data_path))?;
                kept_rows += 1;
                continue;
            }
        }
        let reason = record
            .reason
            .unwrap_or(DropReason::NoScalingFactor)
            .as_str();
        diagnostics
            .write_record([
                record.period.to_string().as_str(),
                &record.level.to_string(),
                record.region.as_str(),
                record.symptom.as_str(),
                reason,
            ])
            .map_err(io_err(&diagnostics_path))?;
        dropped_rows += 1;
    }
    data.flush().map_err(|source| Error::Io {
        path: data_path.clone(),
        source,
    })?;
    diagnostics.flush().map_err(|source| Error::Io {
        path: diagnostics_path.clone(),
        source,
    })?;

    let plan_file = File::create(&plan_path).map_err(|source| Error::Io {
        path: plan_path.clone(),
        source,
    })?;
    plan.write_csv(plan_file)?;

    Ok(EmitSummary {
        kept_rows,
        dropped_rows,
        data_path,
        diagnostics_path,
        plan_path,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    Ok(csv::Writer::from_writer(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anonymize::{noise_params, sample_laplace, NoiseStream};

    #[test]
    fn metric_formula() {
        assert!((compute_metric(50.0, 1000.0, 2.0) - 0.1).abs() < 1e-12);
        assert_eq!(compute_metric(-3.0, 1000.0, 5.0), 0.0);
    }

    #[test]
    fn nonpositive_normalization_is_dropped() {
        let outcome = filter_unreliable(10.0, -1.0, 2.727, 71.429);
        assert!(!outcome.kept);
        assert_eq!(outcome.reason, Some(DropReason::NonpositiveNormalization));
        assert!(outcome.ci.is_none());
    }

    #[test]
    fn confidence_interval_frozen_example() {
        // A=100, B=10000 with the level-2 scales, per-count width
        // t = 1.2279... * b.
        let (l, r) = confidence_interval(100.0, 10_000.0, 2.727, 71.429);
        let t_a: f64 = 1.227945 * 2.727;
        let t_b: f64 = 1.227945 * 71.429;
        assert!((t_a - 3.3486).abs() < 1e-3);
        assert!((t_b - 87.711).abs() < 1e-2);
        assert!((l - (100.0 - t_a) / (10_000.0 + t_b)).abs() < 1e-9);
        assert!((r - (100.0 + t_a) / (10_000.0 - t_b)).abs() < 1e-9);
        assert!((l - 0.0095811).abs() < 1e-6);
        assert!((r - 0.0104263).abs() < 1e-6);
    }

    #[test]
    fn ci_upper_is_infinite_at_small_b() {
        let t_b = laplace_tail_width(71.429);
        let (_, r) = confidence_interval(100.0, t_b, 2.727, 71.429);
        assert!(r.is_infinite());
        let outcome = filter_unreliable(100.0, t_b, 2.727, 71.429);
        assert!(!outcome.kept);
        assert_eq!(outcome.reason, Some(DropReason::CiUnbounded));
    }

    #[test]
    fn noiseless_limit_is_always_kept() {
        let (l, r) = confidence_interval(100.0, 10_000.0, 0.0, 0.0);
        assert_eq!(l, 0.01);
        assert_eq!(r, 0.01);
        assert!(filter_unreliable(100.0, 10_000.0, 0.0, 0.0).kept);
    }

    #[test]
    fn relative_radius_test() {
        let ratio = 0.02;
        assert!(ci_within_relative_radius(ratio, 0.9 * ratio, 1.1 * ratio));
        assert!(!ci_within_relative_radius(ratio, 0.9 * ratio, 1.3 * ratio));
        assert!(!ci_within_relative_radius(ratio, 0.7 * ratio, 1.1 * ratio));
    }

    #[test]
    fn coverage_of_healthy_cell_is_at_least_half() {
        // Re-noise fixed raw counts and check how often the CI contains the
        // true ratio, unconditionally.
        let (raw_a, raw_b) = (100.0, 10_000.0);
        let truth = raw_a / raw_b;
        let pa = noise_params(Level::COUNTY, CountKind::Symptom);
        let pb = noise_params(Level::COUNTY, CountKind::Normalization);
        let sa = NoiseStream::new(11, "coverage/a");
        let sb = NoiseStream::new(11, "coverage/b");
        let trials = 10_000;
        let mut covered = 0;
        for i in 0..trials {
            let a = raw_a + sample_laplace(pa.scale_b, sa.index_slot(i)).unwrap();
            let b = raw_b + sample_laplace(pb.scale_b, sb.index_slot(i)).unwrap();
            let (l, r) = confidence_interval(a, b, pa.scale_b, pb.scale_b);
            if truth >= l && truth <= r {
                covered += 1;
            }
        }
        let coverage = covered as f64 / trials as f64;
        assert!(coverage >= 0.5, "coverage {coverage}");
    }

    #[test]
    fn empty_raw_cell_is_dropped_almost_always() {
        let pa = noise_params(Level::COUNTY, CountKind::Symptom);
        let pb = noise_params(Level::COUNTY, CountKind::Normalization);
        let sa = NoiseStream::new(13, "empty-cell/a");
        let sb = NoiseStream::new(13, "empty-cell/b");
        let trials = 10_000;
        let mut dropped = 0;
        for i in 0..trials {
            let a = 0.0 + sample_laplace(pa.scale_b, sa.index_slot(i)).unwrap();
            let b = 10_000.0 + sample_laplace(pb.scale_b, sb.index_slot(i)).unwrap();
            if !filter_unreliable(a, b, pa.scale_b, pb.scale_b).kept {
                dropped += 1;
            }
        }
        let fraction = dropped as f64 / trials as f64;
        assert!(fraction > 0.95, "drop fraction {fraction}");
    }

    #[test]
    fn calibration_examples() {
        let region = RegionId::from("Clark");
        let window = ("2020-06-01".parse().unwrap(), "2020-06-30".parse().unwrap());
        let single = calibrate_scaling(&region, &[0.05], window).unwrap();
        assert!((single.c - 2000.0).abs() < 1e-9);
        assert!((compute_metric(0.05, 1.0, single.c) - 100.0).abs() < 1e-9);

        let multi = calibrate_scaling(&region, &[0.01, 0.02, 0.05], window).unwrap();
        assert!((multi.c - 2000.0).abs() < 1e-9);
        let published: Vec<f64> = [0.01, 0.02, 0.05]
            .iter()
            .map(|r| compute_metric(*r, 1.0, multi.c))
            .collect();
        assert!((published[0] - 20.0).abs() < 1e-9);
        assert!((published[1] - 40.0).abs() < 1e-9);
        assert!((published[2] - 100.0).abs() < 1e-9);

        // A later ratio under the fixed c may exceed 100.
        assert!((compute_metric(0.06, 1.0, multi.c) - 120.0).abs() < 1e-9);

        assert!(calibrate_scaling(&region, &[], window).is_none());
    }

    fn region_ids(ids: &[&str]) -> Vec<RegionId> {
        ids.iter().map(|s| RegionId::from(*s)).collect()
    }

    #[test]
    fn walk_switches_at_eleven_of_twenty_not_ten() {
        // Bad positions (1-indexed): evens 2..=18, then 20 and 21. No prefix
        // ever reaches a strict majority, the full window of 20 reaches 11
        // bad only once position 21 is published.
        let regions: Vec<u32> = (1..=30).collect();
        let bad = |r: &u32| -> std::result::Result<bool, std::convert::Infallible> {
            Ok((*r <= 18 && *r % 2 == 0) || *r == 20 || *r == 21)
        };
        let assignments = granularity_walk(&regions, bad, 20, 11).unwrap();
        for (region, granularity) in &assignments {
            let expected = if *region <= 21 {
                Granularity::Daily
            } else {
                Granularity::Weekly
            };
            assert_eq!(*granularity, expected, "region {region}");
        }

        // Same prefix but only ten bad among any twenty: never switches.
        let bad10 = |r: &u32| -> std::result::Result<bool, std::convert::Infallible> {
            Ok((*r <= 18 && *r % 2 == 0) || *r == 20)
        };
        let assignments = granularity_walk(&regions, bad10, 20, 11).unwrap();
        assert!(assignments.iter().all(|(_, g)| *g == Granularity::Daily));
    }

    #[test]
    fn walk_first_region_is_daily_even_if_bad() {
        let regions = region_ids(&["a"]);
        let assignments =
            granularity_walk::<_, std::convert::Infallible>(&regions, |_| Ok(true), 20, 11)
                .unwrap();
        assert_eq!(assignments[0].1, Granularity::Daily);
    }

    #[test]
    fn walk_short_window_uses_strict_majority() {
        // One bad published region is already a majority of a length-1
        // window, so the second region switches.
        let regions = region_ids(&["a", "b", "c"]);
        let assignments =
            granularity_walk::<_, std::convert::Infallible>(&regions, |_| Ok(true), 20, 11)
                .unwrap();
        assert_eq!(assignments[0].1, Granularity::Daily);
        assert_eq!(assignments[1].1, Granularity::Weekly);
        assert_eq!(assignments[2].1, Granularity::Weekly);
    }

    #[test]
    fn walk_never_consults_regions_after_the_switch() {
        let regions: Vec<u32> = (1..=10).collect();
        let mut consulted = Vec::new();
        let _ = granularity_walk::<_, std::convert::Infallible>(
            &regions,
            |r| {
                consulted.push(*r);
                Ok(true)
            },
            20,
            11,
        )
        .unwrap();
        assert_eq!(consulted, vec![1]);
    }

    #[test]
    fn ordering_is_descending_with_lexicographic_ties() {
        use crate::aggregate::{CountKind, CountTable, Granularity, KeyspaceConfig};
        use crate::fixtures;
        let ks = KeyspaceConfig::new(
            "2020-06-01".parse().unwrap(),
            "2020-06-03".parse().unwrap(),
            vec![],
            &fixtures::table1_hierarchy(),
        )
        .unwrap();
        let mut table =
            CountTable::new_zero(CountKind::Normalization, Granularity::Daily, Level::COUNTY, &ks);
        let day: NaiveDate = "2020-06-01".parse().unwrap();
        table
            .add(
                CountKey {
                    period: day,
                    symptom: None,
                    region: RegionId::from("Washoe"),
                },
                5000.0,
            )
            .unwrap();
        table
            .add(
                CountKey {
                    period: day,
                    symptom: None,
                    region: RegionId::from("Clark"),
                },
                100.0,
            )
            .unwrap();
        table.mark_noisy();

        let candidates = region_ids(&["Clark", "SanBernardino", "SantaClara", "Washoe"]);
        let sample = ("2020-06-01".parse().unwrap(), "2020-06-03".parse().unwrap());
        let ordered = order_regions_by_activity(&candidates, &table, sample).unwrap();
        let names: Vec<&str> = ordered.iter().map(|r| r.as_str()).collect();
        // Washoe and Clark by activity, then the zero-activity pair in id
        // order.
        assert_eq!(names, ["Washoe", "Clark", "SanBernardino", "SantaClara"]);

        // Permuting the candidate order changes nothing.
        let shuffled = region_ids(&["SantaClara", "Washoe", "Clark", "SanBernardino"]);
        let reordered = order_regions_by_activity(&shuffled, &table, sample).unwrap();
        assert_eq!(ordered, reordered);
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn walk_assignments_match_daily_star_weekly_star(
            bad in proptest::collection::vec(any::<bool>(), 0..60),
            window in 1usize..30,
        ) {
            let regions: Vec<usize> = (0..bad.len()).collect();
            let threshold = window / 2 + 1;
            let assignments = granularity_walk::<_, std::convert::Infallible>(
                &regions,
                |r| Ok(bad[*r]),
                window,
                threshold,
            )
            .unwrap();
            let mut seen_weekly = false;
            for (_, granularity) in assignments {
                match granularity {
                    Granularity::Weekly => seen_weekly = true,
                    Granularity::Daily => prop_assert!(!seen_weekly, "daily after weekly"),
                }
            }
        }
    }
}
