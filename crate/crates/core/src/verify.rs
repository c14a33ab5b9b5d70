//! Verification harness: exhaustive sensitivity checking on small logs,
//! sampler distribution tests, and a per-cell empirical epsilon estimator.
//!
//! Sensitivity is checked exhaustively, not statistically: for every
//! neighbor pair (the log with and without one user-day) the bounded raw
//! tables are rebuilt on both sides and their L1 distance compared against
//! the claimed bounds, per level and temporal granularity.
//!
//! The epsilon estimator histograms noisy samples of two raw cells on shared
//! bins and takes the largest absolute log ratio of smoothed bin
//! frequencies. For Laplace noise the closed form is |raw1 - raw2| / b, and
//! composing the per-level worst cases across cells reproduces the analytic
//! budget split. Full-pipeline multivariate estimation is deliberately out
//! of scope: the joint output space is far too high-dimensional for
//! histogram estimation, while per-cell ratios are exact and compose
//! additively.

use std::fmt;

use crate::aggregate::{
    aggregate_normalization_daily, aggregate_symptom_daily, sum_weekly, CountKey, CountKind,
    CountTable, Granularity, KeyspaceConfig,
};
use crate::anonymize::{
    laplace_cdf, ledger_report, sample_laplace, BudgetLedger, EpsilonShares,
    NoiseStream, NORMALIZATION_SENSITIVITY, SYMPTOM_SENSITIVITY,
};
use crate::bounding::{bound_all, DiscardPolicy, UserDayKey, CROSS_SYMPTOM_CAP, NORMALIZATION_CAP};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::ingest::{Level, RegionHierarchy, SearchEvent};

/// Exhaustive neighbor enumeration is capped at this many user-days.
pub const MAX_USER_DAYS: usize = 50;

/// Minimum trial count for the epsilon estimator.
pub const MIN_EPSILON_TRIALS: usize = 100_000;

/// Minimum sample count for the sampler KS test.
pub const MIN_KS_SAMPLES: usize = 10_000;

/// Slack added to the closed-form ratio when checking the empirical
/// estimate. Absolute in epsilon units: histogram estimates carry sampling
/// error of a few hundredths regardless of how small the true epsilon is.
pub const EPSILON_ESTIMATE_SLACK: f64 = 0.10;

/// A log paired with the same log minus all events of one user-day.
#[derive(Debug, Clone)]
pub struct NeighborPair {
    pub removed: UserDayKey,
    pub d1: Vec<SearchEvent>,
    pub d2: Vec<SearchEvent>,
}

/// One pair per distinct user-day in the log.
pub fn enumerate_neighbors(log: &[SearchEvent]) -> Result<Vec<NeighborPair>> {
    let mut keys = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for event in log {
        let key = UserDayKey {
            user: event.user.clone(),
            date: event.date,
        };
        if seen.insert(key.clone()) {
            keys.push(key);
        }
    }
    if keys.len() > MAX_USER_DAYS {
        return Err(Error::LogTooLarge {
            user_days: keys.len(),
            max: MAX_USER_DAYS,
        });
    }
    Ok(keys
        .into_iter()
        .map(|removed| {
            let d2: Vec<SearchEvent> = log
                .iter()
                .filter(|e| !(e.user == removed.user && e.date == removed.date))
                .cloned()
                .collect();
            NeighborPair {
                removed,
                d1: log.to_vec(),
                d2,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy)]
pub struct LevelSensitivity {
    pub level: Level,
    pub symptom_daily: f64,
    pub symptom_weekly: f64,
    pub normalization_daily: f64,
    pub normalization_weekly: f64,
}

#[derive(Debug, Clone)]
pub struct SensitivityReport {
    pub removed: UserDayKey,
    pub levels: Vec<LevelSensitivity>,
}

/// Rebuild the bounded raw tables for both logs of a pair and compare. The
/// symptom bound is the cross-symptom cap, the normalization bound is 1, per
/// level and per temporal granularity. A violated bound is an error naming
/// the pair and level; finding such violations is this harness's purpose.
pub fn sensitivity_check(
    pair: &NeighborPair,
    hierarchy: &RegionHierarchy,
    keyspace: &KeyspaceConfig,
    policy: DiscardPolicy,
) -> Result<SensitivityReport> {
    let contribs1 = bound_all(&pair.d1, hierarchy, policy)?;
    let contribs2 = bound_all(&pair.d2, hierarchy, policy)?;

    let mut levels = Vec::with_capacity(3);
    for level in Level::ALL {
        let s1 = aggregate_symptom_daily(&contribs1, level, keyspace)?;
        let s2 = aggregate_symptom_daily(&contribs2, level, keyspace)?;
        let n1 = aggregate_normalization_daily(&contribs1, level, keyspace)?;
        let n2 = aggregate_normalization_daily(&contribs2, level, keyspace)?;

        let sensitivity = LevelSensitivity {
            level,
            symptom_daily: s1.l1_distance(&s2)?,
            symptom_weekly: sum_weekly(&s1, keyspace)?.l1_distance(&sum_weekly(&s2, keyspace)?)?,
            normalization_daily: n1.l1_distance(&n2)?,
            normalization_weekly: sum_weekly(&n1, keyspace)?
                .l1_distance(&sum_weekly(&n2, keyspace)?)?,
        };

        let bounds = [
            (sensitivity.symptom_daily, CROSS_SYMPTOM_CAP as f64, "symptom daily"),
            (sensitivity.symptom_weekly, CROSS_SYMPTOM_CAP as f64, "symptom weekly"),
            (
                sensitivity.normalization_daily,
                NORMALIZATION_CAP as f64,
                "normalization daily",
            ),
            (
                sensitivity.normalization_weekly,
                NORMALIZATION_CAP as f64,
                "normalization weekly",
            ),
        ];
        for (l1, bound, kind) in bounds {
            if l1 > bound + 1e-9 {
                return Err(Error::SensitivityViolation {
                    user: pair.removed.user.to_string(),
                    date: pair.removed.date.to_string(),
                    level: level.as_u8(),
                    kind: kind.to_owned(),
                    l1,
                    bound,
                });
            }
        }
        levels.push(sensitivity);
    }
    Ok(SensitivityReport {
        removed: pair.removed.clone(),
        levels,
    })
}

/// Negative control: the same check with contribution bounding disabled
/// (every event counts, no dedup, no caps). Multi-search user-days must trip
/// the bound, proving the harness has teeth.
pub fn sensitivity_check_unbounded(
    pair: &NeighborPair,
    hierarchy: &RegionHierarchy,
    keyspace: &KeyspaceConfig,
) -> Result<SensitivityReport> {
    let mut levels = Vec::with_capacity(3);
    for level in Level::ALL {
        let (s1, n1) = aggregate_unbounded(&pair.d1, hierarchy, level, keyspace)?;
        let (s2, n2) = aggregate_unbounded(&pair.d2, hierarchy, level, keyspace)?;
        let sensitivity = LevelSensitivity {
            level,
            symptom_daily: s1.l1_distance(&s2)?,
            symptom_weekly: sum_weekly(&s1, keyspace)?.l1_distance(&sum_weekly(&s2, keyspace)?)?,
            normalization_daily: n1.l1_distance(&n2)?,
            normalization_weekly: sum_weekly(&n1, keyspace)?
                .l1_distance(&sum_weekly(&n2, keyspace)?)?,
        };
        if sensitivity.symptom_daily > CROSS_SYMPTOM_CAP as f64 + 1e-9 {
            return Err(Error::SensitivityViolation {
                user: pair.removed.user.to_string(),
                date: pair.removed.date.to_string(),
                level: level.as_u8(),
                kind: "symptom daily (unbounded)".to_owned(),
                l1: sensitivity.symptom_daily,
                bound: CROSS_SYMPTOM_CAP as f64,
            });
        }
        if sensitivity.normalization_daily > NORMALIZATION_CAP as f64 + 1e-9 {
            return Err(Error::SensitivityViolation {
                user: pair.removed.user.to_string(),
                date: pair.removed.date.to_string(),
                level: level.as_u8(),
                kind: "normalization daily (unbounded)".to_owned(),
                l1: sensitivity.normalization_daily,
                bound: NORMALIZATION_CAP as f64,
            });
        }
        levels.push(sensitivity);
    }
    Ok(SensitivityReport {
        removed: pair.removed.clone(),
        levels,
    })
}

fn aggregate_unbounded(
    events: &[SearchEvent],
    hierarchy: &RegionHierarchy,
    level: Level,
    keyspace: &KeyspaceConfig,
) -> Result<(CountTable, CountTable)> {
    let mut symptom = CountTable::new_zero(CountKind::Symptom, Granularity::Daily, level, keyspace);
    let mut norm =
        CountTable::new_zero(CountKind::Normalization, Granularity::Daily, level, keyspace);
    let mut seen_regions = std::collections::BTreeSet::new();
    for event in events {
        let region = hierarchy.ancestor_at(&event.region2, level)?.clone();
        if let Some(sym) = &event.symptom {
            symptom.add(
                CountKey {
                    period: event.date,
                    symptom: Some(sym.clone()),
                    region: region.clone(),
                },
                1.0,
            )?;
        }
        // Unique-user semantics per region, but without the one-region cap.
        if seen_regions.insert((event.user.clone(), event.date, region.clone())) {
            norm.add(
                CountKey {
                    period: event.date,
                    symptom: None,
                    region,
                },
                1.0,
            )?;
        }
    }
    Ok((symptom, norm))
}

/// Result of the histogram-ratio estimator for one pair of raw cells.
#[derive(Debug, Clone)]
pub struct EpsilonEstimate {
    pub mechanism: String,
    pub scale_b: f64,
    pub delta_raw: f64,
    pub trials: usize,
    pub bins: usize,
    pub excluded_bins: usize,
    pub estimate: f64,
    pub closed_form: f64,
    pub bound_checked: f64,
}

impl EpsilonEstimate {
    pub fn within_bound(&self) -> bool {
        self.estimate <= self.bound_checked
    }
}

/// Estimate the per-cell epsilon of the Laplace mechanism empirically:
/// sample `raw1 + Laplace(b)` and `raw2 + Laplace(b)` from independent
/// keyed streams, histogram both on shared bins, and take the largest
/// |ln(p1/p2)| over bins, with one pseudo-count of smoothing per bin.
/// Bins too thin for a stable ratio are excluded and reported.
pub fn estimate_epsilon_single_cell(
    raw1: f64,
    raw2: f64,
    scale_b: f64,
    trials: usize,
    bins: usize,
    master_seed: u64,
) -> Result<EpsilonEstimate> {
    if !(scale_b > 0.0) {
        return Err(Error::NonPositiveScale { scale: scale_b });
    }
    if trials < MIN_EPSILON_TRIALS {
        return Err(Error::InvalidConfig(format!(
            "epsilon estimation needs at least {MIN_EPSILON_TRIALS} trials, got {trials}"
        )));
    }
    if bins < 2 {
        return Err(Error::InvalidConfig("need at least 2 bins".to_owned()));
    }

    let stream1 = NoiseStream::new(master_seed, "epsilon-estimate/cell1");
    let stream2 = NoiseStream::new(master_seed, "epsilon-estimate/cell2");

    let lo = raw1.min(raw2) - 5.0 * scale_b;
    let hi = raw1.max(raw2) + 5.0 * scale_b;
    let width = (hi - lo) / bins as f64;

    // Two extra bins catch the open tails.
    let mut counts1 = vec![0u64; bins + 2];
    let mut counts2 = vec![0u64; bins + 2];
    let bin_of = |x: f64| -> usize {
        if x < lo {
            0
        } else if x >= hi {
            bins + 1
        } else {
            (1 + ((x - lo) / width) as usize).min(bins)
        }
    };
    for i in 0..trials as u64 {
        let x1 = raw1 + sample_laplace(scale_b, stream1.index_slot(i))?;
        let x2 = raw2 + sample_laplace(scale_b, stream2.index_slot(i))?;
        counts1[bin_of(x1)] += 1;
        counts2[bin_of(x2)] += 1;
    }

    let min_count = (trials / 50).max(50) as u64;
    let mut estimate: f64 = 0.0;
    let mut excluded = 0usize;
    for (c1, c2) in counts1.iter().zip(counts2.iter()) {
        if *c1 < min_count || *c2 < min_count {
            excluded += 1;
            continue;
        }
        let p1 = (*c1 + 1) as f64;
        let p2 = (*c2 + 1) as f64;
        estimate = estimate.max((p1 / p2).ln().abs());
    }

    let closed_form = (raw1 - raw2).abs() / scale_b;
    Ok(EpsilonEstimate {
        mechanism: format!("laplace(b={scale_b})"),
        scale_b,
        delta_raw: (raw1 - raw2).abs(),
        trials,
        bins: bins + 2,
        excluded_bins: excluded,
        estimate,
        closed_form,
        bound_checked: closed_form + EPSILON_ESTIMATE_SLACK,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct KsResult {
    pub scale_b: f64,
    pub n: usize,
    pub statistic: f64,
    pub critical: f64,
    pub pass: bool,
}

/// Two-sided KS statistic of `sorted` samples against a CDF.
pub fn ks_statistic(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        let f = cdf(*x);
        d = d.max(f - i as f64 / n);
        d = d.max((i + 1) as f64 / n - f);
    }
    d
}

/// Asymptotic two-sided KS critical value `sqrt(ln(2/alpha)/2) / sqrt(n)`.
pub fn ks_critical_value(n: usize, alpha: f64) -> f64 {
    ((2.0 / alpha).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

/// KS goodness-of-fit of the pipeline sampler against the Laplace(0, b) CDF
/// at significance 0.01.
pub fn sampler_ks_test(scale_b: f64, n: usize, master_seed: u64) -> Result<KsResult> {
    if n < MIN_KS_SAMPLES {
        return Err(Error::InvalidConfig(format!(
            "KS test needs at least {MIN_KS_SAMPLES} samples, got {n}"
        )));
    }
    let stream = NoiseStream::new(master_seed, format!("ks/{scale_b}"));
    let mut samples: Vec<f64> = (0..n as u64)
        .map(|i| sample_laplace(scale_b, stream.index_slot(i)))
        .collect::<Result<_>>()?;
    samples.sort_by(|a, b| a.partial_cmp(b).expect("laplace draws are finite"));
    let statistic = ks_statistic(&samples, |x| laplace_cdf(x, scale_b));
    let critical = ks_critical_value(n, 0.01);
    Ok(KsResult {
        scale_b,
        n,
        statistic,
        critical,
        pass: statistic < critical,
    })
}

/// Everything `cmd_verify` prints: per-pair sensitivities for the bundled
/// fixture and (when small enough) the configured log, KS results for all
/// six scales, per-cell epsilon estimates against the analytic shares, and
/// the recomputed analytic budget.
#[derive(Debug)]
pub struct VerificationReport {
    pub fixture_pairs: Vec<SensitivityReport>,
    pub log_pairs: Option<Vec<SensitivityReport>>,
    pub log_skipped: Option<String>,
    pub ks: Vec<KsResult>,
    pub epsilon: Vec<(String, EpsilonEstimate, f64)>,
    pub analytic_symptom_total: f64,
    pub analytic_normalization_total: f64,
    pub analytic_total: f64,
}

impl VerificationReport {
    pub fn pass(&self) -> bool {
        self.ks.iter().all(|k| k.pass) && self.epsilon.iter().all(|(_, e, _)| e.within_bound())
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sensitivity (bundled fixture, exhaustive neighbor pairs)")?;
        write_sensitivities(f, &self.fixture_pairs)?;
        match (&self.log_pairs, &self.log_skipped) {
            (Some(pairs), _) => {
                writeln!(f, "sensitivity (configured log, exhaustive neighbor pairs)")?;
                write_sensitivities(f, pairs)?;
            }
            (None, Some(reason)) => writeln!(f, "configured log skipped: {reason}")?,
            (None, None) => {}
        }
        writeln!(f, "sampler KS tests (alpha = 0.01)")?;
        for k in &self.ks {
            writeln!(
                f,
                "  b = {:>9.3}: D = {:.5} critical = {:.5} [{}]",
                k.scale_b,
                k.statistic,
                k.critical,
                if k.pass { "pass" } else { "FAIL" }
            )?;
        }
        writeln!(f, "per-cell empirical epsilon (|delta|/b closed form)")?;
        for (label, estimate, share) in &self.epsilon {
            writeln!(
                f,
                "  {label}: estimate = {:.4} closed form = {:.4} share = {:.4} [{}]",
                estimate.estimate,
                estimate.closed_form,
                share,
                if estimate.within_bound() { "pass" } else { "FAIL" }
            )?;
        }
        writeln!(
            f,
            "analytic budget: symptom {:.3} + normalization {:.3} = {:.3} (delta = 0)",
            self.analytic_symptom_total, self.analytic_normalization_total, self.analytic_total
        )
    }
}

fn write_sensitivities(f: &mut fmt::Formatter<'_>, pairs: &[SensitivityReport]) -> fmt::Result {
    for report in pairs {
        writeln!(f, "  removed ({}, {}):", report.removed.user, report.removed.date)?;
        for level in &report.levels {
            writeln!(
                f,
                "    level {}: symptom L1 {}/{} (daily/weekly, bound {}), normalization L1 {}/{} (bound {})",
                level.level,
                level.symptom_daily,
                level.symptom_weekly,
                CROSS_SYMPTOM_CAP,
                level.normalization_daily,
                level.normalization_weekly,
                NORMALIZATION_CAP,
            )?;
        }
    }
    Ok(())
}

/// Run the whole verification suite. The bundled fixture is always checked;
/// the configured log only when it fits the exhaustive cap.
pub fn run_verification(
    log: Option<&[SearchEvent]>,
    hierarchy: &RegionHierarchy,
    shares: &EpsilonShares,
    master_seed: u64,
) -> Result<VerificationReport> {
    let fixture_hierarchy = fixtures::table1_hierarchy();
    let fixture_events = fixtures::table1_events();
    let fixture_ks = KeyspaceConfig::new(
        "2020-06-01".parse().expect("valid date"),
        "2020-06-07".parse().expect("valid date"),
        fixtures::table1_lexicon().symptoms().to_vec(),
        &fixture_hierarchy,
    )?;
    let mut fixture_pairs = Vec::new();
    for pair in enumerate_neighbors(&fixture_events)? {
        fixture_pairs.push(sensitivity_check(
            &pair,
            &fixture_hierarchy,
            &fixture_ks,
            DiscardPolicy::InputOrder,
        )?);
    }

    let mut log_pairs = None;
    let mut log_skipped = None;
    if let Some(events) = log {
        match enumerate_neighbors(events) {
            Ok(pairs) => {
                let symptoms: Vec<_> = {
                    let mut set = std::collections::BTreeSet::new();
                    for e in events {
                        if let Some(s) = &e.symptom {
                            set.insert(s.clone());
                        }
                    }
                    set.into_iter().collect()
                };
                let (start, end) = match (
                    events.iter().map(|e| e.date).min(),
                    events.iter().map(|e| e.date).max(),
                ) {
                    (Some(start), Some(end)) => (start, end),
                    _ => (fixture_ks.start(), fixture_ks.end()),
                };
                let ks = KeyspaceConfig::new(start, end, symptoms, hierarchy)?;
                let mut reports = Vec::new();
                for pair in pairs {
                    reports.push(sensitivity_check(
                        &pair,
                        hierarchy,
                        &ks,
                        DiscardPolicy::InputOrder,
                    )?);
                }
                log_pairs = Some(reports);
            }
            Err(Error::LogTooLarge { user_days, max }) => {
                log_skipped = Some(format!(
                    "{user_days} user-days exceeds the exhaustive cap of {max}"
                ));
            }
            Err(other) => return Err(other),
        }
    }

    let mut ks_results = Vec::new();
    let mut epsilon_results = Vec::new();
    for level in Level::ALL {
        for kind in [CountKind::Symptom, CountKind::Normalization] {
            let params = shares.params(level, kind);
            ks_results.push(sampler_ks_test(params.scale_b, 100_000, master_seed)?);
            let delta = match kind {
                CountKind::Symptom => SYMPTOM_SENSITIVITY,
                CountKind::Normalization => NORMALIZATION_SENSITIVITY,
            };
            let estimate = estimate_epsilon_single_cell(
                0.0,
                delta,
                params.scale_b,
                MIN_EPSILON_TRIALS,
                20,
                master_seed,
            )?;
            epsilon_results.push((
                format!("{kind} level {level}"),
                estimate,
                params.epsilon_share,
            ));
        }
    }

    // Analytic composition across cells and levels: worst-case per-cell
    // ratios are epsilon shares, symptom charged once per level,
    // normalization per granularity.
    let mut ledger = BudgetLedger::new();
    for level in Level::ALL {
        ledger.charge(
            &BudgetLedger::symptom_charge_id(level),
            crate::anonymize::LedgerEntry {
                label: BudgetLedger::symptom_charge_id(level),
                kind: CountKind::Symptom,
                level,
                granularity: None,
                epsilon: shares.symptom[level.index()],
            },
        )?;
        for granularity in [Granularity::Daily, Granularity::Weekly] {
            ledger.charge(
                &BudgetLedger::normalization_charge_id(level, granularity),
                crate::anonymize::LedgerEntry {
                    label: BudgetLedger::normalization_charge_id(level, granularity),
                    kind: CountKind::Normalization,
                    level,
                    granularity: Some(granularity),
                    epsilon: shares.normalization[level.index()],
                },
            )?;
        }
    }
    let report = ledger_report(&ledger);

    Ok(VerificationReport {
        fixture_pairs,
        log_pairs,
        log_skipped,
        ks: ks_results,
        epsilon: epsilon_results,
        analytic_symptom_total: report.symptom_total,
        analytic_normalization_total: report.normalization_total,
        analytic_total: report.total,
    })
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use crate::ingest::{RegionId, SymptomId, UserId};
    use proptest::prelude::*;

    fn arb_log() -> impl Strategy<Value = Vec<SearchEvent>> {
        let counties = ["SantaClara", "SanBernardino", "Clark", "Washoe"];
        let symptoms = ["fever", "cough", "headache", "nausea", "chills"];
        proptest::collection::vec(
            (
                0..4usize,               // user
                0..3u32,                 // day offset
                0..counties.len(),       // county
                proptest::option::of(0..symptoms.len()),
            ),
            0..40,
        )
        .prop_map(move |rows| {
            rows.into_iter()
                .map(|(user, day, county, symptom)| SearchEvent {
                    user: UserId::new(format!("u{user}")),
                    date: chrono::NaiveDate::from_ymd_opt(2020, 6, 1 + day).unwrap(),
                    region2: RegionId::from(counties[county]),
                    symptom: symptom.map(|s| SymptomId::from(symptoms[s])),
                })
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn sensitivity_bounds_hold_exhaustively(log in arb_log(), seed in 0u64..500) {
            let hierarchy = crate::fixtures::table1_hierarchy();
            let keyspace = KeyspaceConfig::new(
                "2020-06-01".parse().unwrap(),
                "2020-06-03".parse().unwrap(),
                ["fever", "cough", "headache", "nausea", "chills"]
                    .iter()
                    .map(|s| SymptomId::from(*s))
                    .collect(),
                &hierarchy,
            )
            .unwrap();
            for pair in enumerate_neighbors(&log).unwrap() {
                for policy in [DiscardPolicy::InputOrder, DiscardPolicy::Randomized { seed }] {
                    sensitivity_check(&pair, &hierarchy, &keyspace, policy).unwrap();
                }
            }
        }
    }
}
