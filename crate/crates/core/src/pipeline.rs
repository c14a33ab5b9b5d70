//! End-to-end orchestration: ingest, bound, aggregate, anonymize, report.
//!
//! Raw per-user intermediates never reach the output directory unless the
//! explicit debug-unsafe flag is set; the release files contain only noisy,
//! post-processed data. Every run writes a metadata file carrying the
//! effective configuration, the input digests and a config hash: two runs
//! with equal hashes produce byte-identical outputs.

use std::fs;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::aggregate::{
    aggregate_normalization_daily, aggregate_symptom_daily, sum_weekly, CountKind, CountTable,
    Granularity, KeyspaceConfig,
};
use crate::anonymize::{
    anonymize_table, ledger_report, BudgetLedger, BudgetReport, LedgerEntry, NoiseStream,
    TOTAL_EPSILON,
};
use crate::bounding::{bound_all, dump_contributions_csv, DiscardPolicy};
use crate::config::PipelineConfig;
use crate::error::{at_stage, Error, Result};
use crate::ingest::{classify_and_stream, RegionHierarchy, SymptomLexicon};
use crate::report::{
    calibrate_all_regions, compute_metric_records, emit_dataset, GranularityPlan,
    LevelStageInputs, MetricRecord, PlanParams,
};

#[derive(Debug)]
pub struct OutputFiles {
    pub data: PathBuf,
    pub diagnostics: PathBuf,
    pub plan: PathBuf,
    pub ledger: PathBuf,
    pub metadata: PathBuf,
}

#[derive(Debug)]
pub struct RunSummary {
    pub config_hash: String,
    pub records_total: usize,
    pub kept_rows: usize,
    pub dropped_rows: usize,
    pub plan_entries: usize,
    pub ledger: BudgetReport,
    pub files: OutputFiles,
}

/// The ledger a run over these levels must produce. Charges depend only on
/// configuration (the keyspace is fixed and every series is noised), so the
/// ledger can be computed without touching any data.
pub fn planned_ledger(config: &PipelineConfig) -> Result<BudgetLedger> {
    let mut ledger = BudgetLedger::new();
    for level in &config.levels {
        for granularity in [Granularity::Daily, Granularity::Weekly] {
            let id = BudgetLedger::normalization_charge_id(*level, granularity);
            ledger.charge(
                &id,
                LedgerEntry {
                    label: id.clone(),
                    kind: CountKind::Normalization,
                    level: *level,
                    granularity: Some(granularity),
                    epsilon: config.shares.normalization[level.index()],
                },
            )?;
        }
        let id = BudgetLedger::symptom_charge_id(*level);
        ledger.charge(
            &id,
            LedgerEntry {
                label: id.clone(),
                kind: CountKind::Symptom,
                level: *level,
                granularity: None,
                epsilon: config.shares.symptom[level.index()],
            },
        )?;
    }
    Ok(ledger)
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<RunSummary> {
    // Ingest. File bytes are digested so the config hash covers content,
    // not just paths.
    let hierarchy_bytes = at_stage("ingest", read_bytes(&config.hierarchy_path))?;
    let lexicon_bytes = at_stage("ingest", read_bytes(&config.lexicon_path))?;
    let log_bytes = at_stage("ingest", read_bytes(&config.log_path))?;
    let hierarchy = at_stage(
        "ingest",
        RegionHierarchy::from_reader(hierarchy_bytes.as_slice(), &config.hierarchy_path),
    )?;
    let lexicon = at_stage(
        "ingest",
        SymptomLexicon::from_reader(lexicon_bytes.as_slice(), &config.lexicon_path),
    )?;
    let events = at_stage(
        "ingest",
        classify_and_stream(log_bytes.as_slice(), &config.log_path, &lexicon, &hierarchy),
    )?;

    let (start, end) = match config.date_range {
        Some(range) => range,
        None => {
            let min = events.iter().map(|e| e.date).min();
            let max = events.iter().map(|e| e.date).max();
            match (min, max) {
                (Some(min), Some(max)) => (min, max),
                _ => return Err(Error::Stage { stage: "ingest", source: Box::new(Error::EmptyLog) }),
            }
        }
    };
    let keyspace = at_stage(
        "ingest",
        KeyspaceConfig::new(start, end, lexicon.symptoms().to_vec(), &hierarchy),
    )?;
    let sample_period = clamp_range("sample_period", config.sample_period, (start, end))?;
    let calibration_window =
        clamp_range("calibration_window", config.calibration_window, (start, end))?;

    // Bound.
    let contributions = at_stage(
        "bound",
        bound_all(&events, &hierarchy, DiscardPolicy::InputOrder),
    )?;

    // Aggregate, anonymize and plan per level.
    let mut ledger = BudgetLedger::new();
    let mut plan = GranularityPlan::new();
    let mut records: Vec<MetricRecord> = Vec::new();
    let plan_params = PlanParams {
        window_size: config.window_size,
        switch_threshold: config.switch_threshold,
        drop_fraction_threshold: config.drop_fraction_threshold,
        sample_start: sample_period.0,
        sample_end: sample_period.1,
    };
    let mut debug_tables: Vec<(String, CountTable)> = Vec::new();

    for &level in &config.levels {
        let raw_symptom_daily = at_stage(
            "aggregate",
            aggregate_symptom_daily(&contributions, level, &keyspace),
        )?;
        let raw_norm_daily = at_stage(
            "aggregate",
            aggregate_normalization_daily(&contributions, level, &keyspace),
        )?;
        let raw_symptom_weekly = at_stage("aggregate", sum_weekly(&raw_symptom_daily, &keyspace))?;
        let raw_norm_weekly = at_stage("aggregate", sum_weekly(&raw_norm_daily, &keyspace))?;

        let norm_params = config.shares.params(level, CountKind::Normalization);
        let noisy_norm_daily = at_stage(
            "anonymize",
            anonymize_table(
                &raw_norm_daily,
                &norm_params,
                &NoiseStream::for_table(
                    config.master_seed,
                    CountKind::Normalization,
                    Granularity::Daily,
                    level,
                ),
                &mut ledger,
            ),
        )?;
        let noisy_norm_weekly = at_stage(
            "anonymize",
            anonymize_table(
                &raw_norm_weekly,
                &norm_params,
                &NoiseStream::for_table(
                    config.master_seed,
                    CountKind::Normalization,
                    Granularity::Weekly,
                    level,
                ),
                &mut ledger,
            ),
        )?;

        let stage_inputs = LevelStageInputs {
            level,
            raw_symptom_daily: &raw_symptom_daily,
            raw_symptom_weekly: &raw_symptom_weekly,
            noisy_norm_daily: &noisy_norm_daily,
            hierarchy: &hierarchy,
            keyspace: &keyspace,
        };
        let stage = at_stage(
            "report",
            crate::report::plan_and_anonymize_level(
                &stage_inputs,
                &config.shares,
                config.master_seed,
                &plan_params,
                &mut ledger,
            ),
        )?;

        // Every series at this level must have exactly one assignment.
        let expected = keyspace.symptoms().len() * keyspace.regions(level).len();
        let assigned = stage
            .plan
            .iter()
            .filter(|((_, region), _)| keyspace.regions(level).contains(region))
            .count();
        if assigned != expected {
            return Err(Error::VerificationFailed(format!(
                "level {level}: {assigned} granularity assignments for {expected} series"
            )));
        }

        let symptom_params = config.shares.params(level, CountKind::Symptom);
        records.extend(at_stage(
            "report",
            compute_metric_records(
                &stage.noisy_symptom_daily,
                &noisy_norm_daily,
                &symptom_params,
                &norm_params,
            ),
        )?);
        records.extend(at_stage(
            "report",
            compute_metric_records(
                &stage.noisy_symptom_weekly,
                &noisy_norm_weekly,
                &symptom_params,
                &norm_params,
            ),
        )?);
        plan.merge(stage.plan);

        if config.debug_unsafe {
            debug_tables.push((format!("raw_symptom_daily_l{level}.csv"), raw_symptom_daily));
            debug_tables.push((format!("raw_normalization_daily_l{level}.csv"), raw_norm_daily));
        }
    }

    // The runtime ledger must equal the planned, data-independent one.
    let report = ledger_report(&ledger);
    let planned = ledger_report(&planned_ledger(config)?);
    let mut actual_entries: Vec<(String, f64)> = report
        .entries
        .iter()
        .map(|e| (e.label.clone(), e.epsilon))
        .collect();
    let mut planned_entries: Vec<(String, f64)> = planned
        .entries
        .iter()
        .map(|e| (e.label.clone(), e.epsilon))
        .collect();
    actual_entries.sort_by(|a, b| a.0.cmp(&b.0));
    planned_entries.sort_by(|a, b| a.0.cmp(&b.0));
    if actual_entries != planned_entries {
        return Err(Error::VerificationFailed(
            "runtime ledger diverged from the planned ledger".to_owned(),
        ));
    }
    at_stage(
        "anonymize",
        report.expect_total(config.shares.expected_total(&config.levels)),
    )?;
    if config.uses_default_constants() {
        at_stage("anonymize", report.expect_total(TOTAL_EPSILON))?;
    }

    // Report: calibrate, emit, metadata.
    fs::create_dir_all(&config.output_dir).map_err(|source| Error::Io {
        path: config.output_dir.clone(),
        source,
    })?;
    let scaling = calibrate_all_regions(&records, calibration_window);
    let emit = at_stage(
        "report",
        emit_dataset(&records, &scaling, &plan, &config.output_dir),
    )?;

    let ledger_path = config.output_dir.join("ledger.csv");
    let ledger_file = fs::File::create(&ledger_path).map_err(|source| Error::Io {
        path: ledger_path.clone(),
        source,
    })?;
    at_stage("report", report.write_csv(ledger_file))?;

    let config_hash = config_hash(config, &hierarchy_bytes, &lexicon_bytes, &log_bytes);
    let metadata_path = config.output_dir.join("run_metadata.json");
    let metadata = serde_json::json!({
        "config": config.canonical_value(),
        "config_hash": config_hash,
        "input_digests": {
            "hierarchy_sha256": hex_digest(&hierarchy_bytes),
            "lexicon_sha256": hex_digest(&lexicon_bytes),
            "log_sha256": hex_digest(&log_bytes),
        },
        "effective_date_range": {
            "start": start.to_string(),
            "end": end.to_string(),
        },
        "effective_sample_period": {
            "start": sample_period.0.to_string(),
            "end": sample_period.1.to_string(),
        },
        "effective_calibration_window": {
            "start": calibration_window.0.to_string(),
            "end": calibration_window.1.to_string(),
        },
        "paper_constants": config.uses_default_constants(),
        "epsilon": {
            "symptom_total": report.symptom_total,
            "normalization_total": report.normalization_total,
            "total": report.total,
            "delta": 0.0,
        },
        "counts": {
            "events": events.len(),
            "user_days": contributions.len(),
            "metric_records": records.len(),
            "kept_rows": emit.kept_rows,
            "dropped_rows": emit.dropped_rows,
        },
    });
    fs::write(
        &metadata_path,
        format!("{}\n", serde_json::to_string_pretty(&metadata).expect("json serializes")),
    )
    .map_err(|source| Error::Io {
        path: metadata_path.clone(),
        source,
    })?;

    if config.debug_unsafe {
        let debug_dir = config.output_dir.join("debug");
        fs::create_dir_all(&debug_dir).map_err(|source| Error::Io {
            path: debug_dir.clone(),
            source,
        })?;
        let contrib_path = debug_dir.join("bounded_contributions.csv");
        let contrib_file = fs::File::create(&contrib_path).map_err(|source| Error::Io {
            path: contrib_path,
            source,
        })?;
        dump_contributions_csv(&contributions, contrib_file)?;
        for (name, table) in &debug_tables {
            let path = debug_dir.join(name);
            let file = fs::File::create(&path).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
            table.write_csv(file)?;
        }
    }

    Ok(RunSummary {
        config_hash,
        records_total: records.len(),
        kept_rows: emit.kept_rows,
        dropped_rows: emit.dropped_rows,
        plan_entries: plan.len(),
        ledger: report,
        files: OutputFiles {
            data: emit.data_path,
            diagnostics: emit.diagnostics_path,
            plan: emit.plan_path,
            ledger: ledger_path,
            metadata: metadata_path,
        },
    })
}

fn read_bytes(path: &std::path::Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn config_hash(
    config: &PipelineConfig,
    hierarchy: &[u8],
    lexicon: &[u8],
    log: &[u8],
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config.canonical_value().to_string().as_bytes());
    hasher.update(Sha256::digest(hierarchy));
    hasher.update(Sha256::digest(lexicon));
    hasher.update(Sha256::digest(log));
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn clamp_range(
    name: &str,
    requested: Option<(chrono::NaiveDate, chrono::NaiveDate)>,
    keyspace: (chrono::NaiveDate, chrono::NaiveDate),
) -> Result<(chrono::NaiveDate, chrono::NaiveDate)> {
    match requested {
        None => Ok(keyspace),
        Some((start, end)) => {
            if start < keyspace.0 || end > keyspace.1 {
                Err(Error::InvalidConfig(format!(
                    "{name} {start}..{end} exceeds the keyspace range {}..{}",
                    keyspace.0, keyspace.1
                )))
            } else {
                Ok((start, end))
            }
        }
    }
}
