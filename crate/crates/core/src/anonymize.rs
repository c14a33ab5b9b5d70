//! Laplace anonymization and the epsilon budget ledger.
//!
//! The per-level epsilon shares are stored exactly as released-dataset
//! decimals; the Laplace scale is always derived as `sensitivity / epsilon`
//! rather than storing rounded scales. Symptom counts carry sensitivity 3
//! (cross-symptom cap), normalization counts sensitivity 1.
//!
//! Noise is sampled by inverse CDF from a uniform u in (-1/2, 1/2) that is
//! derived by hashing `(master seed, table identity, cell key)`. Every cell
//! therefore has its own deterministic stream slot: runs are reproducible
//! and the draw for a cell does not depend on evaluation order. This sampler
//! is floating-point inverse-CDF, not a hardened (snapping or geometric)
//! construction; the guarantee here is the analytic one, and floating-point
//! side channels are out of scope at desk scale.
//!
//! The ledger enforces the composition story: normalization noise is charged
//! once per temporal granularity and level, while symptom noise is charged
//! once per level, covering whichever granularity each `(symptom, region)`
//! series was assigned — noising the same series at both granularities is a
//! hard error.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::Datelike;
use sha2::{Digest, Sha256};

use crate::aggregate::{CountKey, CountKind, CountTable, Granularity};
use crate::error::{Error, Result};
use crate::ingest::{Level, RegionId, SymptomId};

pub const SYMPTOM_SENSITIVITY: f64 = 3.0;
pub const NORMALIZATION_SENSITIVITY: f64 = 1.0;

/// Per-level symptom epsilon shares; their sum is 1.638.
pub const SYMPTOM_EPSILON_SHARES: [f64; 3] = [0.168, 0.37, 1.1];

/// Per-level, per-granularity normalization epsilon shares; daily plus
/// weekly across levels sum to 0.042.
pub const NORMALIZATION_EPSILON_SHARES: [f64; 3] = [0.0023, 0.0047, 0.014];

pub const SYMPTOM_EPSILON_TOTAL: f64 = 1.638;
pub const NORMALIZATION_EPSILON_TOTAL: f64 = 0.042;
pub const TOTAL_EPSILON: f64 = 1.68;

/// Tolerance on ledger identities.
pub const LEDGER_TOLERANCE: f64 = 1e-9;

/// The epsilon shares in effect for a run. Defaults are the released
/// constants; overrides exist for experiments and are echoed into run
/// metadata so an overridden run can never be mistaken for a default one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonShares {
    pub symptom: [f64; 3],
    pub normalization: [f64; 3],
}

impl Default for EpsilonShares {
    fn default() -> Self {
        Self {
            symptom: SYMPTOM_EPSILON_SHARES,
            normalization: NORMALIZATION_EPSILON_SHARES,
        }
    }
}

impl EpsilonShares {
    pub fn is_default(&self) -> bool {
        *self == Self::default()
    }

    pub fn share(&self, level: Level, kind: CountKind) -> f64 {
        match kind {
            CountKind::Symptom => self.symptom[level.index()],
            CountKind::Normalization => self.normalization[level.index()],
        }
    }

    pub fn params(&self, level: Level, kind: CountKind) -> NoiseParams {
        let epsilon_share = self.share(level, kind);
        let sensitivity = match kind {
            CountKind::Symptom => SYMPTOM_SENSITIVITY,
            CountKind::Normalization => NORMALIZATION_SENSITIVITY,
        };
        let scale_b = sensitivity / epsilon_share;
        NoiseParams {
            level,
            kind,
            epsilon_share,
            sensitivity,
            scale_b,
            sigma: std::f64::consts::SQRT_2 * scale_b,
        }
    }

    /// Total epsilon a run over `levels` consumes: one symptom charge per
    /// level plus daily and weekly normalization charges per level.
    pub fn expected_total(&self, levels: &[Level]) -> f64 {
        levels
            .iter()
            .map(|l| self.symptom[l.index()] + 2.0 * self.normalization[l.index()])
            .sum()
    }
}

/// Laplace parameters for one level and count kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub level: Level,
    pub kind: CountKind,
    pub epsilon_share: f64,
    pub sensitivity: f64,
    pub scale_b: f64,
    pub sigma: f64,
}

/// Default (released-constant) noise parameters.
pub fn noise_params(level: Level, kind: CountKind) -> NoiseParams {
    EpsilonShares::default().params(level, kind)
}

/// A deterministic per-table random stream. Slots are keyed either by cell
/// key or by a plain index; the same `(master seed, table id, slot)` always
/// yields the same uniform, independent of evaluation order.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    master_seed: u64,
    table_id: String,
}

impl NoiseStream {
    pub fn new(master_seed: u64, table_id: impl Into<String>) -> Self {
        Self {
            master_seed,
            table_id: table_id.into(),
        }
    }

    /// Canonical stream for a physical count table.
    pub fn for_table(
        master_seed: u64,
        kind: CountKind,
        granularity: Granularity,
        level: Level,
    ) -> Self {
        Self::new(master_seed, physical_table_id(kind, granularity, level))
    }

    pub fn table_id(&self) -> &str {
        &self.table_id
    }

    pub fn key_slot(&self, key: &CountKey) -> StreamSlot {
        let mut payload = Vec::with_capacity(64);
        payload.push(0x01);
        payload.extend_from_slice(&key.period.num_days_from_ce().to_le_bytes());
        match &key.symptom {
            Some(symptom) => {
                payload.push(0x01);
                push_str(&mut payload, symptom.as_str());
            }
            None => payload.push(0x00),
        }
        push_str(&mut payload, key.region.as_str());
        self.slot(&payload)
    }

    pub fn index_slot(&self, index: u64) -> StreamSlot {
        let mut payload = Vec::with_capacity(9);
        payload.push(0x02);
        payload.extend_from_slice(&index.to_le_bytes());
        self.slot(&payload)
    }

    fn slot(&self, payload: &[u8]) -> StreamSlot {
        let mut hasher = Sha256::new();
        hasher.update(self.master_seed.to_le_bytes());
        push_str_hash(&mut hasher, &self.table_id);
        hasher.update(payload);
        let digest = hasher.finalize();
        let x = u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"));
        // (k + 1/2) * 2^-53 lies strictly inside (0, 1) and is symmetric
        // around 1/2, so the centered uniform never hits 0 or +-1/2.
        let uniform01 = ((x >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
        StreamSlot {
            u: uniform01 - 0.5,
        }
    }
}

fn push_str(payload: &mut Vec<u8>, s: &str) {
    payload.extend_from_slice(&(s.len() as u32).to_le_bytes());
    payload.extend_from_slice(s.as_bytes());
}

fn push_str_hash(hasher: &mut Sha256, s: &str) {
    hasher.update((s.len() as u32).to_le_bytes());
    hasher.update(s.as_bytes());
}

pub fn physical_table_id(kind: CountKind, granularity: Granularity, level: Level) -> String {
    format!("{kind}/{granularity}/L{level}")
}

/// One slot of a noise stream: a centered uniform in (-1/2, 1/2).
#[derive(Debug, Clone, Copy)]
pub struct StreamSlot {
    u: f64,
}

impl StreamSlot {
    /// Slot with an explicit uniform, for tests that force specific draws.
    pub fn from_centered_uniform(u: f64) -> Result<Self> {
        if u > -0.5 && u < 0.5 {
            Ok(Self { u })
        } else {
            Err(Error::InvalidConfig(format!(
                "centered uniform must lie in (-1/2, 1/2), got {u}"
            )))
        }
    }

    pub fn centered_uniform(self) -> f64 {
        self.u
    }
}

/// Laplace(0, b) inverse CDF on a centered uniform in (-1/2, 1/2).
pub fn laplace_inv_cdf(u: f64, scale_b: f64) -> f64 {
    -scale_b * u.signum() * (-2.0 * u.abs()).ln_1p()
}

/// Laplace(0, b) CDF.
pub fn laplace_cdf(x: f64, scale_b: f64) -> f64 {
    if x < 0.0 {
        0.5 * (x / scale_b).exp()
    } else {
        1.0 - 0.5 * (-x / scale_b).exp()
    }
}

/// One draw from Laplace(0, b) at the given stream slot.
pub fn sample_laplace(scale_b: f64, slot: StreamSlot) -> Result<f64> {
    if !(scale_b > 0.0) {
        return Err(Error::NonPositiveScale { scale: scale_b });
    }
    Ok(laplace_inv_cdf(slot.u, scale_b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEntry {
    pub label: String,
    pub kind: CountKind,
    pub level: Level,
    pub granularity: Option<Granularity>,
    pub epsilon: f64,
}

/// Serialized accumulator of epsilon charges, appended to at table
/// granularity. Also tracks which `(symptom, region)` series was noised at
/// which temporal granularity, so charging daily and weekly symptom noise
/// for the same series aborts.
#[derive(Debug, Default)]
pub struct BudgetLedger {
    entries: Vec<LedgerEntry>,
    charged: BTreeSet<String>,
    series: BTreeMap<(Level, SymptomId, RegionId), Granularity>,
}

impl BudgetLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn symptom_charge_id(level: Level) -> String {
        format!("symptom_l{level}")
    }

    pub fn normalization_charge_id(level: Level, granularity: Granularity) -> String {
        format!("normalization_{granularity}_l{level}")
    }

    pub fn is_charged(&self, charge_id: &str) -> bool {
        self.charged.contains(charge_id)
    }

    pub fn charge(&mut self, charge_id: &str, entry: LedgerEntry) -> Result<()> {
        if !self.charged.insert(charge_id.to_owned()) {
            return Err(Error::DoubleCharge {
                charge: charge_id.to_owned(),
            });
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Record that a symptom series was noised at one granularity. A second
    /// registration for the same series is always an error: at the same
    /// granularity it would be double noising, at the other it would charge
    /// budget twice.
    pub fn register_series(
        &mut self,
        level: Level,
        symptom: &SymptomId,
        region: &RegionId,
        granularity: Granularity,
    ) -> Result<()> {
        let key = (level, symptom.clone(), region.clone());
        if let Some(existing) = self.series.get(&key) {
            return Err(Error::GranularityConflict {
                level: level.as_u8(),
                symptom: symptom.to_string(),
                region: region.to_string(),
                existing: existing.to_string(),
                requested: granularity.to_string(),
            });
        }
        self.series.insert(key, granularity);
        Ok(())
    }

    pub fn series_granularity(
        &self,
        level: Level,
        symptom: &SymptomId,
        region: &RegionId,
    ) -> Option<Granularity> {
        self.series
            .get(&(level, symptom.clone(), region.clone()))
            .copied()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.epsilon).sum()
    }
}

/// Per-kind subtotals and shares of the whole budget. `delta` is
/// structurally zero: every cell of the fixed keyspace is noised whether or
/// not it contains user data.
#[derive(Debug, Clone)]
pub struct BudgetReport {
    pub entries: Vec<LedgerEntry>,
    pub symptom_total: f64,
    pub normalization_total: f64,
    pub total: f64,
    pub symptom_share: f64,
    pub normalization_share: f64,
    pub delta: f64,
}

impl BudgetReport {
    pub fn expect_total(&self, expected: f64) -> Result<()> {
        if (self.total - expected).abs() <= LEDGER_TOLERANCE {
            Ok(())
        } else {
            Err(Error::LedgerMismatch {
                expected,
                actual: self.total,
            })
        }
    }

    /// CSV `entry,epsilon` plus a TOTAL row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |source| Error::Csv {
            path: "<writer>".into(),
            source,
        };
        w.write_record(["entry", "epsilon"]).map_err(io)?;
        for entry in &self.entries {
            w.write_record([entry.label.as_str(), &format!("{}", entry.epsilon)])
                .map_err(io)?;
        }
        w.write_record(["TOTAL", &format!("{}", self.total)])
            .map_err(io)?;
        w.flush().map_err(|source| Error::Io {
            path: "<writer>".into(),
            source,
        })?;
        Ok(())
    }
}

pub fn ledger_report(ledger: &BudgetLedger) -> BudgetReport {
    let symptom_total: f64 = ledger
        .entries()
        .iter()
        .filter(|e| e.kind == CountKind::Symptom)
        .map(|e| e.epsilon)
        .sum();
    let normalization_total: f64 = ledger
        .entries()
        .iter()
        .filter(|e| e.kind == CountKind::Normalization)
        .map(|e| e.epsilon)
        .sum();
    let total = ledger.total();
    BudgetReport {
        entries: ledger.entries().to_vec(),
        symptom_total,
        normalization_total,
        total,
        symptom_share: if total > 0.0 { symptom_total / total } else { 0.0 },
        normalization_share: if total > 0.0 {
            normalization_total / total
        } else {
            0.0
        },
        delta: 0.0,
    }
}

fn ensure_params_match(table: &CountTable, params: &NoiseParams) -> Result<()> {
    if table.kind() != params.kind || table.level() != params.level {
        return Err(Error::ParamsMismatch {
            expected: format!("{}/L{}", table.kind(), table.level()),
            found: format!("{}/L{}", params.kind, params.level),
        });
    }
    Ok(())
}

fn charge_for_table(
    ledger: &mut BudgetLedger,
    params: &NoiseParams,
    granularity: Granularity,
) -> Result<()> {
    match params.kind {
        CountKind::Symptom => {
            // One logical charge per level, shared by the daily and weekly
            // physical tables: each series is only ever noised at one of the
            // two granularities.
            let id = BudgetLedger::symptom_charge_id(params.level);
            if !ledger.is_charged(&id) {
                ledger.charge(
                    &id,
                    LedgerEntry {
                        label: id.clone(),
                        kind: CountKind::Symptom,
                        level: params.level,
                        granularity: None,
                        epsilon: params.epsilon_share,
                    },
                )?;
            }
        }
        CountKind::Normalization => {
            let id = BudgetLedger::normalization_charge_id(params.level, granularity);
            ledger.charge(
                &id,
                LedgerEntry {
                    label: id.clone(),
                    kind: CountKind::Normalization,
                    level: params.level,
                    granularity: Some(granularity),
                    epsilon: params.epsilon_share,
                },
            )?;
        }
    }
    Ok(())
}

/// Add an independent Laplace draw to every cell of the full keyspace,
/// including zeros. The ledger is charged exactly once per table identity;
/// for symptom tables every `(symptom, region)` series is registered at the
/// table's granularity.
pub fn anonymize_table(
    raw: &CountTable,
    params: &NoiseParams,
    stream: &NoiseStream,
    ledger: &mut BudgetLedger,
) -> Result<CountTable> {
    if raw.is_noisy() {
        return Err(Error::AlreadyNoisy {
            table: physical_table_id(raw.kind(), raw.granularity(), raw.level()),
        });
    }
    ensure_params_match(raw, params)?;

    if raw.kind() == CountKind::Symptom {
        let mut series = BTreeSet::new();
        for (key, _) in raw.iter() {
            let symptom = key.symptom.clone().expect("symptom tables carry symptoms");
            series.insert((symptom, key.region.clone()));
        }
        for (symptom, region) in series {
            ledger.register_series(raw.level(), &symptom, &region, raw.granularity())?;
        }
    }
    charge_for_table(ledger, params, raw.granularity())?;

    let mut noisy = CountTable::new_empty_noisy(raw.kind(), raw.granularity(), raw.level());
    for (key, value) in raw.iter() {
        let draw = sample_laplace(params.scale_b, stream.key_slot(key))?;
        noisy.insert_noisy(key.clone(), value + draw);
    }
    Ok(noisy)
}

/// Noise the cells of one `(symptom, region)` series out of a raw symptom
/// table, appending them to `out`. Draws come from the same keyed stream as
/// a whole-table pass, so the two routes agree bit for bit.
pub fn anonymize_symptom_series(
    raw: &CountTable,
    symptom: &SymptomId,
    region: &RegionId,
    params: &NoiseParams,
    stream: &NoiseStream,
    ledger: &mut BudgetLedger,
    out: &mut CountTable,
) -> Result<()> {
    if raw.is_noisy() {
        return Err(Error::AlreadyNoisy {
            table: physical_table_id(raw.kind(), raw.granularity(), raw.level()),
        });
    }
    ensure_params_match(raw, params)?;
    if raw.kind() != CountKind::Symptom
        || out.kind() != CountKind::Symptom
        || out.granularity() != raw.granularity()
        || out.level() != raw.level()
    {
        return Err(Error::ParamsMismatch {
            expected: format!("{}/{}/L{}", raw.kind(), raw.granularity(), raw.level()),
            found: format!("{}/{}/L{}", out.kind(), out.granularity(), out.level()),
        });
    }

    ledger.register_series(raw.level(), symptom, region, raw.granularity())?;
    charge_for_table(ledger, params, raw.granularity())?;

    for (key, value) in raw.iter() {
        if key.symptom.as_ref() != Some(symptom) || &key.region != region {
            continue;
        }
        let draw = sample_laplace(params.scale_b, stream.key_slot(key))?;
        out.insert_noisy(key.clone(), value + draw);
    }
    Ok(())
}

/// Start an empty noisy symptom table to collect series noised one by one.
pub fn empty_noisy_symptom_table(granularity: Granularity, level: Level) -> CountTable {
    CountTable::new_empty_noisy(CountKind::Symptom, granularity, level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::KeyspaceConfig;
    use crate::fixtures;

    fn keyspace() -> KeyspaceConfig {
        KeyspaceConfig::new(
            "2020-06-01".parse().unwrap(),
            "2020-06-10".parse().unwrap(),
            fixtures::table1_lexicon().symptoms().to_vec(),
            &fixtures::table1_hierarchy(),
        )
        .unwrap()
    }

    #[test]
    fn noise_params_match_released_tables_to_three_decimals() {
        let cases = [
            (0, CountKind::Symptom, 17.857, 25.254, 0.168),
            (1, CountKind::Symptom, 8.108, 11.467, 0.37),
            (2, CountKind::Symptom, 2.727, 3.857, 1.1),
            (0, CountKind::Normalization, 434.783, 614.875, 0.0023),
            (1, CountKind::Normalization, 212.766, 300.897, 0.0047),
            (2, CountKind::Normalization, 71.429, 101.015, 0.014),
        ];
        for (level, kind, b, sigma, epsilon) in cases {
            let params = noise_params(Level::new(level).unwrap(), kind);
            assert!((params.scale_b - b).abs() < 5e-4, "b for {kind} L{level}");
            assert!((params.sigma - sigma).abs() < 5e-4, "sigma for {kind} L{level}");
            assert_eq!(params.epsilon_share, epsilon);
            assert!((params.sigma - std::f64::consts::SQRT_2 * params.scale_b).abs() < 1e-12);
        }
    }

    #[test]
    fn share_sums_reproduce_budget_identities() {
        assert!((SYMPTOM_EPSILON_SHARES.iter().sum::<f64>() - SYMPTOM_EPSILON_TOTAL).abs() < 1e-9);
        assert!(
            (2.0 * NORMALIZATION_EPSILON_SHARES.iter().sum::<f64>()
                - NORMALIZATION_EPSILON_TOTAL)
                .abs()
                < 1e-9
        );
        assert!(
            (EpsilonShares::default().expected_total(&Level::ALL) - TOTAL_EPSILON).abs() < 1e-9
        );
    }

    #[test]
    fn inverse_cdf_median_is_zero() {
        assert_eq!(laplace_inv_cdf(0.0, 17.857), 0.0);
        let slot = StreamSlot::from_centered_uniform(0.0).unwrap();
        assert_eq!(sample_laplace(2.727, slot).unwrap(), 0.0);
    }

    #[test]
    fn non_positive_scale_aborts() {
        let slot = StreamSlot::from_centered_uniform(0.25).unwrap();
        assert!(sample_laplace(0.0, slot).is_err());
        assert!(sample_laplace(-1.0, slot).is_err());
    }

    #[test]
    fn stream_slots_are_deterministic_and_keyed() {
        let a = NoiseStream::new(7, "symptom/daily/L2");
        let b = NoiseStream::new(7, "symptom/daily/L2");
        let other_table = NoiseStream::new(7, "symptom/weekly/L2");
        let other_seed = NoiseStream::new(8, "symptom/daily/L2");
        let key = CountKey {
            period: "2020-06-03".parse().unwrap(),
            symptom: Some(SymptomId::from("fever")),
            region: RegionId::from("Clark"),
        };
        assert_eq!(a.key_slot(&key).u, b.key_slot(&key).u);
        assert_ne!(a.key_slot(&key).u, other_table.key_slot(&key).u);
        assert_ne!(a.key_slot(&key).u, other_seed.key_slot(&key).u);
        assert_eq!(a.index_slot(42).u, b.index_slot(42).u);
        assert_ne!(a.index_slot(42).u, a.index_slot(43).u);
    }

    #[test]
    fn sample_moments_match_laplace_at_1e5_draws() {
        let b = 2.727;
        let stream = NoiseStream::new(123, "moments-check");
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|i| sample_laplace(b, stream.index_slot(i)).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let variance =
            draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let expected = 2.0 * b * b;
        assert!(mean.abs() < 0.05, "sample mean {mean}");
        assert!(
            (variance - expected).abs() / expected < 0.05,
            "sample variance {variance} vs {expected}"
        );
    }

    #[test]
    fn all_zero_table_gets_noise_in_every_cell() {
        let ks = KeyspaceConfig::new(
            "2020-06-01".parse().unwrap(),
            "2020-06-10".parse().unwrap(),
            vec![SymptomId::from("fever")],
            &fixtures::table1_hierarchy(),
        )
        .unwrap();
        let raw = CountTable::new_zero(CountKind::Symptom, Granularity::Daily, Level::COUNTRY, &ks);
        assert_eq!(raw.len(), 10);
        let params = noise_params(Level::COUNTRY, CountKind::Symptom);
        let stream = NoiseStream::for_table(7, CountKind::Symptom, Granularity::Daily, Level::COUNTRY);
        let mut ledger = BudgetLedger::new();
        let noisy = anonymize_table(&raw, &params, &stream, &mut ledger).unwrap();
        assert_eq!(noisy.len(), 10);
        assert!(noisy.is_noisy());
        for (_, value) in noisy.iter() {
            assert_ne!(value, 0.0);
        }
        assert!((ledger.total() - 0.168).abs() < 1e-12);
    }

    #[test]
    fn double_noising_aborts() {
        let ks = keyspace();
        let raw = CountTable::new_zero(CountKind::Normalization, Granularity::Daily, Level::COUNTY, &ks);
        let params = noise_params(Level::COUNTY, CountKind::Normalization);
        let stream =
            NoiseStream::for_table(7, CountKind::Normalization, Granularity::Daily, Level::COUNTY);
        let mut ledger = BudgetLedger::new();
        let noisy = anonymize_table(&raw, &params, &stream, &mut ledger).unwrap();
        let err = anonymize_table(&noisy, &params, &stream, &mut ledger).unwrap_err();
        assert!(matches!(err, Error::AlreadyNoisy { .. }), "{err}");
    }

    #[test]
    fn charging_daily_and_weekly_symptom_noise_for_one_series_aborts() {
        let ks = keyspace();
        let daily = CountTable::new_zero(CountKind::Symptom, Granularity::Daily, Level::COUNTY, &ks);
        let weekly = crate::aggregate::sum_weekly(&daily, &ks).unwrap();
        let params = noise_params(Level::COUNTY, CountKind::Symptom);
        let mut ledger = BudgetLedger::new();
        anonymize_table(
            &daily,
            &params,
            &NoiseStream::for_table(7, CountKind::Symptom, Granularity::Daily, Level::COUNTY),
            &mut ledger,
        )
        .unwrap();
        let err = anonymize_table(
            &weekly,
            &params,
            &NoiseStream::for_table(7, CountKind::Symptom, Granularity::Weekly, Level::COUNTY),
            &mut ledger,
        )
        .unwrap_err();
        assert!(matches!(err, Error::GranularityConflict { .. }), "{err}");
    }

    #[test]
    fn normalization_charges_daily_and_weekly_separately() {
        let ks = keyspace();
        let daily =
            CountTable::new_zero(CountKind::Normalization, Granularity::Daily, Level::COUNTY, &ks);
        let weekly = crate::aggregate::sum_weekly(&daily, &ks).unwrap();
        let params = noise_params(Level::COUNTY, CountKind::Normalization);
        let mut ledger = BudgetLedger::new();
        anonymize_table(
            &daily,
            &params,
            &NoiseStream::for_table(7, CountKind::Normalization, Granularity::Daily, Level::COUNTY),
            &mut ledger,
        )
        .unwrap();
        anonymize_table(
            &weekly,
            &params,
            &NoiseStream::for_table(7, CountKind::Normalization, Granularity::Weekly, Level::COUNTY),
            &mut ledger,
        )
        .unwrap();
        assert!((ledger.total() - 2.0 * 0.014).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_draw_returns_the_raw_value() {
        let raw_value = 5.0;
        let slot = StreamSlot::from_centered_uniform(0.0).unwrap();
        let noisy = raw_value + sample_laplace(2.727, slot).unwrap();
        assert_eq!(noisy, 5.0);
    }

    #[test]
    fn series_route_matches_whole_table_route_bit_for_bit() {
        let ks = keyspace();
        let level = Level::COUNTY;
        let raw = {
            let contribs = crate::bounding::bound_all(
                &fixtures::table1_events(),
                &fixtures::table1_hierarchy(),
                crate::bounding::DiscardPolicy::InputOrder,
            )
            .unwrap();
            // Fixture is dated 2020-06-03, inside the keyspace.
            crate::aggregate::aggregate_symptom_daily(&contribs, level, &ks).unwrap()
        };
        let params = noise_params(level, CountKind::Symptom);
        let stream = NoiseStream::for_table(7, CountKind::Symptom, Granularity::Daily, level);

        let mut ledger_a = BudgetLedger::new();
        let whole = anonymize_table(&raw, &params, &stream, &mut ledger_a).unwrap();

        let mut ledger_b = BudgetLedger::new();
        let mut partial = empty_noisy_symptom_table(Granularity::Daily, level);
        // Reverse order on purpose: draws are keyed, not sequential.
        for symptom in ks.symptoms().iter().rev() {
            for region in ks.regions(level).iter().rev() {
                anonymize_symptom_series(
                    &raw,
                    symptom,
                    region,
                    &params,
                    &stream,
                    &mut ledger_b,
                    &mut partial,
                )
                .unwrap();
            }
        }
        assert_eq!(whole.len(), partial.len());
        for (key, value) in whole.iter() {
            assert_eq!(partial.get(key), Some(value), "cell {key}");
        }
        assert_eq!(ledger_a.total(), ledger_b.total());
    }

    #[test]
    fn ledger_report_shares() {
        let mut ledger = BudgetLedger::new();
        for level in Level::ALL {
            let params = noise_params(level, CountKind::Symptom);
            charge_for_table(&mut ledger, &params, Granularity::Daily).unwrap();
            let norm = noise_params(level, CountKind::Normalization);
            charge_for_table(&mut ledger, &norm, Granularity::Daily).unwrap();
            charge_for_table(&mut ledger, &norm, Granularity::Weekly).unwrap();
        }
        let report = ledger_report(&ledger);
        assert!((report.symptom_total - SYMPTOM_EPSILON_TOTAL).abs() < 1e-9);
        assert!((report.normalization_total - NORMALIZATION_EPSILON_TOTAL).abs() < 1e-9);
        report.expect_total(TOTAL_EPSILON).unwrap();
        assert!((report.symptom_share - 0.975).abs() < 1e-3);
        assert!((report.normalization_share - 0.025).abs() < 1e-3);
        assert_eq!(report.delta, 0.0);
        assert!(report.expect_total(1.5).is_err());
    }
}
