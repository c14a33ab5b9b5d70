//! Raw count aggregation over a fixed, data-independent keyspace.
//!
//! Every table is total over its keyspace: all `<period, symptom, region>`
//! (or `<period, region>`) cells exist and default to zero, whether or not
//! any user contributed. Downstream noise is added to every cell, which is
//! what makes the release hold with delta = 0.
//!
//! Weeks start on Monday and are identified by their start date. Partial
//! weeks at the edges of the date range are retained, so the weekly keyspace
//! is a pure function of the date range.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use chrono::{Days, NaiveDate, Weekday};

use crate::bounding::BoundedContribution;
use crate::error::{Error, Result};
use crate::ingest::{Level, RegionHierarchy, RegionId, SymptomId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CountKind {
    Symptom,
    Normalization,
}

impl fmt::Display for CountKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CountKind::Symptom => "symptom",
            CountKind::Normalization => "normalization",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Granularity {
    Daily,
    Weekly,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Daily => "daily",
            Granularity::Weekly => "weekly",
        })
    }
}

/// Key of one count cell. `period` is the day, or the Monday starting the
/// week. `symptom` is present exactly for symptom tables.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CountKey {
    pub period: NaiveDate,
    pub symptom: Option<SymptomId>,
    pub region: RegionId,
}

impl fmt::Display for CountKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.symptom {
            Some(symptom) => write!(f, "<{}, {}, {}>", self.period, symptom, self.region),
            None => write!(f, "<{}, {}>", self.period, self.region),
        }
    }
}

/// Monday of the week containing `day`.
pub fn week_start(day: NaiveDate) -> NaiveDate {
    day.week(Weekday::Mon).first_day()
}

/// The fixed keyspace: date range, canonical symptom order and the region
/// sets per level. Built from configuration, never from the data, so the
/// set of released cells does not depend on any user.
#[derive(Debug, Clone)]
pub struct KeyspaceConfig {
    start: NaiveDate,
    end: NaiveDate,
    symptoms: Vec<SymptomId>,
    regions: [Vec<RegionId>; 3],
}

impl KeyspaceConfig {
    pub fn new(
        start: NaiveDate,
        end: NaiveDate,
        symptoms: Vec<SymptomId>,
        hierarchy: &RegionHierarchy,
    ) -> Result<Self> {
        if start > end {
            return Err(Error::InvalidConfig(format!(
                "date range start {start} is after end {end}"
            )));
        }
        Ok(Self {
            start,
            end,
            symptoms,
            regions: [
                hierarchy.regions_at(Level::new(0)?),
                hierarchy.regions_at(Level::new(1)?),
                hierarchy.regions_at(Level::new(2)?),
            ],
        })
    }

    pub fn start(&self) -> NaiveDate {
        self.start
    }

    pub fn end(&self) -> NaiveDate {
        self.end
    }

    pub fn symptoms(&self) -> &[SymptomId] {
        &self.symptoms
    }

    pub fn regions(&self, level: Level) -> &[RegionId] {
        &self.regions[level.index()]
    }

    pub fn contains_day(&self, day: NaiveDate) -> bool {
        day >= self.start && day <= self.end
    }

    pub fn days(&self) -> Vec<NaiveDate> {
        let mut days = Vec::new();
        let mut day = self.start;
        while day <= self.end {
            days.push(day);
            day = day + Days::new(1);
        }
        days
    }

    /// Week-start dates (Mondays) of every week intersecting the range.
    pub fn week_starts(&self) -> Vec<NaiveDate> {
        let mut weeks = Vec::new();
        let mut week = week_start(self.start);
        let last = week_start(self.end);
        while week <= last {
            weeks.push(week);
            week = week + Days::new(7);
        }
        weeks
    }

    pub fn periods(&self, granularity: Granularity) -> Vec<NaiveDate> {
        match granularity {
            Granularity::Daily => self.days(),
            Granularity::Weekly => self.week_starts(),
        }
    }
}

/// A dense count table, total over its keyspace. Raw tables hold
/// non-negative integers (as reals); noisy tables hold unconstrained reals.
#[derive(Debug, Clone, PartialEq)]
pub struct CountTable {
    kind: CountKind,
    granularity: Granularity,
    level: Level,
    noisy: bool,
    values: BTreeMap<CountKey, f64>,
}

impl CountTable {
    /// Zero-filled table over the full cross product of the keyspace.
    pub fn new_zero(
        kind: CountKind,
        granularity: Granularity,
        level: Level,
        keyspace: &KeyspaceConfig,
    ) -> Self {
        let mut values = BTreeMap::new();
        let symptoms: Vec<Option<SymptomId>> = match kind {
            CountKind::Symptom => keyspace.symptoms().iter().cloned().map(Some).collect(),
            CountKind::Normalization => vec![None],
        };
        for period in keyspace.periods(granularity) {
            for symptom in &symptoms {
                for region in keyspace.regions(level) {
                    values.insert(
                        CountKey {
                            period,
                            symptom: symptom.clone(),
                            region: region.clone(),
                        },
                        0.0,
                    );
                }
            }
        }
        Self {
            kind,
            granularity,
            level,
            noisy: false,
            values,
        }
    }

    /// Empty table that will be filled with noisy cells series by series.
    /// Its keyspace is the union of the series inserted into it.
    pub(crate) fn new_empty_noisy(
        kind: CountKind,
        granularity: Granularity,
        level: Level,
    ) -> Self {
        Self {
            kind,
            granularity,
            level,
            noisy: true,
            values: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> CountKind {
        self.kind
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn is_noisy(&self) -> bool {
        self.noisy
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, key: &CountKey) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CountKey, f64)> {
        self.values.iter().map(|(k, v)| (k, *v))
    }

    pub fn total(&self) -> f64 {
        self.values.values().sum()
    }

    pub(crate) fn add(&mut self, key: CountKey, amount: f64) -> Result<()> {
        match self.values.get_mut(&key) {
            Some(value) => {
                *value += amount;
                Ok(())
            }
            None => Err(Error::OutsideKeyspace {
                key: key.to_string(),
            }),
        }
    }

    pub(crate) fn insert_noisy(&mut self, key: CountKey, value: f64) {
        debug_assert!(self.noisy);
        self.values.insert(key, value);
    }

    #[cfg(test)]
    pub(crate) fn mark_noisy(&mut self) {
        self.noisy = true;
    }

    /// L1 distance to a table of identical shape.
    pub fn l1_distance(&self, other: &CountTable) -> Result<f64> {
        if self.kind != other.kind
            || self.granularity != other.granularity
            || self.level != other.level
            || self.values.len() != other.values.len()
        {
            return Err(Error::VerificationFailed(
                "l1_distance requires tables of identical shape".to_owned(),
            ));
        }
        let mut distance = 0.0;
        for (key, value) in &self.values {
            let other_value = other.values.get(key).ok_or_else(|| Error::MissingCell {
                key: key.to_string(),
            })?;
            distance += (value - other_value).abs();
        }
        Ok(distance)
    }

    /// Debug dump: `period,symptom,region_id,value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["period", "symptom", "region_id", "value"])
            .map_err(|source| Error::Csv {
                path: "<writer>".into(),
                source,
            })?;
        for (key, value) in &self.values {
            w.write_record([
                key.period.to_string().as_str(),
                key.symptom.as_ref().map(|s| s.as_str()).unwrap_or(""),
                key.region.as_str(),
                &format!("{value}"),
            ])
            .map_err(|source| Error::Csv {
                path: "<writer>".into(),
                source,
            })?;
        }
        w.flush().map_err(|source| Error::Io {
            path: "<writer>".into(),
            source,
        })?;
        Ok(())
    }
}

/// Sum bounded symptom marks into the daily `<day, symptom, region>` table at
/// one level. Cell value = number of user-days marking that pair on that day.
pub fn aggregate_symptom_daily(
    contribs: &[BoundedContribution],
    level: Level,
    keyspace: &KeyspaceConfig,
) -> Result<CountTable> {
    let mut table = CountTable::new_zero(CountKind::Symptom, Granularity::Daily, level, keyspace);
    for contrib in contribs {
        for (symptom, region) in contrib.symptom_marks(level) {
            table.add(
                CountKey {
                    period: contrib.key().date,
                    symptom: Some(symptom.clone()),
                    region: region.clone(),
                },
                1.0,
            )?;
        }
    }
    Ok(table)
}

/// Sum bounded normalization marks into the daily `<day, region>` table at
/// one level. Cell value = number of user-days active in the region.
pub fn aggregate_normalization_daily(
    contribs: &[BoundedContribution],
    level: Level,
    keyspace: &KeyspaceConfig,
) -> Result<CountTable> {
    let mut table =
        CountTable::new_zero(CountKind::Normalization, Granularity::Daily, level, keyspace);
    for contrib in contribs {
        for region in contrib.normalization_marks(level) {
            table.add(
                CountKey {
                    period: contrib.key().date,
                    symptom: None,
                    region: region.clone(),
                },
                1.0,
            )?;
        }
    }
    Ok(table)
}

/// Sum a raw daily table into its weekly counterpart. Partial edge weeks sum
/// whatever days exist in the range. Noise must be added after summation, so
/// a noisy input aborts.
pub fn sum_weekly(daily: &CountTable, keyspace: &KeyspaceConfig) -> Result<CountTable> {
    if daily.granularity() != Granularity::Daily {
        return Err(Error::NotDailyTable);
    }
    if daily.is_noisy() {
        return Err(Error::NoisySumInput);
    }
    let mut weekly =
        CountTable::new_zero(daily.kind(), Granularity::Weekly, daily.level(), keyspace);
    for (key, value) in daily.iter() {
        weekly.add(
            CountKey {
                period: week_start(key.period),
                symptom: key.symptom.clone(),
                region: key.region.clone(),
            },
            value,
        )?;
    }
    Ok(weekly)
}
