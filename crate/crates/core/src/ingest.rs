//! Input loading and classification: region hierarchy, symptom lexicon and
//! raw query logs.
//!
//! Classification is an exact match of the normalized query string
//! (lowercased, whitespace collapsed) against the lexicon. Rows that match
//! no lexicon entry still become events, with `symptom` absent; they count
//! toward normalization but never toward a symptom count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(id: &str) -> Self {
                Self(id.to_owned())
            }
        }
    };
}

string_id!(
    /// Opaque identifier of a search user.
    UserId
);
string_id!(
    /// Identifier of a geographic region at any granularity level.
    RegionId
);
string_id!(
    /// Identifier of a symptom from the lexicon.
    SymptomId
);

/// Geographic granularity: 0 = country, 1 = state-equivalent,
/// 2 = county-equivalent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Level(u8);

impl Level {
    pub const ALL: [Level; 3] = [Level(0), Level(1), Level(2)];
    pub const COUNTRY: Level = Level(0);
    pub const COUNTY: Level = Level(2);

    pub fn new(level: u8) -> Result<Self> {
        if level <= 2 {
            Ok(Self(level))
        } else {
            Err(Error::InvalidLevel(level))
        }
    }

    pub fn as_u8(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The three-level region tree. Every level-1 region has exactly one level-0
/// parent and every level-2 region exactly one level-1 parent, so parent
/// chains always terminate at level 0.
#[derive(Debug, Clone)]
pub struct RegionHierarchy {
    levels: BTreeMap<RegionId, Level>,
    parents: BTreeMap<RegionId, RegionId>,
}

impl RegionHierarchy {
    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_reader(file, path)
    }

    pub fn from_reader<R: Read>(reader: R, origin: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
        expect_header(&mut rdr, origin, &["region_id", "level", "parent_id"])?;

        let mut levels = BTreeMap::new();
        let mut parents = BTreeMap::new();
        for (idx, record) in rdr.records().enumerate() {
            let line = idx as u64 + 2;
            let record = record.map_err(|source| Error::Csv {
                path: origin.to_owned(),
                source,
            })?;
            let region = RegionId::new(field(&record, 0, origin, line)?);
            let level: u8 = field(&record, 1, origin, line)?
                .parse()
                .map_err(|_| Error::MalformedRow {
                    path: origin.to_owned(),
                    line,
                    message: format!("level `{}` is not an integer", &record[1]),
                })?;
            let level = Level::new(level)?;
            let parent = record.get(2).unwrap_or("").trim();

            if levels.insert(region.clone(), level).is_some() {
                return Err(Error::DuplicateRegion {
                    region: region.to_string(),
                });
            }
            if level == Level::COUNTRY {
                if !parent.is_empty() {
                    return Err(Error::MalformedRow {
                        path: origin.to_owned(),
                        line,
                        message: format!("level-0 region {region} must not have a parent"),
                    });
                }
            } else if parent.is_empty() {
                return Err(Error::OrphanRegion {
                    region: region.to_string(),
                });
            } else {
                parents.insert(region, RegionId::new(parent));
            }
        }

        let hierarchy = Self { levels, parents };
        hierarchy.validate()?;
        Ok(hierarchy)
    }

    fn validate(&self) -> Result<()> {
        for (region, level) in &self.levels {
            if *level == Level::COUNTRY {
                continue;
            }
            let parent = self.parents.get(region).ok_or_else(|| Error::OrphanRegion {
                region: region.to_string(),
            })?;
            match self.levels.get(parent) {
                Some(parent_level) if parent_level.as_u8() + 1 == level.as_u8() => {}
                _ => {
                    return Err(Error::BadParentLevel {
                        region: region.to_string(),
                        parent: parent.to_string(),
                    })
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, region: &RegionId) -> Option<Level> {
        self.levels.get(region).copied()
    }

    pub fn parent(&self, region: &RegionId) -> Option<&RegionId> {
        self.parents.get(region)
    }

    /// Walk parents from `region` until the requested level is reached.
    pub fn ancestor_at(&self, region: &RegionId, level: Level) -> Result<&RegionId> {
        let mut current = region;
        loop {
            let current_level = self.level(current).ok_or_else(|| Error::UnknownRegion {
                region: current.to_string(),
                context: "ancestor walk".to_owned(),
            })?;
            if current_level == level {
                return Ok(self
                    .levels
                    .get_key_value(current)
                    .expect("level lookup implies presence")
                    .0);
            }
            if current_level.as_u8() < level.as_u8() {
                return Err(Error::UnknownRegion {
                    region: region.to_string(),
                    context: format!("has no ancestor at level {level}"),
                });
            }
            current = self.parents.get(current).ok_or_else(|| Error::OrphanRegion {
                region: current.to_string(),
            })?;
        }
    }

    /// All regions at a level, in id order.
    pub fn regions_at(&self, level: Level) -> Vec<RegionId> {
        self.levels
            .iter()
            .filter(|(_, l)| **l == level)
            .map(|(r, _)| r.clone())
            .collect()
    }
}

/// Mapping from normalized query strings to symptoms. `symptoms` keeps the
/// order of first appearance in the lexicon file; that order is the canonical
/// symptom order used everywhere downstream.
#[derive(Debug, Clone)]
pub struct SymptomLexicon {
    entries: BTreeMap<String, SymptomId>,
    symptoms: Vec<SymptomId>,
}

impl SymptomLexicon {
    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_reader(file, path)
    }

    pub fn from_reader<R: Read>(reader: R, origin: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
        expect_header(&mut rdr, origin, &["query", "symptom"])?;

        let mut entries: BTreeMap<String, SymptomId> = BTreeMap::new();
        let mut symptoms = Vec::new();
        let mut seen = BTreeSet::new();
        for (idx, record) in rdr.records().enumerate() {
            let line = idx as u64 + 2;
            let record = record.map_err(|source| Error::Csv {
                path: origin.to_owned(),
                source,
            })?;
            let query = normalize_query(field(&record, 0, origin, line)?);
            let symptom = SymptomId::new(field(&record, 1, origin, line)?);
            if query.is_empty() {
                return Err(Error::MalformedRow {
                    path: origin.to_owned(),
                    line,
                    message: "empty query".to_owned(),
                });
            }
            match entries.get(&query) {
                Some(existing) if *existing != symptom => {
                    return Err(Error::DuplicateLexiconQuery { query })
                }
                _ => {}
            }
            entries.insert(query, symptom.clone());
            if seen.insert(symptom.clone()) {
                symptoms.push(symptom);
            }
        }
        Ok(Self { entries, symptoms })
    }

    pub fn classify(&self, raw_query: &str) -> Option<&SymptomId> {
        self.entries.get(&normalize_query(raw_query))
    }

    pub fn symptoms(&self) -> &[SymptomId] {
        &self.symptoms
    }

    /// Query strings mapping to each symptom, in id order.
    pub fn queries_by_symptom(&self) -> BTreeMap<SymptomId, Vec<String>> {
        let mut map: BTreeMap<SymptomId, Vec<String>> = BTreeMap::new();
        for (query, symptom) in &self.entries {
            map.entry(symptom.clone()).or_default().push(query.clone());
        }
        map
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Lowercase and collapse internal whitespace.
pub fn normalize_query(query: &str) -> String {
    query
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// One classified query occurrence. `symptom` is absent exactly when the
/// query matched no lexicon entry. Only the level-2 region is stored; the
/// level-1/0 memberships are derived through the hierarchy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchEvent {
    pub user: UserId,
    pub date: NaiveDate,
    pub region2: RegionId,
    pub symptom: Option<SymptomId>,
}

/// Parse and classify a query log. Every input row yields exactly one event,
/// in input order. Rows referencing regions that are unknown or not at level
/// 2 abort: the downstream keyspace is closed over the hierarchy.
pub fn classify_and_stream<R: Read>(
    reader: R,
    origin: &Path,
    lexicon: &SymptomLexicon,
    hierarchy: &RegionHierarchy,
) -> Result<Vec<SearchEvent>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
    expect_header(&mut rdr, origin, &["user_id", "date", "region_id", "query"])?;

    let mut events = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx as u64 + 2;
        let record = record.map_err(|source| Error::Csv {
            path: origin.to_owned(),
            source,
        })?;
        let user = UserId::new(field(&record, 0, origin, line)?);
        let date = NaiveDate::parse_from_str(field(&record, 1, origin, line)?, "%Y-%m-%d")
            .map_err(|_| Error::MalformedRow {
                path: origin.to_owned(),
                line,
                message: format!("date `{}` is not YYYY-MM-DD", &record[1]),
            })?;
        let region = RegionId::new(field(&record, 2, origin, line)?);
        if hierarchy.level(&region) != Some(Level::COUNTY) {
            return Err(Error::UnknownRegion {
                region: region.to_string(),
                context: format!("{}:{line}: log rows must name level-2 regions", origin.display()),
            });
        }
        let query = field(&record, 3, origin, line)?;
        events.push(SearchEvent {
            user,
            date,
            region2: region,
            symptom: lexicon.classify(query).cloned(),
        });
    }
    Ok(events)
}

pub fn load_query_log(
    path: &Path,
    lexicon: &SymptomLexicon,
    hierarchy: &RegionHierarchy,
) -> Result<Vec<SearchEvent>> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    classify_and_stream(file, path, lexicon, hierarchy)
}

fn expect_header<R: Read>(
    rdr: &mut csv::Reader<R>,
    origin: &Path,
    expected: &[&str],
) -> Result<()> {
    let headers = rdr.headers().map_err(|source| Error::Csv {
        path: origin.to_owned(),
        source,
    })?;
    let found: Vec<&str> = headers.iter().map(str::trim).collect();
    if found != expected {
        return Err(Error::InvalidHeader {
            path: origin.to_owned(),
            expected: expected.join(","),
            found: found.join(","),
        });
    }
    Ok(())
}

fn field<'r>(
    record: &'r csv::StringRecord,
    index: usize,
    origin: &Path,
    line: u64,
) -> Result<&'r str> {
    record
        .get(index)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::MalformedRow {
            path: origin.to_owned(),
            line,
            message: format!("missing field {index}"),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn seven_region_fixture_loads() {
        let h = fixtures::table1_hierarchy();
        assert_eq!(h.len(), 7);
        assert_eq!(h.regions_at(Level::COUNTRY).len(), 1);
        assert_eq!(h.regions_at(Level::new(1).unwrap()).len(), 2);
        assert_eq!(h.regions_at(Level::COUNTY).len(), 4);
    }

    #[test]
    fn clark_chain_resolves_to_country() {
        let h = fixtures::table1_hierarchy();
        let clark = RegionId::from("Clark");
        assert_eq!(
            h.ancestor_at(&clark, Level::new(1).unwrap()).unwrap().as_str(),
            "Nevada"
        );
        assert_eq!(h.ancestor_at(&clark, Level::COUNTRY).unwrap().as_str(), "US");
    }

    #[test]
    fn orphan_region_rejected() {
        let csv = "region_id,level,parent_id\nUS,0,\nClark,2,\n";
        let err = RegionHierarchy::from_reader(csv.as_bytes(), Path::new("test.csv")).unwrap_err();
        assert!(matches!(err, Error::OrphanRegion { .. }), "{err}");
    }

    #[test]
    fn missing_parent_rejected() {
        let csv = "region_id,level,parent_id\nUS,0,\nClark,2,Nevada\n";
        let err = RegionHierarchy::from_reader(csv.as_bytes(), Path::new("test.csv")).unwrap_err();
        assert!(matches!(err, Error::BadParentLevel { .. }), "{err}");
    }

    #[test]
    fn parent_must_be_one_level_above() {
        let csv = "region_id,level,parent_id\nUS,0,\nClark,2,US\n";
        let err = RegionHierarchy::from_reader(csv.as_bytes(), Path::new("test.csv")).unwrap_err();
        assert!(matches!(err, Error::BadParentLevel { .. }), "{err}");
    }

    #[test]
    fn lexicon_normalizes_and_classifies() {
        let lex = fixtures::table1_lexicon();
        assert_eq!(lex.classify("fever chills").unwrap().as_str(), "fever");
        assert_eq!(lex.classify("  Fever   CHILLS ").unwrap().as_str(), "fever");
        assert!(lex.classify("weather").is_none());
    }

    #[test]
    fn lexicon_rejects_conflicting_queries() {
        let csv = "query,symptom\nfever,fever\nFever,cough\n";
        let err = SymptomLexicon::from_reader(csv.as_bytes(), Path::new("lex.csv")).unwrap_err();
        assert!(matches!(err, Error::DuplicateLexiconQuery { .. }), "{err}");
    }

    #[test]
    fn symptom_order_is_first_appearance() {
        let lex = fixtures::table1_lexicon();
        assert_eq!(lex.symptoms()[0].as_str(), "fever");
        assert_eq!(lex.symptoms()[1].as_str(), "cough");
        assert_eq!(lex.symptoms().len(), 10);
    }

    #[test]
    fn table1_log_classifies_to_five_events() {
        let events = fixtures::table1_events();
        assert_eq!(events.len(), 5);
        let symptoms: Vec<_> = events
            .iter()
            .map(|e| e.symptom.as_ref().map(|s| s.as_str()).unwrap_or("-"))
            .collect();
        assert_eq!(symptoms, ["fever", "fever", "fever", "fever", "cough"]);
        let regions: Vec<_> = events.iter().map(|e| e.region2.as_str()).collect();
        assert_eq!(
            regions,
            ["SantaClara", "SantaClara", "SanBernardino", "Clark", "Clark"]
        );
    }

    #[test]
    fn unmatched_query_yields_symptom_absent_event() {
        let h = fixtures::table1_hierarchy();
        let lex = fixtures::table1_lexicon();
        let log = "user_id,date,region_id,query\nu1,2020-06-03,Clark,weather\n";
        let events =
            classify_and_stream(log.as_bytes(), Path::new("log.csv"), &lex, &h).unwrap();
        assert_eq!(events.len(), 1);
        assert!(events[0].symptom.is_none());
    }

    #[test]
    fn unknown_region_aborts() {
        let h = fixtures::table1_hierarchy();
        let lex = fixtures::table1_lexicon();
        let log = "user_id,date,region_id,query\nu1,2020-06-03,Atlantis,fever\n";
        let err =
            classify_and_stream(log.as_bytes(), Path::new("log.csv"), &lex, &h).unwrap_err();
        assert!(matches!(err, Error::UnknownRegion { .. }), "{err}");
    }

    #[test]
    fn level1_region_in_log_aborts() {
        let h = fixtures::table1_hierarchy();
        let lex = fixtures::table1_lexicon();
        let log = "user_id,date,region_id,query\nu1,2020-06-03,Nevada,fever\n";
        assert!(classify_and_stream(log.as_bytes(), Path::new("log.csv"), &lex, &h).is_err());
    }

    #[test]
    fn malformed_date_names_row() {
        let h = fixtures::table1_hierarchy();
        let lex = fixtures::table1_lexicon();
        let log = "user_id,date,region_id,query\nu1,junk,Clark,fever\n";
        let err =
            classify_and_stream(log.as_bytes(), Path::new("log.csv"), &lex, &h).unwrap_err();
        match err {
            Error::MalformedRow { line, .. } => assert_eq!(line, 2),
            other => panic!("expected MalformedRow, got {other}"),
        }
    }

    #[test]
    fn classification_is_deterministic_and_order_preserving() {
        let h = fixtures::table1_hierarchy();
        let lex = fixtures::table1_lexicon();
        let a = fixtures::table1_events();
        let b = classify_and_stream(
            fixtures::TABLE1_LOG_CSV.as_bytes(),
            Path::new("embedded"),
            &lex,
            &h,
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
