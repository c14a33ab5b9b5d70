//! Bundled tiny fixture: a 7-region hierarchy (one country, two states,
//! four counties), a 10-symptom lexicon and the five-search single-user-day
//! log used as the golden bounding example. Embedded so the verification
//! suite can run without any external files.

use std::path::Path;

use crate::ingest::{classify_and_stream, RegionHierarchy, SearchEvent, SymptomLexicon};

pub const TABLE1_HIERARCHY_CSV: &str = include_str!("../../../fixtures/hierarchy.csv");
pub const TABLE1_LEXICON_CSV: &str = include_str!("../../../fixtures/lexicon.csv");
pub const TABLE1_LOG_CSV: &str = include_str!("../../../fixtures/table1_log.csv");

pub fn table1_hierarchy() -> RegionHierarchy {
    RegionHierarchy::from_reader(TABLE1_HIERARCHY_CSV.as_bytes(), Path::new("fixtures/hierarchy.csv"))
        .expect("bundled hierarchy is valid")
}

pub fn table1_lexicon() -> SymptomLexicon {
    SymptomLexicon::from_reader(TABLE1_LEXICON_CSV.as_bytes(), Path::new("fixtures/lexicon.csv"))
        .expect("bundled lexicon is valid")
}

pub fn table1_events() -> Vec<SearchEvent> {
    classify_and_stream(
        TABLE1_LOG_CSV.as_bytes(),
        Path::new("fixtures/table1_log.csv"),
        &table1_lexicon(),
        &table1_hierarchy(),
    )
    .expect("bundled log is valid")
}
