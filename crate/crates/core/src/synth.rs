//! Deterministic synthetic query-log generation for pipeline testing.
//!
//! Each user gets a home county; queries are symptom searches with a
//! configurable propensity and plain non-symptom searches otherwise, so
//! normalization counts differ from symptom totals. A travel probability
//! occasionally issues queries from another county, exercising the
//! multi-region bounding paths.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{Days, NaiveDate};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::ingest::{Level, RegionHierarchy, SymptomLexicon};

const NON_SYMPTOM_QUERIES: [&str; 8] = [
    "weather tomorrow",
    "news today",
    "restaurants near me",
    "movie showtimes",
    "traffic update",
    "football scores",
    "recipe ideas",
    "bus schedule",
];

#[derive(Debug, Clone)]
pub struct SynthParams {
    pub users: u32,
    pub days: u32,
    pub start_date: NaiveDate,
    pub seed: u64,
    /// Mean queries per user-day (Poisson).
    pub queries_per_user_day: f64,
    /// Probability that a query is a symptom search.
    pub symptom_propensity: f64,
    /// Probability that a query is issued from a non-home county.
    pub travel_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRow {
    pub user: String,
    pub date: NaiveDate,
    pub region: String,
    pub query: String,
}

/// Generate a log deterministically from the seed. Identical parameters
/// always produce identical rows.
pub fn generate_log(
    params: &SynthParams,
    hierarchy: &RegionHierarchy,
    lexicon: &SymptomLexicon,
) -> Result<Vec<LogRow>> {
    if params.users == 0 || params.days == 0 {
        return Err(Error::InvalidConfig(
            "synthetic generation needs at least one user and one day".to_owned(),
        ));
    }
    if !(0.0..=1.0).contains(&params.symptom_propensity) {
        return Err(Error::InvalidConfig(format!(
            "symptom propensity {} outside [0, 1]",
            params.symptom_propensity
        )));
    }
    if !(0.0..=1.0).contains(&params.travel_prob) {
        return Err(Error::InvalidConfig(format!(
            "travel probability {} outside [0, 1]",
            params.travel_prob
        )));
    }
    if !(params.queries_per_user_day >= 0.0) || params.queries_per_user_day > 50.0 {
        return Err(Error::InvalidConfig(format!(
            "queries per user-day {} outside [0, 50]",
            params.queries_per_user_day
        )));
    }
    let counties = hierarchy.regions_at(Level::COUNTY);
    if counties.is_empty() {
        return Err(Error::InvalidConfig(
            "hierarchy has no level-2 regions".to_owned(),
        ));
    }
    // Non-symptom pool must stay non-symptom under the supplied lexicon.
    let plain: Vec<&str> = NON_SYMPTOM_QUERIES
        .iter()
        .copied()
        .filter(|q| lexicon.classify(q).is_none())
        .collect();
    if plain.is_empty() {
        return Err(Error::InvalidConfig(
            "every non-symptom query collides with the lexicon".to_owned(),
        ));
    }
    let queries_by_symptom: BTreeMap<_, _> = lexicon.queries_by_symptom();
    let symptoms = lexicon.symptoms();
    if params.symptom_propensity > 0.0 && symptoms.is_empty() {
        return Err(Error::InvalidConfig(
            "symptom propensity > 0 requires a non-empty lexicon".to_owned(),
        ));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(params.seed);
    let user_width = params.users.to_string().len().max(4);
    let homes: Vec<usize> = (0..params.users)
        .map(|_| rng.random_range(0..counties.len()))
        .collect();

    let mut rows = Vec::new();
    for day in 0..params.days {
        let date = params.start_date + Days::new(day as u64);
        for user in 0..params.users {
            let queries = poisson(&mut rng, params.queries_per_user_day);
            for _ in 0..queries {
                let county = if counties.len() > 1 && rng.random_bool(params.travel_prob) {
                    let mut other = rng.random_range(0..counties.len() - 1);
                    if other >= homes[user as usize] {
                        other += 1;
                    }
                    other
                } else {
                    homes[user as usize]
                };
                let query = if params.symptom_propensity > 0.0
                    && rng.random_bool(params.symptom_propensity)
                {
                    let symptom = symptoms
                        .choose(&mut rng)
                        .expect("symptom list checked non-empty");
                    queries_by_symptom[symptom]
                        .choose(&mut rng)
                        .expect("every symptom has at least one query")
                        .clone()
                } else {
                    (*plain.choose(&mut rng).expect("plain pool checked non-empty")).to_owned()
                };
                rows.push(LogRow {
                    user: format!("u{:0width$}", user + 1, width = user_width),
                    date,
                    region: counties[county].to_string(),
                    query,
                });
            }
        }
    }
    Ok(rows)
}

/// Knuth's product-of-uniforms Poisson sampler; fine for small means.
fn poisson(rng: &mut ChaCha20Rng, mean: f64) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    let limit = (-mean).exp();
    let mut count = 0u32;
    let mut product: f64 = rng.random();
    while product > limit {
        count += 1;
        product *= rng.random::<f64>();
    }
    count
}

/// CSV `user_id,date,region_id,query`.
pub fn write_log_csv<W: Write>(rows: &[LogRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |source| Error::Csv {
        path: "<writer>".into(),
        source,
    };
    w.write_record(["user_id", "date", "region_id", "query"])
        .map_err(io)?;
    for row in rows {
        w.write_record([
            row.user.as_str(),
            &row.date.to_string(),
            &row.region,
            &row.query,
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn params(seed: u64, propensity: f64) -> SynthParams {
        SynthParams {
            users: 20,
            days: 5,
            start_date: "2020-02-03".parse().unwrap(),
            seed,
            queries_per_user_day: 3.0,
            symptom_propensity: propensity,
            travel_prob: 0.05,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let h = fixtures::table1_hierarchy();
        let lex = fixtures::table1_lexicon();
        let a = generate_log(&params(7, 0.4), &h, &lex).unwrap();
        let b = generate_log(&params(7, 0.4), &h, &lex).unwrap();
        assert_eq!(a, b);
        let c = generate_log(&params(8, 0.4), &h, &lex).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_propensity_yields_no_symptom_matches() {
        let h = fixtures::table1_hierarchy();
        let lex = fixtures::table1_lexicon();
        let rows = generate_log(&params(7, 0.0), &h, &lex).unwrap();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| lex.classify(&r.query).is_none()));
    }

    #[test]
    fn high_propensity_hits_the_cross_symptom_cap() {
        let h = fixtures::table1_hierarchy();
        let lex = fixtures::table1_lexicon();
        let mut p = params(7, 1.0);
        p.queries_per_user_day = 8.0;
        p.travel_prob = 0.0;
        let rows = generate_log(&p, &h, &lex).unwrap();
        // At ~8 symptom queries per user-day, some user-day must exceed
        // three distinct symptoms, so bounding discards something.
        let events: Vec<crate::ingest::SearchEvent> = {
            let mut csv_bytes = Vec::new();
            write_log_csv(&rows, &mut csv_bytes).unwrap();
            crate::ingest::classify_and_stream(
                csv_bytes.as_slice(),
                std::path::Path::new("synth"),
                &lex,
                &h,
            )
            .unwrap()
        };
        let contribs = crate::bounding::bound_all(
            &events,
            &h,
            crate::bounding::DiscardPolicy::InputOrder,
        )
        .unwrap();
        let mut capped = 0;
        for contrib in &contribs {
            if contrib.symptom_marks(Level::COUNTY).len() == 3 {
                capped += 1;
            }
        }
        assert!(capped > 0, "no user-day reached the cap");
    }

    #[test]
    fn csv_round_trips_through_ingest() {
        let h = fixtures::table1_hierarchy();
        let lex = fixtures::table1_lexicon();
        let rows = generate_log(&params(9, 0.5), &h, &lex).unwrap();
        let mut csv_bytes = Vec::new();
        write_log_csv(&rows, &mut csv_bytes).unwrap();
        let events = crate::ingest::classify_and_stream(
            csv_bytes.as_slice(),
            std::path::Path::new("synth"),
            &lex,
            &h,
        )
        .unwrap();
        assert_eq!(events.len(), rows.len());
    }
}
