//! Per-user-per-day contribution bounding.
//!
//! The privacy unit is one user's search activity on one calendar day. For
//! each granularity level that unit may contribute at most 1 to any
//! `<day, symptom, region>` count, at most [`CROSS_SYMPTOM_CAP`] such counts
//! in total, and at most one `<day, region>` normalization count.
//!
//! Which contributions survive when a cap binds is an arbitrary choice as
//! far as the privacy guarantee is concerned. [`DiscardPolicy::InputOrder`]
//! keeps the first candidates in input-log order so golden tests are
//! possible; [`DiscardPolicy::Randomized`] exercises other admissible
//! choices in property tests.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::{Datelike, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::{Level, RegionHierarchy, RegionId, SearchEvent, SymptomId, UserId};

/// Per-level cap on the number of distinct `(symptom, region)` counts one
/// user-day may contribute to.
pub const CROSS_SYMPTOM_CAP: usize = 3;

/// Per-level cap on the number of normalization counts one user-day may
/// contribute to.
pub const NORMALIZATION_CAP: usize = 1;

/// The privacy unit: one user's activity on one day.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct UserDayKey {
    pub user: UserId,
    pub date: NaiveDate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscardPolicy {
    /// Keep the first candidates in input-log order.
    InputOrder,
    /// Shuffle candidates with a seeded generator before applying the caps.
    /// The shuffle is keyed per user-day, so results do not depend on how
    /// groups are scheduled.
    Randomized { seed: u64 },
}

/// A user-day's capped contributions: per level, a set of `(symptom, region)`
/// pairs and a set of normalization regions, each contributing exactly 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundedContribution {
    key: UserDayKey,
    symptom_marks: [BTreeSet<(SymptomId, RegionId)>; 3],
    normalization_marks: [BTreeSet<RegionId>; 3],
}

impl BoundedContribution {
    pub fn key(&self) -> &UserDayKey {
        &self.key
    }

    pub fn symptom_marks(&self, level: Level) -> &BTreeSet<(SymptomId, RegionId)> {
        &self.symptom_marks[level.index()]
    }

    pub fn normalization_marks(&self, level: Level) -> &BTreeSet<RegionId> {
        &self.normalization_marks[level.index()]
    }
}

/// Bound the events of a single user-day. All events must share one user and
/// date; anything else is a caller bug.
///
/// Per level: symptom candidates are the distinct `(symptom, region-at-level)`
/// pairs (per-symptom dedup happens before the cross-symptom cap), of which
/// the first [`CROSS_SYMPTOM_CAP`] in policy order survive. The normalization
/// candidates are the distinct regions the user searched from; only the first
/// in policy order survives, keeping the per-level normalization sensitivity
/// at 1.
pub fn bound_user_day(
    events: &[SearchEvent],
    hierarchy: &RegionHierarchy,
    policy: DiscardPolicy,
) -> Result<BoundedContribution> {
    let first = events.first().ok_or(Error::EmptyUserDayGroup)?;
    let key = UserDayKey {
        user: first.user.clone(),
        date: first.date,
    };
    for event in events {
        if event.user != key.user || event.date != key.date {
            return Err(Error::MixedUserDayGroup {
                expected: format!("({}, {})", key.user, key.date),
                found: format!("({}, {})", event.user, event.date),
            });
        }
    }

    let mut symptom_marks: [BTreeSet<(SymptomId, RegionId)>; 3] = Default::default();
    let mut normalization_marks: [BTreeSet<RegionId>; 3] = Default::default();

    for level in Level::ALL {
        let mut pairs: Vec<(SymptomId, RegionId)> = Vec::new();
        let mut seen_pairs = BTreeSet::new();
        let mut regions: Vec<RegionId> = Vec::new();
        let mut seen_regions = BTreeSet::new();

        for event in events {
            let region = hierarchy.ancestor_at(&event.region2, level)?.clone();
            if seen_regions.insert(region.clone()) {
                regions.push(region.clone());
            }
            if let Some(symptom) = &event.symptom {
                let pair = (symptom.clone(), region);
                if seen_pairs.insert(pair.clone()) {
                    pairs.push(pair);
                }
            }
        }

        if let DiscardPolicy::Randomized { seed } = policy {
            let mut rng = policy_rng(seed, &key, level);
            pairs.shuffle(&mut rng);
            regions.shuffle(&mut rng);
        }

        symptom_marks[level.index()] = pairs.into_iter().take(CROSS_SYMPTOM_CAP).collect();
        normalization_marks[level.index()] =
            regions.into_iter().take(NORMALIZATION_CAP).collect();
    }

    Ok(BoundedContribution {
        key,
        symptom_marks,
        normalization_marks,
    })
}

/// Group a log by user-day and bound every group. Output is canonicalized by
/// `(user, date)` regardless of input order; within a group the input order
/// is preserved for the discard policy.
pub fn bound_all(
    events: &[SearchEvent],
    hierarchy: &RegionHierarchy,
    policy: DiscardPolicy,
) -> Result<Vec<BoundedContribution>> {
    let mut groups: BTreeMap<UserDayKey, Vec<SearchEvent>> = BTreeMap::new();
    for event in events {
        let key = UserDayKey {
            user: event.user.clone(),
            date: event.date,
        };
        groups.entry(key).or_default().push(event.clone());
    }
    groups
        .values()
        .map(|group| bound_user_day(group, hierarchy, policy))
        .collect()
}

/// Debug dump: `user_id,date,level,kind,symptom,region_id,value`. Never part
/// of a release run; gated behind an explicit unsafe flag in the CLI.
pub fn dump_contributions_csv<W: Write>(
    contribs: &[BoundedContribution],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["user_id", "date", "level", "kind", "symptom", "region_id", "value"])
        .map_err(csv_io)?;
    for contrib in contribs {
        for level in Level::ALL {
            for (symptom, region) in contrib.symptom_marks(level) {
                w.write_record([
                    contrib.key.user.as_str(),
                    &contrib.key.date.to_string(),
                    &level.to_string(),
                    "symptom",
                    symptom.as_str(),
                    region.as_str(),
                    "1",
                ])
                .map_err(csv_io)?;
            }
            for region in contrib.normalization_marks(level) {
                w.write_record([
                    contrib.key.user.as_str(),
                    &contrib.key.date.to_string(),
                    &level.to_string(),
                    "normalization",
                    "",
                    region.as_str(),
                    "1",
                ])
                .map_err(csv_io)?;
            }
        }
    }
    w.flush().map_err(|source| Error::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

fn csv_io(source: csv::Error) -> Error {
    Error::Csv {
        path: "<writer>".into(),
        source,
    }
}

fn policy_rng(seed: u64, key: &UserDayKey, level: Level) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(key.user.as_str().as_bytes());
    hasher.update([0x1f]);
    hasher.update(key.date.num_days_from_ce().to_le_bytes());
    hasher.update([level.as_u8()]);
    let digest = hasher.finalize();
    let mut seed_bytes = [0u8; 32];
    seed_bytes.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(seed_bytes)
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use crate::fixtures;
    use crate::ingest::{RegionId, SymptomId, UserId};
    use proptest::prelude::*;

    fn arb_events() -> impl Strategy<Value = Vec<SearchEvent>> {
        let counties = ["SantaClara", "SanBernardino", "Clark", "Washoe"];
        let symptoms = ["fever", "cough", "headache", "nausea", "chills", "fatigue"];
        proptest::collection::vec(
            (0..counties.len(), proptest::option::of(0..symptoms.len())),
            0..12,
        )
        .prop_map(move |rows| {
            rows.into_iter()
                .map(|(region, symptom)| SearchEvent {
                    user: UserId::from("u1"),
                    date: "2020-06-03".parse().unwrap(),
                    region2: RegionId::from(counties[region]),
                    symptom: symptom.map(|s| SymptomId::from(symptoms[s])),
                })
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn caps_hold_for_random_user_days(events in arb_events(), seed in 0u64..1000) {
            prop_assume!(!events.is_empty());
            let h = fixtures::table1_hierarchy();
            for policy in [DiscardPolicy::InputOrder, DiscardPolicy::Randomized { seed }] {
                let contrib = bound_user_day(&events, &h, policy).unwrap();
                for level in Level::ALL {
                    let marks = contrib.symptom_marks(level);
                    prop_assert!(marks.len() <= CROSS_SYMPTOM_CAP);
                    prop_assert!(contrib.normalization_marks(level).len() <= NORMALIZATION_CAP);
                    // Marks can only come from the candidate set.
                    for (symptom, region) in marks {
                        let candidate = events.iter().any(|e| {
                            e.symptom.as_ref() == Some(symptom)
                                && h.ancestor_at(&e.region2, level).unwrap() == region
                        });
                        prop_assert!(candidate);
                    }
                }
            }
        }
    }
}
