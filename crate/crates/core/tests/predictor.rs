mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use fpcil_core::predictor::{
    overlap, parse_transcript, predict_future, read_golden_tally, FixtureReplayer, Level, PredictionTally,
    RestrictionThresholds,
};
use proptest::prelude::*;

fn fixture_dir() -> std::path::PathBuf {
    common::fixtures().join("predictor/b0_inc10")
}

fn names_file(name: &str) -> Vec<String> {
    std::fs::read_to_string(fixture_dir().join(name))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn fixture_tally_matches_golden_file() {
    let initial = names_file("initial.names");
    let replayer = FixtureReplayer::new(fixture_dir());
    let prediction = predict_future(&replayer, &initial, 10, &RestrictionThresholds::default(), None).unwrap();
    let golden = read_golden_tally(&fixture_dir().join("golden_tally.json")).unwrap();
    assert_eq!(prediction.tally.counts, golden.counts);
    assert_eq!(prediction.tally.repeats, golden.repeats);
    assert_eq!(prediction.tally.source_transcripts.len(), 10);
}

#[test]
fn fixture_levels_match_expected_counts() {
    let initial = names_file("initial.names");
    let truth: BTreeSet<String> = names_file("future.names").into_iter().collect();
    assert_eq!(truth.len(), 90);
    let expected: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture_dir().join("expected_levels.json")).unwrap()).unwrap();
    let replayer = FixtureReplayer::new(fixture_dir());
    let prediction = predict_future(&replayer, &initial, 10, &RestrictionThresholds::default(), None).unwrap();
    for (level, key) in [(Level::Full, "full"), (Level::R1, "R1"), (Level::R2, "R2")] {
        let selection = &prediction.selections[&level];
        let (hits, _) = overlap(selection, &truth);
        assert_eq!(selection.len() as u64, expected[key]["selected"].as_u64().unwrap(), "{key}");
        assert_eq!(hits as u64, expected[key]["correct"].as_u64().unwrap(), "{key}");
    }
    let (hits, ratio) = overlap(&prediction.selections[&Level::Full], &truth);
    assert_eq!((prediction.selections[&Level::Full].len(), hits), (150, 53));
    assert_eq!(format!("{:.1}", 100.0 * ratio), "58.9");
    let r2 = &prediction.selections[&Level::R2];
    assert!(r2.is_subset(&prediction.selections[&Level::R1]));
    assert!(prediction.selections[&Level::R1].is_subset(&prediction.selections[&Level::Full]));
    for name in &initial {
        assert!(!prediction.selections[&Level::Full].contains(name));
    }
}

#[test]
fn asking_for_more_transcripts_than_stored_is_a_service_error() {
    let replayer = FixtureReplayer::new(fixture_dir());
    let err = predict_future(&replayer, &["apple"], 11, &RestrictionThresholds::default(), None).unwrap_err();
    assert_eq!(err.exit_code(), 5);
}

fn token() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-z]{1,8}( [a-z]{1,8}){0,2}",
        "[A-Z][a-z]{2,6}",
        "[0-9]{1,2}\\. [a-z]{2,6}",
        "- [a-z]{2,8}",
        "\\* [a-z]{2,8}\\.",
        "[a-z]{2,5}( [a-z]{2,5}){4,6}",
        "https?://[a-z]{3,8}\\.org/[a-z]{1,5}",
        "[0-9]{1,4}",
        "'[a-z]{2,6}'",
    ]
}

fn transcript() -> impl Strategy<Value = String> {
    prop::collection::vec((token(), prop_oneof![Just(", "), Just("\n"), Just(",\n")]), 0..30)
        .prop_map(|parts| parts.into_iter().map(|(t, sep)| t + sep).collect())
}

proptest! {
    #[test]
    fn parsing_its_own_output_is_a_fixed_point(text in transcript()) {
        let once = parse_transcript(&text, None);
        let twice = parse_transcript(&once.join(", "), None);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn parsing_is_deterministic(texts in prop::collection::vec(transcript(), 1..6)) {
        let a: Vec<Vec<String>> = texts.iter().map(|t| parse_transcript(t, None)).collect();
        let b: Vec<Vec<String>> = texts.iter().map(|t| parse_transcript(t, None)).collect();
        prop_assert_eq!(PredictionTally::from_names(&a), PredictionTally::from_names(&b));
    }

    #[test]
    fn levels_nest_and_exclusions_hold(
        counts in prop::collection::btree_map("[a-z]{1,6}", 1u32..=10, 0..60),
        excluded in prop::collection::hash_set("[a-z]{1,6}", 0..20),
        (a, b, c) in (1u32..=4, 0u32..=3, 0u32..=3),
    ) {
        let tally = PredictionTally { counts: counts.clone(), repeats: 10, source_transcripts: vec![] };
        let thresholds = RestrictionThresholds { full: a, r1: a + b, r2: a + b + c };
        let levels = thresholds.levels();
        let picks: BTreeMap<Level, BTreeSet<String>> =
            levels.iter().map(|l| (l.level, tally.select(l, &excluded))).collect();
        prop_assert!(picks[&Level::R2].is_subset(&picks[&Level::R1]));
        prop_assert!(picks[&Level::R1].is_subset(&picks[&Level::Full]));
        let excluded: HashSet<String> = excluded;
        for sel in picks.values() {
            prop_assert!(sel.iter().all(|n| !excluded.contains(n)));
        }
    }
}
