use std::collections::BTreeSet;

use regat::commands::generate_files;
use regat::synth::{generate, kind_of, oracle_accuracy, template_counts, SynthSpec};
use regat_core::graph::RelationKind;

#[test]
fn generation_is_byte_identical_per_seed() {
    let spec = SynthSpec { seed: 11, train: 90, val: 30, ..SynthSpec::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_files(&spec, a.path()).unwrap();
    generate_files(&spec, b.path()).unwrap();
    for f in ["train.jsonl", "val.jsonl"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f}");
        assert!(!x.is_empty());
    }
    let other = generate(&SynthSpec { seed: 12, ..spec }).unwrap();
    assert_ne!(other.0, generate(&SynthSpec { seed: 11, train: 90, val: 30, ..SynthSpec::default() }).unwrap().0);
}

#[test]
fn oracle_answers_everything() {
    let (train, val) = generate(&SynthSpec { seed: 3, train: 300, val: 90, ..SynthSpec::default() }).unwrap();
    assert_eq!(oracle_accuracy(&train), 1.0);
    assert_eq!(oracle_accuracy(&val), 1.0);
}

#[test]
fn every_kind_has_three_relation_templates() {
    let (train, _) = generate(&SynthSpec { seed: 4, train: 600, val: 0, ..SynthSpec::default() }).unwrap();
    let counts = template_counts(&train);
    for kind in RelationKind::ALL {
        let templates: BTreeSet<_> = counts.keys().filter(|(k, _)| k == kind.name()).map(|(_, t)| t).collect();
        assert!(templates.len() >= 3, "{kind}: {templates:?}");
    }
}

#[test]
fn kinds_are_interleaved_and_ids_unique() {
    let (train, val) = generate(&SynthSpec { seed: 5, train: 60, val: 12, ..SynthSpec::default() }).unwrap();
    let ids: BTreeSet<_> = train.iter().chain(&val).map(|r| r.question_id.as_str()).collect();
    assert_eq!(ids.len(), 72);
    for kind in RelationKind::ALL {
        assert_eq!(train.iter().filter(|r| kind_of(&r.question_id) == Some(kind)).count(), 20);
    }
}

#[test]
fn empty_kind_list_is_rejected() {
    let e = generate(&SynthSpec { kinds: vec![], ..SynthSpec::default() }).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}
