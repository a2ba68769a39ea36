use std::collections::{BTreeMap, BTreeSet};

use progressive_lora::data::{
    export_jsonl, generate, hold_out_last, load_jsonl, nearest_centroid_accuracy, Corpus, Entry, Range, Split,
    SyntheticSpec, TaskKind,
};
use progressive_lora::Error;
use proptest::prelude::*;

fn mapping(c: &Corpus, user: usize) -> BTreeMap<String, String> {
    c.users[user]
        .history
        .iter()
        .map(|e| {
            let (q, r) = e.parts();
            (q.unwrap().to_string(), r.to_string())
        })
        .collect()
}

#[test]
fn zero_idiosyncrasy_users_share_the_group_mapping() {
    for task in [TaskKind::Paraphrase, TaskKind::Tagging, TaskKind::Rating] {
        let spec = SyntheticSpec {
            idiosyncrasy: 0.0,
            task,
            records_per_user: Range { min: 30, max: 30 },
            query_words: Range { min: 1, max: 2 },
            ..SyntheticSpec::default()
        };
        let c = generate(&spec).unwrap();
        // Pool each group's (query -> response) pairs; any query seen twice
        // within a group must map to the same response.
        for g in 0..spec.n_groups {
            let mut pooled: BTreeMap<String, String> = BTreeMap::new();
            let mut overlaps = 0;
            for u in (0..c.users.len()).filter(|&u| c.users[u].group_label == Some(g)) {
                for (q, r) in mapping(&c, u) {
                    if let Some(prev) = pooled.insert(q.clone(), r.clone()) {
                        assert_eq!(prev, r, "{task:?} group {g} query {q}");
                        overlaps += 1;
                    }
                }
            }
            assert!(overlaps > 20, "{task:?} group {g}: only {overlaps} shared queries");
        }
    }
}

#[test]
fn quirks_make_users_differ() {
    let c = generate(&SyntheticSpec::default()).unwrap();
    let responses: BTreeSet<&str> = c
        .users
        .iter()
        .filter(|u| u.group_label == Some(0))
        .map(|u| {
            let r = u.history[0].target();
            r.split(' ').last().unwrap()
        })
        .collect();
    assert!(responses.len() > 1);
}

#[test]
fn single_group_labels_are_constant() {
    let c = generate(&SyntheticSpec {
        n_groups: 1,
        ..SyntheticSpec::default()
    })
    .unwrap();
    assert!(c.users.iter().all(|u| u.group_label == Some(0)));
}

#[test]
fn skewed_counts_concentrate_records() {
    let spec = SyntheticSpec {
        users_per_group: 100,
        records_per_user: Range { min: 2, max: 2000 },
        skewed: true,
        query_words: Range { min: 1, max: 1 },
        ..SyntheticSpec::default()
    };
    let c = generate(&spec).unwrap();
    let mut counts: Vec<usize> = c.users.iter().map(|u| u.history.len()).collect();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let top = counts.len() / 10;
    let share = counts[..top].iter().sum::<usize>() as f64 / counts.iter().sum::<usize>() as f64;
    assert!(share >= 0.6, "top-10% share {share}");
}

#[test]
fn generation_is_a_pure_function_of_the_spec() {
    let spec = SyntheticSpec {
        seed: 7,
        ..SyntheticSpec::default()
    };
    assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    let other = generate(&SyntheticSpec { seed: 8, ..spec }).unwrap();
    assert_ne!(
        generate(&SyntheticSpec {
            seed: 7,
            ..SyntheticSpec::default()
        })
        .unwrap(),
        other
    );
}

#[test]
fn spec_errors_name_the_field() {
    let cases = [
        (
            SyntheticSpec {
                lexicon_size: 4,
                ..SyntheticSpec::default()
            },
            "lexicon_size",
        ),
        (
            SyntheticSpec {
                idiosyncrasy: 1.5,
                ..SyntheticSpec::default()
            },
            "idiosyncrasy",
        ),
        (
            SyntheticSpec {
                records_per_user: Range { min: 3, max: 2 },
                ..SyntheticSpec::default()
            },
            "records_per_user",
        ),
        (
            SyntheticSpec {
                n_groups: 0,
                ..SyntheticSpec::default()
            },
            "n_groups",
        ),
    ];
    for (spec, field) in cases {
        match generate(&spec) {
            Err(Error::Config(m)) => assert!(m.contains(field), "{m}"),
            other => panic!("{field}: {other:?}"),
        }
    }
}

#[test]
fn unknown_spec_fields_are_rejected() {
    let err = serde_json::from_str::<SyntheticSpec>(r#"{"n_group": 3}"#).unwrap_err();
    assert!(err.to_string().contains("n_group"));
}

#[test]
fn groups_are_separable_from_response_bytes() {
    for task in [TaskKind::Paraphrase, TaskKind::Tagging, TaskKind::Rating] {
        for seed in 0..3 {
            let c = generate(&SyntheticSpec {
                idiosyncrasy: 0.0,
                task,
                seed,
                ..SyntheticSpec::default()
            })
            .unwrap();
            let acc = nearest_centroid_accuracy(&c).unwrap();
            assert!(acc >= 0.95, "{task:?} seed {seed}: {acc}");
        }
    }
}

#[test]
fn empty_file_gives_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.jsonl");
    std::fs::write(&p, "").unwrap();
    let r = load_jsonl(&p).unwrap();
    assert!(r.corpus.is_empty());
    assert!(r.errors.is_empty());
}

#[test]
fn bad_lines_are_reported_and_others_kept() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.jsonl");
    let text = [
        r#"{"user_id": "a", "input": "q", "output": "r", "profile": [{"input": "q0", "output": "r0"}, {"text": "note"}]}"#,
        r#"{"input": "q", "output": "r", "profile": []}"#,
        r#"not json"#,
        r#"{"user_id": "b", "input": null, "output": "free"}"#,
        r#"{"user_id": "a", "input": "q", "output": "r"}"#,
        r#"{"user_id": "c", "input": "q", "output": "r", "profile": [{"input": "x"}]}"#,
    ]
    .join("\n");
    std::fs::write(&p, text).unwrap();
    let r = load_jsonl(&p).unwrap();
    let lines: Vec<usize> = r.errors.iter().map(|e| e.line).collect();
    assert_eq!(lines, vec![2, 3, 5, 6]);
    assert!(r.errors[0].message.contains("user_id"));
    assert!(r.errors[2].message.contains("duplicate"));
    assert!(r.errors[3].message.contains("profile[0]"));
    let ids: Vec<&str> = r.corpus.users.iter().map(|u| u.user_id.as_str()).collect();
    assert_eq!(ids, vec!["a", "b"]);
    assert_eq!(
        r.corpus.users[0].history,
        vec![
            Entry::pair("q0", "r0"),
            Entry::Text { text: "note".into() },
            Entry::pair("q", "r")
        ]
    );
    assert_eq!(r.corpus.users[1].history, vec![Entry::Text { text: "free".into() }]);
}

#[test]
fn unreadable_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_jsonl(&dir.path().join("missing.jsonl")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn export_then_load_round_trips() {
    let mut c = generate(&SyntheticSpec::default()).unwrap();
    c.users[1].history.insert(
        0,
        Entry::Text {
            text: "with \"quotes\"\nand newline".into(),
        },
    );
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.jsonl");
    export_jsonl(&c, &p).unwrap();
    let back = load_jsonl(&p).unwrap();
    assert!(back.errors.is_empty());
    assert_eq!(back.corpus.record_count(), c.record_count());
    for u in &mut c.users {
        u.group_label = None;
    }
    assert_eq!(back.corpus, c);
}

#[test]
fn labels_sidecar_round_trips() {
    let c = generate(&SyntheticSpec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("labels.csv");
    c.write_labels_csv(&p).unwrap();
    let labels = Corpus::read_labels_csv(&p).unwrap();
    assert_eq!(labels, c.labels().unwrap());
    let mut stripped = c.clone();
    stripped.users.iter_mut().for_each(|u| u.group_label = None);
    stripped.attach_labels(&labels).unwrap();
    assert_eq!(stripped, c);
}

#[test]
fn split_is_deterministic_and_disjoint() {
    let c = generate(&SyntheticSpec::default()).unwrap();
    let a = Split::new(&c, 0.25, 3).unwrap();
    assert_eq!(a, Split::new(&c, 0.25, 3).unwrap());
    assert_eq!(a.test_users.len(), 6);
    assert_eq!(a.train_users.len(), 18);
    assert!(a.test_users.iter().all(|u| !a.train_users.contains(u)));
    let (rest, last) = hold_out_last(&c.users[0]).unwrap();
    assert_eq!(rest.len(), 9);
    assert_eq!(last, &c.users[0].history[9]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_partitions_users(seed in 0u64..1000, frac in 0.0f64..0.9, n in 2usize..6) {
        let c = generate(&SyntheticSpec { users_per_group: n, seed, ..SyntheticSpec::default() }).unwrap();
        let s = Split::new(&c, frac, seed).unwrap();
        let all: BTreeSet<&String> = s.train_users.iter().chain(&s.test_users).collect();
        prop_assert_eq!(all.len(), c.users.len());
        prop_assert_eq!(s.train_users.len() + s.test_users.len(), c.users.len());
        prop_assert!(!s.train_users.is_empty());
    }

    #[test]
    fn responses_are_short(seed in 0u64..1000, s in 0.0f64..=1.0) {
        for task in [TaskKind::Paraphrase, TaskKind::Tagging, TaskKind::Rating] {
            let c = generate(&SyntheticSpec { seed, idiosyncrasy: s, task, ..SyntheticSpec::default() }).unwrap();
            for u in &c.users {
                for e in &u.history {
                    let (q, r) = e.parts();
                    prop_assert!(q.unwrap().len() + r.len() + 2 <= 64);
                }
            }
        }
    }
}
