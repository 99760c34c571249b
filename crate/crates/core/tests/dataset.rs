use std::fs;
use std::path::{Path, PathBuf};

use neural_cache::dataset::{
    dataset_stats, load_dataset, make_stream, split_online_test, SplitSize, FILLER_LOGPROB,
};
use neural_cache::{ClassLabel, Dataset, Error, Instance, TeacherDistribution};
use proptest::prelude::*;

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mini")
}

fn copy_fixture(to: &Path) {
    for f in ["manifest.json", "online.jsonl", "test.jsonl"] {
        fs::copy(fixture().join(f), to.join(f)).unwrap();
    }
}

fn instance(i: usize, k: usize) -> Instance {
    let mut lp = vec![-5.0; k];
    lp[i % k] = -0.01;
    Instance {
        id: format!("x{i}"),
        text: Some(format!("text {i}")),
        features: vec![i as f64, 1.0],
        embedding: vec![1.0, i as f64],
        gold: ClassLabel((i + 1) % k),
        teacher: TeacherDistribution::new(lp).unwrap(),
    }
}

#[test]
fn loads_the_fixture() {
    let ds = load_dataset(&fixture()).unwrap();
    assert_eq!(ds.name(), "mini");
    assert_eq!(ds.num_classes(), 3);
    assert_eq!((ds.online.len(), ds.test.len()), (4, 2));
    assert_eq!(ds.online[0].teacher.logprobs()[2], FILLER_LOGPROB);
    assert_eq!(ds.online[2].text, None);
}

#[test]
fn fixture_statistics_match_hand_computation() {
    let stats = dataset_stats(&load_dataset(&fixture()).unwrap());
    assert_eq!(stats.teacher_accuracy, 4.0 / 6.0);
    assert!((stats.avg_margin - 32.5 / 6.0).abs() < 1e-12);
    assert_eq!(stats.avg_margin_when_wrong, Some(0.75));
    let counts: Vec<usize> = stats.class_counts.iter().map(|(_, n)| *n).collect();
    assert_eq!(counts, vec![3, 2, 1]);
    assert!(stats.to_string().contains("teacher accuracy"));
}

#[test]
fn four_instance_two_class_round_trip() {
    let online: Vec<Instance> = (0..3).map(|i| instance(i, 2)).collect();
    let ds = Dataset::new(
        "pair",
        vec!["pos".into(), "neg".into()],
        online,
        vec![instance(3, 2)],
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.num_classes(), 2);
}

#[test]
fn malformed_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    let path = dir.path().join("online.jsonl");
    let mut lines: Vec<String> = fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    lines[2] = "{\"id\": \"d\", \"features\": [1.0,".into();
    fs::write(&path, lines.join("\n")).unwrap();
    match load_dataset(dir.path()).unwrap_err() {
        Error::Line { line, message, .. } => {
            assert_eq!(line, 3);
            assert!(message.contains("malformed"), "{message}");
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn wrong_logprob_count_names_the_instance() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    let path = dir.path().join("test.jsonl");
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace("[-2.0,-1.0,0.0]", "[-2.0,-1.0,0.0,-4.0]");
    fs::write(&path, text).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(err.is_validation());
    let msg = err.to_string();
    assert!(msg.contains("`f`") && msg.contains(":2:"), "{msg}");
}

#[test]
fn unknown_class_and_duplicate_ids_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    let path = dir.path().join("online.jsonl");
    let original = fs::read_to_string(&path).unwrap();
    fs::write(&path, original.replacen("\"gold\":0", "\"gold\":3", 1)).unwrap();
    assert!(load_dataset(dir.path())
        .unwrap_err()
        .to_string()
        .contains("unknown class"));
    fs::write(&path, original.replace("\"id\":\"b\"", "\"id\":\"c\"")).unwrap();
    assert!(load_dataset(dir.path())
        .unwrap_err()
        .to_string()
        .contains("duplicate"));
}

#[test]
fn counts_must_match_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    let path = dir.path().join("manifest.json");
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace("\"online\": 4", "\"online\": 5");
    fs::write(&path, text).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));
}

#[test]
fn split_sizes() {
    let all: Vec<Instance> = (0..10).map(|i| instance(i, 2)).collect();
    let (online, test) = split_online_test(all.clone(), SplitSize::Ratio(0.8), 1).unwrap();
    assert_eq!((online.len(), test.len()), (8, 2));
    assert!(online.iter().all(|o| test.iter().all(|t| t.id != o.id)));
    assert_eq!(
        split_online_test(all.clone(), SplitSize::Ratio(0.8), 1)
            .unwrap()
            .1,
        test
    );
    let (online, test) = split_online_test(all.clone(), SplitSize::OnlineCount(7), 1).unwrap();
    assert_eq!((online.len(), test.len()), (7, 3));
    for bad in [0.0, 1.0, -0.5, 1.5] {
        assert!(split_online_test(all.clone(), SplitSize::Ratio(bad), 1).is_err());
    }
    assert!(split_online_test(Vec::new(), SplitSize::Ratio(0.5), 1).is_err());
}

#[test]
fn teacher_distribution_invariants() {
    assert!(TeacherDistribution::new(vec![-0.1]).is_err());
    assert!(TeacherDistribution::new(vec![0.5, -1.0]).is_err());
    assert!(TeacherDistribution::new(vec![f64::NAN, -1.0]).is_err());
    let tied = TeacherDistribution::new(vec![-1.0, -0.5, -0.5]).unwrap();
    assert_eq!(tied.argmax(), ClassLabel(1));
    let p = TeacherDistribution::new(vec![-0.1, FILLER_LOGPROB])
        .unwrap()
        .probabilities();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

fn arb_dataset() -> impl Strategy<Value = Dataset> {
    (2usize..5, 1usize..4, 1usize..20, 0usize..6).prop_flat_map(|(k, d, n_online, n_test)| {
        let inst = (
            prop::collection::vec(-1e6f64..1e6, d),
            prop::collection::vec(0.1f64..10.0, 2),
            0..k,
            prop::collection::vec(-99.0f64..0.0, k),
            any::<bool>(),
        );
        prop::collection::vec(inst, n_online + n_test).prop_map(move |rows| {
            let mut all: Vec<Instance> = rows
                .into_iter()
                .enumerate()
                .map(|(i, (features, embedding, gold, mut lp, filler))| {
                    if filler {
                        lp[k - 1] = FILLER_LOGPROB;
                    }
                    Instance {
                        id: format!("id-{i}"),
                        text: (i % 2 == 0).then(|| format!("\"quoted\" {i}")),
                        features,
                        embedding,
                        gold: ClassLabel(gold),
                        teacher: TeacherDistribution::new(lp).unwrap(),
                    }
                })
                .collect();
            let test = all.split_off(n_online);
            let names = (0..k).map(|c| format!("class {c}")).collect();
            Dataset::new("prop", names, all, test).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn save_load_is_identity(ds in arb_dataset()) {
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        prop_assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn stream_is_a_reproducible_permutation(ds in arb_dataset(), seed in any::<u64>()) {
        let s = make_stream(&ds, seed).unwrap();
        let mut sorted = s.order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..ds.online.len()).collect::<Vec<_>>());
        prop_assert_eq!(make_stream(&ds, seed).unwrap(), s);
    }

    #[test]
    fn split_partitions_the_input(n in 1usize..60, ratio in 0.01f64..0.99, seed in any::<u64>()) {
        let all: Vec<Instance> = (0..n).map(|i| instance(i, 3)).collect();
        let (online, test) = split_online_test(all, SplitSize::Ratio(ratio), seed).unwrap();
        prop_assert_eq!(online.len(), (ratio * n as f64).round() as usize);
        prop_assert_eq!(online.len() + test.len(), n);
        let mut ids: Vec<&str> = online.iter().chain(&test).map(|i| i.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
    }
}
