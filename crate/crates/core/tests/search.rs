use std::io::Write;

use relvar::data::{synth_generate, Dataset, Generator, SynthSpec};
use relvar::regressor::TrainConfig;
use relvar::search::{
    evaluate_subset, run_search, EvalScope, FeatureSubset, RankingTable, RunOptions, SearchError, SearchSpec,
};
use relvar::MiConfig;

fn data() -> Dataset {
    synth_generate(&SynthSpec {
        n_features: 4,
        generator: Generator::SinMix(1, 2, 4),
        noise_sigma: 0.05,
        n_rows: 400,
        seed: 31,
    })
    .unwrap()
}

fn spec(data: &Dataset) -> SearchSpec {
    let train = TrainConfig {
        hidden_dim: 4,
        max_epochs: 30,
        seed: 7,
        ..TrainConfig::default()
    };
    let universe = data.names().filter(|n| *n != SynthSpec::TARGET).map(String::from).collect();
    SearchSpec::new(SynthSpec::TARGET, universe, train)
}

fn ranking_bytes(table: &RankingTable) -> Vec<u8> {
    let mut buf = Vec::new();
    table.write(&mut buf).unwrap();
    buf
}

#[test]
fn worker_count_does_not_change_the_ranking() {
    let d = data();
    let s = spec(&d);
    let files: Vec<Vec<u8>> = [1, 2, 8]
        .iter()
        .map(|&workers| {
            let t = run_search(&d, &s, RunOptions { workers, ..RunOptions::default() }).unwrap();
            assert_eq!(t.results.len(), 15);
            ranking_bytes(&t)
        })
        .collect();
    assert_eq!(files[0], files[1]);
    assert_eq!(files[0], files[2]);
}

#[test]
fn resume_after_torn_write() {
    let d = data();
    let s = spec(&d);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("c.jsonl");
    let reference = ranking_bytes(&run_search(&d, &s, RunOptions::default()).unwrap());

    let cut = run_search(
        &d,
        &s,
        RunOptions {
            workers: 2,
            checkpoint: Some(ckpt.clone()),
            stop_after: Some(5),
            ..RunOptions::default()
        },
    );
    assert!(matches!(cut, Err(SearchError::Interrupted { completed: 5, total: 15 })), "{cut:?}");
    let lines = std::fs::read_to_string(&ckpt).unwrap().lines().count();
    assert_eq!(lines, 6);

    // a write cut off by a crash
    std::fs::OpenOptions::new()
        .append(true)
        .open(&ckpt)
        .unwrap()
        .write_all(b"{\"subset\":\"1,2\",\"raw_mi")
        .unwrap();
    let resumed = run_search(
        &d,
        &s,
        RunOptions {
            workers: 3,
            checkpoint: Some(ckpt.clone()),
            resume: true,
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert_eq!(ranking_bytes(&resumed), reference);
    let text = std::fs::read_to_string(&ckpt).unwrap();
    assert_eq!(text.lines().count(), 16);
    assert!(text.ends_with('\n'));

    // everything done: resuming again trains nothing and gives the same table
    let again = run_search(
        &d,
        &s,
        RunOptions {
            checkpoint: Some(ckpt.clone()),
            resume: true,
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert_eq!(ranking_bytes(&again), reference);
    assert_eq!(RankingTable::load(&ckpt).unwrap().results, resumed.results);
}

#[test]
fn checkpoint_from_another_search_is_rejected() {
    let d = data();
    let s = spec(&d);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("c.jsonl");
    let _ = run_search(
        &d,
        &s,
        RunOptions {
            checkpoint: Some(ckpt.clone()),
            stop_after: Some(2),
            ..RunOptions::default()
        },
    );
    let mut other = s.clone();
    other.train.seed += 1;
    let r = run_search(
        &d,
        &other,
        RunOptions {
            checkpoint: Some(ckpt.clone()),
            resume: true,
            ..RunOptions::default()
        },
    );
    assert!(matches!(r, Err(SearchError::CheckpointMismatch { .. })), "{r:?}");

    let mut text = std::fs::read_to_string(&ckpt).unwrap();
    text.push_str("not json\n");
    std::fs::write(&ckpt, text).unwrap();
    let r = run_search(
        &d,
        &s,
        RunOptions {
            checkpoint: Some(ckpt),
            resume: true,
            ..RunOptions::default()
        },
    );
    assert!(matches!(r, Err(SearchError::CheckpointCorrupt { line: 4, .. })), "{r:?}");
}

#[test]
fn a_job_does_not_depend_on_its_neighbours() {
    let d = data();
    let s = spec(&d);
    let table = run_search(&d, &s, RunOptions { workers: 4, ..RunOptions::default() }).unwrap();
    for mask in [0b0001u64, 0b1011, 0b1111] {
        let subset = FeatureSubset::new(s.universe_arc(), mask).unwrap();
        let alone = evaluate_subset(&subset, &d, &s.target, &s.train, &s.mi, s.eval_scope);
        let in_search = table.get(&subset).unwrap();
        assert_eq!(alone.score, in_search.score);
        assert_eq!(alone.test_rms, in_search.test_rms);
        assert_eq!(alone.epochs, in_search.epochs);
    }

    let narrow = SearchSpec {
        min_size: 3,
        ..s.clone()
    };
    let small = run_search(&d, &narrow, RunOptions::default()).unwrap();
    assert_eq!(small.results.len(), 5);
    for r in &small.results {
        assert_eq!(r.score, table.get(&r.subset).unwrap().score);
    }
}

#[test]
fn relevant_subsets_outscore_irrelevant_ones() {
    let d = data();
    let s = spec(&d);
    let table = run_search(&d, &s, RunOptions::default()).unwrap();
    let mi = |idx: &[usize]| {
        let subset = FeatureSubset::from_indices(s.universe_arc(), idx).unwrap();
        table.get(&subset).unwrap().score.unwrap().mi_nats
    };
    assert!(mi(&[1, 2, 4]) > mi(&[3]) + 0.2);
    assert!(mi(&[1, 2, 4]) >= mi(&[1]));
    assert!(table.best().unwrap().subset.contains(&FeatureSubset::from_indices(s.universe_arc(), &[1, 2, 4]).unwrap()));
    for w in table.results.windows(2) {
        let (a, b) = (w[0].score.unwrap(), w[1].score.unwrap());
        assert!(a.mi_nats >= b.mi_nats);
    }
}

#[test]
fn eval_scope_only_changes_scored_rows() {
    let d = data();
    let s = spec(&d);
    let subset = FeatureSubset::from_indices(s.universe_arc(), &[1, 2, 4]).unwrap();
    let all = evaluate_subset(&subset, &d, &s.target, &s.train, &MiConfig::default(), EvalScope::AllRows);
    let test = evaluate_subset(&subset, &d, &s.target, &s.train, &MiConfig::default(), EvalScope::TestSplit);
    assert_eq!(all.test_rms, test.test_rms);
    assert_ne!(all.score, test.score);
}
