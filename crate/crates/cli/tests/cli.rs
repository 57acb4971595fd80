use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fewshot_core::controller::{ValidationSpec, WorkerSpec};
use fewshot_core::dataset::{write_embedding_dataset, write_image_dataset};
use fewshot_core::pipeline::{EpisodeSpec, RunConfig, RunDir, RunReport, Timings};
use fewshot_core::synthetic::{blob_rasters, gaussian_embeddings, BlobSpec};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn fewshot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fewshot")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn embeddings_100(dir: &Path) -> PathBuf {
    let ds = gaussian_embeddings(100, 3, 4, 2.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let path = dir.join("emb.bin");
    write_embedding_dataset(&ds, &path).unwrap();
    path
}

fn worker() -> WorkerSpec {
    let mut w = WorkerSpec {
        hidden: vec![16],
        embedding_dim: 8,
        ..WorkerSpec::default()
    };
    w.hyper.batch_way = 2;
    w.hyper.batch_shot = 4;
    w.hyper.batches_per_epoch = 5;
    w
}

/// Ring images plus a small config; relative dataset path on purpose.
fn ring_setup(workers: usize) -> (TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, _) = blob_rasters(&BlobSpec::default()).unwrap();
    write_image_dataset(&ds, &tmp.path().join("rings")).unwrap();
    let cfg = RunConfig {
        dataset: PathBuf::from("rings"),
        split_ratios: [2, 3, 3],
        workers: vec![worker(); workers],
        validation: ValidationSpec {
            episodes: 10,
            way: 3,
            shot: 1,
            query: 5,
        },
        evaluation: EpisodeSpec {
            episodes: 40,
            way: 3,
            shot: 1,
            query: 10,
        },
        budget_seconds: 600.0,
        max_rounds: Some(2),
        fake_round_seconds: Some(1.0),
        ..RunConfig::default()
    };
    let path = tmp.path().join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    (tmp, path)
}

#[test]
fn split_is_fifty_ten_forty_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = embeddings_100(tmp.path());
    let (a, b) = (tmp.path().join("a.json"), tmp.path().join("b.json"));
    for out in [&a, &b] {
        let o = fewshot(&["split", "--dataset", s(&data), "--ratios", "5:1:4", "--seed", "3", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    let len = |k: &str| json[k].as_array().unwrap().len();
    assert_eq!((len("meta_train"), len("meta_valid"), len("meta_test")), (50, 10, 40));
}

#[test]
fn zero_ratio_exits_two_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let data = embeddings_100(tmp.path());
    let o = fewshot(&["split", "--dataset", s(&data), "--ratios", "0:1:4"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train ratio"), "{}", stderr(&o));
}

#[test]
fn train_writes_every_artifact() {
    let (tmp, cfg) = ring_setup(1);
    let out = tmp.path().join("run");
    let o = fewshot(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("mean accuracy: "));
    let dir = RunDir::new(&out);
    for p in [dir.config(), dir.split(), dir.encoder(0), dir.ensemble(), dir.log(), dir.report()] {
        assert!(p.is_file(), "missing {}", p.display());
    }
    let report = RunReport::load(&dir.report()).unwrap();
    assert_eq!(report.episodes.len(), 40);
    assert_eq!(report.workers.len(), 1);
}

#[test]
fn four_workers_get_four_checkpoints_and_eval_reruns() {
    let (tmp, cfg) = ring_setup(4);
    let out = tmp.path().join("run");
    let o = fewshot(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = RunDir::new(&out);
    for w in 0..4 {
        assert!(dir.encoder(w).is_file());
    }
    assert!(!dir.encoder(4).exists());

    let o = fewshot(&["eval", "--out", s(&out), "--episodes", "600", "--distance", "euclidean"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("episodes: 600 (3-way 1-shot"), "{}", stdout(&o));
    let report = RunReport::load(&dir.report()).unwrap();
    assert_eq!(report.episodes.len(), 600);
    assert_eq!(report.workers.len(), 4);

    let printed = fewshot(&["report", "--out", s(&out)]);
    assert!(printed.status.success());
    assert_eq!(stdout(&printed), stdout(&o));

    std::fs::remove_file(dir.encoder(2)).unwrap();
    let o = fewshot(&["eval", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn starved_budget_exits_three_with_degraded_report() {
    let (tmp, cfg) = ring_setup(2);
    let mut c = RunConfig::load(&cfg).unwrap();
    c.fake_round_seconds = Some(5.0);
    std::fs::write(&cfg, c.to_json()).unwrap();
    let out = tmp.path().join("run");
    let o = fewshot(&["train", "--config", s(&cfg), "--out", s(&out), "--budget-seconds", "1"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let report = RunReport::load(&RunDir::new(&out).report()).unwrap();
    assert!(report.degraded);
    assert!(report.episodes.is_empty());
}

fn fixture_report(dir: &Path, episodes: Vec<f64>) {
    let report = RunReport {
        version: "0.1.0".into(),
        seed: 5,
        // deliberately stale: the summary recomputes from the episodes
        mean_accuracy: Some(0.99),
        ci95: Some(0.0),
        episodes,
        way: 5,
        shot: 1,
        query: 19,
        workers: Vec::new(),
        learner_accuracies: Vec::new(),
        ensemble_variant: None,
        ensemble_candidates: Vec::new(),
        timings: Timings::default(),
        degraded: false,
        config: RunConfig::default(),
    };
    report.save(&RunDir::new(dir).report()).unwrap();
}

#[test]
fn report_recomputes_the_mean() {
    let tmp = tempfile::tempdir().unwrap();
    fixture_report(tmp.path(), vec![0.4, 0.4084, 0.3, 0.5084]);
    let o = fewshot(&["report", "--out", s(tmp.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().next(), Some("mean accuracy: 0.4042"));

    fixture_report(tmp.path(), vec![]);
    let o = fewshot(&["report", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));

    let o = fewshot(&["report", "--out", s(&tmp.path().join("nowhere"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sample_episodes_prints_one_episode() {
    let (_tmp, cfg) = ring_setup(1);
    let args = ["sample-episodes", "--config", s(&cfg), "--way", "3", "--shot", "2", "--query", "4", "--seed", "8"];
    let o = fewshot(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), stdout(&fewshot(&args)));
    let ep: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(ep["support"].as_array().unwrap().len(), 6);
    assert_eq!(ep["query"].as_array().unwrap().len(), 12);
    let o = fewshot(&["sample-episodes", "--config", s(&cfg), "--way", "7"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_corpus_feeds_split() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("rings");
    let o = fewshot(&["synth", "--out", s(&data), "--classes", "10", "--per-class", "5", "--size", "16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.join("labels.csv").is_file());
    let o = fewshot(&["split", "--dataset", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(json["meta_train"].as_array().unwrap().len(), 5);
    // more classes than the image has room for is an input error
    let o = fewshot(&["synth", "--out", s(&tmp.path().join("x")), "--classes", "9"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
