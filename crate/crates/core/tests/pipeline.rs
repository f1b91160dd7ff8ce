mod common;

use halludetect::pipeline::{run_pipeline, Manifest, Pipeline, RunConfig, STAGES};
use halludetect::Error;

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn full_run_writes_every_stage_and_resumes_for_free() {
    let (server, _) = common::oracle_cluster(0.8, &["alpha", "beta", "gamma"]).await;
    let dir = tempfile::tempdir().unwrap();
    let config = common::write_run_fixture(dir.path(), &server.base_url(), 8, 200);

    let run_dir = run_pipeline(&config).await.unwrap();
    for stage in STAGES {
        assert!(run_dir.join(stage).join("stage.json").is_file(), "{stage} incomplete");
    }
    for file in [
        "baseline/alpha.jsonl",
        "baseline/table.txt",
        "prompt_sweep/ours-4shot-cot.jsonl",
        "prompt_sweep/rationales.json",
        "weak_labels/weak_labels.jsonl",
        "weak_labels/sft.jsonl",
        "weak_labels/training.json",
        "vote/weights.json",
        "final/predictions.jsonl",
        "final/report.json",
    ] {
        assert!(run_dir.join(file).is_file(), "missing {file}");
    }

    let manifest: Manifest = serde_json::from_slice(&std::fs::read(run_dir.join("manifest.json")).unwrap()).unwrap();
    let files = common::snapshot(&run_dir);
    assert_eq!(manifest.files.len(), files.len() - 1);
    for (rel, bytes) in &files {
        if rel == "manifest.json" {
            continue;
        }
        let digest = halludetect::pipeline::file_sha256(&run_dir.join(rel)).unwrap();
        assert_eq!(manifest.files[rel], digest, "{rel}");
        assert!(!bytes.is_empty() || rel.ends_with(".jsonl"));
    }

    let before = server.request_count();
    let pipeline = Pipeline::new(RunConfig::load(&config).unwrap()).unwrap();
    let outcome = pipeline.run().await.unwrap();
    assert_eq!(outcome.skipped.len(), STAGES.len());
    assert!(outcome.executed.is_empty());
    assert_eq!(server.request_count(), before);
    assert_eq!(common::snapshot(&run_dir), files);
}

#[tokio::test]
async fn tampered_stage_is_rerun() {
    let (server, _) = common::oracle_cluster(0.9, &["alpha", "beta", "gamma"]).await;
    let dir = tempfile::tempdir().unwrap();
    let config = common::write_run_fixture(dir.path(), &server.base_url(), 8, 30);
    let run_dir = run_pipeline(&config).await.unwrap();
    let original = std::fs::read(run_dir.join("vote/weights.json")).unwrap();
    std::fs::write(run_dir.join("vote/weights.json"), b"{}").unwrap();

    let outcome = Pipeline::new(RunConfig::load(&config).unwrap()).unwrap().run().await.unwrap();
    assert_eq!(outcome.executed, vec!["vote".to_string()]);
    assert_eq!(std::fs::read(run_dir.join("vote/weights.json")).unwrap(), original);
}

#[tokio::test]
async fn unknown_model_fails_before_any_request() {
    let (server, _) = common::oracle_cluster(0.8, &["alpha"]).await;
    let dir = tempfile::tempdir().unwrap();
    let config = common::write_run_fixture(dir.path(), &server.base_url(), 8, 10);
    let text = std::fs::read_to_string(&config).unwrap().replace(
        r#"models = ["alpha", "beta", "gamma"]"#,
        r#"models = ["alpha", "delta"]"#,
    );
    std::fs::write(&config, text).unwrap();
    let err = run_pipeline(&config).await.unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("delta")), "{err}");
    assert_eq!(err.class().exit_code(), 1);
    assert_eq!(server.request_count(), 0);
    assert!(!dir.path().join("runs").exists());
}

#[tokio::test]
async fn stage_failure_names_the_stage_and_keeps_earlier_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    // nothing listens here, so the very first stage fails
    let config = common::write_run_fixture(dir.path(), "http://127.0.0.1:1", 8, 10);
    let text = std::fs::read_to_string(&config).unwrap().replace("max_retries = 1", "max_retries = 0");
    std::fs::write(&config, text).unwrap();
    let err = run_pipeline(&config).await.unwrap_err();
    match &err {
        Error::Stage { stage, .. } => assert_eq!(stage, "baseline"),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(err.class().exit_code(), 2);
    let runs = std::fs::read_dir(dir.path().join("runs")).unwrap().count();
    assert_eq!(runs, 1);
}
