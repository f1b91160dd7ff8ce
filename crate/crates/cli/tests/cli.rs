use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_halludetect"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Mock(Child, String);

impl Drop for Mock {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn mock_serve(extra: &[&str]) -> Mock {
    let mut child = bin()
        .args(["mock-serve", "--bind", "127.0.0.1:0"])
        .args(extra)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").unwrap().to_string();
    Mock(child, url)
}

fn write_splits(dir: &Path) {
    for (kind, n) in [("trial", "80"), ("train", "60"), ("validation", "60"), ("test", "30")] {
        ok(&["synth", "--kind", kind, "--n", n, "--seed", "5", "--out", &format!("{kind}.json")], dir);
    }
}

fn write_config(dir: &Path, url: &str) {
    let mut text = String::from("max_in_flight = 8\n");
    for m in ["a", "b"] {
        text.push_str(&format!("[[endpoints]]\nmodel_id = \"{m}\"\nbase_url = \"{url}\"\n"));
    }
    text.push_str(
        r#"[[param_sets]]
id = "greedy"
logprob_mode = true
[[param_sets]]
id = "warm"
temperature = 0.7
[prompt]
variant = "naive"
shots = 2
[consistency]
models = ["a", "b"]
param_sets = ["greedy", "warm"]
[seeds]
demos = 3
balance = 4
[paths]
trial = "trial.json"
unlabeled = "train.json"
validation = "validation.json"
test = "test.json"
"#,
    );
    std::fs::write(dir.join("run.toml"), text).unwrap();
}

#[test]
fn ingest_reports_counts_and_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--kind", "validation", "--n", "9", "--seed", "1", "--out", "v.json"], dir.path());
    let out = ok(&["ingest", "v.json", "--kind", "validation", "--out", "norm.json"], dir.path());
    assert!(out.starts_with("9 points"));
    assert!(out.contains("MT: 3 points"));
    assert_eq!(
        std::fs::read(dir.path().join("v.json")).unwrap(),
        std::fs::read(dir.path().join("norm.json")).unwrap()
    );

    // labeled records cannot pass as unlabeled training data
    let out = run(&["ingest", "v.json", "--kind", "train"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    std::fs::write(dir.path().join("broken.json"), "[{\"hyp\": }]").unwrap();
    let out = run(&["ingest", "broken.json", "--kind", "test"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at byte 9"));

    let out = run(&["ingest", "missing.json", "--kind", "test"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn infer_eval_vote_and_labels_against_the_mock() {
    let mock = mock_serve(&["--mode", "oracle", "--accuracy", "0.85", "--seed", "7", "--model-seed", "b=8"]);
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_splits(d);
    write_config(d, &mock.1);

    let preview = ok(&["prompt-preview", "--config", "run.toml", "--id", "val-0"], d);
    assert_eq!(preview.matches("Is the Sentence supported by the Context above?").count(), 3);

    for m in ["a", "b"] {
        let out = ok(
            &["infer", "--config", "run.toml", "--model", m, "--params", "greedy", "--out", &format!("{m}.jsonl")],
            d,
        );
        assert!(out.contains("60 predictions, 0 undecided"), "{out}");
    }
    let table = ok(&["eval", "--predictions", "a.jsonl", "--gold", "validation.json", "--json", "a.json"], d);
    assert!(table.contains("all (agnostic)"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("a.json")).unwrap()).unwrap();
    assert_eq!(report["n"], 60);

    ok(
        &["vote-search", "--predictions", "a.jsonl", "b.jsonl", "--gold", "validation.json", "--out", "w.json"],
        d,
    );
    for m in ["a", "b"] {
        ok(
            &[
                "infer", "--config", "run.toml", "--split", "test", "--model", m, "--params", "greedy", "--out",
                &format!("{m}-test.jsonl"),
            ],
            d,
        );
    }
    let out = ok(
        &[
            "vote-apply", "--weights", "w.json", "--predictions", "a-test.jsonl", "b-test.jsonl", "--input", "test.json",
            "--out", "voted.jsonl",
        ],
        d,
    );
    assert!(out.contains("30 voted predictions"));

    let out = ok(&["gen-labels", "--config", "run.toml", "--out", "weak.jsonl"], d);
    assert!(out.starts_with("60 points"), "{out}");
    let out = ok(&["export-sft", "--labels", "weak.jsonl", "--variant", "naive", "--out", "sft.jsonl"], d);
    let kept = std::fs::read_to_string(d.join("weak.jsonl")).unwrap().lines().count();
    assert_eq!(out.trim(), format!("{kept} records"));

    // an unknown param set is a validation error
    let out = run(&["infer", "--config", "run.toml", "--model", "a", "--params", "nope", "--out", "x.jsonl"], d);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unreachable_endpoint_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_splits(d);
    write_config(d, "http://127.0.0.1:1");
    let text = std::fs::read_to_string(d.join("run.toml"))
        .unwrap()
        .replace("base_url", "max_retries = 0\nbase_url");
    std::fs::write(d.join("run.toml"), text).unwrap();
    let out = run(&["run", "--config", "run.toml"], d);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("baseline"));
}

#[test]
fn run_twice_resumes() {
    let mock = mock_serve(&["--mode", "oracle", "--accuracy", "0.8"]);
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_splits(d);
    write_config(d, &mock.1);
    let text = std::fs::read_to_string(d.join("run.toml")).unwrap() + "[sweep]\nshots = [2]\n";
    std::fs::write(d.join("run.toml"), text).unwrap();
    let first = ok(&["run", "--config", "run.toml"], d);
    assert!(first.contains("final: done"));
    let second = ok(&["run", "--config", "run.toml"], d);
    assert!(second.contains("final: up to date") && !second.contains("done"));
}

#[test]
fn merge_subcommand_writes_a_loadable_checkpoint() {
    use halludetect::checkpoint::{load_checkpoint, save_checkpoint, Tensor, TensorCheckpoint};
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (name, values) in [("a", [2.0f32, 4.0]), ("b", [4.0, 8.0]), ("base", [0.0, 0.0])] {
        let mut c = TensorCheckpoint::new();
        c.insert("w", Tensor::f32(vec![2], values.to_vec()).unwrap());
        save_checkpoint(&c, d.join(format!("{name}.safetensors"))).unwrap();
    }
    ok(
        &[
            "merge", "--method", "linear", "--input", "a.safetensors", "b.safetensors", "--weights", "1,1", "--out",
            "lin.safetensors",
        ],
        d,
    );
    let merged = load_checkpoint(d.join("lin.safetensors")).unwrap();
    assert_eq!(merged.tensors["w"].data, vec![3.0, 6.0]);
    assert_eq!(merged.metadata["merge_inputs"], r#"["a.safetensors","b.safetensors"]"#);

    ok(
        &[
            "merge", "--method", "ties", "--base", "base.safetensors", "--input", "a.safetensors", "b.safetensors",
            "--density", "0.5", "--out", "ties.safetensors",
        ],
        d,
    );
    assert_eq!(load_checkpoint(d.join("ties.safetensors")).unwrap().tensors["w"].data, vec![0.0, 6.0]);

    let out = run(&["merge", "--method", "slerp", "--input", "a.safetensors", "--t", "0.5", "--out", "s.safetensors"], d);
    assert_eq!(out.status.code(), Some(1));
}
