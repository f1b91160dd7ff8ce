//! Independent reference implementations and fixtures shared by the
//! integration tests. The oracles are deliberately naive scalar loops so they
//! share no code with the library.

#![allow(dead_code)]

use std::collections::BTreeMap;

use halludetect::client::{ModelEndpoint, SamplingParams};
use halludetect::data::Label;
use halludetect::mock::{MockRule, MockServer};

/// Elementwise weighted mean, one scalar at a time.
pub fn linear_oracle(inputs: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let mut total = 0.0;
    for w in weights {
        total += w;
    }
    let mut out = vec![0.0; inputs[0].len()];
    for i in 0..out.len() {
        let mut acc = 0.0;
        for k in 0..inputs.len() {
            acc += weights[k] * inputs[k][i];
        }
        out[i] = acc / total;
    }
    out
}

pub fn slerp_oracle(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    let mut na = 0.0;
    let mut nb = 0.0;
    let mut ab = 0.0;
    for i in 0..a.len() {
        na += a[i] * a[i];
        nb += b[i] * b[i];
        ab += a[i] * b[i];
    }
    let na = na.sqrt();
    let nb = nb.sqrt();
    let mut out = vec![0.0; a.len()];
    if na == 0.0 || nb == 0.0 {
        for i in 0..a.len() {
            out[i] = (1.0 - t) * a[i] + t * b[i];
        }
        return out;
    }
    let mut c = ab / (na * nb);
    if c > 1.0 {
        c = 1.0;
    }
    if c < -1.0 {
        c = -1.0;
    }
    let omega = c.acos();
    if omega.sin() < 1e-7 {
        for i in 0..a.len() {
            out[i] = (1.0 - t) * a[i] + t * b[i];
        }
        return out;
    }
    for i in 0..a.len() {
        out[i] = (((1.0 - t) * omega).sin() * a[i] + (t * omega).sin() * b[i]) / omega.sin();
    }
    out
}

/// Trim via the k-th largest magnitude (entries above it kept, entries equal
/// to it kept in index order until k are taken), elect by sign of the sum,
/// average the agreeing values.
pub fn ties_oracle(base: &[f64], inputs: &[Vec<f64>], density: f64, lambda: f64) -> Vec<f64> {
    let n = base.len();
    let keep = ((density * n as f64).ceil() as usize).min(n);
    let mut trimmed = Vec::new();
    for theta in inputs {
        let tau: Vec<f64> = (0..n).map(|i| theta[i] - base[i]).collect();
        let mut mags: Vec<f64> = tau.iter().map(|v| v.abs()).collect();
        mags.sort_by(|a, b| b.total_cmp(a));
        let cut = mags[keep - 1];
        let above = tau.iter().filter(|v| v.abs() > cut).count();
        let mut at_cut_left = keep - above;
        let mut t = vec![0.0; n];
        for i in 0..n {
            if tau[i].abs() > cut {
                t[i] = tau[i];
            } else if tau[i].abs() == cut && at_cut_left > 0 {
                t[i] = tau[i];
                at_cut_left -= 1;
            }
        }
        trimmed.push(t);
    }
    let mut out = vec![0.0; n];
    for i in 0..n {
        let mut column: Vec<f64> = trimmed.iter().map(|t| t[i]).collect();
        column.sort_by(f64::total_cmp);
        let s: f64 = column.iter().sum();
        let mut agreeing: Vec<f64> = column
            .iter()
            .copied()
            .filter(|v| (s > 0.0 && *v > 0.0) || (s < 0.0 && *v < 0.0))
            .collect();
        let merged = if agreeing.is_empty() {
            0.0
        } else {
            agreeing.sort_by(f64::total_cmp);
            agreeing.iter().sum::<f64>() / agreeing.len() as f64
        };
        out[i] = base[i] + lambda * merged;
    }
    out
}

/// Average ranks by counting: 1 + #smaller + (#equal − 1)/2.
pub fn rank_oracle(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&xi| {
            let smaller = x.iter().filter(|&&v| v < xi).count() as f64;
            let equal = x.iter().filter(|&&v| v == xi).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
    pearson_oracle(&rank_oracle(x), &rank_oracle(y))
}

/// Kept iff every (model, params) cell is present and all cells are equal.
pub fn unanimity_oracle(cells: &[Option<Label>]) -> Option<Label> {
    let first = cells.first()?.as_ref()?;
    for c in cells {
        if c.as_ref() != Some(first) {
            return None;
        }
    }
    Some(*first)
}

pub fn rel_err(actual: f64, expected: f64) -> f64 {
    let diff = (actual - expected).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / expected.abs().max(actual.abs())
    }
}

/// One oracle server impersonating several independent models.
pub async fn oracle_cluster(accuracy: f64, models: &[&str]) -> (MockServer, Vec<ModelEndpoint>) {
    let mut rule = MockRule::oracle(accuracy, 0);
    rule.model_seeds = models
        .iter()
        .enumerate()
        .map(|(i, m)| (m.to_string(), 1000 + i as u64))
        .collect::<BTreeMap<_, _>>();
    let server = MockServer::start_local(rule).await.unwrap();
    let endpoints = models
        .iter()
        .map(|m| fast_endpoint(m, &server.base_url()))
        .collect();
    (server, endpoints)
}

pub fn fast_endpoint(model: &str, base_url: &str) -> ModelEndpoint {
    let mut ep = ModelEndpoint::new(model, base_url);
    ep.request_timeout_ms = 10_000;
    ep.max_retries = 1;
    ep.backoff_base_ms = 5;
    ep
}

/// A greedy log-probability set and a warm single-sample set.
pub fn two_param_sets() -> Vec<SamplingParams> {
    let greedy = SamplingParams::greedy("greedy");
    let warm = SamplingParams {
        id: "warm".into(),
        temperature: 0.7,
        top_p: 0.95,
        max_tokens: 16,
        n_samples: 1,
        logprob_mode: false,
    };
    vec![greedy, warm]
}

/// Writes planted-label splits and a run config into `dir`; returns the
/// config path. Three oracle models, two param sets, a CoT sweep arm.
pub fn write_run_fixture(dir: &std::path::Path, base_url: &str, max_in_flight: usize, n: usize) -> std::path::PathBuf {
    use halludetect::data::SplitKind;
    use halludetect::synthetic::planted_split;

    let splits = [
        ("trial.json", planted_split(SplitKind::Trial, 80, 1)),
        ("train.json", planted_split(SplitKind::UnlabeledTrain, n, 2)),
        ("val.json", planted_split(SplitKind::Validation, n, 3)),
        ("test.json", planted_split(SplitKind::Test, n, 4)),
    ];
    for (name, split) in &splits {
        std::fs::write(dir.join(name), split.to_json().unwrap()).unwrap();
    }
    let mut config = format!("max_in_flight = {max_in_flight}\n\n");
    for model in ["alpha", "beta", "gamma"] {
        config.push_str(&format!(
            "[[endpoints]]\nmodel_id = \"{model}\"\nbase_url = \"{base_url}\"\nmax_retries = 1\nbackoff_base_ms = 5\n\n"
        ));
    }
    config.push_str(
        r#"[[param_sets]]
id = "greedy"
logprob_mode = true

[[param_sets]]
id = "warm"
temperature = 0.7
top_p = 0.95

[prompt]
variant = "ours"
shots = 2

[sweep]
shots = [2, 4]
cot = [false, true]
cot_params = "warm"

[consistency]
models = ["alpha", "beta", "gamma"]
param_sets = ["greedy", "warm"]

[vote]
step = 0.1

[seeds]
demos = 17
balance = 23

[training]
method = "lora"
epochs = 3

[paths]
trial = "trial.json"
unlabeled = "train.json"
validation = "val.json"
test = "test.json"
out_dir = "runs"
"#,
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, config).unwrap();
    path
}

/// Every file under `root`, relative path → bytes.
pub fn snapshot(root: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &std::path::Path, root: &std::path::Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
