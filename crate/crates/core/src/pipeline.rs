//! End-to-end orchestration from a TOML run configuration.
//!
//! Stages run in order and write into `runs/<fingerprint>/<stage>/`:
//!
//! 1. `baseline` – zero-shot naive prompts, every model, validation split
//! 2. `prompt_sweep` – instruction variant × shots × CoT for one model
//! 3. `weak_labels` – consistency-filtered labels on unlabeled data, SFT export
//! 4. `vote` – per-task weight search on validation
//! 5. `final` – voted predictions on the test split (validation if absent)
//!
//! A stage whose `stage.json` lists files that still hash to the recorded
//! values is skipped on rerun.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::client::{write_predictions, InferenceClient, ModelEndpoint, Prediction, SamplingParams};
use crate::data::{parse_dataset, DataPoint, Split, SplitKind, Task};
use crate::error::{Error, Result};
use crate::eval::{render_table, report, EvalReport};
use crate::prompt::{
    generate_rationales, sample_demonstrations, Demonstration, InstructionVariant, PromptConfig, RationaleCache,
};
use crate::vote::{apply_voting, probabilities_by_point, search_weights, voted_predictions, VoteWeights};
use crate::weak::{export_sft, generate_weak_labels, ConsistencyConfig};

pub const STAGES: [&str; 5] = ["baseline", "prompt_sweep", "weak_labels", "vote", "final"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSection {
    pub variant: InstructionVariant,
    #[serde(default)]
    pub shots: usize,
    #[serde(default)]
    pub cot: bool,
    /// Model that writes demonstration rationales; defaults to the first
    /// consistency model.
    #[serde(default)]
    pub rationale_model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub params: Option<String>,
    #[serde(default = "default_variants")]
    pub variants: Vec<InstructionVariant>,
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    #[serde(default = "default_cot")]
    pub cot: Vec<bool>,
    /// Sampling-mode parameter set used for chain-of-thought runs.
    #[serde(default)]
    pub cot_params: Option<String>,
}

fn default_variants() -> Vec<InstructionVariant> {
    vec![InstructionVariant::Naive, InstructionVariant::Ours]
}
fn default_shots() -> Vec<usize> {
    vec![2, 4, 6, 8]
}
fn default_cot() -> Vec<bool> {
    vec![false]
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            model: None,
            params: None,
            variants: default_variants(),
            shots: default_shots(),
            cot: default_cot(),
            cot_params: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteSection {
    /// Candidate models; defaults to the consistency models.
    #[serde(default)]
    pub models: Option<Vec<String>>,
    #[serde(default)]
    pub params: Option<String>,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_step() -> f64 {
    0.05
}
fn default_threshold() -> f64 {
    0.5
}

impl Default for VoteSection {
    fn default() -> Self {
        VoteSection {
            models: None,
            params: None,
            step: default_step(),
            threshold: default_threshold(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub demos: u64,
    pub balance: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub trial: PathBuf,
    pub unlabeled: PathBuf,
    pub validation: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub endpoints: Vec<ModelEndpoint>,
    pub param_sets: Vec<SamplingParams>,
    pub prompt: PromptSection,
    #[serde(default)]
    pub sweep: SweepConfig,
    pub consistency: ConsistencyConfig,
    #[serde(default)]
    pub vote: VoteSection,
    pub seeds: Seeds,
    pub paths: Paths,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Fine-tuning settings recorded alongside the SFT export.
    #[serde(default)]
    pub training: BTreeMap<String, Value>,
}

fn default_in_flight() -> usize {
    8
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads a config file; relative data paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::from_toml(&text)?;
        let root = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        };
        resolve(&mut cfg.paths.trial);
        resolve(&mut cfg.paths.unlabeled);
        resolve(&mut cfg.paths.validation);
        if let Some(t) = cfg.paths.test.as_mut() {
            resolve(t);
        }
        resolve(&mut cfg.paths.out_dir);
        Ok(cfg)
    }

    pub fn endpoint(&self, model: &str) -> Result<&ModelEndpoint> {
        self.endpoints
            .iter()
            .find(|e| e.model_id == model)
            .ok_or_else(|| Error::Config(format!("unknown model id `{model}`")))
    }

    pub fn params(&self, id: &str) -> Result<&SamplingParams> {
        self.param_sets
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::Config(format!("unknown param set `{id}`")))
    }

    fn default_params(&self) -> Result<&SamplingParams> {
        self.param_sets
            .first()
            .ok_or_else(|| Error::Config("no param sets configured".into()))
    }

    pub fn sweep_model(&self) -> Result<&ModelEndpoint> {
        match &self.sweep.model {
            Some(m) => self.endpoint(m),
            None => self
                .endpoints
                .first()
                .ok_or_else(|| Error::Config("no endpoints configured".into())),
        }
    }

    pub fn sweep_params(&self) -> Result<&SamplingParams> {
        match &self.sweep.params {
            Some(p) => self.params(p),
            None => self.default_params(),
        }
    }

    pub fn vote_models(&self) -> Vec<String> {
        self.vote.models.clone().unwrap_or_else(|| self.consistency.models.clone())
    }

    pub fn vote_params(&self) -> Result<&SamplingParams> {
        match &self.vote.params {
            Some(p) => self.params(p),
            None => self.default_params(),
        }
    }

    pub fn rationale_model(&self) -> Result<&ModelEndpoint> {
        match &self.prompt.rationale_model {
            Some(m) => self.endpoint(m),
            None => self.endpoint(
                self.consistency
                    .models
                    .first()
                    .ok_or_else(|| Error::Config("consistency lists no models".into()))?,
            ),
        }
    }

    pub fn prompt_config(&self) -> PromptConfig {
        PromptConfig {
            variant: self.prompt.variant,
            shots: self.prompt.shots,
            cot: self.prompt.cot,
            seed: self.seeds.demos,
        }
    }

    /// Checks every cross-reference without touching the network.
    pub fn validate(&self) -> Result<()> {
        if self.endpoints.is_empty() {
            return Err(Error::Config("no endpoints configured".into()));
        }
        let mut ids = BTreeSet::new();
        for e in &self.endpoints {
            if !ids.insert(&e.model_id) {
                return Err(Error::Config(format!("duplicate model id `{}`", e.model_id)));
            }
        }
        let mut pids = BTreeSet::new();
        for p in &self.param_sets {
            p.validate()?;
            if !pids.insert(&p.id) {
                return Err(Error::Config(format!("duplicate param set id `{}`", p.id)));
            }
        }
        self.prompt_config().validate()?;
        self.consistency.validate()?;
        for m in &self.consistency.models {
            self.endpoint(m)?;
        }
        for p in &self.consistency.param_sets {
            let params = self.params(p)?;
            if self.prompt.cot && params.logprob_mode {
                return Err(Error::Config(format!(
                    "param set `{p}` scores by log-probability, which cannot read a chain-of-thought answer"
                )));
            }
        }
        self.rationale_model()?;
        self.sweep_model()?;
        let sweep_params = self.sweep_params()?;
        for &k in &self.sweep.shots {
            if k % 2 != 0 {
                return Err(Error::Config(format!("sweep shots must be even, got {k}")));
            }
        }
        if self.sweep.cot.contains(&true) {
            let cot_params = match &self.sweep.cot_params {
                Some(id) => self.params(id)?,
                None => sweep_params,
            };
            if cot_params.logprob_mode {
                return Err(Error::Config(
                    "chain-of-thought sweep needs `sweep.cot_params` naming a sampling-mode param set".into(),
                ));
            }
        }
        let vote_models = self.vote_models();
        if vote_models.is_empty() {
            return Err(Error::Config("voting needs at least one model".into()));
        }
        for m in &vote_models {
            self.endpoint(m)?;
        }
        let vote_params = self.vote_params()?;
        if self.prompt.cot && vote_params.logprob_mode {
            return Err(Error::Config(
                "vote params score by log-probability, which cannot read a chain-of-thought answer".into(),
            ));
        }
        self.weight_config().units()?;
        Ok(())
    }

    pub fn weight_config(&self) -> crate::vote::WeightSearchConfig {
        crate::vote::WeightSearchConfig {
            step: self.vote.step,
            threshold: self.vote.threshold,
        }
    }

    /// Hash of everything that affects stage outputs. Transport settings
    /// (URLs, tokens, timeouts, concurrency) and file locations are excluded;
    /// input files contribute their content hashes.
    pub fn fingerprint(&self) -> Result<String> {
        let models: Vec<&str> = self.endpoints.iter().map(|e| e.model_id.as_str()).collect();
        let mut inputs = BTreeMap::new();
        inputs.insert("trial", file_sha256(&self.paths.trial)?);
        inputs.insert("unlabeled", file_sha256(&self.paths.unlabeled)?);
        inputs.insert("validation", file_sha256(&self.paths.validation)?);
        if let Some(t) = &self.paths.test {
            inputs.insert("test", file_sha256(t)?);
        }
        let canonical = serde_json::json!({
            "models": models,
            "param_sets": self.param_sets,
            "prompt": self.prompt,
            "sweep": self.sweep,
            "consistency": self.consistency,
            "vote": self.vote,
            "seeds": self.seeds,
            "training": self.training,
            "inputs": inputs,
        });
        Ok(hex::encode(Sha256::digest(canonical.to_string().as_bytes()))[..16].to_string())
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn file_stem(model: &str) -> String {
    model
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    stage: String,
    fingerprint: String,
    files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_fingerprint: String,
    /// Run-relative path → SHA-256 of every produced file.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub run_dir: PathBuf,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

fn list_files(dir: &Path, prefix: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        let rel = prefix.join(entry.file_name());
        if path.is_dir() {
            list_files(&path, &rel, out)?;
        } else {
            out.push(rel);
        }
    }
    Ok(())
}

fn hash_tree(dir: &Path, skip: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    list_files(dir, Path::new(""), &mut files)?;
    files
        .into_iter()
        .filter(|rel| !skip.iter().any(|s| rel == Path::new(s)))
        .map(|rel| {
            let key = rel.to_string_lossy().replace('\\', "/");
            Ok((key, file_sha256(&dir.join(&rel))?))
        })
        .collect()
}

struct Inputs {
    trial: Split,
    unlabeled: Split,
    validation: Split,
    test: Option<Split>,
}

pub struct Pipeline {
    config: RunConfig,
    client: InferenceClient,
    fingerprint: String,
    run_dir: PathBuf,
    inputs: Inputs,
}

impl Pipeline {
    /// Validates the config and loads every split. No network traffic.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let fingerprint = config.fingerprint()?;
        let inputs = Inputs {
            trial: parse_dataset(&config.paths.trial, SplitKind::Trial)?,
            unlabeled: parse_dataset(&config.paths.unlabeled, SplitKind::UnlabeledTrain)?,
            validation: parse_dataset(&config.paths.validation, SplitKind::Validation)?,
            test: config
                .paths
                .test
                .as_ref()
                .map(|p| parse_dataset(p, SplitKind::Test))
                .transpose()?,
        };
        let run_dir = config.paths.out_dir.join(&fingerprint);
        Ok(Pipeline {
            client: InferenceClient::new(config.max_in_flight),
            config,
            fingerprint,
            run_dir,
            inputs,
        })
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn client(&self) -> &InferenceClient {
        &self.client
    }

    pub async fn run(&self) -> Result<PipelineOutcome> {
        std::fs::create_dir_all(&self.run_dir)
            .map_err(|e| Error::io(format!("creating {}", self.run_dir.display()), e))?;
        write_json(&self.run_dir.join("config.json"), &self.config_record())?;
        let mut executed = Vec::new();
        let mut skipped = Vec::new();
        for stage in STAGES {
            let dir = self.run_dir.join(stage);
            if self.stage_complete(stage, &dir)? {
                log::info!("stage {stage}: up to date, skipping");
                skipped.push(stage.to_string());
                continue;
            }
            log::info!("stage {stage}: running");
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(|e| Error::io(format!("clearing {}", dir.display()), e))?;
            }
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            let result = match stage {
                "baseline" => self.baseline(&dir).await,
                "prompt_sweep" => self.prompt_sweep(&dir).await,
                "weak_labels" => self.weak_labels(&dir).await,
                "vote" => self.vote(&dir).await,
                "final" => self.final_stage(&dir).await,
                _ => unreachable!(),
            };
            result.map_err(|e| Error::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            })?;
            let record = StageRecord {
                stage: stage.to_string(),
                fingerprint: self.fingerprint.clone(),
                files: hash_tree(&dir, &["stage.json"])?,
            };
            write_json(&dir.join("stage.json"), &record)?;
            executed.push(stage.to_string());
        }
        let manifest = Manifest {
            config_fingerprint: self.fingerprint.clone(),
            files: hash_tree(&self.run_dir, &["manifest.json"])?,
        };
        write_json(&self.run_dir.join("manifest.json"), &manifest)?;
        Ok(PipelineOutcome {
            run_dir: self.run_dir.clone(),
            executed,
            skipped,
        })
    }

    /// Config as recorded in the run directory, without transport details.
    fn config_record(&self) -> Value {
        serde_json::json!({
            "fingerprint": self.fingerprint,
            "models": self.config.endpoints.iter().map(|e| &e.model_id).collect::<Vec<_>>(),
            "param_sets": self.config.param_sets,
            "prompt": self.config.prompt,
            "sweep": self.config.sweep,
            "consistency": self.config.consistency,
            "vote": self.config.vote,
            "seeds": self.config.seeds,
            "training": self.config.training,
        })
    }

    fn stage_complete(&self, stage: &str, dir: &Path) -> Result<bool> {
        let record_path = dir.join("stage.json");
        if !record_path.exists() {
            return Ok(false);
        }
        let record: StageRecord = match read_json(&record_path) {
            Ok(r) => r,
            Err(_) => return Ok(false),
        };
        if record.stage != stage || record.fingerprint != self.fingerprint {
            return Ok(false);
        }
        for (rel, hash) in &record.files {
            let path = dir.join(rel);
            if !path.exists() || &file_sha256(&path)? != hash {
                return Ok(false);
            }
        }
        Ok(true)
    }

    async fn demos_for(
        &self,
        points: &[DataPoint],
        shots: usize,
        variant: InstructionVariant,
        cot: bool,
        dir: &Path,
    ) -> Result<BTreeMap<Task, Vec<Demonstration>>> {
        let prompt = PromptConfig {
            variant,
            shots,
            cot,
            seed: self.config.seeds.demos,
        };
        let cache_path = dir.join("rationales.json");
        let cache = RationaleCache::load(&cache_path)?;
        let demos = prepare_demos(
            &self.inputs.trial,
            points,
            &prompt,
            &self.client,
            self.config.rationale_model()?,
            &cache,
        )
        .await?;
        if !cache.is_empty() {
            cache.save(&cache_path)?;
        }
        Ok(demos)
    }

    async fn predict(
        &self,
        points: &[DataPoint],
        demos: &BTreeMap<Task, Vec<Demonstration>>,
        prompt: &PromptConfig,
        model: &str,
        params: &SamplingParams,
    ) -> Result<Vec<Prediction>> {
        let endpoint = self.config.endpoint(model)?;
        self.client.predict_batch(points, demos, prompt, endpoint, params).await
    }

    async fn baseline(&self, dir: &Path) -> Result<()> {
        let val = &self.inputs.validation;
        let params = self.config.sweep_params()?;
        let prompt = PromptConfig::zero_shot(InstructionVariant::Naive);
        let mut reports = BTreeMap::new();
        for endpoint in &self.config.endpoints {
            let preds = self.predict(&val.points, &BTreeMap::new(), &prompt, &endpoint.model_id, params).await?;
            write_predictions(dir.join(format!("{}.jsonl", file_stem(&endpoint.model_id))), &preds)?;
            reports.insert(endpoint.model_id.clone(), report(&preds, val)?);
        }
        write_json(&dir.join("report.json"), &reports)?;
        write_text(&dir.join("table.txt"), &model_table(&reports))
    }

    async fn prompt_sweep(&self, dir: &Path) -> Result<()> {
        let val = &self.inputs.validation;
        let model = self.config.sweep_model()?.model_id.clone();
        let sweep = &self.config.sweep;
        let mut rows = vec![[
            "shots".to_string(),
            "inst.".to_string(),
            "cot".to_string(),
            "acc".to_string(),
            "rho".to_string(),
        ]];
        let mut reports = BTreeMap::new();
        for &cot in &sweep.cot {
            let params = match (&sweep.cot_params, cot) {
                (Some(id), true) => self.config.params(id)?,
                _ => self.config.sweep_params()?,
            };
            for &shots in &sweep.shots {
                for &variant in &sweep.variants {
                    let prompt = PromptConfig {
                        variant,
                        shots,
                        cot,
                        seed: self.config.seeds.demos,
                    };
                    let demos = self.demos_for(&val.points, shots, variant, cot, dir).await?;
                    let preds = self.predict(&val.points, &demos, &prompt, &model, params).await?;
                    let name = format!(
                        "{}-{shots}shot{}",
                        variant_name(variant),
                        if cot { "-cot" } else { "" }
                    );
                    write_predictions(dir.join(format!("{name}.jsonl")), &preds)?;
                    let r = report(&preds, val)?;
                    rows.push([
                        format!("{shots}-shot"),
                        variant_name(variant).to_string(),
                        if cot { "with" } else { "w/o" }.to_string(),
                        format!("{:.3}", r.accuracy),
                        r.rho.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into()),
                    ]);
                    reports.insert(name, r);
                }
            }
        }
        write_json(&dir.join("report.json"), &reports)?;
        write_text(&dir.join("table.txt"), &render_table(&rows))
    }

    async fn weak_labels(&self, dir: &Path) -> Result<()> {
        let unlabeled = &self.inputs.unlabeled;
        let prompt = self.config.prompt_config();
        let demos = self
            .demos_for(&unlabeled.points, prompt.shots, prompt.variant, prompt.cot, dir)
            .await?;
        let run = generate_weak_labels(
            unlabeled,
            &self.config.consistency,
            &prompt,
            &demos,
            &self.config.endpoints,
            &self.config.param_sets,
            &self.client,
            self.config.seeds.balance,
        )
        .await?;
        for (model, params) in self.config.consistency.pairs() {
            let preds: Vec<Prediction> = run
                .predictions
                .iter()
                .filter(|p| p.model_id == model && p.params_id == params)
                .cloned()
                .collect();
            write_predictions(dir.join(format!("pred-{}-{}.jsonl", file_stem(&model), file_stem(&params))), &preds)?;
        }
        crate::weak::WeakLabeledSet {
            entries: run.consistent.clone(),
        }
        .save_jsonl(dir.join("consistent.jsonl"))?;
        run.set.save_jsonl(dir.join("weak_labels.jsonl"))?;
        export_sft(&run.set, prompt.variant, dir.join("sft.jsonl"))?;
        let consistent_h = run
            .consistent
            .iter()
            .filter(|e| e.label == crate::data::Label::Hallucination)
            .count();
        let (balanced_h, balanced_n) = run.set.class_counts();
        write_json(
            &dir.join("stats.json"),
            &serde_json::json!({
                "points": unlabeled.len(),
                "consistent": run.consistent.len(),
                "consistent_hallucination": consistent_h,
                "consistent_not_hallucination": run.consistent.len() - consistent_h,
                "balanced": run.set.entries.len(),
                "balanced_hallucination": balanced_h,
                "balanced_not_hallucination": balanced_n,
            }),
        )?;
        write_json(&dir.join("training.json"), &self.config.training)
    }

    async fn vote_inputs(
        &self,
        points: &[DataPoint],
        dir: &Path,
    ) -> Result<BTreeMap<String, BTreeMap<String, f64>>> {
        let prompt = self.config.prompt_config();
        let params = self.config.vote_params()?;
        let demos = self.demos_for(points, prompt.shots, prompt.variant, prompt.cot, dir).await?;
        let mut probs = BTreeMap::new();
        for model in self.config.vote_models() {
            let preds = self.predict(points, &demos, &prompt, &model, params).await?;
            write_predictions(dir.join(format!("pred-{}.jsonl", file_stem(&model))), &preds)?;
            probs.insert(model, probabilities_by_point(&preds));
        }
        Ok(probs)
    }

    async fn vote(&self, dir: &Path) -> Result<()> {
        let val = &self.inputs.validation;
        let models = self.config.vote_models();
        let probs = self.vote_inputs(&val.points, dir).await?;
        let cfg = self.config.weight_config();
        let tasks: BTreeSet<Task> = val.points.iter().map(|p| p.task).collect();
        let mut weights = BTreeMap::new();
        for task in tasks {
            weights.insert(task, search_weights(task, &models, &probs, val, &cfg)?);
        }
        write_json(&dir.join("weights.json"), &weights)?;

        let mut reports = BTreeMap::new();
        for model in &models {
            let preds = crate::client::read_predictions(dir.join(format!("pred-{}.jsonl", file_stem(model))))?;
            reports.insert(model.clone(), report(&preds, val)?);
        }
        let voted = apply_voting(&weights, &val.points, &probs, cfg.threshold)?;
        reports.insert("vote".into(), report(&voted_predictions(&voted, "vote"), val)?);
        write_json(&dir.join("report.json"), &reports)?;
        write_text(&dir.join("table.txt"), &model_table(&reports))
    }

    async fn final_stage(&self, dir: &Path) -> Result<()> {
        let split = self.inputs.test.as_ref().unwrap_or(&self.inputs.validation);
        let weights: BTreeMap<Task, VoteWeights> = read_json(&self.run_dir.join("vote").join("weights.json"))?;
        let probs = self.vote_inputs(&split.points, dir).await?;
        let voted = apply_voting(&weights, &split.points, &probs, self.config.vote.threshold)?;
        let preds = voted_predictions(&voted, "vote");
        write_predictions(dir.join("predictions.jsonl"), &preds)?;
        if split.points.iter().all(|p| p.gold_label.is_some()) && !split.is_empty() {
            let r = report(&preds, split)?;
            write_json(&dir.join("report.json"), &r)?;
            write_text(&dir.join("table.txt"), &r.to_table())?;
        }
        Ok(())
    }
}

/// Demonstrations for the tasks present in `points`. With chain of thought
/// enabled, rationales come from `cache` or are generated by
/// `rationale_endpoint` and added to it.
pub async fn prepare_demos(
    trial: &Split,
    points: &[DataPoint],
    prompt: &PromptConfig,
    client: &InferenceClient,
    rationale_endpoint: &ModelEndpoint,
    cache: &RationaleCache,
) -> Result<BTreeMap<Task, Vec<Demonstration>>> {
    let tasks: BTreeSet<Task> = points.iter().map(|p| p.task).collect();
    let mut out = BTreeMap::new();
    for task in tasks {
        let mut demos = sample_demonstrations(trial, task, prompt.shots, prompt.seed)?;
        if prompt.cot && !demos.is_empty() {
            demos = generate_rationales(demos, client, rationale_endpoint, prompt.variant, cache).await?;
        }
        out.insert(task, demos);
    }
    Ok(out)
}

fn variant_name(v: InstructionVariant) -> &'static str {
    match v {
        InstructionVariant::Naive => "naive",
        InstructionVariant::Ours => "ours",
    }
}

fn model_table(reports: &BTreeMap<String, EvalReport>) -> String {
    let mut rows = vec![["model".to_string(), "n".to_string(), "acc".to_string(), "rho".to_string()]];
    for (model, r) in reports {
        rows.push([
            model.clone(),
            r.n.to_string(),
            format!("{:.3}", r.accuracy),
            r.rho.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into()),
        ]);
    }
    render_table(&rows)
}

/// Loads, validates and runs a config file; returns the run directory.
pub async fn run_pipeline(config_path: impl AsRef<Path>) -> Result<PathBuf> {
    let config = RunConfig::load(config_path)?;
    let pipeline = Pipeline::new(config)?;
    Ok(pipeline.run().await?.run_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONFIG: &str = r#"
max_in_flight = 4

[[endpoints]]
model_id = "m1"
base_url = "http://127.0.0.1:9"

[[endpoints]]
model_id = "m2"
base_url = "http://127.0.0.1:9"

[[param_sets]]
id = "greedy"
logprob_mode = true

[[param_sets]]
id = "warm"
temperature = 0.7
n_samples = 3

[prompt]
variant = "ours"
shots = 2

[consistency]
models = ["m1", "m2"]
param_sets = ["greedy", "warm"]

[seeds]
demos = 1
balance = 2

[paths]
trial = "trial.json"
unlabeled = "train.json"
validation = "val.json"
"#;

    #[test]
    fn parses_and_validates() {
        let cfg = RunConfig::from_toml(CONFIG).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.sweep.shots, vec![2, 4, 6, 8]);
        assert_eq!(cfg.vote_models(), vec!["m1", "m2"]);
        assert_eq!(cfg.params("warm").unwrap().n_samples, 3);
        assert_eq!(cfg.paths.out_dir, PathBuf::from("runs"));
    }

    #[test]
    fn unknown_model_fails_validation() {
        let text = CONFIG.replace(r#"models = ["m1", "m2"]"#, r#"models = ["m1", "ghost"]"#);
        let cfg = RunConfig::from_toml(&text).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("ghost")));
    }

    #[test]
    fn seeds_are_required() {
        let text = CONFIG.replace("[seeds]\ndemos = 1\nbalance = 2\n", "");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn cot_with_logprob_scoring_is_rejected() {
        let text = CONFIG.replace("shots = 2", "shots = 2\ncot = true");
        let cfg = RunConfig::from_toml(&text).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn file_stems_are_path_safe() {
        assert_eq!(file_stem("org/model:7b"), "org_model_7b");
    }
}
