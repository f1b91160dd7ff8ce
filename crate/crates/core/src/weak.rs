//! Weak labels from inference consistency.
//!
//! A point keeps a label only if every configured sampling-parameter set of a
//! model agrees (per-model label), and every configured model's per-model
//! label is present and equal. Survivors are class-balanced by downsampling
//! the majority class.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use futures::future::try_join_all;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::client::{InferenceClient, ModelEndpoint, Prediction, SamplingParams};
use crate::data::{DataPoint, Label, Split, Task};
use crate::error::{Error, Result};
use crate::prompt::{render_instruction, Demonstration, InstructionVariant, PromptConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyConfig {
    pub models: Vec<String>,
    /// Sampling-parameter ids run against every model.
    pub param_sets: Vec<String>,
    #[serde(default = "yes")]
    pub require_unanimity: bool,
}

fn yes() -> bool {
    true
}

impl ConsistencyConfig {
    pub fn new(models: Vec<String>, param_sets: Vec<String>) -> Self {
        ConsistencyConfig {
            models,
            param_sets,
            require_unanimity: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() || self.param_sets.is_empty() {
            return Err(Error::Config("consistency needs at least one model and one param set".into()));
        }
        if !self.require_unanimity {
            return Err(Error::Config("only unanimous consistency is supported".into()));
        }
        let unique_models: BTreeSet<&String> = self.models.iter().collect();
        let unique_params: BTreeSet<&String> = self.param_sets.iter().collect();
        if unique_models.len() != self.models.len() || unique_params.len() != self.param_sets.len() {
            return Err(Error::Config("duplicate (model, params) pair in consistency config".into()));
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        self.models
            .iter()
            .flat_map(|m| self.param_sets.iter().map(move |p| (m.clone(), p.clone())))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub model_id: String,
    pub params_id: String,
    pub p_halluc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakEntry {
    pub point: DataPoint,
    pub label: Label,
    pub provenance: Vec<Agreement>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeakLabeledSet {
    pub entries: Vec<WeakEntry>,
}

impl WeakLabeledSet {
    pub fn class_counts(&self) -> (usize, usize) {
        let h = self.entries.iter().filter(|e| e.label == Label::Hallucination).count();
        (h, self.entries.len() - h)
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path.as_ref(), &self.entries)
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut entries = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(&line).map_err(|e| Error::validation(i, "<line>", e.to_string()))?;
            entries.push(entry);
        }
        Ok(WeakLabeledSet { entries })
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// The label shared by every configured parameter set of one model, if any.
/// A missing or undecided prediction blocks agreement.
pub fn param_consistent_label(preds: &[&Prediction], param_ids: &[String]) -> Option<Label> {
    let mut common = None;
    for id in param_ids {
        let label = preds.iter().find(|p| &p.params_id == id)?.label?;
        match common {
            None => common = Some(label),
            Some(c) if c != label => return None,
            Some(_) => {}
        }
    }
    common
}

/// The label shared by every model, if all are present and equal.
pub fn cross_model_label(per_model: &BTreeMap<String, Option<Label>>) -> Option<Label> {
    let mut labels = per_model.values();
    let first = (*labels.next()?)?;
    labels.all(|l| *l == Some(first)).then_some(first)
}

/// Predictions of one (model, params) run, indexed by point id.
pub type RunTable = BTreeMap<(String, String), BTreeMap<String, Prediction>>;

pub fn index_runs(runs: impl IntoIterator<Item = Prediction>) -> RunTable {
    let mut table = RunTable::new();
    for p in runs {
        table
            .entry((p.model_id.clone(), p.params_id.clone()))
            .or_default()
            .insert(p.point_id.clone(), p);
    }
    table
}

/// Points on which every configured (model, params) pair agrees, in input
/// order, with their provenance. No balancing.
pub fn filter_consistent(points: &[DataPoint], runs: &RunTable, cfg: &ConsistencyConfig) -> Vec<WeakEntry> {
    let mut kept = Vec::new();
    for point in points {
        let mut per_model = BTreeMap::new();
        let mut provenance = Vec::new();
        for model in &cfg.models {
            let preds: Vec<&Prediction> = cfg
                .param_sets
                .iter()
                .filter_map(|params| runs.get(&(model.clone(), params.clone()))?.get(&point.id))
                .collect();
            let label = param_consistent_label(&preds, &cfg.param_sets);
            per_model.insert(model.clone(), label);
            provenance.extend(preds.iter().map(|p| Agreement {
                model_id: p.model_id.clone(),
                params_id: p.params_id.clone(),
                p_halluc: p.p_halluc,
            }));
        }
        if let Some(label) = cross_model_label(&per_model) {
            kept.push(WeakEntry {
                point: point.clone(),
                label,
                provenance,
            });
        }
    }
    kept
}

/// Downsamples the majority class to the minority size. Order is preserved.
pub fn balance<T>(entries: Vec<(T, Label)>, seed: u64) -> Vec<(T, Label)> {
    let h = entries.iter().filter(|(_, l)| *l == Label::Hallucination).count();
    let n = entries.len() - h;
    if h == 0 || n == 0 {
        if !entries.is_empty() {
            log::warn!("one class is empty ({h} Hallucination, {n} Not Hallucination); balanced set is empty");
        }
        return Vec::new();
    }
    if h == n {
        return entries;
    }
    let (majority, keep) = if h > n {
        (Label::Hallucination, n)
    } else {
        (Label::NotHallucination, h)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: BTreeSet<usize> = index::sample(&mut rng, h.max(n), keep).into_iter().collect();
    let mut rank = 0;
    entries
        .into_iter()
        .filter(|(_, l)| {
            if *l != majority {
                return true;
            }
            let keep_this = chosen.contains(&rank);
            rank += 1;
            keep_this
        })
        .collect()
}

pub fn balance_set(entries: Vec<WeakEntry>, seed: u64) -> WeakLabeledSet {
    let paired = entries.into_iter().map(|e| {
        let l = e.label;
        (e, l)
    });
    WeakLabeledSet {
        entries: balance(paired.collect(), seed).into_iter().map(|(e, _)| e).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct WeakLabelRun {
    pub set: WeakLabeledSet,
    /// Consistent entries before balancing.
    pub consistent: Vec<WeakEntry>,
    pub predictions: Vec<Prediction>,
}

/// Runs every (model, params) batch over the unlabeled split, filters for
/// unanimous agreement and balances the classes.
#[allow(clippy::too_many_arguments)]
pub async fn generate_weak_labels(
    unlabeled: &Split,
    cfg: &ConsistencyConfig,
    prompt: &PromptConfig,
    demos: &BTreeMap<Task, Vec<Demonstration>>,
    endpoints: &[ModelEndpoint],
    params: &[SamplingParams],
    client: &InferenceClient,
    balance_seed: u64,
) -> Result<WeakLabelRun> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for (model, params_id) in cfg.pairs() {
        let endpoint = endpoints
            .iter()
            .find(|e| e.model_id == model)
            .ok_or_else(|| Error::Config(format!("unknown model id `{model}`")))?;
        let sampling = params
            .iter()
            .find(|p| p.id == params_id)
            .ok_or_else(|| Error::Config(format!("unknown param set `{params_id}`")))?;
        jobs.push(client.predict_batch(&unlabeled.points, demos, prompt, endpoint, sampling));
    }
    let batches = try_join_all(jobs).await?;
    let predictions: Vec<Prediction> = batches.into_iter().flatten().collect();
    let runs = index_runs(predictions.iter().cloned());
    let consistent = filter_consistent(&unlabeled.points, &runs, cfg);
    let set = balance_set(consistent.clone(), balance_seed);
    Ok(WeakLabelRun {
        set,
        consistent,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

pub fn sft_record(entry: &WeakEntry, variant: InstructionVariant) -> SftRecord {
    SftRecord {
        instruction: render_instruction(&entry.point, variant),
        input: String::new(),
        output: entry.label.answer_word().to_string(),
    }
}

/// Writes one instruction-tuning record per entry.
pub fn export_sft(set: &WeakLabeledSet, variant: InstructionVariant, path: impl AsRef<Path>) -> Result<()> {
    let records: Vec<SftRecord> = set.entries.iter().map(|e| sft_record(e, variant)).collect();
    write_jsonl(path.as_ref(), &records)
}
