//! Instruction templates, balanced few-shot sampling and prompt assembly.
//!
//! Two instruction variants exist. The naive one asks whether a sentence is
//! supported by a context; the task-specific one (`Ours`) describes the
//! generation task and shows source, target and hypothesis explicitly. For
//! definition modeling the two are identical.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use futures::stream::{self, TryStreamExt};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::{InferenceClient, ModelEndpoint, SamplingParams};
use crate::data::{DataPoint, Label, Split, Task};
use crate::error::{Error, Result};

/// Final line of every non-CoT question.
pub const ANSWER_CUE: &str = "Answer using ONLY yes or no:";
/// Appended to the target block when chain-of-thought is enabled.
pub const COT_CUE: &str = "Let's think step by step. Reasoning:";
/// Last sentence of a rationale request.
pub const RATIONALE_REQUEST: &str = "Explain briefly why.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionVariant {
    Naive,
    Ours,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub point: DataPoint,
    pub label: Label,
    pub rationale: Option<String>,
}

impl Demonstration {
    pub fn new(point: DataPoint) -> Result<Self> {
        let label = point
            .gold_label
            .ok_or_else(|| Error::MissingGold(point.id.clone()))?;
        Ok(Demonstration {
            point,
            label,
            rationale: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub variant: InstructionVariant,
    #[serde(default)]
    pub shots: usize,
    #[serde(default)]
    pub cot: bool,
    #[serde(default)]
    pub seed: u64,
}

impl PromptConfig {
    pub fn zero_shot(variant: InstructionVariant) -> Self {
        PromptConfig {
            variant,
            shots: 0,
            cot: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.shots.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "shots must be even (half per class), got {}",
                self.shots
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub text: String,
    pub point_id: String,
    pub config_fingerprint: String,
    pub cot: bool,
}

pub fn render_instruction(point: &DataPoint, variant: InstructionVariant) -> String {
    match (variant, point.task) {
        (InstructionVariant::Naive, _) | (InstructionVariant::Ours, Task::DM) => {
            let context = match point.task {
                Task::MT => &point.tgt,
                Task::DM | Task::PG => &point.src,
            };
            format!(
                "Context: {context}\nSentence: {}\nIs the Sentence supported by the Context above? {ANSWER_CUE}",
                point.hyp
            )
        }
        (InstructionVariant::Ours, task) => {
            let name = task.long_name();
            format!(
                "Given the following information related to {name} task:\n\
                 Src: Source input sentence\n\
                 Tgt: {name} standard answer\n\
                 Hyp: {name} predicted answer\n\
                 Please determine whether hyp contains unexpected hallucinations based on src and tgt.\n\
                 \n\
                 Src: {}\n\
                 Tgt: {}\n\
                 Hyp: {}\n\
                 Is the Hyp supported by the Src and Tgt above? {ANSWER_CUE}",
                point.src, point.tgt, point.hyp
            )
        }
    }
}

/// Draws `k` demonstrations of `task` from the trial split, `k / 2` of each
/// label, alternating Hallucination / Not Hallucination.
pub fn sample_demonstrations(trial: &Split, task: Task, k: usize, seed: u64) -> Result<Vec<Demonstration>> {
    if !k.is_multiple_of(2) {
        return Err(Error::Config(format!("shots must be even, got {k}")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let per_class = k / 2;
    let pool = |label: Label| -> Vec<&DataPoint> {
        trial
            .points
            .iter()
            .filter(|p| p.task == task && p.gold_label == Some(label))
            .collect()
    };
    let positives = pool(Label::Hallucination);
    let negatives = pool(Label::NotHallucination);
    for (label, members) in [(Label::Hallucination, &positives), (Label::NotHallucination, &negatives)] {
        if members.len() < per_class {
            return Err(Error::InsufficientPool {
                task,
                label,
                required: per_class,
                available: members.len(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task as u64);
    let pick_pos = index::sample(&mut rng, positives.len(), per_class);
    let pick_neg = index::sample(&mut rng, negatives.len(), per_class);

    let mut out = Vec::with_capacity(k);
    for (i, j) in pick_pos.iter().zip(pick_neg.iter()) {
        out.push(Demonstration::new(positives[i].clone())?);
        out.push(Demonstration::new(negatives[j].clone())?);
    }
    Ok(out)
}

/// Samples demonstrations for every task present in the trial split.
pub fn sample_all_tasks(trial: &Split, k: usize, seed: u64) -> Result<BTreeMap<Task, Vec<Demonstration>>> {
    Task::ALL
        .iter()
        .map(|&task| Ok((task, sample_demonstrations(trial, task, k, seed)?)))
        .collect()
}

fn demo_block(demo: &Demonstration, variant: InstructionVariant, cot: bool) -> Result<String> {
    let instruction = render_instruction(&demo.point, variant);
    let answer = demo.label.answer_word();
    if cot {
        let rationale = demo
            .rationale
            .as_deref()
            .ok_or_else(|| Error::MissingRationale(demo.point.id.clone()))?;
        Ok(format!("{instruction}\nReasoning: {rationale}\nAnswer: {answer}"))
    } else {
        Ok(format!("{instruction} {answer}"))
    }
}

pub fn assemble_prompt(point: &DataPoint, demos: &[Demonstration], config: &PromptConfig) -> Result<RenderedPrompt> {
    config.validate()?;
    if demos.len() != config.shots {
        return Err(Error::Config(format!(
            "{} demonstrations supplied for a {}-shot prompt",
            demos.len(),
            config.shots
        )));
    }
    let mut blocks = Vec::with_capacity(demos.len() + 1);
    for demo in demos {
        if demo.point.task != point.task {
            return Err(Error::TaskMismatch {
                demo_id: demo.point.id.clone(),
                demo_task: demo.point.task,
                target_task: point.task,
            });
        }
        blocks.push(demo_block(demo, config.variant, config.cot)?);
    }
    let mut target = render_instruction(point, config.variant);
    if config.cot {
        target.push('\n');
        target.push_str(COT_CUE);
    }
    blocks.push(target);

    Ok(RenderedPrompt {
        text: blocks.join("\n\n"),
        point_id: point.id.clone(),
        config_fingerprint: config_fingerprint(config, demos),
        cot: config.cot,
    })
}

pub fn config_fingerprint(config: &PromptConfig, demos: &[Demonstration]) -> String {
    let ids: Vec<&str> = demos.iter().map(|d| d.point.id.as_str()).collect();
    let canonical = serde_json::json!({ "config": config, "demos": ids });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

/// Prompt asking a model to justify a known verdict.
pub fn rationale_prompt(demo: &Demonstration, variant: InstructionVariant) -> String {
    format!(
        "{}\nThe correct answer is {}. {RATIONALE_REQUEST}",
        render_instruction(&demo.point, variant),
        demo.label.answer_word()
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedRationale {
    pub model: String,
    pub rationale: String,
}

/// Rationales keyed by demonstration id; each entry remembers which model
/// produced it and only answers lookups for that model.
#[derive(Debug, Default)]
pub struct RationaleCache {
    entries: Mutex<BTreeMap<String, CachedRationale>>,
}

impl RationaleCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Ok(Self::new());
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let entries = serde_json::from_slice(&bytes)?;
        Ok(RationaleCache {
            entries: Mutex::new(entries),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&*self.entries.lock().unwrap())?;
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn get(&self, demo_id: &str, model: &str) -> Option<String> {
        self.entries
            .lock()
            .unwrap()
            .get(demo_id)
            .filter(|c| c.model == model)
            .map(|c| c.rationale.clone())
    }

    pub fn insert(&self, demo_id: &str, model: &str, rationale: &str) {
        self.entries.lock().unwrap().insert(
            demo_id.to_string(),
            CachedRationale {
                model: model.to_string(),
                rationale: rationale.to_string(),
            },
        );
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fills in missing rationales by asking `endpoint` to explain each
/// demonstration's known label. Labels are never changed.
pub async fn generate_rationales(
    demos: Vec<Demonstration>,
    client: &InferenceClient,
    endpoint: &ModelEndpoint,
    variant: InstructionVariant,
    cache: &RationaleCache,
) -> Result<Vec<Demonstration>> {
    let params = SamplingParams::rationale();
    stream::iter(demos.into_iter().map(Ok::<_, Error>))
        .map_ok(|mut demo| {
            let params = &params;
            async move {
                if demo.rationale.is_some() {
                    return Ok(demo);
                }
                if let Some(r) = cache.get(&demo.point.id, &endpoint.model_id) {
                    demo.rationale = Some(r);
                    return Ok(demo);
                }
                let response = client
                    .complete(&rationale_prompt(&demo, variant), endpoint, params)
                    .await?;
                let text = response
                    .choices
                    .first()
                    .map(|c| c.text.trim().to_string())
                    .unwrap_or_default();
                if text.is_empty() {
                    return Err(Error::EmptyRationale(demo.point.id.clone()));
                }
                cache.insert(&demo.point.id, &endpoint.model_id, &text);
                demo.rationale = Some(text);
                Ok(demo)
            }
        })
        .try_buffered(client.max_in_flight())
        .try_collect()
        .await
}
