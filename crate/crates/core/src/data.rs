//! Dataset model and ingestion of SHROOM-style record files.
//!
//! A split file is a JSON array of records (or, with [`ParseOptions::jsonl`],
//! one record per line). Recognised record fields:
//!
//! | record field        | `DataPoint` field |
//! |---------------------|-------------------|
//! | `id`                | `id` (positional index when absent) |
//! | `task`              | `task` (`"DM"`, `"MT"`, `"PG"`) |
//! | `track`             | `track` (`"agnostic"`, `"aware"`; inferred when absent) |
//! | `src`, `tgt`, `hyp` | `src`, `tgt`, `hyp` |
//! | `ref`               | `ref_source` |
//! | `model`             | `producer_model` |
//! | `label`             | `gold_label` (`"Hallucination"`, `"Not Hallucination"`) |
//! | `p(Hallucination)`  | `gold_p` |
//!
//! Any other field is ignored with a warning.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    DM,
    MT,
    PG,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::DM, Task::MT, Task::PG];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::DM => "DM",
            Task::MT => "MT",
            Task::PG => "PG",
        }
    }

    /// Human-readable task name used in the task-specific instructions.
    pub fn long_name(self) -> &'static str {
        match self {
            Task::DM => "Definition Modeling",
            Task::MT => "Machine Translation",
            Task::PG => "Paraphrase Generation",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "DM" => Ok(Task::DM),
            "MT" => Ok(Task::MT),
            "PG" => Ok(Task::PG),
            other => Err(format!("unknown task {other:?} (expected DM, MT or PG)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Track {
    Agnostic,
    Aware,
}

impl Track {
    pub fn as_str(self) -> &'static str {
        match self {
            Track::Agnostic => "agnostic",
            Track::Aware => "aware",
        }
    }
}

impl fmt::Display for Track {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Track {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "agnostic" | "model-agnostic" => Ok(Track::Agnostic),
            "aware" | "model-aware" => Ok(Track::Aware),
            other => Err(format!("unknown track {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Hallucination,
    #[serde(rename = "Not Hallucination")]
    NotHallucination,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Hallucination => "Hallucination",
            Label::NotHallucination => "Not Hallucination",
        }
    }

    /// Majority-vote label for an annotator fraction; exactly one half is not a majority.
    pub fn from_gold_p(p: f64) -> Label {
        if p > 0.5 {
            Label::Hallucination
        } else {
            Label::NotHallucination
        }
    }

    /// The answer word a model gives to "is the hypothesis supported?".
    pub fn answer_word(self) -> &'static str {
        match self {
            Label::Hallucination => "no",
            Label::NotHallucination => "yes",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Hallucination" => Ok(Label::Hallucination),
            "Not Hallucination" => Ok(Label::NotHallucination),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub id: String,
    pub task: Task,
    pub track: Track,
    pub src: String,
    pub tgt: String,
    pub hyp: String,
    pub ref_source: Option<String>,
    pub producer_model: Option<String>,
    pub gold_label: Option<Label>,
    pub gold_p: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Trial,
    UnlabeledTrain,
    Validation,
    Test,
}

impl SplitKind {
    pub fn requires_gold(self) -> bool {
        matches!(self, SplitKind::Trial | SplitKind::Validation)
    }

    pub fn forbids_gold(self) -> bool {
        matches!(self, SplitKind::UnlabeledTrain)
    }
}

impl FromStr for SplitKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trial" => Ok(SplitKind::Trial),
            "unlabeled_train" | "unlabeled-train" | "train" => Ok(SplitKind::UnlabeledTrain),
            "validation" | "val" => Ok(SplitKind::Validation),
            "test" => Ok(SplitKind::Test),
            other => Err(format!("unknown split kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub kind: SplitKind,
    pub points: Vec<DataPoint>,
}

impl Split {
    pub fn new(kind: SplitKind, points: Vec<DataPoint>) -> Self {
        Split { kind, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn by_id(&self) -> BTreeMap<&str, &DataPoint> {
        self.points.iter().map(|p| (p.id.as_str(), p)).collect()
    }

    /// Serializes back to the record layout accepted by [`parse_dataset`].
    pub fn to_json(&self) -> Result<String> {
        let records: Vec<Record<'_>> = self.points.iter().map(Record::from).collect();
        Ok(serde_json::to_string_pretty(&records)?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    /// One record per line instead of a single JSON array.
    pub jsonl: bool,
    /// Track applied to records that carry no `track` field. When unset the
    /// track is inferred from the presence of a producing model.
    pub track: Option<Track>,
}

#[derive(Serialize)]
pub(crate) struct Record<'a> {
    id: &'a str,
    task: Task,
    track: Track,
    src: &'a str,
    tgt: &'a str,
    hyp: &'a str,
    #[serde(rename = "ref", skip_serializing_if = "Option::is_none")]
    ref_source: Option<&'a str>,
    #[serde(rename = "model", skip_serializing_if = "Option::is_none")]
    producer_model: Option<&'a str>,
    #[serde(rename = "label", skip_serializing_if = "Option::is_none")]
    gold_label: Option<Label>,
    #[serde(rename = "p(Hallucination)", skip_serializing_if = "Option::is_none")]
    gold_p: Option<f64>,
}

impl<'a> From<&'a DataPoint> for Record<'a> {
    fn from(p: &'a DataPoint) -> Self {
        Record {
            id: &p.id,
            task: p.task,
            track: p.track,
            src: &p.src,
            tgt: &p.tgt,
            hyp: &p.hyp,
            ref_source: p.ref_source.as_deref(),
            producer_model: p.producer_model.as_deref(),
            gold_label: p.gold_label,
            gold_p: p.gold_p,
        }
    }
}

impl Serialize for DataPoint {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        Record::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DataPoint {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        let mut unknown = BTreeSet::new();
        record_to_point(0, &value, None, &mut unknown).map_err(serde::de::Error::custom)
    }
}

const KNOWN_FIELDS: &[&str] = &[
    "id",
    "task",
    "track",
    "src",
    "tgt",
    "hyp",
    "ref",
    "model",
    "label",
    "p(Hallucination)",
];

pub fn parse_dataset(path: impl AsRef<Path>, kind: SplitKind) -> Result<Split> {
    parse_dataset_with(path, kind, &ParseOptions::default())
}

pub fn parse_dataset_with(
    path: impl AsRef<Path>,
    kind: SplitKind,
    options: &ParseOptions,
) -> Result<Split> {
    let path = path.as_ref();
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_dataset_bytes(&bytes, kind, options).map_err(|e| match e {
        Error::Parse {
            offset, message, ..
        } => Error::Parse {
            path: path.to_path_buf(),
            offset,
            message,
        },
        other => other,
    })
}

/// Parses an in-memory split file. Parse errors carry an empty path.
pub fn parse_dataset_bytes(bytes: &[u8], kind: SplitKind, options: &ParseOptions) -> Result<Split> {
    let records: Vec<Value> = if options.jsonl {
        let mut records = Vec::new();
        let mut line_start = 0usize;
        for line in bytes.split(|&b| b == b'\n') {
            let start = line_start;
            line_start += line.len() + 1;
            if line.iter().all(|b| b.is_ascii_whitespace()) {
                continue;
            }
            let value: Value = serde_json::from_slice(line)
                .map_err(|e| parse_error(line, &e).shifted(start))?;
            records.push(value);
        }
        records
    } else {
        serde_json::from_slice(bytes).map_err(|e| parse_error(bytes, &e))?
    };

    let mut unknown = BTreeSet::new();
    let mut seen = HashSet::new();
    let mut points = Vec::with_capacity(records.len());
    for (index, record) in records.iter().enumerate() {
        let point = record_to_point(index, record, options.track, &mut unknown)?;
        if kind.requires_gold() && point.gold_label.is_none() {
            return Err(Error::validation(
                index,
                "label",
                format!("{kind:?} records must carry a gold label"),
            ));
        }
        if kind.forbids_gold() && (point.gold_label.is_some() || point.gold_p.is_some()) {
            return Err(Error::validation(
                index,
                "label",
                "unlabeled training records must not carry gold labels",
            ));
        }
        if !seen.insert(point.id.clone()) {
            return Err(Error::validation(
                index,
                "id",
                format!("duplicate id {:?}", point.id),
            ));
        }
        points.push(point);
    }
    for field in unknown {
        log::warn!("ignoring unknown record field `{field}`");
    }
    Ok(Split { kind, points })
}

struct Located {
    offset: usize,
    message: String,
}

impl Located {
    fn shifted(self, by: usize) -> Error {
        Error::Parse {
            path: Default::default(),
            offset: self.offset + by,
            message: self.message,
        }
    }
}

impl From<Located> for Error {
    fn from(l: Located) -> Self {
        l.shifted(0)
    }
}

fn parse_error(bytes: &[u8], err: &serde_json::Error) -> Located {
    Located {
        offset: byte_offset(bytes, err.line(), err.column()),
        message: err.to_string(),
    }
}

/// Converts serde_json's one-based line/column position into a byte offset.
fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for _ in 1..line {
        match bytes[offset..].iter().position(|&b| b == b'\n') {
            Some(p) => offset += p + 1,
            None => return bytes.len(),
        }
    }
    (offset + column.saturating_sub(1)).min(bytes.len())
}

fn record_to_point(
    index: usize,
    record: &Value,
    default_track: Option<Track>,
    unknown: &mut BTreeSet<String>,
) -> Result<DataPoint> {
    let obj = record
        .as_object()
        .ok_or_else(|| Error::validation(index, "<record>", "expected a JSON object"))?;
    for key in obj.keys() {
        if !KNOWN_FIELDS.contains(&key.as_str()) {
            unknown.insert(key.clone());
        }
    }

    let id = match obj.get("id") {
        None | Some(Value::Null) => index.to_string(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err(Error::validation(index, "id", "expected string or integer")),
    };
    let task = required_str(obj, index, "task")?
        .parse::<Task>()
        .map_err(|m| Error::validation(index, "task", m))?;
    let src = required_str(obj, index, "src")?.to_string();
    let tgt = required_str(obj, index, "tgt")?.to_string();
    let hyp = required_str(obj, index, "hyp")?.to_string();
    if hyp.is_empty() {
        return Err(Error::validation(index, "hyp", "must be non-empty"));
    }
    let ref_source = optional_str(obj, index, "ref")?;
    let producer_model = optional_str(obj, index, "model")?;

    let track = match optional_str(obj, index, "track")? {
        Some(t) => t
            .parse::<Track>()
            .map_err(|m| Error::validation(index, "track", m))?,
        None => default_track.unwrap_or(if producer_model.is_some() {
            Track::Aware
        } else {
            Track::Agnostic
        }),
    };
    if track == Track::Aware && producer_model.is_none() {
        return Err(Error::validation(
            index,
            "model",
            "model-aware records must name the producing model",
        ));
    }

    let gold_label = optional_str(obj, index, "label")?
        .map(|s| s.parse::<Label>())
        .transpose()
        .map_err(|m| Error::validation(index, "label", m))?;
    let gold_p = match obj.get("p(Hallucination)") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let p = v.as_f64().ok_or_else(|| {
                Error::validation(index, "p(Hallucination)", "expected a number")
            })?;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(
                    index,
                    "p(Hallucination)",
                    format!("{p} is outside [0, 1]"),
                ));
            }
            Some(p)
        }
    };
    if let Some(p) = gold_p {
        match gold_label {
            None => {
                return Err(Error::validation(
                    index,
                    "label",
                    "p(Hallucination) given without a gold label",
                ))
            }
            Some(label) if label != Label::from_gold_p(p) => {
                return Err(Error::validation(
                    index,
                    "label",
                    format!("{label} disagrees with the majority implied by p(Hallucination)={p}"),
                ))
            }
            Some(_) => {}
        }
    }

    Ok(DataPoint {
        id,
        task,
        track,
        src,
        tgt,
        hyp,
        ref_source,
        producer_model,
        gold_label,
        gold_p,
    })
}

fn required_str<'a>(obj: &'a Map<String, Value>, index: usize, field: &str) -> Result<&'a str> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(Error::validation(index, field, "expected a string")),
        None => Err(Error::validation(index, field, "missing")),
    }
}

/// Absent, null and empty strings all map to `None`.
fn optional_str(obj: &Map<String, Value>, index: usize, field: &str) -> Result<Option<String>> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) if s.is_empty() => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(Error::validation(index, field, "expected a string")),
    }
}

/// Partitions a split by task, preserving the original order inside each task.
pub fn split_by_task(split: &Split) -> BTreeMap<Task, Vec<DataPoint>> {
    let mut out: BTreeMap<Task, Vec<DataPoint>> =
        Task::ALL.iter().map(|&t| (t, Vec::new())).collect();
    for p in &split.points {
        out.get_mut(&p.task).expect("all tasks present").push(p.clone());
    }
    out
}
