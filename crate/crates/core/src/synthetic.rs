//! Planted-label splits for exercising the pipeline against the oracle mock.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DataPoint, Label, Split, SplitKind, Task, Track};
use crate::mock::planted_marker;

/// Annotators per synthetic point; gold probabilities are multiples of 1/5.
pub const ANNOTATORS: u32 = 5;

fn kind_tag(kind: SplitKind) -> &'static str {
    match kind {
        SplitKind::Trial => "trial",
        SplitKind::UnlabeledTrain => "train",
        SplitKind::Validation => "val",
        SplitKind::Test => "test",
    }
}

/// `n` points cycling through DM, MT and PG with fair-coin labels. Each
/// hypothesis ends with the marker of its true label. Labeled kinds carry a
/// gold label and an annotator fraction consistent with it; the unlabeled
/// kind carries neither.
pub fn planted_split(kind: SplitKind, n: usize, seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = kind_tag(kind);
    let points = (0..n)
        .map(|i| {
            let task = Task::ALL[i % 3];
            let label = if rng.random_bool(0.5) {
                Label::Hallucination
            } else {
                Label::NotHallucination
            };
            let votes = match label {
                Label::Hallucination => rng.random_range(3..=ANNOTATORS),
                Label::NotHallucination => rng.random_range(0..=2),
            };
            let labeled = kind != SplitKind::UnlabeledTrain;
            DataPoint {
                id: format!("{tag}-{i}"),
                task,
                track: Track::Agnostic,
                src: format!("{task} source sentence {i}"),
                tgt: format!("{task} reference output {i}"),
                hyp: format!("{task} generated output {i} {}", planted_marker(label)),
                ref_source: Some(if task == Task::DM { "tgt" } else { "either" }.into()),
                producer_model: None,
                gold_label: labeled.then_some(label),
                gold_p: labeled.then(|| votes as f64 / ANNOTATORS as f64),
            }
        })
        .collect();
    Split::new(kind, points)
}
