//! Weighted probability voting across models with a per-task grid search
//! over the weight simplex.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::Prediction;
use crate::data::{DataPoint, Label, Split, Task};
use crate::error::{Error, Result};
use crate::eval::UNDECIDED_P;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteWeights {
    pub task: Task,
    pub weights: BTreeMap<String, f64>,
}

impl VoteWeights {
    pub fn one_hot(task: Task, models: &[String], winner: &str) -> Self {
        VoteWeights {
            task,
            weights: models
                .iter()
                .map(|m| (m.clone(), if m == winner { 1.0 } else { 0.0 }))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.values().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config(format!("{} weights must be nonnegative", self.task)));
        }
        let sum: f64 = self.weights.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("{} weights sum to {sum}, not 1", self.task)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSearchConfig {
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

impl Default for WeightSearchConfig {
    fn default() -> Self {
        WeightSearchConfig {
            step: default_step(),
            threshold: default_threshold(),
        }
    }
}

impl WeightSearchConfig {
    /// Number of grid units that make up a total weight of one.
    pub fn units(&self) -> Result<usize> {
        if !(self.step > 0.0 && self.step <= 1.0) {
            return Err(Error::Config(format!("grid step {} outside (0, 1]", self.step)));
        }
        let inv = 1.0 / self.step;
        let units = inv.round();
        if (inv - units).abs() > 1e-9 {
            return Err(Error::Config(format!("1/step = {inv} is not an integer")));
        }
        Ok(units as usize)
    }
}

pub fn fuse(p: &BTreeMap<String, f64>, w: &VoteWeights) -> Result<f64> {
    if p.len() != w.weights.len() || !p.keys().all(|k| w.weights.contains_key(k)) {
        let have: Vec<&String> = p.keys().collect();
        let want: Vec<&String> = w.weights.keys().collect();
        return Err(Error::KeyMismatch(format!("probabilities for {have:?}, weights for {want:?}")));
    }
    let fused: f64 = w.weights.iter().map(|(m, wm)| wm * p[m]).sum();
    Ok(fused.clamp(0.0, 1.0))
}

/// All vectors of nonnegative integers of length `parts` summing to `units`,
/// in ascending lexicographic order.
pub fn simplex_grid(parts: usize, units: usize) -> Vec<Vec<usize>> {
    fn rec(parts: usize, remaining: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=remaining {
            prefix.push(k);
            rec(parts - 1, remaining - k, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if parts > 0 {
        rec(parts, units, &mut Vec::with_capacity(parts), &mut out);
    }
    out
}

/// Per-point hallucination probability of one model; undecided points get
/// [`UNDECIDED_P`].
pub fn probabilities_by_point(preds: &[Prediction]) -> BTreeMap<String, f64> {
    preds
        .iter()
        .map(|p| {
            let prob = p.p_halluc.filter(|_| p.label.is_some()).unwrap_or(UNDECIDED_P);
            (p.point_id.clone(), prob)
        })
        .collect()
}

/// Exhaustive simplex search for the weights maximising thresholded accuracy
/// on the `task` points of `gold`. Among equally accurate vectors the one
/// with the fewest nonzero weights wins, then the lexicographically smallest
/// in `models` order.
pub fn search_weights(
    task: Task,
    models: &[String],
    preds: &BTreeMap<String, BTreeMap<String, f64>>,
    gold: &Split,
    cfg: &WeightSearchConfig,
) -> Result<VoteWeights> {
    if models.is_empty() {
        return Err(Error::Config("weight search needs at least one model".into()));
    }
    let units = cfg.units()?;
    let points: Vec<&DataPoint> = gold.points.iter().filter(|p| p.task == task).collect();

    // fixed summation order: alphabetical, matching `fuse`
    let mut alphabetical: Vec<&String> = models.iter().collect();
    alphabetical.sort();
    let slot: Vec<usize> = models
        .iter()
        .map(|m| alphabetical.iter().position(|a| *a == m).unwrap())
        .collect();

    let mut table = Vec::with_capacity(points.len());
    for point in &points {
        let truth = point.gold_label.ok_or_else(|| Error::MissingGold(point.id.clone()))?;
        let mut row = Vec::with_capacity(models.len());
        for m in &alphabetical {
            let p = preds
                .get(*m)
                .and_then(|per_point| per_point.get(&point.id))
                .ok_or_else(|| Error::CoverageGap {
                    model: (*m).clone(),
                    point: point.id.clone(),
                })?;
            row.push(*p);
        }
        table.push((row, truth));
    }

    let grid = simplex_grid(models.len(), units);
    let score = |combo: &Vec<usize>| -> usize {
        let mut w = vec![0.0; models.len()];
        for (i, &k) in combo.iter().enumerate() {
            w[slot[i]] = k as f64 / units as f64;
        }
        table
            .iter()
            .filter(|(row, truth)| {
                let fused: f64 = w.iter().zip(row).map(|(wm, pm)| wm * pm).sum();
                let fused = fused.clamp(0.0, 1.0);
                let label = if fused > cfg.threshold {
                    Label::Hallucination
                } else {
                    Label::NotHallucination
                };
                label == *truth
            })
            .count()
    };
    // (index, correct, nonzero weights); better = more correct, then sparser,
    // then earlier in the grid
    let better = |a: (usize, usize, usize), b: (usize, usize, usize)| {
        b.1 > a.1 || (b.1 == a.1 && (b.2 < a.2 || (b.2 == a.2 && b.0 < a.0)))
    };
    let (best, _, _) = grid
        .par_iter()
        .enumerate()
        .map(|(i, combo)| (i, score(combo), combo.iter().filter(|&&k| k > 0).count()))
        .reduce(
            || (usize::MAX, 0, usize::MAX),
            |a, b| match (a.0 == usize::MAX, b.0 == usize::MAX) {
                (true, _) => b,
                (_, true) => a,
                _ => {
                    if better(a, b) {
                        b
                    } else {
                        a
                    }
                }
            },
        );
    let combo = &grid[best];
    Ok(VoteWeights {
        task,
        weights: models
            .iter()
            .zip(combo)
            .map(|(m, &k)| (m.clone(), k as f64 / units as f64))
            .collect(),
    })
}

/// Thresholded accuracy of fused probabilities on the `task` points of `gold`.
pub fn fused_accuracy(
    weights: &VoteWeights,
    preds: &BTreeMap<String, BTreeMap<String, f64>>,
    gold: &Split,
    threshold: f64,
) -> Result<f64> {
    let points: Vec<&DataPoint> = gold.points.iter().filter(|p| p.task == weights.task).collect();
    if points.is_empty() {
        return Err(Error::UndefinedMetric(format!("no {} points", weights.task)));
    }
    let mut correct = 0;
    for point in &points {
        let p = per_point_probs(preds, &point.id, weights.weights.keys())?;
        let fused = fuse(&p, weights)?;
        let label = if fused > threshold { Label::Hallucination } else { Label::NotHallucination };
        if Some(label) == point.gold_label {
            correct += 1;
        }
    }
    Ok(correct as f64 / points.len() as f64)
}

fn per_point_probs<'a>(
    preds: &BTreeMap<String, BTreeMap<String, f64>>,
    point_id: &str,
    models: impl Iterator<Item = &'a String>,
) -> Result<BTreeMap<String, f64>> {
    models
        .map(|m| {
            let p = preds
                .get(m)
                .and_then(|pp| pp.get(point_id))
                .ok_or_else(|| Error::CoverageGap {
                    model: m.clone(),
                    point: point_id.to_string(),
                })?;
            Ok((m.clone(), *p))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotedPoint {
    pub point_id: String,
    pub label: Label,
    pub fused_p: f64,
}

/// Fuses every point with its task's weights; Hallucination iff the fused
/// probability is strictly above `threshold`.
pub fn apply_voting(
    per_task: &BTreeMap<Task, VoteWeights>,
    points: &[DataPoint],
    preds: &BTreeMap<String, BTreeMap<String, f64>>,
    threshold: f64,
) -> Result<Vec<VotedPoint>> {
    points
        .iter()
        .map(|point| {
            let weights = per_task.get(&point.task).ok_or(Error::MissingWeights(point.task))?;
            let p = per_point_probs(preds, &point.id, weights.weights.keys())?;
            let fused_p = fuse(&p, weights)?;
            let label = if fused_p > threshold { Label::Hallucination } else { Label::NotHallucination };
            Ok(VotedPoint {
                point_id: point.id.clone(),
                label,
                fused_p,
            })
        })
        .collect()
}

/// Voted points as predictions attributed to a pseudo-model.
pub fn voted_predictions(voted: &[VotedPoint], model_id: &str) -> Vec<Prediction> {
    voted
        .iter()
        .map(|v| Prediction {
            point_id: v.point_id.clone(),
            model_id: model_id.to_string(),
            params_id: "vote".into(),
            label: Some(v.label),
            p_halluc: Some(v.fused_p),
            raw_completion: String::new(),
            error: None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SplitKind, Track};

    fn weights(task: Task, pairs: &[(&str, f64)]) -> VoteWeights {
        VoteWeights {
            task,
            weights: pairs.iter().map(|(m, w)| (m.to_string(), *w)).collect(),
        }
    }

    fn probs(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(m, p)| (m.to_string(), *p)).collect()
    }

    fn point(id: &str, task: Task, label: Label) -> DataPoint {
        DataPoint {
            id: id.into(),
            task,
            track: Track::Agnostic,
            src: String::new(),
            tgt: String::new(),
            hyp: "h".into(),
            ref_source: None,
            producer_model: None,
            gold_label: Some(label),
            gold_p: None,
        }
    }

    #[test]
    fn fuse_arithmetic() {
        let w = weights(Task::DM, &[("m1", 0.5), ("m2", 0.5)]);
        let fused = fuse(&probs(&[("m1", 0.6), ("m2", 0.2)]), &w).unwrap();
        assert!((fused - 0.4).abs() < 1e-15);
        let hot = weights(Task::DM, &[("m1", 1.0), ("m2", 0.0)]);
        assert_eq!(fuse(&probs(&[("m1", 0.37), ("m2", 0.9)]), &hot).unwrap(), 0.37);
        assert!(matches!(
            fuse(&probs(&[("m1", 0.3)]), &w),
            Err(Error::KeyMismatch(_))
        ));
    }

    #[test]
    fn grid_enumeration() {
        let g = simplex_grid(3, 2);
        assert_eq!(
            g,
            vec![
                vec![0, 0, 2],
                vec![0, 1, 1],
                vec![0, 2, 0],
                vec![1, 0, 1],
                vec![1, 1, 0],
                vec![2, 0, 0]
            ]
        );
        // C(20 + 4, 4) vectors for five models at step 0.05
        assert_eq!(simplex_grid(5, 20).len(), 10626);
        assert_eq!(simplex_grid(1, 20), vec![vec![20]]);
    }

    #[test]
    fn step_must_divide_one() {
        assert_eq!(WeightSearchConfig::default().units().unwrap(), 20);
        let bad = WeightSearchConfig { step: 0.3, threshold: 0.5 };
        assert!(bad.units().is_err());
    }

    #[test]
    fn singleton_and_constructed_optimum() {
        let gold = Split::new(
            SplitKind::Validation,
            vec![
                point("a", Task::PG, Label::Hallucination),
                point("b", Task::PG, Label::NotHallucination),
                point("c", Task::PG, Label::Hallucination),
            ],
        );
        let right: BTreeMap<String, f64> =
            [("a", 0.9), ("b", 0.1), ("c", 0.8)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let wrong: BTreeMap<String, f64> =
            [("a", 0.1), ("b", 0.9), ("c", 0.2)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let cfg = WeightSearchConfig::default();

        let only: BTreeMap<_, _> = [("solo".to_string(), right.clone())].into();
        let w = search_weights(Task::PG, &["solo".into()], &only, &gold, &cfg).unwrap();
        assert_eq!(w.weights["solo"], 1.0);

        // every vector with more than half the weight on "good" is perfect;
        // the one-hot corner wins in either model order
        let both: BTreeMap<_, _> = [("good".to_string(), right), ("bad".to_string(), wrong)].into();
        for order in [["bad", "good"], ["good", "bad"]] {
            let models: Vec<String> = order.iter().map(|s| s.to_string()).collect();
            let w = search_weights(Task::PG, &models, &both, &gold, &cfg).unwrap();
            assert_eq!(w.weights["good"], 1.0);
            assert_eq!(w.weights["bad"], 0.0);
        }
    }

    #[test]
    fn equal_sparsity_ties_take_the_lexicographically_smallest() {
        let gold = Split::new(SplitKind::Validation, vec![point("a", Task::DM, Label::Hallucination)]);
        let preds: BTreeMap<_, _> = [
            ("x".to_string(), [("a".to_string(), 0.9)].into()),
            ("y".to_string(), [("a".to_string(), 0.9)].into()),
        ]
        .into();
        let models = vec!["x".to_string(), "y".to_string()];
        let w = search_weights(Task::DM, &models, &preds, &gold, &WeightSearchConfig::default()).unwrap();
        assert_eq!((w.weights["x"], w.weights["y"]), (0.0, 1.0));
    }

    #[test]
    fn coverage_gap_is_reported() {
        let gold = Split::new(SplitKind::Validation, vec![point("a", Task::DM, Label::Hallucination)]);
        let preds: BTreeMap<_, _> = [("m".to_string(), BTreeMap::new())].into();
        match search_weights(Task::DM, &["m".into()], &preds, &gold, &WeightSearchConfig::default()) {
            Err(Error::CoverageGap { model, point }) => assert_eq!((model.as_str(), point.as_str()), ("m", "a")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn threshold_is_strict() {
        let points = vec![point("a", Task::DM, Label::Hallucination)];
        let preds: BTreeMap<_, _> = [("m".to_string(), [("a".to_string(), 0.5)].into())].into();
        let per_task: BTreeMap<_, _> = [(Task::DM, weights(Task::DM, &[("m", 1.0)]))].into();
        let voted = apply_voting(&per_task, &points, &preds, 0.5).unwrap();
        assert_eq!(voted[0].label, Label::NotHallucination);
        let missing = vec![point("b", Task::MT, Label::Hallucination)];
        assert!(matches!(
            apply_voting(&per_task, &missing, &preds, 0.5),
            Err(Error::MissingWeights(Task::MT))
        ));
    }
}
