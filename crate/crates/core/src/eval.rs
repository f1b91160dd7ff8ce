//! Accuracy against majority gold labels and Spearman's rho against gold
//! annotator fractions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::client::Prediction;
use crate::data::{Label, Split, Task, Track};
use crate::error::{Error, Result};

/// Probability assigned to undecided predictions when ranking.
pub const UNDECIDED_P: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` when the gold split mixes tracks.
    pub track: Option<Track>,
    pub n: usize,
    pub accuracy: f64,
    /// `None` when gold probabilities are missing or a vector is constant.
    pub rho: Option<f64>,
    pub per_task: BTreeMap<Task, TaskMetrics>,
}

/// Fraction of predictions equal to the gold label; `None` counts as wrong.
pub fn accuracy(preds: &[(String, Option<Label>)], gold: &Split) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty prediction set".into()));
    }
    let index = gold.by_id();
    let mut correct = 0usize;
    for (id, label) in preds {
        let point = index.get(id.as_str()).ok_or_else(|| Error::UnknownPoint(id.clone()))?;
        let truth = point.gold_label.ok_or_else(|| Error::MissingGold(id.clone()))?;
        if *label == Some(truth) {
            correct += 1;
        }
    }
    Ok(correct as f64 / preds.len() as f64)
}

/// One-based ranks; tied values share the mean of the positions they occupy.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("correlation with a constant vector".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn spearman_rho(pred_p: &[f64], gold_p: &[f64]) -> Result<f64> {
    if pred_p.len() != gold_p.len() {
        return Err(Error::UndefinedMetric(format!(
            "length mismatch: {} predictions vs {} gold values",
            pred_p.len(),
            gold_p.len()
        )));
    }
    if pred_p.len() < 2 {
        return Err(Error::UndefinedMetric("rho needs at least two pairs".into()));
    }
    pearson(&average_ranks(pred_p), &average_ranks(gold_p))
}

#[derive(Default)]
struct Bucket {
    labels: Vec<(String, Option<Label>)>,
    pred_p: Vec<f64>,
    gold_p: Vec<Option<f64>>,
}

impl Bucket {
    fn metrics(&self, gold: &Split) -> Result<TaskMetrics> {
        let accuracy = accuracy(&self.labels, gold)?;
        let rho = match self.gold_p.iter().copied().collect::<Option<Vec<f64>>>() {
            Some(g) if g.len() >= 2 => spearman_rho(&self.pred_p, &g).ok(),
            _ => None,
        };
        Ok(TaskMetrics {
            n: self.labels.len(),
            accuracy,
            rho,
        })
    }
}

/// Overall and per-task metrics for predictions over `gold`.
pub fn report(preds: &[Prediction], gold: &Split) -> Result<EvalReport> {
    let index = gold.by_id();
    let mut overall = Bucket::default();
    let mut per_task: BTreeMap<Task, Bucket> = BTreeMap::new();
    for pred in preds {
        let point = index
            .get(pred.point_id.as_str())
            .ok_or_else(|| Error::UnknownPoint(pred.point_id.clone()))?;
        let p = pred.p_halluc.filter(|_| pred.label.is_some()).unwrap_or(UNDECIDED_P);
        for bucket in [&mut overall, per_task.entry(point.task).or_default()] {
            bucket.labels.push((pred.point_id.clone(), pred.label));
            bucket.pred_p.push(p);
            bucket.gold_p.push(point.gold_p);
        }
    }
    let total = overall.metrics(gold)?;
    let mut tracks = gold.points.iter().map(|p| p.track);
    let first = tracks.next();
    let track = if tracks.all(|t| Some(t) == first) { first } else { None };
    Ok(EvalReport {
        track,
        n: total.n,
        accuracy: total.accuracy,
        rho: total.rho,
        per_task: per_task
            .iter()
            .map(|(&task, bucket)| Ok((task, bucket.metrics(gold)?)))
            .collect::<Result<_>>()?,
    })
}

fn fmt_rho(rho: Option<f64>) -> String {
    rho.map(|r| format!("{r:.3}")).unwrap_or_else(|| "-".into())
}

impl EvalReport {
    /// Aligned plain-text table, one row per task plus the pooled row.
    pub fn to_table(&self) -> String {
        let mut rows = vec![[
            "scope".to_string(),
            "n".to_string(),
            "acc".to_string(),
            "rho".to_string(),
        ]];
        for (task, m) in &self.per_task {
            rows.push([
                task.to_string(),
                m.n.to_string(),
                format!("{:.3}", m.accuracy),
                fmt_rho(m.rho),
            ]);
        }
        let scope = self
            .track
            .map(|t| format!("all ({t})"))
            .unwrap_or_else(|| "all".into());
        rows.push([scope, self.n.to_string(), format!("{:.3}", self.accuracy), fmt_rho(self.rho)]);
        render_table(&rows)
    }
}

/// Left-aligns the first column and right-aligns the rest.
pub fn render_table<const N: usize>(rows: &[[String; N]]) -> String {
    let mut widths = [0usize; N];
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    for (r, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                out.push_str("  ");
            }
            if c == 0 {
                let _ = write!(out, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(out, "{cell:>w$}", w = widths[c]);
            }
        }
        out.push('\n');
        if r == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (N - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DataPoint, SplitKind};

    fn gold(labels: &[(Task, Label, f64)]) -> Split {
        let points = labels
            .iter()
            .enumerate()
            .map(|(i, &(task, label, p))| DataPoint {
                id: i.to_string(),
                task,
                track: Track::Agnostic,
                src: String::new(),
                tgt: String::new(),
                hyp: "h".into(),
                ref_source: None,
                producer_model: None,
                gold_label: Some(label),
                gold_p: Some(p),
            })
            .collect();
        Split::new(SplitKind::Validation, points)
    }

    fn pred(id: usize, label: Option<Label>, p: f64) -> Prediction {
        Prediction {
            point_id: id.to_string(),
            model_id: "m".into(),
            params_id: "p".into(),
            label,
            p_halluc: label.map(|_| p),
            raw_completion: String::new(),
            error: None,
        }
    }

    #[test]
    fn accuracy_basics() {
        let g = gold(&[
            (Task::DM, Label::Hallucination, 0.8),
            (Task::DM, Label::NotHallucination, 0.2),
        ]);
        let perfect = vec![
            ("0".to_string(), Some(Label::Hallucination)),
            ("1".to_string(), Some(Label::NotHallucination)),
        ];
        assert_eq!(accuracy(&perfect, &g).unwrap(), 1.0);
        let undecided = vec![("0".to_string(), None), ("1".to_string(), Some(Label::NotHallucination))];
        assert_eq!(accuracy(&undecided, &g).unwrap(), 0.5);
        assert!(matches!(accuracy(&[], &g), Err(Error::UndefinedMetric(_))));
        assert!(matches!(
            accuracy(&[("9".to_string(), None)], &g),
            Err(Error::UnknownPoint(_))
        ));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn rho_extremes_and_errors() {
        let x = [0.1, 0.4, 0.2, 0.9];
        assert!((spearman_rho(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let rev: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((spearman_rho(&x, &rev).unwrap() + 1.0).abs() < 1e-15);
        assert!(spearman_rho(&x, &x[..3]).is_err());
        assert!(spearman_rho(&[0.3, 0.3, 0.3], &[0.1, 0.2, 0.3]).is_err());
        assert!(spearman_rho(&[0.3], &[0.1]).is_err());
    }

    #[test]
    fn report_pools_tasks() {
        let g = gold(&[
            (Task::DM, Label::Hallucination, 0.8),
            (Task::DM, Label::NotHallucination, 0.2),
            (Task::MT, Label::Hallucination, 1.0),
            (Task::PG, Label::NotHallucination, 0.0),
            (Task::PG, Label::NotHallucination, 0.4),
        ]);
        let preds = vec![
            pred(0, Some(Label::Hallucination), 0.9),
            pred(1, Some(Label::Hallucination), 0.6),
            pred(2, None, 0.0),
            pred(3, Some(Label::NotHallucination), 0.1),
            pred(4, Some(Label::NotHallucination), 0.3),
        ];
        let r = report(&preds, &g).unwrap();
        assert_eq!(r.n, 5);
        assert_eq!(r.n, r.per_task.values().map(|m| m.n).sum::<usize>());
        assert!((r.accuracy - 3.0 / 5.0).abs() < 1e-15);
        assert_eq!(r.per_task[&Task::MT].accuracy, 0.0);
        assert_eq!(r.per_task[&Task::MT].rho, None);
        assert_eq!(r.track, Some(Track::Agnostic));
        let table = r.to_table();
        assert!(table.lines().count() == 6, "{table}");
        assert!(table.contains("all (agnostic)"));
    }

    #[test]
    fn single_task_report_equals_task_metrics() {
        let g = gold(&[
            (Task::PG, Label::Hallucination, 0.8),
            (Task::PG, Label::NotHallucination, 0.2),
            (Task::PG, Label::NotHallucination, 0.4),
        ]);
        let preds = vec![
            pred(0, Some(Label::Hallucination), 0.7),
            pred(1, Some(Label::Hallucination), 0.6),
            pred(2, Some(Label::NotHallucination), 0.1),
        ];
        let r = report(&preds, &g).unwrap();
        let pg = &r.per_task[&Task::PG];
        assert_eq!((r.n, r.accuracy, r.rho), (pg.n, pg.accuracy, pg.rho));
    }
}
