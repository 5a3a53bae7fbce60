//! Evaluation metrics and the line-delimited metrics log.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::RoutingTrace;

/// Recall at the threshold that maximises recall subject to
/// `precision ≥ p / 100`. Thresholds sweep the sorted unique scores
/// (predict positive when `score ≥ threshold`). Returns `(recall, feasible)`;
/// recall is 0 when no threshold reaches the precision.
pub fn recall_at_precision(scores: &[f64], labels: &[f64], p: f64) -> Result<(f64, bool)> {
    if scores.len() != labels.len() {
        return Err(Error::Contract("scores and labels differ in length".into()));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::Contract(format!("precision level {p} outside (0, 100]")));
    }
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::UndefinedMetric("recall at precision needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let target = p / 100.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best: Option<f64> = None;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        if precision >= target {
            let r = tp as f64 / pos as f64;
            best = Some(best.map_or(r, |b: f64| b.max(r)));
        }
    }
    Ok(best.map_or((0.0, false), |r| (r, true)))
}

/// Root mean squared error.
pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::UndefinedMetric("rmse needs equal, nonempty inputs".into()));
    }
    let s: f64 = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsRecord {
    pub step: usize,
    pub split: String,
    pub task_loss: BTreeMap<String, f64>,
    pub task_auc: BTreeMap<String, f64>,
    pub task_rmse: BTreeMap<String, f64>,
    pub recall_at_precision_85: BTreeMap<String, f64>,
    pub recall_at_precision_50: BTreeMap<String, f64>,
    pub masked_accuracy: BTreeMap<String, f64>,
    /// Tasks skipped for lack of indicated samples or of a second class.
    pub skipped_tasks: Vec<String>,
    /// Fraction of tokens per expert, per routed layer.
    pub expert_utilization: BTreeMap<String, Vec<f64>>,
    pub lambda: Vec<f64>,
    /// Seconds since the run started. Excluded from reproducibility checks.
    pub wall_clock: f64,
}

impl MetricsRecord {
    pub fn new(step: usize, split: &str) -> Self {
        MetricsRecord {
            step,
            split: split.to_string(),
            ..Default::default()
        }
    }

    pub fn set_utilization(&mut self, trace: &RoutingTrace) {
        for l in &trace.layers {
            self.expert_utilization.insert(l.layer.clone(), l.utilization());
        }
    }
}

/// Appends records to a JSONL file, one per line.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<fs::File>,
    last_step: Option<usize>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<MetricsWriter> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
            last_step: None,
        })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        if let Some(last) = self.last_step {
            if rec.step < last {
                return Err(Error::Contract(format!(
                    "metrics step {} after step {last}",
                    rec.step
                )));
            }
        }
        self.last_step = Some(rec.step);
        let line = serde_json::to_string(rec).expect("metrics serialise");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(scores: &[f64], labels: &[f64], p: f64) -> f64 {
        let pos = labels.iter().filter(|&&y| y == 1.0).count() as f64;
        let mut best = 0.0f64;
        for &t in scores {
            let (mut tp, mut fp) = (0.0, 0.0);
            for (s, y) in scores.iter().zip(labels) {
                if *s >= t {
                    if *y == 1.0 {
                        tp += 1.0
                    } else {
                        fp += 1.0
                    }
                }
            }
            if tp / (tp + fp) >= p / 100.0 {
                best = best.max(tp / pos);
            }
        }
        best
    }

    #[test]
    fn perfect_classifier_has_full_recall() {
        let s = [0.9, 0.8, 0.1, 0.2];
        let y = [1.0, 1.0, 0.0, 0.0];
        assert_eq!(recall_at_precision(&s, &y, 85.0).unwrap(), (1.0, true));
        assert_eq!(recall_at_precision(&s, &y, 100.0).unwrap(), (1.0, true));
    }

    #[test]
    fn infeasible_precision_gives_zero() {
        let s = [0.9, 0.1];
        let y = [0.0, 1.0];
        assert_eq!(recall_at_precision(&s, &y, 85.0).unwrap(), (0.0, false));
    }

    #[test]
    fn six_point_example_matches_exhaustive_sweep() {
        let s = [0.9, 0.8, 0.7, 0.6, 0.4, 0.3];
        let y = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        // threshold 0.6: tp 3, fp 1 -> precision 0.75, recall 0.75
        // threshold 0.3: tp 4, fp 2 -> precision 0.667, recall 1.0
        assert_eq!(recall_at_precision(&s, &y, 50.0).unwrap().0, 1.0);
        assert_eq!(recall_at_precision(&s, &y, 75.0).unwrap().0, 0.75);
        assert_eq!(recall_at_precision(&s, &y, 85.0).unwrap().0, 0.25);
        for p in [10.0, 50.0, 66.0, 70.0, 85.0, 99.0] {
            assert_eq!(recall_at_precision(&s, &y, p).unwrap().0, brute(&s, &y, p), "P={p}");
        }
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            recall_at_precision(&[0.1, 0.2], &[1.0, 1.0], 50.0),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn writer_rejects_decreasing_steps_and_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&p).unwrap();
        let mut r = MetricsRecord::new(0, "train");
        r.task_auc.insert("a".into(), 0.75);
        w.write(&r).unwrap();
        w.write(&MetricsRecord::new(3, "val")).unwrap();
        assert!(w.write(&MetricsRecord::new(1, "val")).is_err());
        let back = read_metrics(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], r);
    }
}
