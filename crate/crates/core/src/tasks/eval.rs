//! Accuracy, macro-F1 and confidence intervals over tasks.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accuracy and macro-F1 of `predictions` against `truth` over classes
/// `0..classes`. Classes absent from both contribute an F1 of zero.
pub fn evaluate(predictions: &[usize], truth: &[usize], classes: usize) -> Result<(f64, f64)> {
    if predictions.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: truth.len(),
        });
    }
    if truth.is_empty() || classes == 0 {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    if let Some(&bad) = predictions.iter().chain(truth).find(|&&c| c >= classes) {
        return Err(Error::Config(format!("class {bad} out of range for {classes} classes")));
    }
    let mut tp = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut actual = vec![0usize; classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        predicted[p] += 1;
        actual[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let f1_sum: f64 = (0..classes)
        .map(|c| {
            let denom = predicted[c] + actual[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok((correct as f64 / truth.len() as f64, f1_sum / classes as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Mean with a 95% normal-approximation half-width, `1.96 * stderr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub half_width: f64,
}

impl Interval {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                half_width: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let half_width = if n < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        };
        Self { mean, half_width }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub scores: Vec<TaskScore>,
    /// True when some task had its query set capped.
    pub query_capped: bool,
}

impl EvalReport {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            scores: Vec::new(),
            query_capped: false,
        }
    }

    pub fn accuracy(&self) -> Interval {
        Interval::of(&self.scores.iter().map(|s| s.accuracy).collect::<Vec<_>>())
    }

    pub fn macro_f1(&self) -> Interval {
        Interval::of(&self.scores.iter().map(|s| s.macro_f1).collect::<Vec<_>>())
    }

    /// Aligned text table: one row per task, then the summary.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.name);
        let _ = writeln!(out, "{:>6}  {:>9}  {:>9}", "task", "accuracy", "macro-f1");
        for s in &self.scores {
            let _ = writeln!(out, "{:>6}  {:>9.4}  {:>9.4}", s.task, s.accuracy, s.macro_f1);
        }
        let (a, f) = (self.accuracy(), self.macro_f1());
        let _ = writeln!(
            out,
            "{:>6}  {:>9}  {:>9}",
            "mean",
            format!("{:.4}", a.mean),
            format!("{:.4}", f.mean)
        );
        let _ = writeln!(
            out,
            "{:>6}  {:>9}  {:>9}",
            "±95%",
            format!("{:.4}", a.half_width),
            format!("{:.4}", f.half_width)
        );
        if self.query_capped {
            let _ = writeln!(out, "note: query sets capped per class");
        }
        out
    }

    /// One JSON object per task followed by a summary record.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for s in &self.scores {
            let rec = serde_json::json!({
                "report": self.name,
                "task": s.task,
                "accuracy": s.accuracy,
                "macro_f1": s.macro_f1,
            });
            let _ = writeln!(out, "{rec}");
        }
        let (a, f) = (self.accuracy(), self.macro_f1());
        let rec = serde_json::json!({
            "report": self.name,
            "summary": true,
            "tasks": self.scores.len(),
            "accuracy_mean": a.mean,
            "accuracy_half_width": a.half_width,
            "macro_f1_mean": f.mean,
            "macro_f1_half_width": f.half_width,
            "query_capped": self.query_capped,
        });
        let _ = writeln!(out, "{rec}");
        out
    }
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}
