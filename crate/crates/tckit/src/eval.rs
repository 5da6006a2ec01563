//! Accuracy reporting shared by the fine-tuned and similarity
//! classifiers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    /// Gold occurrences of this label.
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n_test: usize,
    pub labels: Vec<String>,
    pub per_label: Vec<LabelMetrics>,
    /// `confusion[g][p]` counts gold label `g` predicted as `p`.
    pub confusion: Vec<Vec<usize>>,
}

/// Exact counting over aligned prediction/gold lists. Label order is
/// first occurrence, gold scanned before predictions.
pub fn accuracy(pred: &[String], gold: &[String]) -> Result<EvalReport> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: gold.len() });
    }
    if pred.is_empty() {
        return Err(Error::config("cannot evaluate an empty prediction list"));
    }
    let mut labels: Vec<String> = Vec::new();
    let index_of = |l: &str, labels: &mut Vec<String>| -> usize {
        match labels.iter().position(|x| x == l) {
            Some(i) => i,
            None => {
                labels.push(l.to_string());
                labels.len() - 1
            }
        }
    };
    for l in gold.iter().chain(pred.iter()) {
        index_of(l, &mut labels);
    }
    let n = labels.len();
    let mut confusion = vec![vec![0usize; n]; n];
    let mut correct = 0usize;
    for (p, g) in pred.iter().zip(gold) {
        let pi = labels.iter().position(|x| x == p).unwrap();
        let gi = labels.iter().position(|x| x == g).unwrap();
        confusion[gi][pi] += 1;
        if pi == gi {
            correct += 1;
        }
    }
    let per_label = labels
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let tp = confusion[i][i];
            let gold_count: usize = confusion[i].iter().sum();
            let pred_count: usize = confusion.iter().map(|row| row[i]).sum();
            LabelMetrics {
                label: label.clone(),
                precision: if pred_count == 0 { 0.0 } else { tp as f64 / pred_count as f64 },
                recall: if gold_count == 0 { 0.0 } else { tp as f64 / gold_count as f64 },
                support: gold_count,
            }
        })
        .collect();
    Ok(EvalReport {
        accuracy: correct as f64 / pred.len() as f64,
        n_test: pred.len(),
        labels,
        per_label,
        confusion,
    })
}
