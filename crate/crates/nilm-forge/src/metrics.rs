//! Confusion counts and the evaluation metric suite: accuracy, precision,
//! recall, F1, and the Matthews correlation coefficient.
//!
//! Counts are micro-aggregated: every (window, appliance) on/off decision
//! contributes one cell, pooled across appliances before any ratio is
//! formed. Zero-denominator metrics come back as 0 with the metric named
//! in `undefined` instead of NaN or a panic, so sweep tables stay
//! complete.

use std::collections::BTreeSet;

use crate::data::WindowDataset;
use crate::error::{Error, Result};
use crate::model::{predict_states, HybridParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }
}

/// Pool confusion counts over all N × K decisions; state 1 is positive.
pub fn confusion(predictions: &[Vec<u8>], truth: &[Vec<u8>]) -> Result<ConfusionCounts> {
    if predictions.len() != truth.len() {
        return Err(Error::dim(
            "confusion rows",
            &[predictions.len()],
            &[truth.len()],
        ));
    }
    let mut counts = ConfusionCounts::default();
    for (p_row, t_row) in predictions.iter().zip(truth.iter()) {
        if p_row.len() != t_row.len() {
            return Err(Error::dim("confusion columns", &[p_row.len()], &[t_row.len()]));
        }
        for (&p, &t) in p_row.iter().zip(t_row.iter()) {
            match (p != 0, t != 0) {
                (true, true) => counts.true_pos += 1,
                (true, false) => counts.false_pos += 1,
                (false, true) => counts.false_neg += 1,
                (false, false) => counts.true_neg += 1,
            }
        }
    }
    Ok(counts)
}

/// (TP + TN) / total. Errors on an empty evaluation.
pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    if c.total() == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok((c.true_pos + c.true_neg) as f64 / c.total() as f64)
}

/// (TP/(TP+FP), TP/(TP+FN)); a zero denominator yields 0 rather than an
/// error so sweeps never abort.
pub fn precision_recall(c: &ConfusionCounts) -> (f64, f64) {
    let precision = if c.true_pos + c.false_pos == 0 {
        0.0
    } else {
        c.true_pos as f64 / (c.true_pos + c.false_pos) as f64
    };
    let recall = if c.true_pos + c.false_neg == 0 {
        0.0
    } else {
        c.true_pos as f64 / (c.true_pos + c.false_neg) as f64
    };
    (precision, recall)
}

/// Harmonic mean 2PR/(P+R); 0 when P + R == 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Matthews correlation coefficient,
/// `(TP·TN − FP·FN) / sqrt((TP+FP)(TP+FN)(TN+FP)(TN+FN))`; 0 when any
/// denominator factor vanishes.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, fp, fng, tn) = (
        c.true_pos as f64,
        c.false_pos as f64,
        c.false_neg as f64,
        c.true_neg as f64,
    );
    let denom = (tp + fp) * (tp + fng) * (tn + fp) * (tn + fng);
    if denom == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fng) / denom.sqrt()
    }
}

/// Counts plus every metric, with zero-denominator metrics flagged.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    pub undefined: BTreeSet<String>,
}

impl MetricsReport {
    pub fn from_counts(counts: ConfusionCounts) -> Result<MetricsReport> {
        let acc = accuracy(&counts)?;
        let (precision, recall) = precision_recall(&counts);
        let f1_value = f1(precision, recall);
        let mcc_value = mcc(&counts);

        let mut undefined = BTreeSet::new();
        if counts.true_pos + counts.false_pos == 0 {
            undefined.insert("precision".to_string());
        }
        if counts.true_pos + counts.false_neg == 0 {
            undefined.insert("recall".to_string());
        }
        if precision + recall == 0.0 {
            undefined.insert("f1".to_string());
        }
        let (tp, fp, fng, tn) = (
            counts.true_pos,
            counts.false_pos,
            counts.false_neg,
            counts.true_neg,
        );
        if tp + fp == 0 || tp + fng == 0 || tn + fp == 0 || tn + fng == 0 {
            undefined.insert("mcc".to_string());
        }
        Ok(MetricsReport {
            counts,
            acc,
            precision,
            recall,
            f1: f1_value,
            mcc: mcc_value,
            undefined,
        })
    }

    /// Flat `key = value` text record.
    pub fn to_kv_text(&self) -> String {
        let undefined: Vec<&str> = self.undefined.iter().map(|s| s.as_str()).collect();
        format!(
            "tp = {}\nfp = {}\nfn = {}\ntn = {}\nacc = {}\nprecision = {}\nrecall = {}\nf1 = {}\nmcc = {}\nundefined = {}\n",
            self.counts.true_pos,
            self.counts.false_pos,
            self.counts.false_neg,
            self.counts.true_neg,
            self.acc,
            self.precision,
            self.recall,
            self.f1,
            self.mcc,
            if undefined.is_empty() { "none".to_string() } else { undefined.join(";") },
        )
    }

    pub fn csv_header() -> &'static str {
        "tp,fp,fn,tn,acc,precision,recall,f1,mcc,undefined"
    }

    pub fn to_csv_row(&self) -> String {
        let undefined: Vec<&str> = self.undefined.iter().map(|s| s.as_str()).collect();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.counts.true_pos,
            self.counts.false_pos,
            self.counts.false_neg,
            self.counts.true_neg,
            self.acc,
            self.precision,
            self.recall,
            self.f1,
            self.mcc,
            undefined.join(";"),
        )
    }
}

/// Run a predictor over every window and score it against the labels.
pub fn evaluate<F>(mut predict: F, data: &WindowDataset) -> Result<MetricsReport>
where
    F: FnMut(&Tensor) -> Result<Vec<u8>>,
{
    if data.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty dataset".into()));
    }
    let mut predictions = Vec::with_capacity(data.len());
    let mut truth = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        predictions.push(predict(&data.window(i))?);
        truth.push(data.label_row(i));
    }
    MetricsReport::from_counts(confusion(&predictions, &truth)?)
}

/// [`evaluate`] with the hybrid model as the predictor.
pub fn evaluate_model(params: &HybridParams, data: &WindowDataset) -> Result<MetricsReport> {
    evaluate(|window| predict_states(params, window), data)
}
