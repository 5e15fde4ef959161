//! Ranking metrics, F1, calibration error and temperature scaling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::PhaseSet;
use crate::smoe::sigmoid;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("labels contain a single class")]
    DegenerateLabels,
    #[error("scores and labels differ in length")]
    LengthMismatch,
}

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(usize, usize), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch);
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Mann–Whitney AUC with average ranks for ties.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    let (pos, neg) = class_counts(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(MetricError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives keeps everything in integers
    let mut rank2_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 averaged, doubled
        let avg2 = (i + 1 + j + 1) as u64;
        for &o in &order[i..=j] {
            if labels[o] == 1 {
                rank2_pos += avg2;
            }
        }
        i = j + 1;
    }
    let u2 = rank2_pos - (pos * (pos + 1)) as u64;
    Ok(u2 as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// Step-wise average precision over descending scores (stable for ties).
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    let (pos, _) = class_counts(scores, labels)?;
    if pos == 0 {
        return Err(MetricError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

/// F1 with `score >= threshold` predicted positive; 0 without predicted positives.
pub fn f1_at(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (s, y) in scores.iter().zip(labels) {
        match (*s >= threshold, *y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp + fp == 0 || tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// Threshold among the observed scores that maximizes F1 (the larger one on ties).
pub fn tune_threshold(scores: &[f64], labels: &[u8]) -> (f64, f64) {
    let mut candidates = scores.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (0.5, f1_at(scores, labels, 0.5));
    for t in candidates {
        let f = f1_at(scores, labels, t);
        if f > best.1 || (f == best.1 && t > best.0) {
            best = (t, f);
        }
    }
    best
}

/// Expected calibration error over equal-width bins; empty bins contribute 0.
pub fn ece(probs: &[f64], labels: &[u8], bins: usize) -> f64 {
    if probs.is_empty() || bins == 0 {
        return 0.0;
    }
    let mut sum_p = vec![0.0; bins];
    let mut sum_y = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (p, y) in probs.iter().zip(labels) {
        let b = ((p * bins as f64).floor() as usize).min(bins - 1);
        sum_p[b] += p;
        sum_y[b] += *y as f64;
        count[b] += 1;
    }
    let n = probs.len() as f64;
    (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (sum_p[b] - sum_y[b]).abs() / n)
        .sum()
}

/// Mean negative log-likelihood of probabilities (clamped like the training loss).
pub fn nll(probs: &[f64], labels: &[u8]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    probs
        .iter()
        .zip(labels)
        .map(|(p, y)| crate::training::bce_loss(*p, *y as f64))
        .sum::<f64>()
        / probs.len() as f64
}

/// Mean NLL of `σ(ℓ/T)`, computed from logits without clamping.
pub fn nll_at_temperature(logits: &[f64], labels: &[u8], t: f64) -> f64 {
    let softplus = |x: f64| if x > 30.0 { x } else { x.exp().ln_1p() };
    let n = logits.len().max(1) as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(l, y)| softplus(l / t) - *y as f64 * l / t)
        .sum::<f64>()
        / n
}

pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 20.0;

/// Golden-section search for the NLL-minimizing temperature on [0.05, 20].
/// Falls back to 1 if the search result is worse than no scaling.
pub fn fit_temperature(logits: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    let (pos, neg) = class_counts(logits, labels)?;
    if pos == 0 || neg == 0 || logits.len() < 2 {
        return Err(MetricError::DegenerateLabels);
    }
    let f = |t: f64| nll_at_temperature(logits, labels, t);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (T_MIN, T_MAX);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-6 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    let t = (a + b) / 2.0;
    Ok(if f(t) <= f(1.0) { t } else { 1.0 })
}

pub fn apply_temperature(logits: &[f64], t: f64) -> Vec<f64> {
    logits.iter().map(|l| sigmoid(l / t)).collect()
}

pub const ECE_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub n: usize,
    pub positives: usize,
    /// Absent when one class is missing.
    pub auc_roc: Option<f64>,
    pub average_precision: Option<f64>,
    pub f1: f64,
    pub threshold: f64,
    pub f1_tuned: f64,
    pub tuned_threshold: f64,
    pub ece: f64,
    pub nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: MetricSet,
    pub temperature: f64,
    pub per_phase: BTreeMap<String, MetricSet>,
}

/// Ranking metrics use `scores` (scaled logits: same order as the
/// probabilities, without saturation ties); the rest use `probs`.
pub fn metric_set(
    scores: &[f64],
    probs: &[f64],
    labels: &[u8],
    threshold: f64,
    tuned_threshold: f64,
) -> MetricSet {
    MetricSet {
        n: probs.len(),
        positives: labels.iter().filter(|&&y| y == 1).count(),
        auc_roc: auc_roc(scores, labels).ok(),
        average_precision: average_precision(scores, labels).ok(),
        f1: f1_at(probs, labels, threshold),
        threshold,
        f1_tuned: f1_at(probs, labels, tuned_threshold),
        tuned_threshold,
        ece: ece(probs, labels, ECE_BINS),
        nll: nll(probs, labels),
    }
}

/// Report on test logits. `temperature` scales logits before the sigmoid;
/// `tuned_threshold` usually comes from the validation split.
pub fn evaluate(
    logits: &[f64],
    labels: &[u8],
    phases: &[PhaseSet],
    temperature: f64,
    tuned_threshold: f64,
) -> EvalReport {
    let scores: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let probs = apply_temperature(logits, temperature);
    let mut per_phase = BTreeMap::new();
    for phase in crate::schema::Phase::ALL {
        let idx: Vec<usize> = (0..probs.len())
            .filter(|&i| phases[i].primary() == phase)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        per_phase.insert(
            phase.token().to_string(),
            metric_set(&pick(&scores), &pick(&probs), &y, 0.5, tuned_threshold),
        );
    }
    EvalReport {
        overall: metric_set(&scores, &probs, labels, 0.5, tuned_threshold),
        temperature,
        per_phase,
    }
}
