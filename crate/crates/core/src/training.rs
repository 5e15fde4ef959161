//! Loss, optimizer, training loop and phase-stratified splits.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::auc_roc;
use crate::schema::{Phase, PhaseSet};
use crate::smoe::{
    utilization, Batch, Forward, Modality, ModelConfig, ModelError, Noise, RoutingStats, SMoEModel,
};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss {
        epoch: usize,
        last_good: Box<SMoEModel>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_imp: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; off when absent.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_imp: 0.01,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            patience: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.lambda_imp >= 0.0) {
            return bad("lambda_imp must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate must be >= 0");
        }
        Ok(())
    }
}

pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Derivative of [`bce_loss`] through the logistic with respect to the logit.
/// Zero inside the clamp region, where the loss is constant.
fn bce_logit_grad(p: f64, y: f64) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        0.0
    } else {
        p - y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossParts {
    pub bce: f64,
    pub imp: f64,
    pub total: f64,
}

/// Mean BCE plus `lambda · L_imp` for one batch.
pub fn total_loss(
    model: &SMoEModel,
    batch: &Batch,
    labels: &Array1<f64>,
    lambda_imp: f64,
    noise: Noise<'_>,
) -> Result<(LossParts, Forward), ModelError> {
    let fwd = model.forward(batch, noise)?;
    let bce = fwd
        .probs
        .iter()
        .zip(labels)
        .map(|(p, y)| bce_loss(*p, *y))
        .sum::<f64>()
        / labels.len().max(1) as f64;
    let imp = fwd.stats.load_balance_loss();
    Ok((
        LossParts {
            bce,
            imp,
            total: bce + lambda_imp * imp,
        },
        fwd,
    ))
}

/// Loss and exact gradients for every parameter.
pub fn backward(
    model: &SMoEModel,
    batch: &Batch,
    labels: &Array1<f64>,
    lambda_imp: f64,
    noise: Noise<'_>,
) -> Result<(LossParts, Vec<Array2<f64>>, RoutingStats), ModelError> {
    let (loss, fwd) = total_loss(model, batch, labels, lambda_imp, noise)?;
    let n = labels.len().max(1) as f64;
    let dlogits: Array1<f64> = fwd
        .probs
        .iter()
        .zip(labels)
        .map(|(p, y)| bce_logit_grad(*p, *y) / n)
        .collect();
    let grads = model.backward(batch, &fwd, &dlogits, lambda_imp);
    Ok((loss, grads, fwd.stats))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &[Array2<f64>], config: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|p| Array2::zeros(p.dim())).collect();
        Adam {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

pub fn global_norm(grads: &[Array2<f64>]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

pub fn clip_gradients(grads: &mut [Array2<f64>], max_norm: f64) {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * scale));
    }
}

/// Encoded inputs for every record: one matrix per modality in `modalities`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub modalities: Vec<Modality>,
    pub inputs: Vec<Array2<f64>>,
    pub labels: Array1<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `rows` restricted to the model's active modalities.
    pub fn batch(&self, model: &ModelConfig, rows: &[usize]) -> Result<Batch, ModelError> {
        let inputs = model
            .modalities
            .iter()
            .map(|m| {
                let i = self.modalities.iter().position(|x| x == m).ok_or_else(|| {
                    ModelError::InvalidConfig(format!("dataset has no {m} inputs"))
                })?;
                Ok(self.inputs[i].select(Axis(0), rows))
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(Batch { inputs })
    }

    pub fn labels_of(&self, rows: &[usize]) -> Array1<f64> {
        self.labels.select(Axis(0), rows)
    }
}

const EVAL_CHUNK: usize = 256;

/// Eval-mode logits for the given rows.
pub fn predict(
    model: &SMoEModel,
    data: &Dataset,
    rows: &[usize],
) -> Result<Array1<f64>, ModelError> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EVAL_CHUNK) {
        let fwd = model.forward(&data.batch(&model.config, chunk)?, Noise::Off)?;
        out.extend(fwd.logits.iter().copied());
    }
    Ok(Array1::from(out))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
    pub val_loss: f64,
    /// Utilization over the epoch's training selections.
    pub f: Vec<f64>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let experts = history.first().map_or(0, |h| h.f.len());
    let mut out = String::from("epoch,train_loss,val_auc");
    for j in 1..=experts {
        out.push_str(&format!(",f_{j}"));
    }
    out.push('\n');
    for h in history {
        let auc = h
            .val_auc
            .map_or_else(|| "nan".to_string(), |a| format!("{a:.6}"));
        out.push_str(&format!("{},{:.6},{}", h.epoch, h.train_loss, auc));
        for f in &h.f {
            out.push_str(&format!(",{f:.6}"));
        }
        out.push('\n');
    }
    out
}

/// Coefficient of variation (population std / mean).
pub fn coefficient_of_variation(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SMoEModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn mean_bce(logits: &Array1<f64>, labels: &Array1<f64>) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    logits
        .iter()
        .zip(labels)
        .map(|(l, y)| bce_loss(crate::smoe::sigmoid(*l), *y))
        .sum::<f64>()
        / labels.len() as f64
}

/// Trains a fresh model and keeps the epoch with the best validation AUC
/// (validation loss when AUC is undefined). Parameters are kept at f32
/// precision after every update so the returned model equals its checkpoint.
pub fn train(
    model_config: &ModelConfig,
    data: &Dataset,
    train_rows: &[usize],
    val_rows: &[usize],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = SMoEModel::new(model_config.clone(), &mut rng)?;
    model.round_to_f32();
    let mut adam = Adam::new(&model.params, config);
    let val_labels = data.labels_of(val_rows);
    let val_u8: Vec<u8> = val_labels.iter().map(|y| (*y >= 0.5) as u8).collect();

    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_key: Option<(f64, f64)> = None;
    let mut stale = 0;
    let mut history = Vec::new();
    let mut order = train_rows.to_vec();
    let experts = model.config.experts;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut counts = vec![0usize; experts];
        for chunk in order.chunks(config.batch_size) {
            let batch = data.batch(&model.config, chunk)?;
            let labels = data.labels_of(chunk);
            let (loss, mut grads, stats) = backward(
                &model,
                &batch,
                &labels,
                config.lambda_imp,
                Noise::Sample(&mut rng),
            )?;
            if !loss.total.is_finite() || grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    last_good: Box::new(best),
                });
            }
            if let Some(max) = config.clip_norm {
                clip_gradients(&mut grads, max);
            }
            adam.step(&mut model.params, &grads);
            model.round_to_f32();
            loss_sum += loss.total * chunk.len() as f64;
            counts
                .iter_mut()
                .zip(&stats.counts)
                .for_each(|(a, b)| *a += b);
        }
        let train_loss = loss_sum / order.len().max(1) as f64;
        let val_logits = predict(&model, data, val_rows)?;
        let val_scores: Vec<f64> = val_logits.to_vec();
        let val_auc = auc_roc(&val_scores, &val_u8).ok();
        let val_loss = mean_bce(&val_logits, &val_labels);
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_auc,
            val_loss,
            f: utilization(
                &counts,
                order.len(),
                model.config.top_k,
                model.config.utilization_norm,
            ),
        });

        // larger is better in both components
        let key = match val_auc {
            Some(a) => (a, -val_loss),
            None => (f64::NEG_INFINITY, -val_loss),
        };
        let improved = match best_key {
            None => true,
            Some(b) => {
                if val_auc.is_some() {
                    key.0 > b.0
                } else {
                    key.1 > b.1
                }
            }
        };
        if improved {
            best_key = Some(key);
            best = model.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if config.patience > 0 && stale >= config.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
    })
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SplitError {
    #[error("phase stratum {0:?} has fewer than {MIN_STRATUM} records")]
    StratumTooSmall(Phase),
    #[error("split fractions must be non-negative and sum to 1")]
    BadFractions,
}

pub const MIN_STRATUM: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// SHA-256 over the three sorted index lists.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, part) in [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            h.update(name.as_bytes());
            for i in part {
                h.update((*i as u64).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-stratum (lowest phase) seeded shuffle: test first, then validation,
/// the rest training. Index lists are returned sorted.
pub fn stratified_split(phases: &[PhaseSet], spec: &SplitSpec) -> Result<Split, SplitError> {
    let sum = spec.train + spec.val + spec.test;
    if [spec.train, spec.val, spec.test].iter().any(|f| *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(SplitError::BadFractions);
    }
    let mut strata: BTreeMap<Phase, Vec<usize>> = BTreeMap::new();
    for (i, p) in phases.iter().enumerate() {
        strata.entry(p.primary()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (phase, mut idx) in strata {
        if idx.len() < MIN_STRATUM {
            return Err(SplitError::StratumTooSmall(phase));
        }
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_test = (spec.test * n).round() as usize;
        let n_val = (spec.val * n).round() as usize;
        split.test.extend_from_slice(&idx[..n_test]);
        split.val.extend_from_slice(&idx[n_test..n_test + n_val]);
        split.train.extend_from_slice(&idx[n_test + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_values() {
        assert!((bce_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(0.9, 0.0) - 2.302_585_093).abs() < 1e-8);
        assert!(bce_loss(1.0, 1.0) < 1e-6);
    }

    #[test]
    fn split_proportions() {
        let phases: Vec<PhaseSet> = [(Phase::I, 50), (Phase::II, 30), (Phase::III, 20)]
            .iter()
            .flat_map(|(p, n)| std::iter::repeat_n(PhaseSet::single(*p), *n))
            .collect();
        let s = stratified_split(&phases, &SplitSpec::default()).unwrap();
        let count = |idx: &[usize], p| idx.iter().filter(|&&i| phases[i].primary() == p).count();
        assert_eq!(
            [Phase::I, Phase::II, Phase::III].map(|p| count(&s.test, p)),
            [5, 3, 2]
        );
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 100);
    }

    #[test]
    fn tiny_stratum() {
        let phases = vec![PhaseSet::single(Phase::II); 3];
        assert_eq!(
            stratified_split(&phases, &SplitSpec::default()),
            Err(SplitError::StratumTooSmall(Phase::II))
        );
    }
}
