//! Preference alignment of a toy policy with the standard DPO objective:
//! -log sigmoid(beta * [log-ratio(chosen) - log-ratio(rejected)]) against a
//! frozen reference snapshot, trained by plain gradient descent.

use crate::agents::{ToyPolicy, ToyPolicyError};
use crate::preference::PreferencePair;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DpoError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    InvalidConfig(&'static str),
    #[error("pair {pair_index}: response not in vocabulary: {response:?}")]
    UnknownResponse { pair_index: usize, response: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoConfig {
    /// Temperature on the log-ratio margin.
    pub beta: f64,
    #[serde(rename = "lr")]
    pub learning_rate: f64,
    pub epochs: usize,
    /// Shuffle seed, used when training in minibatches.
    pub seed: u64,
    /// None trains full batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: 0.1,
            learning_rate: 0.05,
            epochs: 30,
            seed: 0,
            batch_size: None,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), DpoError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(DpoError::InvalidConfig("beta must be > 0"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DpoError::InvalidConfig("lr must be > 0"));
        }
        if self.epochs == 0 {
            return Err(DpoError::InvalidConfig("epochs must be >= 1"));
        }
        if self.batch_size == Some(0) {
            return Err(DpoError::InvalidConfig("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Per-epoch training trace plus the state before the first update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_mean_loss: f64,
    /// Mean implied margin sigmoid(beta * delta) before training.
    pub initial_mean_margin: f64,
    pub epoch_mean_loss: Vec<f64>,
    pub epoch_mean_margin: Vec<f64>,
}

impl TrainReport {
    pub fn final_mean_margin(&self) -> f64 {
        *self.epoch_mean_margin.last().unwrap_or(&self.initial_mean_margin)
    }

    pub fn final_mean_loss(&self) -> f64 {
        *self.epoch_mean_loss.last().unwrap_or(&self.initial_mean_loss)
    }
}

/// Aligned policy, the frozen reference it was trained against, and the
/// epoch-by-epoch report.
#[derive(Debug, Clone)]
pub struct DpoTrainOutput {
    pub policy: ToyPolicy,
    pub reference: ToyPolicy,
    pub report: TrainReport,
}

fn unknown(pair_index: usize, err: ToyPolicyError) -> DpoError {
    let ToyPolicyError::UnknownResponse(response) = err;
    DpoError::UnknownResponse { pair_index, response }
}

/// The beta-scaled log-ratio margin of one pair:
/// beta * [(log pi(ch) - log ref(ch)) - (log pi(rej) - log ref(rej))].
fn scaled_margin(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pair: &PreferencePair,
    beta: f64,
    pair_index: usize,
) -> Result<f64, DpoError> {
    let lp = |p: &ToyPolicy, response: &str| {
        p.log_prob(&pair.context, response)
            .map_err(|e| unknown(pair_index, e))
    };
    let chosen_ratio = lp(policy, &pair.chosen)? - lp(reference, &pair.chosen)?;
    let rejected_ratio = lp(policy, &pair.rejected)? - lp(reference, &pair.rejected)?;
    Ok(beta * (chosen_ratio - rejected_ratio))
}

/// Numerically stable softplus(x) = ln(1 + e^x).
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// DPO loss of one pair: -log sigmoid(scaled margin). Strictly positive.
pub fn dpo_loss(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64, DpoError> {
    let margin = scaled_margin(policy, reference, pair, beta, 0)?;
    Ok(softplus(-margin))
}

/// Implied preference margin sigmoid(beta * delta) of one pair.
pub fn dpo_margin(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64, DpoError> {
    Ok(sigmoid(scaled_margin(policy, reference, pair, beta, 0)?))
}

/// Exact gradient of [`dpo_loss`] with respect to the policy weights:
/// -sigmoid(-beta * delta) * beta * (grad log pi(chosen) - grad log pi(rejected)).
pub fn dpo_grad(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pair: &PreferencePair,
    beta: f64,
) -> Result<Vec<f64>, DpoError> {
    let margin = scaled_margin(policy, reference, pair, beta, 0)?;
    let coeff = -sigmoid(-margin) * beta;
    let grad_chosen = policy
        .grad_log_prob(&pair.context, &pair.chosen)
        .map_err(|e| unknown(0, e))?;
    let grad_rejected = policy
        .grad_log_prob(&pair.context, &pair.rejected)
        .map_err(|e| unknown(0, e))?;
    Ok(grad_chosen
        .iter()
        .zip(&grad_rejected)
        .map(|(c, r)| coeff * (c - r))
        .collect())
}

fn dataset_metrics(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    dataset: &[PreferencePair],
    beta: f64,
) -> Result<(f64, f64), DpoError> {
    let mut loss = 0.0;
    let mut margin = 0.0;
    for (i, pair) in dataset.iter().enumerate() {
        let m = scaled_margin(policy, reference, pair, beta, i)?;
        loss += softplus(-m);
        margin += sigmoid(m);
    }
    let n = dataset.len() as f64;
    Ok((loss / n, margin / n))
}

/// Gradient-descent DPO training. The reference is a deep snapshot of the
/// policy taken at entry and stays frozen throughout; batches accumulate in
/// pair order so runs are bit-stable.
pub fn train_dpo(
    policy: &ToyPolicy,
    dataset: &[PreferencePair],
    cfg: &DpoConfig,
) -> Result<DpoTrainOutput, DpoError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(DpoError::EmptyDataset);
    }
    let reference = policy.clone();
    let mut current = policy.clone();

    let (initial_mean_loss, initial_mean_margin) =
        dataset_metrics(&current, &reference, dataset, cfg.beta)?;
    let mut report = TrainReport {
        initial_mean_loss,
        initial_mean_margin,
        epoch_mean_loss: Vec::with_capacity(cfg.epochs),
        epoch_mean_margin: Vec::with_capacity(cfg.epochs),
    };

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.epochs {
        let batches: Vec<&[usize]> = match cfg.batch_size {
            None => vec![&order[..]],
            Some(size) => {
                order.shuffle(&mut rng);
                order.chunks(size).collect()
            }
        };
        for batch in batches {
            let mut grad = vec![0.0; current.weights().len()];
            for &idx in batch {
                let pair = &dataset[idx];
                let g = dpo_grad(&current, &reference, pair, cfg.beta)
                    .map_err(|e| reindex(e, idx))?;
                for (total, part) in grad.iter_mut().zip(&g) {
                    *total += part;
                }
            }
            let scale = cfg.learning_rate / batch.len() as f64;
            for (w, g) in current.weights_mut().iter_mut().zip(&grad) {
                *w -= scale * g;
            }
        }
        let (loss, margin) = dataset_metrics(&current, &reference, dataset, cfg.beta)?;
        report.epoch_mean_loss.push(loss);
        report.epoch_mean_margin.push(margin);
    }

    Ok(DpoTrainOutput {
        policy: current,
        reference,
        report,
    })
}

fn reindex(err: DpoError, pair_index: usize) -> DpoError {
    match err {
        DpoError::UnknownResponse { response, .. } => {
            DpoError::UnknownResponse { pair_index, response }
        }
        other => other,
    }
}
