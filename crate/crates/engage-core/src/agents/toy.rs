//! A log-linear policy over a finite response vocabulary, differentiable by
//! hand. Scores are linear in hashed bag-of-words features of the last two
//! turns, with one weight block per response.

use crate::agents::SUPPORT_TOPICS;
use crate::dialogue::{
    AgentError, AgentPolicy, Role, Scenario, StructuredState, Turn, UserCondition,
};
use crate::features;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ToyPolicyError {
    #[error("response not in vocabulary: {0:?}")]
    UnknownResponse(String),
}

/// Log-linear softmax policy: P(r | context) ∝ exp(score(context, r) / T).
///
/// The weight vector is laid out in blocks of `buckets` per response, so the
/// interaction weight of (feature b, response r) sits at `r * buckets + b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyPolicy {
    vocabulary: Vec<String>,
    weights: Vec<f64>,
    buckets: usize,
    hash_seed: u64,
    temperature: f64,
}

pub const DEFAULT_BUCKETS: usize = 512;
const DEFAULT_HASH_SEED: u64 = 17;
/// How many trailing turns feed the context features.
const CONTEXT_WINDOW: usize = 2;

impl ToyPolicy {
    pub fn new(
        vocabulary: Vec<String>,
        buckets: usize,
        hash_seed: u64,
        temperature: f64,
    ) -> ToyPolicy {
        assert!(!vocabulary.is_empty(), "vocabulary must be non-empty");
        assert!(buckets > 0, "buckets must be positive");
        assert!(
            temperature > 0.0 && temperature.is_finite(),
            "temperature must be positive"
        );
        let weights = vec![0.0; vocabulary.len() * buckets];
        ToyPolicy {
            vocabulary,
            weights,
            buckets,
            hash_seed,
            temperature,
        }
    }

    /// Zero-weight policy over the emotional-support vocabulary: one
    /// topic-focused reply per catalog topic plus generic fillers.
    pub fn support_default() -> ToyPolicy {
        let mut vocab: Vec<String> = SUPPORT_TOPICS
            .iter()
            .map(|t| {
                format!(
                    "It sounds like {t} has been weighing on you. Tell me more about the {t} side of things."
                )
            })
            .collect();
        vocab.push("I see. Please go on.".into());
        vocab.push("Have you tried simply not worrying about it?".into());
        vocab.push("Everything sorts itself out on its own eventually.".into());
        vocab.push("Let me share an unrelated story to lighten the mood.".into());
        ToyPolicy::new(vocab, DEFAULT_BUCKETS, DEFAULT_HASH_SEED, 1.0)
    }

    /// Zero-weight policy over the persuasion vocabulary: rapport lines,
    /// fillers and donation asks.
    pub fn persuasion_default() -> ToyPolicy {
        let vocab: Vec<String> = vec![
            "Save the Children delivers meals and medicine to kids caught in emergencies.".into(),
            "Every dollar buys school supplies so children can keep learning.".into(),
            "They also rebuild community centers and support families after disasters.".into(),
            "I completely understand wanting to be careful with your money.".into(),
            "On a lighter note, the weather has been lovely this week.".into(),
            "How has your week been going?".into(),
            "Would you consider making a small donation to Save the Children today?".into(),
            "Can I put you down for a donation right now?".into(),
        ]
        .into_iter()
        .collect();
        ToyPolicy::new(vocab, DEFAULT_BUCKETS, DEFAULT_HASH_SEED, 1.0)
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn response_index(&self, response: &str) -> Result<usize, ToyPolicyError> {
        self.vocabulary
            .iter()
            .position(|r| r == response)
            .ok_or_else(|| ToyPolicyError::UnknownResponse(response.to_string()))
    }

    /// Sparse hashed bag-of-words counts over the last two turns.
    pub fn context_features(&self, context: &[Turn]) -> Vec<(usize, f64)> {
        let start = context.len().saturating_sub(CONTEXT_WINDOW);
        let mut counts = vec![0u32; self.buckets];
        for turn in &context[start..] {
            for token in features::tokenize(&turn.text) {
                counts[features::bucket_of(self.hash_seed, &token, self.buckets)] += 1;
            }
        }
        counts
            .into_iter()
            .enumerate()
            .filter(|(_, c)| *c > 0)
            .map(|(b, c)| (b, f64::from(c)))
            .collect()
    }

    fn score_with(&self, phi: &[(usize, f64)], response_idx: usize) -> f64 {
        let block = response_idx * self.buckets;
        phi.iter().map(|&(b, c)| c * self.weights[block + b]).sum()
    }

    /// Log-probabilities of every vocabulary entry, in vocabulary order.
    /// exp of the returned values sums to 1.
    pub fn log_probs(&self, context: &[Turn]) -> Vec<f64> {
        let phi = self.context_features(context);
        let scaled: Vec<f64> = (0..self.vocabulary.len())
            .map(|r| self.score_with(&phi, r) / self.temperature)
            .collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        scaled.into_iter().map(|s| s - lse).collect()
    }

    pub fn log_prob(&self, context: &[Turn], response: &str) -> Result<f64, ToyPolicyError> {
        let idx = self.response_index(response)?;
        Ok(self.log_probs(context)[idx])
    }

    /// Exact gradient of `log_prob(context, response)` with respect to the
    /// full weight vector: phi_b/T * (1[r = r'] - P(r')) at (r', b).
    pub fn grad_log_prob(
        &self,
        context: &[Turn],
        response: &str,
    ) -> Result<Vec<f64>, ToyPolicyError> {
        let target = self.response_index(response)?;
        let phi = self.context_features(context);
        let probs: Vec<f64> = self.log_probs(context).iter().map(|lp| lp.exp()).collect();
        let mut grad = vec![0.0; self.weights.len()];
        for (r, &p) in probs.iter().enumerate() {
            let coeff = (if r == target { 1.0 } else { 0.0 } - p) / self.temperature;
            let block = r * self.buckets;
            for &(b, c) in &phi {
                grad[block + b] = coeff * c;
            }
        }
        Ok(grad)
    }

    /// Samples one response index from the softmax distribution. Pure
    /// function of (context, seed).
    pub fn sample_index(&self, context: &[Turn], seed: u64) -> usize {
        let probs: Vec<f64> = self.log_probs(context).iter().map(|lp| lp.exp()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw: f64 = rng.gen();
        let mut cumulative = 0.0;
        for (idx, p) in probs.iter().enumerate() {
            cumulative += p;
            if draw < cumulative {
                return idx;
            }
        }
        probs.len() - 1
    }

    pub fn sample(&self, context: &[Turn], seed: u64) -> &str {
        &self.vocabulary[self.sample_index(context, seed)]
    }

    /// Builds the model turn for a chosen response text, attaching the
    /// predicted user state in emotional-support conversations.
    pub fn materialize_turn(
        &self,
        condition: &UserCondition,
        context: &[Turn],
        text: &str,
    ) -> Turn {
        let state = match condition.scenario {
            Scenario::EmotionalSupport => self.predict_state(context, text),
            Scenario::Persuasion => None,
        };
        Turn::new(Role::Model, text, state).expect("vocabulary texts are non-empty")
    }

    /// Predicted user state attached to emotional-support responses: the
    /// policy guesses the user is preoccupied with whatever topic its own
    /// reply focuses on.
    fn predict_state(&self, context: &[Turn], response: &str) -> Option<StructuredState> {
        let response_topics: Vec<&str> = SUPPORT_TOPICS
            .iter()
            .copied()
            .filter(|t| features::tokenize(response).iter().any(|tok| tok == t))
            .collect();
        match response_topics.first() {
            Some(topic) => Some(StructuredState {
                feelings: vec![format!("anxious about {topic}")],
                needs: vec![format!("to be heard about {topic}")],
                ..Default::default()
            }),
            None => {
                let _ = context;
                Some(StructuredState {
                    observations: vec!["the user shared a concern".into()],
                    ..Default::default()
                })
            }
        }
    }
}

impl AgentPolicy for ToyPolicy {
    fn role(&self) -> Role {
        Role::Model
    }

    fn respond(
        &self,
        condition: &UserCondition,
        context: &[Turn],
        seed: u64,
    ) -> Result<Turn, AgentError> {
        let text = self.sample(context, seed).to_string();
        Ok(self.materialize_turn(condition, context, &text))
    }
}
