//! Preference-pair construction and ranking: mining chosen/rejected response
//! pairs from finished search trees (tree-mined set), training a pairwise
//! logistic reward model on them, generating reward-ranked pairs from the
//! policy's own samples, and Best-of-N response selection.

use crate::agents::ToyPolicy;
use crate::dialogue::{validate_turn_sequence, Role, Turn, UserCondition};
use crate::features;
use crate::mcts::{derive_seed, DialogueTree, NodeKind};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PreferenceError {
    #[error("no preference pairs to train on")]
    EmptyDataset,
    #[error("all pairs have identical chosen/rejected feature vectors")]
    Degenerate,
    #[error("invalid config: {0}")]
    InvalidConfig(&'static str),
}

/// Where a pair came from: sibling model nodes in a search tree, or policy
/// samples ranked by the reward model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    TreeMined,
    RewardRanked,
}

/// A conversation context with a preferred and a dispreferred response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub context: Vec<Turn>,
    pub chosen: String,
    pub rejected: String,
    pub chosen_value: f64,
    pub rejected_value: f64,
    pub source: PairSource,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<(), String> {
        if self.chosen == self.rejected {
            return Err("chosen equals rejected".into());
        }
        if !(self.chosen_value > self.rejected_value) {
            return Err(format!(
                "chosen_value {} not above rejected_value {}",
                self.chosen_value, self.rejected_value
            ));
        }
        validate_turn_sequence(&self.context).map_err(|e| e.to_string())?;
        match self.context.last() {
            Some(turn) if turn.role == Role::User => Ok(()),
            _ => Err("context must end in a user turn".into()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    /// Siblings need at least this many visits before their values count.
    pub min_visits: u64,
    /// Required value gap between chosen and rejected.
    pub value_margin: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            min_visits: 2,
            value_margin: 0.1,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<(), PreferenceError> {
        if self.min_visits < 1 {
            return Err(PreferenceError::InvalidConfig("min_visits must be >= 1"));
        }
        if !(self.value_margin >= 0.0) {
            return Err(PreferenceError::InvalidConfig("value_margin must be >= 0"));
        }
        Ok(())
    }
}

/// Extracts ordered sibling pairs from a finished tree: under every user
/// node, unpruned model children with enough visits are compared by Q/N;
/// every gap of at least `value_margin` becomes a pair with the root-to-user
/// path as its context.
pub fn mine_pairs(tree: &DialogueTree, cfg: &MiningConfig) -> Vec<PreferencePair> {
    let mut pairs = Vec::new();
    for node in tree.nodes() {
        if node.kind != NodeKind::User {
            continue;
        }
        let mut siblings: Vec<_> = node
            .children
            .iter()
            .map(|&c| tree.node(c))
            .filter(|c| {
                c.kind == NodeKind::Model && !c.pruned && c.visits >= cfg.min_visits
            })
            .collect();
        if siblings.len() < 2 {
            continue;
        }
        siblings.sort_by_key(|c| c.id);
        let context = tree.path_turns(node.id);
        for chosen in &siblings {
            for rejected in &siblings {
                let gap = chosen.mean_value() - rejected.mean_value();
                if gap >= cfg.value_margin
                    && chosen.mean_value() > rejected.mean_value()
                    && chosen.turn.text != rejected.turn.text
                {
                    pairs.push(PreferencePair {
                        context: context.clone(),
                        chosen: chosen.turn.text.clone(),
                        rejected: rejected.turn.text.clone(),
                        chosen_value: chosen.mean_value(),
                        rejected_value: rejected.mean_value(),
                        source: PairSource::TreeMined,
                    });
                }
            }
        }
    }
    pairs
}

/// Anything that scores a response in context; reward models and test
/// oracles both qualify.
pub trait ResponseScorer {
    fn score_response(&self, context: &[Turn], response: &str) -> f64;
}

impl<F> ResponseScorer for F
where
    F: Fn(&[Turn], &str) -> f64,
{
    fn score_response(&self, context: &[Turn], response: &str) -> f64 {
        self(context, response)
    }
}

/// Linear pairwise reward model over hashed (context, response) features,
/// trained with a logistic pairwise loss. Preference probability is
/// sigmoid(score(chosen) - score(rejected)).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardModel {
    weights: Vec<f64>,
    buckets: usize,
    hash_seed: u64,
    trained: bool,
    #[serde(default)]
    final_loss: Option<f64>,
}

pub const DEFAULT_RM_BUCKETS: usize = 512;
const DEFAULT_RM_HASH_SEED: u64 = 29;

impl RewardModel {
    pub fn new(buckets: usize, hash_seed: u64) -> RewardModel {
        assert!(buckets > 0);
        RewardModel {
            weights: vec![0.0; buckets],
            buckets,
            hash_seed,
            trained: false,
            final_loss: None,
        }
    }

    pub fn trained(&self) -> bool {
        self.trained
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.final_loss
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Sparse features: response tokens plus response tokens crossed with
    /// the last user turn's tokens (the same hashed bag-of-words scheme the
    /// toy policy uses).
    pub fn features(&self, context: &[Turn], response: &str) -> BTreeMap<usize, f64> {
        let mut phi: BTreeMap<usize, f64> = BTreeMap::new();
        let response_tokens = features::tokenize(response);
        for token in &response_tokens {
            let bucket = features::bucket_of(self.hash_seed, &format!("r:{token}"), self.buckets);
            *phi.entry(bucket).or_insert(0.0) += 1.0;
        }
        if let Some(last_user) = context.iter().rev().find(|t| t.role == Role::User) {
            for user_token in features::tokenize(&last_user.text) {
                for token in &response_tokens {
                    let bucket = features::bucket_of(
                        self.hash_seed,
                        &format!("x:{user_token}:{token}"),
                        self.buckets,
                    );
                    *phi.entry(bucket).or_insert(0.0) += 1.0;
                }
            }
        }
        phi
    }

    pub fn score(&self, context: &[Turn], response: &str) -> f64 {
        self.features(context, response)
            .iter()
            .map(|(&b, &c)| c * self.weights[b])
            .sum()
    }

    /// P(a preferred over b) = sigmoid(score(a) - score(b)).
    pub fn preference_probability(&self, context: &[Turn], a: &str, b: &str) -> f64 {
        sigmoid(self.score(context, a) - self.score(context, b))
    }
}

impl ResponseScorer for RewardModel {
    fn score_response(&self, context: &[Turn], response: &str) -> f64 {
        self.score(context, response)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sigmoid(x)), stable on both tails.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardTrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub l2: f64,
    pub buckets: usize,
    pub hash_seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        RewardTrainConfig {
            learning_rate: 0.1,
            steps: 500,
            l2: 1e-4,
            buckets: DEFAULT_RM_BUCKETS,
            hash_seed: DEFAULT_RM_HASH_SEED,
        }
    }
}

/// Pairwise loss of one pair under the model: -log(sigmoid(score(chosen) -
/// score(rejected))).
pub fn reward_pair_loss(rm: &RewardModel, pair: &PreferencePair) -> f64 {
    let delta = rm.score(&pair.context, &pair.chosen) - rm.score(&pair.context, &pair.rejected);
    -log_sigmoid(delta)
}

/// Full-batch gradient of the mean pairwise loss plus L2 penalty.
pub fn reward_loss_grad(rm: &RewardModel, pairs: &[PreferencePair], l2: f64) -> Vec<f64> {
    let mut grad = vec![0.0; rm.weights.len()];
    let scale = 1.0 / pairs.len() as f64;
    for pair in pairs {
        let phi_chosen = rm.features(&pair.context, &pair.chosen);
        let phi_rejected = rm.features(&pair.context, &pair.rejected);
        let delta =
            rm.score(&pair.context, &pair.chosen) - rm.score(&pair.context, &pair.rejected);
        let coeff = -sigmoid(-delta) * scale;
        for (&b, &c) in &phi_chosen {
            grad[b] += coeff * c;
        }
        for (&b, &c) in &phi_rejected {
            grad[b] -= coeff * c;
        }
    }
    for (g, w) in grad.iter_mut().zip(&rm.weights) {
        *g += 2.0 * l2 * w;
    }
    grad
}

/// Trains a pairwise reward model by full-batch gradient descent on
/// -log(sigmoid(score gap)) with an L2 penalty.
pub fn train_reward_model(
    pairs: &[PreferencePair],
    cfg: &RewardTrainConfig,
) -> Result<RewardModel, PreferenceError> {
    if pairs.is_empty() {
        return Err(PreferenceError::EmptyDataset);
    }
    let mut rm = RewardModel::new(cfg.buckets, cfg.hash_seed);
    let degenerate = pairs.iter().all(|pair| {
        rm.features(&pair.context, &pair.chosen) == rm.features(&pair.context, &pair.rejected)
    });
    if degenerate {
        return Err(PreferenceError::Degenerate);
    }
    for _ in 0..cfg.steps {
        let grad = reward_loss_grad(&rm, pairs, cfg.l2);
        for (w, g) in rm.weights.iter_mut().zip(&grad) {
            *w -= cfg.learning_rate * g;
        }
    }
    let mean_loss =
        pairs.iter().map(|p| reward_pair_loss(&rm, p)).sum::<f64>() / pairs.len() as f64;
    rm.trained = true;
    rm.final_loss = Some(mean_loss);
    Ok(rm)
}

/// Fraction of pairs the model ranks correctly (chosen strictly above
/// rejected).
pub fn pair_accuracy(rm: &RewardModel, pairs: &[PreferencePair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let correct = pairs
        .iter()
        .filter(|p| rm.score(&p.context, &p.chosen) > rm.score(&p.context, &p.rejected))
        .count();
    correct as f64 / pairs.len() as f64
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GenReport {
    pub emitted: usize,
    pub skipped_identical: usize,
    pub skipped_tied: usize,
}

/// For each context, samples two distinct policy responses and ranks them
/// with the reward model. Identical samples are retried up to `retry_cap`
/// times, then the context is skipped and counted in the report; score ties
/// are skipped the same way.
pub fn generate_ranked_pairs(
    policy: &ToyPolicy,
    contexts: &[Vec<Turn>],
    rm: &RewardModel,
    seed: u64,
    retry_cap: u32,
) -> (Vec<PreferencePair>, GenReport) {
    let mut pairs = Vec::new();
    let mut report = GenReport::default();
    for (i, context) in contexts.iter().enumerate() {
        let mut found = None;
        for attempt in 0..=retry_cap {
            let s1 = derive_seed(seed, "dt-a", i as u64, u64::from(attempt));
            let s2 = derive_seed(seed, "dt-b", i as u64, u64::from(attempt));
            let a = policy.sample(context, s1);
            let b = policy.sample(context, s2);
            if a != b {
                found = Some((a.to_string(), b.to_string()));
                break;
            }
        }
        let Some((a, b)) = found else {
            report.skipped_identical += 1;
            continue;
        };
        let score_a = rm.score(context, &a);
        let score_b = rm.score(context, &b);
        if score_a == score_b {
            report.skipped_tied += 1;
            continue;
        }
        let (chosen, chosen_value, rejected, rejected_value) = if score_a > score_b {
            (a, score_a, b, score_b)
        } else {
            (b, score_b, a, score_a)
        };
        pairs.push(PreferencePair {
            context: context.clone(),
            chosen,
            rejected,
            chosen_value,
            rejected_value,
            source: PairSource::RewardRanked,
        });
        report.emitted += 1;
    }
    (pairs, report)
}

/// Samples n responses from the policy and returns the one the scorer ranks
/// highest; ties keep the earliest sample.
pub fn best_of_n(
    policy: &ToyPolicy,
    context: &[Turn],
    scorer: &dyn ResponseScorer,
    n: usize,
    seed: u64,
) -> String {
    assert!(n >= 1, "best-of-n needs n >= 1");
    let mut best: Option<(String, f64)> = None;
    for i in 0..n {
        let sample_seed = derive_seed(seed, "bon", i as u64, 0);
        let candidate = policy.sample(context, sample_seed).to_string();
        let score = scorer.score_response(context, &candidate);
        match &best {
            Some((_, best_score)) if *best_score >= score => {}
            _ => best = Some((candidate, score)),
        }
    }
    best.expect("n >= 1 yields a sample").0
}

/// An [`AgentPolicy`] wrapper applying Best-of-N reranking to every reply.
///
/// [`AgentPolicy`]: crate::dialogue::AgentPolicy
pub struct BonPolicy<S: ResponseScorer + Send + Sync> {
    pub policy: ToyPolicy,
    pub scorer: S,
    pub n: usize,
}

impl<S: ResponseScorer + Send + Sync> crate::dialogue::AgentPolicy for BonPolicy<S> {
    fn role(&self) -> Role {
        Role::Model
    }

    fn respond(
        &self,
        condition: &UserCondition,
        context: &[Turn],
        seed: u64,
    ) -> Result<Turn, crate::dialogue::AgentError> {
        let text = best_of_n(&self.policy, context, &self.scorer, self.n, seed);
        Ok(self.policy.materialize_turn(condition, context, &text))
    }
}

/// Concatenates the tree-mined and reward-ranked sets at a chosen ratio: the
/// larger side is truncated so that `|ranked| <= ratio * |mined|` (and vice
/// versa), preserving source tags. Ratio 1 yields a 1:1 mix by truncation.
pub fn compose_dataset(
    mined: Vec<PreferencePair>,
    ranked: Vec<PreferencePair>,
    ratio: f64,
) -> Vec<PreferencePair> {
    assert!(ratio > 0.0, "ratio must be positive");
    let mut mined = mined;
    let mut ranked = ranked;
    if !mined.is_empty() && !ranked.is_empty() {
        let max_ranked = ((mined.len() as f64) * ratio).floor() as usize;
        let max_mined = ((ranked.len() as f64) / ratio).ceil() as usize;
        ranked.truncate(max_ranked.max(1));
        mined.truncate(max_mined.max(1));
    }
    mined.extend(ranked);
    mined
}
