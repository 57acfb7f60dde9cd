//! Interactive evaluation: run seeded conversations between a user simulator
//! and a policy to termination (or a turn cap) and aggregate engagement
//! metrics.

use engage_core::dialogue::{AgentPolicy, UserCondition};
use engage_core::engagement::{EngagementDetector, EngagementOutcome, MAX_DONATION};
use engage_core::mcts::derive_seed;
use engage_core::Scenario;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: usize,
    pub condition_id: String,
    pub seed: u64,
    /// Total utterances in the conversation.
    pub turns: usize,
    pub terminated: bool,
    pub engaged: bool,
    pub level: f64,
    /// Engagement level scaled back to dollars (0 outside persuasion).
    pub donation: f64,
    pub valid: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Aggregated interactive-evaluation results. `mean_turns` covers engaging
/// interactions only (absent when none engaged); `mean_turns_overall` covers
/// every valid episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub engaged_rate: f64,
    pub mean_donation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_turns: Option<f64>,
    pub mean_turns_overall: f64,
    pub invalid_episodes: usize,
    pub per_episode: Vec<EpisodeRecord>,
}

impl EvalReport {
    /// Recomputes the headline numbers from the per-episode records; used to
    /// check reports stay internally consistent.
    pub fn recompute(records: Vec<EpisodeRecord>) -> EvalReport {
        let episodes = records.len();
        let engaged: Vec<&EpisodeRecord> = records.iter().filter(|r| r.engaged).collect();
        let valid: Vec<&EpisodeRecord> = records.iter().filter(|r| r.valid).collect();
        let engaged_rate = engaged.len() as f64 / episodes as f64;
        let mean_donation = records.iter().map(|r| r.donation).sum::<f64>() / episodes as f64;
        let mean_turns = if engaged.is_empty() {
            None
        } else {
            Some(engaged.iter().map(|r| r.turns as f64).sum::<f64>() / engaged.len() as f64)
        };
        let mean_turns_overall = if valid.is_empty() {
            0.0
        } else {
            valid.iter().map(|r| r.turns as f64).sum::<f64>() / valid.len() as f64
        };
        EvalReport {
            episodes,
            engaged_rate,
            mean_donation,
            mean_turns,
            mean_turns_overall,
            invalid_episodes: episodes - valid.len(),
            per_episode: records,
        }
    }
}

/// Runs one conversation to termination or the turn cap. Pure in
/// (condition, seed) for scripted agents.
pub fn run_episode(
    user_sim: &dyn AgentPolicy,
    policy: &dyn AgentPolicy,
    condition: &UserCondition,
    detector: &EngagementDetector,
    turn_cap: usize,
    seed: u64,
) -> Result<(usize, EngagementOutcome), String> {
    let mut turns = Vec::new();
    loop {
        let user_seed = derive_seed(seed, "episode-user", turns.len() as u64, 0);
        let user_turn = user_sim
            .respond(condition, &turns, user_seed)
            .map_err(|e| e.to_string())?;
        let outcome = detector
            .detect(condition.scenario, &user_turn)
            .map_err(|e| e.to_string())?;
        turns.push(user_turn);
        if outcome.terminated {
            return Ok((turns.len(), outcome));
        }
        if turns.len() >= turn_cap {
            return Ok((turns.len(), EngagementOutcome::NOT_TERMINATED));
        }
        let model_seed = derive_seed(seed, "episode-model", turns.len() as u64, 0);
        let model_turn = policy
            .respond(condition, &turns, model_seed)
            .map_err(|e| e.to_string())?;
        turns.push(model_turn);
        if turns.len() >= turn_cap {
            return Ok((turns.len(), EngagementOutcome::NOT_TERMINATED));
        }
    }
}

/// Runs `episodes` seeded conversations, cycling through the conditions.
/// Episodes run in parallel; records are collected in episode order so the
/// report is deterministic. Agent failures mark the episode invalid instead
/// of aborting the evaluation.
pub fn evaluate(
    user_sim: &dyn AgentPolicy,
    policy: &dyn AgentPolicy,
    conditions: &[UserCondition],
    scenario: Scenario,
    detector: &EngagementDetector,
    episodes: usize,
    turn_cap: usize,
    seed: u64,
) -> EvalReport {
    let records: Vec<EpisodeRecord> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let condition = &conditions[i % conditions.len()];
            let episode_seed = derive_seed(seed, "episode", i as u64, 0);
            match run_episode(user_sim, policy, condition, detector, turn_cap, episode_seed) {
                Ok((turns, outcome)) => EpisodeRecord {
                    index: i,
                    condition_id: condition.id.clone(),
                    seed: episode_seed,
                    turns,
                    terminated: outcome.terminated,
                    engaged: outcome.engaged,
                    level: outcome.level,
                    donation: if scenario == Scenario::Persuasion {
                        outcome.level * MAX_DONATION
                    } else {
                        0.0
                    },
                    valid: true,
                    error: None,
                },
                Err(message) => EpisodeRecord {
                    index: i,
                    condition_id: condition.id.clone(),
                    seed: episode_seed,
                    turns: 0,
                    terminated: false,
                    engaged: false,
                    level: 0.0,
                    donation: 0.0,
                    valid: false,
                    error: Some(message),
                },
            }
        })
        .collect();
    EvalReport::recompute(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use engage_core::agents::{ScriptedSeekerSimulator, TopicMirrorPolicy, ToyPolicy};
    use engage_core::dialogue::{AgentError, Role, Turn};

    fn conditions() -> Vec<UserCondition> {
        vec![
            UserCondition::new(Scenario::EmotionalSupport, "worried about work and sleep", "c0")
                .unwrap(),
            UserCondition::new(Scenario::EmotionalSupport, "family and money trouble", "c1")
                .unwrap(),
        ]
    }

    #[test]
    fn mirror_policy_engages_every_episode() {
        let report = evaluate(
            &ScriptedSeekerSimulator::default(),
            &TopicMirrorPolicy,
            &conditions(),
            Scenario::EmotionalSupport,
            &EngagementDetector::shipped(),
            64,
            50,
            42,
        );
        assert_eq!(report.engaged_rate, 1.0);
        assert_eq!(report.invalid_episodes, 0);
        assert!(report.mean_turns.is_some());
    }

    /// A policy that never addresses anything: every episode must hit the
    /// turn cap without engagement.
    struct StonewallPolicy;
    impl AgentPolicy for StonewallPolicy {
        fn role(&self) -> Role {
            Role::Model
        }
        fn respond(
            &self,
            _c: &UserCondition,
            _ctx: &[Turn],
            _seed: u64,
        ) -> Result<Turn, AgentError> {
            Ok(Turn::model("Let us consider the abstract nature of things.").unwrap())
        }
    }

    #[test]
    fn never_engaging_policy_hits_turn_cap_with_zero_rate() {
        // Huge patience so the seeker never walks out on its own.
        let report = evaluate(
            &ScriptedSeekerSimulator::new(1000),
            &StonewallPolicy,
            &conditions(),
            Scenario::EmotionalSupport,
            &EngagementDetector::shipped(),
            16,
            20,
            7,
        );
        assert_eq!(report.engaged_rate, 0.0);
        assert!(report.mean_turns.is_none());
        for record in &report.per_episode {
            assert_eq!(record.turns, 20, "episode ran to the cap");
            assert!(!record.terminated);
        }
    }

    /// An agent that always fails, to exercise invalid-episode accounting.
    struct BrokenPolicy;
    impl AgentPolicy for BrokenPolicy {
        fn role(&self) -> Role {
            Role::Model
        }
        fn respond(
            &self,
            _c: &UserCondition,
            _ctx: &[Turn],
            _seed: u64,
        ) -> Result<Turn, AgentError> {
            Err(AgentError::BackendUnavailable("down".into()))
        }
    }

    #[test]
    fn agent_failures_mark_episodes_invalid_without_aborting() {
        let report = evaluate(
            &ScriptedSeekerSimulator::default(),
            &BrokenPolicy,
            &conditions(),
            Scenario::EmotionalSupport,
            &EngagementDetector::shipped(),
            8,
            20,
            7,
        );
        assert_eq!(report.invalid_episodes, 8);
        assert_eq!(report.engaged_rate, 0.0);
        assert!(report.per_episode.iter().all(|r| r.error.is_some()));
    }

    #[test]
    fn evaluation_is_deterministic_for_equal_seeds() {
        let policy = ToyPolicy::support_default();
        let run = || {
            evaluate(
                &ScriptedSeekerSimulator::default(),
                &policy,
                &conditions(),
                Scenario::EmotionalSupport,
                &EngagementDetector::shipped(),
                64,
                50,
                9,
            )
        };
        let a = serde_json::to_string(&run()).unwrap();
        let b = serde_json::to_string(&run()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn headline_numbers_recompute_from_records() {
        let policy = ToyPolicy::support_default();
        let report = evaluate(
            &ScriptedSeekerSimulator::default(),
            &policy,
            &conditions(),
            Scenario::EmotionalSupport,
            &EngagementDetector::shipped(),
            128,
            50,
            3,
        );
        let rebuilt = EvalReport::recompute(report.per_episode.clone());
        assert_eq!(rebuilt.engaged_rate, report.engaged_rate);
        assert_eq!(rebuilt.mean_donation, report.mean_donation);
        assert_eq!(rebuilt.mean_turns, report.mean_turns);
    }
}
