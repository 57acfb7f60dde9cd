//! Scripted help-seeker simulator for emotional-support conversations.
//!
//! The seeker carries an ordered list of concerns parsed from the user
//! condition and a patience budget. A model reply that names the current
//! concern lets the seeker move on; anything else costs one patience point.
//! Once every concern has been voiced the seeker closes the conversation
//! engaged; when patience runs out it leaves with concerns still unexpressed.
//!
//! `respond` is a pure function of (condition, context, seed): the seeker
//! replays the context to reconstruct its position instead of keeping state.

use crate::dialogue::{
    AgentError, AgentPolicy, DialogueError, Role, StructuredState, Turn, UserCondition,
};
use crate::features::{self, fnv1a64, tokenize};

/// Concern catalog recognized in condition descriptions.
pub const SUPPORT_TOPICS: [&str; 6] = ["work", "family", "health", "sleep", "money", "studies"];

pub const DEFAULT_PATIENCE: u32 = 4;

#[derive(Debug, Clone)]
pub struct ScriptedSeekerSimulator {
    patience: u32,
}

/// Snapshot of the seeker's position after replaying a context.
struct SeekerPosition<'a> {
    concerns: Vec<&'a str>,
    expressed: usize,
    patience_left: i64,
}

impl ScriptedSeekerSimulator {
    pub fn new(patience: u32) -> ScriptedSeekerSimulator {
        assert!(patience > 0, "patience must be positive");
        ScriptedSeekerSimulator { patience }
    }

    /// Ordered concern keys named in the description; falls back to a
    /// hash-picked topic when the description names none.
    pub fn concerns_of(condition: &UserCondition) -> Vec<&'static str> {
        let tokens = tokenize(&condition.description);
        let mut concerns: Vec<&'static str> = Vec::new();
        for token in &tokens {
            if let Some(&topic) = SUPPORT_TOPICS.iter().find(|&&t| t == token) {
                if !concerns.contains(&topic) {
                    concerns.push(topic);
                }
            }
        }
        if concerns.is_empty() {
            let idx = fnv1a64(0, condition.description.as_bytes()) as usize % SUPPORT_TOPICS.len();
            concerns.push(SUPPORT_TOPICS[idx]);
        }
        concerns
    }

    fn replay<'a>(
        &self,
        condition: &'a UserCondition,
        context: &[Turn],
    ) -> Result<SeekerPosition<'a>, DialogueError> {
        if let Some(last) = context.last() {
            if last.role != Role::Model {
                return Err(DialogueError::RoleViolation {
                    expected: Role::Model,
                    found: last.role,
                });
            }
        }
        let concerns = Self::concerns_of(condition);
        let mut expressed = 0usize;
        let mut patience_left = i64::from(self.patience);
        for turn in context.iter().filter(|t| t.role == Role::Model) {
            if expressed >= concerns.len() {
                break;
            }
            let tokens = tokenize(&turn.text);
            if tokens.iter().any(|tok| tok == concerns[expressed]) {
                expressed += 1;
            } else {
                patience_left -= 1;
            }
        }
        Ok(SeekerPosition {
            concerns,
            expressed,
            patience_left,
        })
    }

    fn concern_phrase(topic: &str, variant: u64) -> String {
        match variant % 3 {
            0 => format!("Honestly, {topic} keeps me up at night."),
            1 => format!("I can't stop thinking about {topic} lately."),
            _ => format!("Everything around {topic} has been weighing on me."),
        }
    }

    fn remaining_state(concerns: &[&str], expressed: usize) -> StructuredState {
        StructuredState {
            observations: vec![],
            feelings: concerns[expressed..]
                .iter()
                .map(|t| format!("anxious about {t}"))
                .collect(),
            needs: vec![format!("to be heard about {}", concerns[expressed.min(concerns.len() - 1)])],
            requests: vec![],
        }
    }
}

impl Default for ScriptedSeekerSimulator {
    fn default() -> Self {
        ScriptedSeekerSimulator::new(DEFAULT_PATIENCE)
    }
}

impl AgentPolicy for ScriptedSeekerSimulator {
    fn role(&self) -> Role {
        Role::User
    }

    fn respond(
        &self,
        condition: &UserCondition,
        context: &[Turn],
        seed: u64,
    ) -> Result<Turn, AgentError> {
        let pos = self.replay(condition, context)?;
        let turn_index = context.len();

        if pos.expressed >= pos.concerns.len() {
            let state = StructuredState {
                observations: vec!["talked through every concern".into()],
                ..Default::default()
            };
            return Ok(Turn::new(
                Role::User,
                "That really helped, I feel much better now. Goodbye.",
                Some(state),
            )?);
        }
        if pos.patience_left <= 0 {
            let state = Self::remaining_state(&pos.concerns, pos.expressed);
            return Ok(Turn::new(
                Role::User,
                "I don't think this is going anywhere. I have to go now. Goodbye.",
                Some(state),
            )?);
        }
        let variant = fnv1a64(seed, &(turn_index as u64).to_le_bytes());
        let text = Self::concern_phrase(pos.concerns[pos.expressed], variant);
        let state = Self::remaining_state(&pos.concerns, pos.expressed);
        Ok(Turn::new(Role::User, text, Some(state))?)
    }
}

/// Always-attentive policy: mirrors whatever catalog topic the last user
/// turn mentions. Serves as the engagement oracle in evaluations.
#[derive(Debug, Clone, Default)]
pub struct TopicMirrorPolicy;

impl AgentPolicy for TopicMirrorPolicy {
    fn role(&self) -> Role {
        Role::Model
    }

    fn respond(
        &self,
        _condition: &UserCondition,
        context: &[Turn],
        _seed: u64,
    ) -> Result<Turn, AgentError> {
        let last_user = context.iter().rev().find(|t| t.role == Role::User);
        let topic = last_user.and_then(|turn| {
            let tokens = features::tokenize(&turn.text);
            SUPPORT_TOPICS
                .iter()
                .find(|&&t| tokens.iter().any(|tok| tok == t))
                .copied()
        });
        let text = match topic {
            Some(t) => format!(
                "It sounds like {t} has been weighing on you. Tell me more about the {t} side of things."
            ),
            None => "I hear you. Please tell me more.".to_string(),
        };
        let state = topic.map(|t| StructuredState {
            feelings: vec![format!("anxious about {t}")],
            needs: vec![format!("to be heard about {t}")],
            ..Default::default()
        });
        Ok(Turn::new(Role::Model, text, state)?)
    }
}
