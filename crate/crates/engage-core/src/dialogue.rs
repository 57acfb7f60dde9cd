//! Core conversation data model: turns, conversations, user conditions,
//! structured user states and the agent-policy abstraction.
//!
//! Conversations are immutable values. Appending a turn yields a new
//! conversation; tree code shares prefixes through parent links instead of
//! copying turn lists.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DialogueError {
    #[error("turn text must be non-empty")]
    EmptyText,
    #[error("role violation: expected {expected:?}, found {found:?}")]
    RoleViolation { expected: Role, found: Role },
    #[error("condition description must be non-empty")]
    EmptyCondition,
    #[error("conversation must start with a user turn")]
    BadFirstTurn,
    #[error("invalid structured state block: {0}")]
    BadStateBlock(String),
}

/// Who authored an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Model,
}

impl Role {
    pub fn other(self) -> Role {
        match self {
            Role::User => Role::Model,
            Role::Model => Role::User,
        }
    }
}

/// Dialogue scenario a condition belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    EmotionalSupport,
    Persuasion,
}

/// A user's emotional/cognitive state as four lists of short phrases.
///
/// Phrase lists are order-preserving; use [`StructuredState::set_eq`] for
/// order-insensitive comparison in tests.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredState {
    #[serde(default)]
    pub observations: Vec<String>,
    #[serde(default)]
    pub feelings: Vec<String>,
    #[serde(default)]
    pub needs: Vec<String>,
    #[serde(default)]
    pub requests: Vec<String>,
}

const STATE_LABELS: [&str; 4] = ["Observations", "Feelings", "Needs", "Requests"];

impl StructuredState {
    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
            && self.feelings.is_empty()
            && self.needs.is_empty()
            && self.requests.is_empty()
    }

    fn fields(&self) -> [&Vec<String>; 4] {
        [&self.observations, &self.feelings, &self.needs, &self.requests]
    }

    /// Renders the labeled four-field block, one `Label: a; b` line per field.
    /// Phrases must not contain ';' or newlines.
    pub fn to_block(&self) -> String {
        STATE_LABELS
            .iter()
            .zip(self.fields())
            .map(|(label, phrases)| format!("{}: {}", label, phrases.join("; ")))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Parses the labeled four-field block format produced by [`to_block`].
    /// Labels are case-insensitive and must appear in order; empty fields are
    /// allowed.
    ///
    /// [`to_block`]: StructuredState::to_block
    pub fn from_block(block: &str) -> Result<StructuredState, DialogueError> {
        let mut lists: Vec<Vec<String>> = Vec::with_capacity(4);
        let mut lines = block.lines().filter(|l| !l.trim().is_empty());
        for label in STATE_LABELS {
            let line = lines
                .next()
                .ok_or_else(|| DialogueError::BadStateBlock(format!("missing line for {label}")))?;
            let (head, tail) = line
                .split_once(':')
                .ok_or_else(|| DialogueError::BadStateBlock(format!("no ':' in {line:?}")))?;
            if !head.trim().eq_ignore_ascii_case(label) {
                return Err(DialogueError::BadStateBlock(format!(
                    "expected label {label}, found {head:?}"
                )));
            }
            let phrases = tail
                .split(';')
                .map(|p| p.trim().to_string())
                .filter(|p| !p.is_empty())
                .collect();
            lists.push(phrases);
        }
        if lines.next().is_some() {
            return Err(DialogueError::BadStateBlock("trailing content".into()));
        }
        let mut it = lists.into_iter();
        Ok(StructuredState {
            observations: it.next().unwrap(),
            feelings: it.next().unwrap(),
            needs: it.next().unwrap(),
            requests: it.next().unwrap(),
        })
    }

    /// All phrases joined into one text, used as embedding input. Empty for
    /// an empty state, so embedding it yields the zero vector.
    pub fn phrase_text(&self) -> String {
        self.fields()
            .iter()
            .flat_map(|phrases| phrases.iter())
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join("; ")
    }

    /// Order-insensitive per-field set equality.
    pub fn set_eq(&self, other: &StructuredState) -> bool {
        fn sorted(v: &[String]) -> Vec<&String> {
            let mut s: Vec<&String> = v.iter().collect();
            s.sort();
            s
        }
        self.fields()
            .iter()
            .zip(other.fields())
            .all(|(a, b)| sorted(a) == sorted(b))
    }
}

/// One utterance with its author role and optional structured state
/// (simulator-authored on user turns, model-predicted on model turns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<StructuredState>,
}

impl Turn {
    pub fn new(
        role: Role,
        text: impl Into<String>,
        state: Option<StructuredState>,
    ) -> Result<Turn, DialogueError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DialogueError::EmptyText);
        }
        Ok(Turn { role, text, state })
    }

    pub fn user(text: impl Into<String>) -> Result<Turn, DialogueError> {
        Turn::new(Role::User, text, None)
    }

    pub fn model(text: impl Into<String>) -> Result<Turn, DialogueError> {
        Turn::new(Role::Model, text, None)
    }

    pub fn validate(&self) -> Result<(), DialogueError> {
        if self.text.trim().is_empty() {
            return Err(DialogueError::EmptyText);
        }
        Ok(())
    }
}

/// The condition seeding a user simulator: troubles/feelings/thoughts for
/// emotional support, a psychological/demographic profile for persuasion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserCondition {
    pub scenario: Scenario,
    pub description: String,
    pub id: String,
}

impl UserCondition {
    pub fn new(
        scenario: Scenario,
        description: impl Into<String>,
        id: impl Into<String>,
    ) -> Result<UserCondition, DialogueError> {
        let description = description.into();
        if description.trim().is_empty() {
            return Err(DialogueError::EmptyCondition);
        }
        Ok(UserCondition {
            scenario,
            description,
            id: id.into(),
        })
    }

    pub fn validate(&self) -> Result<(), DialogueError> {
        if self.description.trim().is_empty() {
            return Err(DialogueError::EmptyCondition);
        }
        Ok(())
    }
}

/// An ordered, strictly alternating sequence of turns under one condition.
/// The first turn, if any, is a user turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub condition: UserCondition,
    pub turns: Vec<Turn>,
}

impl Conversation {
    pub fn new(id: impl Into<String>, condition: UserCondition) -> Conversation {
        Conversation {
            id: id.into(),
            condition,
            turns: Vec::new(),
        }
    }

    /// Role the next appended turn must have.
    pub fn next_role(&self) -> Role {
        match self.turns.last() {
            None => Role::User,
            Some(last) => last.role.other(),
        }
    }

    /// Returns a new conversation with `turn` appended; `self` is unchanged.
    pub fn with_turn(&self, turn: Turn) -> Result<Conversation, DialogueError> {
        let expected = self.next_role();
        if turn.role != expected {
            return Err(DialogueError::RoleViolation {
                expected,
                found: turn.role,
            });
        }
        turn.validate()?;
        let mut next = self.clone();
        next.turns.push(turn);
        Ok(next)
    }

    /// Full turn history handed to the interactive policy. The last turn, if
    /// any, must be a user turn (a model cannot follow a model).
    pub fn context_for_model(&self) -> Result<&[Turn], DialogueError> {
        if let Some(last) = self.turns.last() {
            if last.role != Role::User {
                return Err(DialogueError::RoleViolation {
                    expected: Role::User,
                    found: last.role,
                });
            }
        }
        Ok(&self.turns)
    }

    /// Checks alternation, first-turn role, non-empty texts and the condition.
    pub fn validate(&self) -> Result<(), DialogueError> {
        self.condition.validate()?;
        validate_turn_sequence(&self.turns)
    }
}

/// Alternation check for a bare turn slice (as used by tree paths and
/// preference-pair contexts).
pub fn validate_turn_sequence(turns: &[Turn]) -> Result<(), DialogueError> {
    let mut expected = Role::User;
    for (i, turn) in turns.iter().enumerate() {
        if i == 0 && turn.role != Role::User {
            return Err(DialogueError::BadFirstTurn);
        }
        if turn.role != expected {
            return Err(DialogueError::RoleViolation {
                expected,
                found: turn.role,
            });
        }
        turn.validate()?;
        expected = expected.other();
    }
    Ok(())
}

/// Behavioral contract for every agent in the system: user simulators and
/// interactive policies alike.
///
/// `respond` must be a pure function of `(condition, context, seed)` for
/// scripted implementations; distinct seeds may yield distinct turns.
pub trait AgentPolicy: Send + Sync {
    /// Role of the turns this agent produces.
    fn role(&self) -> Role;

    fn respond(
        &self,
        condition: &UserCondition,
        context: &[Turn],
        seed: u64,
    ) -> Result<Turn, AgentError>;
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
}

/// Serializes one conversation as a single JSONL line (no trailing newline).
pub fn conversation_to_json_line(conv: &Conversation) -> Result<String, serde_json::Error> {
    serde_json::to_string(conv)
}

/// Parses and validates one JSONL conversation line.
pub fn conversation_from_json_line(line: &str) -> Result<Conversation, String> {
    let conv: Conversation = serde_json::from_str(line).map_err(|e| e.to_string())?;
    conv.validate().map_err(|e| e.to_string())?;
    Ok(conv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn condition() -> UserCondition {
        UserCondition::new(Scenario::EmotionalSupport, "worried about work", "c0").unwrap()
    }

    #[test]
    fn append_to_empty_starts_with_user() {
        let conv = Conversation::new("t", condition());
        let out = conv.with_turn(Turn::user("hi").unwrap()).unwrap();
        assert_eq!(out.turns.len(), 1);
        assert!(conv.turns.is_empty(), "original is unchanged");
    }

    #[test]
    fn append_same_role_is_role_violation() {
        let conv = Conversation::new("t", condition())
            .with_turn(Turn::user("hi").unwrap())
            .unwrap();
        let err = conv.with_turn(Turn::user("again").unwrap()).unwrap_err();
        assert!(matches!(err, DialogueError::RoleViolation { .. }));
    }

    #[test]
    fn append_alternates() {
        let conv = Conversation::new("t", condition())
            .with_turn(Turn::user("hi").unwrap())
            .unwrap()
            .with_turn(Turn::model("hello").unwrap())
            .unwrap();
        assert_eq!(conv.turns.len(), 2);
        assert_eq!(conv.turns[1].role, Role::Model);
    }

    #[test]
    fn context_for_model_cases() {
        let empty = Conversation::new("t", condition());
        assert!(empty.context_for_model().unwrap().is_empty());

        let three = empty
            .with_turn(Turn::user("u0").unwrap())
            .unwrap()
            .with_turn(Turn::model("a1").unwrap())
            .unwrap()
            .with_turn(Turn::user("u2").unwrap())
            .unwrap();
        assert_eq!(three.context_for_model().unwrap().len(), 3);

        let two = Conversation::new("t", condition())
            .with_turn(Turn::user("u0").unwrap())
            .unwrap()
            .with_turn(Turn::model("a1").unwrap())
            .unwrap();
        assert!(matches!(
            two.context_for_model(),
            Err(DialogueError::RoleViolation { .. })
        ));
    }

    #[test]
    fn empty_text_rejected() {
        assert_eq!(Turn::user("   ").unwrap_err(), DialogueError::EmptyText);
    }

    #[test]
    fn state_block_round_trip() {
        let state = StructuredState {
            observations: vec!["exams piling up".into()],
            feelings: vec!["anxious".into(), "tired".into()],
            needs: vec![],
            requests: vec!["someone to listen".into()],
        };
        let block = state.to_block();
        let parsed = StructuredState::from_block(&block).unwrap();
        assert_eq!(parsed, state);
    }

    #[test]
    fn state_block_rejects_garbage() {
        assert!(StructuredState::from_block("nope").is_err());
        assert!(StructuredState::from_block("Feelings: x\nObservations:").is_err());
    }

    #[test]
    fn jsonl_line_round_trip() {
        let conv = Conversation::new("c1", condition())
            .with_turn(Turn::new(
                Role::User,
                "hi",
                Some(StructuredState {
                    feelings: vec!["anxious".into()],
                    ..Default::default()
                }),
            )
            .unwrap())
            .unwrap();
        let line = conversation_to_json_line(&conv).unwrap();
        assert!(line.contains("\"role\":\"user\""));
        let back = conversation_from_json_line(&line).unwrap();
        assert_eq!(back, conv);
    }

    #[test]
    fn validator_rejects_model_first() {
        let turns = vec![Turn::model("a").unwrap()];
        assert!(matches!(
            validate_turn_sequence(&turns),
            Err(DialogueError::BadFirstTurn)
        ));
    }
}
