//! End-of-conversation detection and engagement outcomes.
//!
//! Emotional support: a terminal user turn is engaged when the structured
//! state carries no remaining negative feelings or needs. Persuasion: the
//! decided donation amount in the last user utterance sets the engagement
//! level as amount/2, with $2 the maximum donation.

use crate::dialogue::{Role, Scenario, Turn};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngagementError {
    #[error("detector requires a user turn, got {0:?}")]
    NotUserTurn(Role),
    #[error("terminal turn carries no structured state (simulator contract violation)")]
    MissingState,
    #[error("conflicting dollar amounts in one utterance: ${first} vs ${second}")]
    AmbiguousAmount { first: f64, second: f64 },
    #[error("bad pattern on line {line}: {msg}")]
    BadPattern { line: usize, msg: String },
}

/// Terminal signal of a conversation.
///
/// Invariants: `engaged` implies `terminated`; `level > 0` implies `engaged`.
/// Emotional-support levels are 0 or 1; persuasion levels are donation/2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngagementOutcome {
    pub terminated: bool,
    pub engaged: bool,
    pub level: f64,
}

impl EngagementOutcome {
    pub const NOT_TERMINATED: EngagementOutcome = EngagementOutcome {
        terminated: false,
        engaged: false,
        level: 0.0,
    };

    pub fn validate(&self) -> bool {
        (!self.engaged || self.terminated)
            && (self.level <= 0.0 || self.engaged)
            && (0.0..=1.0).contains(&self.level)
    }
}

/// An ordered list of regexes loaded from plain text, one pattern per line
/// with '#' comments.
#[derive(Debug, Clone)]
pub struct PatternSet {
    patterns: Vec<Regex>,
}

impl PatternSet {
    pub fn from_lines(text: &str) -> Result<PatternSet, EngagementError> {
        let mut patterns = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let re = Regex::new(line).map_err(|e| EngagementError::BadPattern {
                line: idx + 1,
                msg: e.to_string(),
            })?;
            patterns.push(re);
        }
        Ok(PatternSet { patterns })
    }

    pub fn matches(&self, text: &str) -> bool {
        self.patterns.iter().any(|re| re.is_match(text))
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }
}

/// Word list applied to structured-state phrases by substring matching after
/// lowercasing.
#[derive(Debug, Clone)]
pub struct NegativeLexicon {
    markers: Vec<String>,
}

impl NegativeLexicon {
    pub fn from_lines(text: &str) -> NegativeLexicon {
        let markers = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        NegativeLexicon { markers }
    }

    pub fn matches_phrase(&self, phrase: &str) -> bool {
        let lower = phrase.to_lowercase();
        self.markers.iter().any(|m| lower.contains(m))
    }

    pub fn len(&self) -> usize {
        self.markers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.markers.is_empty()
    }
}

/// Detector pair for both scenarios, with configurable patterns.
#[derive(Debug, Clone)]
pub struct EngagementDetector {
    es_termination: PatternSet,
    negative: NegativeLexicon,
    donation_statements: PatternSet,
    refusals: PatternSet,
    amount: Regex,
}

pub const MAX_DONATION: f64 = 2.0;

impl EngagementDetector {
    pub fn new(
        es_termination: PatternSet,
        negative: NegativeLexicon,
        donation_statements: PatternSet,
        refusals: PatternSet,
    ) -> EngagementDetector {
        EngagementDetector {
            es_termination,
            negative,
            donation_statements,
            refusals,
            amount: Regex::new(r"\$\s*([0-9]+(?:\.[0-9]{1,2})?)").expect("amount regex"),
        }
    }

    /// Detector built from the shipped default pattern files.
    pub fn shipped() -> EngagementDetector {
        EngagementDetector::new(
            PatternSet::from_lines(include_str!("../data/es_termination.txt"))
                .expect("shipped termination patterns"),
            NegativeLexicon::from_lines(include_str!("../data/negative_markers.txt")),
            PatternSet::from_lines(include_str!("../data/donation_statements.txt"))
                .expect("shipped donation patterns"),
            PatternSet::from_lines(include_str!("../data/refusal_statements.txt"))
                .expect("shipped refusal patterns"),
        )
    }

    /// Dispatches on scenario.
    pub fn detect(
        &self,
        scenario: Scenario,
        turn: &Turn,
    ) -> Result<EngagementOutcome, EngagementError> {
        match scenario {
            Scenario::EmotionalSupport => self.detect_support_engagement(turn),
            Scenario::Persuasion => self.detect_donation_engagement(turn),
        }
    }

    /// Emotional support: terminated when a termination marker matches;
    /// engaged when the state carries no negative feelings or needs.
    pub fn detect_support_engagement(
        &self,
        turn: &Turn,
    ) -> Result<EngagementOutcome, EngagementError> {
        if turn.role != Role::User {
            return Err(EngagementError::NotUserTurn(turn.role));
        }
        if !self.es_termination.matches(&turn.text) {
            return Ok(EngagementOutcome::NOT_TERMINATED);
        }
        let state = turn.state.as_ref().ok_or(EngagementError::MissingState)?;
        let engaged = !state
            .feelings
            .iter()
            .chain(state.needs.iter())
            .any(|phrase| self.negative.matches_phrase(phrase));
        Ok(EngagementOutcome {
            terminated: true,
            engaged,
            level: if engaged { 1.0 } else { 0.0 },
        })
    }

    /// Persuasion: terminated on an explicit donation statement (with a
    /// dollar amount) or a refusal; level is min(amount, 2)/2. Amounts above
    /// $2 are clamped with a warning in the run log.
    pub fn detect_donation_engagement(
        &self,
        turn: &Turn,
    ) -> Result<EngagementOutcome, EngagementError> {
        if turn.role != Role::User {
            return Err(EngagementError::NotUserTurn(turn.role));
        }
        let amounts: Vec<f64> = self
            .amount
            .captures_iter(&turn.text)
            .filter_map(|cap| cap[1].parse().ok())
            .collect();
        if let (Some(&first), Some(&last)) = (amounts.first(), amounts.last()) {
            if amounts.iter().any(|&a| a != first) {
                let second = *amounts.iter().find(|&&a| a != first).unwrap();
                return Err(EngagementError::AmbiguousAmount { first, second });
            }
            let _ = last;
        }
        let donated = !amounts.is_empty() && self.donation_statements.matches(&turn.text);
        let refused = self.refusals.matches(&turn.text);
        if !donated && !refused {
            return Ok(EngagementOutcome::NOT_TERMINATED);
        }
        let mut amount = if donated { *amounts.last().unwrap() } else { 0.0 };
        if amount > MAX_DONATION {
            log::warn!(
                "donation ${amount} exceeds the ${MAX_DONATION} maximum; clamping (utterance: {:?})",
                turn.text
            );
            amount = MAX_DONATION;
        }
        let level = amount / MAX_DONATION;
        Ok(EngagementOutcome {
            terminated: true,
            engaged: level > 0.0,
            level,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::StructuredState;

    fn detector() -> EngagementDetector {
        EngagementDetector::shipped()
    }

    fn user_turn(text: &str, state: Option<StructuredState>) -> Turn {
        Turn::new(Role::User, text, state).unwrap()
    }

    #[test]
    fn support_terminal_with_clear_state_is_engaged() {
        let turn = user_turn(
            "That really helped. Goodbye!",
            Some(StructuredState::default()),
        );
        let out = detector().detect_support_engagement(&turn).unwrap();
        assert_eq!(
            out,
            EngagementOutcome { terminated: true, engaged: true, level: 1.0 }
        );
    }

    #[test]
    fn support_terminal_with_negative_feeling_is_not_engaged() {
        let state = StructuredState {
            feelings: vec!["anxious".into()],
            ..Default::default()
        };
        let turn = user_turn("Thanks, goodbye.", Some(state));
        let out = detector().detect_support_engagement(&turn).unwrap();
        assert_eq!(
            out,
            EngagementOutcome { terminated: true, engaged: false, level: 0.0 }
        );
    }

    #[test]
    fn support_mid_conversation_turn_is_not_terminated() {
        let turn = user_turn("Work has been hard lately.", Some(StructuredState::default()));
        let out = detector().detect_support_engagement(&turn).unwrap();
        assert_eq!(out, EngagementOutcome::NOT_TERMINATED);
    }

    #[test]
    fn support_terminal_without_state_is_contract_violation() {
        let turn = user_turn("Goodbye.", None);
        assert!(matches!(
            detector().detect_support_engagement(&turn),
            Err(EngagementError::MissingState)
        ));
    }

    #[test]
    fn support_rejects_model_turn() {
        let turn = Turn::model("goodbye").unwrap();
        assert!(matches!(
            detector().detect_support_engagement(&turn),
            Err(EngagementError::NotUserTurn(Role::Model))
        ));
    }

    #[test]
    fn donation_of_two_dollars_is_full_engagement() {
        let turn = user_turn("I think I will donate $2.", None);
        let out = detector().detect_donation_engagement(&turn).unwrap();
        assert_eq!(
            out,
            EngagementOutcome { terminated: true, engaged: true, level: 1.0 }
        );
    }

    #[test]
    fn donation_of_fifty_cents_is_quarter_level() {
        let turn = user_turn("I'll give $0.50", None);
        let out = detector().detect_donation_engagement(&turn).unwrap();
        assert_eq!(
            out,
            EngagementOutcome { terminated: true, engaged: true, level: 0.25 }
        );
    }

    #[test]
    fn donation_small_talk_is_not_terminated() {
        let turn = user_turn("Thanks for the info!", None);
        let out = detector().detect_donation_engagement(&turn).unwrap();
        assert_eq!(out, EngagementOutcome::NOT_TERMINATED);
    }

    #[test]
    fn refusal_terminates_with_zero_level() {
        let turn = user_turn("Sorry, I won't be donating today.", None);
        let out = detector().detect_donation_engagement(&turn).unwrap();
        assert_eq!(
            out,
            EngagementOutcome { terminated: true, engaged: false, level: 0.0 }
        );
    }

    #[test]
    fn conflicting_amounts_are_ambiguous() {
        let turn = user_turn("I'll donate $1, no wait, $2.", None);
        match detector().detect_donation_engagement(&turn) {
            Err(EngagementError::AmbiguousAmount { first, second }) => {
                assert_eq!(first, 1.0);
                assert_eq!(second, 2.0);
            }
            other => panic!("expected AmbiguousAmount, got {other:?}"),
        }
    }

    #[test]
    fn repeated_equal_amounts_are_fine() {
        let turn = user_turn("I'll donate $1. Yes, $1 it is.", None);
        let out = detector().detect_donation_engagement(&turn).unwrap();
        assert_eq!(out.level, 0.5);
    }

    #[test]
    fn oversized_amounts_clamp_to_level_one() {
        let turn = user_turn("I'll donate $5!", None);
        let out = detector().detect_donation_engagement(&turn).unwrap();
        assert_eq!(
            out,
            EngagementOutcome { terminated: true, engaged: true, level: 1.0 }
        );
    }

    #[test]
    fn clamp_is_monotone_over_amounts() {
        let det = detector();
        for cents in (0..=600).step_by(7) {
            let amount = cents as f64 / 100.0;
            let turn = user_turn(&format!("I will donate ${amount:.2}."), None);
            let out = det.detect_donation_engagement(&turn).unwrap();
            let expected = amount.min(MAX_DONATION) / MAX_DONATION;
            assert_eq!(out.level, expected, "amount {amount}");
            assert!((0.0..=1.0).contains(&out.level));
            assert!(out.validate());
        }
    }

    #[test]
    fn shipped_lexicons_are_populated() {
        let det = detector();
        assert!(det.negative.len() >= 100);
        assert!(det.es_termination.len() >= 5);
        assert!(!det.donation_statements.is_empty());
        assert!(!det.refusals.is_empty());
    }
}
