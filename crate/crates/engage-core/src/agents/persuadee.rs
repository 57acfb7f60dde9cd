//! Scripted persuadee simulator for persuasion-for-good conversations.
//!
//! The persuadee tracks a warmth meter in [0, W_max]. Rapport-building model
//! turns raise it (more when they touch the persuadee's own interest),
//! donation asks before enough rapport lower it, and the final donation is
//! 2 * warmth / W_max rounded to cents. Replay-based like the seeker, so
//! `respond` stays a pure function of (condition, context, seed).

use crate::dialogue::{AgentError, AgentPolicy, DialogueError, Role, Turn, UserCondition};
use crate::features::{fnv1a64, tokenize};

/// Tokens that mark a model turn as rapport-building.
pub const RAPPORT_KEYWORDS: [&str; 10] = [
    "children", "kids", "families", "community", "school", "education", "meals", "medicine",
    "emergencies", "disasters",
];

const ASK_KEYWORDS: [&str; 4] = ["donation", "donate", "pledge", "contribute"];

pub const W_MAX: i64 = 8;
pub const DEFAULT_INITIAL_WARMTH: i64 = 2;
pub const DEFAULT_ASK_THRESHOLD: i64 = 5;
pub const DEFAULT_PATIENCE: u32 = 8;

#[derive(Debug, Clone)]
pub struct ScriptedPersuadeeSimulator {
    initial_warmth: i64,
    ask_threshold: i64,
    patience: u32,
}

enum Disposition {
    Donate(i64),
    Refuse,
    LeaveWith(i64),
    Continue { warmth: i64 },
}

impl ScriptedPersuadeeSimulator {
    pub fn new(initial_warmth: i64, ask_threshold: i64, patience: u32) -> ScriptedPersuadeeSimulator {
        assert!((0..=W_MAX).contains(&initial_warmth));
        assert!(patience > 0);
        ScriptedPersuadeeSimulator {
            initial_warmth,
            ask_threshold,
            patience,
        }
    }

    /// Parses `(attribute, value)` pairs out of the condition description.
    pub fn profile_of(condition: &UserCondition) -> Vec<(String, String)> {
        let mut profile = Vec::new();
        for part in condition.description.split(['(', ')']) {
            if let Some((key, value)) = part.split_once(',') {
                let key = key.trim();
                let value = value.trim();
                if !key.is_empty() && !value.is_empty() {
                    profile.push((key.to_string(), value.to_string()));
                }
            }
        }
        profile
    }

    fn interest_of(condition: &UserCondition) -> Option<String> {
        Self::profile_of(condition)
            .into_iter()
            .find(|(k, _)| k == "cares_about")
            .map(|(_, v)| v.to_lowercase())
    }

    fn classify(text: &str, interest: Option<&str>) -> ModelMove {
        let tokens = tokenize(text);
        if ASK_KEYWORDS.iter().any(|k| tokens.iter().any(|t| t == k)) {
            return ModelMove::Ask;
        }
        let rapport = RAPPORT_KEYWORDS.iter().any(|k| tokens.iter().any(|t| t == k));
        if rapport {
            let matches_interest =
                interest.is_some_and(|i| tokenize(i).iter().any(|it| tokens.contains(it)));
            ModelMove::Rapport { matches_interest }
        } else {
            ModelMove::Filler
        }
    }

    fn replay(&self, condition: &UserCondition, context: &[Turn]) -> Result<Disposition, DialogueError> {
        if let Some(last) = context.last() {
            if last.role != Role::Model {
                return Err(DialogueError::RoleViolation {
                    expected: Role::Model,
                    found: last.role,
                });
            }
        }
        let interest = Self::interest_of(condition);
        let mut warmth = self.initial_warmth;
        let model_turns: Vec<&Turn> = context.iter().filter(|t| t.role == Role::Model).collect();
        for (seen, turn) in model_turns.iter().enumerate() {
            match Self::classify(&turn.text, interest.as_deref()) {
                ModelMove::Rapport { matches_interest } => {
                    warmth = (warmth + if matches_interest { 2 } else { 1 }).min(W_MAX);
                }
                ModelMove::Ask => {
                    if warmth >= self.ask_threshold {
                        return Ok(Disposition::Donate(warmth));
                    }
                    warmth -= 1;
                    if warmth <= 0 {
                        return Ok(Disposition::Refuse);
                    }
                }
                ModelMove::Filler => {}
            }
            if seen + 1 >= self.patience as usize {
                return Ok(Disposition::LeaveWith(warmth.max(0)));
            }
        }
        Ok(Disposition::Continue { warmth })
    }

    /// Donation in dollars for a warmth level: 2 * warmth / W_max, exact in
    /// cents since W_max divides 200.
    fn donation_for(warmth: i64) -> f64 {
        (warmth.clamp(0, W_MAX) as f64) * 2.0 / (W_MAX as f64)
    }

    fn continue_phrase(warmth: i64, interest: Option<&str>, variant: u64) -> String {
        if warmth < 3 {
            match variant % 2 {
                0 => "I don't know, charities often feel like a scam to me.".to_string(),
                _ => "I'm skeptical. Money is tight and I worry it would be a waste.".to_string(),
            }
        } else if warmth < DEFAULT_ASK_THRESHOLD {
            let interest = interest.unwrap_or("children");
            match variant % 2 {
                0 => format!(
                    "That's interesting. I care about {interest}, so tell me how this helps."
                ),
                _ => format!("Good to know. Anything specific about {interest}?"),
            }
        } else {
            match variant % 2 {
                0 => "That's wonderful to hear. This cause sounds trustworthy.".to_string(),
                _ => "I'm impressed, this all sounds great.".to_string(),
            }
        }
    }
}

enum ModelMove {
    Rapport { matches_interest: bool },
    Ask,
    Filler,
}

impl Default for ScriptedPersuadeeSimulator {
    fn default() -> Self {
        ScriptedPersuadeeSimulator::new(
            DEFAULT_INITIAL_WARMTH,
            DEFAULT_ASK_THRESHOLD,
            DEFAULT_PATIENCE,
        )
    }
}

impl AgentPolicy for ScriptedPersuadeeSimulator {
    fn role(&self) -> Role {
        Role::User
    }

    fn respond(
        &self,
        condition: &UserCondition,
        context: &[Turn],
        seed: u64,
    ) -> Result<Turn, AgentError> {
        if context.is_empty() {
            let variant = fnv1a64(seed, b"opening");
            let text = match variant % 2 {
                0 => "Hi. I got your message about the charity, what is this about?",
                _ => "Hello. You mentioned a charity drive, I have a few minutes.",
            };
            return Ok(Turn::user(text)?);
        }
        let disposition = self.replay(condition, context)?;
        let turn_index = context.len() as u64;
        let variant = fnv1a64(seed, &turn_index.to_le_bytes());
        let text = match disposition {
            Disposition::Donate(warmth) => format!(
                "You've convinced me. I think I will donate ${:.2}.",
                Self::donation_for(warmth)
            ),
            Disposition::Refuse => {
                "Please stop pushing. I've decided not to donate. $0 from me.".to_string()
            }
            Disposition::LeaveWith(warmth) => format!(
                "I need to run. I'll donate ${:.2}, that's the best I can do.",
                Self::donation_for(warmth)
            ),
            Disposition::Continue { warmth } => {
                Self::continue_phrase(warmth, Self::interest_of(condition).as_deref(), variant)
            }
        };
        Ok(Turn::user(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::Scenario;
    use crate::engagement::EngagementDetector;

    fn condition(desc: &str) -> UserCondition {
        UserCondition::new(Scenario::Persuasion, desc, "p0").unwrap()
    }

    fn rapport(interest: bool) -> Turn {
        if interest {
            Turn::model("Every dollar buys school supplies so children can keep learning.").unwrap()
        } else {
            Turn::model("They also rebuild community centers after disasters.").unwrap()
        }
    }

    fn ask() -> Turn {
        Turn::model("Would you consider making a small donation today?").unwrap()
    }

    #[test]
    fn profile_parses_attribute_pairs() {
        let c = condition("(age, 34); (cares_about, children); (extrovert, 2.33)");
        let profile = ScriptedPersuadeeSimulator::profile_of(&c);
        assert_eq!(profile.len(), 3);
        assert_eq!(profile[1], ("cares_about".to_string(), "children".to_string()));
    }

    #[test]
    fn rapport_then_ask_donates_proportionally_to_warmth() {
        let sim = ScriptedPersuadeeSimulator::default();
        let c = condition("(cares_about, children)");
        // warmth 2 -> +2 (interest) -> +2 -> 6, ask -> donate 2*6/8 = $1.50
        let mut context = vec![sim.respond(&c, &[], 1).unwrap()];
        for _ in 0..2 {
            context.push(rapport(true));
            context.push(sim.respond(&c, &context, 1).unwrap());
        }
        context.push(ask());
        let terminal = sim.respond(&c, &context, 1).unwrap();
        assert!(terminal.text.contains("$1.50"), "got: {}", terminal.text);
        let outcome = EngagementDetector::shipped()
            .detect_donation_engagement(&terminal)
            .unwrap();
        assert!(outcome.terminated && outcome.engaged);
        assert_eq!(outcome.level, 0.75);
    }

    #[test]
    fn interest_rapport_warms_faster_than_generic() {
        let sim = ScriptedPersuadeeSimulator::default();
        let c = condition("(cares_about, children)");
        let opening = sim.respond(&c, &[], 1).unwrap();

        let mut fast = vec![opening.clone(), rapport(true)];
        fast.push(sim.respond(&c, &fast, 1).unwrap());
        fast.push(rapport(true));
        fast.push(sim.respond(&c, &fast, 1).unwrap());
        fast.push(ask());
        let fast_terminal = sim.respond(&c, &fast, 1).unwrap();

        let mut slow = vec![opening, rapport(false)];
        slow.push(sim.respond(&c, &slow, 1).unwrap());
        slow.push(rapport(false));
        slow.push(sim.respond(&c, &slow, 1).unwrap());
        slow.push(ask());
        let slow_terminal = sim.respond(&c, &slow, 1).unwrap();

        assert!(fast_terminal.text.contains("$1.50"));
        // warmth 2 -> 3 -> 4 < threshold: the premature ask costs a point.
        assert!(!slow_terminal.text.contains('$') || slow_terminal.text.contains("$0"));
    }

    #[test]
    fn premature_asks_drive_refusal() {
        let sim = ScriptedPersuadeeSimulator::default();
        let c = condition("(cares_about, children)");
        let mut context = vec![sim.respond(&c, &[], 1).unwrap()];
        for _ in 0..2 {
            context.push(ask());
            context.push(sim.respond(&c, &context, 1).unwrap());
        }
        // warmth 2 -> 1 -> 0: refusal.
        let terminal = context.last().unwrap();
        let outcome = EngagementDetector::shipped()
            .detect_donation_engagement(terminal)
            .unwrap();
        assert!(outcome.terminated);
        assert!(!outcome.engaged);
        assert_eq!(outcome.level, 0.0);
    }

    #[test]
    fn patience_exhaustion_leaves_with_current_warmth() {
        let sim = ScriptedPersuadeeSimulator::new(2, 5, 3);
        let c = condition("(cares_about, children)");
        let mut context = vec![sim.respond(&c, &[], 1).unwrap()];
        for _ in 0..3 {
            context.push(Turn::model("How has your week been going?").unwrap());
            context.push(sim.respond(&c, &context, 1).unwrap());
        }
        let terminal = &context[context.len() - 1];
        assert!(terminal.text.contains("$0.50"), "warmth 2 of 8: {}", terminal.text);
        let outcome = EngagementDetector::shipped()
            .detect_donation_engagement(terminal)
            .unwrap();
        assert!(outcome.terminated);
        assert_eq!(outcome.level, 0.25);
    }

    #[test]
    fn terminal_amounts_are_parseable_and_bounded() {
        let detector = EngagementDetector::shipped();
        let sim = ScriptedPersuadeeSimulator::default();
        let c = condition("(cares_about, children)");
        // Max-warmth path: three interest rapports saturate at W_MAX.
        let mut context = vec![sim.respond(&c, &[], 2).unwrap()];
        for _ in 0..3 {
            context.push(rapport(true));
            context.push(sim.respond(&c, &context, 2).unwrap());
        }
        context.push(ask());
        let terminal = sim.respond(&c, &context, 2).unwrap();
        let outcome = detector.detect_donation_engagement(&terminal).unwrap();
        assert_eq!(outcome.level, 1.0, "saturated warmth donates $2: {}", terminal.text);
    }

    #[test]
    fn responses_are_deterministic_per_seed() {
        let sim = ScriptedPersuadeeSimulator::default();
        let c = condition("(cares_about, children)");
        let context = vec![
            sim.respond(&c, &[], 9).unwrap(),
            rapport(false),
        ];
        assert_eq!(
            sim.respond(&c, &context, 9).unwrap(),
            sim.respond(&c, &context, 9).unwrap()
        );
    }
}
