//! Pruning-criterion primitives: text embeddings with cosine similarity for
//! state alignment, and lexicon sentiment with discounted accumulation.

use crate::dialogue::StructuredState;
use crate::features;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("cosine undefined for a zero vector")]
    ZeroVector,
    #[error("vector dimensions differ: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("accumulator called out of sequence: expected index {expected}, got {got}")]
    OrderViolation { expected: usize, got: usize },
    #[error("bad lexicon line {line}: {msg}")]
    BadLexicon { line: usize, msg: String },
}

/// Deterministic text-to-vector function. Implementations must map equal
/// texts to identical vectors and empty text to the zero vector.
pub trait EmbeddingFn: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Hashed bag-of-words embedding with L2 normalization. Buckets are filled
/// with integer token counts before normalizing, so construction is exact.
#[derive(Debug, Clone)]
pub struct HashedBowEmbedder {
    dim: usize,
    hash_seed: u64,
}

impl HashedBowEmbedder {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(dim: usize, hash_seed: u64) -> HashedBowEmbedder {
        assert!(dim > 0, "embedding dimension must be positive");
        HashedBowEmbedder { dim, hash_seed }
    }
}

impl Default for HashedBowEmbedder {
    fn default() -> Self {
        HashedBowEmbedder::new(Self::DEFAULT_DIM, 0)
    }
}

impl EmbeddingFn for HashedBowEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let counts = features::hashed_counts(self.hash_seed, text, self.dim);
        let mut v: Vec<f64> = counts.into_iter().map(f64::from).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }
}

/// Cosine similarity in [-1, 1]. A zero vector on either side is an error;
/// pruning treats that pair as negative infinity (pruned first).
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, ScoringError> {
    if a.len() != b.len() {
        return Err(ScoringError::DimensionMismatch { a: a.len(), b: b.len() });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(ScoringError::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine between the simulator's state at the previous user turn and the
/// state the model predicted at the current turn. Higher means the trajectory
/// tracks the user better.
pub fn state_alignment(
    sim_state: &StructuredState,
    predicted_state: &StructuredState,
    embed: &dyn EmbeddingFn,
) -> Result<f64, ScoringError> {
    let a = embed.embed(&sim_state.phrase_text());
    let b = embed.embed(&predicted_state.phrase_text());
    cosine(&a, &b)
}

/// Term-valence lexicon with case-insensitive lookup and a single-token
/// negation flip ("not great" scores as negated "great").
#[derive(Debug, Clone)]
pub struct SentimentLexicon {
    valences: HashMap<String, f64>,
    alpha: f64,
}

const NEGATIONS: [&str; 14] = [
    "not", "no", "never", "none", "cannot", "can't", "don't", "doesn't", "didn't", "won't",
    "wouldn't", "isn't", "aren't", "hardly",
];

impl SentimentLexicon {
    pub const DEFAULT_ALPHA: f64 = 15.0;

    /// Parses TSV lines of `term<TAB>valence` with '#' comments. Valences
    /// must lie in [-1, 1].
    pub fn from_tsv(tsv: &str, alpha: f64) -> Result<SentimentLexicon, ScoringError> {
        let mut valences = HashMap::new();
        for (idx, raw) in tsv.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (term, value) = line.split_once('\t').ok_or(ScoringError::BadLexicon {
                line: idx + 1,
                msg: "expected term<TAB>valence".into(),
            })?;
            let valence: f64 = value.trim().parse().map_err(|e| ScoringError::BadLexicon {
                line: idx + 1,
                msg: format!("bad valence: {e}"),
            })?;
            if !(-1.0..=1.0).contains(&valence) {
                return Err(ScoringError::BadLexicon {
                    line: idx + 1,
                    msg: format!("valence {valence} outside [-1, 1]"),
                });
            }
            valences.insert(term.trim().to_lowercase(), valence);
        }
        Ok(SentimentLexicon { valences, alpha })
    }

    /// Built-in lexicon at the default normalization.
    pub fn shipped() -> SentimentLexicon {
        SentimentLexicon::from_tsv(
            include_str!("../data/sentiment_lexicon.tsv"),
            Self::DEFAULT_ALPHA,
        )
        .expect("shipped lexicon parses")
    }

    pub fn valence(&self, term: &str) -> Option<f64> {
        self.valences.get(&term.to_lowercase()).copied()
    }

    pub fn len(&self) -> usize {
        self.valences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valences.is_empty()
    }

    /// Sum of matched valences (negation-flipped), squashed to (-1, 1) by
    /// s / sqrt(s^2 + alpha). Text with no lexicon hits scores 0.
    pub fn score(&self, text: &str) -> f64 {
        let tokens = features::tokenize(text);
        let mut sum = 0.0;
        for (i, token) in tokens.iter().enumerate() {
            if let Some(valence) = self.valence(token) {
                let negated = i > 0 && NEGATIONS.contains(&tokens[i - 1].as_str());
                sum += if negated { -valence } else { valence };
            }
        }
        if sum == 0.0 {
            0.0
        } else {
            sum / (sum * sum + self.alpha).sqrt()
        }
    }
}

/// Discounted per-path sentiment accumulator over user turns:
/// `ss_i = gamma * ss_{i-2} + sentiment(u_i)`, with out-of-range history
/// treated as 0.
#[derive(Debug, Clone)]
pub struct SentimentAccumulator {
    gamma: f64,
    last: Option<(usize, f64)>,
}

impl SentimentAccumulator {
    pub const DEFAULT_GAMMA: f64 = 0.9;

    pub fn new(gamma: f64) -> SentimentAccumulator {
        assert!((0.0..=1.0).contains(&gamma), "gamma must lie in [0, 1]");
        SentimentAccumulator { gamma, last: None }
    }

    /// Folds the sentiment of user turn `i` into the running score. User
    /// turns sit at even indices, so after the first call `i` must advance
    /// by exactly 2.
    pub fn accumulate(&mut self, i: usize, sentiment: f64) -> Result<f64, ScoringError> {
        let prev = match self.last {
            None => 0.0,
            Some((last_i, last_ss)) => {
                if i != last_i + 2 {
                    return Err(ScoringError::OrderViolation {
                        expected: last_i + 2,
                        got: i,
                    });
                }
                last_ss
            }
        };
        let ss = self.gamma * prev + sentiment;
        self.last = Some((i, ss));
        Ok(ss)
    }

    pub fn current(&self) -> f64 {
        self.last.map(|(_, ss)| ss).unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[2.0, 3.0], &[2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((v - 0.7071067811865475).abs() < 1e-6);
    }

    #[test]
    fn cosine_zero_vector_is_error() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err(), ScoringError::ZeroVector);
        assert!(matches!(
            cosine(&[1.0], &[1.0, 2.0]).unwrap_err(),
            ScoringError::DimensionMismatch { .. }
        ));
    }

    #[test]
    fn embedder_is_deterministic_and_normalized() {
        let embedder = HashedBowEmbedder::default();
        let a = embedder.embed("i feel anxious about work");
        let b = embedder.embed("i feel anxious about work");
        assert_eq!(a, b);
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(embedder.embed("").iter().all(|&x| x == 0.0));
    }

    #[test]
    fn state_alignment_extremes() {
        let embedder = HashedBowEmbedder::default();
        let state = StructuredState {
            feelings: vec!["anxious about work".into()],
            needs: vec!["reassurance".into()],
            ..Default::default()
        };
        assert_eq!(state_alignment(&state, &state, &embedder).unwrap(), 1.0);

        let disjoint = StructuredState {
            feelings: vec!["cheerful".into()],
            ..Default::default()
        };
        assert_eq!(state_alignment(&state, &disjoint, &embedder).unwrap(), 0.0);

        let empty = StructuredState::default();
        assert_eq!(
            state_alignment(&state, &empty, &embedder).unwrap_err(),
            ScoringError::ZeroVector
        );
    }

    #[test]
    fn sentiment_no_hits_is_zero() {
        let lex = SentimentLexicon::shipped();
        assert_eq!(lex.score("qqq zzz xxx"), 0.0);
        assert_eq!(lex.score(""), 0.0);
    }

    #[test]
    fn sentiment_single_unit_valence() {
        let lex = SentimentLexicon::from_tsv("superb\t1.0", 15.0).unwrap();
        assert!((lex.score("superb") - 0.25).abs() < 1e-12);
    }

    #[test]
    fn sentiment_negation_flips_sign() {
        // "great" carries +0.6 in the shipped lexicon.
        let lex = SentimentLexicon::shipped();
        assert_eq!(lex.valence("great"), Some(0.6));
        let plain = lex.score("great");
        let negated = lex.score("not great");
        assert!(plain > 0.0);
        assert!((negated - (-0.15309310892394865)).abs() < 1e-12);
        assert!((plain + negated).abs() < 1e-12, "flip is symmetric");
    }

    #[test]
    fn accumulator_recurrence() {
        let mut acc = SentimentAccumulator::new(0.9);
        assert_eq!(acc.accumulate(0, 0.5).unwrap(), 0.5);
        let ss = acc.accumulate(2, -0.2).unwrap();
        assert!((ss - 0.25).abs() < 1e-15);
    }

    #[test]
    fn accumulator_gamma_zero_is_instantaneous() {
        let mut acc = SentimentAccumulator::new(0.0);
        acc.accumulate(0, 0.7).unwrap();
        assert_eq!(acc.accumulate(2, -0.3).unwrap(), -0.3);
    }

    #[test]
    fn accumulator_order_violation() {
        let mut acc = SentimentAccumulator::new(0.9);
        acc.accumulate(0, 0.1).unwrap();
        assert_eq!(
            acc.accumulate(6, 0.1).unwrap_err(),
            ScoringError::OrderViolation { expected: 2, got: 6 }
        );
    }

    #[test]
    fn shipped_lexicon_loads() {
        let lex = SentimentLexicon::shipped();
        assert!(lex.len() >= 60);
    }

    proptest! {
        #[test]
        fn cosine_scale_invariant(
            xs in proptest::collection::vec(-10.0f64..10.0, 3),
            ys in proptest::collection::vec(-10.0f64..10.0, 3),
            lambda in 0.01f64..100.0,
        ) {
            let scaled: Vec<f64> = xs.iter().map(|x| x * lambda).collect();
            match (cosine(&xs, &ys), cosine(&scaled, &ys)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-9),
                (Err(ScoringError::ZeroVector), Err(ScoringError::ZeroVector)) => {}
                other => prop_assert!(false, "mismatched results: {:?}", other),
            }
        }

        #[test]
        fn accumulator_matches_closed_form(
            sentiments in proptest::collection::vec(-1.0f64..1.0, 1..25),
            gamma in prop_oneof![Just(0.0), Just(0.5), Just(0.9), Just(1.0)],
        ) {
            let mut acc = SentimentAccumulator::new(gamma);
            for (k, s) in sentiments.iter().enumerate() {
                let ss = acc.accumulate(2 * k, *s).unwrap();
                let closed: f64 = (0..=k).map(|j| gamma.powi(j as i32) * sentiments[k - j]).sum();
                prop_assert!((ss - closed).abs() < 1e-12);
            }
        }

        #[test]
        fn embedding_same_text_same_vector(words in proptest::collection::vec("[a-z]{1,8}", 0..12)) {
            let text = words.join(" ");
            let embedder = HashedBowEmbedder::new(64, 9);
            prop_assert_eq!(embedder.embed(&text), embedder.embed(&text));
        }
    }
}
