//! Explore conversations between a pluggable user simulator and an
//! interactive policy with Monte-Carlo tree search over dialogue trees,
//! detect end-of-conversation engagement signals, mine chosen/rejected
//! response pairs, and align a policy toward engagement with a reward model,
//! Best-of-N and a DPO objective. Everything is deterministic given seeds,
//! so full runs reproduce byte for byte.

pub mod agents;
pub mod dialogue;
pub mod dpo;
pub mod engagement;
pub mod features;
pub mod mcts;
pub mod preference;
pub mod scoring;

pub use dialogue::{
    AgentError, AgentPolicy, Conversation, DialogueError, Role, Scenario, StructuredState, Turn,
    UserCondition,
};
pub use engagement::{EngagementDetector, EngagementOutcome};
pub use mcts::{DialogueTree, SearchConfig};
pub use preference::{MiningConfig, PreferencePair, RewardModel};
