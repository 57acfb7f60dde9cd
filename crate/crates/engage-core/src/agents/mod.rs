//! Concrete agent implementations: deterministic scripted simulators for
//! tests and desk-scale runs, a differentiable toy policy, and an HTTP
//! client for real chat-completion backends.

mod http;
mod persuadee;
mod seeker;
mod toy;

pub use http::{HttpChatPolicy, HttpConfig};
pub use persuadee::{ScriptedPersuadeeSimulator, RAPPORT_KEYWORDS};
pub use seeker::{ScriptedSeekerSimulator, TopicMirrorPolicy, SUPPORT_TOPICS};
pub use toy::{ToyPolicy, ToyPolicyError};
