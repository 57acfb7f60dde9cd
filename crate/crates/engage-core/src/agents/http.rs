//! Chat-completions HTTP client implementing [`AgentPolicy`].
//!
//! Speaks the de-facto `/chat/completions` JSON shape (messages array with
//! role/content). A predicted user state may be embedded in the completion
//! between literal `<state>` and `</state>` markers; when present it is
//! parsed into a [`StructuredState`] and stripped from the turn text.

use crate::dialogue::{
    AgentError, AgentPolicy, Role, Scenario, StructuredState, Turn, UserCondition,
};
use serde::{Deserialize, Serialize};
use std::time::Duration;

pub const ENV_API_BASE: &str = "ENGAGE_API_BASE";
pub const ENV_API_KEY: &str = "ENGAGE_API_KEY";
pub const ENV_MODEL: &str = "ENGAGE_MODEL";

const STATE_OPEN: &str = "<state>";
const STATE_CLOSE: &str = "</state>";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub system_prompt: Option<String>,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
}

fn default_temperature() -> f64 {
    0.7
}
fn default_timeout_secs() -> u64 {
    30
}
fn default_max_retries() -> u32 {
    3
}

impl HttpConfig {
    /// Reads base url, key and model from the `ENGAGE_*` environment
    /// variables.
    pub fn from_env() -> Result<HttpConfig, AgentError> {
        let base_url = std::env::var(ENV_API_BASE)
            .map_err(|_| AgentError::BackendUnavailable(format!("{ENV_API_BASE} not set")))?;
        let model = std::env::var(ENV_MODEL)
            .map_err(|_| AgentError::BackendUnavailable(format!("{ENV_MODEL} not set")))?;
        Ok(HttpConfig {
            base_url,
            model,
            temperature: default_temperature(),
            system_prompt: None,
            api_key: std::env::var(ENV_API_KEY).ok(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
        })
    }
}

pub struct HttpChatPolicy {
    config: HttpConfig,
    role: Role,
    client: reqwest::blocking::Client,
    /// Base backoff between retries; tests shrink it.
    backoff: Duration,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage>,
    temperature: f64,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ChatMessage {
    role: String,
    content: String,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

impl HttpChatPolicy {
    pub fn new(config: HttpConfig, role: Role) -> Result<HttpChatPolicy, AgentError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| AgentError::BackendUnavailable(e.to_string()))?;
        Ok(HttpChatPolicy {
            config,
            role,
            client,
            backoff: Duration::from_millis(250),
        })
    }

    #[doc(hidden)]
    pub fn with_backoff(mut self, backoff: Duration) -> HttpChatPolicy {
        self.backoff = backoff;
        self
    }

    fn messages(&self, condition: &UserCondition, context: &[Turn]) -> Vec<ChatMessage> {
        let mut messages = Vec::with_capacity(context.len() + 2);
        let system = match &self.config.system_prompt {
            Some(prompt) => prompt.clone(),
            None => default_system_prompt(self.role, condition),
        };
        messages.push(ChatMessage {
            role: "system".into(),
            content: system,
        });
        for turn in context {
            let api_role = if turn.role == self.role { "assistant" } else { "user" };
            messages.push(ChatMessage {
                role: api_role.into(),
                content: turn.text.clone(),
            });
        }
        messages
    }

    fn call_once(
        &self,
        condition: &UserCondition,
        context: &[Turn],
        seed: u64,
    ) -> Result<String, String> {
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let request = ChatRequest {
            model: &self.config.model,
            messages: self.messages(condition, context),
            temperature: self.config.temperature,
            seed,
        };
        let mut builder = self.client.post(&url).json(&request);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| e.to_string())?;
        if !response.status().is_success() {
            return Err(format!("status {}", response.status()));
        }
        let parsed: ChatResponse = response.json().map_err(|e| e.to_string())?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .unwrap_or_default();
        Ok(content)
    }

    /// Splits a completion into turn text and an optional structured state.
    /// A malformed or absent state section yields `None`, never an error.
    fn split_completion(completion: &str) -> (String, Option<StructuredState>) {
        let Some(open) = completion.find(STATE_OPEN) else {
            return (completion.trim().to_string(), None);
        };
        let Some(close_rel) = completion[open..].find(STATE_CLOSE) else {
            return (completion.trim().to_string(), None);
        };
        let close = open + close_rel;
        let block = &completion[open + STATE_OPEN.len()..close];
        let state = match StructuredState::from_block(block.trim()) {
            Ok(state) => Some(state),
            Err(err) => {
                log::warn!("ignoring malformed state block: {err}");
                None
            }
        };
        let mut text = String::new();
        text.push_str(&completion[..open]);
        text.push_str(&completion[close + STATE_CLOSE.len()..]);
        (text.trim().to_string(), state)
    }
}

fn default_system_prompt(role: Role, condition: &UserCondition) -> String {
    match (role, condition.scenario) {
        (Role::Model, Scenario::EmotionalSupport) => {
            "You are an emotional supporter. Before replying, restate the user's \
             observations, feelings, needs and requests between <state> and </state> \
             markers as four labeled lines, then respond supportively."
                .to_string()
        }
        (Role::Model, Scenario::Persuasion) => {
            "You are a fundraiser for the charity Save the Children. Build rapport and, \
             when the moment is right, ask for a donation of up to $2."
                .to_string()
        }
        (Role::User, _) => format!(
            "Role-play this person in a conversation: {}",
            condition.description
        ),
    }
}

impl AgentPolicy for HttpChatPolicy {
    fn role(&self) -> Role {
        self.role
    }

    fn respond(
        &self,
        condition: &UserCondition,
        context: &[Turn],
        seed: u64,
    ) -> Result<Turn, AgentError> {
        let mut last_error = String::from("no attempt made");
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                // Bounded exponential backoff: base * 2^(attempt-1), capped.
                let factor = 1u32 << (attempt - 1).min(4);
                std::thread::sleep(self.backoff.saturating_mul(factor));
            }
            match self.call_once(condition, context, seed) {
                Ok(completion) => {
                    let (text, state) = Self::split_completion(&completion);
                    if text.is_empty() {
                        last_error = "empty completion".into();
                        continue;
                    }
                    return Ok(Turn::new(self.role, text, state)?);
                }
                Err(err) => last_error = err,
            }
        }
        Err(AgentError::BackendUnavailable(format!(
            "{} after {} attempts",
            last_error,
            self.config.max_retries + 1
        )))
    }
}
