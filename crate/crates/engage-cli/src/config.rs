//! Run configuration: TOML file with strict keys, validated before any stage
//! starts. Search, mining, reward-model, DPO and evaluation settings all
//! live here; seeds for each stage derive from the single root seed.

use crate::error::CliError;
use engage_core::agents::{
    HttpChatPolicy, HttpConfig, ScriptedPersuadeeSimulator, ScriptedSeekerSimulator,
    TopicMirrorPolicy, ToyPolicy,
};
use engage_core::dialogue::{AgentPolicy, Role, Scenario};
use engage_core::dpo::DpoConfig;
use engage_core::mcts::{
    derive_seed, PruneCriterion, PruneCriterionKind, SearchConfig, SentimentPathCriterion,
    StateAlignmentCriterion,
};
use engage_core::preference::{MiningConfig, RewardTrainConfig};
use engage_core::scoring::{HashedBowEmbedder, SentimentLexicon};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    /// JSONL file of user conditions, one object per line.
    pub conditions: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub search: SearchSettings,
    #[serde(default)]
    pub agents: AgentsConfig,
    #[serde(default)]
    pub mining: MiningConfig,
    #[serde(default)]
    pub reward_model: RewardTrainConfig,
    #[serde(default)]
    pub dt: DtSettings,
    #[serde(default)]
    pub dpo: DpoSettings,
    #[serde(default)]
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.search_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.mining
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.dpo_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.eval.episodes == 0 {
            return Err(CliError::Config("eval.episodes must be >= 1".into()));
        }
        if self.eval.bon_n == 0 {
            return Err(CliError::Config("eval.bon_n must be >= 1".into()));
        }
        if !(self.dt.ratio > 0.0) {
            return Err(CliError::Config("dt.ratio must be > 0".into()));
        }
        Ok(())
    }

    /// Seed for a named stage, derived from the root seed by hashing the
    /// stage name.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage, 0, 0)
    }

    pub fn search_config(&self) -> SearchConfig {
        let defaults = SearchConfig::for_scenario(self.scenario);
        SearchConfig {
            exploration_constant: self.search.exploration_constant,
            expansion_width: self.search.expansion_width,
            depth_cap: self.search.depth_cap.unwrap_or(defaults.depth_cap),
            prune_cap: self.search.prune_cap,
            trajectory_budget: self.search.trajectory_budget,
            iteration_budget: self.search.iteration_budget,
            seed: 0,
            criterion: self.search.criterion.unwrap_or(defaults.criterion),
        }
    }

    pub fn dpo_config(&self) -> DpoConfig {
        DpoConfig {
            beta: self.dpo.beta,
            learning_rate: self.dpo.lr,
            epochs: self.dpo.epochs,
            seed: self.stage_seed("train-dpo"),
            batch_size: self.dpo.batch_size,
        }
    }

    pub fn prune_criterion(&self) -> Box<dyn PruneCriterion + Send + Sync> {
        match self.search_config().criterion {
            PruneCriterionKind::StateAlignment => Box::new(StateAlignmentCriterion {
                embedder: HashedBowEmbedder::new(self.search.embed_dim, self.search.embed_seed),
            }),
            PruneCriterionKind::AccumulatedSentiment => Box::new(SentimentPathCriterion {
                lexicon: SentimentLexicon::shipped(),
                gamma: self.search.gamma,
            }),
        }
    }

    /// Evaluation turn cap: configured value or twice the exploration depth.
    pub fn eval_turn_cap(&self) -> usize {
        self.eval
            .turn_cap
            .unwrap_or(2 * self.search_config().depth_cap)
    }

    pub fn user_agent(&self) -> Result<Box<dyn AgentPolicy>, CliError> {
        let spec = self.agents.user.clone().unwrap_or(match self.scenario {
            Scenario::EmotionalSupport => AgentSpec::ScriptedSeeker {
                patience: default_seeker_patience(),
            },
            Scenario::Persuasion => AgentSpec::ScriptedPersuadee {
                initial_warmth: default_initial_warmth(),
                ask_threshold: default_ask_threshold(),
                patience: default_persuadee_patience(),
            },
        });
        build_agent(&spec, self.scenario, Role::User)
    }

    pub fn model_agent(&self) -> Result<Box<dyn AgentPolicy>, CliError> {
        let spec = self
            .agents
            .model
            .clone()
            .unwrap_or(AgentSpec::Toy { policy_path: None });
        build_agent(&spec, self.scenario, Role::Model)
    }

    /// The baseline (pre-alignment) toy policy for this run.
    pub fn baseline_policy(&self) -> Result<ToyPolicy, CliError> {
        match &self.agents.model {
            None | Some(AgentSpec::Toy { policy_path: None }) => Ok(default_toy(self.scenario)),
            Some(AgentSpec::Toy { policy_path: Some(path) }) => load_policy(path),
            Some(other) => Err(CliError::Config(format!(
                "pipeline alignment requires a toy model agent, found {other:?}"
            ))),
        }
    }
}

fn default_toy(scenario: Scenario) -> ToyPolicy {
    match scenario {
        Scenario::EmotionalSupport => ToyPolicy::support_default(),
        Scenario::Persuasion => ToyPolicy::persuasion_default(),
    }
}

pub fn load_policy(path: &Path) -> Result<ToyPolicy, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read policy {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("bad policy file {}: {e}", path.display())))
}

fn build_agent(
    spec: &AgentSpec,
    scenario: Scenario,
    role: Role,
) -> Result<Box<dyn AgentPolicy>, CliError> {
    let agent: Box<dyn AgentPolicy> = match spec {
        AgentSpec::ScriptedSeeker { patience } => {
            Box::new(ScriptedSeekerSimulator::new(*patience))
        }
        AgentSpec::ScriptedPersuadee {
            initial_warmth,
            ask_threshold,
            patience,
        } => Box::new(ScriptedPersuadeeSimulator::new(
            *initial_warmth,
            *ask_threshold,
            *patience,
        )),
        AgentSpec::Toy { policy_path } => match policy_path {
            Some(path) => Box::new(load_policy(path)?),
            None => Box::new(default_toy(scenario)),
        },
        AgentSpec::TopicMirror => Box::new(TopicMirrorPolicy),
        AgentSpec::Http { http } => Box::new(
            HttpChatPolicy::new(http.clone(), role)
                .map_err(|e| CliError::Agent(e.to_string()))?,
        ),
    };
    if agent.role() != role {
        return Err(CliError::Config(format!(
            "agent {spec:?} produces {:?} turns but the {role:?} slot needs {role:?}",
            agent.role()
        )));
    }
    Ok(agent)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentsConfig {
    #[serde(default)]
    pub user: Option<AgentSpec>,
    #[serde(default)]
    pub model: Option<AgentSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AgentSpec {
    ScriptedSeeker {
        #[serde(default = "default_seeker_patience")]
        patience: u32,
    },
    ScriptedPersuadee {
        #[serde(default = "default_initial_warmth")]
        initial_warmth: i64,
        #[serde(default = "default_ask_threshold")]
        ask_threshold: i64,
        #[serde(default = "default_persuadee_patience")]
        patience: u32,
    },
    Toy {
        #[serde(default)]
        policy_path: Option<PathBuf>,
    },
    TopicMirror,
    Http {
        http: HttpConfig,
    },
}

fn default_seeker_patience() -> u32 {
    4
}
fn default_initial_warmth() -> i64 {
    2
}
fn default_ask_threshold() -> i64 {
    5
}
fn default_persuadee_patience() -> u32 {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSettings {
    pub exploration_constant: f64,
    pub expansion_width: usize,
    /// Defaults to the scenario's exploration depth (25 or 15).
    pub depth_cap: Option<usize>,
    pub prune_cap: usize,
    pub trajectory_budget: usize,
    pub iteration_budget: usize,
    /// Defaults to the scenario criterion.
    pub criterion: Option<PruneCriterionKind>,
    /// Sentiment discount for the persuasion criterion.
    pub gamma: f64,
    pub embed_dim: usize,
    pub embed_seed: u64,
}

impl Default for SearchSettings {
    fn default() -> Self {
        SearchSettings {
            exploration_constant: std::f64::consts::SQRT_2,
            expansion_width: 3,
            depth_cap: None,
            prune_cap: 81,
            trajectory_budget: 81,
            iteration_budget: 300,
            criterion: None,
            gamma: 0.9,
            embed_dim: 256,
            embed_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DtSettings {
    /// Reward-ranked pairs per mined pair in the composed dataset.
    pub ratio: f64,
    /// Resampling attempts before a context is skipped.
    pub retry_cap: u32,
}

impl Default for DtSettings {
    fn default() -> Self {
        DtSettings { ratio: 1.0, retry_cap: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoSettings {
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: Option<usize>,
}

impl Default for DpoSettings {
    fn default() -> Self {
        DpoSettings {
            beta: 0.1,
            lr: 0.05,
            epochs: 30,
            batch_size: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub episodes: usize,
    /// Defaults to twice the exploration depth cap.
    pub turn_cap: Option<usize>,
    pub bon_n: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            episodes: 128,
            turn_cap: None,
            bon_n: 3,
        }
    }
}
