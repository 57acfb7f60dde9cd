//! Tree search over simulated conversations with alternating model/user
//! nodes: UCB selection over model nodes, width-e expansion through the user
//! simulator, depth-wise top-K pruning by a scenario criterion, terminal
//! engagement rewards and ancestor back-propagation.
//!
//! Each model node owns at most one user node; that user node carries up to
//! `e` model children sharing its conversation context. Rewards are assessed
//! only at conversation ends, never by random playout, so Q/N of a node is
//! the empirical probability that it leads to an engagement signal.

use crate::dialogue::{AgentPolicy, Role, Turn, UserCondition};
use crate::engagement::{EngagementDetector, EngagementOutcome};
use crate::features::fnv1a64;
use crate::scoring::{state_alignment, EmbeddingFn, SentimentAccumulator, SentimentLexicon};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("no expandable node remains")]
    Exhausted,
    #[error("invalid search config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Agent(#[from] crate::dialogue::AgentError),
    #[error(transparent)]
    Engagement(#[from] crate::engagement::EngagementError),
}

/// An error mid-search, carrying the partial tree for persistence.
#[derive(Debug)]
pub struct SearchFailure {
    pub error: SearchError,
    pub partial: Option<DialogueTree>,
}

pub type NodeId = usize;

pub const ROOT: NodeId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    User,
    Model,
}

#[derive(Debug, Clone)]
pub struct DialogueNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub turn: Turn,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Visit count N.
    pub visits: u64,
    /// Accumulated reward Q.
    pub total_reward: f64,
    pub depth: usize,
    pub terminal: Option<EngagementOutcome>,
    pub pruned: bool,
}

impl DialogueNode {
    /// Q/N, the empirical engagement value; 0 for unvisited nodes.
    pub fn mean_value(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.total_reward / self.visits as f64
        }
    }
}

/// Which per-depth pruning criterion a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneCriterionKind {
    StateAlignment,
    AccumulatedSentiment,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// UCB exploration constant c.
    pub exploration_constant: f64,
    /// New model nodes per expansion (e).
    pub expansion_width: usize,
    /// Maximum conversation depth T, in turns.
    pub depth_cap: usize,
    /// At most K unpruned model nodes per depth.
    pub prune_cap: usize,
    /// Stop once this many terminal trajectories exist.
    pub trajectory_budget: usize,
    /// Hard cap on select/expand/evaluate/backpropagate iterations.
    pub iteration_budget: usize,
    pub seed: u64,
    pub criterion: PruneCriterionKind,
}

impl SearchConfig {
    /// Defaults per scenario: c = sqrt(2), e = 3, K = 81, T = 25 for
    /// emotional support and 15 for persuasion.
    pub fn for_scenario(scenario: crate::dialogue::Scenario) -> SearchConfig {
        use crate::dialogue::Scenario;
        let (depth_cap, criterion) = match scenario {
            Scenario::EmotionalSupport => (25, PruneCriterionKind::StateAlignment),
            Scenario::Persuasion => (15, PruneCriterionKind::AccumulatedSentiment),
        };
        SearchConfig {
            exploration_constant: std::f64::consts::SQRT_2,
            expansion_width: 3,
            depth_cap,
            prune_cap: 81,
            trajectory_budget: 81,
            iteration_budget: 300,
            seed: 0,
            criterion,
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        if !(self.exploration_constant > 0.0 && self.exploration_constant.is_finite()) {
            return Err(SearchError::InvalidConfig("exploration_constant must be > 0"));
        }
        if self.expansion_width < 1 {
            return Err(SearchError::InvalidConfig("expansion_width must be >= 1"));
        }
        if self.depth_cap < 1 {
            return Err(SearchError::InvalidConfig("depth_cap must be >= 1"));
        }
        if self.prune_cap < 1 {
            return Err(SearchError::InvalidConfig("prune_cap must be >= 1"));
        }
        if self.iteration_budget < 1 {
            return Err(SearchError::InvalidConfig("iteration_budget must be >= 1"));
        }
        Ok(())
    }
}

/// UCB for a model node: Q/N + c * sqrt(ln(N_ref) / N). N_ref is the visit
/// count of the grandparent model node, falling back to the root user node
/// for depth-1 nodes. Unvisited nodes score +inf so each gets a first visit.
pub fn ucb_value(total_reward: f64, visits: u64, reference_visits: u64, c: f64) -> f64 {
    if visits == 0 {
        return f64::INFINITY;
    }
    let n = visits as f64;
    let reference = reference_visits.max(1) as f64;
    total_reward / n + c * (reference.ln() / n).sqrt()
}

/// Scores a model node for depth-wise pruning; lower scores are pruned
/// first. Return `f64::NEG_INFINITY` for nodes the criterion cannot score.
pub trait PruneCriterion {
    fn score(&self, tree: &DialogueTree, node: NodeId) -> f64;
}

impl<F> PruneCriterion for F
where
    F: Fn(&DialogueTree, NodeId) -> f64,
{
    fn score(&self, tree: &DialogueTree, node: NodeId) -> f64 {
        self(tree, node)
    }
}

/// Emotional support: cosine between the simulator state on the model node's
/// parent user turn and the state the model predicted on its own turn.
pub struct StateAlignmentCriterion<E: EmbeddingFn> {
    pub embedder: E,
}

impl<E: EmbeddingFn> PruneCriterion for StateAlignmentCriterion<E> {
    fn score(&self, tree: &DialogueTree, node: NodeId) -> f64 {
        let model_node = tree.node(node);
        let Some(predicted) = model_node.turn.state.as_ref() else {
            return f64::NEG_INFINITY;
        };
        let Some(parent) = model_node.parent else {
            return f64::NEG_INFINITY;
        };
        let Some(sim_state) = tree.node(parent).turn.state.as_ref() else {
            return f64::NEG_INFINITY;
        };
        state_alignment(sim_state, predicted, &self.embedder).unwrap_or(f64::NEG_INFINITY)
    }
}

/// Persuasion: discounted sentiment accumulated over the user turns along
/// the node's root path.
pub struct SentimentPathCriterion {
    pub lexicon: SentimentLexicon,
    pub gamma: f64,
}

impl PruneCriterion for SentimentPathCriterion {
    fn score(&self, tree: &DialogueTree, node: NodeId) -> f64 {
        let turns = tree.path_turns(node);
        let mut acc = SentimentAccumulator::new(self.gamma);
        let mut score = 0.0;
        for (i, turn) in turns.iter().enumerate() {
            if turn.role == Role::User {
                score = acc
                    .accumulate(i, self.lexicon.score(&turn.text))
                    .expect("user turns alternate on tree paths");
            }
        }
        score
    }
}

/// The search tree for one user condition. The root is the opening user
/// node; depths equal turn indices.
#[derive(Debug, Clone)]
pub struct DialogueTree {
    nodes: Vec<DialogueNode>,
    condition: UserCondition,
    config: SearchConfig,
    /// Model-node ids per depth, in creation order.
    depth_registry: Vec<Vec<NodeId>>,
    /// Evaluation log: (node the reward was assessed at, reward).
    events: Vec<(NodeId, f64)>,
    terminal_trajectories: usize,
}

impl DialogueTree {
    /// Builds a tree whose root user node holds the given opening turn.
    pub fn new(condition: UserCondition, config: SearchConfig, opening: Turn) -> DialogueTree {
        assert_eq!(opening.role, Role::User, "the root holds a user turn");
        let root = DialogueNode {
            id: ROOT,
            kind: NodeKind::User,
            turn: opening,
            parent: None,
            children: Vec::new(),
            visits: 0,
            total_reward: 0.0,
            depth: 0,
            terminal: None,
            pruned: false,
        };
        DialogueTree {
            nodes: vec![root],
            condition,
            config,
            depth_registry: Vec::new(),
            events: Vec::new(),
            terminal_trajectories: 0,
        }
    }

    pub fn condition(&self) -> &UserCondition {
        &self.condition
    }

    pub fn config(&self) -> &SearchConfig {
        &self.config
    }

    pub fn node(&self, id: NodeId) -> &DialogueNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &DialogueNode> {
        self.nodes.iter()
    }

    pub fn events(&self) -> &[(NodeId, f64)] {
        &self.events
    }

    pub fn terminal_trajectories(&self) -> usize {
        self.terminal_trajectories
    }

    /// Model-node ids registered at a depth, in creation order.
    pub fn model_nodes_at_depth(&self, depth: usize) -> &[NodeId] {
        self.depth_registry
            .get(depth)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn unpruned_model_count_at(&self, depth: usize) -> usize {
        self.model_nodes_at_depth(depth)
            .iter()
            .filter(|&&id| !self.nodes[id].pruned)
            .count()
    }

    fn add_node(&mut self, kind: NodeKind, turn: Turn, parent: NodeId) -> NodeId {
        let id = self.nodes.len();
        let depth = self.nodes[parent].depth + 1;
        self.nodes.push(DialogueNode {
            id,
            kind,
            turn,
            parent: Some(parent),
            children: Vec::new(),
            visits: 0,
            total_reward: 0.0,
            depth,
            terminal: None,
            pruned: false,
        });
        self.nodes[parent].children.push(id);
        if kind == NodeKind::Model {
            if self.depth_registry.len() <= depth {
                self.depth_registry.resize(depth + 1, Vec::new());
            }
            self.depth_registry[depth].push(id);
        }
        id
    }

    /// Fixture helper: attach a model node under a user node.
    pub fn insert_model_child(&mut self, user_node: NodeId, turn: Turn) -> NodeId {
        assert_eq!(self.nodes[user_node].kind, NodeKind::User);
        assert_eq!(turn.role, Role::Model);
        self.add_node(NodeKind::Model, turn, user_node)
    }

    /// Fixture helper: attach the single user child of a model node.
    pub fn insert_user_child(&mut self, model_node: NodeId, turn: Turn) -> NodeId {
        assert_eq!(self.nodes[model_node].kind, NodeKind::Model);
        assert!(
            self.user_child(model_node).is_none(),
            "a model node has at most one user child"
        );
        assert_eq!(turn.role, Role::User);
        self.add_node(NodeKind::User, turn, model_node)
    }

    /// Fixture helper: force visit statistics on a node.
    pub fn set_node_stats(&mut self, id: NodeId, total_reward: f64, visits: u64) {
        self.nodes[id].total_reward = total_reward;
        self.nodes[id].visits = visits;
    }

    /// Marks a node terminal, counting the trajectory once.
    pub fn set_terminal(&mut self, id: NodeId, outcome: EngagementOutcome) {
        if self.nodes[id].terminal.is_none() {
            self.terminal_trajectories += 1;
        }
        self.nodes[id].terminal = Some(outcome);
    }

    /// The single user child of a model node, if generated.
    pub fn user_child(&self, model_node: NodeId) -> Option<NodeId> {
        self.nodes[model_node]
            .children
            .iter()
            .copied()
            .find(|&c| self.nodes[c].kind == NodeKind::User)
    }

    fn model_children_of_user(&self, user_node: NodeId) -> usize {
        self.nodes[user_node]
            .children
            .iter()
            .filter(|&&c| self.nodes[c].kind == NodeKind::Model)
            .count()
    }

    /// Turns from the root to `node`, inclusive.
    pub fn path_turns(&self, node: NodeId) -> Vec<Turn> {
        let mut ids = Vec::new();
        let mut cursor = Some(node);
        while let Some(id) = cursor {
            ids.push(id);
            cursor = self.nodes[id].parent;
        }
        ids.reverse();
        ids.into_iter().map(|id| self.nodes[id].turn.clone()).collect()
    }

    fn reference_visits(&self, model_node: NodeId) -> u64 {
        let user_parent = self.nodes[model_node]
            .parent
            .expect("model nodes always have a parent");
        match self.nodes[user_parent].parent {
            Some(grandparent_model) => self.nodes[grandparent_model].visits,
            None => self.nodes[ROOT].visits,
        }
    }

    /// UCB score of a model node under this tree's exploration constant.
    pub fn ucb_score(&self, model_node: NodeId) -> f64 {
        let node = &self.nodes[model_node];
        ucb_value(
            node.total_reward,
            node.visits,
            self.reference_visits(model_node),
            self.config.exploration_constant,
        )
    }

    /// A model node can be expanded while it is live, below the depth cap
    /// and its user child has fewer than `e` model children.
    pub fn is_expandable(&self, model_node: NodeId) -> bool {
        let node = &self.nodes[model_node];
        if node.kind != NodeKind::Model || node.pruned || node.terminal.is_some() {
            return false;
        }
        if node.depth >= self.config.depth_cap {
            return false;
        }
        match self.user_child(model_node) {
            None => true,
            Some(user) => self.model_children_of_user(user) < self.config.expansion_width,
        }
    }

    pub fn has_expandable(&self) -> bool {
        self.nodes
            .iter()
            .any(|n| n.kind == NodeKind::Model && self.is_expandable(n.id))
    }

    /// Walks from the root picking the UCB-argmax unpruned model child at
    /// every choice point; ties break toward the lowest node id. Returns the
    /// first node that is expandable, at the depth cap, or terminal
    /// (terminal nodes are re-evaluated by the caller).
    pub fn select(&self) -> Result<NodeId, SearchError> {
        let mut current_user = ROOT;
        loop {
            let mut best: Option<(NodeId, f64)> = None;
            for &child in &self.nodes[current_user].children {
                let node = &self.nodes[child];
                if node.kind != NodeKind::Model || node.pruned {
                    continue;
                }
                let score = self.ucb_score(child);
                let better = match best {
                    None => true,
                    Some((best_id, best_score)) => {
                        score > best_score || (score == best_score && child < best_id)
                    }
                };
                if better {
                    best = Some((child, score));
                }
            }
            let Some((chosen, _)) = best else {
                return Err(SearchError::Exhausted);
            };
            let node = &self.nodes[chosen];
            debug_assert!(!node.pruned);
            if node.terminal.is_some()
                || self.is_expandable(chosen)
                || node.depth >= self.config.depth_cap
            {
                return Ok(chosen);
            }
            current_user = self
                .user_child(chosen)
                .expect("fully expanded non-terminal model node has a user child");
        }
    }

    /// Reward assessed at a leaf: the engagement level when terminal,
    /// otherwise 0 (non-terminal leaves and terminals without engagement).
    pub fn leaf_reward(&self, node: NodeId) -> f64 {
        self.nodes[node].terminal.map(|o| o.level).unwrap_or(0.0)
    }

    /// Adds `reward` to `node` and every ancestor, incrementing each visit
    /// count by one, and logs the evaluation event.
    pub fn backpropagate(&mut self, node: NodeId, reward: f64) {
        self.events.push((node, reward));
        let mut cursor = Some(node);
        while let Some(id) = cursor {
            self.nodes[id].total_reward += reward;
            self.nodes[id].visits += 1;
            cursor = self.nodes[id].parent;
        }
    }

    /// Generates the missing model children under a user node. All agent
    /// calls happen before any tree mutation, so failures roll back cleanly.
    pub fn expand_children_under(
        &mut self,
        user: NodeId,
        model: &dyn AgentPolicy,
        seed_owner: NodeId,
    ) -> Result<Vec<NodeId>, SearchError> {
        assert_eq!(self.nodes[user].kind, NodeKind::User);
        let existing = self.model_children_of_user(user);
        let want = self.config.expansion_width.saturating_sub(existing);
        if want == 0 {
            return Ok(Vec::new());
        }
        let context = self.path_turns(user);
        let mut turns = Vec::with_capacity(want);
        for i in existing..self.config.expansion_width {
            let seed = derive_seed(self.config.seed, "model", seed_owner as u64, i as u64);
            turns.push(model.respond(&self.condition, &context, seed)?);
        }
        Ok(turns
            .into_iter()
            .map(|turn| self.add_node(NodeKind::Model, turn, user))
            .collect())
    }

    /// Expands a selected model node: ensures its single user child exists,
    /// then generates `e` model children with distinct seeds. A terminal
    /// user turn (or the depth cap) marks the node terminal and creates no
    /// children. Agent errors leave the tree untouched.
    pub fn expand(
        &mut self,
        node: NodeId,
        user_sim: &dyn AgentPolicy,
        model: &dyn AgentPolicy,
        detector: &EngagementDetector,
    ) -> Result<Vec<NodeId>, SearchError> {
        assert_eq!(self.nodes[node].kind, NodeKind::Model);
        if self.nodes[node].terminal.is_some() {
            return Ok(Vec::new());
        }
        if self.nodes[node].depth >= self.config.depth_cap {
            self.set_terminal(node, EngagementOutcome::NOT_TERMINATED);
            return Ok(Vec::new());
        }

        if self.user_child(node).is_none() {
            let context = self.path_turns(node);
            let seed = derive_seed(self.config.seed, "user", node as u64, 0);
            let user_turn = user_sim.respond(&self.condition, &context, seed)?;
            let outcome = detector.detect(self.condition.scenario, &user_turn)?;
            if outcome.terminated {
                let user = self.add_node(NodeKind::User, user_turn, node);
                self.nodes[user].terminal = Some(outcome);
                self.set_terminal(node, outcome);
                return Ok(Vec::new());
            }
            // Stage the children before touching the tree so one failing
            // agent call cannot leave a partial expansion behind.
            let mut full_context = context;
            full_context.push(user_turn.clone());
            let mut staged = Vec::with_capacity(self.config.expansion_width);
            for i in 0..self.config.expansion_width {
                let seed = derive_seed(self.config.seed, "model", node as u64, i as u64);
                staged.push(model.respond(&self.condition, &full_context, seed)?);
            }
            let user = self.add_node(NodeKind::User, user_turn, node);
            return Ok(staged
                .into_iter()
                .map(|turn| self.add_node(NodeKind::Model, turn, user))
                .collect());
        }

        let user = self.user_child(node).unwrap();
        self.expand_children_under(user, model, node)
    }

    /// Keeps the top-K unpruned model nodes at `depth` by criterion score
    /// (ties keep the lower creation id) and prunes the rest with their
    /// subtrees. Depths at or under the cap are a no-op.
    pub fn prune_depth(&mut self, depth: usize, criterion: &dyn PruneCriterion) -> Vec<NodeId> {
        let live: Vec<NodeId> = self
            .model_nodes_at_depth(depth)
            .iter()
            .copied()
            .filter(|&id| !self.nodes[id].pruned)
            .collect();
        if live.len() <= self.config.prune_cap {
            return Vec::new();
        }
        let mut scored: Vec<(NodeId, f64)> = live
            .iter()
            .map(|&id| (id, criterion.score(self, id)))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        let pruned: Vec<NodeId> = scored[self.config.prune_cap..]
            .iter()
            .map(|&(id, _)| id)
            .collect();
        for &id in &pruned {
            self.mark_subtree_pruned(id);
        }
        pruned
    }

    fn mark_subtree_pruned(&mut self, id: NodeId) {
        let mut stack = vec![id];
        while let Some(current) = stack.pop() {
            self.nodes[current].pruned = true;
            stack.extend(self.nodes[current].children.iter().copied());
        }
    }

    /// Structural validation used when loading persisted dumps: kinds
    /// alternate, texts are non-empty, every model node has at most one user
    /// child, and Q stays within [0, N].
    pub fn validate(&self) -> Result<(), String> {
        if self.nodes.is_empty() || self.nodes[ROOT].kind != NodeKind::User {
            return Err("root must be a user node".into());
        }
        for node in &self.nodes {
            node.turn.validate().map_err(|e| format!("node {}: {e}", node.id))?;
            let expected_role = match node.kind {
                NodeKind::User => Role::User,
                NodeKind::Model => Role::Model,
            };
            if node.turn.role != expected_role {
                return Err(format!("node {}: turn role does not match kind", node.id));
            }
            if let Some(parent) = node.parent {
                let parent_node = &self.nodes[parent];
                if parent_node.kind == node.kind {
                    return Err(format!("node {}: kinds do not alternate", node.id));
                }
                if node.depth != parent_node.depth + 1 {
                    return Err(format!("node {}: depth mismatch", node.id));
                }
            } else if node.id != ROOT {
                return Err(format!("node {}: only the root may lack a parent", node.id));
            }
            if node.kind == NodeKind::Model {
                let user_children = node
                    .children
                    .iter()
                    .filter(|&&c| self.nodes[c].kind == NodeKind::User)
                    .count();
                if user_children > 1 {
                    return Err(format!("node {}: more than one user child", node.id));
                }
            }
            if node.total_reward < -1e-12 || node.total_reward > node.visits as f64 + 1e-9 {
                return Err(format!(
                    "node {}: Q = {} outside [0, N = {}]",
                    node.id, node.total_reward, node.visits
                ));
            }
            if let Some(outcome) = node.terminal {
                if !outcome.validate() {
                    return Err(format!("node {}: inconsistent terminal outcome", node.id));
                }
            }
        }
        Ok(())
    }

    pub fn to_dump(&self) -> TreeDump {
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                (
                    n.id as u64,
                    NodeDump {
                        kind: n.kind,
                        turn: n.turn.clone(),
                        parent: n.parent.map(|p| p as u64),
                        children: n.children.iter().map(|&c| c as u64).collect(),
                        visits: n.visits,
                        total_reward: n.total_reward,
                        depth: n.depth,
                        pruned: n.pruned,
                        terminal: n.terminal,
                    },
                )
            })
            .collect();
        TreeDump {
            condition: self.condition.clone(),
            root: ROOT as u64,
            nodes,
        }
    }

    /// Rebuilds a tree from a dump. Node ids must be dense from 0; the
    /// evaluation log is not part of the dump and comes back empty.
    pub fn from_dump(dump: TreeDump, config: SearchConfig) -> Result<DialogueTree, String> {
        let len = dump.nodes.len();
        if len == 0 {
            return Err("dump has no nodes".into());
        }
        if dump.root != ROOT as u64 {
            return Err("root id must be 0".into());
        }
        let mut nodes = Vec::with_capacity(len);
        for (expected, (&id, node)) in dump.nodes.iter().enumerate() {
            if id != expected as u64 {
                return Err(format!("node ids must be dense: missing {expected}"));
            }
            for &child in &node.children {
                if child as usize >= len {
                    return Err(format!("node {id}: child {child} out of range"));
                }
            }
            nodes.push(DialogueNode {
                id: id as NodeId,
                kind: node.kind,
                turn: node.turn.clone(),
                parent: node.parent.map(|p| p as NodeId),
                children: node.children.iter().map(|&c| c as NodeId).collect(),
                visits: node.visits,
                total_reward: node.total_reward,
                depth: node.depth,
                terminal: node.terminal,
                pruned: node.pruned,
            });
        }
        let mut depth_registry: Vec<Vec<NodeId>> = Vec::new();
        let mut terminal_trajectories = 0;
        for node in &nodes {
            if node.kind == NodeKind::Model {
                if depth_registry.len() <= node.depth {
                    depth_registry.resize(node.depth + 1, Vec::new());
                }
                depth_registry[node.depth].push(node.id);
            }
            if node.terminal.is_some() {
                terminal_trajectories += 1;
            }
        }
        let tree = DialogueTree {
            nodes,
            condition: dump.condition,
            config,
            depth_registry,
            events: Vec::new(),
            terminal_trajectories,
        };
        tree.validate()?;
        Ok(tree)
    }
}

/// Derives a child seed from the run seed and a structural position.
pub fn derive_seed(root_seed: u64, domain: &str, a: u64, b: u64) -> u64 {
    let mut bytes = Vec::with_capacity(domain.len() + 16);
    bytes.extend_from_slice(domain.as_bytes());
    bytes.extend_from_slice(&a.to_le_bytes());
    bytes.extend_from_slice(&b.to_le_bytes());
    fnv1a64(root_seed, &bytes)
}

/// Runs the full search for one condition: the user simulator opens the
/// conversation, then select/expand/evaluate/backpropagate iterations run
/// until the iteration budget is exhausted, the trajectory budget is met, or
/// no expandable node remains. Pruning runs after every expansion that
/// pushes a depth over K. Agent errors abort with the partial tree attached.
pub fn search(
    condition: &UserCondition,
    user_sim: &dyn AgentPolicy,
    model: &dyn AgentPolicy,
    config: &SearchConfig,
    detector: &EngagementDetector,
    criterion: &dyn PruneCriterion,
) -> Result<DialogueTree, Box<SearchFailure>> {
    let fail = |error: SearchError, partial: Option<DialogueTree>| {
        Box::new(SearchFailure { error, partial })
    };
    if let Err(e) = config.validate() {
        return Err(fail(e, None));
    }

    let opening_seed = derive_seed(config.seed, "root", 0, 0);
    let opening = user_sim
        .respond(condition, &[], opening_seed)
        .map_err(|e| fail(e.into(), None))?;
    let outcome = detector
        .detect(condition.scenario, &opening)
        .map_err(|e| fail(e.into(), None))?;
    let mut tree = DialogueTree::new(condition.clone(), config.clone(), opening);
    if outcome.terminated {
        tree.set_terminal(ROOT, outcome);
        return Ok(tree);
    }

    let mut iterations_left = config.iteration_budget;

    // Bootstrap: the root user node behaves like a freshly generated user
    // node, so its first e model children count as the first expansion.
    match tree.expand_children_under(ROOT, model, ROOT) {
        Ok(children) => {
            tree.backpropagate(ROOT, 0.0);
            if let Some(&first) = children.first() {
                let depth = tree.node(first).depth;
                if tree.unpruned_model_count_at(depth) > config.prune_cap {
                    tree.prune_depth(depth, criterion);
                }
            }
            iterations_left -= 1;
        }
        Err(e) => return Err(fail(e, Some(tree))),
    }

    while iterations_left > 0 {
        iterations_left -= 1;
        if tree.terminal_trajectories() >= config.trajectory_budget {
            break;
        }
        if !tree.has_expandable() {
            break;
        }
        let selected = match tree.select() {
            Ok(id) => id,
            Err(SearchError::Exhausted) => break,
            Err(e) => return Err(fail(e, Some(tree))),
        };
        if tree.node(selected).terminal.is_some() {
            let reward = tree.leaf_reward(selected);
            tree.backpropagate(selected, reward);
            continue;
        }
        let created = match tree.expand(selected, user_sim, model, detector) {
            Ok(created) => created,
            Err(e) => return Err(fail(e, Some(tree))),
        };
        if tree.node(selected).terminal.is_some() {
            let reward = tree.leaf_reward(selected);
            tree.backpropagate(selected, reward);
        } else {
            let user = tree
                .user_child(selected)
                .expect("non-terminal expansion creates the user child");
            tree.backpropagate(user, 0.0);
            if let Some(&first) = created.first() {
                let depth = tree.node(first).depth;
                if tree.unpruned_model_count_at(depth) > config.prune_cap {
                    tree.prune_depth(depth, criterion);
                }
            }
        }
    }
    Ok(tree)
}

// --- serialized dump --------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeDump {
    pub condition: UserCondition,
    pub root: u64,
    pub nodes: BTreeMap<u64, NodeDump>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDump {
    pub kind: NodeKind,
    pub turn: Turn,
    pub parent: Option<u64>,
    pub children: Vec<u64>,
    #[serde(rename = "N")]
    pub visits: u64,
    #[serde(rename = "Q")]
    pub total_reward: f64,
    pub depth: usize,
    pub pruned: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terminal: Option<EngagementOutcome>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{ScriptedPersuadeeSimulator, ScriptedSeekerSimulator, ToyPolicy};
    use crate::dialogue::Scenario;
    use crate::engagement::EngagementDetector;

    fn es_condition(desc: &str) -> UserCondition {
        UserCondition::new(Scenario::EmotionalSupport, desc, "c").unwrap()
    }

    fn small_config(seed: u64) -> SearchConfig {
        SearchConfig {
            exploration_constant: std::f64::consts::SQRT_2,
            expansion_width: 3,
            depth_cap: 9,
            prune_cap: 81,
            trajectory_budget: 81,
            iteration_budget: 60,
            seed,
            criterion: PruneCriterionKind::StateAlignment,
        }
    }

    fn fixture_tree(c: f64) -> DialogueTree {
        let mut config = small_config(0);
        config.exploration_constant = c;
        DialogueTree::new(
            es_condition("work"),
            config,
            Turn::user("work worries me").unwrap(),
        )
    }

    fn run_es_search(seed: u64, budget: usize) -> DialogueTree {
        let condition = es_condition("worried about work and sleep");
        let mut config = small_config(seed);
        config.iteration_budget = budget;
        let seeker = ScriptedSeekerSimulator::default();
        let policy = ToyPolicy::support_default();
        let detector = EngagementDetector::shipped();
        let criterion = StateAlignmentCriterion {
            embedder: crate::scoring::HashedBowEmbedder::default(),
        };
        search(&condition, &seeker, &policy, &config, &detector, &criterion).unwrap()
    }

    /// Independent value oracle: replays the evaluation log and checks every
    /// node's Q/N against the per-subtree event totals, exactly.
    fn assert_value_consistency(tree: &DialogueTree) {
        let mut expected_q = vec![0.0f64; tree.len()];
        let mut expected_n = vec![0u64; tree.len()];
        for &(node, reward) in tree.events() {
            let mut cursor = Some(node);
            while let Some(id) = cursor {
                expected_q[id] += reward;
                expected_n[id] += 1;
                cursor = tree.node(id).parent;
            }
        }
        for node in tree.nodes() {
            assert_eq!(node.visits, expected_n[node.id], "N at node {}", node.id);
            assert_eq!(
                node.total_reward, expected_q[node.id],
                "Q at node {}",
                node.id
            );
        }
    }

    #[test]
    fn ucb_examples() {
        assert_eq!(ucb_value(0.0, 0, 5, 1.4), f64::INFINITY);
        let v = ucb_value(2.0, 4, 8, std::f64::consts::SQRT_2);
        assert!((v - 1.519666990168809).abs() < 1e-12);
        assert_eq!(ucb_value(3.0, 3, 3, 0.0), 1.0);
    }

    #[test]
    fn select_single_unvisited_child() {
        let mut tree = fixture_tree(std::f64::consts::SQRT_2);
        let only = tree.insert_model_child(ROOT, Turn::model("a").unwrap());
        assert_eq!(tree.select().unwrap(), only);
    }

    #[test]
    fn select_prefers_higher_value_on_equal_exploration() {
        let mut tree = fixture_tree(std::f64::consts::SQRT_2);
        let a = tree.insert_model_child(ROOT, Turn::model("a").unwrap());
        let b = tree.insert_model_child(ROOT, Turn::model("b").unwrap());
        tree.set_node_stats(ROOT, 1.0, 2);
        tree.set_node_stats(a, 1.0, 1);
        tree.set_node_stats(b, 0.0, 1);
        assert_eq!(tree.select().unwrap(), a);
    }

    #[test]
    fn select_matches_brute_force_on_three_level_fixture() {
        // Hand-built tree: root -> {m1, m2}; m1 -> u -> {m3, m4}.
        let mut tree = fixture_tree(std::f64::consts::SQRT_2);
        let m1 = tree.insert_model_child(ROOT, Turn::model("m1").unwrap());
        let m2 = tree.insert_model_child(ROOT, Turn::model("m2").unwrap());
        let u = tree.insert_user_child(m1, Turn::user("u").unwrap());
        let m3 = tree.insert_model_child(u, Turn::model("m3").unwrap());
        let m4 = tree.insert_model_child(u, Turn::model("m4").unwrap());
        let _ = tree.insert_user_child(m3, Turn::user("u3").unwrap());
        tree.set_node_stats(ROOT, 4.0, 8);
        tree.set_node_stats(m1, 3.0, 5);
        tree.set_node_stats(m2, 1.0, 3);
        tree.set_node_stats(u, 3.0, 5);
        tree.set_node_stats(m3, 2.0, 3);
        tree.set_node_stats(m4, 1.0, 2);

        // m1 is fully expanded only if its user child has e = 3 children; it
        // has 2, so select stops at m1 if it wins the root UCB choice. Force
        // the walk deeper by treating m1 as full.
        let mut config = tree.config().clone();
        config.expansion_width = 2;
        let tree = DialogueTree { config, ..tree };

        // Brute-force UCB evaluation of the same walk.
        let root_pick = if tree.ucb_score(m1) >= tree.ucb_score(m2) { m1 } else { m2 };
        assert_eq!(root_pick, m1, "fixture is built so m1 wins at the root");
        let leaf_pick = if tree.ucb_score(m3) > tree.ucb_score(m4)
            || (tree.ucb_score(m3) == tree.ucb_score(m4) && m3 < m4)
        {
            m3
        } else {
            m4
        };
        assert_eq!(tree.select().unwrap(), leaf_pick);
    }

    #[test]
    fn select_on_childless_root_is_exhausted() {
        let tree = fixture_tree(1.0);
        assert!(matches!(tree.select(), Err(SearchError::Exhausted)));
    }

    #[test]
    fn greedy_selection_converges_to_higher_mean_child() {
        let mut tree = fixture_tree(1e-12);
        let a = tree.insert_model_child(ROOT, Turn::model("a").unwrap());
        let b = tree.insert_model_child(ROOT, Turn::model("b").unwrap());
        tree.set_node_stats(ROOT, 3.0, 4);
        tree.set_node_stats(a, 2.0, 2); // mean 1.0
        tree.set_node_stats(b, 1.0, 2); // mean 0.5
        for _ in 0..10 {
            let picked = tree.select().unwrap();
            assert_eq!(picked, a);
            tree.backpropagate(a, 1.0);
        }
    }

    #[test]
    fn backpropagate_updates_whole_ancestor_chain() {
        let mut tree = fixture_tree(1.0);
        let m1 = tree.insert_model_child(ROOT, Turn::model("m1").unwrap());
        let u1 = tree.insert_user_child(m1, Turn::user("u1").unwrap());
        let m2 = tree.insert_model_child(u1, Turn::model("m2").unwrap());
        let u2 = tree.insert_user_child(m2, Turn::user("u2").unwrap());
        tree.backpropagate(u2, 1.0);
        for id in [ROOT, m1, u1, m2, u2] {
            assert_eq!(tree.node(id).visits, 1);
            assert_eq!(tree.node(id).total_reward, 1.0);
        }
        tree.backpropagate(u2, 0.0);
        for id in [ROOT, m1, u1, m2, u2] {
            assert_eq!(tree.node(id).visits, 2);
            assert_eq!(tree.node(id).total_reward, 1.0);
        }
        assert_value_consistency(&tree);
    }

    #[test]
    fn expansion_creates_one_user_child_and_e_model_children() {
        let condition = es_condition("worried about work and sleep and family");
        let mut tree = DialogueTree::new(
            condition.clone(),
            small_config(3),
            ScriptedSeekerSimulator::default()
                .respond(&condition, &[], 0)
                .unwrap(),
        );
        let policy = ToyPolicy::support_default();
        let m = tree
            .expand_children_under(ROOT, &policy, ROOT)
            .unwrap()[0];
        let seeker = ScriptedSeekerSimulator::default();
        let created = tree
            .expand(m, &seeker, &policy, &EngagementDetector::shipped())
            .unwrap();
        assert_eq!(created.len(), 3);
        let user = tree.user_child(m).unwrap();
        assert_eq!(tree.node(user).children.len(), 3);
        assert_eq!(tree.node(m).children.len(), 1, "single user child");
    }

    #[test]
    fn terminal_user_turn_stops_expansion_with_outcome() {
        let condition =
            UserCondition::new(Scenario::Persuasion, "(cares_about, children)", "p").unwrap();
        let mut config = small_config(0);
        config.criterion = PruneCriterionKind::AccumulatedSentiment;
        let mut tree = DialogueTree::new(
            condition.clone(),
            config,
            Turn::user("Hi, what is this about?").unwrap(),
        );
        // Warm persuadee: rapport has been built, the ask triggers donation.
        let sim = ScriptedPersuadeeSimulator::new(6, 5, 8);
        let m = tree.insert_model_child(
            ROOT,
            Turn::model("Would you consider making a small donation today?").unwrap(),
        );
        let policy = ToyPolicy::persuasion_default();
        let created = tree
            .expand(m, &sim, &policy, &EngagementDetector::shipped())
            .unwrap();
        assert!(created.is_empty());
        let outcome = tree.node(m).terminal.expect("node marked terminal");
        assert!(outcome.terminated && outcome.engaged);
        assert_eq!(outcome.level, 0.75, "warmth 6 of 8 donates $1.50");
        let user = tree.user_child(m).unwrap();
        assert!(tree.node(user).children.is_empty());
    }

    #[test]
    fn depth_cap_marks_node_terminal_with_zero_reward() {
        let condition = es_condition("work");
        let mut config = small_config(0);
        config.depth_cap = 1;
        let mut tree =
            DialogueTree::new(condition, config, Turn::user("work bothers me").unwrap());
        let m = tree.insert_model_child(ROOT, Turn::model("tell me more").unwrap());
        let created = tree
            .expand(
                m,
                &ScriptedSeekerSimulator::default(),
                &ToyPolicy::support_default(),
                &EngagementDetector::shipped(),
            )
            .unwrap();
        assert!(created.is_empty());
        assert_eq!(tree.leaf_reward(m), 0.0);
        assert!(tree.node(m).terminal.is_some());
    }

    #[test]
    fn prune_under_cap_is_noop() {
        let mut tree = fixture_tree(1.0);
        for i in 0..3 {
            tree.insert_model_child(ROOT, Turn::model(format!("m{i}")).unwrap());
        }
        let pruned = tree.prune_depth(1, &|_: &DialogueTree, _: NodeId| 0.0);
        assert!(pruned.is_empty());
        assert_eq!(tree.unpruned_model_count_at(1), 3);
    }

    #[test]
    fn prune_keeps_top_k_and_breaks_ties_by_id() {
        let tree = fixture_tree(1.0);
        let mut config = tree.config().clone();
        config.prune_cap = 2;
        let mut tree = DialogueTree { config, ..tree };
        let ids: Vec<NodeId> = (0..4)
            .map(|i| tree.insert_model_child(ROOT, Turn::model(format!("m{i}")).unwrap()))
            .collect();
        // Scores: 0.9, 0.5, 0.5, 0.1 with a tie at the cut boundary.
        let scores = vec![0.9, 0.5, 0.5, 0.1];
        let by_id = ids.clone();
        let criterion = move |_: &DialogueTree, id: NodeId| {
            scores[by_id.iter().position(|&x| x == id).unwrap()]
        };
        let pruned = tree.prune_depth(1, &criterion);
        assert_eq!(pruned, vec![ids[2], ids[3]], "tie keeps the lower id");
        assert_eq!(tree.unpruned_model_count_at(1), 2);
        assert!(!tree.node(ids[0]).pruned);
        assert!(!tree.node(ids[1]).pruned);
    }

    #[test]
    fn pruned_subtrees_never_get_selected() {
        let tree = fixture_tree(1.0);
        let mut config = tree.config().clone();
        config.prune_cap = 1;
        let mut tree = DialogueTree { config, ..tree };
        let a = tree.insert_model_child(ROOT, Turn::model("a").unwrap());
        let b = tree.insert_model_child(ROOT, Turn::model("b").unwrap());
        let bu = tree.insert_user_child(b, Turn::user("bu").unwrap());
        let bm = tree.insert_model_child(bu, Turn::model("bm").unwrap());
        let keep_a = move |_: &DialogueTree, id: NodeId| if id == a { 1.0 } else { 0.0 };
        tree.prune_depth(1, &keep_a);
        assert!(tree.node(b).pruned);
        assert!(tree.node(bu).pruned, "subtrees are pruned recursively");
        assert!(tree.node(bm).pruned);
        for _ in 0..5 {
            let picked = tree.select().unwrap();
            assert_eq!(picked, a);
            tree.backpropagate(a, 0.0);
        }
    }

    #[test]
    fn search_is_deterministic_per_seed() {
        let a = run_es_search(11, 50);
        let b = run_es_search(11, 50);
        let dump_a = serde_json::to_string(&a.to_dump()).unwrap();
        let dump_b = serde_json::to_string(&b.to_dump()).unwrap();
        assert_eq!(dump_a, dump_b, "byte-identical dumps for equal seeds");
        let c = run_es_search(12, 50);
        assert_ne!(dump_a, serde_json::to_string(&c.to_dump()).unwrap());
    }

    #[test]
    fn search_finds_engaged_terminal_in_solvable_environment() {
        let tree = run_es_search(7, 200);
        let engaged = tree
            .nodes()
            .any(|n| n.terminal.is_some_and(|o| o.engaged));
        assert!(engaged, "engaged terminal discovered within 200 iterations");
        assert_value_consistency(&tree);
    }

    #[test]
    fn search_budget_one_does_exactly_one_expansion() {
        let tree = run_es_search(3, 1);
        assert_eq!(tree.len(), 1 + 3, "root plus e bootstrap children");
        assert_eq!(tree.events().len(), 1);
    }

    #[test]
    fn search_q_over_n_stays_in_unit_interval() {
        for seed in [1, 5, 9] {
            let tree = run_es_search(seed, 80);
            for node in tree.nodes() {
                if node.visits > 0 {
                    let v = node.mean_value();
                    assert!((0.0..=1.0).contains(&v), "node {} has Q/N = {v}", node.id);
                }
            }
            assert_value_consistency(&tree);
        }
    }

    #[test]
    fn search_respects_trajectory_budget() {
        let condition = es_condition("worried about work");
        let mut config = small_config(2);
        config.trajectory_budget = 2;
        config.iteration_budget = 500;
        let tree = search(
            &condition,
            &ScriptedSeekerSimulator::default(),
            &ToyPolicy::support_default(),
            &config,
            &EngagementDetector::shipped(),
            &StateAlignmentCriterion { embedder: crate::scoring::HashedBowEmbedder::default() },
        )
        .unwrap();
        assert!(tree.terminal_trajectories() >= 2);
        assert!(tree.terminal_trajectories() <= 3, "stops soon after the budget");
    }

    #[test]
    fn dump_round_trips_through_json() {
        let tree = run_es_search(4, 40);
        let dump = tree.to_dump();
        let json = serde_json::to_string(&dump).unwrap();
        let parsed: TreeDump = serde_json::from_str(&json).unwrap();
        let rebuilt = DialogueTree::from_dump(parsed, tree.config().clone()).unwrap();
        assert_eq!(rebuilt.len(), tree.len());
        for (a, b) in tree.nodes().zip(rebuilt.nodes()) {
            assert_eq!(a.visits, b.visits);
            assert_eq!(a.total_reward, b.total_reward);
            assert_eq!(a.turn, b.turn);
            assert_eq!(a.pruned, b.pruned);
        }
    }

    #[test]
    fn alternation_holds_on_every_search_tree() {
        let tree = run_es_search(6, 60);
        tree.validate().unwrap();
        for node in tree.nodes() {
            crate::dialogue::validate_turn_sequence(&tree.path_turns(node.id)).unwrap();
        }
    }

    #[test]
    fn sentiment_criterion_orders_paths_by_accumulated_sentiment() {
        let condition =
            UserCondition::new(Scenario::Persuasion, "(cares_about, children)", "p").unwrap();
        let mut config = small_config(0);
        config.criterion = PruneCriterionKind::AccumulatedSentiment;
        let mut tree = DialogueTree::new(
            condition,
            config,
            Turn::user("I'm skeptical, this feels like a scam.").unwrap(),
        );
        let happy = tree.insert_model_child(ROOT, Turn::model("m0").unwrap());
        let hu = tree.insert_user_child(happy, Turn::user("That's wonderful and trustworthy.").unwrap());
        let happy2 = tree.insert_model_child(hu, Turn::model("m1").unwrap());
        let grumpy = tree.insert_model_child(ROOT, Turn::model("m2").unwrap());
        let gu = tree.insert_user_child(grumpy, Turn::user("This is a waste and a scam.").unwrap());
        let grumpy2 = tree.insert_model_child(gu, Turn::model("m3").unwrap());
        let criterion = SentimentPathCriterion {
            lexicon: SentimentLexicon::shipped(),
            gamma: 0.9,
        };
        assert!(criterion.score(&tree, happy2) > criterion.score(&tree, grumpy2));
    }

    #[test]
    fn state_alignment_criterion_rewards_matching_predictions() {
        let tree = fixture_tree(1.0);
        let sim_state = crate::dialogue::StructuredState {
            feelings: vec!["anxious about work".into()],
            needs: vec!["to be heard about work".into()],
            ..Default::default()
        };
        let mut root_turn = tree.node(ROOT).turn.clone();
        root_turn.state = Some(sim_state.clone());
        let mut tree = DialogueTree::new(
            tree.condition().clone(),
            tree.config().clone(),
            root_turn,
        );
        let good = tree.insert_model_child(
            ROOT,
            Turn::new(Role::Model, "about work", Some(sim_state)).unwrap(),
        );
        let bad = tree.insert_model_child(
            ROOT,
            Turn::new(
                Role::Model,
                "generic",
                Some(crate::dialogue::StructuredState {
                    observations: vec!["unrelated".into()],
                    ..Default::default()
                }),
            )
            .unwrap(),
        );
        let stateless = tree.insert_model_child(ROOT, Turn::model("no state").unwrap());
        let criterion = StateAlignmentCriterion {
            embedder: crate::scoring::HashedBowEmbedder::default(),
        };
        let g = criterion.score(&tree, good);
        let b = criterion.score(&tree, bad);
        let s = criterion.score(&tree, stateless);
        assert_eq!(g, 1.0);
        assert!(b < g && b > s);
        assert_eq!(s, f64::NEG_INFINITY);
    }
}
