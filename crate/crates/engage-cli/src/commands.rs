//! Stage implementations behind the CLI subcommands: explore, mine-pairs,
//! train-rm, gen-dt, train-dpo, bon, eval, pipeline and validate.

use crate::artifacts::{
    load_conditions, read_json, read_jsonl, sha256_file, write_json, write_jsonl, Manifest,
};
use crate::config::{load_policy, RunConfig};
use crate::error::CliError;
use crate::evalrun::{evaluate, EvalReport};
use engage_core::agents::{TopicMirrorPolicy, ToyPolicy};
use engage_core::dialogue::{AgentPolicy, Turn, UserCondition};
use engage_core::dpo::{train_dpo, TrainReport};
use engage_core::engagement::EngagementDetector;
use engage_core::mcts::{self, derive_seed, DialogueTree, TreeDump};
use engage_core::preference::{
    compose_dataset, generate_ranked_pairs, mine_pairs, train_reward_model, BonPolicy, GenReport,
    PreferencePair, RewardModel,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Well-known artifact locations under the output directory.
pub struct OutPaths {
    pub out_dir: PathBuf,
}

impl OutPaths {
    pub fn new(out_dir: &Path) -> OutPaths {
        OutPaths {
            out_dir: out_dir.to_path_buf(),
        }
    }

    pub fn tree_dir(&self) -> PathBuf {
        self.out_dir.join("trees")
    }

    pub fn tree(&self, condition_id: &str) -> PathBuf {
        self.tree_dir().join(format!("tree_{}.json", sanitize(condition_id)))
    }

    pub fn partial_tree(&self, condition_id: &str) -> PathBuf {
        self.tree_dir()
            .join(format!("tree_{}.partial.json", sanitize(condition_id)))
    }

    pub fn policy_baseline(&self) -> PathBuf {
        self.out_dir.join("policy_baseline.json")
    }

    pub fn pairs_mined(&self) -> PathBuf {
        self.out_dir.join("pairs_mined.jsonl")
    }

    pub fn reward_model(&self) -> PathBuf {
        self.out_dir.join("reward_model.json")
    }

    pub fn pairs_ranked(&self) -> PathBuf {
        self.out_dir.join("pairs_ranked.jsonl")
    }

    pub fn dt_report(&self) -> PathBuf {
        self.out_dir.join("dt_report.json")
    }

    pub fn dataset(&self) -> PathBuf {
        self.out_dir.join("dataset.jsonl")
    }

    pub fn policy_aligned(&self) -> PathBuf {
        self.out_dir.join("policy_aligned.json")
    }

    pub fn policy_reference(&self) -> PathBuf {
        self.out_dir.join("policy_reference.json")
    }

    pub fn dpo_report(&self) -> PathBuf {
        self.out_dir.join("dpo_report.json")
    }

    pub fn eval_report(&self, name: &str) -> PathBuf {
        self.out_dir.join(format!("eval_{}.json", sanitize(name)))
    }

    pub fn eval_summary(&self) -> PathBuf {
        self.out_dir.join("eval_summary.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.out_dir.join("manifest.json")
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect()
}

/// Builds one search tree per condition and dumps it as JSON. Conditions
/// whose dump already exists are skipped unless `force` is set; a failing
/// agent persists the partial tree under a `.partial.json` suffix.
pub fn cmd_explore(config: &RunConfig, force: bool) -> Result<Vec<PathBuf>, CliError> {
    let conditions = load_conditions(&config.conditions, config.scenario)?;
    let mut seen = std::collections::HashSet::new();
    for condition in &conditions {
        if !seen.insert(sanitize(&condition.id)) {
            return Err(CliError::Config(format!(
                "duplicate condition id (after sanitizing): {}",
                condition.id
            )));
        }
    }
    let paths = OutPaths::new(&config.out_dir);
    let user_sim = config.user_agent()?;
    let model = config.model_agent()?;
    let detector = EngagementDetector::shipped();
    let criterion = config.prune_criterion();
    let stage_seed = config.stage_seed("explore");
    let base_search = config.search_config();

    if let Ok(baseline) = config.baseline_policy() {
        write_json(&paths.policy_baseline(), &baseline)?;
    }

    let results: Vec<Result<(PathBuf, bool), CliError>> = conditions
        .par_iter()
        .map(|condition| {
            let dump_path = paths.tree(&condition.id);
            if dump_path.exists() && !force {
                return Ok((dump_path, false));
            }
            let mut search_config = base_search.clone();
            search_config.seed = derive_seed(
                stage_seed,
                "condition",
                engage_core::features::fnv1a64(0, condition.id.as_bytes()),
                0,
            );
            match mcts::search(
                condition,
                user_sim.as_ref(),
                model.as_ref(),
                &search_config,
                &detector,
                criterion.as_ref(),
            ) {
                Ok(tree) => {
                    write_json(&dump_path, &tree.to_dump())?;
                    Ok((dump_path, true))
                }
                Err(failure) => {
                    if let Some(partial) = failure.partial {
                        write_json(&paths.partial_tree(&condition.id), &partial.to_dump())?;
                    }
                    Err(CliError::Agent(format!(
                        "condition {}: {}",
                        condition.id, failure.error
                    )))
                }
            }
        })
        .collect();

    let mut written = Vec::new();
    let mut skipped = 0usize;
    for result in results {
        let (path, fresh) = result?;
        if !fresh {
            skipped += 1;
        }
        written.push(path);
    }
    log::info!(
        "explore: {} trees ({} skipped as existing)",
        written.len(),
        skipped
    );
    let mut artifacts = written;
    if paths.policy_baseline().exists() {
        artifacts.push(paths.policy_baseline());
    }
    artifacts.sort();
    Ok(artifacts)
}

fn load_trees(config: &RunConfig) -> Result<Vec<DialogueTree>, CliError> {
    let paths = OutPaths::new(&config.out_dir);
    let dir = paths.tree_dir();
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| CliError::io(&format!("listing {}", dir.display()), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|ext| ext == "json")
                && !p.to_string_lossy().ends_with(".partial.json")
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Config(format!(
            "no tree dumps under {}; run explore first",
            dir.display()
        )));
    }
    let search = config.search_config();
    files
        .iter()
        .map(|path| {
            let dump: TreeDump = read_json(path)?;
            DialogueTree::from_dump(dump, search.clone())
                .map_err(|e| CliError::Invariant(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Mines chosen/rejected sibling pairs from every explored tree.
pub fn cmd_mine_pairs(config: &RunConfig) -> Result<PathBuf, CliError> {
    let paths = OutPaths::new(&config.out_dir);
    let trees = load_trees(config)?;
    let mut pairs = Vec::new();
    for tree in &trees {
        pairs.extend(mine_pairs(tree, &config.mining));
    }
    for (i, pair) in pairs.iter().enumerate() {
        pair.validate()
            .map_err(|e| CliError::Invariant(format!("mined pair {i}: {e}")))?;
    }
    write_jsonl(&paths.pairs_mined(), &pairs)?;
    log::info!("mine-pairs: {} pairs from {} trees", pairs.len(), trees.len());
    Ok(paths.pairs_mined())
}

/// Trains the pairwise reward model on the mined pairs.
pub fn cmd_train_rm(config: &RunConfig) -> Result<PathBuf, CliError> {
    let paths = OutPaths::new(&config.out_dir);
    let pairs: Vec<PreferencePair> = read_jsonl(&paths.pairs_mined())?;
    let rm = train_reward_model(&pairs, &config.reward_model)
        .map_err(|e| CliError::Config(format!("train-rm: {e}")))?;
    write_json(&paths.reward_model(), &rm)?;
    log::info!(
        "train-rm: trained on {} pairs, final loss {:?}",
        pairs.len(),
        rm.final_loss()
    );
    Ok(paths.reward_model())
}

/// Samples response pairs from the policy on contexts drawn from the
/// explored trees and ranks them with the reward model.
pub fn cmd_gen_dt(config: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let paths = OutPaths::new(&config.out_dir);
    let rm: RewardModel = read_json(&paths.reward_model())?;
    let policy = config.baseline_policy()?;

    // Every unpruned, non-terminal user node across the trees contributes
    // its root path; these stand in for the policy's training contexts.
    let trees = load_trees(config)?;
    let mut contexts: Vec<(String, Vec<Turn>)> = Vec::new();
    for tree in &trees {
        for node in tree.nodes() {
            use engage_core::mcts::NodeKind;
            if node.kind == NodeKind::User && !node.pruned && node.terminal.is_none() {
                let context = tree.path_turns(node.id);
                let key = serde_json::to_string(&context).expect("context serializes");
                contexts.push((key, context));
            }
        }
    }
    contexts.sort_by(|a, b| a.0.cmp(&b.0));
    contexts.dedup_by(|a, b| a.0 == b.0);
    let contexts: Vec<Vec<Turn>> = contexts.into_iter().map(|(_, c)| c).collect();

    let (pairs, report) = generate_ranked_pairs(
        &policy,
        &contexts,
        &rm,
        config.stage_seed("gen-dt"),
        config.dt.retry_cap,
    );
    write_jsonl(&paths.pairs_ranked(), &pairs)?;
    write_json(&paths.dt_report(), &report)?;
    log::info!(
        "gen-dt: {} pairs from {} contexts ({} skipped identical, {} tied)",
        report.emitted,
        contexts.len(),
        report.skipped_identical,
        report.skipped_tied
    );
    Ok(vec![paths.pairs_ranked(), paths.dt_report()])
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DpoRunReport {
    pub dataset_size: usize,
    pub mined_pairs: usize,
    pub ranked_pairs: usize,
    pub report: TrainReport,
}

/// Composes the alignment dataset from mined and ranked pairs and trains the
/// policy with the DPO objective.
pub fn cmd_train_dpo(config: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let paths = OutPaths::new(&config.out_dir);
    let mined: Vec<PreferencePair> = read_jsonl(&paths.pairs_mined())?;
    let ranked: Vec<PreferencePair> = read_jsonl(&paths.pairs_ranked())?;
    let mined_count = mined.len();
    let ranked_count = ranked.len();
    let dataset = compose_dataset(mined, ranked, config.dt.ratio);
    write_jsonl(&paths.dataset(), &dataset)?;

    let policy = config.baseline_policy()?;
    let out = train_dpo(&policy, &dataset, &config.dpo_config()).map_err(|e| match e {
        engage_core::dpo::DpoError::UnknownResponse { .. } => {
            CliError::Invariant(format!("train-dpo: {e}"))
        }
        other => CliError::Config(format!("train-dpo: {other}")),
    })?;
    write_json(&paths.policy_aligned(), &out.policy)?;
    write_json(&paths.policy_reference(), &out.reference)?;
    write_json(
        &paths.dpo_report(),
        &DpoRunReport {
            dataset_size: dataset.len(),
            mined_pairs: mined_count,
            ranked_pairs: ranked_count,
            report: out.report.clone(),
        },
    )?;
    log::info!(
        "train-dpo: margin {:.4} -> {:.4} over {} pairs",
        out.report.initial_mean_margin,
        out.report.final_mean_margin(),
        dataset.len()
    );
    Ok(vec![
        paths.dataset(),
        paths.policy_aligned(),
        paths.policy_reference(),
        paths.dpo_report(),
    ])
}

/// Which policy an evaluation or BoN call runs.
#[derive(Debug, Clone)]
pub enum PolicyRef {
    Baseline,
    Aligned,
    Bon,
    Mirror,
    File(PathBuf),
}

impl PolicyRef {
    pub fn parse(text: &str) -> PolicyRef {
        match text {
            "baseline" => PolicyRef::Baseline,
            "aligned" => PolicyRef::Aligned,
            "bon" => PolicyRef::Bon,
            "mirror" => PolicyRef::Mirror,
            other => PolicyRef::File(PathBuf::from(other)),
        }
    }

    pub fn label(&self) -> String {
        match self {
            PolicyRef::Baseline => "baseline".into(),
            PolicyRef::Aligned => "aligned".into(),
            PolicyRef::Bon => "bon".into(),
            PolicyRef::Mirror => "mirror".into(),
            PolicyRef::File(path) => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "custom".into()),
        }
    }

    pub fn build(&self, config: &RunConfig) -> Result<Box<dyn AgentPolicy>, CliError> {
        let paths = OutPaths::new(&config.out_dir);
        Ok(match self {
            PolicyRef::Baseline => Box::new(config.baseline_policy()?),
            PolicyRef::Aligned => Box::new(load_policy(&paths.policy_aligned())?),
            PolicyRef::Mirror => Box::new(TopicMirrorPolicy),
            PolicyRef::File(path) => Box::new(load_policy(path)?),
            PolicyRef::Bon => {
                let rm: RewardModel = read_json(&paths.reward_model())?;
                Box::new(BonPolicy {
                    policy: config.baseline_policy()?,
                    scorer: rm,
                    n: config.eval.bon_n,
                })
            }
        })
    }
}

/// Runs the interactive evaluation for one policy and persists the report.
pub fn cmd_eval(
    config: &RunConfig,
    policy_ref: &PolicyRef,
    episodes: Option<usize>,
) -> Result<(EvalReport, PathBuf), CliError> {
    let paths = OutPaths::new(&config.out_dir);
    let conditions = load_conditions(&config.conditions, config.scenario)?;
    let user_sim = config.user_agent()?;
    let policy = policy_ref.build(config)?;
    let report = evaluate(
        user_sim.as_ref(),
        policy.as_ref(),
        &conditions,
        config.scenario,
        &EngagementDetector::shipped(),
        episodes.unwrap_or(config.eval.episodes),
        config.eval_turn_cap(),
        config.stage_seed("eval"),
    );
    let path = paths.eval_report(&policy_ref.label());
    write_json(&path, &report)?;
    log::info!(
        "eval[{}]: engaged rate {:.4}, mean donation {:.4}, episodes {}",
        policy_ref.label(),
        report.engaged_rate,
        report.mean_donation,
        report.episodes
    );
    Ok((report, path))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalHeadline {
    pub engaged_rate: f64,
    pub mean_donation: f64,
    pub mean_turns: Option<f64>,
    pub mean_turns_overall: f64,
}

impl From<&EvalReport> for EvalHeadline {
    fn from(report: &EvalReport) -> Self {
        EvalHeadline {
            engaged_rate: report.engaged_rate,
            mean_donation: report.mean_donation,
            mean_turns: report.mean_turns,
            mean_turns_overall: report.mean_turns_overall,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub baseline: EvalHeadline,
    pub bon: EvalHeadline,
    pub aligned: EvalHeadline,
}

/// Best-of-N over a single user utterance; prints nothing, returns the
/// selected response.
pub fn cmd_bon(
    config: &RunConfig,
    context_text: &str,
    n: Option<usize>,
    policy_ref: &PolicyRef,
) -> Result<String, CliError> {
    let paths = OutPaths::new(&config.out_dir);
    let rm: RewardModel = read_json(&paths.reward_model())?;
    let policy = match policy_ref {
        PolicyRef::Baseline => config.baseline_policy()?,
        PolicyRef::Aligned => load_policy(&paths.policy_aligned())?,
        PolicyRef::File(path) => load_policy(path)?,
        other => {
            return Err(CliError::Config(format!(
                "bon needs a toy policy, not {other:?}"
            )))
        }
    };
    let context = vec![Turn::user(context_text)
        .map_err(|e| CliError::Config(format!("bad context: {e}")))?];
    Ok(engage_core::preference::best_of_n(
        &policy,
        &context,
        &rm,
        n.unwrap_or(config.eval.bon_n),
        config.stage_seed("bon"),
    ))
}

/// The full pipeline: explore, mine, train-rm, gen-dt, train-dpo, eval.
/// Fails fast on the first failing stage, leaving earlier artifacts in
/// place; on success writes a manifest with content hashes per stage.
pub fn cmd_pipeline(config: &RunConfig, force: bool) -> Result<PathBuf, CliError> {
    let paths = OutPaths::new(&config.out_dir);
    let mut manifest = Manifest::new(config.scenario, config.seed);

    let trees = cmd_explore(config, force)?;
    manifest.push_stage("explore", &config.out_dir, &trees)?;

    let mined = cmd_mine_pairs(config)?;
    manifest.push_stage("mine-pairs", &config.out_dir, &[mined])?;

    let rm = cmd_train_rm(config)?;
    manifest.push_stage("train-rm", &config.out_dir, &[rm])?;

    let dt = cmd_gen_dt(config)?;
    manifest.push_stage("gen-dt", &config.out_dir, &dt)?;

    let dpo = cmd_train_dpo(config)?;
    manifest.push_stage("train-dpo", &config.out_dir, &dpo)?;

    let (baseline_report, baseline_path) = cmd_eval(config, &PolicyRef::Baseline, None)?;
    let (bon_report, bon_path) = cmd_eval(config, &PolicyRef::Bon, None)?;
    let (aligned_report, aligned_path) = cmd_eval(config, &PolicyRef::Aligned, None)?;
    let summary = EvalSummary {
        baseline: (&baseline_report).into(),
        bon: (&bon_report).into(),
        aligned: (&aligned_report).into(),
    };
    write_json(&paths.eval_summary(), &summary)?;
    manifest.push_stage(
        "eval",
        &config.out_dir,
        &[baseline_path, bon_path, aligned_path, paths.eval_summary()],
    )?;

    write_json(&paths.manifest(), &manifest)?;
    Ok(paths.manifest())
}

#[derive(Debug, Default, Serialize)]
pub struct ValidationSummary {
    pub trees: usize,
    pub mined_pairs: usize,
    pub ranked_pairs: usize,
    pub dataset_pairs: usize,
    pub policies: usize,
    pub eval_reports: usize,
    pub manifest_artifacts: usize,
}

/// Revalidates every persisted artifact in the output directory against its
/// schema and invariants, and re-hashes everything the manifest mentions.
pub fn cmd_validate(config: &RunConfig) -> Result<ValidationSummary, CliError> {
    let paths = OutPaths::new(&config.out_dir);
    let mut summary = ValidationSummary::default();

    if paths.tree_dir().exists() {
        let trees = load_trees(config)?;
        for tree in &trees {
            for node in tree.nodes() {
                engage_core::dialogue::validate_turn_sequence(&tree.path_turns(node.id))
                    .map_err(|e| {
                        CliError::Invariant(format!(
                            "tree {}: node {}: {e}",
                            tree.condition().id,
                            node.id
                        ))
                    })?;
                if node.visits > 0 {
                    let value = node.mean_value();
                    if !(0.0..=1.0).contains(&value) {
                        return Err(CliError::Invariant(format!(
                            "tree {}: node {} has Q/N = {value}",
                            tree.condition().id,
                            node.id
                        )));
                    }
                }
            }
        }
        summary.trees = trees.len();
    }

    summary.mined_pairs = validate_pairs_file(&paths.pairs_mined())?;
    summary.ranked_pairs = validate_pairs_file(&paths.pairs_ranked())?;
    summary.dataset_pairs = validate_pairs_file(&paths.dataset())?;

    for path in [
        paths.policy_baseline(),
        paths.policy_aligned(),
        paths.policy_reference(),
    ] {
        if path.exists() {
            let _: ToyPolicy = read_json(&path)?;
            summary.policies += 1;
        }
    }
    if paths.reward_model().exists() {
        let _: RewardModel = read_json(&paths.reward_model())?;
    }

    for name in ["baseline", "bon", "aligned"] {
        let path = paths.eval_report(name);
        if path.exists() {
            let report: EvalReport = read_json(&path)?;
            let rebuilt = EvalReport::recompute(report.per_episode.clone());
            if rebuilt.engaged_rate != report.engaged_rate
                || rebuilt.mean_donation != report.mean_donation
            {
                return Err(CliError::Invariant(format!(
                    "{}: headline numbers do not match per-episode records",
                    path.display()
                )));
            }
            summary.eval_reports += 1;
        }
    }

    if paths.manifest().exists() {
        let manifest: Manifest = read_json(&paths.manifest())?;
        for stage in &manifest.stages {
            for artifact in &stage.artifacts {
                let path = config.out_dir.join(&artifact.path);
                let fresh = sha256_file(&path)?;
                if fresh != artifact.sha256 {
                    return Err(CliError::Invariant(format!(
                        "manifest hash mismatch for {}",
                        artifact.path
                    )));
                }
                summary.manifest_artifacts += 1;
            }
        }
    }

    Ok(summary)
}

/// Parses a pair file and checks every pair's invariants; missing files
/// count as zero pairs.
fn validate_pairs_file(path: &Path) -> Result<usize, CliError> {
    if !path.exists() {
        return Ok(0);
    }
    let pairs: Vec<PreferencePair> = read_jsonl(path)?;
    for (i, pair) in pairs.iter().enumerate() {
        pair.validate()
            .map_err(|e| CliError::Invariant(format!("{}:{}: {e}", path.display(), i + 1)))?;
    }
    Ok(pairs.len())
}

/// Loads conditions for other tooling (re-exported for tests).
pub fn conditions_for(config: &RunConfig) -> Result<Vec<UserCondition>, CliError> {
    load_conditions(&config.conditions, config.scenario)
}

/// Reads a GenReport back (re-exported for tests).
pub fn read_dt_report(config: &RunConfig) -> Result<GenReport, CliError> {
    read_json(&OutPaths::new(&config.out_dir).dt_report())
}
