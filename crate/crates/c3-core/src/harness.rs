//! Budget-matched experiment harness.
//!
//! One run trains a tabular two-agent policy on the synthetic suite for a
//! fixed number of epochs, one parameter update per task instance, exactly
//! `budget_b` terminal scoring events per update (asserted at runtime), then
//! evaluates greedily and by sampling, runs the mechanistic diagnostics on the
//! final checkpoint, and writes plain delimited text files. Every method
//! shares the environment, initialization, evaluator, instance ordering, and
//! budget; they differ only in how terminal scores become policy-gradient
//! weights:
//!
//! - `c3`: frozen-context replay buckets with leave-one-out credit;
//! - `c3_wo_loo`: same buckets, coupled full-sample baseline;
//! - `c3_wo_replay`: fresh full episodes, full-sample centering, no context
//!   matching;
//! - `magrpo`: group-centered episode returns broadcast across the episode;
//! - `mappo`: tabular per-context critic baseline on terminal returns;
//! - `sft_eval_only`: no updates, evaluation of the initialization.
//!
//! Outputs are byte-identical for identical (config, seed) at any worker
//! count: all randomness is label-addressed and all reductions are ordered.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::credit::{aggregate, c3_credit, clip_return, full_sample_credit, CreditError, CreditTuple};
use crate::diagnostics::{
    fidelity, influence, target_advantage_exact, within_context_variance, DiagError,
    InfluenceTable, INFLUENCE_ALPHA, INFLUENCE_TOP_K,
};
use crate::env::{evaluate, generate_tasks, EnvError, EnvSpec};
use crate::optimizer::{
    magrpo_credits, mappo_advantage, ppo_update, CriticTable, OptimConfig, OptimError,
};
use crate::policy::{PolicyError, PolicyTable, Snapshot};
use crate::protocol::{render_context, Protocol, Transcript, TranscriptEntry};
use crate::replay::{allocate_budget, dump_buckets, Bucket, Engine, ReplayError, ReplayOutcome};
use crate::rng::{derive_update_seed, mix64, StreamLabel, StreamPurpose};

/// Label tags for run phases that need their own seed space.
const EVAL_TAG: u64 = 0x45564131;
const DIAG_TAG: u64 = 0x44494147;
const ORDER_TAG: u64 = 0x4f524452;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Credit(#[from] CreditError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("budget ledger violated at update {update}: consumed {consumed}, budget {budget}")]
    LedgerViolation {
        update: u64,
        consumed: u64,
        budget: u64,
    },
    #[error("decision-sample split violated at update {update}: {got} samples, expected {expected}")]
    SampleSplitViolation { update: u64, got: u64, expected: u64 },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Training method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    C3,
    Mappo,
    Magrpo,
    C3WoReplay,
    C3WoLoo,
    SftEvalOnly,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::C3 => "c3",
            Method::Mappo => "mappo",
            Method::Magrpo => "magrpo",
            Method::C3WoReplay => "c3_wo_replay",
            Method::C3WoLoo => "c3_wo_loo",
            Method::SftEvalOnly => "sft_eval_only",
        }
    }

    fn is_replay_method(&self) -> bool {
        matches!(self, Method::C3 | Method::C3WoLoo)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "c3" => Ok(Method::C3),
            "mappo" => Ok(Method::Mappo),
            "magrpo" => Ok(Method::Magrpo),
            "c3_wo_replay" => Ok(Method::C3WoReplay),
            "c3_wo_loo" => Ok(Method::C3WoLoo),
            "sft_eval_only" => Ok(Method::SftEvalOnly),
            other => Err(format!(
                "unknown method {other:?}; expected one of c3, mappo, magrpo, c3_wo_replay, c3_wo_loo, sft_eval_only"
            )),
        }
    }
}

/// How the replay budget maps onto buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    /// One replay per candidate in bucket order until the budget is spent,
    /// over every bucket the reference rollouts produced.
    RoundRobin,
    /// The deterministic two-agent split: distinct upstream rollouts, all
    /// replay budget on downstream buckets (`budget = rollouts x
    /// alternatives`).
    #[serde(rename = "preset_2a")]
    Preset2a,
}

fn default_budget() -> usize {
    8
}
fn default_epochs() -> usize {
    5
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn default_true() -> bool {
    true
}
fn default_pass_k() -> u64 {
    10
}
fn default_samples_n() -> u64 {
    10
}
fn default_reference_rollouts() -> usize {
    1
}
fn default_alternatives() -> usize {
    4
}
fn default_attempts() -> usize {
    256
}
fn default_workers() -> usize {
    1
}
fn default_critic_step() -> f64 {
    0.25
}
fn default_diag_tasks() -> usize {
    16
}
fn default_diag_replays() -> usize {
    4
}

/// Final-policy evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "default_true")]
    pub greedy: bool,
    #[serde(default = "default_pass_k")]
    pub pass_k: u64,
    #[serde(default = "default_samples_n")]
    pub samples_n: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            greedy: true,
            pass_k: default_pass_k(),
            samples_n: default_samples_n(),
        }
    }
}

/// Final-checkpoint diagnostics settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagConfig {
    #[serde(default = "default_diag_tasks")]
    pub tasks: usize,
    #[serde(default = "default_alternatives")]
    pub alternatives: usize,
    #[serde(default = "default_diag_replays")]
    pub replays_per_candidate: usize,
}

impl Default for DiagConfig {
    fn default() -> Self {
        DiagConfig {
            tasks: default_diag_tasks(),
            alternatives: default_alternatives(),
            replays_per_candidate: default_diag_replays(),
        }
    }
}

/// Complete experiment description. The TOML config file mirrors these field
/// names; command-line flags override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub env: EnvSpec,
    pub method: Method,
    pub budget_b: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub optim: OptimConfig,
    pub crn: bool,
    pub eval: EvalConfig,
    /// Reference rollouts per instance per update (unscored).
    pub reference_rollouts: usize,
    /// Distinct alternatives requested per bucket.
    pub n_alternatives: usize,
    /// Sampling attempts before dedup gives up.
    pub max_sample_attempts: usize,
    pub allocation: Allocation,
    pub workers: usize,
    pub critic_step_size: f64,
    pub diagnostics: DiagConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvSpec::default(),
            method: Method::C3,
            budget_b: default_budget(),
            epochs: default_epochs(),
            seeds: default_seeds(),
            optim: OptimConfig::default(),
            crn: true,
            eval: EvalConfig::default(),
            reference_rollouts: default_reference_rollouts(),
            n_alternatives: default_alternatives(),
            max_sample_attempts: default_attempts(),
            allocation: Allocation::RoundRobin,
            workers: default_workers(),
            critic_step_size: default_critic_step(),
            diagnostics: DiagConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.env.validate()?;
        self.optim.validate()?;
        if self.seeds.is_empty() {
            return Err(HarnessError::InvalidConfig("seeds must be nonempty".into()));
        }
        if self.method.is_replay_method() && self.budget_b < 2 {
            return Err(HarnessError::InvalidConfig(
                "replay methods need budget_b >= 2".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(HarnessError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.reference_rollouts == 0 {
            return Err(HarnessError::InvalidConfig(
                "reference_rollouts must be >= 1".into(),
            ));
        }
        if self.n_alternatives < 2 {
            return Err(HarnessError::InvalidConfig(
                "n_alternatives must be >= 2".into(),
            ));
        }
        if self.workers == 0 {
            return Err(HarnessError::InvalidConfig("workers must be >= 1".into()));
        }
        if self.allocation == Allocation::Preset2a {
            if self.budget_b != self.reference_rollouts * self.n_alternatives {
                return Err(HarnessError::InvalidConfig(format!(
                    "the 2A preset pins budget_b = reference_rollouts x n_alternatives ({} x {})",
                    self.reference_rollouts, self.n_alternatives
                )));
            }
            if self.env.plan_vocab_size < self.reference_rollouts {
                return Err(HarnessError::InvalidConfig(
                    "the 2A preset needs plan_vocab_size >= reference_rollouts distinct plans"
                        .into(),
                ));
            }
            if self.env.answer_vocab_size < self.n_alternatives {
                return Err(HarnessError::InvalidConfig(
                    "the 2A preset needs answer_vocab_size >= n_alternatives".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let config: RunConfig = toml::from_str(text)
            .map_err(|e| HarnessError::InvalidConfig(format!("config parse error: {e}")))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }
}

/// One ledger row; rows accumulate per update.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRow {
    pub step: u64,
    pub epoch: usize,
    pub tse_cumulative: u64,
    pub actions_generated_cumulative: u64,
    pub mean_training_return: f64,
}

/// Evaluation metrics of one policy over the task suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub greedy_return: f64,
    pub greedy_success: f64,
    pub pass_at_1: f64,
    pub pass_at_k: f64,
}

/// Diagnostics record of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagRecord {
    pub fidelity_rho: f64,
    pub mean_within_context_variance: f64,
    pub mean_influence_nats: f64,
    pub evaluator_calls: u64,
    /// Per-bucket rows: (event type, kappa, candidates, variance, influence).
    pub buckets: Vec<(usize, u64, usize, f64, f64)>,
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub metrics: EvalMetrics,
    pub ledger: Vec<LedgerRow>,
    pub decision_samples_per_update: Vec<u64>,
    pub diagnostics: DiagRecord,
    /// Serialized per-replay bucket rows from the diagnostics pass.
    pub bucket_dump: String,
    /// Serialized credit tuples from the diagnostics pass.
    pub tuple_dump: String,
    /// Final policy table, checkpointed alongside the metrics.
    pub final_policy: PolicyTable,
}

/// A full run: one method, all seeds.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub method: Method,
    pub outcomes: Vec<SeedOutcome>,
}

struct UpdateResult {
    mean_training_return: f64,
    decision_samples: u64,
}

fn role_vocabs(protocol: &Protocol, env: &EnvSpec) -> Vec<usize> {
    let terminal_role = protocol.event(protocol.terminal_event).role;
    (0..protocol.role_count())
        .map(|role| {
            if role == terminal_role {
                env.answer_vocab_size
            } else {
                env.plan_vocab_size
            }
        })
        .collect()
}

/// Fisher-Yates permutation of task ids, a pure function of the run seed and
/// shared by every method.
fn task_order(seed: u64, task_count: usize) -> Vec<u64> {
    let mut stream = StreamLabel::new(mix64(seed, ORDER_TAG), StreamPurpose::TaskGen, 0).stream();
    let mut order: Vec<u64> = (0..task_count as u64).collect();
    for i in (1..order.len()).rev() {
        let j = (stream.uniform() * (i + 1) as f64) as usize;
        order.swap(i, j);
    }
    order
}

/// Runs one experiment: every seed of `config`, writing one output directory
/// per seed under `out_dir/<method>/seed_<seed>/`.
pub fn run(config: &RunConfig, out_dir: &Path) -> Result<RunSummary, HarnessError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| HarnessError::InvalidConfig(format!("worker pool: {e}")))?;
    let mut outcomes = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let outcome = pool.install(|| run_seed(config, seed))?;
        write_outputs(config, &outcome, out_dir)?;
        outcomes.push(outcome);
    }
    Ok(RunSummary {
        method: config.method,
        outcomes,
    })
}

fn run_seed(config: &RunConfig, seed: u64) -> Result<SeedOutcome, HarnessError> {
    let protocol = Protocol::two_agent();
    let tasks = generate_tasks(&config.env, seed)?;
    let mut engine = Engine::new(protocol.clone(), tasks, config.env.noise_sd);
    let vocabs = role_vocabs(&protocol, &config.env);
    let mut policy = PolicyTable::new(vocabs);
    let reference = Snapshot::of(&policy);
    let mut critic = CriticTable::new(config.critic_step_size);

    let order = task_order(seed, config.env.task_count);
    let mut ledger: Vec<LedgerRow> = Vec::new();
    let mut decision_samples = Vec::new();
    let mut update_index: u64 = 0;

    if config.method != Method::SftEvalOnly {
        for epoch in 0..config.epochs {
            for &task_id in &order {
                let update_seed = derive_update_seed(seed, update_index);
                let evals_before = engine.stats.evaluations();
                let actions_before = engine.stats.actions();

                let result = match config.method {
                    Method::C3 | Method::C3WoLoo => run_replay_update(
                        config,
                        &mut engine,
                        &mut policy,
                        &reference,
                        task_id,
                        update_seed,
                        config.method == Method::C3,
                    )?,
                    Method::Mappo | Method::Magrpo | Method::C3WoReplay => run_episode_update(
                        config,
                        &mut engine,
                        &mut policy,
                        &reference,
                        &mut critic,
                        task_id,
                        update_seed,
                    )?,
                    Method::SftEvalOnly => unreachable!("sft runs no updates"),
                };

                let consumed = engine.stats.evaluations() - evals_before;
                if consumed != config.budget_b as u64 {
                    return Err(HarnessError::LedgerViolation {
                        update: update_index,
                        consumed,
                        budget: config.budget_b as u64,
                    });
                }
                let sampled = engine.stats.actions() - actions_before;
                debug_assert_eq!(sampled, result.decision_samples);
                if config.allocation == Allocation::Preset2a && config.method.is_replay_method() {
                    let expected = (config.reference_rollouts
                        + config.reference_rollouts * config.n_alternatives)
                        as u64;
                    if sampled != expected {
                        return Err(HarnessError::SampleSplitViolation {
                            update: update_index,
                            got: sampled,
                            expected,
                        });
                    }
                }
                if matches!(
                    config.method,
                    Method::Mappo | Method::Magrpo | Method::C3WoReplay
                ) {
                    // scored episodes sample every occurrence
                    let expected =
                        (config.budget_b * engine.protocol.event_types.len()) as u64;
                    if sampled != expected {
                        return Err(HarnessError::SampleSplitViolation {
                            update: update_index,
                            got: sampled,
                            expected,
                        });
                    }
                }

                update_index += 1;
                decision_samples.push(sampled);
                ledger.push(LedgerRow {
                    step: update_index,
                    epoch,
                    tse_cumulative: engine.stats.evaluations(),
                    actions_generated_cumulative: engine.stats.actions(),
                    mean_training_return: result.mean_training_return,
                });
            }
        }
    }

    let metrics = evaluate_policy(config, &mut engine, &policy, seed)?;
    let diagnostics = run_diagnostics(config, &mut engine, &policy, &critic, seed)?;

    Ok(SeedOutcome {
        seed,
        metrics,
        ledger,
        decision_samples_per_update: decision_samples,
        diagnostics: diagnostics.record,
        bucket_dump: diagnostics.bucket_dump,
        tuple_dump: diagnostics.tuple_dump,
        final_policy: policy,
    })
}

/// One fixed-context replay update (the c3 path; `loo` picks the baseline).
#[allow(clippy::too_many_arguments)]
fn run_replay_update(
    config: &RunConfig,
    engine: &mut Engine,
    policy: &mut PolicyTable,
    reference: &Snapshot,
    task_id: u64,
    update_seed: u64,
    loo: bool,
) -> Result<UpdateResult, HarnessError> {
    let actions_before = engine.stats.actions();
    let snapshot = Snapshot::of(policy);

    let records = match config.allocation {
        Allocation::Preset2a => engine.reference_rollouts_distinct(
            &snapshot,
            task_id,
            config.reference_rollouts,
            update_seed,
            config.max_sample_attempts,
        )?,
        Allocation::RoundRobin => engine.reference_rollouts(
            &snapshot,
            &[task_id],
            config.reference_rollouts,
            update_seed,
        )?,
    };
    let mut buckets = engine.build_buckets(records)?;
    if config.allocation == Allocation::Preset2a {
        let terminal = engine.protocol.terminal_event;
        buckets.retain(|b| b.event_type == terminal);
    }

    // alternative sampling; buckets without two distinct candidates drop out
    let mut retained: Vec<Bucket> = Vec::with_capacity(buckets.len());
    for mut bucket in buckets {
        match engine.sample_alternatives(
            &snapshot,
            &bucket,
            config.n_alternatives,
            config.max_sample_attempts,
        ) {
            Ok(alternatives) => {
                if config.allocation == Allocation::Preset2a
                    && alternatives.len() != config.n_alternatives
                {
                    return Err(ReplayError::DedupExhausted {
                        needed: config.n_alternatives,
                        attempts: config.max_sample_attempts,
                    }
                    .into());
                }
                bucket.candidates = alternatives;
                retained.push(bucket);
            }
            Err(_) => continue,
        }
    }
    let mut buckets = retained;

    let sizes: Vec<usize> = buckets.iter().map(|b| b.candidates.len()).collect();
    let counts = allocate_budget(&sizes, config.budget_b)?;
    for (bucket, bucket_counts) in buckets.iter_mut().zip(counts.iter()) {
        bucket.candidates.truncate(bucket_counts.len());
        bucket.counts = bucket_counts.clone();
    }
    buckets.retain(|b| !b.candidates.is_empty());

    // replays are independent jobs; ordered collect keeps determinism
    let jobs: Vec<(usize, usize)> = buckets
        .iter()
        .enumerate()
        .flat_map(|(bi, b)| (0..b.candidates.len()).map(move |ci| (bi, ci)))
        .collect();
    let shared: &Engine = engine;
    let results: Vec<Result<Vec<ReplayOutcome>, ReplayError>> = jobs
        .par_iter()
        .map(|&(bi, ci)| {
            let bucket = &buckets[bi];
            shared.replay(
                &snapshot,
                &bucket.representative,
                bucket.candidates[ci],
                bucket.counts[ci],
                config.crn,
            )
        })
        .collect();
    let mut outcome_iter = results.into_iter();
    for (bi, ci) in &jobs {
        let outcomes = outcome_iter.next().expect("one result per job")?;
        debug_assert_eq!(*ci, buckets[*bi].replay_returns.len());
        buckets[*bi]
            .replay_returns
            .push(outcomes.iter().map(|o| o.ret).collect());
    }

    let mut all_returns = Vec::new();
    let mut tuples = Vec::new();
    for bucket in &buckets {
        let means = bucket.candidate_means();
        let advantages = if loo {
            c3_credit(&means, &bucket.counts)?
        } else {
            full_sample_credit(&means, &bucket.counts)?
        };
        let role = engine.protocol.event(bucket.event_type).role;
        for (j, &candidate) in bucket.candidates.iter().enumerate() {
            tuples.push(CreditTuple {
                event_type: bucket.event_type,
                role,
                key: bucket.key,
                candidate,
                advantage: advantages[j],
                behavior_log_prob: snapshot.log_prob(role, &bucket.key, candidate),
            });
        }
        all_returns.extend(bucket.replay_returns.iter().flatten().copied());
    }

    ppo_update(policy, &snapshot, reference, &tuples, &config.optim)?;
    Ok(UpdateResult {
        mean_training_return: aggregate(&all_returns)?,
        decision_samples: engine.stats.actions() - actions_before,
    })
}

/// One full-episode update (mappo / magrpo / c3_wo_replay).
fn run_episode_update(
    config: &RunConfig,
    engine: &mut Engine,
    policy: &mut PolicyTable,
    reference: &Snapshot,
    critic: &mut CriticTable,
    task_id: u64,
    update_seed: u64,
) -> Result<UpdateResult, HarnessError> {
    let actions_before = engine.stats.actions();
    let snapshot = Snapshot::of(policy);
    let mut episodes = Vec::with_capacity(config.budget_b);
    for episode in 0..config.budget_b as u64 {
        episodes.push(engine.run_episode(
            &snapshot,
            update_seed,
            task_id,
            episode,
            true,
            crate::replay::ActionSelection::Sample,
        )?);
    }
    let returns: Vec<f64> = episodes
        .iter()
        .map(|e| e.episode_return.expect("scored episodes return"))
        .collect();

    let tuples = episode_tuples(config.method, &episodes, &returns, critic)?;
    if config.method == Method::Mappo {
        // regress the critic after advantages are formed
        for episode in &episodes {
            let observed = clip_return(episode.episode_return.expect("scored"));
            for sample in &episode.samples {
                critic.update(sample.event_type, &sample.key, observed);
            }
        }
    }

    ppo_update(policy, &snapshot, reference, &tuples, &config.optim)?;
    Ok(UpdateResult {
        mean_training_return: aggregate(&returns)?,
        decision_samples: engine.stats.actions() - actions_before,
    })
}

/// Credit tuples for one group of scored episodes. Group-centered and
/// full-sample credits are broadcast to every decision occurrence of their
/// episode; the critic method scores each occurrence against its own context
/// value.
fn episode_tuples(
    method: Method,
    episodes: &[crate::replay::EpisodeRecord],
    returns: &[f64],
    critic: &CriticTable,
) -> Result<Vec<CreditTuple>, HarnessError> {
    let episode_credits: Vec<f64> = match method {
        Method::Magrpo => magrpo_credits(returns)?,
        Method::C3WoReplay => {
            // full-sample centering across this instance's episodes
            full_sample_credit(returns, &vec![1; returns.len()])?
        }
        Method::Mappo => returns.iter().map(|&r| clip_return(r)).collect(),
        _ => unreachable!("episode tuples serve mappo, magrpo, c3_wo_replay"),
    };
    let mut tuples = Vec::new();
    for (episode, credit) in episodes.iter().zip(episode_credits.iter()) {
        for sample in &episode.samples {
            let token = sample.token.expect("scored episodes sample every action");
            let advantage = if method == Method::Mappo {
                mappo_advantage(
                    critic,
                    sample.event_type,
                    &sample.key,
                    episode.episode_return.expect("scored"),
                )
            } else {
                *credit
            };
            tuples.push(CreditTuple {
                event_type: sample.event_type,
                role: sample.role,
                key: sample.key,
                candidate: token,
                advantage,
                behavior_log_prob: sample.log_prob,
            });
        }
    }
    Ok(tuples)
}

/// Greedy and sampled evaluation of a policy over the whole suite.
pub fn evaluate_policy(
    config: &RunConfig,
    engine: &mut Engine,
    policy: &PolicyTable,
    seed: u64,
) -> Result<EvalMetrics, HarnessError> {
    let protocol = engine.protocol.clone();
    let tasks = engine.tasks.clone();

    // greedy: one deterministic episode per instance, zero evaluator noise
    let mut greedy_return = 0.0;
    let mut greedy_success = 0.0;
    for task in &tasks {
        let upstream = protocol.event(0);
        let plan_key = crate::protocol::context_key(&render_context(
            &task.observable_text,
            &Transcript::new(),
            upstream,
        ));
        let plan = policy.greedy_action(upstream.role, &plan_key);
        let mut prefix = Transcript::new();
        prefix.push(TranscriptEntry {
            node_id: 0,
            event_type: 0,
            action_token: plan,
            rendered_text: crate::protocol::render_action(plan),
        });
        let downstream = protocol.event(1);
        let answer_key = crate::protocol::context_key(&render_context(
            &task.observable_text,
            &prefix,
            downstream,
        ));
        let answer = policy.greedy_action(downstream.role, &answer_key);
        greedy_return += evaluate(task, plan, answer, 0.0)?.0;
        if task.delta(plan, answer) == task.delta_gain {
            greedy_success += 1.0;
        }
    }
    greedy_return /= tasks.len() as f64;
    greedy_success /= tasks.len() as f64;

    // sampled: n stochastic episodes per instance
    let eval_seed = mix64(seed, EVAL_TAG);
    let n = config.eval.samples_n;
    let k = config.eval.pass_k.min(n);
    let mut pass1_hits = 0u64;
    let mut pass_k_sum = 0.0;
    for task in &tasks {
        let mut correct = 0u64;
        for sample in 0..n {
            let record = engine.run_episode(
                policy,
                eval_seed,
                task.task_id,
                sample,
                true,
                crate::replay::ActionSelection::Sample,
            )?;
            let plan = record.plan.expect("scored");
            let answer = record.answer.expect("scored");
            if task.delta(plan, answer) == task.delta_gain {
                correct += 1;
            }
        }
        pass1_hits += correct;
        pass_k_sum += crate::diagnostics::pass_at_k(n, correct, k)?;
    }
    Ok(EvalMetrics {
        greedy_return,
        greedy_success,
        pass_at_1: pass1_hits as f64 / (n * tasks.len() as u64) as f64,
        pass_at_k: pass_k_sum / tasks.len() as f64,
    })
}

struct DiagOutput {
    record: DiagRecord,
    bucket_dump: String,
    tuple_dump: String,
}

/// Mechanistic diagnostics on the final checkpoint: shared replay buckets,
/// the method's own credit rule, exact target advantages, pooled fidelity,
/// within-context variance, and influence.
fn run_diagnostics(
    config: &RunConfig,
    engine: &mut Engine,
    policy: &PolicyTable,
    critic: &CriticTable,
    seed: u64,
) -> Result<DiagOutput, HarnessError> {
    let evals_before = engine.stats.evaluations();
    let snapshot = Snapshot::of(policy);
    let diag_seed = mix64(seed, DIAG_TAG);
    let task_ids: Vec<u64> =
        (0..config.diagnostics.tasks.min(config.env.task_count) as u64).collect();

    let records = engine.reference_rollouts(&snapshot, &task_ids, 1, diag_seed)?;
    let raw_buckets = engine.build_buckets(records)?;

    let mut buckets: Vec<Bucket> = Vec::new();
    let mut credits: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<Vec<f64>> = Vec::new();
    let mut influences: Vec<f64> = Vec::new();
    let mut tuples: Vec<CreditTuple> = Vec::new();
    let mut bucket_rows: Vec<(usize, u64, usize, f64, f64)> = Vec::new();

    for mut bucket in raw_buckets {
        let alternatives = match engine.sample_alternatives(
            &snapshot,
            &bucket,
            config.diagnostics.alternatives,
            config.max_sample_attempts,
        ) {
            Ok(a) => a,
            Err(_) => continue,
        };
        bucket.candidates = alternatives;
        let mut teammate_samples: Vec<(usize, Option<u32>)> = Vec::new();
        for (j, &candidate) in bucket.candidates.iter().enumerate() {
            let outcomes = engine.replay(
                &snapshot,
                &bucket.representative,
                candidate,
                config.diagnostics.replays_per_candidate,
                config.crn,
            )?;
            bucket
                .replay_returns
                .push(outcomes.iter().map(|o| o.ret).collect());
            bucket.counts.push(outcomes.len());
            teammate_samples.extend(outcomes.iter().map(|o| (j, o.first_teammate_action)));
        }

        let means = bucket.candidate_means();
        let assigned = match config.method {
            Method::C3 | Method::SftEvalOnly => c3_credit(&means, &bucket.counts)?,
            Method::C3WoLoo | Method::Magrpo | Method::C3WoReplay => {
                full_sample_credit(&means, &bucket.counts)?
            }
            Method::Mappo => means
                .iter()
                .map(|&m| m - critic.value(bucket.event_type, &bucket.key))
                .collect(),
        };
        let exact = target_advantage_exact(engine, &snapshot, &bucket.representative)?;
        let bucket_targets: Vec<f64> = bucket
            .candidates
            .iter()
            .map(|&c| exact[c as usize].delta)
            .collect();

        let table = InfluenceTable::from_samples(
            &teammate_samples,
            bucket.candidates.len(),
            INFLUENCE_TOP_K,
            INFLUENCE_ALPHA,
        );
        let bucket_influence = influence(&table)?;

        let role = engine.protocol.event(bucket.event_type).role;
        for (j, &candidate) in bucket.candidates.iter().enumerate() {
            tuples.push(CreditTuple {
                event_type: bucket.event_type,
                role,
                key: bucket.key,
                candidate,
                advantage: assigned[j],
                behavior_log_prob: snapshot.log_prob(role, &bucket.key, candidate),
            });
        }
        let n = assigned.len() as f64;
        let mean = assigned.iter().sum::<f64>() / n;
        let var = assigned.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
        bucket_rows.push((
            bucket.event_type,
            bucket.key.kappa,
            bucket.candidates.len(),
            var,
            bucket_influence,
        ));
        credits.push(assigned);
        targets.push(bucket_targets);
        influences.push(bucket_influence);
        buckets.push(bucket);
    }

    let pooled_credits: Vec<f64> = credits.iter().flatten().copied().collect();
    let pooled_targets: Vec<f64> = targets.iter().flatten().copied().collect();
    let fidelity_rho = if pooled_credits.len() >= 2 {
        fidelity(&pooled_credits, &pooled_targets)?
    } else {
        0.0
    };
    let mean_variance = within_context_variance(&credits)?;
    let mean_influence = if influences.is_empty() {
        0.0
    } else {
        influences.iter().sum::<f64>() / influences.len() as f64
    };

    Ok(DiagOutput {
        record: DiagRecord {
            fidelity_rho,
            mean_within_context_variance: mean_variance,
            mean_influence_nats: mean_influence,
            evaluator_calls: engine.stats.evaluations() - evals_before,
            buckets: bucket_rows,
        },
        bucket_dump: dump_buckets(&buckets, config.crn),
        tuple_dump: dump_credit_tuples(&tuples),
    })
}

/// Serializes credit tuples alongside bucket dumps:
/// (v, kappa, candidate, advantage, behavior log-probability).
pub fn dump_credit_tuples(tuples: &[CreditTuple]) -> String {
    let mut out = String::from("v\tkappa\tcandidate\tadvantage\tlogprob_b\n");
    for t in tuples {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            t.event_type, t.key.kappa, t.candidate, t.advantage, t.behavior_log_prob
        )
        .expect("writing to string");
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    std::fs::write(path, contents).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_outputs(
    config: &RunConfig,
    outcome: &SeedOutcome,
    out_dir: &Path,
) -> Result<(), HarnessError> {
    let dir = out_dir
        .join(config.method.as_str())
        .join(format!("seed_{}", outcome.seed));
    std::fs::create_dir_all(&dir).map_err(|source| HarnessError::Io {
        path: dir.clone(),
        source,
    })?;

    let mut curves = String::from("step\tepoch\ttse_cumulative\tmean_training_return\n");
    for row in &outcome.ledger {
        writeln!(
            curves,
            "{}\t{}\t{}\t{}",
            row.step, row.epoch, row.tse_cumulative, row.mean_training_return
        )
        .expect("writing to string");
    }
    write_file(&dir.join("curves.txt"), &curves)?;

    let mut ledger = String::from(
        "step\ttse_cumulative\tactions_generated_cumulative\tmean_training_return\tdecision_samples\n",
    );
    for (row, samples) in outcome
        .ledger
        .iter()
        .zip(outcome.decision_samples_per_update.iter())
    {
        writeln!(
            ledger,
            "{}\t{}\t{}\t{}\t{}",
            row.step,
            row.tse_cumulative,
            row.actions_generated_cumulative,
            row.mean_training_return,
            samples
        )
        .expect("writing to string");
    }
    write_file(&dir.join("ledger.txt"), &ledger)?;

    let m = &outcome.metrics;
    let final_metrics = format!(
        "method\tseed\tgreedy_return\tgreedy_success\tpass_at_1\tpass_at_k\tk\tn\ttse_total\tactions_total\tupdates\n{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
        config.method,
        outcome.seed,
        m.greedy_return,
        m.greedy_success,
        m.pass_at_1,
        m.pass_at_k,
        config.eval.pass_k,
        config.eval.samples_n,
        outcome.ledger.last().map_or(0, |r| r.tse_cumulative),
        outcome.ledger.last().map_or(0, |r| r.actions_generated_cumulative),
        outcome.ledger.len(),
    );
    write_file(&dir.join("final.txt"), &final_metrics)?;

    let d = &outcome.diagnostics;
    let mut diagnostics = format!(
        "method\tseed\tfidelity_rho\tmean_within_context_variance\tmean_influence_nats\tdiag_evaluator_calls\n{}\t{}\t{}\t{}\t{}\t{}\n",
        config.method,
        outcome.seed,
        d.fidelity_rho,
        d.mean_within_context_variance,
        d.mean_influence_nats,
        d.evaluator_calls,
    );
    diagnostics.push_str("v\tkappa\tcandidates\tcredit_variance\tinfluence_nats\n");
    for &(v, kappa, candidates, var, inf) in &d.buckets {
        writeln!(diagnostics, "{v}\t{kappa}\t{candidates}\t{var}\t{inf}")
            .expect("writing to string");
    }
    write_file(&dir.join("diagnostics.txt"), &diagnostics)?;

    write_file(&dir.join("bucket_dump.txt"), &outcome.bucket_dump)?;
    write_file(&dir.join("credit_tuples.txt"), &outcome.tuple_dump)?;
    outcome.final_policy.save(&dir.join("policy.txt"))?;
    Ok(())
}
