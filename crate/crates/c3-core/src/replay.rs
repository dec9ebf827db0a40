//! Reference rollouts, context buckets, alternative sampling, budget
//! allocation, and fixed-continuation replay.
//!
//! The engine executes episodes of one protocol over one synthetic task suite.
//! Reference rollouts run under a behavior snapshot, record a replay state at
//! every visited occurrence, and are never scored. Buckets group replay states
//! by (event type, context key) with a first-visit representative. Replaying a
//! candidate restarts from the representative's recorded prefix — no upstream
//! decision is ever re-executed — forces the candidate at the target
//! occurrence, samples every downstream decision from the snapshot, and
//! queries the terminal evaluator exactly once per replay.
//!
//! All randomness is addressed by stream labels, so anything here may run on
//! any number of workers without changing a single output bit. With common
//! random numbers enabled, replays of different candidates at the same replay
//! index share their continuation and noise streams; with it disabled, the
//! candidate token is folded into the labels.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::env::{evaluate, sample_noise, EnvError, TaskInstance};
use crate::policy::PolicyTable;
use crate::protocol::{
    build_episode_graph, context_key, render_action, render_context, ContextKey, FatalCollision,
    KeyRegistry, Protocol, ProtocolError, Transcript, TranscriptEntry,
};
use crate::rng::{mix64, StreamLabel, StreamPurpose};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReplayError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Collision(#[from] FatalCollision),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("reference rollouts require K >= 1")]
    NoRollouts,
    #[error("budget {budget} cannot fund any bucket (need at least 2 replays)")]
    BudgetInfeasible { budget: usize },
    #[error("could not sample {needed} distinct actions in {attempts} attempts")]
    DedupExhausted { needed: usize, attempts: usize },
    #[error("unknown task id {0}")]
    UnknownTask(u64),
}

/// Raised by alternative sampling when a bucket cannot produce two distinct
/// candidates; the bucket is dropped, the run continues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("bucket dropped: fewer than 2 distinct alternatives")]
pub struct BucketDropped;

/// Anchor sufficient to restart an episode at a target occurrence with its
/// context reproduced byte-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayState {
    pub task_id: u64,
    /// All transcript entries committed before the target, in canonical order.
    pub transcript_prefix: Transcript,
    pub target_occurrence: usize,
    /// Label prefix replays derive their streams from; `bucket_key` is
    /// finalized during bucket assembly.
    pub stream_base: StreamLabel,
}

/// One (event type, context key) instance: representative replay state,
/// deduplicated candidates, and their replay returns.
#[derive(Debug, Clone)]
pub struct Bucket {
    pub event_type: usize,
    pub key: ContextKey,
    pub representative: ReplayState,
    pub candidates: Vec<u32>,
    pub replay_returns: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl Bucket {
    /// Per-candidate mean of clipped replay returns.
    pub fn candidate_means(&self) -> Vec<f64> {
        self.replay_returns
            .iter()
            .map(|r| crate::credit::aggregate(r).expect("allocated candidates have replays"))
            .collect()
    }

    /// 64-bit stream key folding the event type into the context key, so two
    /// buckets sharing a context under different event types never share
    /// streams.
    pub fn stream_key(event_type: usize, key: &ContextKey) -> u64 {
        mix64(event_type as u64, key.kappa)
    }
}

/// Monotone counters for budget accounting. Atomic sums are order-free, so
/// totals are identical at any worker count.
#[derive(Debug, Default)]
pub struct EngineStats {
    /// Every sampled macro-action: reference, alternative, replay
    /// continuation, and full-episode decisions.
    pub actions_sampled: AtomicU64,
    /// Terminal scoring events.
    pub evaluator_calls: AtomicU64,
}

impl EngineStats {
    pub fn actions(&self) -> u64 {
        self.actions_sampled.load(Ordering::Relaxed)
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluator_calls.load(Ordering::Relaxed)
    }
}

/// How an episode picks actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSelection {
    Sample,
    /// Argmax with ties to the lowest token index.
    Greedy,
}

/// One decision occurrence visited by an episode.
#[derive(Debug, Clone)]
pub struct OccurrenceSample {
    pub event_type: usize,
    pub role: usize,
    pub key: ContextKey,
    pub token: Option<u32>,
    pub log_prob: f64,
}

/// Everything an episode produced.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub replay_states: Vec<(usize, ReplayState)>,
    pub samples: Vec<OccurrenceSample>,
    pub episode_return: Option<f64>,
    pub plan: Option<u32>,
    pub answer: Option<u32>,
}

/// Outcome of a single replay rollout.
#[derive(Debug, Clone, Copy)]
pub struct ReplayOutcome {
    pub ret: f64,
    /// First downstream action by an agent other than the target's role, for
    /// the influence diagnostic. `None` maps to the EMPTY symbol.
    pub first_teammate_action: Option<u32>,
}

/// Episode executor over one protocol and task suite.
pub struct Engine {
    pub protocol: Protocol,
    pub tasks: Vec<TaskInstance>,
    pub noise_sd: f64,
    pub stats: EngineStats,
    registry: KeyRegistry,
}

impl Engine {
    pub fn new(protocol: Protocol, tasks: Vec<TaskInstance>, noise_sd: f64) -> Self {
        Engine {
            protocol,
            tasks,
            noise_sd,
            stats: EngineStats::default(),
            registry: KeyRegistry::new(),
        }
    }

    pub fn task(&self, task_id: u64) -> Result<&TaskInstance, ReplayError> {
        self.tasks
            .get(task_id as usize)
            .filter(|t| t.task_id == task_id)
            .ok_or(ReplayError::UnknownTask(task_id))
    }

    /// The (plan, answer) pair the evaluator reads from a finished transcript:
    /// the terminal occurrence's token, and the token of the terminal's first
    /// parent (0 when the terminal has no parents).
    fn scored_pair(&self, transcript: &Transcript) -> (u32, u32) {
        let terminal = self.protocol.event(self.protocol.terminal_event);
        let answer = transcript
            .token_of(terminal.id)
            .expect("scored episodes commit the terminal action");
        let plan = terminal
            .parents
            .first()
            .and_then(|&p| transcript.token_of(p))
            .unwrap_or(0);
        (plan, answer)
    }

    /// Runs one full episode. Unscored episodes (reference recording) skip
    /// both the evaluator and the terminal sink's action — nothing downstream
    /// consumes it — which is what keeps reference rollouts free of budget.
    pub fn run_episode(
        &mut self,
        policy: &PolicyTable,
        update_seed: u64,
        task_id: u64,
        episode_index: u64,
        scored: bool,
        selection: ActionSelection,
    ) -> Result<EpisodeRecord, ReplayError> {
        let task = self.task(task_id)?.clone();
        let graph = build_episode_graph(&self.protocol, task_id)?;
        let mut action_stream = StreamLabel::new(update_seed, StreamPurpose::Rollout, task_id)
            .with_replay_index(episode_index)
            .stream();
        let mut transcript = Transcript::new();
        let mut replay_states = Vec::with_capacity(graph.len());
        let mut samples = Vec::with_capacity(graph.len());

        for occ in &graph {
            let event = self.protocol.event(occ.event_type);
            let context = render_context(&task.observable_text, &transcript, event);
            let key = self.registry.key_for(&context)?;
            replay_states.push((
                occ.event_type,
                ReplayState {
                    task_id,
                    transcript_prefix: transcript.clone(),
                    target_occurrence: occ.node_id,
                    stream_base: StreamLabel::new(update_seed, StreamPurpose::Replay, task_id),
                },
            ));
            let needs_action = scored || self.protocol.has_dependents(occ.event_type);
            let token = if needs_action {
                let token = match selection {
                    ActionSelection::Sample => {
                        policy.sample_action(event.role, &key, &mut action_stream)
                    }
                    ActionSelection::Greedy => policy.greedy_action(event.role, &key),
                };
                self.stats.actions_sampled.fetch_add(1, Ordering::Relaxed);
                transcript.push(TranscriptEntry {
                    node_id: occ.node_id,
                    event_type: occ.event_type,
                    action_token: token,
                    rendered_text: render_action(token),
                });
                Some(token)
            } else {
                None
            };
            samples.push(OccurrenceSample {
                event_type: occ.event_type,
                role: event.role,
                key,
                token,
                log_prob: token.map_or(0.0, |t| policy.log_prob(event.role, &key, t)),
            });
        }

        let (episode_return, plan, answer) = if scored {
            let (plan, answer) = self.scored_pair(&transcript);
            let mut noise_stream = StreamLabel::new(update_seed, StreamPurpose::EnvNoise, task_id)
                .with_replay_index(episode_index)
                .stream();
            let noise = sample_noise(self.noise_sd, &mut noise_stream);
            let r = evaluate(&task, plan, answer, noise)?;
            self.stats.evaluator_calls.fetch_add(1, Ordering::Relaxed);
            (Some(r.0), Some(plan), Some(answer))
        } else {
            (None, None, None)
        };

        Ok(EpisodeRecord {
            replay_states,
            samples,
            episode_return,
            plan,
            answer,
        })
    }

    /// Executes `k` unscored episodes per task under the snapshot and records
    /// (event type, replay state) for every visited occurrence.
    pub fn reference_rollouts(
        &mut self,
        snapshot: &PolicyTable,
        task_ids: &[u64],
        k: usize,
        update_seed: u64,
    ) -> Result<Vec<(usize, ReplayState)>, ReplayError> {
        if k == 0 {
            return Err(ReplayError::NoRollouts);
        }
        let mut records = Vec::new();
        for &task_id in task_ids {
            for episode in 0..k as u64 {
                let rec = self.run_episode(
                    snapshot,
                    update_seed,
                    task_id,
                    episode,
                    false,
                    ActionSelection::Sample,
                )?;
                records.extend(rec.replay_states);
            }
        }
        Ok(records)
    }

    /// The deterministic 2A sampling split: `k` reference rollouts whose
    /// upstream decisions are forced distinct, guaranteeing `k` distinct
    /// downstream context instances per task. Requires the two-event chain
    /// protocol.
    pub fn reference_rollouts_distinct(
        &mut self,
        snapshot: &PolicyTable,
        task_id: u64,
        k: usize,
        update_seed: u64,
        max_attempts: usize,
    ) -> Result<Vec<(usize, ReplayState)>, ReplayError> {
        assert_eq!(
            self.protocol.event_types.len(),
            2,
            "the deterministic split preset is defined for the two-agent protocol"
        );
        if k == 0 {
            return Err(ReplayError::NoRollouts);
        }
        let task = self.task(task_id)?.clone();
        let upstream = self.protocol.event(0);
        let upstream_context = render_context(&task.observable_text, &Transcript::new(), upstream);
        let upstream_key = self.registry.key_for(&upstream_context)?;

        // dedup-sample k distinct upstream actions
        let mut stream = StreamLabel::new(update_seed, StreamPurpose::Rollout, task_id).stream();
        let mut plans: Vec<u32> = Vec::with_capacity(k);
        let mut attempts = 0usize;
        while plans.len() < k && attempts < max_attempts {
            let tok = snapshot.sample_action(upstream.role, &upstream_key, &mut stream);
            attempts += 1;
            if !plans.contains(&tok) {
                plans.push(tok);
            }
        }
        if plans.len() < k {
            return Err(ReplayError::DedupExhausted {
                needed: k,
                attempts: max_attempts,
            });
        }
        self.stats
            .actions_sampled
            .fetch_add(k as u64, Ordering::Relaxed);

        let mut records = Vec::new();
        let downstream = self.protocol.event(1);
        for &plan in &plans {
            records.push((
                upstream.id,
                ReplayState {
                    task_id,
                    transcript_prefix: Transcript::new(),
                    target_occurrence: 0,
                    stream_base: StreamLabel::new(update_seed, StreamPurpose::Replay, task_id),
                },
            ));
            let mut prefix = Transcript::new();
            prefix.push(TranscriptEntry {
                node_id: 0,
                event_type: 0,
                action_token: plan,
                rendered_text: render_action(plan),
            });
            let downstream_context = render_context(&task.observable_text, &prefix, downstream);
            self.registry.key_for(&downstream_context)?;
            records.push((
                downstream.id,
                ReplayState {
                    task_id,
                    transcript_prefix: prefix,
                    target_occurrence: 1,
                    stream_base: StreamLabel::new(update_seed, StreamPurpose::Replay, task_id),
                },
            ));
        }
        Ok(records)
    }

    /// Groups records into buckets keyed by (event type, kappa), representative
    /// = first visit, keys fingerprint-verified. Bucket order is first-visit
    /// order.
    pub fn build_buckets(
        &mut self,
        records: Vec<(usize, ReplayState)>,
    ) -> Result<Vec<Bucket>, ReplayError> {
        let mut buckets: Vec<Bucket> = Vec::new();
        for (event_type, mut state) in records {
            let task = self.task(state.task_id)?.clone();
            let event = self.protocol.event(event_type);
            let context = render_context(&task.observable_text, &state.transcript_prefix, event);
            let key = self.registry.key_for(&context)?;
            let exists = buckets
                .iter()
                .any(|b| b.event_type == event_type && b.key.kappa == key.kappa);
            if !exists {
                state.stream_base.bucket_key = Bucket::stream_key(event_type, &key);
                buckets.push(Bucket {
                    event_type,
                    key,
                    representative: state,
                    candidates: Vec::new(),
                    replay_returns: Vec::new(),
                    counts: Vec::new(),
                });
            }
        }
        Ok(buckets)
    }

    /// Samples up to `n` distinct candidate actions from the snapshot at the
    /// bucket's representative context. Duplicates are discarded; if fewer
    /// than two distinct tokens emerge within `max_attempts` draws, the bucket
    /// is dropped. Each retained candidate counts as one generated action.
    pub fn sample_alternatives(
        &self,
        snapshot: &PolicyTable,
        bucket: &Bucket,
        n: usize,
        max_attempts: usize,
    ) -> Result<Vec<u32>, BucketDropped> {
        let role = self.protocol.event(bucket.event_type).role;
        let mut stream = StreamLabel {
            run_seed: bucket.representative.stream_base.run_seed,
            purpose: StreamPurpose::AltSample,
            task_id: bucket.representative.task_id,
            bucket_key: bucket.representative.stream_base.bucket_key,
            candidate: 0,
            replay_index: 0,
        }
        .stream();
        let mut distinct: Vec<u32> = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while distinct.len() < n && attempts < max_attempts {
            let tok = snapshot.sample_action(role, &bucket.key, &mut stream);
            attempts += 1;
            if !distinct.contains(&tok) {
                distinct.push(tok);
            }
        }
        if distinct.len() < 2 {
            return Err(BucketDropped);
        }
        self.stats
            .actions_sampled
            .fetch_add(distinct.len() as u64, Ordering::Relaxed);
        Ok(distinct)
    }

    /// Replays one candidate `count` times from the bucket representative:
    /// clone the recorded prefix (no upstream decision re-executes), force the
    /// candidate at the target occurrence, sample every later occurrence from
    /// the snapshot, and query the evaluator once per replay. With `crn` the
    /// continuation and noise streams at replay index t are shared across
    /// candidates; without it the candidate token enters the labels.
    pub fn replay(
        &self,
        snapshot: &PolicyTable,
        rep: &ReplayState,
        candidate: u32,
        count: usize,
        crn: bool,
    ) -> Result<Vec<ReplayOutcome>, ReplayError> {
        let candidate_label = if crn { 0 } else { 1 + candidate as u64 };
        self.replay_with_label(snapshot, rep, candidate, count, candidate_label)
    }

    /// [`Engine::replay`] with an explicit candidate label, for callers that
    /// need their own stream partition (e.g. value-only diagnostics rollouts,
    /// which must never share streams with candidate replays).
    pub fn replay_with_label(
        &self,
        snapshot: &PolicyTable,
        rep: &ReplayState,
        candidate: u32,
        count: usize,
        candidate_label: u64,
    ) -> Result<Vec<ReplayOutcome>, ReplayError> {
        let task = self.task(rep.task_id)?.clone();
        let graph = build_episode_graph(&self.protocol, rep.task_id)?;
        let target_role = self
            .protocol
            .event(graph[rep.target_occurrence].event_type)
            .role;
        let mut outcomes = Vec::with_capacity(count);

        for t in 0..count as u64 {
            let labels = StreamLabel {
                run_seed: rep.stream_base.run_seed,
                purpose: StreamPurpose::Replay,
                task_id: rep.task_id,
                bucket_key: rep.stream_base.bucket_key,
                candidate: candidate_label,
                replay_index: t,
            };
            let mut action_stream = labels.stream();
            let mut transcript = rep.transcript_prefix.clone();
            transcript.push(TranscriptEntry {
                node_id: rep.target_occurrence,
                event_type: graph[rep.target_occurrence].event_type,
                action_token: candidate,
                rendered_text: render_action(candidate),
            });

            let mut first_teammate_action = None;
            for occ in graph.iter().skip(rep.target_occurrence + 1) {
                let event = self.protocol.event(occ.event_type);
                let context = render_context(&task.observable_text, &transcript, event);
                let key = context_key(&context);
                let token = snapshot.sample_action(event.role, &key, &mut action_stream);
                self.stats.actions_sampled.fetch_add(1, Ordering::Relaxed);
                if first_teammate_action.is_none() && event.role != target_role {
                    first_teammate_action = Some(token);
                }
                transcript.push(TranscriptEntry {
                    node_id: occ.node_id,
                    event_type: occ.event_type,
                    action_token: token,
                    rendered_text: render_action(token),
                });
            }

            let (plan, answer) = self.scored_pair(&transcript);
            let mut noise_stream = StreamLabel {
                purpose: StreamPurpose::EnvNoise,
                ..labels
            }
            .stream();
            let noise = sample_noise(self.noise_sd, &mut noise_stream);
            let r = evaluate(&task, plan, answer, noise)?;
            self.stats.evaluator_calls.fetch_add(1, Ordering::Relaxed);
            outcomes.push(ReplayOutcome {
                ret: r.0,
                first_teammate_action,
            });
        }
        Ok(outcomes)
    }
}

/// Deterministic budget split over buckets.
///
/// When the budget covers every candidate, replays are dealt round-robin: one
/// per candidate in bucket order until the budget is exhausted, so counts
/// differ by at most one. When it does not, buckets are truncated in order —
/// a bucket keeps as many leading candidates as still fit (at least two, or it
/// is dropped) — and the full budget is then dealt round-robin over what
/// remains. The returned counts always sum to exactly `budget`.
pub fn allocate_budget(
    candidate_counts: &[usize],
    budget: usize,
) -> Result<Vec<Vec<usize>>, ReplayError> {
    let mut retained: Vec<usize> = Vec::with_capacity(candidate_counts.len());
    let mut capacity = budget;
    for &size in candidate_counts {
        let take = size.min(capacity);
        if take >= 2 {
            retained.push(take);
            capacity -= take;
        } else {
            retained.push(0);
        }
    }
    let total: usize = retained.iter().sum();
    if total == 0 {
        return Err(ReplayError::BudgetInfeasible { budget });
    }
    let base = budget / total;
    let remainder = budget % total;
    let mut rank = 0usize;
    Ok(retained
        .iter()
        .map(|&size| {
            (0..size)
                .map(|_| {
                    let c = base + usize::from(rank < remainder);
                    rank += 1;
                    c
                })
                .collect()
        })
        .collect())
}

/// Serializes replay-level bucket contents: one row per replay with fields
/// (v, kappa, candidate_index, replay_index, return, crn_flag).
pub fn dump_buckets(buckets: &[Bucket], crn: bool) -> String {
    let mut out = String::from("v\tkappa\tcandidate_index\treplay_index\treturn\tcrn\n");
    for bucket in buckets {
        for (candidate_index, returns) in bucket.replay_returns.iter().enumerate() {
            for (replay_index, r) in returns.iter().enumerate() {
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    bucket.event_type,
                    bucket.key.kappa,
                    candidate_index,
                    replay_index,
                    r,
                    u8::from(crn)
                )
                .expect("writing to string");
            }
        }
    }
    out
}
