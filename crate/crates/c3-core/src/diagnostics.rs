//! Mechanistic estimators: target advantages (by replay and by exact
//! enumeration), credit fidelity, within-context variance, influence as
//! smoothed conditional mutual information, and the unbiased pass@k estimator.

use std::collections::HashMap;

use crate::credit::aggregate;
use crate::env::{evaluate, noise_support};
use crate::policy::PolicyTable;
use crate::protocol::{build_episode_graph, context_key, render_action, render_context, Transcript, TranscriptEntry};
use crate::replay::{Bucket, Engine, ReplayError, ReplayState};
use crate::rng::{StreamLabel, StreamPurpose};

/// Default downstream-symbol vocabulary cap for the influence estimator.
pub const INFLUENCE_TOP_K: usize = 64;
/// Default Dirichlet smoothing weight per active symbol.
pub const INFLUENCE_ALPHA: f64 = 1e-2;

/// Candidate labels at and above this base are reserved for value-only
/// rollouts, keeping their streams disjoint from candidate replays.
const VALUE_LABEL_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiagError {
    #[error("lists must have equal length >= 2 (got {a} and {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("bucket {index} has fewer than 2 credits")]
    BucketTooSmall { index: usize },
    #[error("influence needs >= 2 candidates with >= 1 sample each")]
    InfluenceUnderdetermined,
    #[error("pass@k parameters violated: n={n} c={c} k={k}")]
    PassAtKParams { n: u64, c: u64, k: u64 },
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

/// Estimated decision value, policy-marginalized value, and their gap at one
/// context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetAdvantage {
    pub q_hat: f64,
    pub v_hat: f64,
    pub delta: f64,
}

impl TargetAdvantage {
    fn new(q_hat: f64, v_hat: f64) -> Self {
        TargetAdvantage {
            q_hat,
            v_hat,
            delta: q_hat - v_hat,
        }
    }
}

/// Pure form of the replay-based target advantage: per-candidate mean returns
/// against a weighted mean over value-side estimates.
pub fn target_advantage_from_returns(
    candidate_means: &[f64],
    value_means: &[f64],
    value_weights: &[f64],
) -> Vec<TargetAdvantage> {
    let total: f64 = value_weights.iter().sum();
    let v_hat = value_means
        .iter()
        .zip(value_weights.iter())
        .map(|(&m, &w)| m * w)
        .sum::<f64>()
        / total;
    candidate_means
        .iter()
        .map(|&q| TargetAdvantage::new(q, v_hat))
        .collect()
}

/// Replay-based target advantage for each bucket candidate. `value_actions`
/// fresh actions are sampled from the snapshot at the bucket context — with
/// repetition, so the sampling frequency itself carries the policy weighting —
/// and each is replayed `replays_per_action` times on streams disjoint from
/// the candidate replays.
pub fn target_advantage_replay(
    engine: &Engine,
    snapshot: &PolicyTable,
    bucket: &Bucket,
    value_actions: usize,
    replays_per_action: usize,
) -> Result<Vec<TargetAdvantage>, DiagError> {
    let role = engine.protocol.event(bucket.event_type).role;
    let mut stream = StreamLabel {
        run_seed: bucket.representative.stream_base.run_seed,
        purpose: StreamPurpose::AltSample,
        task_id: bucket.representative.task_id,
        bucket_key: bucket.representative.stream_base.bucket_key,
        candidate: 0,
        replay_index: 1,
    }
    .stream();
    let mut value_means = Vec::with_capacity(value_actions);
    for i in 0..value_actions {
        let token = snapshot.sample_action(role, &bucket.key, &mut stream);
        let outcomes = engine.replay_with_label(
            snapshot,
            &bucket.representative,
            token,
            replays_per_action,
            VALUE_LABEL_BASE + i as u64,
        )?;
        let returns: Vec<f64> = outcomes.iter().map(|o| o.ret).collect();
        value_means.push(aggregate(&returns).expect("replays_per_action >= 1"));
    }
    let weights = vec![replays_per_action as f64; value_actions];
    Ok(target_advantage_from_returns(
        &bucket.candidate_means(),
        &value_means,
        &weights,
    ))
}

/// Exact expected return of forcing `token` at the bucket's target occurrence
/// and continuing under the snapshot, by full enumeration of downstream
/// actions and the finite noise support.
pub fn exact_q(
    engine: &Engine,
    snapshot: &PolicyTable,
    rep: &ReplayState,
    token: u32,
) -> Result<f64, DiagError> {
    let task = engine.task(rep.task_id)?.clone();
    let graph = build_episode_graph(&engine.protocol, rep.task_id).map_err(ReplayError::from)?;
    let mut transcript = rep.transcript_prefix.clone();
    transcript.push(TranscriptEntry {
        node_id: rep.target_occurrence,
        event_type: graph[rep.target_occurrence].event_type,
        action_token: token,
        rendered_text: render_action(token),
    });

    fn recurse(
        engine: &Engine,
        snapshot: &PolicyTable,
        task: &crate::env::TaskInstance,
        graph: &[crate::protocol::Occurrence],
        transcript: &Transcript,
        next: usize,
    ) -> f64 {
        if next >= graph.len() {
            let terminal = engine.protocol.event(engine.protocol.terminal_event);
            let answer = transcript
                .token_of(terminal.id)
                .expect("terminal action committed");
            let plan = terminal
                .parents
                .first()
                .and_then(|&p| transcript.token_of(p))
                .unwrap_or(0);
            let support = noise_support(engine.noise_sd);
            return support
                .iter()
                .map(|&eps| evaluate(task, plan, answer, eps).expect("enumerated tokens valid").0)
                .sum::<f64>()
                / support.len() as f64;
        }
        let occ = &graph[next];
        let event = engine.protocol.event(occ.event_type);
        let context = render_context(&task.observable_text, transcript, event);
        let key = context_key(&context);
        let probs = snapshot.probs(event.role, &key);
        probs
            .iter()
            .enumerate()
            .map(|(a, &p)| {
                if p == 0.0 {
                    return 0.0;
                }
                let mut extended = transcript.clone();
                extended.push(TranscriptEntry {
                    node_id: occ.node_id,
                    event_type: occ.event_type,
                    action_token: a as u32,
                    rendered_text: render_action(a as u32),
                });
                p * recurse(engine, snapshot, task, graph, &extended, next + 1)
            })
            .sum()
    }

    Ok(recurse(
        engine,
        snapshot,
        &task,
        &graph,
        &transcript,
        rep.target_occurrence + 1,
    ))
}

/// Exact target advantage for every token of the target role's vocabulary at
/// a bucket context: `Q` by enumeration, `V` by snapshot-weighting the `Q`s.
/// Deltas are snapshot-mean-zero by construction.
pub fn target_advantage_exact(
    engine: &Engine,
    snapshot: &PolicyTable,
    rep: &ReplayState,
) -> Result<Vec<TargetAdvantage>, DiagError> {
    let graph = build_episode_graph(&engine.protocol, rep.task_id).map_err(ReplayError::from)?;
    let event = engine.protocol.event(graph[rep.target_occurrence].event_type);
    let task = engine.task(rep.task_id)?.clone();
    let context = render_context(&task.observable_text, &rep.transcript_prefix, event);
    let key = context_key(&context);
    let probs = snapshot.probs(event.role, &key);

    let q: Vec<f64> = (0..snapshot.role_vocab(event.role) as u32)
        .map(|token| exact_q(engine, snapshot, rep, token))
        .collect::<Result<_, _>>()?;
    let v: f64 = probs.iter().zip(q.iter()).map(|(&p, &qi)| p * qi).sum();
    Ok(q.iter().map(|&qi| TargetAdvantage::new(qi, v)).collect())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|&x| {
            let less = values.iter().filter(|&&y| y < x).count() as f64;
            let equal = values.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Spearman rank correlation with average-rank tie handling. Returns 0 when
/// either list is constant.
pub fn fidelity(assigned: &[f64], targets: &[f64]) -> Result<f64, DiagError> {
    if assigned.len() != targets.len() || assigned.len() < 2 {
        return Err(DiagError::LengthMismatch {
            a: assigned.len(),
            b: targets.len(),
        });
    }
    let ra = average_ranks(assigned);
    let rb = average_ranks(targets);
    let n = ra.len() as f64;
    let mean_a = ra.iter().sum::<f64>() / n;
    let mean_b = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (a, b) in ra.iter().zip(rb.iter()) {
        cov += (a - mean_a) * (b - mean_b);
        var_a += (a - mean_a).powi(2);
        var_b += (b - mean_b).powi(2);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}

/// Mean over buckets of the unbiased sample variance of credits within each
/// bucket.
pub fn within_context_variance(bucket_credits: &[Vec<f64>]) -> Result<f64, DiagError> {
    if bucket_credits.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (index, credits) in bucket_credits.iter().enumerate() {
        if credits.len() < 2 {
            return Err(DiagError::BucketTooSmall { index });
        }
        let n = credits.len() as f64;
        let mean = credits.iter().sum::<f64>() / n;
        total += credits.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
    }
    Ok(total / bucket_credits.len() as f64)
}

/// Discrete downstream symbol observed after an intervention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    Token(u32),
    Other,
    Empty,
}

/// Count table over (injected candidate index, downstream symbol), with the
/// symbol vocabulary capped to the global top-K plus OTHER and EMPTY.
#[derive(Debug, Clone)]
pub struct InfluenceTable {
    /// `counts[j][y]`: matrix over candidates x active symbols.
    pub counts: Vec<Vec<u64>>,
    pub vocab: Vec<Symbol>,
    pub alpha: f64,
}

impl InfluenceTable {
    /// Builds the table from per-replay observations `(candidate_index,
    /// downstream_token)`. `None` tokens map to EMPTY; tokens outside the
    /// top-`k` most frequent collapse into OTHER.
    pub fn from_samples(
        samples: &[(usize, Option<u32>)],
        candidates: usize,
        k: usize,
        alpha: f64,
    ) -> Self {
        let mut frequency: HashMap<u32, u64> = HashMap::new();
        for &(_, symbol) in samples {
            if let Some(token) = symbol {
                *frequency.entry(token).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(u32, u64)> = frequency.into_iter().collect();
        // by frequency descending, ties to the smaller token for determinism
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let top: Vec<u32> = ranked.iter().take(k).map(|&(t, _)| t).collect();

        let mut vocab: Vec<Symbol> = top.iter().map(|&t| Symbol::Token(t)).collect();
        vocab.push(Symbol::Other);
        vocab.push(Symbol::Empty);
        let column: HashMap<Symbol, usize> = vocab
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, i))
            .collect();

        let mut counts = vec![vec![0u64; vocab.len()]; candidates];
        for &(j, symbol) in samples {
            let sym = match symbol {
                None => Symbol::Empty,
                Some(token) if top.contains(&token) => Symbol::Token(token),
                Some(_) => Symbol::Other,
            };
            counts[j][column[&sym]] += 1;
        }
        InfluenceTable {
            counts,
            vocab,
            alpha,
        }
    }
}

/// Smoothed conditional mutual information between the injected candidate
/// index and the downstream symbol, in nats, under a uniform intervention
/// distribution.
pub fn influence(table: &InfluenceTable) -> Result<f64, DiagError> {
    let j_count = table.counts.len();
    if j_count < 2 || table.counts.iter().any(|row| row.iter().sum::<u64>() == 0) {
        return Err(DiagError::InfluenceUnderdetermined);
    }
    let y_count = table.vocab.len();
    let p_j = 1.0 / j_count as f64;

    let conditionals: Vec<Vec<f64>> = table
        .counts
        .iter()
        .map(|row| {
            let n_j: u64 = row.iter().sum();
            let denom = n_j as f64 + table.alpha * y_count as f64;
            row.iter()
                .map(|&c| (c as f64 + table.alpha) / denom)
                .collect()
        })
        .collect();
    let marginal: Vec<f64> = (0..y_count)
        .map(|y| conditionals.iter().map(|row| p_j * row[y]).sum())
        .collect();

    let mut mi = 0.0;
    for row in &conditionals {
        for (y, &p_y_given_j) in row.iter().enumerate() {
            if p_y_given_j > 0.0 && marginal[y] > 0.0 {
                mi += p_j * p_y_given_j * (p_y_given_j / marginal[y]).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Unbiased pass@k: `1 - C(n-c, k) / C(n, k)`, with the binomial ratio term
/// zero (hence pass@k = 1) when `n - c < k`.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, DiagError> {
    if c > n || k < 1 || k > n {
        return Err(DiagError::PassAtKParams { n, c, k });
    }
    if n - c < k {
        return Ok(1.0);
    }
    // C(n-c, k) / C(n, k) = prod_{i=0}^{k-1} (n-c-i) / (n-i)
    let mut ratio = 1.0f64;
    for i in 0..k {
        ratio *= (n - c - i) as f64 / (n - i) as f64;
    }
    Ok(1.0 - ratio)
}
