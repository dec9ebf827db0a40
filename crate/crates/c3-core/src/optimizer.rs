//! Policy updates from credit tuples: clipped-surrogate ascent with KL
//! anchoring, plus the trajectory-centering and tabular-critic baseline
//! methods evaluated under the same budget.
//!
//! The surrogate per tuple is `min(r A, clip(r, 1-eps, 1+eps) A)` with
//! `r = pi_theta(a|h) / pi_b(a|h)`, penalized by `kl_coef * KL(pi_theta ||
//! pi_ref)` on the tuple's row. At the behavior snapshot every ratio is
//! exactly 1, the clip is inactive, and one gradient evaluation reduces to the
//! plain score-function form `sum_j A_j grad log pi(a_j|h)` — which is what
//! the snapshot-gradient tests pin down.

use std::collections::BTreeMap;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::credit::{clip_return, CreditTuple};
use crate::policy::{PolicyTable, Snapshot};
use crate::protocol::ContextKey;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("update requires a nonempty tuple batch")]
    EmptyBatch,
    #[error("group credits need at least 2 episodes")]
    GroupTooSmall,
}

fn default_clip_epsilon() -> f64 {
    0.2
}
fn default_kl_coefficient() -> f64 {
    0.01
}
fn default_learning_rate() -> f64 {
    0.05
}
fn default_epochs_per_update() -> usize {
    1
}
fn default_unit() -> f64 {
    1.0
}

/// Update hyperparameters. Discounting is pinned to gamma = lambda = 1:
/// supervision is terminal-only, so there is nothing to discount or trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    #[serde(default = "default_clip_epsilon")]
    pub clip_epsilon: f64,
    #[serde(default = "default_kl_coefficient")]
    pub kl_coefficient: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs_per_update")]
    pub epochs_per_update: usize,
    #[serde(default = "default_unit")]
    pub gamma: f64,
    #[serde(default = "default_unit")]
    pub lambda: f64,
    /// Optional global gradient-norm clip; disabled by default.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            clip_epsilon: 0.2,
            kl_coefficient: 0.01,
            learning_rate: 0.05,
            epochs_per_update: 1,
            gamma: 1.0,
            lambda: 1.0,
            max_grad_norm: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(OptimError::InvalidConfig(
                "clip_epsilon must be in (0, 1)".into(),
            ));
        }
        if self.kl_coefficient < 0.0 {
            return Err(OptimError::InvalidConfig(
                "kl_coefficient must be >= 0".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(OptimError::InvalidConfig(
                "learning_rate must be > 0".into(),
            ));
        }
        if self.epochs_per_update == 0 {
            return Err(OptimError::InvalidConfig(
                "epochs_per_update must be >= 1".into(),
            ));
        }
        if self.gamma != 1.0 || self.lambda != 1.0 {
            return Err(OptimError::InvalidConfig(
                "gamma and lambda are fixed to 1.0 under terminal-only supervision".into(),
            ));
        }
        Ok(())
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).iter().map(|&l| l.exp()).collect()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&z| z - log_z).collect()
}

/// Accumulates the batch gradient of the clipped surrogate minus the KL
/// penalty, at the current live table. Rows are keyed by (role, kappa);
/// iteration order is fixed so reductions are deterministic.
fn batch_gradient(
    theta: &PolicyTable,
    behavior: &Snapshot,
    reference: &Snapshot,
    tuples: &[CreditTuple],
    cfg: &OptimConfig,
) -> BTreeMap<(usize, u64), Vec<f64>> {
    let mut grads: BTreeMap<(usize, u64), Vec<f64>> = BTreeMap::new();
    for tuple in tuples {
        let row = theta.row(tuple.role, &tuple.key);
        let probs = softmax(&row);
        let log_p = log_softmax(&row);
        let a_idx = tuple.candidate as usize;
        let log_ratio = log_p[a_idx] - behavior.log_prob(tuple.role, &tuple.key, tuple.candidate);
        let ratio = log_ratio.exp();
        let clipped = ratio.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
        // min(rA, clip(r)A): inside the clip both branches agree; outside, the
        // active clipped branch is constant and contributes no gradient
        let coeff = if ratio * tuple.advantage <= clipped * tuple.advantage {
            tuple.advantage * ratio
        } else {
            0.0
        };

        let grad = grads
            .entry((tuple.role, tuple.key.kappa))
            .or_insert_with(|| vec![0.0; row.len()]);
        for (k, g) in grad.iter_mut().enumerate() {
            let indicator = if k == a_idx { 1.0 } else { 0.0 };
            *g += coeff * (indicator - probs[k]);
        }

        if cfg.kl_coefficient > 0.0 {
            let log_q = log_softmax(&reference.row(tuple.role, &tuple.key));
            let kl: f64 = probs
                .iter()
                .zip(log_p.iter().zip(log_q.iter()))
                .map(|(&p, (&lp, &lq))| p * (lp - lq))
                .sum();
            for (k, g) in grad.iter_mut().enumerate() {
                let dkl = probs[k] * ((log_p[k] - log_q[k]) - kl);
                *g -= cfg.kl_coefficient * dkl;
            }
        }
    }
    grads
}

/// Ascends the clipped surrogate with KL anchoring by `epochs_per_update`
/// full-batch gradient steps on the rows named by the tuples.
pub fn ppo_update(
    theta: &mut PolicyTable,
    behavior: &Snapshot,
    reference: &Snapshot,
    tuples: &[CreditTuple],
    cfg: &OptimConfig,
) -> Result<(), OptimError> {
    cfg.validate()?;
    if tuples.is_empty() {
        return Err(OptimError::EmptyBatch);
    }
    let mut keys: HashMap<(usize, u64), ContextKey> = HashMap::new();
    for tuple in tuples {
        keys.entry((tuple.role, tuple.key.kappa)).or_insert(tuple.key);
    }
    for _ in 0..cfg.epochs_per_update {
        let mut grads = batch_gradient(theta, behavior, reference, tuples, cfg);
        if let Some(max_norm) = cfg.max_grad_norm {
            let norm = grads
                .values()
                .flat_map(|g| g.iter())
                .map(|&g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                let scale = max_norm / norm;
                for g in grads.values_mut() {
                    for gi in g.iter_mut() {
                        *gi *= scale;
                    }
                }
            }
        }
        for ((role, kappa), grad) in grads {
            let key = keys[&(role, kappa)];
            let row = theta.row_mut(role, &key);
            for (z, g) in row.iter_mut().zip(grad.iter()) {
                *z += cfg.learning_rate * g;
            }
        }
    }
    Ok(())
}

/// Group-relative episode credits: each episode's return minus the group
/// mean, broadcast to every decision occurrence of that episode.
pub fn magrpo_credits(group_returns: &[f64]) -> Result<Vec<f64>, OptimError> {
    if group_returns.len() < 2 {
        return Err(OptimError::GroupTooSmall);
    }
    let mean = group_returns.iter().sum::<f64>() / group_returns.len() as f64;
    Ok(group_returns.iter().map(|&r| r - mean).collect())
}

/// Per-context running value table for the critic-based baseline. Unseen
/// contexts value 0.
#[derive(Debug, Clone, Default)]
pub struct CriticTable {
    values: HashMap<(usize, u64), f64>,
    pub step_size: f64,
}

impl CriticTable {
    pub fn new(step_size: f64) -> Self {
        CriticTable {
            values: HashMap::new(),
            step_size,
        }
    }

    pub fn value(&self, event_type: usize, key: &ContextKey) -> f64 {
        self.values
            .get(&(event_type, key.kappa))
            .copied()
            .unwrap_or(0.0)
    }

    /// Running regression toward the per-context conditional mean:
    /// `V <- V + step * (R - V)`.
    pub fn update(&mut self, event_type: usize, key: &ContextKey, observed_return: f64) {
        let v = self.values.entry((event_type, key.kappa)).or_insert(0.0);
        *v += self.step_size * (observed_return - *v);
    }
}

/// Critic-based advantage under terminal-only returns:
/// `clip(R) - V(event, context)`.
pub fn mappo_advantage(
    critic: &CriticTable,
    event_type: usize,
    key: &ContextKey,
    observed_return: f64,
) -> f64 {
    clip_return(observed_return) - critic.value(event_type, key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::context_key;
    use approx::assert_abs_diff_eq;

    fn key(s: &str) -> ContextKey {
        context_key(s)
    }

    fn tuple(role: usize, k: &ContextKey, candidate: u32, advantage: f64, logp: f64) -> CreditTuple {
        CreditTuple {
            event_type: role,
            role,
            key: *k,
            candidate,
            advantage,
            behavior_log_prob: logp,
        }
    }

    fn cfg(kl: f64) -> OptimConfig {
        OptimConfig {
            kl_coefficient: kl,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn zero_advantage_zero_kl_is_identity() {
        let mut theta = PolicyTable::new(vec![4]);
        *theta.row_mut(0, &key("h")) = vec![0.3, -0.1, 0.0, 0.7];
        let behavior = Snapshot::of(&theta);
        let reference = Snapshot::of(&theta);
        let before = theta.row(0, &key("h"));
        let tuples = vec![tuple(0, &key("h"), 1, 0.0, (0.25f64).ln())];
        ppo_update(&mut theta, &behavior, &reference, &tuples, &cfg(0.0)).unwrap();
        assert_eq!(theta.row(0, &key("h")), before);
    }

    #[test]
    fn positive_advantage_raises_probability() {
        let mut theta = PolicyTable::new(vec![4]);
        let behavior = Snapshot::of(&theta);
        let reference = Snapshot::of(&theta);
        let p_before = theta.probs(0, &key("h"))[2];
        let tuples = vec![tuple(0, &key("h"), 2, 1.0, (0.25f64).ln())];
        ppo_update(&mut theta, &behavior, &reference, &tuples, &cfg(0.0)).unwrap();
        let p_after = theta.probs(0, &key("h"))[2];
        assert!(p_after > p_before);
    }

    #[test]
    fn first_step_matches_score_function_gradient() {
        // at theta = theta_b with kl = 0, one step is exactly
        // lr * sum_j A_j (e_{a_j} - pi_b)
        let mut theta = PolicyTable::new(vec![3]);
        *theta.row_mut(0, &key("h")) = vec![0.5, -0.2, 0.1];
        let behavior = Snapshot::of(&theta);
        let reference = Snapshot::of(&theta);
        let pi = theta.probs(0, &key("h"));
        let advantages = [0.8, -0.3, 0.1];
        let tuples: Vec<CreditTuple> = (0..3u32)
            .map(|j| {
                tuple(
                    0,
                    &key("h"),
                    j,
                    advantages[j as usize],
                    pi[j as usize].ln(),
                )
            })
            .collect();
        let before = theta.row(0, &key("h"));
        let cfg = cfg(0.0);
        ppo_update(&mut theta, &behavior, &reference, &tuples, &cfg).unwrap();
        let after = theta.row(0, &key("h"));
        for k in 0..3 {
            let mut expected = 0.0;
            for (j, &a) in advantages.iter().enumerate() {
                let indicator = if j == k { 1.0 } else { 0.0 };
                expected += a * (indicator - pi[k]);
            }
            assert_abs_diff_eq!(
                after[k] - before[k],
                cfg.learning_rate * expected,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn ratio_is_unit_at_snapshot_so_clip_inactive() {
        // a tight clip and a loose clip give the same first step at theta_b
        let mut a = PolicyTable::new(vec![3]);
        let mut b = PolicyTable::new(vec![3]);
        let behavior = Snapshot::of(&a);
        let reference = Snapshot::of(&a);
        let tuples = vec![tuple(0, &key("h"), 0, 0.7, (1f64 / 3.0).ln())];
        let mut tight = cfg(0.0);
        tight.clip_epsilon = 0.01;
        let mut loose = cfg(0.0);
        loose.clip_epsilon = 0.9;
        ppo_update(&mut a, &behavior, &reference, &tuples, &tight).unwrap();
        ppo_update(&mut b, &behavior, &reference, &tuples, &loose).unwrap();
        assert_eq!(a.row(0, &key("h")), b.row(0, &key("h")));
    }

    #[test]
    fn empty_batch_rejected() {
        let mut theta = PolicyTable::new(vec![2]);
        let snap = Snapshot::of(&theta);
        assert!(matches!(
            ppo_update(&mut theta, &snap.clone(), &snap, &[], &cfg(0.0)),
            Err(OptimError::EmptyBatch)
        ));
    }

    #[test]
    fn kl_anchor_weakly_tightens_with_coefficient() {
        let base = PolicyTable::new(vec![3]);
        let reference = Snapshot::of(&base);
        let behavior = Snapshot::of(&base);
        let tuples = vec![
            tuple(0, &key("h"), 0, 1.0, (1f64 / 3.0).ln()),
            tuple(0, &key("h"), 1, -0.5, (1f64 / 3.0).ln()),
        ];
        let mut kls = Vec::new();
        for coefficient in [0.0, 0.5, 5.0] {
            let mut theta = base.clone();
            let mut c = cfg(coefficient);
            c.epochs_per_update = 5;
            ppo_update(&mut theta, &behavior, &reference, &tuples, &c).unwrap();
            kls.push(crate::policy::kl_to_reference(
                &theta,
                &reference,
                0,
                &key("h"),
            ));
        }
        assert!(kls[0] >= kls[1] - 1e-12);
        assert!(kls[1] >= kls[2] - 1e-12);
    }

    #[test]
    fn grad_norm_clip_shrinks_step() {
        let base = PolicyTable::new(vec![3]);
        let behavior = Snapshot::of(&base);
        let reference = Snapshot::of(&base);
        let tuples = vec![tuple(0, &key("h"), 0, 100.0, (1f64 / 3.0).ln())];
        let mut unclipped = base.clone();
        ppo_update(&mut unclipped, &behavior, &reference, &tuples, &cfg(0.0)).unwrap();
        let mut clipped = base.clone();
        let mut c = cfg(0.0);
        c.max_grad_norm = Some(0.1);
        ppo_update(&mut clipped, &behavior, &reference, &tuples, &c).unwrap();
        let step = |t: &PolicyTable| -> f64 {
            t.row(0, &key("h")).iter().map(|z| z * z).sum::<f64>().sqrt()
        };
        assert!(step(&clipped) < step(&unclipped));
        assert_abs_diff_eq!(step(&clipped), 0.05 * 0.1, epsilon = 1e-12);
    }

    #[test]
    fn config_validation() {
        let discounted = OptimConfig {
            gamma: 0.9,
            ..OptimConfig::default()
        };
        assert!(discounted.validate().is_err());
        let wide_clip = OptimConfig {
            clip_epsilon: 1.5,
            ..OptimConfig::default()
        };
        assert!(wide_clip.validate().is_err());
        assert!(OptimConfig::default().validate().is_ok());
    }

    #[test]
    fn magrpo_centering_examples() {
        assert_eq!(
            magrpo_credits(&[1.0, 0.0, 1.0, 0.0]).unwrap(),
            vec![0.5, -0.5, 0.5, -0.5]
        );
        assert_eq!(magrpo_credits(&[0.3, 0.3]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(
            magrpo_credits(&[1.0]),
            Err(OptimError::GroupTooSmall)
        ));
    }

    #[test]
    fn mappo_advantage_examples() {
        let critic = CriticTable::new(0.5);
        assert_eq!(mappo_advantage(&critic, 0, &key("h"), 1.0), 1.0);
        let mut critic = CriticTable::new(0.5);
        critic.update(0, &key("h"), 1.2);
        critic.update(0, &key("h"), 0.0);
        let v = critic.value(0, &key("h"));
        assert_abs_diff_eq!(
            mappo_advantage(&critic, 0, &key("h"), v),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn critic_recurrence_by_hand() {
        let mut critic = CriticTable::new(0.5);
        let expected = [0.5, 0.75, 0.875];
        for &e in &expected {
            critic.update(0, &key("h"), 1.0);
            assert_abs_diff_eq!(critic.value(0, &key("h")), e, epsilon = 1e-15);
        }
    }

    #[test]
    fn critic_fixed_point() {
        let mut critic = CriticTable::new(0.3);
        critic.update(0, &key("h"), 0.8);
        let v = critic.value(0, &key("h"));
        critic.update(0, &key("h"), v);
        assert_eq!(critic.value(0, &key("h")), v);
    }

    #[test]
    fn critic_converges_to_mean() {
        use crate::rng::{StreamLabel, StreamPurpose};
        let mut critic = CriticTable::new(0.01);
        let mut stream = StreamLabel::new(5, StreamPurpose::EnvNoise, 0).stream();
        // i.i.d. two-point returns 0.6 +/- 0.1
        for _ in 0..10_000 {
            let r = if stream.coin() { 0.7 } else { 0.5 };
            critic.update(0, &key("h"), r);
        }
        assert!((critic.value(0, &key("h")) - 0.6).abs() < 1e-2);
    }
}
