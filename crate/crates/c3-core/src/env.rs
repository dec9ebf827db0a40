//! Finite cooperative tasks with an exactly decomposable terminal evaluator.
//!
//! Every task's scalar return is `clamp(m + delta + noise, 0, 1)`: a
//! context-level shift `m` drawn per task, a marginal decision effect `delta`
//! that is `delta_gain` exactly when the (plan, answer) pair is correct, and a
//! zero-mean two-point noise term. Because the decomposition is exact and the
//! noise support is finite, ground-truth credit is available analytically and
//! every counterfactual expectation can be enumerated.
//!
//! Tasks come in two kinds, mixed 50/50: plan-sensitive (each plan has its own
//! correct answer, so the upstream decision shapes the feasible downstream
//! answer) and plan-insensitive (one answer is correct under every plan).

use serde::{Deserialize, Serialize};

use crate::rng::{StreamLabel, StreamPurpose};

fn default_vocab() -> usize {
    4
}
fn default_shift_range() -> (f64, f64) {
    (0.0, 0.3)
}
fn default_delta_gain() -> f64 {
    0.5
}
fn default_noise_sd() -> f64 {
    0.05
}
fn default_task_count() -> usize {
    200
}

/// Generator parameters for a synthetic task suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    #[serde(default = "default_vocab")]
    pub plan_vocab_size: usize,
    #[serde(default = "default_vocab")]
    pub answer_vocab_size: usize,
    /// Closed interval for the per-task context shift, within [0, 0.5].
    #[serde(default = "default_shift_range")]
    pub shift_range: (f64, f64),
    /// Return gain of a correct pair, in (0, 1].
    #[serde(default = "default_delta_gain")]
    pub delta_gain: f64,
    /// Half-width of the two-point evaluator noise; 0 disables noise.
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
    #[serde(default = "default_task_count")]
    pub task_count: usize,
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec {
            plan_vocab_size: 4,
            answer_vocab_size: 4,
            shift_range: (0.0, 0.3),
            delta_gain: 0.5,
            noise_sd: 0.05,
            task_count: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("invalid env spec: {0}")]
    InvalidSpec(String),
    #[error("token {token} out of vocabulary (size {vocab})")]
    OutOfVocab { token: u32, vocab: usize },
}

impl EnvSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        let (lo, hi) = self.shift_range;
        if self.plan_vocab_size < 2 || self.answer_vocab_size < 2 {
            return Err(EnvError::InvalidSpec("vocab sizes must be >= 2".into()));
        }
        if !(0.0..=0.5).contains(&lo) || !(0.0..=0.5).contains(&hi) || lo > hi {
            return Err(EnvError::InvalidSpec(format!(
                "shift_range [{lo}, {hi}] must be a closed interval within [0, 0.5]"
            )));
        }
        if !(self.delta_gain > 0.0 && self.delta_gain <= 1.0) {
            return Err(EnvError::InvalidSpec("delta_gain must be in (0, 1]".into()));
        }
        if self.noise_sd < 0.0 {
            return Err(EnvError::InvalidSpec("noise_sd must be >= 0".into()));
        }
        if self.task_count == 0 {
            return Err(EnvError::InvalidSpec("task_count must be positive".into()));
        }
        Ok(())
    }
}

/// One generated task: its observable text, ground-truth decomposition terms,
/// and a witness correct pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: u64,
    pub observable_text: String,
    /// Context-level shift of every return for this task.
    pub shift_m: f64,
    /// Correct answer per plan. Plan-insensitive tasks repeat one answer.
    pub correct_answer: Vec<u32>,
    pub answer_vocab_size: usize,
    pub plan_sensitive: bool,
    /// Gain attained by a correct pair.
    pub delta_gain: f64,
    /// A (plan, answer) pair attaining the gain.
    pub gold: (u32, u32),
}

impl TaskInstance {
    /// The marginal decision effect of a pair: `delta_gain` iff correct.
    pub fn delta(&self, plan: u32, answer: u32) -> f64 {
        if self.correct_answer[plan as usize] == answer {
            self.delta_gain
        } else {
            0.0
        }
    }
}

/// Terminal score in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Return(pub f64);

/// Generates the task suite deterministically from (spec, seed).
pub fn generate_tasks(spec: &EnvSpec, seed: u64) -> Result<Vec<TaskInstance>, EnvError> {
    spec.validate()?;
    let (lo, hi) = spec.shift_range;
    let mut tasks = Vec::with_capacity(spec.task_count);
    for task_id in 0..spec.task_count as u64 {
        let mut stream = StreamLabel::new(seed, StreamPurpose::TaskGen, task_id).stream();
        let shift_m = lo + (hi - lo) * stream.uniform();
        let plan_sensitive = stream.coin();
        let correct_answer: Vec<u32> = if plan_sensitive {
            (0..spec.plan_vocab_size)
                .map(|_| (stream.uniform() * spec.answer_vocab_size as f64) as u32)
                .collect()
        } else {
            let shared = (stream.uniform() * spec.answer_vocab_size as f64) as u32;
            vec![shared; spec.plan_vocab_size]
        };
        let gold_plan = (stream.uniform() * spec.plan_vocab_size as f64) as u32;
        let gold = (gold_plan, correct_answer[gold_plan as usize]);
        tasks.push(TaskInstance {
            task_id,
            observable_text: format!("synthetic task {task_id}"),
            shift_m,
            correct_answer,
            answer_vocab_size: spec.answer_vocab_size,
            plan_sensitive,
            delta_gain: spec.delta_gain,
            gold,
        });
    }
    Ok(tasks)
}

fn check_vocab(token: u32, vocab: usize) -> Result<(), EnvError> {
    if (token as usize) < vocab {
        Ok(())
    } else {
        Err(EnvError::OutOfVocab { token, vocab })
    }
}

/// Terminal evaluator: `clamp(m + delta + noise, 0, 1)`. Deterministic given
/// all four inputs; sees only the final pair, never intermediate state.
pub fn evaluate(
    task: &TaskInstance,
    plan: u32,
    answer: u32,
    noise_draw: f64,
) -> Result<Return, EnvError> {
    check_vocab(plan, task.correct_answer.len())?;
    check_vocab(answer, task.answer_vocab_size)?;
    let raw = task.shift_m + task.delta(plan, answer) + noise_draw;
    Ok(Return(raw.clamp(0.0, 1.0)))
}

/// Ground-truth decomposition terms for diagnostics.
pub fn oracle_components(
    task: &TaskInstance,
    plan: u32,
    answer: u32,
) -> Result<(f64, f64), EnvError> {
    check_vocab(plan, task.correct_answer.len())?;
    check_vocab(answer, task.answer_vocab_size)?;
    Ok((task.shift_m, task.delta(plan, answer)))
}

/// Draws the evaluator noise: symmetric two-point support {-sd, +sd}, so
/// expectations over noise reduce to a two-term average.
pub fn sample_noise(noise_sd: f64, stream: &mut crate::rng::RngStream) -> f64 {
    if noise_sd == 0.0 {
        0.0
    } else if stream.coin() {
        noise_sd
    } else {
        -noise_sd
    }
}

/// The finite noise support: {0} when disabled, {-sd, +sd} otherwise. Each
/// point carries equal probability.
pub fn noise_support(noise_sd: f64) -> Vec<f64> {
    if noise_sd == 0.0 {
        vec![0.0]
    } else {
        vec![-noise_sd, noise_sd]
    }
}

/// Exact expectation of the return over the noise support.
pub fn expected_return(task: &TaskInstance, plan: u32, answer: u32, noise_sd: f64) -> f64 {
    let support = noise_support(noise_sd);
    support
        .iter()
        .map(|&eps| evaluate(task, plan, answer, eps).expect("tokens validated").0)
        .sum::<f64>()
        / support.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> EnvSpec {
        EnvSpec {
            plan_vocab_size: 3,
            answer_vocab_size: 4,
            shift_range: (0.0, 0.4),
            delta_gain: 1.0,
            noise_sd: 0.0,
            task_count: 100,
        }
    }

    fn task_with(shift: f64, gain: f64) -> TaskInstance {
        TaskInstance {
            task_id: 0,
            observable_text: "t".into(),
            shift_m: shift,
            correct_answer: vec![1, 2],
            answer_vocab_size: 4,
            plan_sensitive: true,
            delta_gain: gain,
            gold: (0, 1),
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec();
        assert_eq!(
            generate_tasks(&s, 11).unwrap(),
            generate_tasks(&s, 11).unwrap()
        );
    }

    #[test]
    fn degenerate_shift_interval() {
        let mut s = spec();
        s.shift_range = (0.0, 0.0);
        for task in generate_tasks(&s, 3).unwrap() {
            assert_eq!(task.shift_m, 0.0);
        }
    }

    #[test]
    fn plan_sensitive_mix_is_roughly_half() {
        let tasks = generate_tasks(&spec(), 17).unwrap();
        let sensitive = tasks.iter().filter(|t| t.plan_sensitive).count();
        // Bernoulli(0.5) over 100 tasks: 3.5 sigma is ~17.5
        assert!(
            (32..=68).contains(&sensitive),
            "got {sensitive}/100 plan-sensitive tasks"
        );
    }

    #[test]
    fn insensitive_tasks_repeat_one_answer() {
        let tasks = generate_tasks(&spec(), 5).unwrap();
        for task in tasks.iter().filter(|t| !t.plan_sensitive) {
            let first = task.correct_answer[0];
            assert!(task.correct_answer.iter().all(|&a| a == first));
        }
    }

    #[test]
    fn gold_attains_gain() {
        for task in generate_tasks(&spec(), 23).unwrap() {
            let (p, a) = task.gold;
            assert_eq!(task.delta(p, a), task.delta_gain);
        }
    }

    #[test]
    fn correct_pair_no_shift_scores_one() {
        let task = task_with(0.0, 1.0);
        assert_eq!(evaluate(&task, 0, 1, 0.0).unwrap().0, 1.0);
    }

    #[test]
    fn shift_only_passes_through() {
        let task = task_with(0.3, 1.0);
        // wrong answer for plan 0
        assert_eq!(evaluate(&task, 0, 0, 0.0).unwrap().0, 0.3);
    }

    #[test]
    fn clamp_caps_at_one() {
        let task = task_with(0.4, 1.0);
        assert_eq!(evaluate(&task, 0, 1, 0.0).unwrap().0, 1.0);
    }

    #[test]
    fn out_of_vocab_plan_rejected() {
        let task = task_with(0.0, 1.0);
        assert!(matches!(
            evaluate(&task, 9, 0, 0.0),
            Err(EnvError::OutOfVocab { token: 9, .. })
        ));
    }

    #[test]
    fn oracle_matches_construction() {
        let task = task_with(0.25, 1.0);
        assert_eq!(oracle_components(&task, 0, 1).unwrap(), (0.25, 1.0));
        assert_eq!(oracle_components(&task, 0, 3).unwrap(), (0.25, 0.0));
    }

    #[test]
    fn evaluate_equals_clamped_components() {
        let task = task_with(0.4, 0.8);
        for plan in 0..2u32 {
            for answer in 0..4u32 {
                let (m, d) = oracle_components(&task, plan, answer).unwrap();
                assert_eq!(
                    evaluate(&task, plan, answer, 0.0).unwrap().0,
                    (m + d).clamp(0.0, 1.0)
                );
            }
        }
    }

    #[test]
    fn spec_bounds_enforced() {
        let mut bad = spec();
        bad.shift_range = (0.0, 0.7);
        assert!(bad.validate().is_err());
        let mut bad = spec();
        bad.delta_gain = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = spec();
        bad.plan_vocab_size = 1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn two_point_noise_is_zero_mean() {
        let support = noise_support(0.1);
        assert_eq!(support, vec![-0.1, 0.1]);
        assert_eq!(support.iter().sum::<f64>(), 0.0);
        assert_eq!(noise_support(0.0), vec![0.0]);
    }
}
