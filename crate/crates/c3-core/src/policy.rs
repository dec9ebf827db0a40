//! Role-conditioned tabular softmax policies over finite macro-action
//! vocabularies.
//!
//! One shared table serves every role: rows are keyed by (role, kappa), so two
//! roles sharing parameters are differentiated exactly the way a shared model
//! is differentiated by its role prompt. Unseen contexts fall back to a zero
//! logit row, i.e. the uniform distribution. All softmax arithmetic uses
//! max-subtracted log-sum-exp.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Deref;
use std::path::Path;

use crate::protocol::ContextKey;
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("checkpoint line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("checkpoint row for role {role} has {got} logits, expected {expected}")]
    VocabMismatch {
        role: usize,
        got: usize,
        expected: usize,
    },
    #[error("io error: {0}")]
    Io(String),
}

/// Live policy table: per-(role, context) logit rows plus per-role vocab
/// sizes. Absent rows behave as all-zero logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    role_vocabs: Vec<usize>,
    logits: HashMap<(usize, u64), Vec<f64>>,
}

/// Immutable deep copy of a [`PolicyTable`] frozen at iteration start. All
/// behavior sampling and replay for that iteration reads the snapshot, never
/// the live table.
#[derive(Debug, Clone)]
pub struct Snapshot {
    table: PolicyTable,
}

impl Snapshot {
    pub fn of(table: &PolicyTable) -> Self {
        Snapshot {
            table: table.clone(),
        }
    }
}

impl Deref for Snapshot {
    type Target = PolicyTable;

    fn deref(&self) -> &PolicyTable {
        &self.table
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&z| z - log_z).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).iter().map(|&l| l.exp()).collect()
}

impl PolicyTable {
    /// A fresh table with all-uniform rows; `role_vocabs[r]` is role r's
    /// macro-action vocabulary size.
    pub fn new(role_vocabs: Vec<usize>) -> Self {
        assert!(
            role_vocabs.iter().all(|&v| v >= 1),
            "every role needs a nonempty vocabulary"
        );
        PolicyTable {
            role_vocabs,
            logits: HashMap::new(),
        }
    }

    pub fn role_vocab(&self, role: usize) -> usize {
        self.role_vocabs[role]
    }

    pub fn role_vocabs(&self) -> &[usize] {
        &self.role_vocabs
    }

    pub fn row_count(&self) -> usize {
        self.logits.len()
    }

    /// The logit row for (role, key); zeros when the context is unseen.
    pub fn row(&self, role: usize, key: &ContextKey) -> Vec<f64> {
        self.logits
            .get(&(role, key.kappa))
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.role_vocabs[role]])
    }

    /// Mutable row access for the optimizer, materializing the default row on
    /// first touch.
    pub fn row_mut(&mut self, role: usize, key: &ContextKey) -> &mut Vec<f64> {
        let vocab = self.role_vocabs[role];
        self.logits
            .entry((role, key.kappa))
            .or_insert_with(|| vec![0.0; vocab])
    }

    pub fn probs(&self, role: usize, key: &ContextKey) -> Vec<f64> {
        softmax(&self.row(role, key))
    }

    /// Exact log softmax value of one token.
    pub fn log_prob(&self, role: usize, key: &ContextKey, token: u32) -> f64 {
        log_softmax(&self.row(role, key))[token as usize]
    }

    /// Draws one token by inverse CDF over the softmax row. Deterministic
    /// given the stream state; a shared stream couples draws across rows.
    pub fn sample_action(&self, role: usize, key: &ContextKey, stream: &mut RngStream) -> u32 {
        let probs = self.probs(role, key);
        let u = stream.uniform();
        let mut cum = 0.0;
        for (token, &p) in probs.iter().enumerate() {
            cum += p;
            if u < cum {
                return token as u32;
            }
        }
        (probs.len() - 1) as u32
    }

    /// Greedy token: argmax logits, ties broken by lowest token index.
    pub fn greedy_action(&self, role: usize, key: &ContextKey) -> u32 {
        let row = self.row(role, key);
        let mut best = 0usize;
        for (i, &z) in row.iter().enumerate() {
            if z > row[best] {
                best = i;
            }
        }
        best as u32
    }

    /// Writes the table as `role,kappa,logit_0,…,logit_{V-1}` lines, sorted by
    /// (role, kappa). Floats round-trip exactly.
    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let mut keys: Vec<&(usize, u64)> = self.logits.keys().collect();
        keys.sort();
        let mut out = String::new();
        for &&(role, kappa) in &keys {
            let row = &self.logits[&(role, kappa)];
            write!(out, "{role},{kappa}").expect("writing to string");
            for z in row {
                write!(out, ",{z}").expect("writing to string");
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| PolicyError::Io(e.to_string()))
    }

    /// Loads a checkpoint written by [`PolicyTable::save`]. Row widths must
    /// match `role_vocabs`.
    pub fn load(role_vocabs: Vec<usize>, path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path).map_err(|e| PolicyError::Io(e.to_string()))?;
        let mut table = PolicyTable::new(role_vocabs);
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let role: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| PolicyError::Malformed {
                    line: idx + 1,
                    msg: "missing role".into(),
                })?;
            let kappa: u64 = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| PolicyError::Malformed {
                    line: idx + 1,
                    msg: "missing kappa".into(),
                })?;
            let row: Vec<f64> = fields
                .map(|f| {
                    f.parse().map_err(|_| PolicyError::Malformed {
                        line: idx + 1,
                        msg: format!("bad logit {f:?}"),
                    })
                })
                .collect::<Result<_, _>>()?;
            if role >= table.role_vocabs.len() || row.len() != table.role_vocabs[role] {
                return Err(PolicyError::VocabMismatch {
                    role,
                    got: row.len(),
                    expected: table.role_vocabs.get(role).copied().unwrap_or(0),
                });
            }
            table.logits.insert((role, kappa), row);
        }
        Ok(table)
    }
}

/// Likelihood ratio of one token between the live table and the behavior
/// snapshot.
pub fn ratio(
    theta: &PolicyTable,
    behavior: &Snapshot,
    role: usize,
    key: &ContextKey,
    token: u32,
) -> f64 {
    (theta.log_prob(role, key, token) - behavior.log_prob(role, key, token)).exp()
}

/// Exact discrete KL(theta(.|h) || reference(.|h)) for one row.
pub fn kl_to_reference(
    theta: &PolicyTable,
    reference: &Snapshot,
    role: usize,
    key: &ContextKey,
) -> f64 {
    let p = theta.probs(role, key);
    let log_p = log_softmax(&theta.row(role, key));
    let log_q = log_softmax(&reference.row(role, key));
    p.iter()
        .zip(log_p.iter().zip(log_q.iter()))
        .map(|(&pi, (&lp, &lq))| pi * (lp - lq))
        .sum()
}

/// Analytic softmax policy-gradient identity for one row:
/// `d/dz_a E_{a'~softmax(z)}[Q(a')] = p(a) (Q(a) - sum_a' p(a') Q(a'))`.
/// Used as the oracle the credit pipeline is checked against.
pub fn softmax_value_gradient(logits: &[f64], q: &[f64]) -> Vec<f64> {
    let p = softmax(logits);
    let v: f64 = p.iter().zip(q.iter()).map(|(&pi, &qi)| pi * qi).sum();
    p.iter().zip(q.iter()).map(|(&pi, &qi)| pi * (qi - v)).collect()
}
