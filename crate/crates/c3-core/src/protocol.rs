//! Decision protocols as event-type DAGs, canonical episode serialization,
//! deterministic context rendering, and bit-exact context keys.
//!
//! A protocol is a template: event types with parent edges and one terminal
//! event. A concrete episode realizes each event type as one occurrence, in
//! the protocol's list order (which must be topological — list order is the
//! canonical serialization and breaks any simultaneity ties). The context
//! visible at an occurrence is a pure function of the task text and the
//! rendered outputs of its parent occurrences:
//!
//! ```text
//! Problem:
//!   <task text>
//!
//! Context:
//!   <parent outputs joined by two newlines>
//! ```
//!
//! Context identity is a 63-bit key: the 8-byte BLAKE2b digest of the UTF-8
//! context bytes, read big-endian, reduced mod 2^63. Key collisions are fatal
//! correctness failures; auxiliary fingerprints (character length plus an
//! independent 64-bit digest) detect them.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use blake2::digest::{Update, VariableOutput};
use blake2::Blake2bVar;
use sha2::{Digest, Sha256};

/// One event type in a protocol template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventType {
    /// Index of this event type; must equal its position in the protocol list.
    pub id: usize,
    /// Acting agent for occurrences of this type.
    pub role: usize,
    /// Event types whose outputs are visible here, in context order.
    pub parents: Vec<usize>,
}

/// An interaction template: event types in canonical (topological) order plus
/// a designated terminal event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub event_types: Vec<EventType>,
    pub terminal_event: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("event type {got} stored at position {expected}; ids must equal list positions")]
    IdMismatch { expected: usize, got: usize },
    #[error("event {event} lists parent {parent} at or after itself; list order must be topological (cycle or forward edge)")]
    NotTopological { event: usize, parent: usize },
    #[error("event {event} lists parent {parent} more than once")]
    DuplicateParent { event: usize, parent: usize },
    #[error("terminal event {terminal} is not the last event type ({last})")]
    TerminalNotLast { terminal: usize, last: usize },
    #[error("protocol has no event types")]
    Empty,
}

impl Protocol {
    /// The sequential two-agent protocol: a reasoner (role 0) feeding an
    /// actor (role 1), with the actor terminal.
    pub fn two_agent() -> Self {
        Protocol {
            event_types: vec![
                EventType {
                    id: 0,
                    role: 0,
                    parents: vec![],
                },
                EventType {
                    id: 1,
                    role: 1,
                    parents: vec![0],
                },
            ],
            terminal_event: 1,
        }
    }

    /// Checks the structural invariants: ids equal positions, parents appear
    /// strictly earlier (so the list order is a topological order and the
    /// template is acyclic), parents are unique, terminal event last.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.event_types.is_empty() {
            return Err(ProtocolError::Empty);
        }
        for (pos, ev) in self.event_types.iter().enumerate() {
            if ev.id != pos {
                return Err(ProtocolError::IdMismatch {
                    expected: pos,
                    got: ev.id,
                });
            }
            let mut seen = Vec::with_capacity(ev.parents.len());
            for &p in &ev.parents {
                if p >= ev.id {
                    return Err(ProtocolError::NotTopological {
                        event: ev.id,
                        parent: p,
                    });
                }
                if seen.contains(&p) {
                    return Err(ProtocolError::DuplicateParent {
                        event: ev.id,
                        parent: p,
                    });
                }
                seen.push(p);
            }
        }
        let last = self.event_types.len() - 1;
        if self.terminal_event != last {
            return Err(ProtocolError::TerminalNotLast {
                terminal: self.terminal_event,
                last,
            });
        }
        Ok(())
    }

    pub fn event(&self, id: usize) -> &EventType {
        &self.event_types[id]
    }

    /// Whether any later event consumes this event's output. Occurrences of
    /// dependency-free non-scored events (the terminal, in unscored reference
    /// rollouts) need no sampled action.
    pub fn has_dependents(&self, id: usize) -> bool {
        self.event_types
            .iter()
            .any(|ev| ev.parents.contains(&id))
    }

    /// Number of distinct roles referenced by the protocol.
    pub fn role_count(&self) -> usize {
        self.event_types
            .iter()
            .map(|ev| ev.role + 1)
            .max()
            .unwrap_or(0)
    }
}

/// A realized decision node in an episode's event graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occurrence {
    pub node_id: usize,
    pub event_type: usize,
    pub parent_nodes: Vec<usize>,
}

/// Realizes one episode graph: one occurrence per event type, in canonical
/// order, terminal last. `task_id` names the instance the graph belongs to;
/// the structure itself is template-determined.
pub fn build_episode_graph(
    protocol: &Protocol,
    _task_id: u64,
) -> Result<Vec<Occurrence>, ProtocolError> {
    protocol.validate()?;
    Ok(protocol
        .event_types
        .iter()
        .map(|ev| Occurrence {
            node_id: ev.id,
            event_type: ev.id,
            parent_nodes: ev.parents.clone(),
        })
        .collect())
}

/// One committed entry of an episode transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub node_id: usize,
    pub event_type: usize,
    pub action_token: u32,
    pub rendered_text: String,
}

/// Ordered immutable record of the messages produced so far, in canonical
/// serialization order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<TranscriptEntry>) -> Self {
        Self { entries }
    }

    pub fn push(&mut self, entry: TranscriptEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Action token recorded for an event type, if present.
    pub fn token_of(&self, event_type: usize) -> Option<u32> {
        self.entries
            .iter()
            .find(|e| e.event_type == event_type)
            .map(|e| e.action_token)
    }
}

/// Canonical rendering of an action token as transcript text.
pub fn render_action(token: u32) -> String {
    token.to_string()
}

fn normalize(text: &str) -> String {
    let unified = text.replace("\r\n", "\n").replace('\r', "\n");
    unified.trim().to_string()
}

/// Renders the canonical context string seen at an occurrence of
/// `target_event`: the task text in the Problem field and the target's parent
/// outputs (protocol order, two-newline separated) in the Context field. The
/// prefix may contain non-parent entries; they are ignored, so the context
/// depends only on the parents' outputs and the task text.
///
/// # Panics
/// Panics if a parent's entry is missing from the prefix — the caller must
/// supply a prefix covering all parents of the target occurrence.
pub fn render_context(
    task_text: &str,
    transcript_prefix: &Transcript,
    target_event: &EventType,
) -> String {
    let parent_outputs: Vec<String> = target_event
        .parents
        .iter()
        .map(|&p| {
            let entry = transcript_prefix
                .entries()
                .iter()
                .find(|e| e.event_type == p)
                .unwrap_or_else(|| {
                    panic!(
                        "transcript prefix is missing parent event {p} of event {}",
                        target_event.id
                    )
                });
            normalize(&entry.rendered_text)
        })
        .collect();
    format!(
        "Problem:\n  {}\n\nContext:\n  {}",
        normalize(task_text),
        parent_outputs.join("\n\n")
    )
}

/// Deterministic 63-bit identity of a context string, with auxiliary
/// fingerprints for collision detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContextKey {
    /// 8-byte BLAKE2b digest of the UTF-8 bytes, big-endian, mod 2^63.
    pub kappa: u64,
    /// Number of Unicode scalar values in the context string.
    pub char_length: u64,
    /// First 8 bytes of the SHA-256 digest, big-endian — independent of the
    /// primary hash.
    pub secondary_digest: u64,
}

const KAPPA_MASK: u64 = (1 << 63) - 1;

/// Computes the context key of a context string.
pub fn context_key(h: &str) -> ContextKey {
    let mut hasher = Blake2bVar::new(8).expect("blake2b supports 8-byte output");
    hasher.update(h.as_bytes());
    let mut digest = [0u8; 8];
    hasher
        .finalize_variable(&mut digest)
        .expect("output length matches");
    let kappa = u64::from_be_bytes(digest) & KAPPA_MASK;

    let sha = Sha256::digest(h.as_bytes());
    let secondary_digest = u64::from_be_bytes(sha[..8].try_into().expect("digest is 32 bytes"));

    ContextKey {
        kappa,
        char_length: h.chars().count() as u64,
        secondary_digest,
    }
}

/// A primary-key collision: two distinct context strings produced the same
/// kappa. Not recoverable — the run must abort.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("context key collision on kappa={kappa}: fingerprints (len {stored_len}, digest {stored_digest:#018x}) vs (len {got_len}, digest {got_digest:#018x})")]
pub struct FatalCollision {
    pub kappa: u64,
    pub stored_len: u64,
    pub got_len: u64,
    pub stored_digest: u64,
    pub got_digest: u64,
}

/// Checks a previously issued key against a context string: ok iff the
/// auxiliary fingerprints match.
pub fn verify_key(key: &ContextKey, h: &str) -> Result<(), FatalCollision> {
    let fresh = context_key(h);
    debug_assert_eq!(key.kappa, fresh.kappa, "verify_key called across kappas");
    if key.char_length == fresh.char_length && key.secondary_digest == fresh.secondary_digest {
        Ok(())
    } else {
        Err(FatalCollision {
            kappa: key.kappa,
            stored_len: key.char_length,
            got_len: fresh.char_length,
            stored_digest: key.secondary_digest,
            got_digest: fresh.secondary_digest,
        })
    }
}

/// Tracks every kappa issued during a run and aborts on fingerprint mismatch.
#[derive(Debug, Clone, Default)]
pub struct KeyRegistry {
    issued: HashMap<u64, ContextKey>,
}

impl KeyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Computes and registers the key for a context string. Returns the key,
    /// or the fatal collision if this kappa was issued for a different string.
    pub fn key_for(&mut self, h: &str) -> Result<ContextKey, FatalCollision> {
        let key = context_key(h);
        match self.issued.get(&key.kappa) {
            Some(stored) => {
                verify_key(stored, h)?;
            }
            None => {
                self.issued.insert(key.kappa, key);
            }
        }
        Ok(key)
    }

    pub fn len(&self) -> usize {
        self.issued.len()
    }

    pub fn is_empty(&self) -> bool {
        self.issued.is_empty()
    }
}
