//! Transitions and replay buffers.
//!
//! A [`ReplayBuffer`] is an ordered collection of [`Transition`]s together with the
//! dimensional metadata needed to interpret them. Buffers play three roles in the
//! pipeline: the large source buffer, the small target buffer, and the filtered
//! source buffer produced by the data value estimator.

mod io;

pub use io::{export_csv, import_csv, load, read_from, save, write_to, BUFFER_FORMAT_VERSION, BUFFER_MAGIC};

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while sampling, persisting or restoring buffers.
#[derive(Debug, Error)]
pub enum BufferError {
    #[error("cannot sample from an empty buffer")]
    Empty,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {found:?}, expected \"DVRB\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported buffer format version {found} (this build reads version {expected})")]
    Version { found: u8, expected: u8 },
    #[error("truncated buffer file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("dimension inconsistency: {0}")]
    Dimension(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("csv format error: {0}")]
    CsvFormat(String),
}

/// How actions are represented in a buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionSpec {
    /// Integer ids in `[0, n_actions)`.
    Discrete { n_actions: u32 },
    /// Real vectors of length `dim`.
    Continuous { dim: u32 },
}

impl ActionSpec {
    /// Number of real coordinates an action occupies in a feature vector.
    pub fn feature_width(&self) -> usize {
        match self {
            ActionSpec::Discrete { .. } => 1,
            ActionSpec::Continuous { dim } => *dim as usize,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpec::Discrete { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(u32),
    Continuous(Vec<f64>),
}

impl Action {
    /// Writes the action's feature coordinates. Discrete ids become one real coordinate.
    pub fn extend_features(&self, out: &mut Vec<f64>) {
        match self {
            Action::Discrete(id) => out.push(f64::from(*id)),
            Action::Continuous(v) => out.extend_from_slice(v),
        }
    }

    pub fn as_discrete(&self) -> Option<u32> {
        match self {
            Action::Discrete(id) => Some(*id),
            Action::Continuous(_) => None,
        }
    }
}

/// One experience tuple `(state, action, next_state, reward, terminal)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// True iff `next_state` is terminal. Episode truncation is not termination.
    pub terminal: bool,
}

impl Transition {
    pub fn discrete(state: Vec<f64>, action: u32, next_state: Vec<f64>, reward: f64, terminal: bool) -> Self {
        Self { state, action: Action::Discrete(action), next_state, reward, terminal }
    }
}

/// A single invariant violation reported by [`ReplayBuffer::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    StateDim { expected: usize, found: usize },
    NextStateDim { expected: usize, found: usize },
    NonFiniteState,
    NonFiniteNextState,
    NonFiniteReward,
    ActionKind,
    ActionOutOfRange { id: u32, n_actions: u32 },
    ActionDim { expected: usize, found: usize },
    NonFiniteAction,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::StateDim { expected, found } => write!(f, "state has length {found}, expected {expected}"),
            Violation::NextStateDim { expected, found } => {
                write!(f, "next_state has length {found}, expected {expected}")
            }
            Violation::NonFiniteState => f.write_str("non-finite state entry"),
            Violation::NonFiniteNextState => f.write_str("non-finite next_state entry"),
            Violation::NonFiniteReward => f.write_str("non-finite reward"),
            Violation::ActionKind => f.write_str("action kind does not match the buffer's action spec"),
            Violation::ActionOutOfRange { id, n_actions } => write!(f, "action id {id} outside [0, {n_actions})"),
            Violation::ActionDim { expected, found } => write!(f, "action has length {found}, expected {expected}"),
            Violation::NonFiniteAction => f.write_str("non-finite action entry"),
        }
    }
}

/// Ordered collection of transitions with dimensional metadata.
///
/// Buffers are treated as immutable once built; every pipeline stage that
/// "changes" a buffer produces a new one.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    pub transitions: Vec<Transition>,
    pub state_dim: usize,
    pub action_spec: ActionSpec,
    /// Free-form description of the generating domain configuration.
    pub domain_tag: String,
}

impl ReplayBuffer {
    pub fn new(state_dim: usize, action_spec: ActionSpec, domain_tag: impl Into<String>) -> Self {
        Self { transitions: Vec::new(), state_dim, action_spec, domain_tag: domain_tag.into() }
    }

    pub fn with_transitions(
        state_dim: usize,
        action_spec: ActionSpec,
        domain_tag: impl Into<String>,
        transitions: Vec<Transition>,
    ) -> Self {
        Self { transitions, state_dim, action_spec, domain_tag: domain_tag.into() }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// A buffer with the same metadata and the given rows.
    pub fn derive(&self, transitions: Vec<Transition>, domain_tag: impl Into<String>) -> Self {
        Self { transitions, state_dim: self.state_dim, action_spec: self.action_spec, domain_tag: domain_tag.into() }
    }

    /// Checks every transition against the buffer's metadata.
    ///
    /// Violations are data: the returned list holds `(index, violation)` pairs in
    /// buffer order, and an empty buffer is always valid.
    pub fn validate(&self) -> Result<(), Vec<(usize, Violation)>> {
        let mut found = Vec::new();
        for (i, t) in self.transitions.iter().enumerate() {
            self.check_row(t, |v| found.push((i, v)));
        }
        if found.is_empty() {
            Ok(())
        } else {
            Err(found)
        }
    }

    fn check_row(&self, t: &Transition, mut report: impl FnMut(Violation)) {
        let m = self.state_dim;
        if t.state.len() != m {
            report(Violation::StateDim { expected: m, found: t.state.len() });
        }
        if t.next_state.len() != m {
            report(Violation::NextStateDim { expected: m, found: t.next_state.len() });
        }
        if t.state.iter().any(|x| !x.is_finite()) {
            report(Violation::NonFiniteState);
        }
        if t.next_state.iter().any(|x| !x.is_finite()) {
            report(Violation::NonFiniteNextState);
        }
        if !t.reward.is_finite() {
            report(Violation::NonFiniteReward);
        }
        match (&t.action, self.action_spec) {
            (Action::Discrete(id), ActionSpec::Discrete { n_actions }) => {
                if *id >= n_actions {
                    report(Violation::ActionOutOfRange { id: *id, n_actions });
                }
            }
            (Action::Continuous(v), ActionSpec::Continuous { dim }) => {
                if v.len() != dim as usize {
                    report(Violation::ActionDim { expected: dim as usize, found: v.len() });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    report(Violation::NonFiniteAction);
                }
            }
            _ => report(Violation::ActionKind),
        }
    }

    /// Consecutive, non-overlapping batches in buffer order; the last may be short.
    ///
    /// # Panics
    /// If `batch_size` is zero.
    pub fn split_batches(&self, batch_size: usize) -> std::slice::Chunks<'_, Transition> {
        assert!(batch_size >= 1, "batch_size must be at least 1");
        self.transitions.chunks(batch_size)
    }

    /// Draws `k` indices uniformly with replacement, deterministic in `seed`.
    pub fn sample_indices(&self, k: usize, seed: u64) -> Result<Vec<usize>, BufferError> {
        if self.is_empty() {
            return Err(BufferError::Empty);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..k).map(|_| rng.random_range(0..self.len())).collect())
    }

    /// Uniform minibatch with replacement, deterministic in `seed`.
    pub fn sample_batch(&self, k: usize, seed: u64) -> Result<Vec<&Transition>, BufferError> {
        Ok(self.sample_indices(k, seed)?.into_iter().map(|i| &self.transitions[i]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(m: usize, a: u32, r: f64) -> Transition {
        Transition::discrete(vec![0.5; m], a, vec![1.0; m], r, false)
    }

    fn buffer(n: usize) -> ReplayBuffer {
        let rows = (0..n).map(|i| row(2, (i % 3) as u32, i as f64)).collect();
        ReplayBuffer::with_transitions(2, ActionSpec::Discrete { n_actions: 3 }, "test", rows)
    }

    #[test]
    fn empty_buffer_is_valid() {
        assert_eq!(buffer(0).validate(), Ok(()));
    }

    #[test]
    fn nan_reward_is_reported_at_its_index() {
        let mut b = buffer(5);
        b.transitions[2].reward = f64::NAN;
        assert_eq!(b.validate(), Err(vec![(2, Violation::NonFiniteReward)]));
    }

    #[test]
    fn mismatched_state_dim_yields_one_entry() {
        let mut b = buffer(4);
        b.transitions[1].state = vec![0.0; 3];
        let errs = b.validate().unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0], (1, Violation::StateDim { expected: 2, found: 3 }));
    }

    #[test]
    fn action_violations() {
        let mut b = buffer(3);
        b.transitions[0].action = Action::Discrete(3);
        b.transitions[2].action = Action::Continuous(vec![0.0]);
        let errs = b.validate().unwrap_err();
        assert_eq!(errs[0], (0, Violation::ActionOutOfRange { id: 3, n_actions: 3 }));
        assert_eq!(errs[1], (2, Violation::ActionKind));
    }

    #[test]
    fn split_batches_sizes() {
        let sizes = |n, bs| buffer(n).split_batches(bs).map(<[_]>::len).collect::<Vec<_>>();
        assert_eq!(sizes(1000, 200), vec![200; 5]);
        assert_eq!(sizes(5, 2), vec![2, 2, 1]);
        assert_eq!(sizes(3, 10), vec![3]);
        assert!(sizes(0, 4).is_empty());
    }

    #[test]
    #[should_panic]
    fn zero_batch_size_panics() {
        let _ = buffer(3).split_batches(0);
    }

    #[test]
    fn sampling() {
        let b = buffer(1000);
        let a = b.sample_indices(100, 9).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, b.sample_indices(100, 9).unwrap());
        assert_ne!(a, b.sample_indices(100, 10).unwrap());

        let one = buffer(1);
        let s = one.sample_batch(1, 3).unwrap();
        assert_eq!(s, vec![&one.transitions[0]]);

        assert!(matches!(buffer(0).sample_batch(1, 0), Err(BufferError::Empty)));
    }
}
