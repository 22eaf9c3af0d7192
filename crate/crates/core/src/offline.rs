//! Offline learners over a fixed buffer and policy evaluation.
//!
//! Both learners work on the empirical MDP of the buffer: states are identified
//! by their exact encoded vectors, and every `(state, action)` pair backs up the
//! average over its occurrences of `r + gamma * (1 - e) * V(x')`.
//!
//! * FQI takes `V(x') = max_u Q(x', u)` over all actions.
//! * Discrete BCQ restricts the max to actions whose behavior count satisfies
//!   `N(x', u) / max_a N(x', a) >= tau`. States without any behavior data fall
//!   back to the unconstrained max.
//!
//! Q starts at zero. Greedy ties go to the lowest action id, and states never
//! seen in the buffer act greedily on the all-zero row, i.e. take action 0.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{Action, ActionSpec, ReplayBuffer};
use crate::envs::{make_env, DomainConfig, EnvError};
use crate::seeds::derive_seed;

pub const POLICY_MAGIC: &[u8; 4] = b"DVQT";
pub const POLICY_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("cannot train on an empty buffer")]
    EmptyBuffer,
    #[error("offline learners need discrete actions")]
    NotDiscrete,
    #[error("invalid learner configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("policy state width {policy} does not match the environment's {env}")]
    StateWidth { policy: usize, env: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("policy checkpoint format error: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fqi,
    DiscreteBcq,
}

/// How each iteration applies the Bellman backup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackupMode {
    /// Synchronous sweep over every `(state, action)` pair in the buffer.
    Sweep,
    /// `mini_batch_size` transitions drawn uniformly per iteration, each moving
    /// its entry toward the backup target by `learning_rate`.
    Minibatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    #[serde(default = "defaults::algorithm")]
    pub algorithm: Algorithm,
    #[serde(default = "defaults::discount")]
    pub discount: f64,
    #[serde(default = "defaults::iterations")]
    pub iterations: usize,
    #[serde(default = "defaults::backup")]
    pub backup: BackupMode,
    #[serde(default = "defaults::mini_batch_size")]
    pub mini_batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    /// Batch-constraint threshold on relative behavior frequency.
    #[serde(default = "defaults::constraint_threshold")]
    pub constraint_threshold: f64,
    /// Checkpoint cadence as a fraction of `iterations`.
    #[serde(default = "defaults::checkpoint_fraction")]
    pub checkpoint_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    use super::*;
    pub fn algorithm() -> Algorithm {
        Algorithm::DiscreteBcq
    }
    pub fn discount() -> f64 {
        0.9
    }
    pub fn iterations() -> usize {
        300
    }
    pub fn backup() -> BackupMode {
        BackupMode::Sweep
    }
    pub fn mini_batch_size() -> usize {
        100
    }
    pub fn learning_rate() -> f64 {
        0.1
    }
    pub fn constraint_threshold() -> f64 {
        0.3
    }
    pub fn checkpoint_fraction() -> f64 {
        0.1
    }
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            algorithm: defaults::algorithm(),
            discount: defaults::discount(),
            iterations: defaults::iterations(),
            backup: defaults::backup(),
            mini_batch_size: defaults::mini_batch_size(),
            learning_rate: defaults::learning_rate(),
            constraint_threshold: defaults::constraint_threshold(),
            checkpoint_fraction: defaults::checkpoint_fraction(),
            seed: 0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |m: String| Err(LearnerError::Config(m));
        if !(0.0..1.0).contains(&self.discount) {
            return bad(format!("discount {} outside [0, 1)", self.discount));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.mini_batch_size == 0 {
            return bad("mini_batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad(format!("learning_rate {} outside (0, 1]", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.constraint_threshold) {
            return bad(format!("constraint_threshold {} outside [0, 1]", self.constraint_threshold));
        }
        if !(self.checkpoint_fraction > 0.0 && self.checkpoint_fraction <= 1.0) {
            return bad(format!("checkpoint_fraction {} outside (0, 1]", self.checkpoint_fraction));
        }
        Ok(())
    }

    /// Iteration numbers (1-based) after which a checkpoint is taken; always ends
    /// with `iterations`.
    pub fn checkpoint_iterations(&self) -> Vec<usize> {
        let every = ((self.iterations as f64 * self.checkpoint_fraction).round() as usize).max(1);
        let mut at: Vec<usize> = (every..=self.iterations).step_by(every).collect();
        if at.last() != Some(&self.iterations) {
            at.push(self.iterations);
        }
        at
    }
}

fn state_key(state: &[f64]) -> Vec<u64> {
    state.iter().map(|x| x.to_bits()).collect()
}

/// Greedy policy over a learned Q-table with an optional batch constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflinePolicy {
    algorithm: Algorithm,
    constraint_threshold: f64,
    n_actions: usize,
    state_dim: usize,
    /// Encoded states in order of first appearance in the buffer.
    states: Vec<Vec<f64>>,
    index: HashMap<Vec<u64>, usize>,
    q: Vec<Vec<f64>>,
    counts: Vec<Vec<u64>>,
}

impl OfflinePolicy {
    fn new(algorithm: Algorithm, constraint_threshold: f64, n_actions: usize, state_dim: usize) -> Self {
        Self {
            algorithm,
            constraint_threshold,
            n_actions,
            state_dim,
            states: Vec::new(),
            index: HashMap::new(),
            q: Vec::new(),
            counts: Vec::new(),
        }
    }

    fn intern(&mut self, state: &[f64]) -> usize {
        let key = state_key(state);
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        let i = self.states.len();
        self.index.insert(key, i);
        self.states.push(state.to_vec());
        self.q.push(vec![0.0; self.n_actions]);
        self.counts.push(vec![0; self.n_actions]);
        i
    }

    /// A policy that has seen no data: every state is unseen and takes action 0.
    pub fn untrained(cfg: &LearnerConfig, n_actions: u32, state_dim: usize) -> Self {
        Self::new(cfg.algorithm, cfg.constraint_threshold, n_actions as usize, state_dim)
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn lookup(&self, state: &[f64]) -> Option<usize> {
        self.index.get(&state_key(state)).copied()
    }

    pub fn q_values(&self, state: &[f64]) -> Option<&[f64]> {
        self.lookup(state).map(|i| self.q[i].as_slice())
    }

    pub fn behavior_counts(&self, state: &[f64]) -> Option<&[u64]> {
        self.lookup(state).map(|i| self.counts[i].as_slice())
    }

    /// Actions eligible at state `i` under the algorithm's constraint.
    fn allowed(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let counts = &self.counts[i];
        let max = counts.iter().copied().max().unwrap_or(0);
        let constrained = self.algorithm == Algorithm::DiscreteBcq && max > 0;
        (0..self.n_actions)
            .filter(move |&a| !constrained || counts[a] as f64 / max as f64 >= self.constraint_threshold)
    }

    fn best(&self, i: usize) -> (usize, f64) {
        let q = &self.q[i];
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for a in self.allowed(i) {
            if q[a] > best.1 {
                best = (a, q[a]);
            }
        }
        best
    }

    /// Greedy action; unseen states take action 0.
    pub fn act(&self, state: &[f64]) -> u32 {
        match self.lookup(state) {
            Some(i) => self.best(i).0 as u32,
            None => 0,
        }
    }

    /// Binary table dump, little-endian: `"DVQT"`, `u8` version, `u8` algorithm
    /// (0 FQI, 1 discrete BCQ), `f64` constraint threshold, `u32` actions, `u32`
    /// state width, `u64` state count, then per state its encoded vector (`f64`s),
    /// Q row (`f64`s) and behavior counts (`u64`s).
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), LearnerError> {
        w.write_all(POLICY_MAGIC)?;
        w.write_all(&[POLICY_VERSION, u8::from(self.algorithm == Algorithm::DiscreteBcq)])?;
        w.write_all(&self.constraint_threshold.to_le_bytes())?;
        w.write_all(&(self.n_actions as u32).to_le_bytes())?;
        w.write_all(&(self.state_dim as u32).to_le_bytes())?;
        w.write_all(&(self.states.len() as u64).to_le_bytes())?;
        for i in 0..self.states.len() {
            for x in self.states[i].iter().chain(&self.q[i]) {
                w.write_all(&x.to_le_bytes())?;
            }
            for c in &self.counts[i] {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(bytes: &[u8]) -> Result<Self, LearnerError> {
        let fail = |m: &str| LearnerError::Format(m.to_owned());
        if bytes.len() < 30 || &bytes[..4] != POLICY_MAGIC {
            return Err(fail("missing DVQT header"));
        }
        if bytes[4] != POLICY_VERSION {
            return Err(LearnerError::Format(format!("unsupported version {}", bytes[4])));
        }
        let algorithm = match bytes[5] {
            0 => Algorithm::Fqi,
            1 => Algorithm::DiscreteBcq,
            _ => return Err(fail("unknown algorithm byte")),
        };
        let tau = f64::from_le_bytes(bytes[6..14].try_into().unwrap());
        let n_actions = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
        let state_dim = u32::from_le_bytes(bytes[18..22].try_into().unwrap()) as usize;
        let n_states = u64::from_le_bytes(bytes[22..30].try_into().unwrap()) as usize;
        let record = 8 * (state_dim + 2 * n_actions);
        if n_states.checked_mul(record) != Some(bytes.len() - 30) {
            return Err(fail("payload length does not match the header"));
        }
        let mut policy = Self::new(algorithm, tau, n_actions, state_dim);
        for chunk in bytes[30..].chunks_exact(record) {
            let mut words = chunk.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).unwrap());
            let state: Vec<f64> = words.by_ref().take(state_dim).map(f64::from_le_bytes).collect();
            let i = policy.intern(&state);
            if i + 1 != policy.states.len() {
                return Err(fail("duplicate state in checkpoint"));
            }
            policy.q[i] = words.by_ref().take(n_actions).map(f64::from_le_bytes).collect();
            policy.counts[i] = words.map(u64::from_le_bytes).collect();
        }
        Ok(policy)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LearnerError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LearnerError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::read_from(&bytes)
    }
}

/// Aggregated empirical model of one `(state, action)` pair.
#[derive(Debug, Clone, Default)]
struct PairModel {
    count: u64,
    reward_sum: f64,
    /// `(next state, occurrences)` for non-terminal successors.
    successors: Vec<(usize, u64)>,
}

/// Output of [`train_offline`].
#[derive(Debug, Clone)]
pub struct OfflineTraining {
    pub policy: OfflinePolicy,
    /// Sup-norm change of Q per iteration.
    pub sup_norm_deltas: Vec<f64>,
    /// `(iteration, policy snapshot)` at the configured cadence.
    pub checkpoints: Vec<(usize, OfflinePolicy)>,
}

/// Trains FQI or discrete BCQ on `buffer`.
pub fn train_offline(buffer: &ReplayBuffer, cfg: &LearnerConfig) -> Result<OfflineTraining, LearnerError> {
    cfg.validate()?;
    if buffer.is_empty() {
        return Err(LearnerError::EmptyBuffer);
    }
    let ActionSpec::Discrete { n_actions } = buffer.action_spec else {
        return Err(LearnerError::NotDiscrete);
    };
    let n_actions = n_actions as usize;
    let mut policy = OfflinePolicy::new(cfg.algorithm, cfg.constraint_threshold, n_actions, buffer.state_dim);

    // Interned (state, action, reward, next, terminal) rows.
    let mut rows = Vec::with_capacity(buffer.len());
    for t in &buffer.transitions {
        let Action::Discrete(a) = t.action else {
            return Err(LearnerError::NotDiscrete);
        };
        let s = policy.intern(&t.state);
        let ns = policy.intern(&t.next_state);
        policy.counts[s][a as usize] += 1;
        rows.push((s, a as usize, t.reward, ns, t.terminal));
    }

    let checkpoint_at = cfg.checkpoint_iterations();
    let mut checkpoints = Vec::with_capacity(checkpoint_at.len());
    let mut deltas = Vec::with_capacity(cfg.iterations);
    let gamma = cfg.discount;

    match cfg.backup {
        BackupMode::Sweep => {
            let n_states = policy.states.len();
            let mut model: Vec<Vec<PairModel>> = vec![vec![PairModel::default(); n_actions]; n_states];
            for &(s, a, r, ns, terminal) in &rows {
                let m = &mut model[s][a];
                m.count += 1;
                m.reward_sum += r;
                if !terminal {
                    match m.successors.iter_mut().find(|e| e.0 == ns) {
                        Some(e) => e.1 += 1,
                        None => m.successors.push((ns, 1)),
                    }
                }
            }
            for it in 1..=cfg.iterations {
                let values: Vec<f64> = (0..n_states).map(|s| policy.best(s).1).collect();
                let mut delta: f64 = 0.0;
                for (s, pairs) in model.iter().enumerate() {
                    for (a, m) in pairs.iter().enumerate() {
                        if m.count == 0 {
                            continue;
                        }
                        let future: f64 = m.successors.iter().map(|&(ns, c)| c as f64 * values[ns]).sum();
                        let updated = (m.reward_sum + gamma * future) / m.count as f64;
                        delta = delta.max((updated - policy.q[s][a]).abs());
                        policy.q[s][a] = updated;
                    }
                }
                deltas.push(delta);
                if checkpoint_at.contains(&it) {
                    checkpoints.push((it, policy.clone()));
                }
            }
        }
        BackupMode::Minibatch => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["offline", "minibatch"]));
            for it in 1..=cfg.iterations {
                let mut delta: f64 = 0.0;
                for _ in 0..cfg.mini_batch_size {
                    let (s, a, r, ns, terminal) = rows[rand::Rng::random_range(&mut rng, 0..rows.len())];
                    let future = if terminal { 0.0 } else { policy.best(ns).1 };
                    let step = cfg.learning_rate * (r + gamma * future - policy.q[s][a]);
                    policy.q[s][a] += step;
                    delta = delta.max(step.abs());
                }
                deltas.push(delta);
                if checkpoint_at.contains(&it) {
                    checkpoints.push((it, policy.clone()));
                }
            }
        }
    }
    Ok(OfflineTraining { policy, sup_norm_deltas: deltas, checkpoints })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub mean_return: f64,
    /// Sample standard deviation; zero for a single episode.
    pub std: f64,
    pub std_error: f64,
    pub returns: Vec<f64>,
}

impl EvaluationResult {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let std = if returns.len() > 1 {
            (returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean_return: mean, std, std_error: std / n.sqrt(), returns }
    }
}

/// Runs `episodes` seeded greedy rollouts and reports undiscounted returns.
pub fn evaluate_policy(policy: &OfflinePolicy, env_cfg: &DomainConfig, episodes: usize, seed: u64) -> Result<EvaluationResult, LearnerError> {
    if episodes == 0 {
        return Err(LearnerError::Config("episodes must be at least 1".into()));
    }
    if env_cfg.state_dim() != policy.state_dim {
        return Err(LearnerError::StateWidth { policy: policy.state_dim, env: env_cfg.state_dim() });
    }
    let returns = (0..episodes)
        .into_par_iter()
        .map(|i| -> Result<f64, LearnerError> {
            let mut env = make_env(env_cfg, derive_seed(seed, &["evaluate", &i.to_string()]))?;
            let mut state = env.reset();
            let mut total = 0.0;
            loop {
                let step = env.step(policy.act(&state))?;
                total += step.reward;
                if step.terminal || step.truncated {
                    return Ok(total);
                }
                state = step.next_state;
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvaluationResult::from_returns(returns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::Transition;

    fn s(i: usize) -> Vec<f64> {
        let mut v = vec![0.0; 2];
        v[i] = 1.0;
        v
    }

    fn buffer(rows: Vec<Transition>) -> ReplayBuffer {
        ReplayBuffer::with_transitions(2, ActionSpec::Discrete { n_actions: 2 }, "chain", rows)
    }

    #[test]
    fn errors() {
        let cfg = LearnerConfig::default();
        assert!(matches!(train_offline(&buffer(vec![]), &cfg), Err(LearnerError::EmptyBuffer)));
        let mut b = buffer(vec![Transition::discrete(s(0), 0, s(1), 0.0, false)]);
        b.action_spec = ActionSpec::Continuous { dim: 1 };
        assert!(matches!(train_offline(&b, &cfg), Err(LearnerError::NotDiscrete)));
    }

    #[test]
    fn single_action_with_full_constraint() {
        let rows = (0..10).map(|i| Transition::discrete(s(i % 2), 1, s((i + 1) % 2), -1.0, false)).collect();
        let cfg = LearnerConfig { constraint_threshold: 1.0, iterations: 50, ..LearnerConfig::default() };
        let policy = train_offline(&buffer(rows), &cfg).unwrap().policy;
        // Unseen action 0 keeps Q = 0 > negative Q of action 1, yet the constraint forbids it.
        assert_eq!(policy.act(&s(0)), 1);
        assert_eq!(policy.act(&s(1)), 1);
        assert_eq!(policy.act(&[0.5, 0.5]), 0, "unseen state falls back to action 0");
    }

    #[test]
    fn checkpoint_schedule() {
        let cfg = LearnerConfig { iterations: 300, ..LearnerConfig::default() };
        let at = cfg.checkpoint_iterations();
        assert_eq!(at.len(), 10);
        assert_eq!(at[0], 30);
        assert_eq!(*at.last().unwrap(), 300);
        let cfg = LearnerConfig { iterations: 7, checkpoint_fraction: 0.5, ..LearnerConfig::default() };
        assert_eq!(cfg.checkpoint_iterations(), vec![4, 7]);
    }

    #[test]
    fn minibatch_mode_is_seeded() {
        let rows = (0..40).map(|i| Transition::discrete(s(i % 2), (i % 3 == 0) as u32, s((i + 1) % 2), (i % 5) as f64, i % 7 == 0)).collect();
        let b = buffer(rows);
        let cfg = LearnerConfig { backup: BackupMode::Minibatch, iterations: 20, seed: 3, ..LearnerConfig::default() };
        let a = train_offline(&b, &cfg).unwrap().policy;
        assert_eq!(a, train_offline(&b, &cfg).unwrap().policy);
        let other = LearnerConfig { seed: 4, ..cfg };
        assert_ne!(a, train_offline(&b, &other).unwrap().policy);
    }

    #[test]
    fn checkpoint_round_trip() {
        let rows = (0..10).map(|i| Transition::discrete(s(i % 2), (i % 2) as u32, s((i + 1) % 2), 0.5, i == 9)).collect();
        let policy = train_offline(&buffer(rows), &LearnerConfig::default()).unwrap().policy;
        let mut bytes = Vec::new();
        policy.write_to(&mut bytes).unwrap();
        assert_eq!(OfflinePolicy::read_from(&bytes).unwrap(), policy);
        assert!(OfflinePolicy::read_from(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn single_episode_has_zero_std() {
        let r = EvaluationResult::from_returns(vec![0.7]);
        assert_eq!((r.mean_return, r.std, r.std_error), (0.7, 0.0, 0.0));
    }
}
