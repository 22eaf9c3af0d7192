use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{make_env, DomainConfig, EnvError};
use crate::buffer::{ReplayBuffer, Transition};
use crate::seeds::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QLearningParams {
    pub episodes: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Exploration rate of the epsilon-greedy training policy.
    #[serde(default = "default_eps")]
    pub epsilon: f64,
}

fn default_lr() -> f64 {
    0.1
}

fn default_eps() -> f64 {
    0.2
}

impl Default for QLearningParams {
    fn default() -> Self {
        Self { episodes: 5000, learning_rate: default_lr(), epsilon: default_eps() }
    }
}

/// Per-state action distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    /// Greedy in `q`, splitting probability evenly among tied maxima.
    pub fn greedy(q: &[Vec<f64>]) -> Self {
        let probs = q
            .iter()
            .map(|row| {
                let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let ties = row.iter().filter(|&&v| v == best).count() as f64;
                row.iter().map(|&v| if v == best { 1.0 / ties } else { 0.0 }).collect()
            })
            .collect();
        Self { probs }
    }

    pub fn probs(&self, state: usize) -> &[f64] {
        &self.probs[state]
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn sample(&self, state: usize, rng: &mut impl Rng) -> u32 {
        let row = &self.probs[state];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return a as u32;
            }
        }
        // Rounding left `u` above the cumulative sum: take the last supported action.
        row.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u32
    }
}

fn epsilon_greedy(q: &[f64], epsilon: f64, rng: &mut impl Rng) -> u32 {
    let n = q.len();
    if rng.random::<f64>() < epsilon {
        return rng.random_range(0..n) as u32;
    }
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..n).filter(|&a| q[a] == best).collect();
    ties[rng.random_range(0..ties.len())] as u32
}

#[derive(Debug, Clone)]
pub struct BehaviorTraining {
    pub policy: TabularPolicy,
    pub q: Vec<Vec<f64>>,
    /// Undiscounted return of every training episode.
    pub episode_returns: Vec<f64>,
}

/// Epsilon-greedy tabular Q-learning; the returned policy is greedy in the learned Q.
pub fn train_behavior(cfg: &DomainConfig, params: &QLearningParams, seed: u64) -> Result<BehaviorTraining, EnvError> {
    let mut env = make_env(cfg, derive_seed(seed, &["behavior", "env"]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["behavior", "actions"]));
    let gamma = cfg.gamma();
    let mut q = vec![vec![0.0; env.n_actions() as usize]; env.n_states()];
    let mut episode_returns = Vec::with_capacity(params.episodes);

    for _ in 0..params.episodes {
        env.reset();
        let mut total = 0.0;
        loop {
            let s = env.state_index();
            let a = epsilon_greedy(&q[s], params.epsilon, &mut rng);
            let step = env.step(a)?;
            total += step.reward;
            let bootstrap = if step.terminal {
                0.0
            } else {
                q[step.next_index].iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            let target = step.reward + gamma * bootstrap;
            let entry = &mut q[s][a as usize];
            *entry += params.learning_rate * (target - *entry);
            if step.terminal || step.truncated {
                break;
            }
        }
        episode_returns.push(total);
    }
    Ok(BehaviorTraining { policy: TabularPolicy::greedy(&q), q, episode_returns })
}

/// Fraction of `rollouts` seeded episodes under `policy` that end in a terminal
/// state with positive reward.
pub fn greedy_rollout_success(cfg: &DomainConfig, policy: &TabularPolicy, rollouts: usize, seed: u64) -> Result<f64, EnvError> {
    let mut successes = 0;
    for i in 0..rollouts {
        let ep_seed = derive_seed(seed, &["rollout", &i.to_string()]);
        let mut env = make_env(cfg, ep_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(ep_seed);
        env.reset();
        loop {
            let a = policy.sample(env.state_index(), &mut rng);
            let step = env.step(a)?;
            if step.terminal {
                successes += usize::from(step.reward > 0.0);
                break;
            }
            if step.truncated {
                break;
            }
        }
    }
    Ok(successes as f64 / rollouts.max(1) as f64)
}

/// Rolls episodes with an epsilon-greedy wrapper around `policy` until `size`
/// transitions are collected. The last episode may be cut short.
pub fn generate_buffer(
    cfg: &DomainConfig,
    policy: &TabularPolicy,
    size: usize,
    explore_eps: f64,
    seed: u64,
) -> Result<ReplayBuffer, EnvError> {
    let mut env = make_env(cfg, derive_seed(seed, &["generate", "env"]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["generate", "actions"]));
    let n_actions = env.n_actions();
    let mut transitions = Vec::with_capacity(size);

    'episodes: while transitions.len() < size {
        let mut state = env.reset();
        loop {
            let s = env.state_index();
            let a = if rng.random::<f64>() < explore_eps {
                rng.random_range(0..n_actions)
            } else {
                policy.sample(s, &mut rng)
            };
            let step = env.step(a)?;
            transitions.push(Transition::discrete(state, a, step.next_state.clone(), step.reward, step.terminal));
            if transitions.len() == size {
                break 'episodes;
            }
            if step.terminal || step.truncated {
                break;
            }
            state = step.next_state;
        }
    }
    let tag = format!("{}|explore={explore_eps}|seed={seed}", cfg.tag());
    Ok(ReplayBuffer::with_transitions(cfg.state_dim(), cfg.action_spec(), tag, transitions))
}
