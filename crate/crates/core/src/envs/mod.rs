//! Toy parameterized MDPs with controllable dynamics shift, a tabular
//! Q-learning behavioral policy, and replay buffer generation.
//!
//! Both environment families share state space, action space and reward function
//! across parameter settings; only the transition dynamics move with the shift
//! parameter (`slip_prob` for [`SlipGrid`], `drag` for [`DragLine`]).

mod behavior;
mod drag_line;
mod slip_grid;

pub use behavior::{generate_buffer, greedy_rollout_success, train_behavior, BehaviorTraining, QLearningParams, TabularPolicy};
pub use drag_line::{DragLine, DragLineConfig};
pub use slip_grid::{SlipGrid, SlipGridConfig, StateEncoding};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::ActionSpec;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("action {action} is not in [0, {n_actions})")]
    InvalidAction { action: u32, n_actions: u32 },
    #[error("step called after the episode ended; call reset first")]
    EpisodeOver,
    #[error("invalid domain configuration: {0}")]
    Config(String),
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub next_index: usize,
    pub reward: f64,
    /// The next state is terminal.
    pub terminal: bool,
    /// The episode hit its length limit without terminating.
    pub truncated: bool,
}

/// Environment parameterization, including the shift parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "env_kind", rename_all = "snake_case")]
pub enum DomainConfig {
    SlipGrid(SlipGridConfig),
    DragLine(DragLineConfig),
}

impl DomainConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        match self {
            DomainConfig::SlipGrid(c) => c.validate(),
            DomainConfig::DragLine(c) => c.validate(),
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            DomainConfig::SlipGrid(c) => c.gamma,
            DomainConfig::DragLine(c) => c.gamma,
        }
    }

    pub fn n_states(&self) -> usize {
        match self {
            DomainConfig::SlipGrid(c) => c.width * c.height,
            DomainConfig::DragLine(c) => c.positions * (2 * c.max_speed as usize + 1),
        }
    }

    pub fn n_actions(&self) -> u32 {
        match self {
            DomainConfig::SlipGrid(_) => slip_grid::N_ACTIONS,
            DomainConfig::DragLine(_) => drag_line::N_ACTIONS,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            DomainConfig::SlipGrid(c) => c.state_dim(),
            DomainConfig::DragLine(_) => 2,
        }
    }

    pub fn action_spec(&self) -> ActionSpec {
        ActionSpec::Discrete { n_actions: self.n_actions() }
    }

    /// Human-readable description of the configuration, used in buffer tags.
    pub fn tag(&self) -> String {
        match self {
            DomainConfig::SlipGrid(c) => format!("slip_grid(w={},h={},slip={})", c.width, c.height, c.slip_prob),
            DomainConfig::DragLine(c) => format!("drag_line(n={},vmax={},drag={})", c.positions, c.max_speed, c.drag),
        }
    }

    /// Same domain with the shift parameter replaced.
    pub fn with_shift(&self, shift: f64) -> Self {
        match self {
            DomainConfig::SlipGrid(c) => DomainConfig::SlipGrid(SlipGridConfig { slip_prob: shift, ..c.clone() }),
            DomainConfig::DragLine(c) => DomainConfig::DragLine(DragLineConfig { drag: shift, ..c.clone() }),
        }
    }

    pub fn shift(&self) -> f64 {
        match self {
            DomainConfig::SlipGrid(c) => c.slip_prob,
            DomainConfig::DragLine(c) => c.drag,
        }
    }
}

/// A seeded environment instance.
#[derive(Debug, Clone)]
pub enum Env {
    SlipGrid(SlipGrid),
    DragLine(DragLine),
}

pub fn make_env(cfg: &DomainConfig, seed: u64) -> Result<Env, EnvError> {
    cfg.validate()?;
    Ok(match cfg {
        DomainConfig::SlipGrid(c) => Env::SlipGrid(SlipGrid::new(c.clone(), seed)),
        DomainConfig::DragLine(c) => Env::DragLine(DragLine::new(c.clone(), seed)),
    })
}

impl Env {
    /// Starts a new episode and returns the encoded start state.
    pub fn reset(&mut self) -> Vec<f64> {
        match self {
            Env::SlipGrid(e) => e.reset(),
            Env::DragLine(e) => e.reset(),
        }
    }

    pub fn step(&mut self, action: u32) -> Result<Step, EnvError> {
        match self {
            Env::SlipGrid(e) => e.step(action),
            Env::DragLine(e) => e.step(action),
        }
    }

    /// Tabular index of the current state.
    pub fn state_index(&self) -> usize {
        match self {
            Env::SlipGrid(e) => e.state_index(),
            Env::DragLine(e) => e.state_index(),
        }
    }

    pub fn encode(&self, index: usize) -> Vec<f64> {
        match self {
            Env::SlipGrid(e) => e.encode(index),
            Env::DragLine(e) => e.encode(index),
        }
    }

    pub fn n_actions(&self) -> u32 {
        match self {
            Env::SlipGrid(_) => slip_grid::N_ACTIONS,
            Env::DragLine(_) => drag_line::N_ACTIONS,
        }
    }

    pub fn n_states(&self) -> usize {
        match self {
            Env::SlipGrid(e) => e.config().width * e.config().height,
            Env::DragLine(e) => e.config().positions * (2 * e.config().max_speed as usize + 1),
        }
    }
}
