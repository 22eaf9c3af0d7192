use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, Step};

pub(crate) const N_ACTIONS: u32 = 4;

/// Row/column offsets for up, right, down, left. Row 0 is the top row.
const MOVES: [(i64, i64); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

/// Grid world whose moves slip sideways.
///
/// Actions are `0 = up, 1 = right, 2 = down, 3 = left`. A move goes in the
/// intended direction with probability `1 - slip_prob` and otherwise deviates to
/// one of the two perpendicular directions with equal probability. Moving into a
/// wall leaves the agent in place. Entering the goal or a cliff cell ends the
/// episode. Cells are indexed `row * width + col`; see [`StateEncoding`] for
/// the state vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlipGridConfig {
    pub width: usize,
    pub height: usize,
    pub slip_prob: f64,
    /// `[row, col]`.
    pub start: [usize; 2],
    pub goal: [usize; 2],
    #[serde(default)]
    pub cliffs: Vec<[usize; 2]>,
    #[serde(default)]
    pub step_reward: f64,
    #[serde(default = "default_goal_reward")]
    pub goal_reward: f64,
    #[serde(default = "default_cliff_reward")]
    pub cliff_reward: f64,
    pub max_steps: usize,
    pub gamma: f64,
    #[serde(default)]
    pub encoding: StateEncoding,
}

/// State vector layout.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateEncoding {
    /// `(row / (height - 1), col / (width - 1))`, each coordinate 0 on a unit-length axis.
    #[default]
    Coordinates,
    /// One-hot over the `width * height` cells.
    OneHot,
}

fn default_goal_reward() -> f64 {
    1.0
}

fn default_cliff_reward() -> f64 {
    -1.0
}

impl SlipGridConfig {
    /// Cliff walk: start and goal at the two bottom corners with a cliff between them.
    pub fn cliff_walk(width: usize, height: usize, slip_prob: f64) -> Self {
        Self {
            width,
            height,
            slip_prob,
            start: [height - 1, 0],
            goal: [height - 1, width - 1],
            cliffs: (1..width - 1).map(|c| [height - 1, c]).collect(),
            step_reward: 0.0,
            goal_reward: 1.0,
            cliff_reward: -1.0,
            max_steps: 4 * (width + height),
            gamma: 0.9,
            encoding: StateEncoding::default(),
        }
    }

    /// Open grid from the top-left to the bottom-right corner.
    pub fn open(width: usize, height: usize, slip_prob: f64) -> Self {
        Self {
            width,
            height,
            slip_prob,
            start: [0, 0],
            goal: [height - 1, width - 1],
            cliffs: Vec::new(),
            step_reward: 0.0,
            goal_reward: 1.0,
            cliff_reward: -1.0,
            max_steps: 4 * (width + height),
            gamma: 0.9,
            encoding: StateEncoding::default(),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad("grid must be at least 1x1".into());
        }
        if !(0.0..1.0).contains(&self.slip_prob) {
            return bad(format!("slip_prob {} outside [0, 1)", self.slip_prob));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        for (name, [r, c]) in [("start", self.start), ("goal", self.goal)].into_iter().chain(self.cliffs.iter().map(|p| ("cliff", *p))) {
            if r >= self.height || c >= self.width {
                return bad(format!("{name} [{r}, {c}] lies outside the grid"));
            }
        }
        if self.start == self.goal || self.cliffs.contains(&self.start) || self.cliffs.contains(&self.goal) {
            return bad("start, goal and cliffs must be distinct cells".into());
        }
        Ok(())
    }

    pub fn index(&self, [r, c]: [usize; 2]) -> usize {
        r * self.width + c
    }

    fn cell(&self, index: usize) -> [usize; 2] {
        [index / self.width, index % self.width]
    }

    fn shifted(&self, [r, c]: [usize; 2], dir: usize) -> [usize; 2] {
        let (dr, dc) = MOVES[dir];
        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
        if nr < 0 || nc < 0 || nr >= self.height as i64 || nc >= self.width as i64 {
            [r, c]
        } else {
            [nr as usize, nc as usize]
        }
    }

    /// `(reward, terminal)` for entering `cell`.
    fn outcome(&self, cell: [usize; 2]) -> (f64, bool) {
        if cell == self.goal {
            (self.goal_reward, true)
        } else if self.cliffs.contains(&cell) {
            (self.cliff_reward, true)
        } else {
            (self.step_reward, false)
        }
    }

    pub fn is_terminal(&self, index: usize) -> bool {
        self.outcome(self.cell(index)).1
    }

    /// Exact transition model: `(next_index, probability, reward, terminal)` for
    /// each outcome, duplicates merged.
    pub fn transitions(&self, index: usize, action: u32) -> Vec<(usize, f64, f64, bool)> {
        let cell = self.cell(index);
        let a = action as usize;
        let side = self.slip_prob / 2.0;
        let mut out: Vec<(usize, f64, f64, bool)> = Vec::with_capacity(3);
        for (dir, p) in [(a, 1.0 - self.slip_prob), ((a + 1) % 4, side), ((a + 3) % 4, side)] {
            if p == 0.0 {
                continue;
            }
            let next = self.shifted(cell, dir);
            let idx = self.index(next);
            match out.iter_mut().find(|o| o.0 == idx) {
                Some(o) => o.1 += p,
                None => {
                    let (r, e) = self.outcome(next);
                    out.push((idx, p, r, e));
                }
            }
        }
        out
    }

    pub fn state_dim(&self) -> usize {
        match self.encoding {
            StateEncoding::Coordinates => 2,
            StateEncoding::OneHot => self.width * self.height,
        }
    }

    pub fn encode(&self, index: usize) -> Vec<f64> {
        match self.encoding {
            StateEncoding::Coordinates => {
                let [r, c] = self.cell(index);
                let scale = |v: usize, n: usize| if n > 1 { v as f64 / (n - 1) as f64 } else { 0.0 };
                vec![scale(r, self.height), scale(c, self.width)]
            }
            StateEncoding::OneHot => {
                let mut v = vec![0.0; self.width * self.height];
                v[index] = 1.0;
                v
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SlipGrid {
    cfg: SlipGridConfig,
    rng: ChaCha8Rng,
    pos: [usize; 2],
    steps: usize,
    done: bool,
}

impl SlipGrid {
    pub fn new(cfg: SlipGridConfig, seed: u64) -> Self {
        let pos = cfg.start;
        Self { cfg, rng: ChaCha8Rng::seed_from_u64(seed), pos, steps: 0, done: false }
    }

    pub fn config(&self) -> &SlipGridConfig {
        &self.cfg
    }

    pub fn reset(&mut self) -> Vec<f64> {
        self.pos = self.cfg.start;
        self.steps = 0;
        self.done = false;
        self.encode(self.state_index())
    }

    pub fn state_index(&self) -> usize {
        self.cfg.index(self.pos)
    }

    pub fn encode(&self, index: usize) -> Vec<f64> {
        self.cfg.encode(index)
    }

    pub fn step(&mut self, action: u32) -> Result<Step, EnvError> {
        if action >= N_ACTIONS {
            return Err(EnvError::InvalidAction { action, n_actions: N_ACTIONS });
        }
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let a = action as usize;
        let dir = if self.cfg.slip_prob > 0.0 && self.rng.random::<f64>() < self.cfg.slip_prob {
            if self.rng.random::<bool>() {
                (a + 1) % 4
            } else {
                (a + 3) % 4
            }
        } else {
            a
        };
        self.pos = self.cfg.shifted(self.pos, dir);
        self.steps += 1;
        let (reward, terminal) = self.cfg.outcome(self.pos);
        let truncated = !terminal && self.steps >= self.cfg.max_steps;
        self.done = terminal || truncated;
        let next_index = self.state_index();
        Ok(Step { next_state: self.encode(next_index), next_index, reward, terminal, truncated })
    }
}
