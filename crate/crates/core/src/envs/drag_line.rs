use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, Step};

pub(crate) const N_ACTIONS: u32 = 3;

/// Discretized position/velocity chain with drag.
///
/// Actions are `0 = brake (-1)`, `1 = coast`, `2 = accelerate (+1)`. Each step the
/// velocity first retains `drag * v`, rounded stochastically to an integer
/// (`floor` plus a Bernoulli draw on the fractional part), then the action's
/// acceleration is added and the result clamped to `[-max_speed, max_speed]`.
/// Position moves by the new velocity; hitting either end of the line stops the
/// agent there with zero velocity. Reaching the last position ends the episode.
///
/// States are encoded as `(position / (positions - 1), velocity / max_speed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DragLineConfig {
    pub positions: usize,
    pub max_speed: u32,
    pub drag: f64,
    #[serde(default = "default_step_reward")]
    pub step_reward: f64,
    #[serde(default = "default_goal_reward")]
    pub goal_reward: f64,
    pub max_steps: usize,
    pub gamma: f64,
}

fn default_step_reward() -> f64 {
    -0.01
}

fn default_goal_reward() -> f64 {
    1.0
}

impl DragLineConfig {
    pub fn new(positions: usize, max_speed: u32, drag: f64) -> Self {
        Self {
            positions,
            max_speed,
            drag,
            step_reward: default_step_reward(),
            goal_reward: default_goal_reward(),
            max_steps: 4 * positions,
            gamma: 0.9,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::Config(m));
        if self.positions < 2 {
            return bad("positions must be at least 2".into());
        }
        if self.max_speed == 0 {
            return bad("max_speed must be positive".into());
        }
        if !(self.drag > 0.0 && self.drag <= 1.0) {
            return bad(format!("drag {} outside (0, 1]", self.drag));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        Ok(())
    }

    fn speeds(&self) -> usize {
        2 * self.max_speed as usize + 1
    }

    pub fn index(&self, pos: usize, vel: i64) -> usize {
        pos * self.speeds() + (vel + i64::from(self.max_speed)) as usize
    }

    fn unpack(&self, index: usize) -> (usize, i64) {
        (index / self.speeds(), (index % self.speeds()) as i64 - i64::from(self.max_speed))
    }

    pub fn encode(&self, index: usize) -> Vec<f64> {
        let (p, v) = self.unpack(index);
        vec![p as f64 / (self.positions - 1) as f64, v as f64 / f64::from(self.max_speed)]
    }
}

#[derive(Debug, Clone)]
pub struct DragLine {
    cfg: DragLineConfig,
    rng: ChaCha8Rng,
    pos: usize,
    vel: i64,
    steps: usize,
    done: bool,
}

impl DragLine {
    pub fn new(cfg: DragLineConfig, seed: u64) -> Self {
        Self { cfg, rng: ChaCha8Rng::seed_from_u64(seed), pos: 0, vel: 0, steps: 0, done: false }
    }

    pub fn config(&self) -> &DragLineConfig {
        &self.cfg
    }

    pub fn reset(&mut self) -> Vec<f64> {
        self.pos = 0;
        self.vel = 0;
        self.steps = 0;
        self.done = false;
        self.encode(self.state_index())
    }

    pub fn state_index(&self) -> usize {
        self.cfg.index(self.pos, self.vel)
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
        let retained = self.cfg.drag * self.vel as f64;
        let base = retained.floor();
        let frac = retained - base;
        let mut vel = base as i64 + i64::from(frac > 0.0 && self.rng.random::<f64>() < frac);
        let vmax = i64::from(self.cfg.max_speed);
        vel = (vel + i64::from(action) - 1).clamp(-vmax, vmax);

        let last = (self.cfg.positions - 1) as i64;
        let mut pos = self.pos as i64 + vel;
        if pos <= 0 || pos >= last {
            pos = pos.clamp(0, last);
            vel = 0;
        }
        self.pos = pos as usize;
        self.vel = vel;
        self.steps += 1;

        let terminal = pos == last;
        let reward = if terminal { self.cfg.goal_reward } else { self.cfg.step_reward };
        let truncated = !terminal && self.steps >= self.cfg.max_steps;
        self.done = terminal || truncated;
        let next_index = self.state_index();
        Ok(Step { next_state: self.encode(next_index), next_index, reward, terminal, truncated })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accelerating_reaches_the_goal() {
        let mut e = DragLine::new(DragLineConfig::new(10, 3, 1.0), 0);
        e.reset();
        let mut steps = 0;
        loop {
            let s = e.step(2).unwrap();
            steps += 1;
            if s.terminal {
                assert_eq!(s.reward, 1.0);
                break;
            }
        }
        // Velocities 1, 2, 3, 3 cover 9 cells.
        assert_eq!(steps, 4);
    }

    #[test]
    fn full_drag_retention_is_deterministic() {
        let cfg = DragLineConfig::new(20, 3, 1.0);
        let run = |seed| {
            let mut e = DragLine::new(cfg.clone(), seed);
            e.reset();
            (0..6).map(|i| e.step([2, 2, 1, 0, 1, 2][i]).unwrap().next_index).collect::<Vec<_>>()
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn drag_slows_the_agent() {
        let cfg = DragLineConfig::new(40, 4, 0.5);
        let mut e = DragLine::new(cfg.clone(), 3);
        e.reset();
        for _ in 0..3 {
            e.step(2).unwrap();
        }
        let s = e.step(1).unwrap();
        // Coasting with drag 0.5 can never keep the velocity.
        assert!(s.next_state[1] * 4.0 < 2.0);
    }

    #[test]
    fn encoding_range() {
        let cfg = DragLineConfig::new(5, 2, 0.7);
        assert_eq!(cfg.encode(cfg.index(4, 2)), vec![1.0, 1.0]);
        assert_eq!(cfg.encode(cfg.index(0, -2)), vec![0.0, -1.0]);
        assert!(DragLineConfig::new(5, 2, 0.0).validate().is_err());
    }
}
