use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_actions, window, Action, Bounds, EnvConfig, Environment, JointState, Observation, Pos, StepResult};
use crate::error::ComixError;

const VIEW_RADIUS: i32 = 2;

/// Result of a capture check: which prey were surrounded and what each
/// predator earned for it.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptureOutcome {
    pub captured: Vec<usize>,
    pub rewards: Vec<f64>,
}

/// Finds every live prey whose four orthogonal neighbours are all held by
/// predators. Each surrounding predator earns `goal_reward` per capture.
pub fn capture_check(state: &JointState, goal_reward: f64) -> CaptureOutcome {
    let mut rewards = vec![0.0; state.agents.len()];
    let mut captured = Vec::new();
    for (k, (&prey, &alive)) in state.entities.iter().zip(&state.entity_alive).enumerate() {
        if !alive {
            continue;
        }
        let hunters: Vec<usize> = prey
            .neighbours()
            .iter()
            .filter_map(|&cell| state.agents.iter().position(|&a| a == cell))
            .collect();
        if hunters.len() == 4 {
            captured.push(k);
            for i in hunters {
                rewards[i] += goal_reward;
            }
        }
    }
    CaptureOutcome { captured, rewards }
}

/// Predators chase randomly moving prey. Entering a prey's cell is blocked
/// and pays the intermediary reward; surrounding it on all four sides
/// captures it.
pub struct PredatorPrey {
    config: EnvConfig,
    bounds: Bounds,
    rng: ChaCha8Rng,
    agents: Vec<Pos>,
    prey: Vec<Pos>,
    alive: Vec<bool>,
    obstacles: BTreeSet<Pos>,
    step: usize,
    captured: usize,
}

impl PredatorPrey {
    pub fn new(config: EnvConfig) -> Self {
        let bounds = Bounds { width: config.width as i32, height: config.height as i32 };
        let mut env = Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            bounds,
            agents: Vec::new(),
            prey: Vec::new(),
            alive: Vec::new(),
            obstacles: BTreeSet::new(),
            step: 0,
            captured: 0,
            config,
        };
        env.place();
        env
    }

    pub fn captured(&self) -> usize {
        self.captured
    }

    pub fn alive_prey(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    /// Places obstacles, predators and prey on distinct uniformly drawn cells.
    fn place(&mut self) {
        let mut cells: Vec<Pos> = self.bounds.cells().collect();
        cells.shuffle(&mut self.rng);
        let n_obstacles = (self.config.obstacle_fraction * cells.len() as f64).round() as usize;
        let mut it = cells.into_iter();
        self.obstacles = it.by_ref().take(n_obstacles).collect();
        self.agents = it.by_ref().take(self.config.agents).collect();
        self.prey = it.by_ref().take(self.config.entities).collect();
        self.alive = vec![true; self.prey.len()];
        self.step = 0;
        self.captured = 0;
    }

    fn open(&self, p: Pos) -> bool {
        self.bounds.contains(p) && !self.obstacles.contains(&p)
    }

    fn prey_at(&self, p: Pos) -> Option<usize> {
        (0..self.prey.len()).find(|&k| self.alive[k] && self.prey[k] == p)
    }

    fn occupied(&self, p: Pos) -> bool {
        self.agents.contains(&p) || self.prey_at(p).is_some()
    }

    /// Test hook: puts agents and prey at given cells.
    pub fn set_positions(&mut self, agents: &[Pos], prey: &[Pos]) {
        self.agents = agents.to_vec();
        self.prey = prey.to_vec();
        self.alive = vec![true; prey.len()];
    }
}

impl Environment for PredatorPrey {
    fn config(&self) -> &EnvConfig {
        &self.config
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<Observation>, ComixError> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.place();
        Ok(self.observe_all())
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, ComixError> {
        let actions = check_actions(&self.config, actions)?;
        let n = self.agents.len();
        let mut rewards = vec![0.0; n];

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        for &i in &order {
            if actions[i] == Action::Stay {
                continue;
            }
            let next = self.agents[i].step(actions[i]);
            if self.prey_at(next).is_some() {
                rewards[i] += self.config.intermediary_reward;
            } else if self.open(next) && !self.agents.contains(&next) {
                self.agents[i] = next;
            }
        }

        let mut prey_order: Vec<usize> = (0..self.prey.len()).filter(|&k| self.alive[k]).collect();
        prey_order.shuffle(&mut self.rng);
        for k in prey_order {
            let a = Action::ALL[self.rng.gen_range(0..Action::ALL.len())];
            let next = self.prey[k].step(a);
            if a != Action::Stay && self.open(next) && !self.occupied(next) {
                self.prey[k] = next;
            }
        }

        let outcome = capture_check(&self.state(), self.config.goal_reward);
        for &k in &outcome.captured {
            self.alive[k] = false;
        }
        self.captured += outcome.captured.len();
        for (r, c) in rewards.iter_mut().zip(&outcome.rewards) {
            *r += c;
        }

        self.step += 1;
        let cleared = self.alive.iter().all(|&a| !a);
        let episode_done = cleared || self.step >= self.config.max_steps;
        Ok(StepResult {
            observations: self.observe_all(),
            rewards,
            agent_done: vec![cleared; n],
            episode_done,
        })
    }

    /// Three 5x5 channels (other predators, prey, obstacles or off-map) in
    /// row-major order, then the normalized own position.
    fn observe(&self, agent: usize) -> Observation {
        let p = self.agents[agent];
        let cells: Vec<Pos> = window(VIEW_RADIUS, false).into_iter().map(|(dx, dy)| p.offset(dx, dy)).collect();
        let mut obs = Vec::with_capacity(self.config.obs_width);
        obs.extend(cells.iter().map(|&c| {
            let other = self.agents.iter().enumerate().any(|(j, &a)| j != agent && a == c);
            f64::from(u8::from(other))
        }));
        obs.extend(cells.iter().map(|&c| f64::from(u8::from(self.prey_at(c).is_some()))));
        obs.extend(cells.iter().map(|&c| f64::from(u8::from(!self.open(c)))));
        obs.extend(self.bounds.normalized(p));
        obs
    }

    fn state(&self) -> JointState {
        let cleared = self.alive.iter().all(|&a| !a);
        JointState {
            width: self.bounds.width,
            height: self.bounds.height,
            agents: self.agents.clone(),
            entities: self.prey.clone(),
            entity_alive: self.alive.clone(),
            goals: Vec::new(),
            obstacles: self.obstacles.clone(),
            done: vec![cleared; self.agents.len()],
            step: self.step,
        }
    }

    /// Prey captured so far this episode.
    fn headline(&self) -> f64 {
        self.captured as f64
    }
}
