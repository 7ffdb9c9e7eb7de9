use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_actions, Action, Bounds, EnvConfig, Environment, JointState, Observation, Pos, StepResult};
use crate::error::ComixError;

/// Four agents start in the corners of a 7x3 map and must reach the
/// diagonally opposite corner. The middle three columns are wall except for
/// a one-cell-high corridor whose row is drawn at every reset.
pub struct Switch {
    config: EnvConfig,
    bounds: Bounds,
    rng: ChaCha8Rng,
    agents: Vec<Pos>,
    targets: Vec<Pos>,
    walls: BTreeSet<Pos>,
    done: Vec<bool>,
    step: usize,
    team_return: f64,
}

impl Switch {
    pub fn new(config: EnvConfig) -> Self {
        let bounds = Bounds { width: config.width as i32, height: config.height as i32 };
        let mut env = Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            bounds,
            agents: Vec::new(),
            targets: Vec::new(),
            walls: BTreeSet::new(),
            done: Vec::new(),
            step: 0,
            team_return: 0.0,
            config,
        };
        env.layout(0);
        env
    }

    pub fn corridor_row(&self) -> i32 {
        (0..self.bounds.height)
            .find(|&y| !self.walls.contains(&Pos::new(self.bounds.width / 2, y)))
            .unwrap_or(0)
    }

    pub fn target(&self, agent: usize) -> Pos {
        self.targets[agent]
    }

    fn layout(&mut self, corridor: i32) {
        let (w, h) = (self.bounds.width, self.bounds.height);
        let corners = [Pos::new(0, 0), Pos::new(0, h - 1), Pos::new(w - 1, 0), Pos::new(w - 1, h - 1)];
        self.agents = corners.to_vec();
        self.targets = corners.iter().map(|p| Pos::new(w - 1 - p.x, h - 1 - p.y)).collect();
        self.walls = (2..w - 2)
            .flat_map(|x| (0..h).map(move |y| Pos::new(x, y)))
            .filter(|p| p.y != corridor)
            .collect();
        self.done = vec![false; self.agents.len()];
        self.step = 0;
        self.team_return = 0.0;
    }

    fn free(&self, p: Pos) -> bool {
        self.bounds.contains(p) && !self.walls.contains(&p) && !self.agents.contains(&p)
    }
}

impl Environment for Switch {
    fn config(&self) -> &EnvConfig {
        &self.config
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<Observation>, ComixError> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let corridor = self.rng.gen_range(0..self.bounds.height);
        self.layout(corridor);
        Ok(self.observe_all())
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, ComixError> {
        let actions = check_actions(&self.config, actions)?;
        let n = self.agents.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut rewards = vec![0.0; n];
        for &i in &order {
            if self.done[i] || actions[i] == Action::Stay {
                continue;
            }
            let next = self.agents[i].step(actions[i]);
            if self.free(next) {
                self.agents[i] = next;
            }
        }
        for i in 0..n {
            if !self.done[i] && self.agents[i] == self.targets[i] {
                self.done[i] = true;
                rewards[i] = self.config.goal_reward;
            }
        }
        self.step += 1;
        self.team_return += rewards.iter().sum::<f64>();
        let episode_done = self.done.iter().all(|&d| d) || self.step >= self.config.max_steps;
        Ok(StepResult {
            observations: self.observe_all(),
            rewards,
            agent_done: self.done.clone(),
            episode_done,
        })
    }

    fn observe(&self, agent: usize) -> Observation {
        let p = self.agents[agent];
        let [x, y] = self.bounds.normalized(p);
        let [dx, dy] = self.bounds.vector(p, self.targets[agent]);
        vec![x, y, dx, dy]
    }

    fn state(&self) -> JointState {
        JointState {
            width: self.bounds.width,
            height: self.bounds.height,
            agents: self.agents.clone(),
            entities: Vec::new(),
            entity_alive: Vec::new(),
            goals: self.targets.clone(),
            obstacles: self.walls.clone(),
            done: self.done.clone(),
            step: self.step,
        }
    }

    fn headline(&self) -> f64 {
        self.team_return / (self.agents.len() as f64 * self.config.goal_reward)
    }
}
