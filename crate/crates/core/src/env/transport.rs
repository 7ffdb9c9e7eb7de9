use std::collections::{BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_actions, window, Action, Bounds, EnvConfig, Environment, JointState, Observation, Pos, StepResult};
use crate::error::ComixError;

/// Start-to-goal Manhattan distance of every load.
pub const LOAD_DISTANCE: i32 = 15;
const PLACEMENT_TRIES: usize = 100;
const MAX_RESEEDS: usize = 10;

/// Cooperative load transport. Agents `2k` and `2k+1` flank load `k` on its
/// left and right and are rigidly attached to it: the three cells move one
/// step only when both carriers choose the same direction and all three
/// destination cells are free. Every load starts at distance 15 from the
/// shared docking cell near the top-right corner.
pub struct Transport {
    config: EnvConfig,
    bounds: Bounds,
    rng: ChaCha8Rng,
    goal: Pos,
    loads: Vec<Pos>,
    start_distance: Vec<i32>,
    best_distance: Vec<i32>,
    obstacles: BTreeSet<Pos>,
    docked: Vec<bool>,
    step: usize,
    reseeds: usize,
}

impl Transport {
    pub fn new(config: EnvConfig) -> Self {
        let bounds = Bounds { width: config.width as i32, height: config.height as i32 };
        let goal = Pos::new(bounds.width - 2, 1);
        let mut env = Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            bounds,
            goal,
            loads: Vec::new(),
            start_distance: Vec::new(),
            best_distance: Vec::new(),
            obstacles: BTreeSet::new(),
            docked: Vec::new(),
            step: 0,
            reseeds: 0,
            config,
        };
        env.loads = env.start_loads();
        env.reset_counters();
        env
    }

    pub fn goal(&self) -> Pos {
        self.goal
    }

    pub fn load(&self, k: usize) -> Pos {
        self.loads[k]
    }

    pub fn obstacles(&self) -> &BTreeSet<Pos> {
        &self.obstacles
    }

    /// Carrier cells of a load centred at `p`.
    pub fn carriers(p: Pos) -> [Pos; 2] {
        [p.offset(-1, 0), p.offset(1, 0)]
    }

    fn pair_cells(p: Pos) -> [Pos; 3] {
        [p.offset(-1, 0), p, p.offset(1, 0)]
    }

    fn agent_pos(&self, agent: usize) -> Pos {
        Self::carriers(self.loads[agent / 2])[agent % 2]
    }

    /// Load centres on the distance-15 diagonal below-left of the goal,
    /// evenly spread along it.
    fn start_loads(&self) -> Vec<Pos> {
        let m = self.config.entities;
        let candidates: Vec<Pos> = (1..self.bounds.width - 1)
            .flat_map(|x| (0..self.bounds.height).map(move |y| Pos::new(x, y)))
            .filter(|&p| p.manhattan(self.goal) == LOAD_DISTANCE)
            .collect();
        if m == 0 || candidates.len() < m {
            return Vec::new();
        }
        (0..m)
            .map(|k| {
                let idx = if m == 1 { candidates.len() / 2 } else { k * (candidates.len() - 1) / (m - 1) };
                candidates[idx]
            })
            .collect()
    }

    fn reset_counters(&mut self) {
        self.start_distance = self.loads.iter().map(|l| l.manhattan(self.goal)).collect();
        self.best_distance = self.start_distance.clone();
        self.docked = vec![false; self.loads.len()];
        self.step = 0;
    }

    fn cell_ok(&self, p: Pos) -> bool {
        self.bounds.contains(p) && !self.obstacles.contains(&p)
    }

    /// Every load can still slide to the goal around the sampled obstacles.
    fn connected(&self, obstacles: &BTreeSet<Pos>) -> bool {
        let fits = |c: Pos| Self::pair_cells(c).iter().all(|&p| self.bounds.contains(p) && !obstacles.contains(&p));
        self.loads.iter().all(|&start| {
            let mut seen = BTreeSet::from([start]);
            let mut queue = VecDeque::from([start]);
            while let Some(c) = queue.pop_front() {
                if c == self.goal {
                    return true;
                }
                for next in c.neighbours() {
                    if fits(next) && seen.insert(next) {
                        queue.push_back(next);
                    }
                }
            }
            false
        })
    }

    fn sample_obstacles(&mut self, seed: u64) -> Result<(), ComixError> {
        let count = (self.config.obstacle_fraction * (self.bounds.width * self.bounds.height) as f64).round() as usize;
        let mut reserved: BTreeSet<Pos> = Self::pair_cells(self.goal).into_iter().collect();
        for &l in &self.loads {
            reserved.extend(Self::pair_cells(l));
        }
        let free: Vec<Pos> = self.bounds.cells().filter(|p| !reserved.contains(p)).collect();
        if count > free.len() {
            return Err(ComixError::Placement {
                reseeds: 0,
                reason: format!("{count} obstacles do not fit in {} free cells", free.len()),
            });
        }
        self.reseeds = 0;
        for reseed in 0..=MAX_RESEEDS {
            let mut sampler = ChaCha8Rng::seed_from_u64(seed ^ (reseed as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            for _ in 0..PLACEMENT_TRIES {
                let picked: BTreeSet<Pos> = free.choose_multiple(&mut sampler, count).copied().collect();
                if self.connected(&picked) {
                    self.obstacles = picked;
                    self.reseeds = reseed;
                    return Ok(());
                }
            }
        }
        Err(ComixError::Placement {
            reseeds: MAX_RESEEDS,
            reason: "no obstacle layout keeps every load connected to the goal".into(),
        })
    }

    fn completion(&self, k: usize) -> f64 {
        let d = self.loads[k].manhattan(self.goal) as f64;
        let d0 = self.start_distance[k].max(1) as f64;
        (100.0 * (1.0 - d / d0)).clamp(0.0, 100.0)
    }
}

impl Environment for Transport {
    fn config(&self) -> &EnvConfig {
        &self.config
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<Observation>, ComixError> {
        self.loads = self.start_loads();
        if self.loads.len() != self.config.entities {
            return Err(ComixError::Config(format!(
                "a {}x{} map cannot hold {} loads at distance {LOAD_DISTANCE}",
                self.bounds.width, self.bounds.height, self.config.entities
            )));
        }
        self.reset_counters();
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let layout_seed = self.rng.gen();
        self.sample_obstacles(layout_seed)?;
        Ok(self.observe_all())
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, ComixError> {
        let actions = check_actions(&self.config, actions)?;
        let m = self.loads.len();
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut self.rng);
        let mut rewards = vec![0.0; self.config.agents];
        for &k in &order {
            let (a, b) = (actions[2 * k], actions[2 * k + 1]);
            if self.docked[k] || a != b || a == Action::Stay {
                continue;
            }
            let next = self.loads[k].step(a);
            let own = Self::pair_cells(self.loads[k]);
            let blocked = Self::pair_cells(next).iter().any(|&p| {
                !self.cell_ok(p)
                    || (!own.contains(&p)
                        && (0..m).any(|j| j != k && !self.docked[j] && Self::pair_cells(self.loads[j]).contains(&p)))
            });
            if blocked {
                continue;
            }
            self.loads[k] = next;
            let d = next.manhattan(self.goal);
            if d < self.best_distance[k] {
                self.best_distance[k] = d;
                rewards[2 * k] += self.config.intermediary_reward;
                rewards[2 * k + 1] += self.config.intermediary_reward;
            }
            if next == self.goal {
                self.docked[k] = true;
                rewards[2 * k] += self.config.goal_reward;
                rewards[2 * k + 1] += self.config.goal_reward;
            }
        }
        self.step += 1;
        let agent_done: Vec<bool> = (0..self.config.agents).map(|i| self.docked[i / 2]).collect();
        let episode_done = self.docked.iter().all(|&d| d) || self.step >= self.config.max_steps;
        Ok(StepResult { observations: self.observe_all(), rewards, agent_done, episode_done })
    }

    fn observe(&self, agent: usize) -> Observation {
        let p = self.agent_pos(agent);
        let mut obs = Vec::with_capacity(self.config.obs_width);
        obs.extend(self.bounds.normalized(p));
        obs.extend(self.bounds.vector(p, self.loads[agent / 2]));
        obs.extend(self.bounds.vector(p, self.goal));
        for (dx, dy) in window(2, true) {
            let c = p.offset(dx, dy);
            obs.push(if self.cell_ok(c) { 0.0 } else { 1.0 });
        }
        obs
    }

    fn state(&self) -> JointState {
        JointState {
            width: self.bounds.width,
            height: self.bounds.height,
            agents: (0..self.config.agents).map(|i| self.agent_pos(i)).collect(),
            entities: self.loads.clone(),
            entity_alive: self.docked.iter().map(|d| !d).collect(),
            goals: vec![self.goal],
            obstacles: self.obstacles.clone(),
            done: (0..self.config.agents).map(|i| self.docked[i / 2]).collect(),
            step: self.step,
        }
    }

    /// Mean completion percentage over loads.
    fn headline(&self) -> f64 {
        if self.loads.is_empty() {
            return 0.0;
        }
        (0..self.loads.len()).map(|k| self.completion(k)).sum::<f64>() / self.loads.len() as f64
    }

    fn layout_reseeds(&self) -> usize {
        self.reseeds
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(n: usize) -> Transport {
        Transport::new(EnvConfig::transport(n))
    }

    #[test]
    fn loads_start_at_distance_fifteen() {
        for n in [2, 4, 8] {
            let mut e = env(n);
            let obs = e.reset(7).unwrap();
            assert_eq!(obs.len(), n);
            assert!(obs.iter().all(|o| o.len() == 30));
            for k in 0..n / 2 {
                assert_eq!(e.load(k).manhattan(e.goal()), LOAD_DISTANCE);
            }
            assert_eq!(e.obstacles().len(), 16);
        }
    }

    #[test]
    fn same_seed_same_layout() {
        let mut a = env(4);
        let mut b = env(4);
        a.reset(11).unwrap();
        b.reset(11).unwrap();
        assert_eq!(a.state(), b.state());
        b.reset(12).unwrap();
        assert_ne!(a.obstacles(), b.obstacles());
    }

    fn clear(e: &mut Transport) {
        e.obstacles.clear();
    }

    #[test]
    fn pair_moves_together_and_earns_progress() {
        let mut e = env(2);
        e.reset(0).unwrap();
        clear(&mut e);
        let before = e.load(0);
        // right reduces the distance to the goal
        let r = e.step(&[3, 3]).unwrap();
        assert_eq!(e.load(0), before.offset(1, 0));
        assert_eq!(r.rewards, vec![0.5, 0.5]);
        // left increases it: moves, no reward
        let r = e.step(&[2, 2]).unwrap();
        assert_eq!(e.load(0), before);
        assert_eq!(r.rewards, vec![0.0, 0.0]);
        // moving back right does not pay again
        let r = e.step(&[3, 3]).unwrap();
        assert_eq!(r.rewards, vec![0.0, 0.0]);
    }

    #[test]
    fn disagreement_keeps_load_still() {
        let mut e = env(2);
        e.reset(0).unwrap();
        clear(&mut e);
        let before = e.load(0);
        for (a, b) in [(0, 1), (3, 4), (4, 3), (4, 4)] {
            e.step(&[a, b]).unwrap();
            assert_eq!(e.load(0), before);
        }
    }

    #[test]
    fn obstacle_blocks_pair() {
        let mut e = env(2);
        e.reset(0).unwrap();
        clear(&mut e);
        let l = e.load(0);
        e.obstacles.insert(l.offset(2, 0));
        e.step(&[3, 3]).unwrap();
        assert_eq!(e.load(0), l);
        let obs = e.observe(1);
        // cell directly right of the right carrier: window row 2, column 3
        assert_eq!(obs[6 + 12], 1.0);
    }

    #[test]
    fn docking_pays_goal_and_removes_pair() {
        let mut e = env(2);
        e.reset(0).unwrap();
        clear(&mut e);
        e.loads[0] = e.goal().offset(-1, 0);
        e.best_distance[0] = 1;
        let r = e.step(&[3, 3]).unwrap();
        assert_eq!(r.rewards, vec![5.5, 5.5]);
        assert!(r.episode_done);
        assert_eq!(e.headline(), 100.0);
    }

    #[test]
    fn pairs_do_not_overlap() {
        let mut e = env(4);
        e.reset(0).unwrap();
        clear(&mut e);
        e.loads[1] = e.loads[0].offset(3, 0);
        let before = e.loads.clone();
        e.step(&[3, 3, 4, 4]).unwrap();
        assert_eq!(e.loads, before);
    }

    #[test]
    fn headline_tracks_distance() {
        let mut e = env(2);
        e.reset(0).unwrap();
        assert_eq!(e.headline(), 0.0);
        clear(&mut e);
        e.step(&[3, 3]).unwrap();
        assert!((e.headline() - 100.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn corner_window_flags_out_of_bounds() {
        let mut e = env(2);
        e.reset(0).unwrap();
        clear(&mut e);
        e.loads[0] = Pos::new(1, 0);
        let obs = e.observe(0);
        // agent at (0,0): the two rows above and two columns left are outside
        let outside = obs[6..].iter().filter(|&&v| v == 1.0).count();
        assert_eq!(outside, 24 - 8);
    }
}
