//! Gridworld Dec-POMDPs: Switch, cooperative load transport and
//! predator-prey, behind one stepping interface.
//!
//! All three use the same five-action space and resolve simultaneous moves
//! by a random priority order drawn each step from the environment's own
//! seeded generator; a mover whose destination is taken stays put.

mod grid;
mod predator_prey;
mod switch;
mod transport;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use grid::{window, Action, Bounds, Pos, NUM_ACTIONS};
pub use predator_prey::{capture_check, CaptureOutcome, PredatorPrey};
pub use switch::Switch;
pub use transport::Transport;

use crate::error::ComixError;

pub type Observation = Vec<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Switch,
    Transport,
    PredatorPrey,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Switch => "switch",
            EnvKind::Transport => "transport",
            EnvKind::PredatorPrey => "predator-prey",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub width: usize,
    pub height: usize,
    pub agents: usize,
    /// Loads for transport, prey for predator-prey, unused for switch.
    pub entities: usize,
    pub obs_width: usize,
    pub actions: usize,
    pub step_reward: f64,
    pub intermediary_reward: f64,
    pub goal_reward: f64,
    pub obstacle_fraction: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl EnvConfig {
    pub fn switch() -> Self {
        Self {
            kind: EnvKind::Switch,
            width: 7,
            height: 3,
            agents: 4,
            entities: 0,
            obs_width: 4,
            actions: NUM_ACTIONS,
            step_reward: 0.0,
            intermediary_reward: 0.0,
            goal_reward: 5.0,
            obstacle_fraction: 0.0,
            max_steps: 50,
            seed: 0,
        }
    }

    /// Transport with 2, 4 or 8 agents (one load per pair).
    pub fn transport(agents: usize) -> Self {
        Self {
            kind: EnvKind::Transport,
            width: 16,
            height: 10,
            agents,
            entities: agents / 2,
            obs_width: 30,
            actions: NUM_ACTIONS,
            step_reward: 0.0,
            intermediary_reward: 0.5,
            goal_reward: 5.0,
            obstacle_fraction: 0.1,
            max_steps: 100,
            seed: 0,
        }
    }

    /// Predator-prey with 4, 8 or 16 predators; the map grows with the team
    /// so that the 16 prey keep a comparable density.
    pub fn predator_prey(agents: usize) -> Self {
        let side = match agents {
            0..=4 => 12,
            5..=8 => 14,
            _ => 16,
        };
        Self {
            kind: EnvKind::PredatorPrey,
            width: side,
            height: side,
            agents,
            entities: 16,
            obs_width: 77,
            actions: NUM_ACTIONS,
            step_reward: 0.0,
            intermediary_reward: 0.1,
            goal_reward: 5.0,
            obstacle_fraction: 0.0,
            max_steps: 200,
            seed: 0,
        }
    }

    pub fn default_for(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Switch => Self::switch(),
            EnvKind::Transport => Self::transport(4),
            EnvKind::PredatorPrey => Self::predator_prey(4),
        }
    }

    pub fn validate(&self) -> Result<(), ComixError> {
        let bad = |m: String| Err(ComixError::Config(m));
        if self.actions != NUM_ACTIONS {
            return bad(format!("env.actions must be {NUM_ACTIONS}, got {}", self.actions));
        }
        if self.agents == 0 || self.width < 3 || self.height < 3 || self.max_steps == 0 {
            return bad("env.agents, env.max_steps must be positive and maps at least 3x3".into());
        }
        if !(0.0..1.0).contains(&self.obstacle_fraction) {
            return bad(format!("env.obstacle_fraction {} outside [0, 1)", self.obstacle_fraction));
        }
        let expected_obs = match self.kind {
            EnvKind::Switch => 4,
            EnvKind::Transport => 30,
            EnvKind::PredatorPrey => 77,
        };
        if self.obs_width != expected_obs {
            return bad(format!(
                "env.obs_width for {} is {expected_obs}, got {}",
                self.kind.name(),
                self.obs_width
            ));
        }
        match self.kind {
            EnvKind::Switch if self.agents != 4 || self.width != 7 || self.height != 3 => {
                bad("switch is defined for 4 agents on a 7x3 map".into())
            }
            EnvKind::Transport if self.agents % 2 != 0 || self.entities != self.agents / 2 => {
                bad("transport needs an even agent count and one load per pair".into())
            }
            EnvKind::PredatorPrey
                if self.agents + self.entities >= self.width * self.height =>
            {
                bad("predator-prey map too small for agents and prey".into())
            }
            _ => Ok(()),
        }
    }
}

/// Snapshot of everything on the map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub width: i32,
    pub height: i32,
    pub agents: Vec<Pos>,
    /// Loads or prey; `entity_alive` marks which are still on the map.
    pub entities: Vec<Pos>,
    pub entity_alive: Vec<bool>,
    pub goals: Vec<Pos>,
    pub obstacles: BTreeSet<Pos>,
    pub done: Vec<bool>,
    pub step: usize,
}

impl JointState {
    pub fn bounds(&self) -> Bounds {
        Bounds { width: self.width, height: self.height }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observations: Vec<Observation>,
    pub rewards: Vec<f64>,
    pub agent_done: Vec<bool>,
    pub episode_done: bool,
}

/// One line of a trajectory dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub agents: Vec<Pos>,
    pub entities: Vec<Option<Pos>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

pub trait Environment: Send {
    fn config(&self) -> &EnvConfig;

    /// Starts a new episode and returns each agent's first observation.
    fn reset(&mut self, seed: u64) -> Result<Vec<Observation>, ComixError>;

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, ComixError>;

    fn observe(&self, agent: usize) -> Observation;

    fn state(&self) -> JointState;

    /// Episode headline so far: normalized team reward (switch), completion
    /// percentage (transport) or prey captured (predator-prey).
    fn headline(&self) -> f64;

    /// Number of layout re-seeds needed by the last reset.
    fn layout_reseeds(&self) -> usize {
        0
    }

    fn observe_all(&self) -> Vec<Observation> {
        (0..self.config().agents).map(|i| self.observe(i)).collect()
    }
}

pub fn make_env(config: &EnvConfig) -> Result<Box<dyn Environment>, ComixError> {
    config.validate()?;
    Ok(match config.kind {
        EnvKind::Switch => Box::new(Switch::new(config.clone())),
        EnvKind::Transport => Box::new(Transport::new(config.clone())),
        EnvKind::PredatorPrey => Box::new(PredatorPrey::new(config.clone())),
    })
}

pub(crate) fn check_actions(config: &EnvConfig, actions: &[usize]) -> Result<Vec<Action>, ComixError> {
    if actions.len() != config.agents {
        return Err(ComixError::Contract(format!(
            "expected {} actions, got {}",
            config.agents,
            actions.len()
        )));
    }
    actions
        .iter()
        .enumerate()
        .map(|(agent, &a)| {
            Action::from_index(a).ok_or_else(|| {
                ComixError::Contract(format!("agent {agent}: action {a} outside 0..{NUM_ACTIONS}"))
            })
        })
        .collect()
}

pub(crate) fn trajectory_record(state: &JointState, actions: &[usize], rewards: &[f64]) -> TrajectoryRecord {
    TrajectoryRecord {
        step: state.step,
        agents: state.agents.clone(),
        entities: state
            .entities
            .iter()
            .zip(&state.entity_alive)
            .map(|(p, &alive)| alive.then_some(*p))
            .collect(),
        actions: actions.to_vec(),
        rewards: rewards.to_vec(),
    }
}

/// Steps `env` with `actions` and returns the record for a trajectory dump.
pub fn step_logged(
    env: &mut dyn Environment,
    actions: &[usize],
) -> Result<(StepResult, TrajectoryRecord), ComixError> {
    let result = env.step(actions)?;
    let record = trajectory_record(&env.state(), actions, &result.rewards);
    Ok((result, record))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_defaults() {
        let s = EnvConfig::switch();
        assert_eq!((s.width, s.height, s.agents, s.obs_width, s.actions), (7, 3, 4, 4, 5));
        assert_eq!((s.step_reward, s.goal_reward), (0.0, 5.0));
        for (n, loads) in [(2, 1), (4, 2), (8, 4)] {
            let t = EnvConfig::transport(n);
            assert_eq!((t.width, t.height, t.entities, t.obs_width), (16, 10, loads, 30));
            assert_eq!((t.intermediary_reward, t.goal_reward), (0.5, 5.0));
            t.validate().unwrap();
        }
        for (n, side) in [(4, 12), (8, 14), (16, 16)] {
            let p = EnvConfig::predator_prey(n);
            assert_eq!((p.width, p.height, p.entities, p.obs_width), (side, side, 16, 77));
            assert_eq!((p.intermediary_reward, p.goal_reward), (0.1, 5.0));
            p.validate().unwrap();
        }
    }

    #[test]
    fn validation_rejects_wrong_widths() {
        let mut c = EnvConfig::switch();
        c.obs_width = 5;
        assert!(c.validate().is_err());
        let mut c = EnvConfig::transport(4);
        c.actions = 4;
        assert!(c.validate().is_err());
    }
}
