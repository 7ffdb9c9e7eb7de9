//! Decentralized acting: one environment, one channel, recurrent state for
//! every agent, stepped against a read-only model.

use comix_nn::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::act;
use crate::channel::{noisy_messages, Channel, ChannelConfig, DelayMode};
use crate::coordinator::CoordinationMask;
use crate::env::{make_env, EnvConfig, EnvKind, Environment, Observation, StepResult};
use crate::error::ComixError;
use crate::message::Message;
use crate::model::{row_argmax, CommBatch, Comix};
use crate::replay::Transition;

/// Everything produced by one acting step.
#[derive(Clone, Debug)]
pub struct ActStep {
    pub transition: Transition,
    pub q_self: Matrix,
    pub q: Matrix,
    /// One mask per real agent; empty when communication is off.
    pub masks: Vec<CoordinationMask>,
    pub result: StepResult,
}

pub struct Actor {
    env: Box<dyn Environment>,
    channel: Channel,
    noise: ChaCha8Rng,
    obs: Vec<Observation>,
    hidden: Matrix,
    returns: Vec<f64>,
    steps: usize,
    done: bool,
}

impl Actor {
    pub fn new(env: &EnvConfig, channel: &ChannelConfig, hidden: usize) -> Result<Self, ComixError> {
        let senders = env.agents + channel.noisy_agents;
        Ok(Self {
            env: make_env(env)?,
            channel: Channel::new(channel.clone(), senders)?,
            noise: ChaCha8Rng::seed_from_u64(channel.seed ^ 0x6e6f_6973_79),
            obs: Vec::new(),
            hidden: Matrix::zeros((env.agents, hidden)),
            returns: vec![0.0; env.agents],
            steps: 0,
            done: true,
        })
    }

    pub fn env(&self) -> &dyn Environment {
        self.env.as_ref()
    }

    pub fn channel(&self) -> &Channel {
        &self.channel
    }

    pub fn channel_mut(&mut self) -> &mut Channel {
        &mut self.channel
    }

    pub fn reset(&mut self, seed: u64) -> Result<(), ComixError> {
        self.obs = self.env.reset(seed)?;
        self.channel.reset_episode();
        self.hidden.fill(0.0);
        self.returns.iter_mut().for_each(|r| *r = 0.0);
        self.steps = 0;
        self.done = false;
        Ok(())
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn returns(&self) -> &[f64] {
        &self.returns
    }

    pub fn headline(&self) -> f64 {
        self.env.headline()
    }

    /// The headline mapped to `[0, 1]`.
    pub fn normalized(&self) -> f64 {
        normalize_headline(self.env.config(), self.env.headline())
    }

    pub fn hidden(&self) -> &Matrix {
        &self.hidden
    }

    /// Observe, compute `Q_self`, broadcast intentions, coordinate, combine
    /// and act epsilon-greedily, then advance the environment.
    pub fn step<R: Rng + ?Sized>(&mut self, model: &Comix, epsilon: f64, rng: &mut R) -> Result<ActStep, ComixError> {
        if self.done {
            return Err(ComixError::Contract("step called on a finished episode; reset first".into()));
        }
        let cfg = self.env.config();
        let (n, ow) = (cfg.agents, cfg.obs_width);
        if model.config.agents != n || model.config.obs_width() != ow {
            return Err(ComixError::Incompatible(format!(
                "model built for {} agents with {}-wide observations, environment has {n} and {ow}",
                model.config.agents,
                model.config.obs_width()
            )));
        }
        let obs_flat: Vec<f64> = self.obs.concat();
        let obs_m = Matrix::from_shape_vec((n, ow), obs_flat.clone()).map_err(|e| ComixError::Contract(e.to_string()))?;
        let hidden_before = self.hidden.clone();
        let (q_self, h_next) = model.self_step(&obs_m, &self.hidden)?;
        let intentions = row_argmax(&q_self);

        let (q, delivered, ages, accept, masks) = if model.config.communication {
            let mut sent = (0..n)
                .map(|i| Message::intention(i, self.obs[i].clone(), intentions[i]))
                .collect::<Result<Vec<_>, _>>()?;
            let own = features(&sent, model.config.message_width())?;
            let noisy = self.channel.config().noisy_agents;
            sent.extend(noisy_messages(noisy, ow, n, &mut self.noise));
            let out = self.channel.broadcast(&sent)?;
            let delivered = features(&out, model.config.message_width())?;
            let ages: Vec<usize> = out.iter().map(|m| m.age).collect();
            let comm = CommBatch::new(1, n, out.len(), own, delivered, delay_factors(self.channel.config().delay, &ages))?;
            let res = model.comm_step(&comm, &h_next, &q_self)?;
            let masks = (0..n)
                .map(|i| CoordinationMask {
                    receiver: i,
                    peers: (0..comm.peers()).map(|t| CommBatch::peer(i, t)).collect(),
                    accept: res.accept.row(i).to_vec(),
                })
                .collect();
            (res.q, comm.delivered.into_iter().collect(), ages, res.accept.into_iter().collect(), masks)
        } else {
            (q_self.clone(), Vec::new(), Vec::new(), Vec::new(), Vec::new())
        };

        let actions: Vec<usize> = q.outer_iter().map(|row| act(&row.to_vec(), epsilon, rng)).collect();
        let result = self.env.step(&actions)?;
        for (r, x) in self.returns.iter_mut().zip(&result.rewards) {
            *r += x;
        }
        self.hidden = h_next;
        self.obs = result.observations.clone();
        self.steps += 1;
        self.done = result.episode_done;
        let transition = Transition {
            obs: obs_flat,
            hidden: hidden_before.into_iter().collect(),
            intentions,
            delivered,
            ages,
            accept,
            actions,
            rewards: result.rewards.clone(),
            terminal: result.episode_done,
        };
        Ok(ActStep { transition, q_self, q, masks, result })
    }
}

/// Headline divided by its best attainable value.
pub fn normalize_headline(cfg: &EnvConfig, headline: f64) -> f64 {
    match cfg.kind {
        EnvKind::Switch => headline,
        EnvKind::Transport => headline / 100.0,
        EnvKind::PredatorPrey => headline / cfg.entities.max(1) as f64,
    }
}

pub fn delay_factors(mode: DelayMode, ages: &[usize]) -> Option<Vec<f64>> {
    match mode {
        DelayMode::Off => None,
        m => Some(ages.iter().map(|&a| m.factor(a)).collect()),
    }
}

fn features(messages: &[Message], width: usize) -> Result<Matrix, ComixError> {
    let rows: Vec<f64> = messages.iter().flat_map(|m| m.features()).collect();
    Matrix::from_shape_vec((messages.len(), width), rows)
        .map_err(|_| ComixError::Contract(format!("messages are not {width} wide")))
}
