//! Centralized training: acting with exploration, replay, interval-gated Q
//! and Coordinator updates, target copies, metrics and checkpoints.

use std::path::{Path, PathBuf};
use std::time::Instant;

use comix_nn::{Checkpoint, CheckpointMeta, Graph, Matrix, NnError, ParamStore, RmsProp, Weights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, TargetUpdate};
use crate::error::ComixError;
use crate::losses::{contrastive_loss, td_loss, ContrastiveBatch, TdBatch};
use crate::metrics::{JsonlWriter, MetricsRecord, TimingRecord};
use crate::model::{Comix, ModelConfig};
use crate::replay::ReplayBuffer;
use crate::rollout::Actor;

/// SplitMix64 finalizer over two words; used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for auxiliary draws tied to a run seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, 3))
}

pub fn episode_seed(run_seed: u64, episode: usize) -> u64 {
    mix_seed(mix_seed(run_seed, 2), episode as u64)
}

pub struct Trainer {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub model: Comix,
    pub target: ParamStore,
    pub opt_q: RmsProp,
    pub opt_coord: RmsProp,
    pub buffer: ReplayBuffer,
    /// Coordinator parameters are left untouched when set.
    pub coord_frozen: bool,
    /// Overrides the epsilon schedule.
    pub fixed_epsilon: Option<f64>,
    rng: ChaCha8Rng,
    actor: Actor,
    episode: usize,
    env_steps: usize,
    q_updates: usize,
    coord_updates: usize,
    target_updates: usize,
    wall_clock_s: f64,
}

/// Where a finished `train` call left its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl Trainer {
    pub fn new(config: ExperimentConfig, seed: u64) -> Result<Self, ComixError> {
        config.validate()?;
        let model = Comix::new(config.model_config(), mix_seed(seed, 0))?;
        Self::with_model(config, seed, model)
    }

    fn with_model(config: ExperimentConfig, seed: u64, model: Comix) -> Result<Self, ComixError> {
        let t = &config.train;
        let mut opt_q = RmsProp::new(t.lr_q, t.weight_decay);
        let mut opt_coord = RmsProp::new(t.lr_coord, t.weight_decay);
        for opt in [&mut opt_q, &mut opt_coord] {
            opt.alpha = t.rms_alpha;
            opt.eps = t.rms_eps;
        }
        let mut channel = config.channel.clone();
        channel.seed = mix_seed(channel.seed, seed);
        let actor = Actor::new(&config.env, &channel, model.config.agent.hidden)?;
        Ok(Self {
            buffer: ReplayBuffer::new(t.buffer_max, t.buffer_min)?,
            target: model.q_params.clone(),
            model,
            opt_q,
            opt_coord,
            coord_frozen: false,
            fixed_epsilon: None,
            rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 1)),
            actor,
            episode: 0,
            env_steps: 0,
            q_updates: 0,
            coord_updates: 0,
            target_updates: 0,
            wall_clock_s: 0.0,
            seed,
            config,
        })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`]. The
    /// stored model shape must match `config`.
    pub fn from_checkpoint(config: ExperimentConfig, ckpt: &Checkpoint) -> Result<Self, ComixError> {
        config.validate()?;
        let model = load_model(ckpt, Some(&config.model_config()))?;
        let seed = ckpt.meta.seed;
        let mut t = Self::with_model(config, seed, model)?;
        ckpt.restore_store("target", &mut t.target)?;
        if ckpt.sections.contains_key("opt_q") {
            ckpt.restore_optimizer("opt_q", &mut t.opt_q)?;
            ckpt.restore_optimizer("opt_coord", &mut t.opt_coord)?;
        }
        t.episode = ckpt.meta.episodes as usize;
        t.env_steps = ckpt.meta.env_steps as usize;
        Ok(t)
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    pub fn q_updates(&self) -> usize {
        self.q_updates
    }

    pub fn coord_updates(&self) -> usize {
        self.coord_updates
    }

    pub fn target_updates(&self) -> usize {
        self.target_updates
    }

    /// Seconds spent inside `train` by this trainer.
    pub fn wall_clock_s(&self) -> f64 {
        self.wall_clock_s
    }

    pub fn epsilon(&self) -> f64 {
        self.fixed_epsilon.unwrap_or_else(|| self.config.train.epsilon(self.episode))
    }

    /// One full episode of acting, storing and interval-gated optimization.
    pub fn run_episode(&mut self) -> Result<MetricsRecord, ComixError> {
        let epsilon = self.epsilon();
        self.actor.reset(episode_seed(self.seed, self.episode))?;
        let n = self.config.env.agents;
        let mut transitions = Vec::new();
        let (mut loss_q, mut loss_c) = (Vec::new(), Vec::new());
        let mut accepted = Vec::new();
        while !self.actor.done() {
            let step = self.actor.step(&self.model, epsilon, &mut self.rng)?;
            if !step.masks.is_empty() {
                let count: usize = step.masks.iter().map(|m| m.accepted_count()).sum();
                accepted.push(count as f64 / (n * n) as f64);
            }
            transitions.push(step.transition);
            self.env_steps += 1;
            let t = self.config.train.clone();
            if self.env_steps % t.coord_update_interval == 0 && self.buffer.is_ready() {
                if let Some(l) = self.coord_update()? {
                    loss_c.push(l);
                }
            }
            if self.env_steps % t.q_update_interval == 0 && self.buffer.is_ready() {
                loss_q.push(self.q_update()?);
            }
            if t.target_update == TargetUpdate::Steps && self.env_steps % t.target_update_interval == 0 {
                self.update_target();
            }
        }
        self.buffer.push_episode(transitions)?;
        let record = MetricsRecord {
            episode: self.episode,
            env_steps: self.env_steps,
            seed: self.seed,
            returns: self.actor.returns().to_vec(),
            team_return: self.actor.returns().iter().sum(),
            normalized: self.actor.normalized(),
            headline: self.actor.headline(),
            epsilon,
            loss_q: mean(&loss_q),
            loss_c: mean(&loss_c),
            accepted_fraction: mean(&accepted),
        };
        self.episode += 1;
        let t = &self.config.train;
        if t.target_update == TargetUpdate::Episodes && self.episode % t.target_update_episodes == 0 {
            self.update_target();
        }
        Ok(record)
    }

    /// One RMSprop step on the TD loss over a sampled segment batch.
    pub fn q_update(&mut self) -> Result<f64, ComixError> {
        let t = &self.config.train;
        let segments = self.buffer.sample(t.batch_size, t.recurrent_steps, &mut self.rng)?;
        let batch = TdBatch::from_segments(&self.model.config, &segments, self.config.channel.delay)?;
        let mut g = Graph::new();
        let loss = td_loss(&self.model, &self.target, &batch, t.gamma, t.td_error, &mut g)?;
        if !loss.value.is_finite() {
            return Err(self.non_finite("TD loss"));
        }
        let grads = g.backward(loss.loss)?;
        drop(g);
        self.model.q_params.zero_grad();
        self.model.q_params.accumulate(&grads);
        self.opt_q.step(&mut self.model.q_params).map_err(|e| self.optimizer_error(e, "Q gradient"))?;
        self.q_updates += 1;
        Ok(loss.value)
    }

    /// One RMSprop step on the contrastive loss over the freshest stored
    /// transitions; `None` when there is nothing to train.
    pub fn coord_update(&mut self) -> Result<Option<f64>, ComixError> {
        if self.coord_frozen || !self.model.config.communication {
            return Ok(None);
        }
        let t = &self.config.train;
        let fresh = self.buffer.freshest(t.batch_size);
        if fresh.is_empty() {
            return Ok(None);
        }
        let batch = ContrastiveBatch::from_transitions(&self.model.config, &fresh, self.config.channel.delay)?;
        let mut g = Graph::new();
        let Some(loss) = contrastive_loss(&self.model, &batch, t.contrastive, t.complement, &mut g)? else {
            return Ok(None);
        };
        if !loss.value.is_finite() {
            return Err(self.non_finite("Coordinator loss"));
        }
        let grads = g.backward(loss.loss)?;
        drop(g);
        self.model.coord_params.zero_grad();
        self.model.coord_params.accumulate(&grads);
        self.opt_coord
            .step(&mut self.model.coord_params)
            .map_err(|e| self.optimizer_error(e, "Coordinator gradient"))?;
        self.coord_updates += 1;
        Ok(Some(loss.value))
    }

    pub fn update_target(&mut self) {
        self.target = self.model.q_params.clone();
        self.target_updates += 1;
    }

    fn non_finite(&self, what: &str) -> ComixError {
        ComixError::NonFinite { what: what.to_string(), episode: self.episode }
    }

    fn optimizer_error(&self, e: NnError, what: &str) -> ComixError {
        match e {
            NnError::NonFinite { .. } => self.non_finite(what),
            other => other.into(),
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint, ComixError> {
        let mut meta = CheckpointMeta {
            config_hash: self.config.hash()?,
            episodes: self.episode as u64,
            env_steps: self.env_steps as u64,
            seed: self.seed,
            ..CheckpointMeta::default()
        };
        meta.extra.insert("config".into(), self.config.to_toml_string()?);
        meta.extra.insert(
            "model".into(),
            serde_json::to_string(&self.model.config)?,
        );
        meta.extra.insert("coord_frozen".into(), self.coord_frozen.to_string());
        let mut ckpt = Checkpoint::new(meta);
        ckpt.put_store("q", &self.model.q_params);
        ckpt.put_store("coord", &self.model.coord_params);
        ckpt.put_store("target", &self.target);
        ckpt.put_optimizer("opt_q", &self.opt_q);
        ckpt.put_optimizer("opt_coord", &self.opt_coord);
        Ok(ckpt)
    }

    /// Runs `episodes` more episodes. With an output directory, writes
    /// `metrics.jsonl`, `timing.jsonl`, periodic checkpoints and `final.cmx`;
    /// a non-finite loss writes `nonfinite.cmx` and stops.
    pub fn train(
        &mut self,
        out_dir: Option<&Path>,
        episodes: usize,
        mut on_record: impl FnMut(&MetricsRecord),
    ) -> Result<TrainOutcome, ComixError> {
        let mut writers = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some((
                    JsonlWriter::append(&dir.join("metrics.jsonl"))?,
                    JsonlWriter::append(&dir.join("timing.jsonl"))?,
                ))
            }
            None => None,
        };
        let start = Instant::now();
        let mut outcome = TrainOutcome::default();
        for _ in 0..episodes {
            let record = match self.run_episode() {
                Ok(r) => r,
                Err(e @ ComixError::NonFinite { .. }) => {
                    if let Some(dir) = out_dir {
                        self.checkpoint()?.save(&dir.join("nonfinite.cmx"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some((metrics, timing)) = writers.as_mut() {
                metrics.write(&record)?;
                timing.write(&TimingRecord {
                    episode: record.episode,
                    seed: self.seed,
                    wall_clock_s: self.wall_clock_s + start.elapsed().as_secs_f64(),
                })?;
            }
            on_record(&record);
            outcome.records.push(record);
            if let Some(dir) = out_dir {
                if self.episode % self.config.train.checkpoint_interval == 0 {
                    let path = dir.join(format!("ckpt_{:06}.cmx", self.episode));
                    self.checkpoint()?.save(&path)?;
                    outcome.checkpoints.push(path);
                }
            }
        }
        self.wall_clock_s += start.elapsed().as_secs_f64();
        if let Some(dir) = out_dir {
            let path = dir.join("final.cmx");
            self.checkpoint()?.save(&path)?;
            outcome.checkpoints.push(path);
        }
        Ok(outcome)
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Experiment configuration stored in a checkpoint.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<ExperimentConfig, ComixError> {
    let text = ckpt
        .meta
        .extra
        .get("config")
        .ok_or_else(|| ComixError::Incompatible("checkpoint carries no configuration".into()))?;
    ExperimentConfig::from_toml_str(text)
}

/// Rebuilds the model stored in `ckpt`. With `expect`, refuses a model of
/// a different shape.
pub fn load_model(ckpt: &Checkpoint, expect: Option<&ModelConfig>) -> Result<Comix, ComixError> {
    let stored: ModelConfig = match ckpt.meta.extra.get("model") {
        Some(text) => serde_json::from_str(text)?,
        None => checkpoint_config(ckpt)?.model_config(),
    };
    if let Some(want) = expect {
        let shape = |m: &ModelConfig| (m.agents, m.agent.clone(), m.coord_hidden, m.coord_mlp, m.mixer_embed, m.mixer_hidden);
        if shape(want) != shape(&stored) {
            return Err(ComixError::Incompatible(format!(
                "checkpoint model has {} agents, {}-wide observations and hidden width {}; the configuration asks for {}, {} and {}",
                stored.agents,
                stored.obs_width(),
                stored.agent.hidden,
                want.agents,
                want.obs_width(),
                want.agent.hidden
            )));
        }
    }
    let mut model = Comix::new(stored, 0)?;
    ckpt.restore_store("q", &mut model.q_params)?;
    ckpt.restore_store("coord", &mut model.coord_params)?;
    Ok(model)
}

/// Smallest central-difference derivative `dQ_TOT/dq_i` over `draws`
/// random `(state, q)` pairs, states and values uniform in `[-scale, scale]`.
pub fn min_mixer_derivative<R: Rng + ?Sized>(model: &Comix, draws: usize, scale: f64, rng: &mut R) -> Result<f64, ComixError> {
    let n = model.config.agents;
    let sw = model.config.state_width();
    let h = 1e-4;
    let rows = draws * n * 2;
    let mut q = Matrix::zeros((rows, n));
    let mut s = Matrix::zeros((rows, sw));
    for d in 0..draws {
        let qd: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        let sd: Vec<f64> = (0..sw).map(|_| rng.gen_range(-scale..scale)).collect();
        for i in 0..n {
            for (k, sign) in [(0, 1.0), (1, -1.0)] {
                let r = (d * n + i) * 2 + k;
                for j in 0..n {
                    q[[r, j]] = qd[j] + if j == i { sign * h } else { 0.0 };
                }
                for j in 0..sw {
                    s[[r, j]] = sd[j];
                }
            }
        }
    }
    let mut g = Graph::new();
    let w = Weights::fixed(&model.q_params);
    let qv = g.constant(q);
    let sv = g.constant(s);
    let out = model.mixer.mix(&mut g, &w, qv, sv)?;
    let v = g.value(out);
    Ok((0..draws * n)
        .map(|k| (v[[2 * k, 0]] - v[[2 * k + 1, 0]]) / (2.0 * h))
        .fold(f64::INFINITY, f64::min))
}
