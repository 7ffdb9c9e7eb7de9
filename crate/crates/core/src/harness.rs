//! Evaluation protocols and reports: greedy evaluation under a channel
//! configuration, the usage sweep, accepted-message analysis with noisy
//! senders, and Q-network fine-tuning on a faulty channel.

use std::fmt::Write as _;
use std::path::Path;

use comix_nn::Checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelConfig, DelayMode, USAGE_SWEEP};
use crate::config::ExperimentConfig;
use crate::coordinator::MaskTrace;
use crate::env::EnvConfig;
use crate::error::ComixError;
use crate::metrics::{mean_std, JsonlWriter};
use crate::model::Comix;
use crate::rollout::Actor;
use crate::trainer::{mix_seed, Trainer};

const EVAL_STREAM: u64 = 0x6576_616c;

/// Greedy evaluation results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub usage: f64,
    pub noisy_agents: usize,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub mean: f64,
    pub std: f64,
    pub normalized_mean: f64,
    /// Mean headline per evaluation seed.
    pub seed_means: Vec<f64>,
    /// Accepted messages per agent divided by the real-agent count.
    pub accepted_fraction: Option<f64>,
    pub accepted_by_seed: Vec<f64>,
    /// Fraction of noisy messages accepted, when there are noisy senders.
    pub noisy_accepted: Option<f64>,
    pub delivery_rate: f64,
}

/// Runs `episodes` greedy episodes for each seed. Environment layouts
/// depend only on the seed and episode index, so every channel setting
/// sees the same episodes.
pub fn evaluate(
    model: &Comix,
    env: &EnvConfig,
    channel: &ChannelConfig,
    episodes: usize,
    seeds: &[u64],
    mut traces: Option<&mut JsonlWriter>,
) -> Result<EvalSummary, ComixError> {
    if episodes == 0 || seeds.is_empty() {
        return Err(ComixError::Config("evaluation needs at least one episode and one seed".into()));
    }
    let n = env.agents;
    let mut headlines = Vec::new();
    let mut normalized = Vec::new();
    let mut seed_means = Vec::new();
    let mut accepted_by_seed = Vec::new();
    let (mut noisy_hits, mut noisy_total) = (0usize, 0usize);
    let (mut delivered, mut attempts) = (0.0, 0.0);
    for &seed in seeds {
        let mut ch = channel.clone();
        ch.seed = mix_seed(channel.seed, seed);
        let mut actor = Actor::new(env, &ch, model.config.agent.hidden)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, EVAL_STREAM));
        let mut seed_heads = Vec::new();
        let (mut acc_sum, mut acc_steps) = (0.0, 0usize);
        for e in 0..episodes {
            actor.reset(mix_seed(mix_seed(seed, EVAL_STREAM), e as u64))?;
            while !actor.done() {
                let step = actor.step(model, 0.0, &mut rng)?;
                if step.masks.is_empty() {
                    continue;
                }
                for mask in &step.masks {
                    let hard = mask.hard();
                    acc_sum += hard.iter().filter(|&&b| b).count() as f64 / n as f64;
                    for (&peer, &bit) in mask.peers.iter().zip(&hard) {
                        if peer >= n {
                            noisy_total += 1;
                            noisy_hits += usize::from(bit);
                        }
                    }
                    if let Some(w) = traces.as_deref_mut() {
                        w.write(&MaskTrace::new(e, actor.steps() - 1, mask))?;
                    }
                }
                acc_steps += step.masks.len();
            }
            seed_heads.push(actor.headline());
            normalized.push(actor.normalized());
        }
        let rate = actor.channel().delivery_rate();
        delivered += rate;
        attempts += 1.0;
        seed_means.push(mean_std(&seed_heads).0);
        if acc_steps > 0 {
            accepted_by_seed.push(acc_sum / acc_steps as f64);
        }
        headlines.extend(seed_heads);
    }
    let (mean, std) = mean_std(&headlines);
    Ok(EvalSummary {
        usage: channel.usage,
        noisy_agents: channel.noisy_agents,
        episodes,
        seeds: seeds.to_vec(),
        mean,
        std,
        normalized_mean: mean_std(&normalized).0,
        seed_means,
        accepted_fraction: (!accepted_by_seed.is_empty()).then(|| mean_std(&accepted_by_seed).0),
        accepted_by_seed,
        noisy_accepted: (noisy_total > 0).then(|| noisy_hits as f64 / noisy_total as f64),
        delivery_rate: delivered / attempts,
    })
}

/// One row per usage fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisruptReport {
    pub env: String,
    pub agents: usize,
    pub rows: Vec<EvalSummary>,
}

pub fn disrupt(
    model: &Comix,
    env: &EnvConfig,
    channel: &ChannelConfig,
    usages: &[f64],
    episodes: usize,
    seeds: &[u64],
) -> Result<DisruptReport, ComixError> {
    let rows = usages
        .iter()
        .map(|&u| evaluate(model, env, &channel.clone().with_usage(u), episodes, seeds, None))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DisruptReport { env: env.kind.name().into(), agents: env.agents, rows })
}

pub fn default_usages() -> Vec<f64> {
    USAGE_SWEEP.to_vec()
}

impl DisruptReport {
    pub fn table(&self) -> String {
        let mut s = format!("{} ({} agents)\n{:>8}  {:>10}  {:>8}  {:>9}\n", self.env, self.agents, "usage", "metric", "std", "delivered");
        for r in &self.rows {
            let _ = writeln!(s, "{:>7.0}%  {:>10.3}  {:>8.3}  {:>9.3}", 100.0 * r.usage, r.mean, r.std, r.delivery_rate);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommRow {
    pub noisy_agents: usize,
    pub accepted_mean: f64,
    /// Standard deviation of the per-seed accepted fractions.
    pub accepted_std: f64,
    pub noisy_accepted: Option<f64>,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub env: String,
    pub agents: usize,
    pub rows: Vec<CommRow>,
}

/// Accepted-message fraction with each number of injected noisy senders.
pub fn comm_analysis(
    model: &Comix,
    env: &EnvConfig,
    channel: &ChannelConfig,
    noisy: &[usize],
    episodes: usize,
    seeds: &[u64],
    trace_dir: Option<&Path>,
) -> Result<CommReport, ComixError> {
    if !model.config.communication {
        return Err(ComixError::Config("communication analysis needs a model with communication".into()));
    }
    let mut rows = Vec::new();
    for &k in noisy {
        let ch = ChannelConfig { noisy_agents: k, ..channel.clone() };
        let mut writer = match trace_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(JsonlWriter::create(&dir.join(format!("masks_noisy{k}.jsonl")))?)
            }
            None => None,
        };
        let s = evaluate(model, env, &ch, episodes, seeds, writer.as_mut())?;
        let (accepted_mean, accepted_std) = mean_std(&s.accepted_by_seed);
        rows.push(CommRow { noisy_agents: k, accepted_mean, accepted_std, noisy_accepted: s.noisy_accepted, metric: s.mean });
    }
    Ok(CommReport { env: env.kind.name().into(), agents: env.agents, rows })
}

impl CommReport {
    pub fn table(&self) -> String {
        let mut s = format!("{} ({} agents)\n{:>6}  {:>9}  {:>8}  {:>14}  {:>8}\n", self.env, self.agents, "noisy", "accepted", "std", "noise accepted", "metric");
        for r in &self.rows {
            let noise = r.noisy_accepted.map_or("-".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(s, "{:>6}  {:>9.3}  {:>8.3}  {:>14}  {:>8.3}", r.noisy_agents, r.accepted_mean, r.accepted_std, noise, r.metric);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOptions {
    pub usage: f64,
    pub delay: DelayMode,
    pub budget_episodes: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub eval_seeds: Vec<u64>,
    /// Relative gap to the full-communication score that counts as matched.
    pub tolerance: f64,
    /// Divisor applied to the Q learning rate.
    pub lr_divisor: f64,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            usage: 0.1,
            delay: DelayMode::Reciprocal,
            budget_episodes: 500,
            eval_interval: 50,
            eval_episodes: 20,
            eval_seeds: vec![0],
            tolerance: 0.01,
            lr_divisor: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub env: String,
    pub usage: f64,
    pub lr_q: f64,
    /// Starting model, full communication.
    pub baseline_full: f64,
    /// Starting model at the faulty usage, before fine-tuning.
    pub before: f64,
    /// Best fine-tuned score at the faulty usage.
    pub after: f64,
    pub episodes_run: usize,
    pub converged: bool,
    pub coord_fingerprint_before: String,
    pub coord_fingerprint_after: String,
}

impl FinetuneReport {
    pub fn table(&self) -> String {
        format!(
            "{} at {:.0}% usage\n  full communication   {:>9.3}\n  before fine-tuning   {:>9.3}\n  after fine-tuning    {:>9.3}\n  episodes {} ({}), Q lr {:e}\n",
            self.env,
            100.0 * self.usage,
            self.baseline_full,
            self.before,
            self.after,
            self.episodes_run,
            if self.converged { "matched the full-communication score" } else { "budget exhausted, best kept" },
            self.lr_q
        )
    }
}

/// Fine-tunes the Q networks of a checkpoint on a faulty channel with the
/// Coordinator frozen and delay scaling on. Stops once the evaluation score
/// is within `tolerance` of the starting model's full-communication score;
/// otherwise returns the best checkpoint seen within the budget.
pub fn finetune(
    config: &ExperimentConfig,
    ckpt: &Checkpoint,
    opts: &FinetuneOptions,
    out_dir: Option<&Path>,
) -> Result<(FinetuneReport, Checkpoint), ComixError> {
    if opts.eval_interval == 0 || opts.lr_divisor <= 0.0 {
        return Err(ComixError::Config("fine-tuning needs a positive evaluation interval and divisor".into()));
    }
    let mut cfg = config.clone();
    cfg.train.lr_q /= opts.lr_divisor;
    cfg.channel = ChannelConfig { usage: opts.usage, delay: opts.delay, ..config.channel.clone() };
    cfg.validate()?;
    let mut trainer = Trainer::from_checkpoint(cfg.clone(), ckpt)?;
    trainer.coord_frozen = true;
    trainer.fixed_epsilon = Some(cfg.train.epsilon_end);
    let fingerprint_before = trainer.model.coord_params.fingerprint();

    let full = ChannelConfig { usage: 1.0, delay: DelayMode::Off, ..config.channel.clone() };
    let faulty_plain = ChannelConfig { usage: opts.usage, delay: DelayMode::Off, ..config.channel.clone() };
    let faulty = cfg.channel.clone();
    let eval = |model: &Comix, ch: &ChannelConfig| evaluate(model, &cfg.env, ch, opts.eval_episodes, &opts.eval_seeds, None).map(|s| s.mean);
    let baseline_full = eval(&trainer.model, &full)?;
    let before = eval(&trainer.model, &faulty_plain)?;
    let goal = baseline_full - opts.tolerance * baseline_full.abs();

    let mut best = (eval(&trainer.model, &faulty)?, trainer.checkpoint()?);
    let mut run = 0;
    let mut converged = best.0 >= goal;
    while !converged && run < opts.budget_episodes {
        let chunk = opts.eval_interval.min(opts.budget_episodes - run);
        trainer.train(out_dir, chunk, |_| {})?;
        run += chunk;
        let score = eval(&trainer.model, &faulty)?;
        if score > best.0 {
            best = (score, trainer.checkpoint()?);
        }
        converged = score >= goal;
    }
    let report = FinetuneReport {
        env: cfg.env.kind.name().into(),
        usage: opts.usage,
        lr_q: cfg.train.lr_q,
        baseline_full,
        before,
        after: best.0,
        episodes_run: run,
        converged,
        coord_fingerprint_before: fingerprint_before,
        coord_fingerprint_after: trainer.model.coord_params.fingerprint(),
    };
    Ok((report, best.1))
}
