use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use comix::channel::DelayMode;
use comix::config::ExperimentConfig;
use comix::harness::{self, FinetuneOptions};
use comix::metrics::JsonlWriter;
use comix::nn::Checkpoint;
use comix::trainer::{checkpoint_config, load_model, min_mixer_derivative, Trainer};

#[derive(Parser)]
#[command(name = "comix", version, about = "Train and evaluate communicating multi-agent Q-learners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train to the episode budget, writing metrics and checkpoints.
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint under a channel setting.
    Eval(EvalArgs),
    /// Evaluate across channel usage fractions.
    Disrupt(DisruptArgs),
    /// Accepted-message statistics with and without noisy senders.
    CommAnalysis(CommArgs),
    /// Fine-tune the Q networks on a faulty channel with the Coordinator frozen.
    Finetune(FinetuneArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Train this seed only; defaults to every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Override the episode budget.
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Args)]
struct Source {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the configuration stored in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Directory for the machine-readable report.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Delay {
    Off,
    Reciprocal,
    Exponential,
}

impl From<Delay> for DelayMode {
    fn from(d: Delay) -> Self {
        match d {
            Delay::Off => DelayMode::Off,
            Delay::Reciprocal => DelayMode::Reciprocal,
            Delay::Exponential => DelayMode::Exponential,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    usage: Option<f64>,
    #[arg(long)]
    noisy: Option<usize>,
    #[arg(long, value_enum)]
    delay: Option<Delay>,
}

#[derive(Args)]
struct DisruptArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.5,0.25,0.1,0.0")]
    usages: Vec<f64>,
}

#[derive(Args)]
struct CommArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, value_delimiter = ',', default_value = "0,4")]
    noisy: Vec<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, default_value_t = 0.1)]
    usage: f64,
    #[arg(long, default_value_t = 500)]
    budget: usize,
    #[arg(long, default_value_t = 50)]
    eval_interval: usize,
    #[arg(long, value_enum, default_value = "reciprocal")]
    delay: Delay,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Disrupt(a) => disrupt(a),
        Command::CommAnalysis(a) => comm_analysis(a),
        Command::Finetune(a) => finetune(a),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(e) = a.episodes {
        cfg.train.episodes = e;
    }
    let out = a.output.unwrap_or_else(|| cfg.output_dir.clone());
    let seeds = a.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    for seed in seeds {
        let dir = out.join(format!("seed_{seed}"));
        if dir.join("metrics.jsonl").exists() {
            std::fs::remove_file(dir.join("metrics.jsonl"))?;
            std::fs::remove_file(dir.join("timing.jsonl")).ok();
        }
        let mut trainer = Trainer::new(cfg.clone(), seed)?;
        let every = (cfg.train.episodes / 20).max(1);
        let outcome = trainer.train(Some(&dir), cfg.train.episodes, |r| {
            if (r.episode + 1) % every == 0 {
                println!(
                    "seed {seed} episode {:>6} steps {:>8} metric {:>8.3} eps {:.3} L_Q {} L_C {}",
                    r.episode + 1,
                    r.env_steps,
                    r.headline,
                    r.epsilon,
                    fmt_opt(r.loss_q),
                    fmt_opt(r.loss_c)
                );
            }
        })?;
        let mut rng = comix::trainer::seeded_rng(seed);
        let worst = min_mixer_derivative(&trainer.model, 1000, 1.0, &mut rng)?;
        println!(
            "seed {seed}: {} checkpoints in {}, smallest mixer derivative {worst:.3e}",
            outcome.checkpoints.len(),
            dir.display()
        );
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn load(source: &Source) -> Result<(ExperimentConfig, comix::model::Comix)> {
    let ckpt = Checkpoint::load(&source.checkpoint)
        .with_context(|| format!("reading {}", source.checkpoint.display()))?;
    let cfg = match &source.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => checkpoint_config(&ckpt)?,
    };
    let model = load_model(&ckpt, Some(&cfg.model_config()))?;
    if source.episodes == 0 || source.seeds.is_empty() {
        bail!("--episodes and --seeds must be non-empty");
    }
    Ok((cfg, model))
}

fn write_report<T: serde::Serialize>(dir: Option<&Path>, name: &str, report: &T) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(name);
        JsonlWriter::create(&path)?.write(report)?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (cfg, model) = load(&a.source)?;
    let mut ch = cfg.channel.clone();
    if let Some(u) = a.usage {
        ch.usage = u;
    }
    if let Some(k) = a.noisy {
        ch.noisy_agents = k;
    }
    if let Some(d) = a.delay {
        ch.delay = d.into();
    }
    ch.validate()?;
    let s = harness::evaluate(&model, &cfg.env, &ch, a.source.episodes, &a.source.seeds, None)?;
    println!(
        "{}: {:.3} ± {:.3} over {} episodes x {} seeds (usage {:.2}, noisy {})",
        cfg.env.kind.name(),
        s.mean,
        s.std,
        s.episodes,
        s.seeds.len(),
        s.usage,
        s.noisy_agents
    );
    if let Some(f) = s.accepted_fraction {
        println!("accepted fraction {f:.3}");
    }
    write_report(a.source.output.as_deref(), "eval.jsonl", &s)
}

fn disrupt(a: DisruptArgs) -> Result<()> {
    let (cfg, model) = load(&a.source)?;
    let r = harness::disrupt(&model, &cfg.env, &cfg.channel, &a.usages, a.source.episodes, &a.source.seeds)?;
    print!("{}", r.table());
    write_report(a.source.output.as_deref(), "disrupt.jsonl", &r)
}

fn comm_analysis(a: CommArgs) -> Result<()> {
    let (cfg, model) = load(&a.source)?;
    let traces = a.source.output.as_ref().map(|d| d.join("traces"));
    let r = harness::comm_analysis(&model, &cfg.env, &cfg.channel, &a.noisy, a.source.episodes, &a.source.seeds, traces.as_deref())?;
    print!("{}", r.table());
    write_report(a.source.output.as_deref(), "comm_analysis.jsonl", &r)
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.source.checkpoint)?;
    let cfg = match &a.source.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => checkpoint_config(&ckpt)?,
    };
    let opts = FinetuneOptions {
        usage: a.usage,
        delay: a.delay.into(),
        budget_episodes: a.budget,
        eval_interval: a.eval_interval,
        eval_episodes: a.source.episodes,
        eval_seeds: a.source.seeds.clone(),
        ..FinetuneOptions::default()
    };
    let out = a.source.output.clone().unwrap_or_else(|| cfg.output_dir.join("finetune"));
    let (report, best) = harness::finetune(&cfg, &ckpt, &opts, Some(&out))?;
    if !report.converged {
        eprintln!("warning: fine-tuning did not reach the full-communication score; keeping the best checkpoint");
    }
    if report.coord_fingerprint_before != report.coord_fingerprint_after {
        bail!("Coordinator parameters changed during fine-tuning");
    }
    std::fs::create_dir_all(&out)?;
    let path = out.join("finetuned.cmx");
    best.save(&path)?;
    print!("{}", report.table());
    println!("checkpoint written to {}", path.display());
    write_report(Some(&out), "finetune.jsonl", &report)
}
