//! Training-loop contracts on narrow networks.

use comix::config::{ExperimentConfig, TargetUpdate};
use comix::env::EnvKind;
use comix::metrics::{read_jsonl, MetricsRecord, TimingRecord};
use comix::trainer::{load_model, min_mixer_derivative, seeded_rng, Trainer};
use comix::ComixError;

fn tiny(kind: EnvKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default_for(kind);
    let t = &mut cfg.train;
    t.hidden = 16;
    t.coord_hidden = 16;
    t.mixer_embed = 8;
    t.mixer_hidden = 8;
    t.batch_size = 32;
    t.buffer_min = 100;
    t.buffer_max = 2000;
    t.q_update_interval = 10;
    t.coord_update_interval = 10;
    t.target_update_interval = 200;
    t.checkpoint_interval = 10;
    t.episodes = 40;
    cfg
}

#[test]
fn zero_step_size_leaves_parameters_bit_identical() {
    let mut cfg = tiny(EnvKind::Switch);
    cfg.train.lr_q = 0.0;
    cfg.train.lr_coord = 0.0;
    cfg.train.weight_decay = 0.0;
    let mut t = Trainer::new(cfg, 1).unwrap();
    let (q0, c0) = (t.model.q_params.clone(), t.model.coord_params.clone());
    while t.env_steps() < 1000 {
        t.run_episode().unwrap();
    }
    assert!(t.q_updates() > 50 && t.coord_updates() > 50, "{} {}", t.q_updates(), t.coord_updates());
    assert!(t.model.q_params.bit_identical(&q0));
    assert!(t.model.coord_params.bit_identical(&c0));
}

#[test]
fn target_is_a_snapshot_between_copies() {
    let mut cfg = tiny(EnvKind::Switch);
    cfg.train.target_update_interval = 400;
    let mut t = Trainer::new(cfg, 2).unwrap();
    let mut snapshot = t.target.clone();
    let mut copies = t.target_updates();
    while t.env_steps() < 1500 {
        t.run_episode().unwrap();
        if t.target_updates() == copies {
            assert!(t.target.bit_identical(&snapshot));
        } else {
            copies = t.target_updates();
            snapshot = t.target.clone();
        }
    }
    assert_eq!(t.target_updates(), t.env_steps() / 400);
    t.update_target();
    assert!(t.target.bit_identical(&t.model.q_params));
    assert!(!snapshot.bit_identical(&t.model.q_params));
}

#[test]
fn episode_target_schedule_counts_episodes() {
    let mut cfg = tiny(EnvKind::Switch);
    cfg.train.target_update = TargetUpdate::Episodes;
    cfg.train.target_update_episodes = 3;
    let mut t = Trainer::new(cfg, 2).unwrap();
    for _ in 0..10 {
        t.run_episode().unwrap();
    }
    assert_eq!(t.target_updates(), 3);
}

#[test]
fn updates_wait_for_warm_up_and_follow_intervals() {
    let cfg = tiny(EnvKind::Switch);
    let mut t = Trainer::new(cfg, 3).unwrap();
    t.run_episode().unwrap();
    assert_eq!(t.buffer.len(), 50);
    assert_eq!(t.q_updates(), 0);
    assert_eq!(t.coord_updates(), 0);
    for _ in 0..5 {
        t.run_episode().unwrap();
    }
    // Ready once two episodes (100 transitions) are stored: episodes 3 to 6
    // each contain five interval boundaries.
    assert_eq!(t.q_updates(), 20);
    assert_eq!(t.coord_updates(), 20);
}

#[test]
fn frozen_coordinator_is_untouched() {
    let mut t = Trainer::new(tiny(EnvKind::Switch), 4).unwrap();
    t.coord_frozen = true;
    let fp = t.model.coord_params.fingerprint();
    for _ in 0..6 {
        t.run_episode().unwrap();
    }
    assert!(t.q_updates() > 0);
    assert_eq!(t.coord_updates(), 0);
    assert_eq!(t.model.coord_params.fingerprint(), fp);
}

#[test]
fn no_communication_ablation_trains_without_a_coordinator_loss() {
    let mut cfg = tiny(EnvKind::Switch);
    cfg.train.communication = false;
    let mut t = Trainer::new(cfg, 5).unwrap();
    let records: Vec<MetricsRecord> = (0..5).map(|_| t.run_episode().unwrap()).collect();
    assert!(records.iter().all(|r| r.loss_c.is_none() && r.accepted_fraction.is_none()));
    assert!(records.iter().any(|r| r.loss_q.is_some()));
}

#[test]
fn metrics_are_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        let mut t = Trainer::new(tiny(EnvKind::Transport), 6).unwrap();
        t.train(Some(&dir.path().join(run)), 12, |_| {}).unwrap();
    }
    let a = std::fs::read(dir.path().join("a/metrics.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b/metrics.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let timing: Vec<TimingRecord> = read_jsonl(&dir.path().join("a/timing.jsonl")).unwrap();
    assert_eq!(timing.len(), 12);
}

#[test]
fn checkpoints_restore_the_model_and_reject_other_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(tiny(EnvKind::Switch), 7).unwrap();
    let out = t.train(Some(dir.path()), 20, |_| {}).unwrap();
    assert_eq!(out.checkpoints.len(), 3);
    let ckpt = comix::nn::Checkpoint::load(out.checkpoints.last().unwrap()).unwrap();
    let model = load_model(&ckpt, Some(&t.config.model_config())).unwrap();
    assert!(model.q_params.bit_identical(&t.model.q_params));
    assert!(model.coord_params.bit_identical(&t.model.coord_params));
    let resumed = Trainer::from_checkpoint(t.config.clone(), &ckpt).unwrap();
    assert_eq!(resumed.episode(), 20);
    assert!(resumed.target.bit_identical(&t.target));

    let other = tiny(EnvKind::Transport).model_config();
    assert!(matches!(load_model(&ckpt, Some(&other)), Err(ComixError::Incompatible(_))));
}

/// Stability smoke run at the 200-episode scale: finite losses throughout,
/// replay and every update path exercised, mixer still monotone.
#[test]
fn smoke_run_of_200_episodes_stays_finite() {
    let mut cfg = tiny(EnvKind::Switch);
    cfg.train.episodes = 200;
    cfg.train.checkpoint_interval = 100;
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg, 8).unwrap();
    let out = t.train(Some(dir.path()), 200, |_| {}).unwrap();
    assert_eq!(out.records.len(), 200);
    for r in &out.records {
        assert!(r.loss_q.is_none_or(f64::is_finite));
        assert!(r.loss_c.is_none_or(f64::is_finite));
    }
    assert!(t.q_updates() > 100 && t.coord_updates() > 100 && t.target_updates() > 5);
    assert_eq!(t.buffer.len(), 2000);
    let mut rng = seeded_rng(8);
    assert!(min_mixer_derivative(&t.model, 1000, 1.0, &mut rng).unwrap() >= -1e-9);
    let stored: Vec<MetricsRecord> = read_jsonl(&dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(stored, out.records);
}
