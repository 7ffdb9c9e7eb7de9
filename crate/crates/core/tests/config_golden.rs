//! Default hyperparameters against the published training table, and the
//! configuration files shipped with the repository.

use std::path::Path;

use comix::config::{ExperimentConfig, TargetUpdate, TdError};
use comix::env::EnvKind;

#[test]
fn defaults_match_the_training_table() {
    for (kind, steps, buffer_min) in [(EnvKind::Switch, 2, 1000), (EnvKind::Transport, 2, 5000), (EnvKind::PredatorPrey, 10, 5000)] {
        let t = ExperimentConfig::default_for(kind).train;
        assert_eq!((t.lr_q, t.lr_coord, t.weight_decay), (1e-4, 5e-5, 1e-5));
        assert_eq!((t.beta1, t.rms_alpha, t.gamma), (0.9, 0.99, 0.99));
        assert_eq!(t.batch_size, 512);
        assert_eq!(t.recurrent_steps, steps);
        assert_eq!((t.q_update_interval, t.coord_update_interval, t.target_update_interval), (50, 50, 20000));
        assert_eq!(t.target_update, TargetUpdate::Steps);
        assert_eq!(t.target_update_episodes, 100);
        assert_eq!((t.buffer_min, t.buffer_max), (buffer_min, 20000));
        assert_eq!((t.hidden, t.coord_hidden, t.mixer_embed, t.mixer_hidden), (128, 128, 32, 16));
        assert_eq!(t.td_error, TdError::Absolute);
    }
}

#[test]
fn environment_table() {
    let rows = [
        (EnvKind::Switch, (7, 3, 4, 0, 50), (0.0, 0.0, 5.0)),
        (EnvKind::Transport, (16, 10, 4, 2, 100), (0.0, 0.5, 5.0)),
        (EnvKind::PredatorPrey, (12, 12, 4, 16, 200), (0.0, 0.1, 5.0)),
    ];
    for (kind, shape, rewards) in rows {
        let e = ExperimentConfig::default_for(kind).env;
        assert_eq!((e.width, e.height, e.agents, e.entities, e.max_steps), shape, "{kind:?}");
        assert_eq!((e.step_reward, e.intermediary_reward, e.goal_reward), rewards, "{kind:?}");
    }
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(cfg.seeds.len(), 5);
            seen += 1;
        }
    }
    assert!(seen >= 4);
}
