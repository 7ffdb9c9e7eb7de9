//! Invariants of the three gridworlds under random play.

use std::collections::BTreeSet;

use comix::env::{make_env, EnvConfig, EnvKind, JointState, Pos};
use proptest::prelude::*;

fn configs() -> Vec<EnvConfig> {
    vec![EnvConfig::switch(), EnvConfig::transport(4), EnvConfig::transport(8), EnvConfig::predator_prey(4)]
}

/// Cells held by agents still on the map, live entities and obstacles.
fn solid_cells(kind: EnvKind, s: &JointState) -> Vec<Pos> {
    let mut cells: Vec<Pos> = match kind {
        EnvKind::Transport => s.agents.iter().zip(&s.done).filter(|(_, &d)| !d).map(|(p, _)| *p).collect(),
        _ => s.agents.clone(),
    };
    cells.extend(s.entities.iter().zip(&s.entity_alive).filter(|(_, &a)| a).map(|(p, _)| *p));
    cells.extend(s.obstacles.iter().copied());
    cells
}

fn allowed_reward(cfg: &EnvConfig, r: f64) -> bool {
    // Sums of at most a handful of table rewards.
    let parts = [cfg.step_reward, cfg.intermediary_reward, cfg.goal_reward];
    (0..=4).any(|a| {
        (0..=4).any(|b| (0..=4).any(|c| (a as f64 * parts[0] + b as f64 * parts[1] + c as f64 * parts[2] - r).abs() < 1e-9))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn random_play_keeps_the_invariants(
        which in 0usize..4,
        seed in 0u64..100_000,
        actions in prop::collection::vec(prop::collection::vec(0usize..5, 8), 1..120),
    ) {
        let cfg = &configs()[which];
        let n = cfg.agents;
        let mut env = make_env(cfg).unwrap();
        let obs = env.reset(seed).unwrap();
        prop_assert_eq!(obs.len(), n);
        prop_assert!(obs.iter().all(|o| o.len() == cfg.obs_width));
        let mut total = 0.0;
        for joint in &actions {
            let result = env.step(&joint[..n]).unwrap();
            let s = env.state();
            let cells = solid_cells(cfg.kind, &s);
            let unique: BTreeSet<Pos> = cells.iter().copied().collect();
            prop_assert_eq!(unique.len(), cells.len(), "two occupants share a cell");
            prop_assert!(cells.iter().all(|&p| s.bounds().contains(p)));
            prop_assert!(result.observations.iter().all(|o| o.len() == cfg.obs_width && o.iter().all(|x| x.is_finite())));
            for &r in &result.rewards {
                prop_assert!(allowed_reward(cfg, r), "reward {}", r);
            }
            total += result.rewards.iter().sum::<f64>();
            if cfg.kind == EnvKind::PredatorPrey {
                let alive = s.entity_alive.iter().filter(|&&a| a).count();
                prop_assert_eq!(alive as f64 + env.headline(), 16.0);
            }
            if result.episode_done {
                break;
            }
        }
        if cfg.kind == EnvKind::PredatorPrey {
            prop_assert!(total <= 16.0 * 4.0 * cfg.goal_reward + (actions.len() * n) as f64 * cfg.intermediary_reward + 1e-9);
        }
    }

    #[test]
    fn same_seed_and_actions_same_trajectory(
        which in 0usize..4,
        seed in 0u64..100_000,
        actions in prop::collection::vec(prop::collection::vec(0usize..5, 8), 1..60),
    ) {
        let cfg = &configs()[which];
        let n = cfg.agents;
        let run = || {
            let mut env = make_env(cfg).unwrap();
            let mut trace = vec![(env.reset(seed).unwrap(), env.state())];
            for joint in &actions {
                let r = env.step(&joint[..n]).unwrap();
                trace.push((r.observations, env.state()));
                if r.episode_done {
                    break;
                }
            }
            trace
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn switch_agents_cross_only_through_the_corridor(seed in 0u64..100_000, actions in prop::collection::vec(prop::collection::vec(0usize..5, 4), 50)) {
        let cfg = EnvConfig::switch();
        let mut env = make_env(&cfg).unwrap();
        env.reset(seed).unwrap();
        for joint in &actions {
            let r = env.step(joint).unwrap();
            let s = env.state();
            let row = (0..3).find(|&y| !s.obstacles.contains(&Pos::new(3, y))).unwrap();
            prop_assert!(s.agents.iter().filter(|p| (2..5).contains(&p.x)).all(|p| p.y == row));
            let cells: BTreeSet<Pos> = s.agents.iter().copied().collect();
            prop_assert_eq!(cells.len(), 4);
            if r.episode_done {
                break;
            }
        }
    }

    #[test]
    fn transport_loads_move_only_with_agreeing_carriers(seed in 0u64..100_000, actions in prop::collection::vec(prop::collection::vec(0usize..5, 4), 60)) {
        let cfg = EnvConfig::transport(4);
        let mut env = make_env(&cfg).unwrap();
        env.reset(seed).unwrap();
        for joint in &actions {
            let before = env.state();
            let r = env.step(joint).unwrap();
            let after = env.state();
            for k in 0..2 {
                if !before.entity_alive[k] || !after.entity_alive[k] {
                    continue;
                }
                if before.entities[k] != after.entities[k] {
                    prop_assert_eq!(joint[2 * k], joint[2 * k + 1]);
                    prop_assert!(joint[2 * k] != 4);
                }
            }
            if r.episode_done {
                break;
            }
        }
    }
}

#[test]
fn layouts_vary_with_the_seed() {
    for cfg in configs() {
        let mut env = make_env(&cfg).unwrap();
        let layouts: BTreeSet<String> = (0..20)
            .map(|s| {
                env.reset(s).unwrap();
                format!("{:?}", env.state())
            })
            .collect();
        assert!(layouts.len() > 1, "{:?} layout ignores the seed", cfg.kind);
    }
}
