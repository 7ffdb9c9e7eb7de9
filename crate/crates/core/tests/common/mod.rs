#![allow(dead_code)]

use comix::channel::ChannelConfig;
use comix::env::EnvConfig;
use comix::model::{Comix, ModelConfig};
use comix::rollout::{ActStep, Actor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Narrow model for the 4-agent Switch environment.
pub fn switch_model(width: usize, seed: u64) -> Comix {
    Comix::new(ModelConfig::small(4, 4, width), seed).unwrap()
}

/// Plays one episode and returns every acting step.
pub fn play(model: &Comix, env: &EnvConfig, channel: &ChannelConfig, seed: u64, epsilon: f64) -> Vec<ActStep> {
    let mut actor = Actor::new(env, channel, model.config.agent.hidden).unwrap();
    actor.reset(seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut out = Vec::new();
    while !actor.done() {
        out.push(actor.step(model, epsilon, &mut rng).unwrap());
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `Q_i` of receiver `i` when exactly the peers flagged in `keep` are
/// accepted, via the per-agent filter path.
pub fn q_with_subset(
    model: &Comix,
    messages: &[comix::message::Message],
    i: usize,
    q_self: &[f64],
    h_next: &[f64],
    keep: &[bool],
) -> Vec<f64> {
    let peers: Vec<_> = messages.iter().filter(|m| m.sender != i).collect();
    let kept: Vec<_> = peers.iter().zip(keep).filter(|(_, &k)| k).map(|(m, _)| (*m).clone()).collect();
    let w = model.agent.coord_weights(&model.q_params, h_next, &kept, |_| 1.0).unwrap();
    q_self.iter().zip(&w).map(|(q, w)| q * w).collect()
}

pub fn row_max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}
