//! Replay reconstruction and TD targets against a step-by-step replay of the
//! stored inputs through the per-step model API.

mod common;

use comix::channel::{ChannelConfig, DelayMode};
use comix::config::TdError;
use comix::env::EnvConfig;
use comix::losses::{td_loss, unroll, TdBatch};
use comix::model::{CommBatch, Comix};
use comix::nn::gradcheck::check_sampled;
use comix::nn::{Graph, Matrix, Weights};
use comix::replay::{Segment, Transition};
use comix::rollout::delay_factors;
use common::{max_abs_diff, play, switch_model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GAMMA: f64 = 0.99;

fn episode(model: &Comix, seed: u64) -> (Vec<Transition>, Vec<Matrix>) {
    let steps = play(model, &EnvConfig::switch(), &ChannelConfig::default(), seed, 0.6);
    let q = steps.iter().map(|s| s.q.clone()).collect();
    (steps.into_iter().map(|s| s.transition).collect(), q)
}

/// Per-agent action values along `steps`, recomputed with `model` from the
/// first step's stored hidden state and the stored messages.
fn replay_q(model: &Comix, steps: &[Transition]) -> Vec<Matrix> {
    let n = model.config.agents;
    let ow = model.config.obs_width();
    let mw = model.config.message_width();
    let hd = model.config.agent.hidden;
    let mut h = Matrix::from_shape_vec((n, hd), steps[0].hidden.clone()).unwrap();
    let mut out = Vec::new();
    for t in steps {
        let obs = Matrix::from_shape_vec((n, ow), t.obs.clone()).unwrap();
        let (q_self, h_next) = model.self_step(&obs, &h).unwrap();
        let senders = t.ages.len();
        let own = Matrix::from_shape_fn((n, mw), |(i, k)| {
            if k < ow {
                t.obs[i * ow + k]
            } else if k - ow == t.intentions[i] {
                1.0
            } else {
                0.0
            }
        });
        let delivered = Matrix::from_shape_vec((senders, mw), t.delivered.clone()).unwrap();
        let comm = CommBatch::new(1, n, senders, own, delivered, delay_factors(DelayMode::Off, &t.ages)).unwrap();
        out.push(model.comm_step(&comm, &h_next, &q_self).unwrap().q);
        h = h_next;
    }
    out
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b })
}

fn segments(ep: &[Transition], steps: usize) -> Vec<Segment<'_>> {
    (0..ep.len())
        .map(|k| Segment { steps: &ep[k..(k + steps + 1).min(ep.len())], len: steps.min(ep.len() - k) })
        .collect()
}

#[test]
fn unrolled_values_match_acting_time_values() {
    let model = switch_model(8, 3);
    let (ep, acting) = episode(&model, 11);
    for steps in [1, 2, 10] {
        let segs = segments(&ep, steps);
        let batch = TdBatch::from_segments(&model.config, &segs, DelayMode::Off).unwrap();
        let mut g = Graph::new();
        let q = unroll(&model, &mut g, &Weights::fixed(&model.q_params), &batch).unwrap();
        let n = model.config.agents;
        for (b, _) in segs.iter().enumerate() {
            for (u, qu) in q.iter().enumerate() {
                let k = b + u;
                if k >= ep.len() {
                    continue;
                }
                let got = g.value(*qu).slice(ndarray::s![b * n..(b + 1) * n, ..]).to_owned();
                let err = max_abs_diff(got.as_slice().unwrap(), acting[k].as_slice().unwrap());
                assert!(err < 1e-10, "segment {b} step {u}: {err:e}");
            }
        }
    }
}

fn oracle_loss(online: &Comix, target: &Comix, segs: &[Segment<'_>], gamma: f64) -> (f64, Vec<f64>) {
    let n = online.config.agents;
    let mut ys = Vec::new();
    let mut total = 0.0;
    for seg in segs {
        let qo = replay_q(online, seg.steps);
        let qt = replay_q(target, seg.steps);
        for u in 0..seg.len {
            let t = &seg.steps[u];
            let chosen: Vec<f64> = (0..n).map(|i| qo[u][[i, t.actions[i]]]).collect();
            let q_tot = online.mixer.q_tot(&online.q_params, &chosen, &t.obs).unwrap();
            let mut y = t.team_reward();
            if !t.terminal {
                let next = &seg.steps[u + 1];
                let picked: Vec<f64> = (0..n)
                    .map(|i| {
                        let a = argmax(&qo[u + 1].row(i).to_vec());
                        qt[u + 1][[i, a]]
                    })
                    .collect();
                y += gamma * target.mixer.q_tot(&target.q_params, &picked, &next.obs).unwrap();
            }
            total += (y - q_tot).abs();
            ys.push(y);
        }
    }
    (total / ys.len() as f64, ys)
}

#[test]
fn td_loss_matches_step_by_step_double_q_oracle() {
    let online = switch_model(8, 5);
    let mut target = online.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    target.q_params.map_values(|_, v| v.mapv_inplace(|x| x + rng.gen_range(-0.05..0.05)));
    let (ep, _) = episode(&online, 21);
    for steps in [1, 2, 4] {
        let segs = segments(&ep, steps);
        let batch = TdBatch::from_segments(&online.config, &segs, DelayMode::Off).unwrap();
        let mut g = Graph::new();
        let got = td_loss(&online, &target.q_params, &batch, GAMMA, TdError::Absolute, &mut g).unwrap();
        let (want, ys) = oracle_loss(&online, &target, &segs, GAMMA);
        assert!((got.value - want).abs() < 1e-9, "steps {steps}: {} vs {want}", got.value);
        let mut a = got.targets.clone();
        let mut b = ys.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert!(max_abs_diff(&a, &b) < 1e-9);
    }
}

#[test]
fn zero_discount_targets_are_team_rewards() {
    let online = switch_model(8, 6);
    let (ep, _) = episode(&online, 4);
    let segs = segments(&ep, 2);
    let batch = TdBatch::from_segments(&online.config, &segs, DelayMode::Off).unwrap();
    let mut g = Graph::new();
    let got = td_loss(&online, &online.q_params, &batch, 0.0, TdError::Absolute, &mut g).unwrap();
    let mut want: Vec<f64> = segs.iter().flat_map(|s| s.steps[..s.len].iter().map(Transition::team_reward)).collect();
    let mut have = got.targets.clone();
    want.sort_by(f64::total_cmp);
    have.sort_by(f64::total_cmp);
    assert_eq!(have, want);
}

/// Two agents, one step, terminal: the loss is `|r - Q_TOT|` and the
/// target never sees the bootstrap value.
#[test]
fn terminal_step_does_not_bootstrap() {
    let online = switch_model(8, 7);
    let (mut ep, _) = episode(&online, 8);
    ep.truncate(2);
    ep[0].terminal = true;
    ep[0].rewards = vec![5.0, 0.0, 0.0, 0.0];
    let segs = vec![Segment { steps: &ep[..2], len: 1 }];
    let batch = TdBatch::from_segments(&online.config, &segs, DelayMode::Off).unwrap();
    let mut g = Graph::new();
    let got = td_loss(&online, &online.q_params, &batch, GAMMA, TdError::Absolute, &mut g).unwrap();
    assert_eq!(got.targets, vec![5.0]);
    let q = replay_q(&online, &ep[..1]);
    let chosen: Vec<f64> = (0..4).map(|i| q[0][[i, ep[0].actions[i]]]).collect();
    let q_tot = online.mixer.q_tot(&online.q_params, &chosen, &ep[0].obs).unwrap();
    assert!((got.value - (5.0 - q_tot).abs()).abs() < 1e-12);
}

#[test]
fn td_loss_gradient_matches_central_differences() {
    let mut online = switch_model(6, 12);
    let target = online.q_params.clone();
    let (ep, _) = episode(&online, 30);
    let segs: Vec<Segment<'_>> = segments(&ep, 2).into_iter().step_by(7).collect();
    let batch = TdBatch::from_segments(&online.config, &segs, DelayMode::Off).unwrap();
    let mut g = Graph::new();
    let loss = td_loss(&online, &target, &batch, GAMMA, TdError::Absolute, &mut g).unwrap();
    let grads = g.backward(loss.loss).unwrap();
    let analytic: Vec<Matrix> = online
        .q_params
        .ids()
        .map(|id| grads.get(&online.q_params, id).cloned().unwrap_or_else(|| Matrix::zeros(online.q_params.get(id).raw_dim())))
        .collect();
    drop(g);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = online.q_params.clone();
    let probe = online.clone();
    let check = check_sampled(&mut store, &|id| analytic[id.index()].clone(), 3, &mut rng, |s| {
        let mut m = probe.clone();
        m.q_params = s.clone();
        let mut g = Graph::new();
        td_loss(&m, &target, &batch, GAMMA, TdError::Absolute, &mut g).unwrap().value
    });
    online.q_params = store;
    assert!(check.relative_error() < 1e-4, "relative error {:e}", check.relative_error());
}
