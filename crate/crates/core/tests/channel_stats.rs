//! Statistical and structural properties of the simulated channel.

use comix::channel::{noisy_messages, Channel, ChannelConfig, GilbertParams};
use comix::message::Message;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sent(step: usize, n: usize) -> Vec<Message> {
    (0..n).map(|s| Message::intention(s, vec![step as f64, s as f64], (step + s) % 5).unwrap()).collect()
}

/// Runs `steps` broadcast steps split into episodes of `episode` steps and
/// counts fresh deliveries outside each episode's priming step.
fn empirical_rate(usage: f64, senders: usize, steps: usize, episode: usize, seed: u64) -> f64 {
    let mut ch = Channel::new(ChannelConfig { usage, seed, ..ChannelConfig::default() }, senders).unwrap();
    let (mut fresh, mut total) = (0u64, 0u64);
    for t in 0..steps {
        if t % episode == 0 {
            ch.reset_episode();
        }
        let out = ch.broadcast(&sent(t, senders)).unwrap();
        if t % episode != 0 {
            fresh += out.iter().filter(|m| m.age == 0).count() as u64;
            total += senders as u64;
        }
    }
    let rate = fresh as f64 / total as f64;
    assert!((rate - ch.delivery_rate()).abs() < 1e-12);
    rate
}

#[test]
fn delivery_rates_match_usage_over_100k_steps() {
    for usage in [0.5, 0.25, 0.10] {
        let rate = empirical_rate(usage, 1, 100_000, 100_000, 7);
        assert!((rate - usage).abs() <= 0.01, "usage {usage}: delivered {rate}");
        let rate = empirical_rate(usage, 4, 100_000, 50, 8);
        assert!((rate - usage).abs() <= 0.01, "usage {usage}, episodic: delivered {rate}");
    }
}

#[test]
fn drop_bursts_have_the_configured_mean() {
    let mut ch = Channel::new(ChannelConfig { usage: 0.5, seed: 3, ..ChannelConfig::default() }, 1).unwrap();
    let (mut bursts, mut dropped, mut in_burst) = (0u64, 0u64, false);
    for t in 0..100_000 {
        let out = ch.broadcast(&sent(t, 1)).unwrap();
        let drop = out[0].age > 0;
        if drop {
            dropped += 1;
            if !in_burst {
                bursts += 1;
            }
        }
        in_burst = drop;
    }
    let mean = dropped as f64 / bursts as f64;
    assert!((mean - 4.0).abs() < 0.2, "mean burst {mean}");
}

#[test]
fn low_usage_falls_back_to_longer_bursts() {
    let p = GilbertParams::for_usage(0.1, 4.0);
    assert_eq!(p.enter_drop, 1.0);
    assert!((p.stationary_delivery() - 0.1).abs() < 1e-12);
    assert!(p.mean_burst() > 4.0);
}

#[test]
fn same_seed_same_deliveries() {
    let run = |seed| {
        let mut ch = Channel::new(ChannelConfig { usage: 0.25, seed, ..ChannelConfig::default() }, 5).unwrap();
        (0..2000).map(|t| ch.broadcast(&sent(t, 5)).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(11), run(11));
    assert_ne!(run(11), run(12));
}

#[test]
fn full_outage_keeps_first_message() {
    let mut ch = Channel::new(ChannelConfig { usage: 0.0, ..ChannelConfig::default() }, 3).unwrap();
    for step in 1..=40 {
        let out = ch.broadcast(&sent(step, 3)).unwrap();
        for m in &out {
            assert_eq!(m.age, step - 1);
            assert_eq!(m.observation[0], 1.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mailbox_is_full_and_payloads_untouched(
        usage in 0.0f64..=1.0,
        senders in 1usize..7,
        noisy in 0usize..4,
        seed in 0u64..10_000,
    ) {
        let mut ch = Channel::new(ChannelConfig { usage, seed, ..ChannelConfig::default() }, senders + noisy).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut history: Vec<Vec<Message>> = Vec::new();
        for t in 0..60 {
            let mut msgs = sent(t, senders);
            msgs.extend(noisy_messages(noisy, 2, senders, &mut rng));
            let out = ch.broadcast(&msgs).unwrap();
            history.push(msgs);
            prop_assert_eq!(out.len(), senders + noisy);
            for (k, m) in out.iter().enumerate() {
                prop_assert_eq!(m.sender, k);
                // The delivered payload is exactly what the sender sent `age` steps ago.
                let original = &history[t - m.age][k];
                prop_assert_eq!(&m.observation, &original.observation);
                prop_assert_eq!(&m.action, &original.action);
            }
        }
    }

    #[test]
    fn ages_grow_by_one_or_reset(usage in 0.0f64..1.0, seed in 0u64..10_000) {
        let mut ch = Channel::new(ChannelConfig { usage, seed, ..ChannelConfig::default() }, 2).unwrap();
        let mut prev = vec![0usize; 2];
        for t in 0..200 {
            let out = ch.broadcast(&sent(t, 2)).unwrap();
            for k in 0..2 {
                prop_assert!(out[k].age == 0 || out[k].age == prev[k] + 1);
                prev[k] = out[k].age;
            }
        }
    }
}
