//! Simulated broadcast channel with burst drops, stale substitution, delay
//! scaling and noisy senders.
//!
//! Each sender has its own two-state (Gilbert) drop process. Drop bursts
//! have geometric length with the configured mean, and the entry rate is
//! set so that the stationary delivery fraction equals the usage fraction.
//! When a usage fraction is too low for the requested burst mean, the entry
//! probability saturates at 1 and bursts are lengthened instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ComixError;
use crate::message::{ActionField, Message};
use crate::env::NUM_ACTIONS;

/// Usage fractions swept by the disruption study.
pub const USAGE_SWEEP: [f64; 5] = [1.0, 0.5, 0.25, 0.10, 0.0];
pub const EXPONENTIAL_DECAY: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DelayMode {
    Off,
    /// `1 / (1 + age)`
    Reciprocal,
    /// `0.9^age`
    Exponential,
}

impl DelayMode {
    pub fn factor(self, age: usize) -> f64 {
        match self {
            DelayMode::Off => 1.0,
            DelayMode::Reciprocal => 1.0 / (1.0 + age as f64),
            DelayMode::Exponential => EXPONENTIAL_DECAY.powi(age as i32),
        }
    }
}

/// Scales encoded message features by the delay factor of their age.
pub fn delay_scale(features: &[f64], age: usize, mode: DelayMode) -> Vec<f64> {
    let f = mode.factor(age);
    features.iter().map(|x| x * f).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub usage: f64,
    pub burst_mean: f64,
    pub noisy_agents: usize,
    pub delay: DelayMode,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self { usage: 1.0, burst_mean: 4.0, noisy_agents: 0, delay: DelayMode::Off, seed: 0 }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), ComixError> {
        if !(0.0..=1.0).contains(&self.usage) {
            return Err(ComixError::Config(format!("channel.usage {} outside [0, 1]", self.usage)));
        }
        if !(self.burst_mean >= 1.0) {
            return Err(ComixError::Config(format!("channel.burst_mean {} below 1", self.burst_mean)));
        }
        Ok(())
    }

    pub fn with_usage(mut self, usage: f64) -> Self {
        self.usage = usage;
        self
    }
}

/// Transition probabilities of the per-sender drop process.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GilbertParams {
    /// Delivering to dropping.
    pub enter_drop: f64,
    /// Dropping to delivering.
    pub leave_drop: f64,
}

impl GilbertParams {
    pub fn for_usage(usage: f64, burst_mean: f64) -> Self {
        if usage >= 1.0 {
            return Self { enter_drop: 0.0, leave_drop: 1.0 };
        }
        if usage <= 0.0 {
            return Self { enter_drop: 1.0, leave_drop: 0.0 };
        }
        let drop = 1.0 - usage;
        let leave = 1.0 / burst_mean;
        let enter = drop * leave / usage;
        if enter <= 1.0 {
            Self { enter_drop: enter, leave_drop: leave }
        } else {
            Self { enter_drop: 1.0, leave_drop: usage / drop }
        }
    }

    pub fn stationary_delivery(&self) -> f64 {
        let total = self.enter_drop + self.leave_drop;
        if total == 0.0 {
            1.0
        } else {
            self.leave_drop / total
        }
    }

    pub fn mean_burst(&self) -> f64 {
        if self.leave_drop == 0.0 {
            f64::INFINITY
        } else {
            1.0 / self.leave_drop
        }
    }
}

/// Last delivered message of a sender.
#[derive(Clone, Debug, PartialEq)]
pub struct MailboxEntry {
    pub message: Message,
    pub age: usize,
}

/// One line of the channel event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelEvent {
    pub step: usize,
    pub sender: usize,
    pub delivered: bool,
    pub age: usize,
}

pub struct Channel {
    config: ChannelConfig,
    params: GilbertParams,
    rng: ChaCha8Rng,
    dropping: Vec<bool>,
    mailbox: Vec<Option<MailboxEntry>>,
    step: usize,
    delivered: u64,
    attempts: u64,
    log: Option<Vec<ChannelEvent>>,
}

impl Channel {
    pub fn new(config: ChannelConfig, senders: usize) -> Result<Self, ComixError> {
        config.validate()?;
        let params = GilbertParams::for_usage(config.usage, config.burst_mean);
        let mut ch = Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params,
            config,
            dropping: vec![false; senders],
            mailbox: vec![None; senders],
            step: 0,
            delivered: 0,
            attempts: 0,
            log: None,
        };
        ch.reset_episode();
        Ok(ch)
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    pub fn params(&self) -> GilbertParams {
        self.params
    }

    pub fn senders(&self) -> usize {
        self.mailbox.len()
    }

    pub fn enable_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    pub fn take_events(&mut self) -> Vec<ChannelEvent> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Empties the mailboxes and redraws every sender's drop state from the
    /// stationary distribution.
    pub fn reset_episode(&mut self) {
        let deliver = self.params.stationary_delivery();
        for d in self.dropping.iter_mut() {
            *d = self.rng.gen::<f64>() >= deliver;
        }
        self.mailbox.iter_mut().for_each(|m| *m = None);
        self.step = 0;
    }

    /// Fraction of non-priming sender-steps that delivered a fresh message.
    pub fn delivery_rate(&self) -> f64 {
        if self.attempts == 0 {
            1.0
        } else {
            self.delivered as f64 / self.attempts as f64
        }
    }

    /// Passes one message per sender (index = sender slot) through the
    /// channel. A dropped message is replaced by the sender's last delivered
    /// one with its age; the first message of an episode always gets through
    /// so the mailbox is never empty.
    pub fn broadcast(&mut self, messages: &[Message]) -> Result<Vec<Message>, ComixError> {
        if messages.len() != self.mailbox.len() {
            return Err(ComixError::Contract(format!(
                "channel has {} senders, got {} messages",
                self.mailbox.len(),
                messages.len()
            )));
        }
        self.step += 1;
        let mut out = Vec::with_capacity(messages.len());
        for (k, msg) in messages.iter().enumerate() {
            let priming = self.mailbox[k].is_none();
            if !priming {
                let flip = if self.dropping[k] { self.params.leave_drop } else { self.params.enter_drop };
                if flip > 0.0 && self.rng.gen::<f64>() < flip {
                    self.dropping[k] = !self.dropping[k];
                }
                self.attempts += 1;
            }
            let deliver = priming || !self.dropping[k];
            if deliver {
                if !priming {
                    self.delivered += 1;
                }
                self.mailbox[k] = Some(MailboxEntry { message: msg.clone().with_age(0), age: 0 });
            } else if let Some(entry) = self.mailbox[k].as_mut() {
                entry.age += 1;
            }
            let entry = self.mailbox[k].as_ref().expect("mailbox primed");
            if let Some(log) = self.log.as_mut() {
                log.push(ChannelEvent { step: self.step, sender: msg.sender, delivered: deliver, age: entry.age });
            }
            out.push(entry.message.clone().with_age(entry.age));
        }
        Ok(out)
    }
}

/// Messages from `count` noisy senders with ids starting at `first_id`:
/// observation and action fields are independent fair bits.
pub fn noisy_messages<R: Rng + ?Sized>(count: usize, obs_width: usize, first_id: usize, rng: &mut R) -> Vec<Message> {
    let mut bit = || if rng.gen::<bool>() { 1.0 } else { 0.0 };
    (0..count)
        .map(|k| Message {
            sender: first_id + k,
            observation: (0..obs_width).map(|_| bit()).collect(),
            action: ActionField::Bits((0..NUM_ACTIONS).map(|_| bit()).collect()),
            age: 0,
        })
        .collect()
}
