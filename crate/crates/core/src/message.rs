use serde::{Deserialize, Serialize};

use crate::env::NUM_ACTIONS;
use crate::error::ComixError;

/// Action field of a message: a real agent's intended action, sent one-hot,
/// or the raw bits a noisy sender puts in its place.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActionField {
    Intended(usize),
    Bits(Vec<f64>),
}

/// Intention message `<observation, intended action>` as it travels through
/// the channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub sender: usize,
    pub observation: Vec<f64>,
    pub action: ActionField,
    /// Steps since the message was sent; 0 when fresh.
    pub age: usize,
}

impl Message {
    pub fn intention(sender: usize, observation: Vec<f64>, action: usize) -> Result<Self, ComixError> {
        if action >= NUM_ACTIONS {
            return Err(ComixError::Contract(format!("intended action {action} outside 0..{NUM_ACTIONS}")));
        }
        Ok(Self { sender, observation, action: ActionField::Intended(action), age: 0 })
    }

    /// Feature width for a given observation width.
    pub fn width(obs_width: usize) -> usize {
        obs_width + NUM_ACTIONS
    }

    pub fn intended(&self) -> Option<usize> {
        match self.action {
            ActionField::Intended(a) => Some(a),
            ActionField::Bits(_) => None,
        }
    }

    /// Observation followed by the action field.
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.observation.len() + NUM_ACTIONS);
        out.extend_from_slice(&self.observation);
        match &self.action {
            ActionField::Intended(a) => out.extend((0..NUM_ACTIONS).map(|k| if k == *a { 1.0 } else { 0.0 })),
            ActionField::Bits(bits) => out.extend_from_slice(bits),
        }
        out
    }

    pub fn with_age(mut self, age: usize) -> Self {
        self.age = age;
        self
    }
}
