pub mod agent;
pub mod channel;
pub mod config;
pub mod coordinator;
pub mod env;
pub mod error;
pub mod harness;
pub mod losses;
pub mod message;
pub mod metrics;
pub mod mixer;
pub mod model;
pub mod replay;
pub mod rollout;
pub mod trainer;

pub use error::{ComixError, Result};
pub use comix_nn as nn;
