//! Multi-frame pose-guided video motion transfer at desk scale.

pub mod adversaries;
pub mod basenet;
pub mod checkpoint;
pub mod composer;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod posekit;
pub mod synthvid;
pub mod trainer;

pub use error::{Error, Result};
