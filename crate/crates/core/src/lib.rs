//! Cross-layer adaptive bitrate streaming: simulator, traces, actor-critic
//! training, online tuners and an MPC baseline.

pub mod checkpoint;
pub mod correlation;
pub mod ea3c;
pub mod env;
pub mod error;
pub mod features;
pub mod mdp;
pub mod mpc;
pub mod nn;
pub mod online;
pub mod synth;
pub mod trace;

pub use error::{AbrError, Result};
