//! Inference-system fingerprinting on a simulated zoo of serving stacks.

pub mod fingerprint;
pub mod fpnum;
pub mod harness;
pub mod prompts;
pub mod rng;
pub mod systems;
pub mod toylm;
