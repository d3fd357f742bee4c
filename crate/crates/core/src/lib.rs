//! Validity-calibrated distillation of small tabular autoregressive policies.

pub mod dist;
pub mod harness;
pub mod judge;
pub mod policy;
pub mod rng;
pub mod tasks;
pub mod trust_region;
pub mod vcrd;
