//! Budgeted active feature acquisition with a Gaussian-mixture surrogate,
//! hierarchical action grouping, a partially observed OOD detector and a
//! PPO acquisition agent.

pub mod agent;
pub mod benchmark;
pub mod checkpoint;
pub mod config;
pub mod data_env;
pub mod dynamics;
pub mod grouping;
pub mod harness;
pub mod math;
pub mod nn;
pub mod po_msma;
pub mod rng;
