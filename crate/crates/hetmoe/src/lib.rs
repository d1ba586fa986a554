//! Desk-scale multi-task heterogeneous training with mixture-of-experts
//! layers: per-dataset Top-K routing, a mutual-information auxiliary loss
//! with a momentum-buffer surrogate gradient, and a modular adaptation
//! toolkit (router-only fine-tuning, expert pruning, Top-K reduction,
//! continual expert expansion).

pub mod adapt;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod moe;
pub mod ndgrad;
pub mod objectives;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
