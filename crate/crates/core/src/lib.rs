//! Memory-aware policy optimization for tool-using agents, at desk scale.

pub mod advantage;
pub mod config;
pub mod env;
pub mod error;
pub mod inference;
pub mod par;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod trainer;
pub mod trajectory;
pub mod vocab;
