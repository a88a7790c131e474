//! Closed-loop co-training of a policy, a process reward model and a task
//! environment on synthetic multi-step tasks.

pub mod adaptation;
pub mod coding;
pub mod error;
pub mod feedback;
pub mod harness;
pub mod policy;
pub mod reward_model;
pub mod rng;
pub mod surrogate;
pub mod task_env;
pub mod theory;
pub mod verify;

pub use error::{Error, Result};
