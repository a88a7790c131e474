//! Update machinery shared by the policy and the reward model: the clipped
//! importance-ratio surrogate and its derivative.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateConfig {
    pub learning_rate: f64,
    /// `f64::INFINITY` disables clipping.
    pub clip_epsilon: f64,
    pub kl_beta: f64,
}

impl UpdateConfig {
    pub fn vanilla(learning_rate: f64) -> Self {
        UpdateConfig {
            learning_rate,
            clip_epsilon: f64::INFINITY,
            kl_beta: 0.0,
        }
    }
}

/// `min(r·A, clip(r, 1-ε, 1+ε)·A)`.
pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * advantage).min(clipped * advantage)
}

/// d/dr of [`clipped_term`]: `A` while the unclipped branch is active, else 0.
pub fn clipped_slope(ratio: f64, advantage: f64, eps: f64) -> f64 {
    if (advantage > 0.0 && ratio > 1.0 + eps) || (advantage < 0.0 && ratio < 1.0 - eps) {
        0.0
    } else {
        advantage
    }
}
