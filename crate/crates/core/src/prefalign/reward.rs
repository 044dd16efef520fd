use serde::{Deserialize, Serialize};

use crate::corpus::FeedbackLevel;
use crate::error::{invalid, Result};

/// Level weights and DPO scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardParams {
    /// Base weight per level, strongest first.
    pub lambda: [f64; 6],
    pub rw_max: f64,
    pub delta: f64,
    pub alpha: f64,
    pub beta_dpo: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            lambda: [2.0, 1.5, 1.0, 0.5, 0.2, 0.0],
            rw_max: 10.0,
            delta: 0.1,
            alpha: 0.5,
            beta_dpo: 0.1,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.windows(2).all(|w| w[0] > w[1]) {
            return Err(invalid("reward params", "lambda must be strictly decreasing"));
        }
        if !(self.delta >= 0.0) || !(self.rw_max > 0.0) || !(self.beta_dpo > 0.0) || !(self.alpha >= 0.0) {
            return Err(invalid("reward params", "need delta >= 0, rw_max > 0, beta_dpo > 0, alpha >= 0"));
        }
        Ok(())
    }
}

/// `λ(level) · e^pi`.
pub fn reward(level: FeedbackLevel, pi: f64, params: &RewardParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&pi) {
        return Err(invalid("reward", format!("pi = {pi} outside [0, 1]")));
    }
    Ok(params.lambda[level.index()] * pi.exp())
}

/// `min(rw_max, 1 / (r_win − r_lose))`.
pub fn reward_weight(r_win: f64, r_lose: f64, params: &RewardParams) -> Result<f64> {
    if !(r_win > r_lose) {
        return Err(invalid(
            "reward_weight",
            format!("win reward {r_win} does not exceed lose reward {r_lose}"),
        ));
    }
    Ok((1.0 / (r_win - r_lose)).min(params.rw_max))
}
