//! Level rewards and reward-weighted preference losses.

mod dpo;
mod reward;

pub use dpo::{
    group_loss, group_loss_value, implicit_reward, mean_win_reward, prepare_groups, train_dpo, DpoEpoch, DpoGroup, DpoTraining,
    GroupTerms, LossMode, PreferenceLoss,
};
pub use reward::{reward, reward_weight, RewardParams};
