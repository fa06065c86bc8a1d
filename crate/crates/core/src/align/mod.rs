//! Reward alignment: preference-pair reward-model training and
//! reward-maximization fine-tuning via direct clean-sample prediction.

pub mod rewards;
pub mod rlhf;
pub mod rm;

pub use rewards::{FixedReward, RewardCtx, RewardModel, Scorer, ScorerNet};
pub use rlhf::{
    multi_round, predict_x0, refiner_rlhf_step, reward_feedback_step, EvalPrompt, RlhfConfig,
    RoundReport,
};
pub use rm::{rm_train_step, PreferencePair};
