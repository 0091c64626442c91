//! Cyber-range simulator: ground-truth network state, a scripted attacker,
//! defender action resolution, monitoring and the shared team reward.

mod brute;
mod sim;
mod types;

#[cfg(test)]
mod tests;

pub use brute::{brute_force_value, joint_action_count, BRUTE_FORCE_BUDGET};
pub use sim::{
    apply_blue, check_target, compute_reward, observe, red_step, reset, step, BlueRecord, Env,
    RedAction, RedRecord, RewardItem, RewardSource, StepInfo, StepResult,
};
pub use types::*;
