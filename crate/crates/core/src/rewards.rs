//! Binary outcome rewards: 1 for a successful trajectory, 0 otherwise, shared
//! by every executed token of that trajectory. No shaping terms.

use crate::rollout::{RolloutGroup, Trajectory};

pub fn outcome_reward(traj: &Trajectory) -> f64 {
    if traj.success {
        1.0
    } else {
        0.0
    }
}

/// Fills `group.rewards` from the success flags. Idempotent.
pub fn assign_outcome_rewards(group: &mut RolloutGroup) {
    group.rewards = group.trajectories.iter().map(outcome_reward).collect();
}

/// Per-token rewards of one trajectory: its outcome broadcast to every
/// executed token.
pub fn token_rewards(traj: &Trajectory) -> Vec<f64> {
    vec![outcome_reward(traj); traj.executed_token_count]
}
