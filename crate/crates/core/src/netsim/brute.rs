use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::sim::{reset, step};
use super::types::{BlueAction, NetworkState};
use crate::error::{Error, Result};
use crate::scenario::Scenario;

/// Default leaf budget for [`brute_force_value`].
pub const BRUTE_FORCE_BUDGET: u128 = 10_000_000;

/// Number of joint actions available per step.
pub fn joint_action_count(scenario: &Scenario) -> u128 {
    scenario
        .agents
        .iter()
        .map(|a| a.action_space.len() as u128)
        .product()
}

fn joint_actions(scenario: &Scenario) -> Vec<Vec<BlueAction>> {
    let mut all = vec![vec![]];
    for agent in &scenario.agents {
        all = all
            .into_iter()
            .flat_map(|prefix: Vec<BlueAction>| {
                agent.action_space.iter().map(move |a| {
                    let mut p = prefix.clone();
                    p.push(*a);
                    p
                })
            })
            .collect();
    }
    all
}

fn best(
    scenario: &Scenario,
    joint: &[Vec<BlueAction>],
    state: &NetworkState,
    remaining: usize,
) -> f64 {
    if remaining == 0 {
        return 0.0;
    }
    // Monitoring draws touch only flags and knowledge, never rewards or the
    // attacker, so any fixed stream gives the same values.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    joint
        .iter()
        .map(|a| {
            let r = step(scenario, state, a, &mut rng).expect("enumerated actions are valid");
            r.team_reward + best(scenario, joint, &r.next_state, remaining - 1)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Exact maximum undiscounted team reward over every joint-action sequence
/// of length `horizon`, with exploits made certain.
pub fn brute_force_value(scenario: &Scenario, horizon: usize, budget: u128) -> Result<f64> {
    let per_step = joint_action_count(scenario);
    let leaves = (0..horizon).try_fold(1u128, |acc, _| acc.checked_mul(per_step));
    match leaves {
        Some(n) if n <= budget => {}
        Some(n) => return Err(Error::Budget { leaves: n, budget }),
        None => return Err(Error::Budget { leaves: u128::MAX, budget }),
    }
    if horizon == 0 {
        return Ok(0.0);
    }
    let mut game = scenario.clone();
    game.exploit_success = 1.0;
    game.horizon = horizon;
    let (state, _) = reset(&game)?;
    let joint = joint_actions(&game);
    let value = joint
        .par_iter()
        .map(|a| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let r = step(&game, &state, a, &mut rng).expect("enumerated actions are valid");
            r.team_reward + best(&game, &joint, &r.next_state, horizon - 1)
        })
        .reduce(|| f64::NEG_INFINITY, f64::max);
    Ok(value)
}
