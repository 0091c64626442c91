use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{derive_seed, mean_std, ActionLogWriter, Stream};
use crate::commgraph::{AdjacencyMask, CommGraph, MaskMode};
use crate::error::Result;
use crate::netsim::{BlueAction, Env, ObservationVector};
use crate::policy::{Checkpoint, DecodeMode, Policy};
use crate::scenario::Scenario;

/// Per-episode totals, their mean and population std, and the action log.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub totals: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub action_log: String,
}

impl EvalReport {
    fn from_runs(scenario: &Scenario, source: &str, runs: Vec<EpisodeRun>) -> Self {
        let totals: Vec<f64> = runs.iter().map(|r| r.rewards.iter().sum()).collect();
        let (mean, std) = mean_std(&totals);
        let mut w = ActionLogWriter::new(scenario, source);
        for (i, r) in runs.iter().enumerate() {
            w.episode(i as u64, r.env_seed, &r.joint, &r.rewards);
        }
        Self {
            totals,
            mean,
            std,
            action_log: w.take(),
        }
    }

    /// Normal-approximation 95% interval of the mean, using the sample std.
    pub fn ci95(&self) -> (f64, f64) {
        let n = self.totals.len() as f64;
        if n < 2.0 {
            return (self.mean, self.mean);
        }
        let s = (self.std * self.std * n / (n - 1.0)).sqrt();
        let half = 1.96 * s / n.sqrt();
        (self.mean - half, self.mean + half)
    }
}

/// A finished episode's actions and rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRun {
    pub env_seed: u64,
    pub joint: Vec<Vec<BlueAction>>,
    pub rewards: Vec<f64>,
}

/// Plays one episode, asking `choose` for per-agent action indices.
pub fn run_episode(
    scenario: &Scenario,
    env_seed: u64,
    mut choose: impl FnMut(&[ObservationVector]) -> Result<Vec<usize>>,
) -> Result<EpisodeRun> {
    let (mut env, mut obs) = Env::new(scenario, env_seed)?;
    let mut run = EpisodeRun {
        env_seed,
        joint: vec![],
        rewards: vec![],
    };
    for _ in 0..scenario.horizon {
        let joint = env.actions_from_indices(&choose(&obs)?)?;
        let r = env.step(&joint)?;
        obs = r.joint_obs;
        run.joint.push(joint);
        run.rewards.push(r.team_reward);
    }
    Ok(run)
}

/// Greedy evaluation with the graph's eval-mode mask, or `mask` when given.
/// Episode `i` uses an environment seed derived from `seed` and `i`.
pub fn evaluate_with(
    scenario: &Scenario,
    policy: &Policy,
    graph: &CommGraph,
    mask: Option<&AdjacencyMask>,
    episodes: usize,
    seed: u64,
    source: &str,
) -> Result<EvalReport> {
    // eval-mode sampling draws no randomness
    let mask = match mask {
        Some(m) => m.clone(),
        None => graph.sample_mask(MaskMode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).mask,
    };
    let runs = (0..episodes as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Act, i));
            run_episode(scenario, derive_seed(seed, Stream::Env, i), |obs| {
                Ok(policy.decode(obs, &mask, None, DecodeMode::Greedy, &mut rng)?.actions)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_runs(scenario, source, runs))
}

/// Evaluates a checkpoint on `scenario`, refusing a different scenario.
pub fn evaluate_policy(scenario: &Scenario, checkpoint: &Checkpoint, episodes: usize, seed: u64) -> Result<EvalReport> {
    checkpoint.check_scenario(scenario)?;
    evaluate_with(
        scenario,
        &checkpoint.policy,
        &checkpoint.graph,
        None,
        episodes,
        seed,
        &format!("eval seed={seed}"),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    /// Uniform over each agent's actions.
    Random,
    /// Every agent sleeps every step.
    Sleep,
}

pub fn run_baseline(scenario: &Scenario, baseline: Baseline, episodes: usize, seed: u64) -> Result<EvalReport> {
    let sizes = scenario.action_space_sizes();
    let sleep: Vec<usize> = scenario
        .agents
        .iter()
        .map(|a| a.action_index(BlueAction::Sleep).unwrap_or(0))
        .collect();
    let runs = (0..episodes as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Act, i));
            run_episode(scenario, derive_seed(seed, Stream::Env, i), |_| {
                Ok(match baseline {
                    Baseline::Random => sizes.iter().map(|m| rng.random_range(0..*m)).collect(),
                    Baseline::Sleep => sleep.clone(),
                })
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let source = match baseline {
        Baseline::Random => "baseline random",
        Baseline::Sleep => "baseline sleep",
    };
    Ok(EvalReport::from_runs(scenario, source, runs))
}
