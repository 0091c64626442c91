//! Episode collection, advantage estimation, clipped-surrogate updates of
//! the policy and the communication graph, evaluation and run artifacts.

mod config;
mod eval;
mod logs;
mod sink;
#[cfg(test)]
mod tests;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use config::TrainConfig;
pub use eval::{
    evaluate_policy, evaluate_with, run_baseline, run_episode, Baseline, EpisodeRun, EvalReport,
};
pub use logs::{
    coordinated_blocks, curves_to_text, emit_curves, parse_action_log, replay, trace_episodes, ActionLog,
    ActionLogWriter, CoordinatedBlock, Divergence, LogRecord, LogRow, LoggedEpisode, ReplayReport, StepTrace,
    TrainingLog, ACTION_LOG_FORMAT, ACTION_LOG_VERSION, CSV_COLUMNS,
};
pub use sink::{MemorySink, RunDirectory, TrainSink, ACTIONS_FILE, CHECKPOINT_FILE, MATRIX_FILE, TRAINING_FILE};

use crate::commgraph::{init_graph, serialize_matrix, AdjacencyMask, CommGraph, MaskMode, MaskSample};
use crate::error::{Error, Result};
use crate::netsim::{BlueAction, Env, ObservationVector};
use crate::numerics::{Adam, AdamConfig, StepOutcome, Tape, Tensor, Var};
use crate::policy::{Checkpoint, DecodeMode, Policy, PolicyBatch};
use crate::scenario::Scenario;

/// Independent random streams derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Env = 1,
    Mask = 2,
    Act = 3,
    Eval = 4,
    Init = 5,
    Graph = 6,
    Shuffle = 7,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for item `index` of a stream. Collection results therefore do not
/// depend on which worker ran an episode.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream as u64) ^ index)
}

/// One episode of experience, indexed `[step][agent]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBuffer {
    pub episode: u64,
    pub env_seed: u64,
    pub obs: Vec<Vec<ObservationVector>>,
    pub avail: Vec<Vec<Vec<bool>>>,
    pub actions: Vec<Vec<usize>>,
    pub joint: Vec<Vec<BlueAction>>,
    pub log_probs: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub mask: MaskSample,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Runs one episode, reusing the sampled mask at every step.
pub fn collect_episode(
    scenario: &Scenario,
    env_seed: u64,
    episode: u64,
    policy: &Policy,
    mask: MaskSample,
    mode: DecodeMode,
    rng: &mut impl rand::Rng,
) -> Result<RolloutBuffer> {
    let (mut env, mut obs) = Env::new(scenario, env_seed)?;
    let avail: Vec<Vec<bool>> = policy.shapes.action_counts.iter().map(|m| vec![true; *m]).collect();
    let h = scenario.horizon;
    let mut buf = RolloutBuffer {
        episode,
        env_seed,
        obs: Vec::with_capacity(h),
        avail: Vec::with_capacity(h),
        actions: Vec::with_capacity(h),
        joint: Vec::with_capacity(h),
        log_probs: Vec::with_capacity(h),
        values: Vec::with_capacity(h),
        rewards: Vec::with_capacity(h),
        dones: Vec::with_capacity(h),
        mask,
    };
    for _ in 0..h {
        let sample = policy.decode(&obs, &buf.mask.mask, Some(&avail), mode, rng)?;
        let joint = env.actions_from_indices(&sample.actions)?;
        let r = env.step(&joint)?;
        buf.obs.push(std::mem::replace(&mut obs, r.joint_obs));
        buf.avail.push(avail.clone());
        buf.actions.push(sample.actions);
        buf.joint.push(joint);
        buf.log_probs.push(sample.log_probs);
        buf.values.push(sample.values);
        buf.rewards.push(r.team_reward);
        buf.dones.push(r.done);
    }
    Ok(buf)
}

/// Advantages and return targets, indexed `[step][agent]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Returns {
    pub advantages: Vec<Vec<f64>>,
    pub returns: Vec<Vec<f64>>,
}

/// Generalized advantage estimation of the shared team reward against each
/// agent's own value. Rewards are multiplied by `reward_scale` first. The
/// value after a done step is zero.
pub fn compute_returns(buffer: &RolloutBuffer, gamma: f64, gae_lambda: f64, reward_scale: f64) -> Returns {
    let t_len = buffer.len();
    let n = buffer.values.first().map_or(0, Vec::len);
    let mut advantages = vec![vec![0.0; n]; t_len];
    let mut returns = vec![vec![0.0; n]; t_len];
    // lambda-returns: R_t = r_t + gamma * ((1 - lambda) V_{t+1} + lambda R_{t+1});
    // the advantage R_t - V_t equals the GAE sum
    for i in 0..n {
        let mut next_return = 0.0;
        let mut next_value = 0.0;
        for t in (0..t_len).rev() {
            let live = if buffer.dones[t] { 0.0 } else { 1.0 };
            let bootstrap = (1.0 - gae_lambda) * next_value + gae_lambda * next_return;
            let r = reward_scale * buffer.rewards[t] + gamma * live * bootstrap;
            returns[t][i] = r;
            advantages[t][i] = r - buffer.values[t][i];
            next_return = r;
            next_value = buffer.values[t][i];
        }
    }
    Returns { advantages, returns }
}

/// Shifts and scales to mean 0, std 1; the divisor is guarded by 1e-8.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in adv {
        *a = (*a - mean) / std;
    }
}

/// Per-row targets of a minibatch, aligned with the batch's agent rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PpoTargets {
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
    pub ratio: Var,
    pub unclipped: Var,
    pub clipped: Var,
}

/// Clipped surrogate plus weighted value error minus the entropy bonus.
pub fn ppo_loss(
    tape: &mut Tape<'_>,
    policy: &Policy,
    p: &[Var],
    batch: &PolicyBatch,
    mask: Var,
    targets: &PpoTargets,
    config: &TrainConfig,
) -> LossNodes {
    let rows = targets.old_log_probs.len();
    let column = |v: &[f64]| Tensor::matrix(rows, 1, v.to_vec());
    let f = policy.forward(tape, p, batch, mask);
    let old = tape.constant(column(&targets.old_log_probs));
    let adv = tape.constant(column(&targets.advantages));
    let ret = tape.constant(column(&targets.returns));
    let diff = tape.sub(f.log_probs, old);
    let ratio = tape.exp(diff);
    let unclipped = tape.mul(ratio, adv);
    let bounded = tape.clamp(ratio, 1.0 - config.ppo_clip, 1.0 + config.ppo_clip);
    let clipped = tape.mul(bounded, adv);
    let surrogate = tape.minimum(unclipped, clipped);
    let surrogate = tape.mean(surrogate);
    let policy_loss = tape.scale(surrogate, -1.0);
    let err = tape.sub(f.values, ret);
    let sq = tape.mul(err, err);
    let value_loss = tape.mean(sq);
    let entropy = tape.mean(f.entropies);
    let weighted_value = tape.scale(value_loss, config.value_coef);
    let bonus = tape.scale(entropy, -config.entropy_coef);
    let total = tape.add(policy_loss, weighted_value);
    let total = tape.add(total, bonus);
    LossNodes {
        total,
        policy: policy_loss,
        value: value_loss,
        entropy,
        ratio,
        unclipped,
        clipped,
    }
}

/// Mean losses over the minibatch steps of one update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub steps: usize,
    /// Minibatch steps dropped because the loss or a gradient was not finite.
    pub skipped: usize,
}

/// Trainable state: the model, its optimizer and the graph.
#[derive(Clone, Debug)]
pub struct Learner {
    pub policy: Policy,
    pub optimizer: Adam,
    pub graph: CommGraph,
}

impl Learner {
    pub fn new(scenario: &Scenario, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let policy = Policy::new(scenario, config.model, derive_seed(config.seed, Stream::Init, 0))?;
        let mut graph = init_graph(
            scenario.n_agents(),
            config.sparsity,
            derive_seed(config.seed, Stream::Graph, 0),
        )?;
        graph.set_learning_rate(config.graph_learning_rate);
        graph.temperature = config.initial_temperature;
        let optimizer = Adam::new(AdamConfig::with_learning_rate(config.learning_rate), &policy.params);
        Ok(Self {
            policy,
            optimizer,
            graph,
        })
    }
}

fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        for g in grads {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }
}

/// Epochs of shuffled minibatch steps over the buffers. Each step moves the
/// model with Adam and the graph logits through the straight-through path.
/// `config.gamma` must be set; `train` fills it from the scenario.
pub fn ppo_update(
    learner: &mut Learner,
    buffers: &[RolloutBuffer],
    config: &TrainConfig,
    rng: &mut impl rand::Rng,
) -> Result<LossReport> {
    if buffers.is_empty() || buffers.iter().any(|b| b.is_empty()) {
        return Err(Error::contract("ppo_update needs at least one full buffer"));
    }
    let gamma = config
        .gamma
        .ok_or_else(|| Error::contract("ppo_update needs the discount set in the config"))?;
    let n = learner.policy.shapes.n_agents();
    let returns: Vec<Returns> = buffers
        .iter()
        .map(|b| compute_returns(b, gamma, config.gae_lambda, config.reward_scale))
        .collect();
    let mut flat_adv: Vec<f64> = returns.iter().flat_map(|r| r.advantages.iter().flatten().copied()).collect();
    normalize_advantages(&mut flat_adv);
    let mut samples: Vec<(usize, usize)> = vec![];
    for (bi, b) in buffers.iter().enumerate() {
        samples.extend((0..b.len()).map(|t| (bi, t)));
    }
    let offsets: Vec<usize> = buffers
        .iter()
        .scan(0, |acc, b| {
            let o = *acc;
            *acc += b.len() * n;
            Some(o)
        })
        .collect();
    let mb = config.minibatches.min(samples.len());
    let mut report = LossReport::default();
    for _ in 0..config.epochs {
        samples.shuffle(rng);
        for m in 0..mb {
            let chunk = &samples[m * samples.len() / mb..(m + 1) * samples.len() / mb];
            let mut batch = PolicyBatch::with_capacity(chunk.len(), &learner.policy.shapes);
            let mut targets = PpoTargets {
                old_log_probs: Vec::with_capacity(chunk.len() * n),
                advantages: Vec::with_capacity(chunk.len() * n),
                returns: Vec::with_capacity(chunk.len() * n),
            };
            let mut masks: Vec<&AdjacencyMask> = Vec::with_capacity(chunk.len());
            for (bi, t) in chunk {
                let b = &buffers[*bi];
                batch.push(&b.obs[*t], &b.actions[*t], Some(&b.avail[*t]), &learner.policy.shapes)?;
                targets.old_log_probs.extend_from_slice(&b.log_probs[*t]);
                let o = offsets[*bi] + t * n;
                targets.advantages.extend_from_slice(&flat_adv[o..o + n]);
                targets.returns.extend_from_slice(&returns[*bi].returns[*t]);
                masks.push(&b.mask.mask);
            }
            let mut tape = Tape::new(&learner.policy.params);
            let p = learner.policy.param_vars(&mut tape);
            let mask = tape.leaf(PolicyBatch::mask_tensor(&masks));
            let loss = ppo_loss(&mut tape, &learner.policy, &p, &batch, mask, &targets, config);
            let scalars = [loss.total, loss.policy, loss.value, loss.entropy].map(|v| tape.value(v).data()[0]);
            if scalars.iter().any(|x| !x.is_finite()) {
                report.skipped += 1;
                continue;
            }
            let grads = tape.backward(loss.total)?;
            let mut pg = tape.param_gradients(&grads);
            let mg = grads.wrt(&tape, mask);
            if pg.iter().any(|g| !g.is_finite()) || !mg.is_finite() {
                report.skipped += 1;
                continue;
            }
            clip_global_norm(&mut pg, config.max_grad_norm);
            if learner.optimizer.step(&mut learner.policy.params, &pg) == StepOutcome::SkippedNonFinite {
                report.skipped += 1;
                continue;
            }
            // descend the loss: ascend its negated gradient, per episode mask
            let mut logit_grad = vec![0.0; n * n];
            for (s, (bi, _)) in chunk.iter().enumerate() {
                let g: Vec<f64> = mg.data()[s * n * n..(s + 1) * n * n].iter().map(|x| -x).collect();
                let st = learner.graph.straight_through(&buffers[*bi].mask, &g)?;
                for (a, b) in logit_grad.iter_mut().zip(st) {
                    *a += b;
                }
            }
            learner.graph.apply_logit_gradient(&logit_grad)?;
            report.policy_loss += scalars[1];
            report.value_loss += scalars[2];
            report.entropy += scalars[3];
            report.steps += 1;
        }
    }
    if report.steps > 0 {
        let k = report.steps as f64;
        report.policy_loss /= k;
        report.value_loss /= k;
        report.entropy /= k;
    }
    if !learner.policy.is_finite() || !learner.graph.logits().is_finite() {
        return Err(Error::NonFinite("parameters after update"));
    }
    Ok(report)
}

/// Totals of a finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub episodes: u64,
    pub updates: usize,
    pub steps: u64,
    pub final_eval: EvalReport,
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}


/// Runs a full training job and streams its artifacts into `sink`.
///
/// Episodes are `threads * floor(total_steps / (threads * horizon))`,
/// collected `episodes_per_update` at a time on a pool of `threads` workers.
pub fn train(scenario: &Scenario, config: &TrainConfig, sink: &mut dyn TrainSink) -> Result<TrainSummary> {
    config.validate()?;
    let scenario = config.effective_scenario(scenario);
    scenario.validate()?;
    let mut config = config.clone();
    config.gamma = Some(scenario.gamma);
    let h = scenario.horizon;
    let episodes = config.episodes_per_thread(h) * config.threads as u64;
    if episodes == 0 {
        return Err(Error::config(format!(
            "total_steps {} is below one episode per thread ({} threads x horizon {h})",
            config.total_steps, config.threads
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::config(format!("cannot start {} workers: {e}", config.threads)))?;
    let mut learner = Learner::new(&scenario, &config)?;
    let epu = config.episodes_per_update as u64;
    let updates = episodes.div_ceil(epu) as usize;
    let mut action_log = ActionLogWriter::new(&scenario, &format!("train seed={}", config.seed));
    let mut steps = 0u64;
    let mut final_eval = None;
    for u in 0..updates {
        let progress = if updates > 1 { u as f64 / (updates - 1) as f64 } else { 1.0 };
        learner.graph.temperature = config.initial_temperature
            * (config.final_temperature / config.initial_temperature).powf(progress);
        let first = u as u64 * epu;
        let last = (first + epu).min(episodes);
        let snapshot = (&learner.policy, &learner.graph);
        let buffers: Vec<RolloutBuffer> = pool.install(|| {
            (first..last)
                .into_par_iter()
                .map(|e| {
                    let (policy, graph) = snapshot;
                    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, Stream::Mask, e));
                    let mask = graph.sample_mask(MaskMode::Train, &mut mask_rng);
                    let mut act_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, Stream::Act, e));
                    collect_episode(
                        &scenario,
                        derive_seed(config.seed, Stream::Env, e),
                        e,
                        policy,
                        mask,
                        DecodeMode::Sample,
                        &mut act_rng,
                    )
                })
                .collect::<Result<Vec<_>>>()
        })?;
        steps += buffers.iter().map(|b| b.len() as u64).sum::<u64>();
        let lines: Vec<String> = buffers.iter().map(|b| serialize_matrix(b.episode, &b.mask.mask)).collect();
        sink.matrix_lines(&lines)?;
        let logging = (u + 1) % config.log_interval == 0 || u + 1 == updates;
        if logging {
            let b = &buffers[0];
            action_log.episode(b.episode, b.env_seed, &b.joint, &b.rewards);
            sink.actions(&action_log.take())?;
        }
        let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, Stream::Shuffle, u as u64));
        let losses = ppo_update(&mut learner, &buffers, &config, &mut shuffle)?;
        let totals: Vec<f64> = buffers.iter().map(RolloutBuffer::total_reward).collect();
        let (train_mean, train_std) = mean_std(&totals);
        let evaluating = (u + 1) % config.eval_interval == 0 || u + 1 == updates;
        let eval = if evaluating {
            let r = pool.install(|| {
                evaluate_with(
                    &scenario,
                    &learner.policy,
                    &learner.graph,
                    None,
                    config.eval_episodes,
                    derive_seed(config.seed, Stream::Eval, 0),
                    "train-eval",
                )
            })?;
            Some(r)
        } else {
            None
        };
        let row = LogRow {
            steps,
            train_mean,
            train_std,
            policy_loss: losses.policy_loss,
            value_loss: losses.value_loss,
            entropy: losses.entropy,
            eval_mean: eval.as_ref().map(|e| e.mean),
            eval_std: eval.as_ref().map(|e| e.std),
        };
        sink.row(&row, logging)?;
        if logging {
            let ck = Checkpoint::new(&scenario, steps, learner.policy.clone(), learner.graph.clone());
            sink.checkpoint(&ck)?;
        }
        if eval.is_some() {
            final_eval = eval;
        }
    }
    Ok(TrainSummary {
        episodes,
        updates,
        steps,
        final_eval: final_eval.expect("the last update evaluates"),
    })
}
