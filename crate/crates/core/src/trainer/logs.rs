//! Training CSV, action logs, replay and curve emission.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::{BlueAction, Env, NetworkState, StepInfo, SubnetId};
use crate::scenario::{load_scenario, to_config_text, Scenario};

pub const ACTION_LOG_FORMAT: &str = "commdef-actions";
pub const ACTION_LOG_VERSION: u32 = 1;

/// One row of the training CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub steps: u64,
    pub train_mean: f64,
    pub train_std: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub eval_mean: Option<f64>,
    pub eval_std: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(vec![]);
        for r in &self.rows {
            w.serialize(r).expect("rows serialize");
        }
        if self.rows.is_empty() {
            w.write_record(CSV_COLUMNS).expect("header writes");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers = r.headers().map_err(csv_error)?.clone();
        if headers.iter().ne(CSV_COLUMNS) {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected columns {}", CSV_COLUMNS.join(",")),
            });
        }
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<LogRow>, _>>()
            .map_err(csv_error)?;
        Ok(Self { rows })
    }
}

pub const CSV_COLUMNS: [&str; 8] = [
    "steps",
    "train_mean",
    "train_std",
    "policy_loss",
    "value_loss",
    "entropy",
    "eval_mean",
    "eval_std",
];

fn csv_error(e: csv::Error) -> Error {
    Error::Parse {
        line: e.position().map_or(0, |p| p.line() as usize),
        message: e.to_string(),
    }
}

/// Window means of every metric against the step column.
///
/// Rows are grouped into consecutive windows of `window` rows; each output
/// point is (mean steps, mean metric) over the rows of the window that have
/// a value for that metric.
pub fn emit_curves(log: &TrainingLog, window: usize) -> Result<BTreeMap<&'static str, Vec<(f64, f64)>>> {
    if window == 0 {
        return Err(Error::config("window width must be at least 1"));
    }
    let metrics: [(&str, fn(&LogRow) -> Option<f64>); 7] = [
        ("train_mean", |r| Some(r.train_mean)),
        ("train_std", |r| Some(r.train_std)),
        ("policy_loss", |r| Some(r.policy_loss)),
        ("value_loss", |r| Some(r.value_loss)),
        ("entropy", |r| Some(r.entropy)),
        ("eval_mean", |r| r.eval_mean),
        ("eval_std", |r| r.eval_std),
    ];
    let mut out = BTreeMap::new();
    for (name, get) in metrics {
        let mut series = vec![];
        for chunk in log.rows.chunks(window) {
            let pts: Vec<(f64, f64)> = chunk
                .iter()
                .filter_map(|r| get(r).map(|v| (r.steps as f64, v)))
                .collect();
            if pts.is_empty() {
                continue;
            }
            let k = pts.len() as f64;
            let xs = pts.iter().map(|p| p.0).sum::<f64>() / k;
            let ys = pts.iter().map(|p| p.1).sum::<f64>() / k;
            series.push((xs, ys));
        }
        out.insert(name, series);
    }
    Ok(out)
}

/// Renders curves as `metric,steps,value` lines.
pub fn curves_to_text(curves: &BTreeMap<&'static str, Vec<(f64, f64)>>) -> String {
    let mut s = String::from("metric,steps,value\n");
    for (name, pts) in curves {
        for (x, y) in pts {
            s.push_str(&format!("{name},{x},{y}\n"));
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LogRecord {
    Header {
        format: String,
        version: u32,
        source: String,
        scenario: String,
    },
    Episode {
        episode: u64,
        seed: u64,
    },
    Step {
        episode: u64,
        step: usize,
        agent: usize,
        action: BlueAction,
        target: Option<usize>,
        reward: f64,
    },
}

/// Builds a line-delimited action log.
#[derive(Clone, Debug, Default)]
pub struct ActionLogWriter {
    text: String,
}

impl ActionLogWriter {
    pub fn new(scenario: &Scenario, source: &str) -> Self {
        let mut w = Self::default();
        w.push(&LogRecord::Header {
            format: ACTION_LOG_FORMAT.into(),
            version: ACTION_LOG_VERSION,
            source: source.into(),
            scenario: to_config_text(scenario),
        });
        w
    }

    fn push(&mut self, r: &LogRecord) {
        self.text.push_str(&serde_json::to_string(r).expect("records serialize"));
        self.text.push('\n');
    }

    pub fn episode(&mut self, episode: u64, seed: u64, joint: &[Vec<BlueAction>], rewards: &[f64]) {
        self.push(&LogRecord::Episode { episode, seed });
        for (t, (actions, reward)) in joint.iter().zip(rewards).enumerate() {
            for (agent, a) in actions.iter().enumerate() {
                self.push(&LogRecord::Step {
                    episode,
                    step: t,
                    agent,
                    action: *a,
                    target: a.target_id(),
                    reward: *reward,
                });
            }
        }
    }

    /// Log text accumulated since the last call.
    pub fn take(&mut self) -> String {
        std::mem::take(&mut self.text)
    }
}

/// A logged episode as read back from an action log.
#[derive(Clone, Debug, PartialEq)]
pub struct LoggedEpisode {
    pub episode: u64,
    pub seed: u64,
    pub joint: Vec<Vec<BlueAction>>,
    pub rewards: Vec<f64>,
    /// Line of the first record of each step.
    pub lines: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionLog {
    pub source: String,
    pub scenario: Scenario,
    pub episodes: Vec<LoggedEpisode>,
}

pub fn parse_action_log(text: &str) -> Result<ActionLog> {
    let err = |line: usize, message: String| Error::Parse { line, message };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty());
    let (hl, first) = lines.next().ok_or_else(|| err(1, "empty action log".into()))?;
    let header: LogRecord = serde_json::from_str(first).map_err(|e| err(hl, e.to_string()))?;
    let LogRecord::Header {
        format,
        version,
        source,
        scenario,
    } = header
    else {
        return Err(err(hl, "first record must be the header".into()));
    };
    if format != ACTION_LOG_FORMAT || version != ACTION_LOG_VERSION {
        return Err(err(hl, format!("unsupported log {format} v{version}")));
    }
    let scenario = load_scenario(&scenario)?;
    let n = scenario.n_agents();
    let h = scenario.horizon;
    let mut episodes: Vec<LoggedEpisode> = vec![];
    let mut last_line = hl;
    for (ln, line) in lines {
        last_line = ln;
        let rec: LogRecord = serde_json::from_str(line).map_err(|e| err(ln, e.to_string()))?;
        match rec {
            LogRecord::Header { .. } => return Err(err(ln, "second header".into())),
            LogRecord::Episode { episode, seed } => {
                if let Some(prev) = episodes.last() {
                    check_complete(prev, n, h, ln)?;
                }
                episodes.push(LoggedEpisode {
                    episode,
                    seed,
                    joint: vec![],
                    rewards: vec![],
                    lines: vec![],
                });
            }
            LogRecord::Step {
                episode,
                step,
                agent,
                action,
                target,
                reward,
            } => {
                let ep = episodes
                    .last_mut()
                    .filter(|e| e.episode == episode)
                    .ok_or_else(|| err(ln, format!("step record outside episode {episode}")))?;
                if target != action.target_id() {
                    return Err(err(ln, format!("target {target:?} does not match {action}")));
                }
                if agent == 0 {
                    if step != ep.joint.len() || step >= h {
                        return Err(err(ln, format!("unexpected step {step}")));
                    }
                    ep.joint.push(vec![]);
                    ep.rewards.push(reward);
                    ep.lines.push(ln);
                } else if step + 1 != ep.joint.len() || ep.rewards[step].to_bits() != reward.to_bits() {
                    return Err(err(ln, format!("agent {agent} record disagrees with its step")));
                }
                let acts = ep.joint.last_mut().expect("step started");
                if agent != acts.len() || agent >= n {
                    return Err(err(ln, format!("unexpected agent {agent}")));
                }
                acts.push(action);
            }
        }
    }
    if let Some(prev) = episodes.last() {
        check_complete(prev, n, h, last_line + 1)?;
    }
    Ok(ActionLog {
        source,
        scenario,
        episodes,
    })
}

fn check_complete(ep: &LoggedEpisode, n: usize, h: usize, line: usize) -> Result<()> {
    if ep.joint.len() != h || ep.joint.iter().any(|j| j.len() != n) {
        return Err(Error::Parse {
            line,
            message: format!("episode {} is truncated", ep.episode),
        });
    }
    Ok(())
}

/// First logged reward that re-execution does not reproduce.
#[derive(Clone, Debug, PartialEq)]
pub struct Divergence {
    pub episode: u64,
    pub step: usize,
    pub line: usize,
    pub logged: f64,
    pub replayed: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayReport {
    pub episodes: usize,
    pub steps: usize,
    pub divergence: Option<Divergence>,
}

/// One re-executed step: the state it started from and what happened.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub before: NetworkState,
    pub joint: Vec<BlueAction>,
    pub info: StepInfo,
    pub reward: f64,
}

fn rerun(scenario: &Scenario, ep: &LoggedEpisode) -> Result<Vec<StepTrace>> {
    let (mut env, _) = Env::new(scenario, ep.seed)?;
    let mut out = Vec::with_capacity(ep.joint.len());
    for joint in &ep.joint {
        let before = env.state().clone();
        let r = env.step(joint)?;
        out.push(StepTrace {
            before,
            joint: joint.clone(),
            info: r.info,
            reward: r.team_reward,
        });
    }
    Ok(out)
}

/// Re-executes every logged episode and compares rewards bit for bit.
pub fn replay(log: &ActionLog) -> Result<ReplayReport> {
    let mut steps = 0;
    for ep in &log.episodes {
        for (t, tr) in rerun(&log.scenario, ep)?.iter().enumerate() {
            steps += 1;
            if tr.reward.to_bits() != ep.rewards[t].to_bits() {
                return Ok(ReplayReport {
                    episodes: log.episodes.len(),
                    steps,
                    divergence: Some(Divergence {
                        episode: ep.episode,
                        step: t,
                        line: ep.lines[t],
                        logged: ep.rewards[t],
                        replayed: tr.reward,
                    }),
                });
            }
        }
    }
    Ok(ReplayReport {
        episodes: log.episodes.len(),
        steps,
        divergence: None,
    })
}

pub fn trace_episodes(log: &ActionLog) -> Result<Vec<(u64, Vec<StepTrace>)>> {
    log.episodes
        .iter()
        .map(|ep| Ok((ep.episode, rerun(&log.scenario, ep)?)))
        .collect()
}

/// A Block by a firewall agent on the subnet red occupied, shortly after the
/// first alert seen by a host-watching agent.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinatedBlock {
    pub episode: u64,
    pub detection_step: usize,
    pub block_step: usize,
    pub subnet: SubnetId,
}

/// For each episode, the first detection `d` on a host watched by an agent
/// that sees hosts, and the first Block at step `b` with `d < b <= d + window`
/// issued by an agent that sees no hosts, on red's current subnet.
pub fn coordinated_blocks(log: &ActionLog, window: usize) -> Result<Vec<CoordinatedBlock>> {
    let s = &log.scenario;
    let watched: Vec<bool> = (0..s.n_hosts())
        .map(|h| s.agents.iter().any(|a| a.visible_hosts.contains(&h)))
        .collect();
    let firewalls: Vec<usize> = s
        .agents
        .iter()
        .filter(|a| a.visible_hosts.is_empty())
        .map(|a| a.agent_id)
        .collect();
    let mut found = vec![];
    for (episode, trace) in trace_episodes(log)? {
        let Some(d) = trace
            .iter()
            .position(|t| t.info.detections.iter().any(|(h, alerted)| *alerted && watched[*h]))
        else {
            continue;
        };
        let hit = trace.iter().enumerate().skip(d + 1).take(window).find_map(|(b, t)| {
            let red_subnet = t.before.red.current_subnet;
            firewalls
                .iter()
                .any(|fw| t.joint[*fw] == BlueAction::Block(red_subnet))
                .then_some((b, red_subnet))
        });
        if let Some((block_step, subnet)) = hit {
            found.push(CoordinatedBlock {
                episode,
                detection_step: d,
                block_step,
                subnet,
            });
        }
    }
    Ok(found)
}
