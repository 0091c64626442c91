use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::types::*;
use crate::error::{Error, Result};
use crate::scenario::{pad_observation, AgentSpec, Scenario, HOST_BITS};

/// What the attacker attempted this step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RedAction {
    Idle,
    ScanSubnet(SubnetId),
    ScanHost(HostId),
    Exploit(HostId),
    Escalate(HostId),
    Pivot(HostId),
    Impact(HostId),
}

impl fmt::Display for RedAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RedAction::Idle => write!(f, "Idle"),
            RedAction::ScanSubnet(s) => write!(f, "ScanSubnet({s})"),
            RedAction::ScanHost(h) => write!(f, "ScanHost({h})"),
            RedAction::Exploit(h) => write!(f, "Exploit({h})"),
            RedAction::Escalate(h) => write!(f, "Escalate({h})"),
            RedAction::Pivot(h) => write!(f, "Pivot({h})"),
            RedAction::Impact(h) => write!(f, "Impact({h})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlueRecord {
    pub agent: AgentId,
    pub action: BlueAction,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedRecord {
    pub action: RedAction,
    pub success: bool,
    /// Host on which a successful exploit left traces for monitoring.
    pub exploit_event: Option<HostId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RewardSource {
    Action { agent: AgentId },
    Compromise { host: HostId, access: Access },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardItem {
    pub source: RewardSource,
    pub amount: f64,
}

/// Everything resolved during one step, in resolution order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub blue: Vec<BlueRecord>,
    pub red: Option<RedRecord>,
    /// Monitoring draws: (host, alert raised).
    pub detections: Vec<(HostId, bool)>,
    /// Itemized reward; the entries sum exactly to the step reward.
    pub items: Vec<RewardItem>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: NetworkState,
    pub joint_obs: Vec<ObservationVector>,
    pub team_reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Checks that an action's target exists in the scenario.
pub fn check_target(scenario: &Scenario, action: BlueAction) -> Result<()> {
    match action.target() {
        ActionTarget::None => Ok(()),
        ActionTarget::Host(h) if h < scenario.n_hosts() => Ok(()),
        ActionTarget::Subnet(s) if s < scenario.subnets.len() => Ok(()),
        _ => Err(Error::contract(format!("{action} targets nothing in the network"))),
    }
}

/// Clean initial state and observations. Reset consumes no randomness;
/// the seed only matters to [`Env`], which owns the stream.
pub fn reset(scenario: &Scenario) -> Result<(NetworkState, Vec<ObservationVector>)> {
    scenario.validate().map_err(|e| Error::config(e.to_string()))?;
    let mut hosts = Vec::with_capacity(scenario.n_hosts());
    for h in 0..scenario.n_hosts() {
        hosts.push(HostState {
            host_id: h,
            subnet_id: scenario.subnet_of(h).expect("validated"),
            is_op_server: h == scenario.op_server,
            red_access: Access::None,
            event_flags: EventFlags::default(),
            known_compromise: KnownCompromise::Unknown,
            peak_access: Access::None,
        });
    }
    let state = NetworkState {
        hosts,
        subnets: scenario
            .subnets
            .iter()
            .map(|s| SubnetState {
                subnet_id: s.id,
                blocked: false,
            })
            .collect(),
        red: RedState {
            stage: RedStage::ScanSubnet,
            target_host: None,
            current_subnet: scenario.red_entry_subnet,
            retry_count: 0,
        },
        step: 0,
        done: false,
    };
    let obs = observe_all(scenario, &state);
    Ok((state, obs))
}

/// Applies one defender action, returning its cost.
pub fn apply_blue(
    scenario: &Scenario,
    state: &mut NetworkState,
    agent: AgentId,
    action: BlueAction,
) -> Result<f64> {
    let spec = scenario
        .agents
        .get(agent)
        .ok_or_else(|| Error::contract(format!("no agent {agent}")))?;
    if !spec.action_space.contains(&action) {
        return Err(Error::contract(format!(
            "{action} is not in the action space of agent {}",
            spec.name
        )));
    }
    check_target(scenario, action)?;
    let r = &scenario.rewards;
    let cost = match action {
        BlueAction::Sleep | BlueAction::Monitor => 0.0,
        BlueAction::Analyse(h) => {
            let host = &mut state.hosts[h];
            host.known_compromise = KnownCompromise::from_access(host.red_access);
            if host.red_access == Access::None {
                r.analyse_unnecessary_cost
            } else {
                0.0
            }
        }
        BlueAction::Remove(h) => {
            let host = &mut state.hosts[h];
            if host.red_access == Access::User {
                host.red_access = Access::None;
            }
            0.0
        }
        BlueAction::Restore(h) => {
            let host = &mut state.hosts[h];
            host.red_access = Access::None;
            host.peak_access = Access::None;
            host.event_flags = EventFlags::default();
            host.known_compromise = KnownCompromise::Clean;
            if host.is_op_server {
                r.restore_opserver_cost
            } else {
                r.restore_cost
            }
        }
        BlueAction::Block(s) => {
            let justified = state.red_holds_foothold_in(s);
            state.subnets[s].blocked = true;
            if justified {
                r.block_cost + r.block_justified_discount
            } else {
                r.block_cost
            }
        }
        BlueAction::Unblock(s) => {
            state.subnets[s].blocked = false;
            0.0
        }
    };
    Ok(cost)
}

fn next_target(scenario: &Scenario, after: HostId) -> HostId {
    let order = scenario.red_targets();
    let pos = order.iter().position(|h| *h == after).unwrap_or(0);
    order[(pos + 1).min(order.len() - 1)]
}

/// Advances the attacker's stage machine by one action.
///
/// Moves inside the entry subnet are never blocked; Pivot and Impact cross
/// from the entry subnet into the OpServer's subnet and fail while either
/// side is blocked.
pub fn red_step(scenario: &Scenario, state: &mut NetworkState, rng: &mut impl Rng) -> RedRecord {
    if !scenario.red_active {
        return RedRecord {
            action: RedAction::Idle,
            success: false,
            exploit_event: None,
        };
    }
    let entry = scenario.red_entry_subnet;
    let op_subnet = scenario.op_subnet();
    let pivot = scenario.pivot_host;
    let red = &mut state.red;
    let target = red.target_host.unwrap_or(pivot);
    let crossing_open = !state.subnets[entry].blocked && !state.subnets[op_subnet].blocked;

    let fail = |red: &mut RedState, action| {
        red.retry_count += 1;
        RedRecord {
            action,
            success: false,
            exploit_event: None,
        }
    };
    let done = |red: &mut RedState, action, exploit_event| {
        red.retry_count = 0;
        RedRecord {
            action,
            success: true,
            exploit_event,
        }
    };

    match red.stage {
        RedStage::ScanSubnet => {
            red.stage = RedStage::ScanHost;
            red.target_host = Some(scenario.red_targets()[0]);
            done(red, RedAction::ScanSubnet(entry), None)
        }
        RedStage::ScanHost => {
            state.hosts[target].event_flags.scan_seen = true;
            red.stage = RedStage::Exploit;
            done(red, RedAction::ScanHost(target), None)
        }
        RedStage::Exploit => {
            let ok = scenario.exploit_success >= 1.0 || rng.random::<f64>() < scenario.exploit_success;
            if !ok {
                return fail(red, RedAction::Exploit(target));
            }
            let host = &mut state.hosts[target];
            host.grant(host.red_access.max(Access::User));
            red.stage = RedStage::Escalate;
            red.current_subnet = entry;
            done(red, RedAction::Exploit(target), Some(target))
        }
        RedStage::Escalate => {
            if state.hosts[target].red_access == Access::None {
                red.stage = RedStage::Exploit;
                return fail(red, RedAction::Escalate(target));
            }
            state.hosts[target].grant(Access::Privileged);
            if target == pivot {
                red.stage = RedStage::Pivot;
            } else {
                red.stage = RedStage::ScanHost;
                red.target_host = Some(next_target(scenario, target));
            }
            done(red, RedAction::Escalate(target), None)
        }
        RedStage::Pivot | RedStage::Impact => {
            let action = if red.stage == RedStage::Pivot {
                RedAction::Pivot(pivot)
            } else {
                RedAction::Impact(scenario.op_server)
            };
            match state.hosts[pivot].red_access {
                Access::Privileged => {}
                lost => {
                    red.stage = if lost == Access::User {
                        RedStage::Escalate
                    } else {
                        RedStage::Exploit
                    };
                    red.target_host = Some(pivot);
                    red.current_subnet = entry;
                    return fail(red, action);
                }
            }
            if !crossing_open {
                return fail(red, action);
            }
            if red.stage == RedStage::Pivot {
                state.hosts[scenario.op_server].event_flags.scan_seen = true;
                red.stage = RedStage::Impact;
                red.target_host = Some(scenario.op_server);
                red.current_subnet = op_subnet;
                done(red, action, None)
            } else {
                let op = &mut state.hosts[scenario.op_server];
                let changed = op.red_access != Access::Privileged;
                op.grant(Access::Privileged);
                red.current_subnet = op_subnet;
                done(red, action, changed.then_some(scenario.op_server))
            }
        }
    }
}

fn detect(scenario: &Scenario, state: &mut NetworkState, host: HostId, rng: &mut impl Rng) -> bool {
    let alerted = rng.random::<f64>() < scenario.detection_rate;
    if alerted {
        let h = &mut state.hosts[host];
        h.event_flags.exploit_alert = true;
        let seen = KnownCompromise::from_access(h.red_access);
        let upgraded = match (h.known_compromise, seen) {
            (KnownCompromise::Privileged, _) => KnownCompromise::Privileged,
            (_, KnownCompromise::Privileged) => KnownCompromise::Privileged,
            _ => KnownCompromise::User,
        };
        h.known_compromise = upgraded;
    }
    alerted
}

/// Reward for a resolved step: action costs in agent order, then
/// compromise penalties in host order.
pub fn compute_reward(scenario: &Scenario, next_state: &NetworkState, blue: &[BlueRecord]) -> (f64, Vec<RewardItem>) {
    let r = &scenario.rewards;
    let mut items: Vec<RewardItem> = blue
        .iter()
        .filter(|b| b.cost != 0.0)
        .map(|b| RewardItem {
            source: RewardSource::Action { agent: b.agent },
            amount: b.cost,
        })
        .collect();
    for h in &next_state.hosts {
        let amount = match (h.red_access, h.is_op_server) {
            (Access::None, _) => continue,
            (Access::User, _) => r.host_user,
            (Access::Privileged, true) => r.opserver_privileged,
            (Access::Privileged, false) => r.host_privileged,
        };
        items.push(RewardItem {
            source: RewardSource::Compromise {
                host: h.host_id,
                access: h.red_access,
            },
            amount,
        });
    }
    let total = items.iter().fold(0.0, |acc, i| acc + i.amount);
    (total, items)
}

/// The agent's raw observation bits, zero-padded to the scenario length.
pub fn observe(state: &NetworkState, spec: &AgentSpec) -> ObservationVector {
    let mut raw = Vec::with_capacity(spec.raw_obs_len);
    for h in &spec.visible_hosts {
        let host = &state.hosts[*h];
        raw.push(host.event_flags.scan_seen as u8);
        raw.push(host.event_flags.exploit_alert as u8);
        raw.push((host.known_compromise == KnownCompromise::User) as u8);
        raw.push((host.known_compromise == KnownCompromise::Privileged) as u8);
    }
    debug_assert_eq!(raw.len(), HOST_BITS * spec.visible_hosts.len());
    for s in &spec.visible_subnets {
        raw.push(state.subnets[*s].blocked as u8);
    }
    pad_observation(&raw, spec.padded_obs_len).expect("validated lengths")
}

fn observe_all(scenario: &Scenario, state: &NetworkState) -> Vec<ObservationVector> {
    scenario.agents.iter().map(|a| observe(state, a)).collect()
}

/// Resolves one step: blue actions in agent order, the red action,
/// monitoring, the reward, then the step counter.
pub fn step(
    scenario: &Scenario,
    state: &NetworkState,
    joint_action: &[BlueAction],
    rng: &mut impl Rng,
) -> Result<StepResult> {
    if state.done {
        return Err(Error::contract("step called on a finished episode"));
    }
    if joint_action.len() != scenario.n_agents() {
        return Err(Error::contract(format!(
            "joint action has {} entries for {} agents",
            joint_action.len(),
            scenario.n_agents()
        )));
    }
    let mut next = state.clone();
    let mut info = StepInfo::default();
    for (agent, action) in joint_action.iter().enumerate() {
        let cost = apply_blue(scenario, &mut next, agent, *action)?;
        info.blue.push(BlueRecord {
            agent,
            action: *action,
            cost,
        });
    }
    let red = red_step(scenario, &mut next, rng);
    if let Some(h) = red.exploit_event {
        let alerted = detect(scenario, &mut next, h, rng);
        info.detections.push((h, alerted));
    }
    info.red = Some(red);
    let (team_reward, items) = compute_reward(scenario, &next, &info.blue);
    info.items = items;
    next.step += 1;
    next.done = next.step >= scenario.horizon;
    let joint_obs = observe_all(scenario, &next);
    Ok(StepResult {
        done: next.done,
        next_state: next,
        joint_obs,
        team_reward,
        info,
    })
}

/// A scenario, its current state and the seeded random stream driving it.
#[derive(Clone, Debug)]
pub struct Env {
    scenario: Scenario,
    state: NetworkState,
    rng: ChaCha8Rng,
}

impl Env {
    pub fn new(scenario: &Scenario, seed: u64) -> Result<(Self, Vec<ObservationVector>)> {
        let (state, obs) = reset(scenario)?;
        Ok((
            Self {
                scenario: scenario.clone(),
                state,
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
            obs,
        ))
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn state(&self) -> &NetworkState {
        &self.state
    }

    pub fn step(&mut self, joint_action: &[BlueAction]) -> Result<StepResult> {
        let result = step(&self.scenario, &self.state, joint_action, &mut self.rng)?;
        self.state = result.next_state.clone();
        Ok(result)
    }

    /// Steps with per-agent indices into each agent's action space.
    pub fn step_indices(&mut self, actions: &[usize]) -> Result<StepResult> {
        let joint = self.actions_from_indices(actions)?;
        self.step(&joint)
    }

    pub fn actions_from_indices(&self, actions: &[usize]) -> Result<Vec<BlueAction>> {
        if actions.len() != self.scenario.n_agents() {
            return Err(Error::contract(format!(
                "{} action indices for {} agents",
                actions.len(),
                self.scenario.n_agents()
            )));
        }
        actions
            .iter()
            .zip(&self.scenario.agents)
            .map(|(i, spec)| {
                spec.action_space.get(*i).copied().ok_or_else(|| {
                    Error::contract(format!("action index {i} out of range for agent {}", spec.name))
                })
            })
            .collect()
    }
}
