//! Game definitions: topology, defender capabilities, reward constants,
//! horizon and discount.
//!
//! Four scenarios are built in. `homogeneous`, `heterogeneous` and
//! `host_based` share one six-host, two-subnet network and differ in how
//! the defence is split between agents; `micro` is a two-host network with
//! a four-step horizon, small enough for exhaustive search.

mod config;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{load_scenario, to_config_text, CONFIG_VERSION};

use crate::error::{Error, Result};
use crate::netsim::{AgentId, BlueAction, HostId, ObservationVector, RewardTable, SubnetId};

/// Bits per visible host: scan_seen, exploit_alert, known_user, known_privileged.
pub const HOST_BITS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubnetSpec {
    pub id: SubnetId,
    pub hosts: Vec<HostId>,
}

/// One defender's capabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub agent_id: AgentId,
    pub name: String,
    pub visible_hosts: Vec<HostId>,
    pub visible_subnets: Vec<SubnetId>,
    pub action_space: Vec<BlueAction>,
    pub raw_obs_len: usize,
    pub padded_obs_len: usize,
}

impl AgentSpec {
    /// Agents with the same shape share an observation embedding.
    pub fn shape(&self) -> (usize, usize) {
        (self.raw_obs_len, self.action_space.len())
    }

    pub fn action_index(&self, action: BlueAction) -> Option<usize> {
        self.action_space.iter().position(|a| *a == action)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub subnets: Vec<SubnetSpec>,
    pub op_server: HostId,
    /// Entry-subnet host from which red crosses into the OpServer's subnet.
    pub pivot_host: HostId,
    pub red_entry_subnet: SubnetId,
    /// Probability that a red exploit succeeds.
    pub exploit_success: f64,
    /// Probability that automatic monitoring flags a successful exploit.
    pub detection_rate: f64,
    pub red_active: bool,
    pub agents: Vec<AgentSpec>,
    pub rewards: RewardTable,
    pub horizon: usize,
    pub gamma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Homogeneous,
    Heterogeneous,
    HostBased,
    Micro,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::Homogeneous,
        ScenarioKind::Heterogeneous,
        ScenarioKind::HostBased,
        ScenarioKind::Micro,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Homogeneous => "homogeneous",
            ScenarioKind::Heterogeneous => "heterogeneous",
            ScenarioKind::HostBased => "host_based",
            ScenarioKind::Micro => "micro",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == s || k.name().replace('_', "-") == s)
            .ok_or_else(|| {
                let names: Vec<_> = ScenarioKind::ALL.iter().map(|k| k.name()).collect();
                Error::config(format!(
                    "unknown scenario {s:?}; built-ins are {}",
                    names.join(", ")
                ))
            })
    }
}

pub(crate) struct AgentDraft {
    pub name: String,
    pub visible_hosts: Vec<HostId>,
    pub visible_subnets: Vec<SubnetId>,
    pub action_space: Vec<BlueAction>,
}

fn subnet_agent(name: &str, subnet: &SubnetSpec, block: bool) -> AgentDraft {
    let mut actions = vec![BlueAction::Sleep, BlueAction::Monitor];
    actions.extend(subnet.hosts.iter().map(|h| BlueAction::Analyse(*h)));
    actions.extend(subnet.hosts.iter().map(|h| BlueAction::Remove(*h)));
    actions.extend(subnet.hosts.iter().map(|h| BlueAction::Restore(*h)));
    if block {
        actions.push(BlueAction::Block(subnet.id));
        actions.push(BlueAction::Unblock(subnet.id));
    }
    AgentDraft {
        name: name.to_string(),
        visible_hosts: subnet.hosts.clone(),
        visible_subnets: vec![subnet.id],
        action_space: actions,
    }
}

fn firewall_agent(subnets: &[SubnetSpec]) -> AgentDraft {
    let mut actions = vec![BlueAction::Sleep];
    actions.extend(subnets.iter().map(|s| BlueAction::Block(s.id)));
    actions.extend(subnets.iter().map(|s| BlueAction::Unblock(s.id)));
    AgentDraft {
        name: "BlueFW".to_string(),
        visible_hosts: vec![],
        visible_subnets: subnets.iter().map(|s| s.id).collect(),
        action_space: actions,
    }
}

fn host_agent(host: HostId, subnet: SubnetId) -> AgentDraft {
    let _ = subnet;
    AgentDraft {
        name: format!("Host{host}"),
        visible_hosts: vec![host],
        visible_subnets: vec![],
        action_space: vec![
            BlueAction::Sleep,
            BlueAction::Analyse(host),
            BlueAction::Remove(host),
            BlueAction::Restore(host),
        ],
    }
}

/// Builds one of the built-in scenarios.
pub fn build_scenario(kind: ScenarioKind) -> Scenario {
    let six_hosts = vec![
        SubnetSpec {
            id: 0,
            hosts: vec![0, 1, 2],
        },
        SubnetSpec {
            id: 1,
            hosts: vec![3, 4, 5],
        },
    ];
    let mut rewards = RewardTable::default();
    let (subnets, op_server, pivot_host, horizon, drafts) = match kind {
        ScenarioKind::Homogeneous => {
            let agents = vec![
                subnet_agent("Blue0", &six_hosts[0], true),
                subnet_agent("Blue1", &six_hosts[1], true),
            ];
            (six_hosts, 5, 2, 50, agents)
        }
        ScenarioKind::Heterogeneous => {
            let agents = vec![
                subnet_agent("Blue0", &six_hosts[0], false),
                subnet_agent("Blue1", &six_hosts[1], false),
                firewall_agent(&six_hosts),
            ];
            (six_hosts, 5, 2, 50, agents)
        }
        ScenarioKind::HostBased => {
            rewards.analyse_unnecessary_cost = -0.5;
            let mut agents: Vec<AgentDraft> = six_hosts
                .iter()
                .flat_map(|s| s.hosts.iter().map(move |h| host_agent(*h, s.id)))
                .collect();
            agents.push(firewall_agent(&six_hosts));
            (six_hosts, 5, 2, 50, agents)
        }
        ScenarioKind::Micro => {
            let subnets = vec![
                SubnetSpec {
                    id: 0,
                    hosts: vec![0],
                },
                SubnetSpec {
                    id: 1,
                    hosts: vec![1],
                },
            ];
            let agents = vec![
                subnet_agent("Blue0", &subnets[0], true),
                subnet_agent("Blue1", &subnets[1], true),
            ];
            (subnets, 1, 0, 4, agents)
        }
    };
    assemble(
        kind.name().to_string(),
        subnets,
        op_server,
        pivot_host,
        0,
        drafts,
        rewards,
        horizon,
        0.99,
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn assemble(
    name: String,
    subnets: Vec<SubnetSpec>,
    op_server: HostId,
    pivot_host: HostId,
    red_entry_subnet: SubnetId,
    drafts: Vec<AgentDraft>,
    rewards: RewardTable,
    horizon: usize,
    gamma: f64,
) -> Scenario {
    let raw: Vec<usize> = drafts
        .iter()
        .map(|d| HOST_BITS * d.visible_hosts.len() + d.visible_subnets.len())
        .collect();
    let padded = raw.iter().copied().max().unwrap_or(0);
    let agents = drafts
        .into_iter()
        .zip(raw)
        .enumerate()
        .map(|(agent_id, (d, raw_obs_len))| AgentSpec {
            agent_id,
            name: d.name,
            visible_hosts: d.visible_hosts,
            visible_subnets: d.visible_subnets,
            action_space: d.action_space,
            raw_obs_len,
            padded_obs_len: padded,
        })
        .collect();
    Scenario {
        name,
        subnets,
        op_server,
        pivot_host,
        red_entry_subnet,
        exploit_success: 1.0,
        detection_rate: 0.5,
        red_active: true,
        agents,
        rewards,
        horizon,
        gamma,
    }
}

impl Scenario {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn n_hosts(&self) -> usize {
        self.subnets.iter().map(|s| s.hosts.len()).sum()
    }

    pub fn obs_len(&self) -> usize {
        self.agents.first().map(|a| a.padded_obs_len).unwrap_or(0)
    }

    pub fn action_space_sizes(&self) -> Vec<usize> {
        self.agents.iter().map(|a| a.action_space.len()).collect()
    }

    pub fn subnet_of(&self, host: HostId) -> Option<SubnetId> {
        self.subnets
            .iter()
            .find(|s| s.hosts.contains(&host))
            .map(|s| s.id)
    }

    /// Subnet holding the OpServer.
    pub fn op_subnet(&self) -> SubnetId {
        self.subnet_of(self.op_server).expect("validated scenario")
    }

    /// Entry-subnet hosts in the order red attacks them: ascending ids,
    /// with the pivot host last.
    pub fn red_targets(&self) -> Vec<HostId> {
        let entry = &self.subnets[self.red_entry_subnet];
        let mut order: Vec<HostId> = entry
            .hosts
            .iter()
            .copied()
            .filter(|h| *h != self.pivot_host)
            .collect();
        order.sort_unstable();
        order.push(self.pivot_host);
        order
    }

    /// A stable identity of the full game definition.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(to_config_text(self).as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks every scenario invariant, naming the first one that fails.
    pub fn validate(&self) -> Result<()> {
        let fail = |rule: &'static str, detail: String| Err(Error::Validation { rule, detail });

        for (i, s) in self.subnets.iter().enumerate() {
            if s.id != i {
                return fail("subnet-ids-dense", format!("subnet at position {i} has id {}", s.id));
            }
        }
        let mut seen = BTreeSet::new();
        for s in &self.subnets {
            for h in &s.hosts {
                if !seen.insert(*h) {
                    return fail(
                        "host-in-one-subnet",
                        format!("host {h} is listed in more than one subnet"),
                    );
                }
            }
        }
        let n_hosts = seen.len();
        if n_hosts == 0 {
            return fail("hosts-present", "the network has no hosts".into());
        }
        if seen.iter().copied().ne(0..n_hosts) {
            return fail("host-ids-dense", format!("host ids must be 0..{n_hosts}"));
        }
        if self.op_server >= n_hosts {
            return fail("op-server-exists", format!("op_server {} is not a host", self.op_server));
        }
        if self.red_entry_subnet >= self.subnets.len() {
            return fail(
                "entry-subnet-exists",
                format!("red_entry_subnet {} is not a subnet", self.red_entry_subnet),
            );
        }
        if self.subnet_of(self.pivot_host) != Some(self.red_entry_subnet) {
            return fail(
                "pivot-in-entry-subnet",
                format!("pivot_host {} is not in the entry subnet", self.pivot_host),
            );
        }
        if self.subnet_of(self.op_server) == Some(self.red_entry_subnet) {
            return fail(
                "op-server-outside-entry-subnet",
                "the OpServer must sit behind the entry subnet".into(),
            );
        }
        if self.horizon == 0 {
            return fail("horizon-positive", "horizon must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail("gamma-range", format!("gamma {} is outside (0, 1]", self.gamma));
        }
        for (name, p) in [
            ("exploit_success", self.exploit_success),
            ("detection_rate", self.detection_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail("probability-range", format!("{name} = {p} is outside [0, 1]"));
            }
        }
        for (name, v) in self.rewards.entries() {
            if !v.is_finite() {
                return fail("reward-finite", format!("{name} = {v}"));
            }
            let signed_ok = if name == "block_justified_discount" { v >= 0.0 } else { v <= 0.0 };
            if !signed_ok {
                return fail("reward-sign", format!("{name} = {v} has the wrong sign"));
            }
            if v < self.rewards.opserver_privileged {
                return fail(
                    "opserver-most-negative",
                    format!("{name} = {v} is below opserver_privileged"),
                );
            }
        }
        if self.agents.is_empty() {
            return fail("agents-present", "at least one agent is required".into());
        }
        let padded = self.agents.iter().map(|a| a.raw_obs_len).max().unwrap_or(0);
        let mut visible = BTreeSet::new();
        for (i, a) in self.agents.iter().enumerate() {
            if a.agent_id != i {
                return fail("agent-ids-ordered", format!("agent {} sits at position {i}", a.name));
            }
            if a.action_space.is_empty() {
                return fail("action-space-non-empty", format!("agent {} has no actions", a.name));
            }
            let mut distinct = BTreeSet::new();
            for act in &a.action_space {
                if !distinct.insert(*act) {
                    return fail("action-unique", format!("agent {} lists {act} twice", a.name));
                }
                if let Err(e) = crate::netsim::check_target(self, *act) {
                    return fail("action-target-exists", format!("agent {}: {e}", a.name));
                }
            }
            for h in &a.visible_hosts {
                if *h >= n_hosts {
                    return fail("visible-host-exists", format!("agent {} sees host {h}", a.name));
                }
                visible.insert(*h);
            }
            for s in &a.visible_subnets {
                if *s >= self.subnets.len() {
                    return fail("visible-subnet-exists", format!("agent {} sees subnet {s}", a.name));
                }
            }
            let raw = HOST_BITS * a.visible_hosts.len() + a.visible_subnets.len();
            if a.raw_obs_len != raw {
                return fail(
                    "raw-obs-len",
                    format!("agent {} declares {} bits, layout has {raw}", a.name, a.raw_obs_len),
                );
            }
            if a.padded_obs_len != padded {
                return fail(
                    "padded-obs-len",
                    format!("agent {} pads to {}, scenario maximum is {padded}", a.name, a.padded_obs_len),
                );
            }
        }
        if visible.len() != n_hosts {
            let missing: Vec<_> = (0..n_hosts).filter(|h| !visible.contains(h)).collect();
            return fail("host-visible", format!("hosts {missing:?} are seen by no agent"));
        }
        Ok(())
    }
}

/// Appends zeros to `raw` up to `target_len`.
pub fn pad_observation(raw: &[u8], target_len: usize) -> Result<ObservationVector> {
    if raw.len() > target_len {
        return Err(Error::contract(format!(
            "observation of {} bits does not fit in {target_len}",
            raw.len()
        )));
    }
    let mut bits = raw.to_vec();
    bits.resize(target_len, 0);
    Ok(ObservationVector(bits))
}
