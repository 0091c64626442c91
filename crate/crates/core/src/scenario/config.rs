//! Versioned TOML scenario files.
//!
//! ```toml
//! version = 1
//! name = "homogeneous"
//! horizon = 50
//! gamma = 0.99
//! op_server = 5
//! pivot_host = 2
//! red_entry_subnet = 0
//! exploit_success = 1.0   # optional, default 1.0
//! detection_rate = 0.5    # optional, default 0.5
//! red_active = true       # optional, default true
//!
//! [rewards]
//! opserver_privileged = -3.0
//! # ... every RewardTable field
//!
//! [[subnets]]
//! id = 0
//! hosts = [0, 1, 2]
//!
//! [[agents]]
//! name = "Blue0"
//! visible_hosts = [0, 1, 2]
//! visible_subnets = [0]
//! actions = ["Sleep", "Monitor", "Analyse(0)", "Block(0)"]
//! ```
//!
//! Agents take ids in file order. Observation lengths are derived from the
//! visible sets, so they are not written.

use serde::{Deserialize, Serialize};

use super::{assemble, AgentDraft, Scenario, SubnetSpec};
use crate::error::{Error, Result};
use crate::netsim::{BlueAction, HostId, RewardTable, SubnetId};

pub const CONFIG_VERSION: u32 = 1;

fn default_one() -> f64 {
    1.0
}

fn default_half() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    version: u32,
    name: String,
    horizon: usize,
    gamma: f64,
    op_server: Option<HostId>,
    pivot_host: HostId,
    red_entry_subnet: SubnetId,
    #[serde(default = "default_one")]
    exploit_success: f64,
    #[serde(default = "default_half")]
    detection_rate: f64,
    #[serde(default = "default_true")]
    red_active: bool,
    rewards: RewardTable,
    subnets: Vec<SubnetFile>,
    agents: Vec<AgentFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubnetFile {
    id: SubnetId,
    hosts: Vec<HostId>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentFile {
    name: String,
    visible_hosts: Vec<HostId>,
    visible_subnets: Vec<SubnetId>,
    actions: Vec<BlueAction>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses and validates a scenario file.
pub fn load_scenario(text: &str) -> Result<Scenario> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Parse {
        line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
        message: e.message().to_string(),
    })?;
    if file.version != CONFIG_VERSION {
        return Err(Error::Validation {
            rule: "version",
            detail: format!("version {} is not supported, expected {CONFIG_VERSION}", file.version),
        });
    }
    let op_server = file.op_server.ok_or_else(|| Error::Validation {
        rule: "op-server-exists",
        detail: "op_server is missing".into(),
    })?;
    let subnets = file
        .subnets
        .into_iter()
        .map(|s| SubnetSpec {
            id: s.id,
            hosts: s.hosts,
        })
        .collect();
    let drafts = file
        .agents
        .into_iter()
        .map(|a| AgentDraft {
            name: a.name,
            visible_hosts: a.visible_hosts,
            visible_subnets: a.visible_subnets,
            action_space: a.actions,
        })
        .collect();
    let mut scenario = assemble(
        file.name,
        subnets,
        op_server,
        file.pivot_host,
        file.red_entry_subnet,
        drafts,
        file.rewards,
        file.horizon,
        file.gamma,
    );
    scenario.exploit_success = file.exploit_success;
    scenario.detection_rate = file.detection_rate;
    scenario.red_active = file.red_active;
    scenario.validate()?;
    Ok(scenario)
}

/// Canonical file text for a scenario.
pub fn to_config_text(scenario: &Scenario) -> String {
    let file = ScenarioFile {
        version: CONFIG_VERSION,
        name: scenario.name.clone(),
        horizon: scenario.horizon,
        gamma: scenario.gamma,
        op_server: Some(scenario.op_server),
        pivot_host: scenario.pivot_host,
        red_entry_subnet: scenario.red_entry_subnet,
        exploit_success: scenario.exploit_success,
        detection_rate: scenario.detection_rate,
        red_active: scenario.red_active,
        rewards: scenario.rewards,
        subnets: scenario
            .subnets
            .iter()
            .map(|s| SubnetFile {
                id: s.id,
                hosts: s.hosts.clone(),
            })
            .collect(),
        agents: scenario
            .agents
            .iter()
            .map(|a| AgentFile {
                name: a.name.clone(),
                visible_hosts: a.visible_hosts.clone(),
                visible_subnets: a.visible_subnets.clone(),
                actions: a.action_space.clone(),
            })
            .collect(),
    };
    toml::to_string(&file).expect("scenario files always serialize")
}
