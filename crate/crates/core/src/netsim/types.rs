use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub type HostId = usize;
pub type SubnetId = usize;
pub type AgentId = usize;

/// Attacker access level on a host.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Access {
    #[default]
    None,
    User,
    Privileged,
}

/// What the defenders have established about a host.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KnownCompromise {
    #[default]
    Unknown,
    Clean,
    User,
    Privileged,
}

impl KnownCompromise {
    pub fn from_access(access: Access) -> Self {
        match access {
            Access::None => KnownCompromise::Clean,
            Access::User => KnownCompromise::User,
            Access::Privileged => KnownCompromise::Privileged,
        }
    }

    /// The access level this knowledge claims (Unknown and Clean claim none).
    pub fn claimed(self) -> Access {
        match self {
            KnownCompromise::Unknown | KnownCompromise::Clean => Access::None,
            KnownCompromise::User => Access::User,
            KnownCompromise::Privileged => Access::Privileged,
        }
    }
}

/// Monitoring flags. They stay set until the host is restored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventFlags {
    pub scan_seen: bool,
    pub exploit_alert: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HostState {
    pub host_id: HostId,
    pub subnet_id: SubnetId,
    pub is_op_server: bool,
    pub red_access: Access,
    pub event_flags: EventFlags,
    pub known_compromise: KnownCompromise,
    /// Highest access red has held since the last restore.
    pub peak_access: Access,
}

impl HostState {
    pub(crate) fn grant(&mut self, access: Access) {
        self.red_access = access;
        self.peak_access = self.peak_access.max(access);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubnetState {
    pub subnet_id: SubnetId,
    pub blocked: bool,
}

/// Stages of the scripted attacker's kill chain, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RedStage {
    ScanSubnet,
    ScanHost,
    Exploit,
    Escalate,
    Pivot,
    Impact,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RedState {
    pub stage: RedStage,
    pub target_host: Option<HostId>,
    /// Subnet the attacker is currently operating in.
    pub current_subnet: SubnetId,
    pub retry_count: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkState {
    pub hosts: Vec<HostState>,
    pub subnets: Vec<SubnetState>,
    pub red: RedState,
    pub step: usize,
    pub done: bool,
}

impl NetworkState {
    /// Hosts where red currently holds access, with the level held.
    pub fn footholds(&self) -> Vec<(HostId, Access)> {
        self.hosts
            .iter()
            .filter(|h| h.red_access != Access::None)
            .map(|h| (h.host_id, h.red_access))
            .collect()
    }

    pub fn red_holds_foothold_in(&self, subnet: SubnetId) -> bool {
        self.hosts
            .iter()
            .any(|h| h.subnet_id == subnet && h.red_access != Access::None)
    }

    pub fn is_blocked(&self, subnet: SubnetId) -> bool {
        self.subnets[subnet].blocked
    }
}

/// A defender action. Host-targeted and subnet-targeted variants carry the
/// id of their target, so target kind always matches action kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlueAction {
    Sleep,
    Monitor,
    Analyse(HostId),
    Remove(HostId),
    Restore(HostId),
    Block(SubnetId),
    Unblock(SubnetId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlueActionKind {
    Sleep,
    Monitor,
    Analyse,
    Remove,
    Restore,
    Block,
    Unblock,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActionTarget {
    None,
    Host(HostId),
    Subnet(SubnetId),
}

impl BlueAction {
    pub fn kind(self) -> BlueActionKind {
        match self {
            BlueAction::Sleep => BlueActionKind::Sleep,
            BlueAction::Monitor => BlueActionKind::Monitor,
            BlueAction::Analyse(_) => BlueActionKind::Analyse,
            BlueAction::Remove(_) => BlueActionKind::Remove,
            BlueAction::Restore(_) => BlueActionKind::Restore,
            BlueAction::Block(_) => BlueActionKind::Block,
            BlueAction::Unblock(_) => BlueActionKind::Unblock,
        }
    }

    pub fn target(self) -> ActionTarget {
        match self {
            BlueAction::Sleep | BlueAction::Monitor => ActionTarget::None,
            BlueAction::Analyse(h) | BlueAction::Remove(h) | BlueAction::Restore(h) => {
                ActionTarget::Host(h)
            }
            BlueAction::Block(s) | BlueAction::Unblock(s) => ActionTarget::Subnet(s),
        }
    }

    pub fn from_parts(kind: BlueActionKind, target: Option<usize>) -> Result<Self, Error> {
        let need = |t: Option<usize>| {
            t.ok_or_else(|| Error::contract(format!("{kind:?} needs a target")))
        };
        let none = |t: Option<usize>| match t {
            None => Ok(()),
            Some(x) => Err(Error::contract(format!("{kind:?} takes no target, got {x}"))),
        };
        Ok(match kind {
            BlueActionKind::Sleep => none(target).map(|_| BlueAction::Sleep)?,
            BlueActionKind::Monitor => none(target).map(|_| BlueAction::Monitor)?,
            BlueActionKind::Analyse => BlueAction::Analyse(need(target)?),
            BlueActionKind::Remove => BlueAction::Remove(need(target)?),
            BlueActionKind::Restore => BlueAction::Restore(need(target)?),
            BlueActionKind::Block => BlueAction::Block(need(target)?),
            BlueActionKind::Unblock => BlueAction::Unblock(need(target)?),
        })
    }

    pub fn target_id(self) -> Option<usize> {
        match self.target() {
            ActionTarget::None => None,
            ActionTarget::Host(x) | ActionTarget::Subnet(x) => Some(x),
        }
    }
}

impl fmt::Display for BlueActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for BlueActionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Ok(match s {
            "Sleep" => BlueActionKind::Sleep,
            "Monitor" => BlueActionKind::Monitor,
            "Analyse" => BlueActionKind::Analyse,
            "Remove" => BlueActionKind::Remove,
            "Restore" => BlueActionKind::Restore,
            "Block" => BlueActionKind::Block,
            "Unblock" => BlueActionKind::Unblock,
            other => return Err(Error::contract(format!("unknown action kind {other:?}"))),
        })
    }
}

impl fmt::Display for BlueAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.target_id() {
            None => write!(f, "{}", self.kind()),
            Some(t) => write!(f, "{}({t})", self.kind()),
        }
    }
}

impl FromStr for BlueAction {
    type Err = Error;

    /// Parses `Sleep`, `Monitor`, `Analyse(3)`, `Block(1)` and so on.
    fn from_str(s: &str) -> Result<Self, Error> {
        let s = s.trim();
        match s.split_once('(') {
            None => BlueAction::from_parts(s.parse()?, None),
            Some((kind, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| Error::contract(format!("unclosed target in {s:?}")))?;
                let target = inner
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| Error::contract(format!("bad target in {s:?}")))?;
                BlueAction::from_parts(kind.trim().parse()?, Some(target))
            }
        }
    }
}

impl Serialize for BlueAction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BlueAction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Team reward constants. Penalties are non-positive; the discount is added
/// to the cost of a Block issued while red holds a foothold in that subnet.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardTable {
    pub opserver_privileged: f64,
    pub host_privileged: f64,
    pub host_user: f64,
    pub restore_cost: f64,
    pub restore_opserver_cost: f64,
    pub analyse_unnecessary_cost: f64,
    pub block_cost: f64,
    pub block_justified_discount: f64,
}

impl Default for RewardTable {
    fn default() -> Self {
        Self {
            opserver_privileged: -3.0,
            host_privileged: -1.0,
            host_user: -0.1,
            restore_cost: -1.0,
            restore_opserver_cost: -3.0,
            analyse_unnecessary_cost: 0.0,
            block_cost: -0.3,
            block_justified_discount: 0.3,
        }
    }
}

impl RewardTable {
    pub fn entries(&self) -> [(&'static str, f64); 8] {
        [
            ("opserver_privileged", self.opserver_privileged),
            ("host_privileged", self.host_privileged),
            ("host_user", self.host_user),
            ("restore_cost", self.restore_cost),
            ("restore_opserver_cost", self.restore_opserver_cost),
            ("analyse_unnecessary_cost", self.analyse_unnecessary_cost),
            ("block_cost", self.block_cost),
            ("block_justified_discount", self.block_justified_discount),
        ]
    }
}

/// Per-agent binary observation, zero-padded to the scenario length.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObservationVector(pub Vec<u8>);

impl ObservationVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|b| *b == 0)
    }
}
