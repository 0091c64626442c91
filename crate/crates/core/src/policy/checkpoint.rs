use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Policy;
use crate::commgraph::CommGraph;
use crate::error::{Error, Result};
use crate::scenario::{load_scenario, to_config_text, Scenario};

pub const CHECKPOINT_FORMAT: &str = "commdef-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model, its communication graph and the scenario it belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub scenario_name: String,
    pub scenario_fingerprint: String,
    /// The scenario in its TOML form, so the checkpoint is self-contained.
    pub scenario: String,
    /// Environment steps taken when the checkpoint was written.
    pub steps: u64,
    pub policy: Policy,
    pub graph: CommGraph,
}

impl Checkpoint {
    pub fn new(scenario: &Scenario, steps: u64, policy: Policy, graph: CommGraph) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            scenario_name: scenario.name.clone(),
            scenario_fingerprint: scenario.fingerprint(),
            scenario: to_config_text(scenario),
            steps,
            policy,
            graph,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoints always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint {} v{}, expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}",
                ck.format, ck.version
            )));
        }
        if !ck.policy.is_finite() || !ck.graph.logits().is_finite() {
            return Err(Error::NonFinite("checkpoint parameters"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// The embedded scenario, checked against the stored fingerprint.
    pub fn scenario(&self) -> Result<Scenario> {
        let s = load_scenario(&self.scenario)?;
        self.check_scenario(&s)?;
        Ok(s)
    }

    /// Refuses a scenario other than the one the checkpoint was trained on.
    pub fn check_scenario(&self, scenario: &Scenario) -> Result<()> {
        let expected = scenario.fingerprint();
        if expected != self.scenario_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected,
                found: self.scenario_fingerprint.clone(),
            });
        }
        Ok(())
    }
}
