use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::ModelConfig;
use crate::scenario::Scenario;

/// Every knob of a training run. Intervals count policy updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub threads: usize,
    /// Overrides the scenario's horizon when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    /// Overrides the scenario's discount when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub gae_lambda: f64,
    pub ppo_clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub episodes_per_update: usize,
    pub log_interval: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    pub sparsity: f64,
    pub initial_temperature: f64,
    pub final_temperature: f64,
    pub learning_rate: f64,
    pub graph_learning_rate: f64,
    pub max_grad_norm: f64,
    /// Rewards are multiplied by this before returns are computed.
    pub reward_scale: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 500_000,
            threads: 1,
            horizon: None,
            gamma: None,
            gae_lambda: 0.95,
            ppo_clip: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            epochs: 4,
            minibatches: 2,
            episodes_per_update: 8,
            log_interval: 10,
            eval_interval: 50,
            eval_episodes: 10,
            seed: 1,
            sparsity: 0.5,
            initial_temperature: 1.0,
            final_temperature: 0.1,
            learning_rate: 3e-4,
            graph_learning_rate: 1e-3,
            max_grad_norm: 0.5,
            reward_scale: 0.1,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive_counts = [
            ("threads", self.threads),
            ("epochs", self.epochs),
            ("minibatches", self.minibatches),
            ("episodes_per_update", self.episodes_per_update),
            ("log_interval", self.log_interval),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
        ];
        for (name, v) in positive_counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.horizon == Some(0) {
            return Err(Error::config("horizon must be positive"));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::config(format!("gamma {g} is outside (0, 1]")));
            }
        }
        if !(self.ppo_clip > 0.0 && self.ppo_clip < 1.0) {
            return Err(Error::config(format!("ppo_clip {} is outside (0, 1)", self.ppo_clip)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::config(format!("gae_lambda {} is outside [0, 1]", self.gae_lambda)));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::config(format!("sparsity {} is outside (0, 1]", self.sparsity)));
        }
        let positive_reals = [
            ("learning_rate", self.learning_rate),
            ("graph_learning_rate", self.graph_learning_rate),
            ("initial_temperature", self.initial_temperature),
            ("final_temperature", self.final_temperature),
            ("max_grad_norm", self.max_grad_norm),
            ("reward_scale", self.reward_scale),
        ];
        for (name, v) in positive_reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("entropy_coef", self.entropy_coef), ("value_coef", self.value_coef)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be non-negative, got {v}")));
            }
        }
        self.model.validate()
    }

    /// The scenario as trained: horizon and discount overrides applied.
    pub fn effective_scenario(&self, scenario: &Scenario) -> Scenario {
        let mut s = scenario.clone();
        if let Some(h) = self.horizon {
            s.horizon = h;
        }
        if let Some(g) = self.gamma {
            s.gamma = g;
        }
        s
    }

    /// Episodes each worker runs: `total_steps / (threads * horizon)`.
    pub fn episodes_per_thread(&self, horizon: usize) -> u64 {
        self.total_steps / (self.threads as u64 * horizon as u64)
    }

    /// Applies a `key=value` override such as `model.d_model=32`.
    ///
    /// The value is read as a TOML literal, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).expect("config serializes");
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("unknown config key {key:?}")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table
                .get_mut(*part)
                .ok_or_else(|| Error::config(format!("unknown config key {key:?}")))?;
        }
        let updated: TrainConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("bad override {key:?}: {}", e.message())))?;
        *self = updated;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            line: e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0),
            message: e.message().to_string(),
        })
    }
}
