//! Cooperating blue agents defending a simulated network: the simulator,
//! scenarios, a learned sparse communication graph, a graph-masked
//! attention policy, a small autodiff engine and a PPO trainer.

pub mod commgraph;
pub mod error;
pub mod netsim;
pub mod numerics;
pub mod policy;
pub mod scenario;
pub mod trainer;

pub use commgraph::{AdjacencyMask, CommGraph, MaskMode};
pub use netsim::{BlueAction, Env, NetworkState, ObservationVector};
pub use error::{Error, Result};
pub use numerics::Tensor;
pub use policy::{Checkpoint, DecodeMode, ModelConfig, Policy};
pub use scenario::{build_scenario, Scenario, ScenarioKind};
pub use trainer::{train, EvalReport, TrainConfig, TrainingLog};
