//! Optimizer, configuration and training loops.

pub mod adam;
pub mod config;
pub mod trainer;

pub use adam::Adam;
pub use config::{Ablation, DqConfig, NqatConfig, Regime, Resolved, TrainConfig};
pub use trainer::{evaluate, train_graph, train_node, train_node_with, Hooks, RunMetrics, Trained};
