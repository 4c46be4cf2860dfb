//! Sparse-interaction pedestrian trajectory predictor.
//!
//! Per step, an interaction graph over the tracked pedestrians is built from
//! displacements and relative positions, an edge selector samples a sparse
//! weighted adjacency with Gumbel-softmax, a transformer encoder aggregates
//! node features over that graph, and a mask-gated LSTM rolls predictions out
//! recursively. Absent pedestrians are carried through every stage by masks.

pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
mod nn;
pub mod rollout;
pub mod selector;
pub mod sim;
pub mod train;

pub use config::{ModelConfig, SamplingMode, Variant, OBS_LEN, PRED_LEN, STEP_SECONDS, WINDOW_LEN};
pub use dataset::{DataManifest, DatasetSplit, SceneRecording, TrajectoryWindow};
pub use decoder::HiddenState;
pub use error::{GstError, Result};
pub use eval::{aoe_foe, evaluate, offset_error, MetricReport};
pub use graph::{InteractionGraph, Positions};
pub use model::{Model, ModelCheckpoint};
pub use rollout::{rollout, Observation, PredictionRollout, RolloutOptions, StepAdjacency};
pub use selector::{AugmentedEdgeFeatures, EdgeLogits, SparseAdjacency};
pub use sim::{build_scenario, run_scenario, Scenario, ScenarioId, SimResult};
pub use train::{anneal_tau, masked_mse, train, TrainConfig, TrainLog};
