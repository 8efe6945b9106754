//! Desk-scale reaching tasks, demonstrations and receding-horizon execution.

mod dataset;
mod executor;
mod expert;
mod tokenize;
mod world;

pub use dataset::{gen_dataset, Dataset, GenConfig};
pub use executor::{
    ensemble_weights, evaluate, run_episode, run_episodes, staleness_model, ChunkPolicy, Episode,
    EvalReport, ExecutorConfig, ExpertPolicy, LearnedPolicy, LinearStaleness,
};
pub use expert::{expert_controller, EXPERT_GAIN, EXPERT_NOISE};
pub use tokenize::{tokenize, Tokenizer};
pub use world::{clip_norm, dist, Suite, Vec2, WorldState, A_MAX, HORIZON, N_TASKS, SUCCESS_RADIUS, V_MAX};
