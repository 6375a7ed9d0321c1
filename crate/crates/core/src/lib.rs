//! Learning-assisted algorithm unrolling for online convex optimization
//! with strict per-episode budget constraints.
//!
//! An episode is `N` sequential decisions sharing a budget vector `B`. At each
//! step a learned model predicts a Lagrangian multiplier, a differentiable
//! convex layer turns it into a feasible action, and the remaining budget is
//! updated. Training backpropagates through the whole unrolled episode using
//! implicit (KKT) derivatives of the layer.

pub mod baselines;
pub mod error;
pub mod linalg;
pub mod model;
pub mod opt_layer;
pub mod problem;
pub mod train;
pub mod unroll;

pub use error::{Error, Result};

pub use opt_layer::{
    check_kkt_conditions, differentiate_kkt, solve_opt_layer, KktDiagnostic, KktGradients, OptSolution,
};
pub use problem::{BudgetState, Episode, FairnessFamily, Problem, QuadraticFamily};

pub use model::{ConstantMultiplier, ModelGradients, ModelKind, ModelParams, MultiplierModel, Normalization};
pub use train::{train_offline, train_online, EpisodePolicy, Laau, OnlineConfig, OptimizerKind, TrainConfig, TrainLog};
pub use unroll::{
    backward_episode, episode_loss, forward_episode, infer_online, BudgetRecurrence, PipelineTrace, ThetaGradient,
    UnrollConfig,
};
pub use baselines::{
    calibrate_avg_lt, run_avg_lt, run_dgd, run_direct_policy, run_equal, run_mw, solve_offline_opt, BaselineConfig,
    DirectPolicy, Rollout,
};
