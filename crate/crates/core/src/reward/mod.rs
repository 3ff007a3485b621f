//! Reward parameterizations, the preference log-likelihood, and checkpoints.

mod checkpoint;
mod head;
mod model;
mod objective;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use head::{log_sigmoid, reward, sigmoid, HeadSpec, RewardHead};
pub use model::{
    project_frobenius, BaselineKind, BaselineModel, BaselineParams, FactorGradient, RewardModel, ShareMode, SharedLoraModel,
};
pub use objective::{grad_log_likelihood, log_likelihood, pref_prob, theta_gradients};
#[allow(unused_imports)]
pub(crate) use objective::{evaluate_groups, sample_log_prob};
