//! Compositional sequential-intervention modelling.
//!
//! Behaviour of a unit under a sequence of categorical actions is modelled as
//! `E[X^t] = Σ_l φ^t_l β_l ψ^t_l`: a learned basis of the history (`φ`), a
//! per-unit random effect (`β`) and a product of per-action effect
//! embeddings (`ψ`). The crate provides
//!
//! - [`effects`]: effect families and their composition over time,
//! - [`basis`]: the recurrent basis map with reverse-mode gradients,
//! - [`model`]: exact β posterior, marginal likelihood and Monte-Carlo rollouts,
//! - [`identify`]: assumption checks and constructive parameter recovery,
//! - [`sim`]: a fully synthetic ground-truth generator,
//! - [`train`]: marginal-likelihood fitting,
//! - [`conformal`]: split/weighted conformal intervals and plug-in baselines,
//! - [`baseline`]: a black-box recurrent regressor for comparison,
//! - [`protocol`]: the end-to-end benchmark and coverage experiments.

pub mod baseline;
pub mod basis;
pub mod conformal;
pub mod data;
pub mod effects;
pub mod error;
pub mod gru;
pub mod identify;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod protocol;
pub mod rng;
pub mod sim;
pub mod train;

pub use basis::{basis_eval, basis_eval_series, basis_init_random, BasisParams};
pub use data::{load_dataset, save_dataset, split, Dataset, DatasetMeta, SplitSpec, Splits, UnitRecord};
pub use effects::{psi_aggregate, psi_single, warp_trajectory, EffectFamily, EffectParams, LevelShape};
pub use error::{Error, Result};
pub use model::{
    beta_posterior, build_design, conditional_mean, log_evidence, predict_mc, rmse_by_horizon, DesignRow,
    ModelBundle, NoiseScales, PosteriorState, PosteriorWindow,
};
