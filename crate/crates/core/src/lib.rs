//! Hyperbolic latent world models with energy-based planning.
//!
//! The crate is organised bottom-up:
//!
//! - [`manifold`]: Poincaré-ball geometry under curvature `-c`.
//! - [`gradengine`]: reverse-mode differentiation used for training.
//! - [`worldmodel`]: frozen encoder, hyperbolic projection and predictor.
//! - [`losses`]: teacher forcing, rollout, SFT mixture and GRL objectives.
//! - [`planner`]: cross-entropy-method planning over action sequences.
//! - [`envs`]: synthetic tree and drift worlds with exact oracles.
//! - [`diagnostics`]: Gromov δ and energy-landscape sweeps.
//! - [`metrics`]: SR / mAcc / mIoU.
//! - [`runtime`]: configuration, training loops, checkpoints and reports.

pub mod diagnostics;
pub mod envs;
pub mod gradengine;
pub mod losses;
pub mod manifold;
pub mod metrics;
pub mod planner;
pub mod runtime;
pub mod worldmodel;
