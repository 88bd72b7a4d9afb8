//! GRPO fine-tuning of a conditional rectified-flow policy on a parametric
//! scene-editing environment.
//!
//! The policy edits a scene of up to five objects according to a templated
//! instruction (translate, rotate, resize). Rewards are computed exactly from
//! the decoded scene parameters. Training combines flow-matching
//! pretraining on oracle edits with group-relative policy optimization over
//! SDE-perturbed rollouts, including reward-variance step calibration and
//! early-exit ("active") step sampling.

pub mod cli;
pub mod error;
pub mod eval;
pub mod flow;
pub mod grpo;
pub mod nn;
pub mod rewards;
pub mod rng;
pub mod scene;

pub use error::{Error, Result};
