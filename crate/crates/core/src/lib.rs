//! Posterior sampling for linear inverse problems with a mask-absorbing discrete diffusion
//! prior, guided by gradients through a Gumbel-Softmax relaxation.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod config;
pub mod decoder;
pub mod error;
pub mod experiment;
pub mod field;
pub mod metrics;
pub mod noise;
pub mod objective;
pub mod operators;
pub mod optimizer;
pub mod oracle;
pub mod prior;
pub mod sampler;
pub mod space;
pub mod verify;

pub use error::{Error, Result};
pub use field::CategoricalField;
pub use noise::{ScheduleEndpoints, TokenField, TransitionSchedule};
