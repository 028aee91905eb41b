//! Desk-scale active-perception manipulation stack.
//!
//! The crate is organized around the data flow of the system:
//! [`world`] provides deterministic synthetic scenes and a pitch/yaw head
//! camera; [`viewgen`] turns scenes into image/instruction/camera-movement
//! records; [`model`] is the diffusion policy with a LoRA camera adapter and
//! spatial-knowledge fusion; [`env`] is the episodic benchmark with a
//! scripted oracle; [`train`] runs the two-stage curriculum; [`eval`]
//! reproduces the evaluation protocols; [`cli`] ties it together.

pub mod canonical;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod model;
pub mod train;
pub mod viewgen;
pub mod world;

pub mod cli;

pub use error::{Error, Result};
