//! Policy model: frozen base encoder, LoRA camera adapter, spatial-knowledge
//! fusion, and decoupled diffusion action heads.

pub mod diffusion;
pub mod features;
pub mod net;
pub mod nn;
pub mod state;
pub mod tape;
