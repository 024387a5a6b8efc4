//! Desk-scale laboratory for reference-guided diffusion distillation.
//!
//! Everything runs on CPU over procedural 2D scenes: a deterministic DDIM
//! sampler/inverter ([`scheduler`]), a tiny depth-conditioned denoiser with
//! hand-written reverse mode and a single self-attention block whose K/V can
//! be captured and re-injected ([`nncore`]), a reference-guided novel-view
//! enhancement pipeline ([`rgnv`]), a differentiable texture-field renderer
//! ([`repfield`]), score-distillation training loops ([`distill`]), image
//! metrics ([`metrics`]), and the procedural world that feeds all of it
//! ([`toyworld`]).
//!
//! Every entry point is deterministic given its seed; there is no hidden
//! global state. The [`verify`] module bundles the acceptance checks that the
//! `distill-lab verify` subcommand and the integration suite both run.

pub mod config;
pub mod distill;
pub mod harness;
pub mod metrics;
pub mod nncore;
pub mod repfield;
pub mod rgnv;
pub mod rng;
pub mod scheduler;
pub mod tensor;
pub mod toyworld;
pub mod verify;

mod error;

pub use error::{Error, Result};
