//! Persona-conditioned motion generation on a desk-scale budget.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`] — tensors, reverse-mode autodiff on a recorded op tape, layers,
//!   AdamW, and finite-difference gradient checking.
//! * [`data`] — procedural persona-motion corpus: persona parameters, six
//!   motion contents, mirror augmentation, prompt templates, tokenizer, and
//!   on-disk corpus format.
//! * [`clip`] — dual text/motion encoders trained with a symmetric
//!   contrastive objective; defines the shared embedding space everything
//!   else conditions on.
//! * [`persona`] — persona extractor producing per-clip persona tokens, plus
//!   the persona cohesion loss that clusters them by identity.
//! * [`adapt`] — zero-initialised gated adapters that splice persona
//!   conditioning into the frozen pretrained networks.
//! * [`diffusion`] — noise schedules, the transformer denoiser, training
//!   losses, pretrain/finetune loops, and the guided ancestral sampler.
//! * [`fusion`] — context-aware fusion of persona tokens extracted from
//!   several input clips.
//! * [`eval`] — feature statistics, FID, R-precision, diversity, persona
//!   recognition accuracy, and the single-/multi-input evaluation protocols.
//! * [`pipeline`] — stage orchestration (corpus → pretrain → finetune →
//!   sample → eval) shared by the CLI and the integration tests.
//! * [`config`] — run configuration with named presets and `key=value`
//!   overrides.

pub mod adapt;
pub mod clip;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod io;
pub mod nn;
pub mod persona;
pub mod pipeline;
pub mod rng;

pub use config::{Protocol, RunConfig};
pub use error::{Error, Result};
