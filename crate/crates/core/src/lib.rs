//! Desk-scale laboratory for Gist-token fine-tuning of a micro vision
//! transformer.
//!
//! The crate is organised bottom-up: [`tensor`] provides the autodiff engine,
//! [`vit`] the backbone, [`peft`] the parameter-efficient attachments,
//! [`gist`] the Gist token and its training objective, [`trainer`] the
//! optimizer and fine-tuning loop and [`data`] the synthetic tasks.

// Numeric kernels index several buffers in lockstep.
#![allow(clippy::needless_range_loop)]

mod codec;
pub mod data;
pub mod error;
pub mod gist;
pub mod peft;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
