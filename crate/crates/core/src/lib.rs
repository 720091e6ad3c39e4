//! Controllable region-level captioning on a synthetic shapes world.
//!
//! The crate covers the whole pipeline: scene generation and caption
//! grammar ([`synthworld`]), tag parsing and control sentences
//! ([`controlparse`]), a small autograd substrate ([`nn`]), the captioning
//! model ([`model`] and its parts), evaluation metrics ([`metrics`]) and
//! the training / evaluation harness ([`harness`]).

pub mod controlparse;
pub mod error;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synthworld;

pub use error::{Error, Result};
