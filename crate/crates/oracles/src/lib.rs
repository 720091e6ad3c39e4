//! Slow, direct reference implementations of the metrics and a set of
//! finite-difference gradient scenarios. Nothing here shares code with the
//! production paths it checks.

pub mod checks;
pub mod gradients;
pub mod metrics;
pub mod sentences;
