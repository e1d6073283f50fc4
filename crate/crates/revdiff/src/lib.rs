//! Visual scene-conditioned diffusion converters for room acoustics.
//!
//! Two converters are trained jointly: one adds the reverberation implied by a
//! room image to anechoic audio, the other removes it. Cycle-consistency
//! feedback between the two supplies training signal on one-way unpaired data.
//! A fully synthetic acoustics pipeline (procedural rooms, speech-like
//! sources, parametric impulse responses) makes every stage testable at desk
//! scale.

pub mod acoustics;
pub mod autodiff;
pub mod cli;
pub mod diffusion;
pub mod net;
pub mod error;
pub mod eval;
pub mod plot;
pub mod scenes;
pub mod spectral;
pub mod trainer;

pub use error::{Result, RevdiffError};
