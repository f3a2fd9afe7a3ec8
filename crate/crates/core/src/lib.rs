//! Desk-scale autonomous powder-diffraction toolkit: pattern numerics
//! (synthesis, Le Bail refinement, landscape matching) plus a deterministic
//! multi-robot lab simulator with an append-only, replayable event journal.

pub mod lebail;
pub mod pattern;
pub mod profile;
pub mod xtal;

pub use lebail::{refine, RefinementProblem, RefinementResult};
pub use pattern::{PatternGrid, PowderPattern};
pub use profile::{synthesize, BackgroundModel, ProfileParams};
pub use xtal::{Reflection, SpaceGroupRules, UnitCell, Wavelength};
