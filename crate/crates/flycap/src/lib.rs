//! Switching-controller synthesis for flying-capacitor multilevel converters.
//!
//! The crate models an affine sampled switched system, searches per-cell
//! switching patterns whose reachable sets stay inside a safety box and
//! return to a recurrence box, and assembles the results into a
//! state-dependent controller that is correct by construction. A discrete
//! simulator closes the loop and checks trajectories against the same boxes.
//!
//! The `examples/` directory is the primary interface: each example is a
//! runnable end-to-end workflow (synthesis, validation, simulation, pattern
//! enumeration). A thin `flycap` binary exposes the same steps as
//! subcommands for scripted use.

pub mod affine;
pub mod converter;
pub mod cycles;
pub mod error;
pub mod geometry;
pub mod sim;
pub mod switched;
pub mod synthesis;

pub use affine::{AffineMap, ModeDynamics};
pub use converter::ConverterParams;
pub use cycles::CyclePatterns;
pub use error::{Error, Result};
pub use geometry::{DimSet, IntervalBox, Zonotope};
pub use sim::{SimOutcome, Trace};
pub use switched::{Mode, Pattern, SwitchedSystem};
pub use synthesis::{Decomposition, SynthesisProblem};
