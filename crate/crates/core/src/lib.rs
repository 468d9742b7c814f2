//! Matched three-region blowup profiles for the 1-equivariant Landau-Lifshitz flow,
//! with residual diagnostics and a forward time stepper.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod algebra;
pub mod diagnostics;
pub mod error;
pub mod evolve;
pub mod frame;
pub mod glue;
pub mod grid;
pub mod logseries;
pub mod group;
pub mod inner;
pub mod params;
pub mod remote;
pub mod selfsim;
pub mod sphere;
pub mod stereo;

pub use error::{Error, Result};
pub use grid::{RadialGrid, Spacing};
pub use params::Params;
pub use sphere::{ComplexField, SphereField, Vec3};
pub use frame::FrameCoords;
