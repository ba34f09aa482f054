//! Small dense neural-network toolkit: a reverse-mode tape, deterministic
//! matrix kernels, parameter storage, Adam, and a finite-difference
//! gradient checker.
//!
//! Design points:
//! - All results are bit-reproducible for a fixed seed and scalar type,
//!   including under the thread-parallel matrix kernels (fixed reduction
//!   order per output element).
//! - Operations store what their backward rule needs at record time, so one
//!   reverse sweep yields every gradient without recomputation.
//! - The scalar type is generic: `f32` for training speed, `f64` for
//!   gradient verification.

pub mod adam;
pub mod gemm;
pub mod gradcheck;
pub mod params;
pub mod scalar;
pub mod tape;

pub use adam::{Adam, LrSchedule};
pub use gradcheck::{check_gradients, CheckReport};
pub use params::{Gradients, ParamId, ParamKind, ParamSet};
pub use scalar::Scalar;
pub use tape::{LossBreakdown, Mode, NodeId, Tape};
