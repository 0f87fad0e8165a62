//! Dense tensors with a reverse-mode tape, sized for small image encoders and
//! one-hidden-layer MLPs on a single CPU core.
//!
//! Training runs in `f32`; every op is generic over [`Scalar`] so the same
//! code can be differentiated and finite-difference checked in `f64`.

pub mod adam;
pub mod checkpoint;
mod conv;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, Entry, EntryData};
pub use conv::ConvGeom;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{Bound, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
