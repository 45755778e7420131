//! Self-supervised correlation mining network at desk scale.
//!
//! Disentangles a figure image into pose features and per-region style
//! features, re-merges them through a dense spatial correlation field, and
//! translates the result back to an image. Training is pure
//! self-reconstruction on a procedurally generated articulated-figure
//! dataset; pose transfer and attribute editing run at inference time.

pub mod corrfield;
pub mod encoders;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod losses;
pub mod model;
pub mod synthfig;
pub mod tensor;
pub mod trainer;
pub mod translator;

pub use error::{Result, ScmError};
pub use tensor::{Graph, NodeId, Tensor};
