//! Video inpainting with deformed patch alignment, mask-pruned patch attention
//! and spatial-temporal weighting.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] — tensors, differentiable primitives, reverse-mode gradients.
//! * [`patch`] — query/key/value embedding and patch token sets.
//! * [`depth`] — per patch-pair affine estimation and token warping.
//! * [`mppa`] — hole-aware correlation, saliency and attention.
//! * [`sta`] — spatial/temporal attention branches and the motion-guided gate.
//! * [`flops`] — closed-form cost estimate, instrumented counts, model summary.
//! * [`params`] — named parameter stores and initialisation.
//! * [`model`] — generator, discriminator, losses, checkpoints and the toy trainer.
//! * [`harness`] — synthetic clips, masks, frame windows, metrics, file I/O and
//!   whole-clip inference.
//! * [`verify`] — the finite-difference gradient suite.

pub mod depth;
pub mod error;
pub mod flops;
pub mod harness;
pub mod model;
pub mod mppa;
pub mod numerics;
pub mod params;
pub mod patch;
pub mod sta;
pub mod verify;

pub use error::{Error, Result};
pub use numerics::{Graph, Tensor, Var};
