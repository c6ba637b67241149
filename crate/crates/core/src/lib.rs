//! Desk-scale laboratory for universal adversarial perturbations (UAPs)
//! against texture- and shape-biased image classifiers.
//!
//! The crate is organized as a stack:
//!
//! - [`tensor`] — dense f32 tensors with reverse-mode differentiation,
//!   enough to train small convnets and to take input gradients.
//! - [`zoo`] — three fixed convolutional architectures, SGD training,
//!   the four training regimes (IN / SIN / SIN+IN / SIN+2IN) and weight
//!   persistence.
//! - [`styshapes`] — a synthetic dataset with independently controllable
//!   shape and texture cues, a stylization pass that rerolls textures,
//!   and a cue-conflict shape-bias probe.
//! - [`uap`] — batched sign-gradient generation of untargeted and
//!   targeted universal perturbations inside an ℓ∞ ball.
//! - [`evalkit`] — accuracy, fooling rates, transfer matrices, tFR
//!   distributions and worst-case accuracy, plus CSV reporting.
//! - [`ensemble`] — hard/soft voting ensembles and their evaluation.

pub mod ensemble;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod seeds;
pub mod styshapes;
pub mod tensor;
pub mod uap;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::{Graph, NodeId, Tensor};
