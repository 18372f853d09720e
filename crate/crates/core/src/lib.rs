//! Phase-field image segmentation engine.
//!
//! Classical solvers (Chan-Vese level sets and a modified Cahn-Hilliard
//! phase-field model with TFPM or plain finite-difference stencils), plus a
//! trainable variant in which a small encoder-decoder network supplies the
//! fidelity force and the solver steps are unrolled as network blocks.

pub mod autodiff;
pub mod chan_vese;
pub mod ch_classical;
pub mod ckpt;
pub mod error;
pub mod field;
pub mod scheme;

pub use error::{Error, Result};
pub use field::{BoundaryCondition, ImageTensor, LaplacianKernel, ScalarField};
pub use scheme::{CHParams, SchemeKind};
