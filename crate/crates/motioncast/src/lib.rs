//! Synthetic breathing phantoms, fluoroscopy-like image rendering, and
//! transformer-based forecasting of 3-D tumor motion.
//!
//! The crate is organized as a pipeline:
//!
//! 1. [`phantom`] — deformable digital thorax phantoms driven by an
//!    irregular breathing signal.
//! 2. [`drr`] — parallel-beam radiograph rendering and image preprocessing.
//! 3. [`dataset`] — sliding-window sequence datasets, on-disk formats, and
//!    cohort generation.
//! 4. [`autograd`] — the reverse-mode tensor core the model runs on.
//! 5. [`model`] — the encoder–decoder vision transformer.
//! 6. [`train`] — loss, schedule, Adam, and the training loop.
//! 7. [`eval`] — trajectory metrics, paired comparisons, and reports.

pub mod autograd;
pub mod dataset;
pub mod drr;
pub mod error;
pub mod eval;
pub mod guide;
pub mod model;
pub mod phantom;
pub mod train;

pub use error::{Error, Result};
