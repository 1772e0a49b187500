//! Adversarial oil-spill segmentation for SAR intensity imagery.
//!
//! The crate bundles everything the `srcnet` tool needs:
//!
//! * [`autograd`]: dense tensors with a reverse-mode tape and Adam;
//! * [`sarmodel`]: the exponential speckle intensity model and a synthetic
//!   scene generator;
//! * [`segnets`]: the skip-connected generator and the mask discriminator;
//! * [`training`]: the joint adversarial + regression objective and the
//!   alternating ascent/descent loop;
//! * [`metrics`]: confusion counts, pixel accuracy, Jaccard index, box stats;
//! * [`theorylab`]: closed-form minimax checks on discrete distributions;
//! * [`io`]: PFM/PGM images, the dataset layout, checkpoints and CSV logs.

pub mod autograd;
pub mod config;
pub mod error;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod sarmodel;
pub mod segnets;
pub mod theorylab;
pub mod training;

pub use autograd::{ModelParams, Tape, Tensor, Var};
pub use error::{Error, Result};
