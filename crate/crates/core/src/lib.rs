//! Region-aware distributional contrast for multi-task partially supervised
//! dense prediction.
//!
//! Task feature maps are cut into regions by a region-ID mask, every region is
//! summarized as a Gaussian, and corresponding regions of two task maps are
//! pulled together (and non-corresponding ones pushed apart) with an NCE loss
//! whose similarity is `exp(-W2² / tau)`.
//!
//! The crate is organized bottom-up:
//!
//! * [`diffcore`]: dense tensors and a reverse-mode tape.
//! * [`maskio`]: region masks, patch grids and PGM/PPM/PFM file I/O.
//! * [`regionstats`]: region Gaussians, mean vectors and pixel sets.
//! * [`gaussmetric`]: Bures-Wasserstein and KL/Jeffreys distances with gradients.
//! * [`contrast`]: the cross-task region NCE objective.
//! * [`nets`]: toy multi-task backbone, auxiliary mapper, init, Adam, checkpoints.
//! * [`supervision`]: supervised losses and evaluation metrics.
//! * [`synthworld`]: procedural scenes and label-assignment protocols.
//! * [`harness`]: configuration, training, evaluation and ablation grids.
//! * [`task`]: task ids and task sets.

pub mod contrast;
pub mod diffcore;
mod error;
pub mod gaussmetric;
pub mod harness;
mod linalg;
pub mod maskio;
pub mod nets;
pub mod par;
pub mod regionstats;
pub mod supervision;
pub mod synthworld;
pub mod task;

pub use error::{Error, Result};
