//! Self-supervised dense space-time correspondence at desk scale.
//!
//! The crate learns per-pixel matching features from unlabeled frame
//! sequences by making random walks on a space-time pixel graph cycle back
//! to their starting points, then reads optical flow out of the resulting
//! transition matrices coarse-to-fine. A small convolutional regressor can
//! refine the nonparametric flow, and trained features drive label and
//! keypoint propagation through time.

pub mod config;
pub mod encoder;
pub mod engine;
pub mod io;
pub mod propagate;
pub mod regressor;
pub mod synthdata;
pub mod train;
pub mod transition;
pub mod viz;
pub mod walkloss;
