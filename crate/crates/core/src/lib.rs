//! Warp-and-refine temporal interpolation and short-horizon extrapolation for
//! single-channel gray-scale imagery.
//!
//! The pipeline has two halves:
//!
//! - a non-learned half: duality-based TV-L1 optical flow ([`tvl1`]) and
//!   alpha-scaled backward warping ([`warp`]);
//! - a learned half: a non-local multi-temporal fusion layer feeding an
//!   encoder-decoder refinement network ([`model`]), built on a small
//!   reverse-mode autodiff substrate ([`nn`]).
//!
//! [`metrics`] implements PSNR/SSIM and the Linear / Warp-Only / Full
//! evaluation protocol, and [`dataio`] handles file formats, synthetic
//! sequences and augmentation.
//!
//! Per-pixel kernels run on rayon when the `parallel` feature is enabled
//! (the default) and fall back to plain loops otherwise. Results do not depend
//! on the number of threads.

pub mod dataio;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod tvl1;
pub mod warp;

pub use error::{Error, Result};
pub use grid::{FlowField, Pyramid, ScalarField};

pub use model::{AttentionRoles, WrNetConfig, WrNetModel};
pub use tvl1::{estimate_flow, Tvl1Params};
