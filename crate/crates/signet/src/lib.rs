//! SigNet: depth completion recast as degradation-aware depth enhancement.
//!
//! Sparse depth is first densified with classical (non-learned) tools, then
//! a compact network enhances the coarse result. A self-supervised
//! degradation bridge (coarse = kernel ⊗ target + noise) ties the coarse
//! depth to the prediction, and the latent degradation drives RGB-D fusion:
//! DCT band decomposition, spectrum-mask selection of image features, and a
//! condition-driven selective state-space scan.
//!
//! Crate layout:
//! - [`data`]: depth/RGB containers, validity semantics, PNG I/O
//! - [`densify`]: morphological and colorization-based sparse-to-dense fill
//! - [`degradation`]: latent degradation estimation, kernel head, Eq.-style
//!   degradation application
//! - [`dct`]: orthonormal 2-D DCT and radial band decomposition
//! - [`fusion`]: spectrum gating, band-conditioned recurrence, selective scan
//! - [`model`]: feature extractors, full network assembly, checkpoints
//! - [`metrics`]: training losses and evaluation metrics
//! - [`synth`], [`train`], [`eval`], [`ablate`]: synthetic-data harness
//! - [`autodiff`]: the reverse-mode tape everything trains on

pub mod ablate;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod dct;
pub mod degradation;
pub mod densify;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod plot;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Result, SignetError};
