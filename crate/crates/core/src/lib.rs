//! Low-rank compression of convolutional networks.
//!
//! Convolution kernels are CP-decomposed with a greedy tensor power method
//! and replaced by a three-stage pipeline (1×1, depthwise D×D, 1×1); fully
//! connected weights are split into two thinner layers by truncated SVD.
//! The crate also carries the accounting, rank allocation and fine-tuning
//! machinery needed to compress a whole network layer by layer.

pub mod conv;
pub mod cp;
pub mod error;
pub mod network;
pub mod rank;
pub mod svd;
pub mod tensor;
pub mod train;
pub mod verify;

pub use cp::{decompose_kernel, reconstruct, residual_curve, CpFactors, TpmConfig};
pub use error::{Error, Result};
pub use svd::{split_fc, truncated_svd, SvdFactors};
pub use tensor::{add_scaled, frobenius_norm, mode_contract, outer_product, DenseTensor, Rank1Term};
