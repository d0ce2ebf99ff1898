//! Cooperative bird's-eye-view feature fusion that stays robust to channel
//! latency and pose noise.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`]: tensors, reverse-mode tape, and the differentiable kernels.
//! * [`wavelet`]: orthonormal 2D Haar analysis/synthesis.
//! * [`temporal`]: multi-agent integration, recurrent motion-aligned
//!   synchronization over a history buffer, and deformable cross-attention.
//! * [`denoise`]: dual-branch wavelet denoiser (subband scans through a
//!   selective recurrence, plus nested wavelet convolution).
//! * [`selector`]: multi-scale block scoring, top-k selection with mask
//!   propagation, and split-attention fusion.
//! * [`sim`]: synthetic scenes, BEV rendering, pose noise, and the lossy,
//!   laggy channel.
//! * [`harness`]: pipeline assembly, training, metrics, sweeps.

pub mod denoise;
pub mod diffops;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod selector;
pub mod sim;
pub mod temporal;
pub mod wavelet;

pub use error::{Error, Result};
