//! Unsupervised difference learning (UDL) for noisy rigid image alignment.
//!
//! This crate is the allocation-only algorithmic core: rigid transforms and
//! warping, noise synthesis, the rotation-regression network with its own
//! backward pass, the UDL losses and training loop, Fourier translation
//! recovery, and the evaluation metrics. It performs no I/O; the `udl`
//! companion crate carries file formats, checkpoints and the CLI.
//!
//! Conventions shared by every module:
//!
//! * angles are in degrees, normalized into `[0, 360)`;
//! * `+x` points right (columns), `+y` points down (rows);
//! * rotations act about the image center `((w - 1) / 2, (h - 1) / 2)`;
//! * a [`RigidTransform`] maps source coordinates to target coordinates.

#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod fft;
pub mod fourier_align;
pub mod geometry;
pub mod imaging;
pub mod math;
pub mod network;
pub mod rng;
pub mod udl;

pub use error::{Error, Result};
pub use geometry::{Image, RigidTransform};
