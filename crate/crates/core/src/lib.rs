//! Fourier-domain random amplitude mixup, a restoration-regularized
//! encoder/decoder segmentation network, and the training and evaluation
//! machinery around them.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! and the command-line tool live in the `ramdsir` companion crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

mod error;

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod spectral;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use image::ImageTensor;
pub use tensor::Tensor;
