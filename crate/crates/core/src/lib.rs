//! Multislice electron ptychography toolkit: 4D diffraction simulation,
//! adjoint-gradient iterative reconstruction, and a volumetric diffusion
//! prior applied through posterior-guided sampling.

pub mod adjoint;
pub mod diffusion;
pub mod error;
pub mod fft;
pub mod io;
pub mod metrics;
pub mod multislice;
pub mod nn;
pub mod optics;
pub mod sampler;
pub mod seed;
pub mod solvers;
pub mod synth;
pub mod tensor;
pub mod unet3d;

pub use error::{CoreError, Result};
