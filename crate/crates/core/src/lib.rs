//! Statistical channel fingerprint (sCF) reconstruction with a Laplacian-pyramid
//! wavelet-convolution network.

pub mod channel;
pub mod checkpoint;
pub mod degradation;
pub mod error;
pub mod evaluation;
pub mod network;
pub mod nn;
pub mod profile;
pub mod pyramid;
pub mod scf;
pub mod seed;
pub mod tensor;
pub mod training;
pub mod wavelet;

pub use error::{Error, Result};
