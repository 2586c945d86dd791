//! Forward and backward kernels behind the tape operations.

pub mod conv;
pub mod reduce;
pub mod sample;
pub mod shape;
pub mod spectral;

pub use conv::ConvSpec;
pub use reduce::PoolMode;
pub use spectral::SpectralMode;
