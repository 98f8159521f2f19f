//! Latent-space extreme image rescaling.
//!
//! An image is encoded into a VAE latent, squeezed by a feature rescaling
//! module into a compact 3-channel latent that doubles as the low-resolution
//! image after an invertible feature-to-pixel conversion, and restored by the
//! inverse path followed by a one-step diffusion enhancement whose time step
//! is predicted per patch from the degraded latent itself.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The
//! pipeline runs in `f32` by default; tests that need tighter arithmetic
//! instantiate the same code at `f64`.

pub mod autodiff;
pub mod bench;
pub mod codec;
pub mod container;
pub mod diffusion;
pub mod err;
pub mod image;
pub mod pipeline;
pub mod rescaler;
pub mod scalar;
pub mod tile;

pub use err::{Error, Result};
pub use scalar::Scalar;

/// Default scalar type for training and inference.
pub type Elem = f32;

/// Image tensor at the default scalar type.
pub type ImageF = image::Image<Elem>;

/// Wide-precision image tensor, used by metric oracles and strict tests.
pub type ImageF64 = image::Image<f64>;
