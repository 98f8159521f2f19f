//! Image ↔ latent codec: a frozen autoencoder pair mapping `[3, H, W]` images
//! in `[-1, 1]` to `[4, H/8, W/8]` latents and back.
//!
//! The resident backend is a small convolutional VAE trained once on the desk
//! corpus and then frozen; its decoder convolutions carry low-rank deltas so
//! later stages can adapt reconstruction without touching the base weights.
//! Checkpoints use the archive format in [`crate::container`]; the manifest's
//! `kind` field is the mount seam for swapping in an externally trained codec.

mod vae;

use std::path::Path;

use ndarray::Array3;

use crate::autodiff::ParamStore;
use crate::container::{manifest_str, read_container};
use crate::err::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

pub use vae::{kl_divergence, vae_training_loss, ToyVae, VaeLossParts};

/// Channels of the latent space.
pub const LATENT_CHANNELS: usize = 4;
/// Spatial reduction from image to latent.
pub const LATENT_REDUCTION: usize = 8;

/// A mounted image ↔ latent codec.
///
/// Implementations must be deterministic: identical inputs and parameters
/// yield bitwise-identical outputs.
pub trait LatentCodec<S: Scalar> {
    fn kind(&self) -> &'static str;

    /// Deterministic latent for an image with sides divisible by 8. Accepts
    /// either value range; the model-facing `[-1, 1]` convention is applied
    /// internally.
    fn encode(&self, ps: &ParamStore<S>, x: &Image<S>) -> Result<Array3<S>>;

    /// Image in `[-1, 1]` for a `[4, h, w]` latent.
    fn decode(&self, ps: &ParamStore<S>, z: &Array3<S>) -> Result<Image<S>>;
}

/// Loads a codec checkpoint, dispatching on the manifest's `kind`.
///
/// Returns the parameter store rebuilt from the archive and the codec driving
/// it. A checkpoint produced by an external tool mounts here as long as it
/// declares a supported kind and ships compatible blob names; new backends
/// plug in by implementing [`LatentCodec`] and extending this dispatch.
pub fn mount_codec<S: Scalar>(path: &Path) -> Result<(ParamStore<S>, Box<dyn LatentCodec<S>>)> {
    let archive = read_container::<S>(path)?;
    let kind = manifest_str(&archive.manifest, "kind")?;
    match kind {
        "toy" => {
            let mut ps = ParamStore::new();
            let vae = ToyVae::register(&mut ps)?;
            vae.load_from_archive(&mut ps, &archive)?;
            Ok((ps, Box::new(vae)))
        }
        other => Err(Error::config(format!(
            "codec kind '{other}' has no mounted backend; implement LatentCodec for it and \
             register the kind in mount_codec"
        ))),
    }
}

/// Validates image dimensions for encoding and returns the latent spatial size.
pub fn latent_dims(h: usize, w: usize) -> Result<(usize, usize)> {
    if h == 0 || w == 0 || h % LATENT_REDUCTION != 0 || w % LATENT_REDUCTION != 0 {
        return Err(Error::invalid(format!(
            "image sides must be positive multiples of {LATENT_REDUCTION}, got {h}x{w}"
        )));
    }
    Ok((h / LATENT_REDUCTION, w / LATENT_REDUCTION))
}
