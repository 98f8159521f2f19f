//! Latent rescaling: shrink a diffusion latent into a real, viewable
//! low-resolution image and grow an approximate latent back from it.
//!
//! The downscale path encodes the latent (with bicubic pixel guidance) into a
//! compact 3-channel map, converts features to pixel values through an
//! invertible map, and quantizes to 8-bit storage. The upscale path inverts
//! the conversion and decodes back to latent resolution; a diffusion step
//! elsewhere cleans up what the round trip lost.

mod coder;
mod inn;
mod losses;

pub use coder::{halvings, GuidancePyramid, LatentDecoder, LatentEncoder, CODER_WIDTH, RES_BLOCKS};
pub use inn::{Inn, COUPLING_BLOCKS, INN_CHANNELS};
pub use losses::{
    gui_from_code, loss_gui, loss_rec, loss_res, rec_from_chains, RescaleLossParts,
    RescaleLossWeights,
};

use ndarray::{Array3, ArrayD, Axis};
use rand::Rng;

use crate::autodiff::{Graph, T};
use crate::autodiff::ParamStore;
use crate::codec::{LATENT_CHANNELS, LATENT_REDUCTION};
use crate::err::{Error, Result};
use crate::image::{dequantize, quantize_value, Image, ValueRange};
use crate::scalar::Scalar;

/// Ablation switches for the rescaler. Both paths stay shape-compatible.
#[derive(Debug, Clone, Copy)]
pub struct DfrmOptions {
    /// Route the compact code through the invertible feature/pixel map.
    /// When off, the code is stored as pixels directly.
    pub use_inn: bool,
    /// Inject bicubic pixel guidance into the downscale encoder.
    pub use_guidance: bool,
}

impl Default for DfrmOptions {
    fn default() -> Self {
        Self { use_inn: true, use_guidance: true }
    }
}

/// The full rescaler: guided encoder, invertible converter, and decoder,
/// bound to one pixel-space factor.
pub struct Dfrm {
    ge: LatentEncoder,
    gd: LatentDecoder,
    inn: Inn,
    factor: usize,
    options: DfrmOptions,
}

impl Dfrm {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, rng: &mut impl Rng, factor: usize) -> Result<Self> {
        Self::with_options(ps, rng, factor, DfrmOptions::default())
    }

    pub fn with_options<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut impl Rng,
        factor: usize,
        options: DfrmOptions,
    ) -> Result<Self> {
        halvings(factor)?;
        let ge = LatentEncoder::new(ps, rng, "ge", factor, options.use_guidance)?;
        let gd = LatentDecoder::new(ps, rng, "gd", factor)?;
        let inn = Inn::new(ps, rng, "inn")?;
        Ok(Self { ge, gd, inn, factor, options })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn options(&self) -> DfrmOptions {
        self.options
    }

    /// Encoder stage: latent batch to compact code.
    pub fn encode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        z: T,
        pyr: &GuidancePyramid<S>,
    ) -> Result<T> {
        self.ge.forward(g, ps, z, pyr)
    }

    /// Feature-to-pixel conversion (identity when the invertible map is off).
    pub fn to_pixels<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, v: T) -> Result<T> {
        if self.options.use_inn {
            self.inn.forward(g, ps, v)
        } else {
            Ok(v)
        }
    }

    /// Pixel-to-feature conversion, the exact inverse of [`Self::to_pixels`].
    pub fn from_pixels<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, u: T) -> Result<T> {
        if self.options.use_inn {
            self.inn.inverse(g, ps, u)
        } else {
            Ok(u)
        }
    }

    /// Decoder stage: compact code back to latent resolution.
    pub fn decode<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, v: T) -> Result<T> {
        self.gd.forward(g, ps, v)
    }

    fn check_pair<S: Scalar>(&self, x: &Image<S>, z: &Array3<S>) -> Result<()> {
        let (h, w) = (x.height(), x.width());
        if x.channels() != 3 {
            return Err(Error::invalid("downscale expects a 3-channel image"));
        }
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::invalid(format!(
                "image {h}x{w} is not divisible by the rescale factor {}",
                self.factor
            )));
        }
        let want = (LATENT_CHANNELS, h / LATENT_REDUCTION, w / LATENT_REDUCTION);
        if z.dim() != want {
            return Err(Error::invalid(format!(
                "latent shape {:?} does not match image {h}x{w} (expected {want:?})",
                z.dim()
            )));
        }
        Ok(())
    }

    /// Shrinks `(x, z)` to the stored low-resolution image.
    ///
    /// Returns the quantized 8-bit image and the pre-quantization compact
    /// code that produced it. `z` must be the latent of `x`.
    pub fn downscale<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        x: &Image<S>,
        z: &Array3<S>,
    ) -> Result<(Image<S>, Array3<S>)> {
        self.check_pair(x, z)?;
        let xu = x.to_unit();
        let pyr = GuidancePyramid::build(std::slice::from_ref(&xu), self.factor)?;
        let mut g = Graph::new();
        let zn = g.constant(z.clone().insert_axis(Axis(0)).into_dyn());
        let code = self.encode(&mut g, ps, zn, &pyr)?;
        let u = self.to_pixels(&mut g, ps, code)?;
        let uv = g.value(u);
        let (lh, lw) = (uv.shape()[2], uv.shape()[3]);
        let y = Image::from_fn(3, lh, lw, ValueRange::EightBit, |c, i, j| {
            quantize_value(uv[[0, c, i, j]].as_f64())
        })?;
        let code_arr = g
            .value(code)
            .clone()
            .remove_axis(Axis(0))
            .into_dimensionality()
            .expect("compact code is 3-d per sample");
        Ok((y, code_arr))
    }

    /// Grows a stored low-resolution image back to an approximate latent
    /// `[4, h * factor / 8, w * factor / 8]`.
    pub fn upscale<S: Scalar>(&self, ps: &ParamStore<S>, y: &Image<S>) -> Result<Array3<S>> {
        if y.channels() != 3 {
            return Err(Error::invalid("upscale expects a 3-channel image"));
        }
        if y.range() != ValueRange::EightBit {
            return Err(Error::invalid("upscale expects the stored 8-bit image"));
        }
        let unit = dequantize(y)?;
        let mut g = Graph::new();
        let un = g.constant(unit.data().clone().insert_axis(Axis(0)).into_dyn());
        let v = self.from_pixels(&mut g, ps, un)?;
        let z_hat = self.decode(&mut g, ps, v)?;
        let arr: ArrayD<S> = g.value(z_hat).clone();
        Ok(arr
            .remove_axis(Axis(0))
            .into_dimensionality()
            .expect("latent estimate is 3-d per sample"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_image(seed: u64, h: usize, w: usize) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(3, h, w, ValueRange::Unit, |_, _, _| rng.gen_range(-0.9..0.9)).unwrap()
    }

    fn random_latent(seed: u64, h: usize, w: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((LATENT_CHANNELS, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn round_trip_shapes_follow_the_factor_law() {
        for (factor, side) in [(8usize, 64usize), (16, 64), (32, 64)] {
            let mut ps = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(factor as u64);
            let dfrm = Dfrm::new(&mut ps, &mut rng, factor).unwrap();
            let x = unit_image(1, side, side);
            let z = random_latent(2, side / 8, side / 8);

            let (y, code) = dfrm.downscale(&ps, &x, &z).unwrap();
            assert_eq!(y.range(), ValueRange::EightBit);
            assert_eq!(
                (y.channels(), y.height(), y.width()),
                (3, side / factor, side / factor)
            );
            assert_eq!(code.dim(), (3, side / factor, side / factor));

            let z_hat = dfrm.upscale(&ps, &y).unwrap();
            assert_eq!(z_hat.dim(), z.dim());
        }
    }

    #[test]
    fn stored_image_is_integer_valued() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dfrm = Dfrm::new(&mut ps, &mut rng, 16).unwrap();
        let x = unit_image(4, 32, 48);
        let z = random_latent(5, 4, 6);
        let (y, _) = dfrm.downscale(&ps, &x, &z).unwrap();
        for &v in y.data().iter() {
            assert_eq!(v, v.round());
            assert!((0.0..=255.0).contains(&v));
        }
    }

    #[test]
    fn downscale_rejects_mismatched_latent() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dfrm = Dfrm::new(&mut ps, &mut rng, 16).unwrap();
        let x = unit_image(7, 32, 32);
        let z = random_latent(8, 8, 8);
        assert!(dfrm.downscale(&ps, &x, &z).is_err());
    }

    #[test]
    fn upscale_rejects_unit_range_input() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dfrm = Dfrm::new(&mut ps, &mut rng, 16).unwrap();
        let y = unit_image(10, 4, 4);
        assert!(dfrm.upscale(&ps, &y).is_err());
    }

    #[test]
    fn disabling_the_invertible_map_stores_the_code_directly() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let opts = DfrmOptions { use_inn: false, use_guidance: true };
        let dfrm = Dfrm::with_options(&mut ps, &mut rng, 16, opts).unwrap();
        let x = unit_image(12, 32, 32);
        let z = random_latent(13, 4, 4);
        let (y, code) = dfrm.downscale(&ps, &x, &z).unwrap();
        for c in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    let q = quantize_value(code[[c, i, j]]);
                    assert_eq!(y.get(c, i, j), q);
                }
            }
        }
    }
}
