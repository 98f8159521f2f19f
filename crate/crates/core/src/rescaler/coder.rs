//! Latent rescaling coder: a downscaling encoder guided by pixel detail and
//! an upscaling decoder that works from the compact map alone.
//!
//! The encoder sees the diffusion latent plus a bicubic pyramid of the source
//! image, so pixel structure that the latent alone underrepresents can steer
//! the compact code. The decoder runs at restoration time when no source
//! pixels exist, so it takes nothing but the code.

use ndarray::ArrayD;
use rand::Rng;

use crate::autodiff::{Graph, T};
use crate::autodiff::nn::{Conv2d, Init};
use crate::autodiff::ops;
use crate::autodiff::ParamStore;
use crate::codec::LATENT_CHANNELS;
use crate::err::{Error, Result};
use crate::image::{resize_to, Image, ValueRange};
use crate::scalar::Scalar;

use super::inn::INN_CHANNELS;

/// Feature width shared by the encoder and decoder trunks.
pub const CODER_WIDTH: usize = 48;
/// Residual blocks in each trunk.
pub const RES_BLOCKS: usize = 3;
const LRELU: f64 = 0.1;

/// Returns how many spatial halvings separate the latent grid from the
/// compact grid for a pixel-space `factor`, rejecting unsupported factors.
pub fn halvings(factor: usize) -> Result<usize> {
    if factor < 8 || !factor.is_power_of_two() {
        return Err(Error::invalid(format!(
            "rescale factor must be a power of two >= 8, got {factor}"
        )));
    }
    Ok((factor / 8).trailing_zeros() as usize)
}

/// Bicubic reductions of a source batch at every grid the encoder visits.
///
/// Level `j` holds the batch at `1/(8 * 2^j)` of the pixel resolution, so
/// level 0 matches the latent grid and the last level matches the compact
/// grid. The last level doubles as the regression target that keeps the
/// compact code viewable as an ordinary small image.
pub struct GuidancePyramid<S: Scalar> {
    levels: Vec<ArrayD<S>>,
}

impl<S: Scalar> GuidancePyramid<S> {
    /// Builds the pyramid for a batch of same-sized unit-range images.
    pub fn build(images: &[Image<S>], factor: usize) -> Result<Self> {
        let k = halvings(factor)?;
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("guidance pyramid needs at least one image"))?;
        let (c, h, w) = (first.channels(), first.height(), first.width());
        if c != 3 {
            return Err(Error::invalid("guidance pyramid expects 3-channel images"));
        }
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::invalid(format!(
                "image {h}x{w} is not divisible by the rescale factor {factor}"
            )));
        }
        let mut levels = Vec::with_capacity(k + 1);
        for j in 0..=k {
            let step = 8 << j;
            let (lh, lw) = (h / step, w / step);
            let mut level = ArrayD::zeros(vec![images.len(), 3, lh, lw]);
            for (i, img) in images.iter().enumerate() {
                if (img.channels(), img.height(), img.width()) != (c, h, w) {
                    return Err(Error::invalid("guidance pyramid images must share one size"));
                }
                if img.range() != ValueRange::Unit {
                    return Err(Error::invalid("guidance pyramid expects unit-range images"));
                }
                let small = resize_to(img, lh, lw)?;
                level
                    .index_axis_mut(ndarray::Axis(0), i)
                    .assign(small.data());
            }
            levels.push(level);
        }
        Ok(Self { levels })
    }

    /// Number of levels (`halvings + 1`).
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Level `j`, shaped `[n, 3, h / 2^j, w / 2^j]` relative to the latent grid.
    pub fn level(&self, j: usize) -> &ArrayD<S> {
        &self.levels[j]
    }

    /// The coarsest level: the bicubic image at the compact-code resolution.
    pub fn lr_target(&self) -> &ArrayD<S> {
        self.levels.last().expect("pyramid has at least one level")
    }
}

fn res_pair<S: Scalar>(
    ps: &mut ParamStore<S>,
    rng: &mut impl Rng,
    name: &str,
    i: usize,
) -> Result<(Conv2d, Conv2d)> {
    let a = Conv2d::new(ps, rng, &format!("{name}.res{i}a"), CODER_WIDTH, CODER_WIDTH, 3, 1, 1, Init::He)?;
    let b = Conv2d::new(ps, rng, &format!("{name}.res{i}b"), CODER_WIDTH, CODER_WIDTH, 3, 1, 1, Init::Zero)?;
    Ok((a, b))
}

fn res_forward<S: Scalar>(g: &mut Graph<S>, ps: &ParamStore<S>, pair: &(Conv2d, Conv2d), h: T) -> T {
    let y = pair.0.forward(g, ps, h);
    let y = ops::leaky_relu(g, y, LRELU);
    let y = pair.1.forward(g, ps, y);
    ops::add(g, h, y)
}

/// Downscaling encoder: latent `[n, 4, h, w]` to compact code
/// `[n, 3, h / 2^k, w / 2^k]`, with bicubic guidance injected at every grid.
pub struct LatentEncoder {
    c0: Conv2d,
    inject: Vec<Conv2d>,
    down: Vec<Conv2d>,
    res: Vec<(Conv2d, Conv2d)>,
    out: Conv2d,
    halvings: usize,
    use_guidance: bool,
}

impl LatentEncoder {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        factor: usize,
        use_guidance: bool,
    ) -> Result<Self> {
        let k = halvings(factor)?;
        let c0 = Conv2d::new(ps, rng, &format!("{name}.c0"), LATENT_CHANNELS, CODER_WIDTH, 3, 1, 1, Init::He)?;
        let mut inject = Vec::new();
        if use_guidance {
            for j in 0..=k {
                inject.push(Conv2d::new(
                    ps,
                    rng,
                    &format!("{name}.inject{j}"),
                    CODER_WIDTH + 3,
                    CODER_WIDTH,
                    1,
                    1,
                    0,
                    Init::He,
                )?);
            }
        }
        let mut down = Vec::new();
        for j in 0..k {
            down.push(Conv2d::new(
                ps,
                rng,
                &format!("{name}.down{j}"),
                CODER_WIDTH,
                CODER_WIDTH,
                3,
                2,
                1,
                Init::He,
            )?);
        }
        let mut res = Vec::new();
        for i in 0..RES_BLOCKS {
            res.push(res_pair(ps, rng, name, i)?);
        }
        let out = Conv2d::new(ps, rng, &format!("{name}.out"), CODER_WIDTH, INN_CHANNELS, 3, 1, 1, Init::He)?;
        Ok(Self { c0, inject, down, res, out, halvings: k, use_guidance })
    }

    pub fn halvings(&self) -> usize {
        self.halvings
    }

    fn check_input<S: Scalar>(&self, z: &ArrayD<S>, pyr: &GuidancePyramid<S>) -> Result<()> {
        let shape = z.shape();
        if shape.len() != 4 || shape[1] != LATENT_CHANNELS {
            return Err(Error::invalid(format!(
                "encoder expects [n, {LATENT_CHANNELS}, h, w] latents, got {shape:?}"
            )));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let step = 1 << self.halvings;
        if h % step != 0 || w % step != 0 || h / step == 0 || w / step == 0 {
            return Err(Error::invalid(format!(
                "latent grid {h}x{w} does not survive {} halvings",
                self.halvings
            )));
        }
        if self.use_guidance {
            if pyr.len() != self.halvings + 1 {
                return Err(Error::invalid(format!(
                    "guidance pyramid has {} levels, encoder needs {}",
                    pyr.len(),
                    self.halvings + 1
                )));
            }
            for j in 0..pyr.len() {
                let want = [n, 3, h >> j, w >> j];
                if pyr.level(j).shape() != want {
                    return Err(Error::invalid(format!(
                        "guidance level {j} is {:?}, expected {want:?}",
                        pyr.level(j).shape()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Encodes a latent batch into the compact code, consulting the pyramid
    /// unless guidance is disabled.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        z: T,
        pyr: &GuidancePyramid<S>,
    ) -> Result<T> {
        self.check_input(g.value(z), pyr)?;
        let mut h = self.c0.forward(g, ps, z);
        h = ops::leaky_relu(g, h, LRELU);
        h = self.mix_guidance(g, ps, h, pyr, 0);
        for j in 0..self.halvings {
            h = self.down[j].forward(g, ps, h);
            h = ops::leaky_relu(g, h, LRELU);
            h = self.mix_guidance(g, ps, h, pyr, j + 1);
        }
        for pair in &self.res {
            h = res_forward(g, ps, pair, h);
        }
        Ok(self.out.forward(g, ps, h))
    }

    fn mix_guidance<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        h: T,
        pyr: &GuidancePyramid<S>,
        j: usize,
    ) -> T {
        if !self.use_guidance {
            return h;
        }
        let guide = g.constant(pyr.level(j).clone());
        let cat = ops::concat_c(g, &[h, guide]);
        let mixed = self.inject[j].forward(g, ps, cat);
        ops::leaky_relu(g, mixed, LRELU)
    }
}

/// Upscaling decoder: compact code `[n, 3, h, w]` back to a latent
/// `[n, 4, h * 2^k, w * 2^k]`, using no source-image information.
pub struct LatentDecoder {
    c0: Conv2d,
    res: Vec<(Conv2d, Conv2d)>,
    up: Vec<Conv2d>,
    out: Conv2d,
    halvings: usize,
}

impl LatentDecoder {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        factor: usize,
    ) -> Result<Self> {
        let k = halvings(factor)?;
        let c0 = Conv2d::new(ps, rng, &format!("{name}.c0"), INN_CHANNELS, CODER_WIDTH, 3, 1, 1, Init::He)?;
        let mut res = Vec::new();
        for i in 0..RES_BLOCKS {
            res.push(res_pair(ps, rng, name, i)?);
        }
        let mut up = Vec::new();
        for j in 0..k {
            up.push(Conv2d::new(
                ps,
                rng,
                &format!("{name}.up{j}"),
                CODER_WIDTH,
                CODER_WIDTH,
                3,
                1,
                1,
                Init::He,
            )?);
        }
        let out = Conv2d::new(ps, rng, &format!("{name}.out"), CODER_WIDTH, LATENT_CHANNELS, 3, 1, 1, Init::He)?;
        Ok(Self { c0, res, up, out, halvings: k })
    }

    pub fn halvings(&self) -> usize {
        self.halvings
    }

    /// Decodes the compact code back to latent resolution.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, v: T) -> Result<T> {
        let shape = g.value(v).shape().to_vec();
        if shape.len() != 4 || shape[1] != INN_CHANNELS {
            return Err(Error::invalid(format!(
                "decoder expects [n, {INN_CHANNELS}, h, w] codes, got {shape:?}"
            )));
        }
        let mut h = self.c0.forward(g, ps, v);
        h = ops::leaky_relu(g, h, LRELU);
        for pair in &self.res {
            h = res_forward(g, ps, pair, h);
        }
        for conv in &self.up {
            h = ops::upsample_nearest2(g, h);
            h = conv.forward(g, ps, h);
            h = ops::leaky_relu(g, h, LRELU);
        }
        Ok(self.out.forward(g, ps, h))
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

    #[test]
    fn halvings_follow_the_factor() {
        assert_eq!(halvings(8).unwrap(), 0);
        assert_eq!(halvings(16).unwrap(), 1);
        assert_eq!(halvings(32).unwrap(), 2);
        assert!(halvings(12).is_err());
        assert!(halvings(4).is_err());
    }

    #[test]
    fn pyramid_levels_shrink_to_the_compact_grid() {
        let imgs = [unit_image(1, 64, 96), unit_image(2, 64, 96)];
        let pyr = GuidancePyramid::build(&imgs, 32).unwrap();
        assert_eq!(pyr.len(), 3);
        assert_eq!(pyr.level(0).shape(), [2, 3, 8, 12]);
        assert_eq!(pyr.level(1).shape(), [2, 3, 4, 6]);
        assert_eq!(pyr.lr_target().shape(), [2, 3, 2, 3]);
    }

    #[test]
    fn pyramid_rejects_sizes_off_the_factor_grid() {
        let imgs = [unit_image(3, 40, 40)];
        assert!(GuidancePyramid::build(&imgs, 16).is_err());
    }

    #[test]
    fn encoder_decoder_shapes_mirror_each_other() {
        for factor in [8usize, 16, 32] {
            let mut ps = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let ge = LatentEncoder::new(&mut ps, &mut rng, "ge", factor, true).unwrap();
            let gd = LatentDecoder::new(&mut ps, &mut rng, "gd", factor).unwrap();
            let imgs = [unit_image(4, 64, 64)];
            let pyr = GuidancePyramid::build(&imgs, factor).unwrap();
            let mut rng2 = ChaCha8Rng::seed_from_u64(5);
            let z = ArrayD::from_shape_fn(vec![1, 4, 8, 8], |_| rng2.gen_range(-1.0..1.0));

            let mut g = Graph::new();
            let zn = g.constant(z);
            let code = ge.forward(&mut g, &ps, zn, &pyr).unwrap();
            let side = 8 / (factor / 8);
            assert_eq!(g.value(code).shape(), [1, 3, side, side]);
            let back = gd.forward(&mut g, &ps, code).unwrap();
            assert_eq!(g.value(back).shape(), [1, 4, 8, 8]);
        }
    }

    #[test]
    fn guidance_changes_the_code() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ge = LatentEncoder::new(&mut ps, &mut rng, "ge", 16, true).unwrap();
        let z = ArrayD::from_elem(vec![1, 4, 8, 8], 0.25);

        let run = |img: Image<f64>| {
            let pyr = GuidancePyramid::build(&[img], 16).unwrap();
            let mut g = Graph::new();
            let zn = g.constant(z.clone());
            let code = ge.forward(&mut g, &ps, zn, &pyr).unwrap();
            g.value(code).clone()
        };
        let a = run(unit_image(20, 64, 64));
        let b = run(unit_image(21, 64, 64));
        let diff = (&a - &b).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff > 1e-9, "distinct source images should steer the code, max diff {diff}");
    }

    #[test]
    fn disabled_guidance_ignores_the_source_image() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ge = LatentEncoder::new(&mut ps, &mut rng, "ge", 16, false).unwrap();
        let z = ArrayD::from_elem(vec![1, 4, 8, 8], 0.25);

        let run = |img: Image<f64>| {
            let pyr = GuidancePyramid::build(&[img], 16).unwrap();
            let mut g = Graph::new();
            let zn = g.constant(z.clone());
            let code = ge.forward(&mut g, &ps, zn, &pyr).unwrap();
            g.value(code).clone()
        };
        let a = run(unit_image(20, 64, 64));
        let b = run(unit_image(21, 64, 64));
        assert_eq!(a, b);
    }

    #[test]
    fn encoder_rejects_mismatched_pyramids() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ge = LatentEncoder::new(&mut ps, &mut rng, "ge", 16, true).unwrap();
        let pyr = GuidancePyramid::build(&[unit_image(6, 32, 32)], 16).unwrap();
        let z = ArrayD::from_elem(vec![1, 4, 8, 8], 0.0);
        let mut g = Graph::new();
        let zn = g.constant(z);
        assert!(ge.forward(&mut g, &ps, zn, &pyr).is_err());
    }
}
