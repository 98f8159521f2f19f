//! Noise-prediction network `ε_θ(ẑ, t)`.
//!
//! The resident backend is a small residual U-Net over `[n, 4, h, w]` latents
//! with a sinusoidal time embedding feeding per-block scale/shift modulation.
//! Continuous `t` is supported by interpolating between integer embeddings,
//! which keeps gradients flowing into whatever produced `t`.
//!
//! Every convolution carries a low-rank delta next to its base weights. That
//! is the seam for an externally pretrained denoiser: import its weights into
//! the `denoiser.*` parameter names, freeze the bases, and train only the
//! `*.lora_a` / `*.lora_b` pairs.

use rand::Rng;

use crate::autodiff::{ops, Graph, Init, Linear, LoraConv2d, ParamStore, T};
use crate::err::Result;
use crate::scalar::Scalar;

pub use crate::codec::LATENT_CHANNELS;

const WIDTH0: usize = 32;
const WIDTH1: usize = 48;
const EMBED_DIM: usize = 32;
const LORA_RANK: usize = 4;

/// Scale/shift head mapping the time trunk to one block's modulation.
#[derive(Debug, Clone)]
struct FilmHead {
    lin: Linear,
    channels: usize,
}

impl FilmHead {
    fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        trunk: usize,
        channels: usize,
    ) -> Result<Self> {
        let lin = Linear::new(ps, rng, name, trunk, 2 * channels, Init::Normal(0.01))?;
        Ok(FilmHead { lin, channels })
    }

    fn apply<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: T, trunk: T) -> T {
        let raw = self.lin.forward(g, ps, trunk);
        let scl_raw = ops::slice_c(g, raw, 0, self.channels);
        let shift = ops::slice_c(g, raw, self.channels, 2 * self.channels);
        let scl = ops::add_scalar(g, scl_raw, 1.0);
        ops::film(g, x, scl, shift)
    }
}

/// Residual U-Net predicting the noise content of a latent.
#[derive(Debug, Clone)]
pub struct ToyUnet {
    embed: Linear,
    enc0: LoraConv2d,
    enc1: LoraConv2d,
    mid0: LoraConv2d,
    mid1: LoraConv2d,
    up: LoraConv2d,
    fuse: LoraConv2d,
    out: LoraConv2d,
    films: Vec<FilmHead>,
    t_max: usize,
}

impl ToyUnet {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        t_max: usize,
    ) -> Result<Self> {
        fn lconv<S: Scalar, R: Rng>(
            ps: &mut ParamStore<S>,
            rng: &mut R,
            name: String,
            ci: usize,
            co: usize,
            stride: usize,
            init: Init,
        ) -> Result<LoraConv2d> {
            LoraConv2d::new(ps, rng, &name, ci, co, 3, stride, 1, init, LORA_RANK, LORA_RANK as f64)
        }
        let enc0 = lconv(ps, &mut *rng, format!("{name}.enc0"), LATENT_CHANNELS, WIDTH0, 1, Init::He)?;
        let enc1 = lconv(ps, &mut *rng, format!("{name}.enc1"), WIDTH0, WIDTH1, 2, Init::He)?;
        let mid0 = lconv(ps, &mut *rng, format!("{name}.mid0"), WIDTH1, WIDTH1, 1, Init::He)?;
        let mid1 = lconv(ps, &mut *rng, format!("{name}.mid1"), WIDTH1, WIDTH1, 1, Init::He)?;
        let up = lconv(ps, &mut *rng, format!("{name}.up"), WIDTH1, WIDTH0, 1, Init::He)?;
        let fuse = lconv(ps, &mut *rng, format!("{name}.fuse"), 2 * WIDTH0, WIDTH0, 1, Init::He)?;
        let out = lconv(ps, &mut *rng, format!("{name}.out"), WIDTH0, LATENT_CHANNELS, 1, Init::Zero)?;
        let embed = Linear::new(ps, rng, &format!("{name}.embed"), EMBED_DIM, WIDTH1, Init::He)?;
        let film_widths = [WIDTH0, WIDTH1, WIDTH1, WIDTH1, WIDTH0, WIDTH0];
        let films = film_widths
            .iter()
            .enumerate()
            .map(|(i, &c)| FilmHead::new(ps, rng, &format!("{name}.film{i}"), WIDTH1, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(ToyUnet { embed, enc0, enc1, mid0, mid1, up, fuse, out, films, t_max })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// `ε_θ(ẑ, t)` for `ẑ: [n, 4, h, w]` (even `h`, `w`) and `t: [n]`.
    ///
    /// The output head starts at zero, so an untrained network predicts the
    /// input itself; training bends that estimate toward the true noise.
    pub fn predict_noise<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, z_hat: T, t: T) -> T {
        let shape = g.value(z_hat).shape().to_vec();
        assert_eq!(shape.len(), 4, "latent must be [n, c, h, w]");
        assert_eq!(shape[1], LATENT_CHANNELS, "latent channel mismatch");
        assert!(shape[2] % 2 == 0 && shape[3] % 2 == 0, "latent sides must be even");

        let emb = ops::time_embed(g, t, EMBED_DIM, self.t_max);
        let trunk_lin = self.embed.forward(g, ps, emb);
        let trunk = ops::leaky_relu(g, trunk_lin, 0.2);

        let mut h = self.enc0.forward(g, ps, z_hat);
        h = self.films[0].apply(g, ps, h, trunk);
        let e0 = ops::leaky_relu(g, h, 0.2);

        let mut d = self.enc1.forward(g, ps, e0);
        d = self.films[1].apply(g, ps, d, trunk);
        let e1 = ops::leaky_relu(g, d, 0.2);

        let mut m = self.mid0.forward(g, ps, e1);
        m = self.films[2].apply(g, ps, m, trunk);
        m = ops::leaky_relu(g, m, 0.2);
        m = self.mid1.forward(g, ps, m);
        m = self.films[3].apply(g, ps, m, trunk);
        m = ops::leaky_relu(g, m, 0.2);
        let mid = ops::add(g, e1, m);

        let grown = ops::upsample_nearest2(g, mid);
        let mut u = self.up.forward(g, ps, grown);
        u = self.films[4].apply(g, ps, u, trunk);
        u = ops::leaky_relu(g, u, 0.2);

        let cat = ops::concat_c(g, &[u, e0]);
        let mut f = self.fuse.forward(g, ps, cat);
        f = self.films[5].apply(g, ps, f, trunk);
        f = ops::leaky_relu(g, f, 0.2);

        let head = self.out.forward(g, ps, f);
        ops::add(g, z_hat, head)
    }
}
