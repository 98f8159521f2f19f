//! Hybrid scheduling: a fixed closed-form reversal anchored at `t₀` plus a
//! learnable correction that starts at exactly zero.

use ndarray::ArrayD;
use rand::Rng;

use crate::autodiff::{ops, Conv2d, Graph, Init, Linear, ParamStore, T};
use crate::err::{Error, Result};
use crate::scalar::Scalar;

use super::denoiser::{ToyUnet, LATENT_CHANNELS};
use super::schedule::NoiseSchedule;
use super::tpm::TimestepPredictor;

const WIDTH: usize = 32;
const EMBED_DIM: usize = 32;

/// Graph-side `(ẑ − √(1−ᾱ_{t₀})·ε) / √ᾱ_{t₀}` with an integer anchor step.
pub fn denoise_fixed_graph<S: Scalar>(
    g: &mut Graph<S>,
    z_hat: T,
    eps: T,
    t0: usize,
    sched: &NoiseSchedule,
) -> Result<T> {
    sched.check_step(t0)?;
    let a = sched.alpha_bar(t0);
    let zs = ops::scale(g, z_hat, 1.0 / a.sqrt());
    let es = ops::scale(g, eps, (1.0 - a).sqrt() / a.sqrt());
    Ok(ops::sub(g, zs, es))
}

/// Learnable correction term over `concat(ẑ, ε)`, modulated by the continuous
/// time-step. The output convolution's weights and bias start at zero, so the
/// whole branch contributes nothing until training moves it.
#[derive(Debug, Clone)]
pub struct LearnedScheduler {
    embed: Linear,
    film0: Linear,
    film1: Linear,
    c0: Conv2d,
    c1: Conv2d,
    out: Conv2d,
    t_max: usize,
}

impl LearnedScheduler {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        t_max: usize,
    ) -> Result<Self> {
        let embed = Linear::new(ps, rng, &format!("{name}.embed"), EMBED_DIM, EMBED_DIM, Init::He)?;
        let film0 = Linear::new(ps, rng, &format!("{name}.film0"), EMBED_DIM, 2 * WIDTH, Init::Normal(0.01))?;
        let film1 = Linear::new(ps, rng, &format!("{name}.film1"), EMBED_DIM, 2 * WIDTH, Init::Normal(0.01))?;
        let c0 = Conv2d::new(ps, rng, &format!("{name}.c0"), 2 * LATENT_CHANNELS, WIDTH, 3, 1, 1, Init::He)?;
        let c1 = Conv2d::new(ps, rng, &format!("{name}.c1"), WIDTH, WIDTH, 3, 1, 1, Init::He)?;
        let out = Conv2d::new(ps, rng, &format!("{name}.out"), WIDTH, LATENT_CHANNELS, 3, 1, 1, Init::Zero)?;
        Ok(LearnedScheduler { embed, film0, film1, c0, c1, out, t_max })
    }

    fn modulate<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        head: &Linear,
        x: T,
        trunk: T,
    ) -> T {
        let raw = head.forward(g, ps, trunk);
        let scl_raw = ops::slice_c(g, raw, 0, WIDTH);
        let shift = ops::slice_c(g, raw, WIDTH, 2 * WIDTH);
        let scl = ops::add_scalar(g, scl_raw, 1.0);
        ops::film(g, x, scl, shift)
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, z_hat: T, eps: T, t: T) -> T {
        let emb = ops::time_embed(g, t, EMBED_DIM, self.t_max);
        let trunk_lin = self.embed.forward(g, ps, emb);
        let trunk = ops::leaky_relu(g, trunk_lin, 0.2);

        let cat = ops::concat_c(g, &[z_hat, eps]);
        let mut h = self.c0.forward(g, ps, cat);
        h = self.modulate(g, ps, &self.film0, h, trunk);
        h = ops::leaky_relu(g, h, 0.2);
        h = self.c1.forward(g, ps, h);
        h = self.modulate(g, ps, &self.film1, h, trunk);
        h = ops::leaky_relu(g, h, 0.2);
        self.out.forward(g, ps, h)
    }
}

/// Fixed anchor step plus the learnable corrector.
#[derive(Debug, Clone)]
pub struct HybridScheduler {
    pub t0: usize,
    pub learned: LearnedScheduler,
}

impl HybridScheduler {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        t_max: usize,
        t0: usize,
    ) -> Result<Self> {
        if t0 >= t_max {
            return Err(Error::invalid(format!("anchor step {t0} outside schedule of length {t_max}")));
        }
        let learned = LearnedScheduler::new(ps, rng, name, t_max)?;
        Ok(HybridScheduler { t0, learned })
    }

    /// `ẑ₀ = S_fixed(ẑ, ε, t₀) + S_learned(ẑ, ε, t)` with continuous `t: [n]`.
    pub fn denoise_hybrid<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        z_hat: T,
        eps: T,
        t: T,
        sched: &NoiseSchedule,
    ) -> Result<T> {
        let hi = (sched.len() - 1) as f64;
        for &v in g.value(t).iter() {
            let v = v.as_f64();
            if !(0.0..=hi).contains(&v) {
                return Err(Error::invalid(format!("time-step {v} outside [0, {hi}]")));
            }
        }
        let fixed = denoise_fixed_graph(g, z_hat, eps, self.t0, sched)?;
        let corr = self.learned.forward(g, ps, z_hat, eps, t);
        Ok(ops::add(g, fixed, corr))
    }
}

/// One-step enhancement: predict a per-patch time-step, estimate the noise
/// content at that step, then reverse it in a single hybrid step.
#[derive(Debug, Clone)]
pub struct Enhancer {
    pub unet: ToyUnet,
    pub tpm: TimestepPredictor,
    pub scheduler: HybridScheduler,
}

impl Enhancer {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut impl Rng,
        t_max: usize,
        t0: usize,
    ) -> Result<Self> {
        let unet = ToyUnet::new(ps, rng, "denoiser", t_max)?;
        let tpm = TimestepPredictor::new(ps, rng, "tpm", t_max)?;
        let scheduler = HybridScheduler::new(ps, rng, "scheduler", t_max, t0)?;
        Ok(Enhancer { unet, tpm, scheduler })
    }

    /// Full adaptive path; returns the enhanced latent and the predicted `t`.
    pub fn enhance<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        z_hat: T,
        sched: &NoiseSchedule,
    ) -> Result<(T, T)> {
        let t = self.tpm.predict(g, ps, z_hat);
        let eps = self.unet.predict_noise(g, ps, z_hat, t);
        let z0 = self.scheduler.denoise_hybrid(g, ps, z_hat, eps, t, sched)?;
        Ok((z0, t))
    }

    /// Ablation path: a preset time-step everywhere, no predictor and no
    /// learned correction.
    pub fn enhance_fixed<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        z_hat: T,
        t_fixed: usize,
        sched: &NoiseSchedule,
    ) -> Result<T> {
        sched.check_step(t_fixed)?;
        let n = g.value(z_hat).shape()[0];
        let tv = g.constant(ArrayD::from_elem(ndarray::IxDyn(&[n]), S::of(t_fixed as f64)));
        let eps = self.unet.predict_noise(g, ps, z_hat, tv);
        denoise_fixed_graph(g, z_hat, eps, t_fixed, sched)
    }

    /// Array convenience for inference on one latent batch.
    pub fn enhance_values<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        z_hat: &ArrayD<S>,
        sched: &NoiseSchedule,
    ) -> Result<(ArrayD<S>, Vec<f64>)> {
        if z_hat.ndim() != 4 || z_hat.shape()[1] != LATENT_CHANNELS {
            return Err(Error::invalid("latent batch must be [n, 4, h, w]"));
        }
        let mut g = Graph::new();
        let zt = g.constant(z_hat.clone());
        let (z0, t) = self.enhance(&mut g, ps, zt, sched)?;
        let ts = g.value(t).iter().map(|v| v.as_f64()).collect();
        Ok((g.value(z0).clone(), ts))
    }
}
