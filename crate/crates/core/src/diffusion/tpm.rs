//! Time-step prediction: estimates how much enhancement a latent patch needs.

use ndarray::ArrayD;
use rand::Rng;

use crate::autodiff::{ops, Conv2d, Graph, Init, Linear, ParamStore, T};
use crate::err::{Error, Result};
use crate::scalar::Scalar;

use super::denoiser::LATENT_CHANNELS;

const WIDTHS: [usize; 4] = [16, 32, 32, 32];
const HEAD: usize = 32;

/// Small convolutional regressor mapping a latent patch to a time-step in
/// `[0, T−1]`. Four stride-2 stages pool context, a sigmoid bounds the output.
#[derive(Debug, Clone)]
pub struct TimestepPredictor {
    convs: Vec<Conv2d>,
    fc0: Linear,
    fc1: Linear,
    t_max: usize,
}

impl TimestepPredictor {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        t_max: usize,
    ) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::invalid("predictor needs at least one time-step"));
        }
        let mut convs = Vec::new();
        let mut ci = LATENT_CHANNELS;
        for (i, &co) in WIDTHS.iter().enumerate() {
            convs.push(Conv2d::new(ps, rng, &format!("{name}.c{i}"), ci, co, 3, 2, 1, Init::He)?);
            ci = co;
        }
        let fc0 = Linear::new(ps, rng, &format!("{name}.fc0"), ci, HEAD, Init::He)?;
        let fc1 = Linear::new(ps, rng, &format!("{name}.fc1"), HEAD, 1, Init::He)?;
        Ok(TimestepPredictor { convs, fc0, fc1, t_max })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// Predicted time-steps `[n]` for latents `[n, 4, h, w]`, each in `[0, T−1]`.
    pub fn predict<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, z_hat: T) -> T {
        let n = g.value(z_hat).shape()[0];
        let mut h = z_hat;
        for conv in &self.convs {
            h = conv.forward(g, ps, h);
            h = ops::leaky_relu(g, h, 0.2);
        }
        let pooled = ops::global_avg_pool(g, h);
        let mut f = self.fc0.forward(g, ps, pooled);
        f = ops::leaky_relu(g, f, 0.2);
        f = self.fc1.forward(g, ps, f);
        let unit = ops::logistic(g, f);
        let scaled = ops::scale(g, unit, (self.t_max - 1) as f64);
        ops::reshape(g, scaled, &[n])
    }

    /// Array-in, array-out convenience wrapper around [`Self::predict`].
    pub fn predict_values<S: Scalar>(&self, ps: &ParamStore<S>, z_hat: &ArrayD<S>) -> Result<Vec<f64>> {
        if z_hat.ndim() != 4 || z_hat.shape()[1] != LATENT_CHANNELS {
            return Err(Error::invalid("latent batch must be [n, 4, h, w]"));
        }
        let mut g = Graph::new();
        let zt = g.constant(z_hat.clone());
        let t = self.predict(&mut g, ps, zt);
        Ok(g.value(t).iter().map(|v| v.as_f64()).collect())
    }
}
