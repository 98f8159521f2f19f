//! Layers: convolution, linear, and low-rank adapted convolution.
//!
//! Layers register their parameters in a [`ParamStore`] under hierarchical
//! dotted names and rebuild their piece of the graph on every forward call.

use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, T};
use super::ops;
use super::store::{ParamId, ParamStore};
use crate::err::Result;
use crate::scalar::Scalar;

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    He,
    /// Normal with the given std.
    Normal(f64),
    /// All zeros (identity-at-init output layers).
    Zero,
}

fn sample<S: Scalar>(rng: &mut impl Rng, shape: &[usize], init: Init, fan_in: usize) -> ArrayD<S> {
    match init {
        Init::Zero => ArrayD::zeros(IxDyn(shape)),
        Init::He => {
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("valid std");
            ArrayD::from_shape_fn(IxDyn(shape), |_| S::of(dist.sample(rng)))
        }
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("valid std");
            ArrayD::from_shape_fn(IxDyn(shape), |_| S::of(dist.sample(rng)))
        }
    }
}

/// A `k x k` convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
    ) -> Result<Self> {
        let w = ps.register(format!("{name}.w"), sample(rng, &[co, ci, k, k], init, ci * k * k))?;
        let b = ps.register(format!("{name}.b"), ArrayD::zeros(IxDyn(&[co])))?;
        Ok(Conv2d { w, b, stride, pad })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: T) -> T {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        ops::conv2d(g, x, w, Some(b), self.stride, self.pad)
    }
}

/// Convolution with frozen base weights plus a trainable low-rank delta:
/// `w_eff = w + (alpha / r) * reshape(B . A)`.
///
/// `B` starts at zero, so a freshly attached adapter leaves the layer's
/// function unchanged. Freezing the base and training only `*.lora_a` /
/// `*.lora_b` is a trainability-flag concern handled by the caller.
#[derive(Debug, Clone)]
pub struct LoraConv2d {
    pub base: Conv2d,
    pub lora_a: ParamId,
    pub lora_b: ParamId,
    pub scale: f64,
    co: usize,
    ci: usize,
    k: usize,
}

impl LoraConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rank: usize,
        alpha: f64,
    ) -> Result<Self> {
        let base = Conv2d::new(ps, rng, name, ci, co, k, stride, pad, init)?;
        let fan = ci * k * k;
        let lora_a =
            ps.register(format!("{name}.lora_a"), sample(rng, &[rank, fan], Init::Normal(0.02), fan))?;
        let lora_b = ps.register(format!("{name}.lora_b"), ArrayD::zeros(IxDyn(&[co, rank])))?;
        Ok(LoraConv2d { base, lora_a, lora_b, scale: alpha / rank as f64, co, ci, k })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: T) -> T {
        let w = g.param(ps, self.base.w);
        let b = g.param(ps, self.base.b);
        let a = g.param(ps, self.lora_a);
        let bb = g.param(ps, self.lora_b);
        let delta_flat = ops::matmul(g, bb, a);
        let delta_scaled = ops::scale(g, delta_flat, self.scale);
        let delta = ops::reshape(g, delta_scaled, &[self.co, self.ci, self.k, self.k]);
        let w_eff = ops::add(g, w, delta);
        ops::conv2d(g, x, w_eff, Some(b), self.base.stride, self.base.pad)
    }
}

/// Fully connected layer `x[n,f] -> [n,o]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        fi: usize,
        fo: usize,
        init: Init,
    ) -> Result<Self> {
        let w = ps.register(format!("{name}.w"), sample(rng, &[fo, fi], init, fi))?;
        let b = ps.register(format!("{name}.b"), ArrayD::zeros(IxDyn(&[fo])))?;
        Ok(Linear { w, b })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: T) -> T {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        ops::linear(g, x, w, Some(b))
    }
}

/// Loads a `[c]`-shaped constant vector, a convenience for schedules.
pub fn constant_vec<S: Scalar>(g: &mut Graph<S>, vals: &[f64]) -> T {
    let arr = Array1::from_iter(vals.iter().map(|&v| S::of(v))).into_dyn();
    g.constant(arr)
}
