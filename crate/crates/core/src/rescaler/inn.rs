//! Invertible network bridging the compact feature domain and the LR pixel
//! domain. Built from affine coupling blocks, so the inverse is exact by
//! construction regardless of parameter values.

use ndarray::ArrayD;
use rand::Rng;

use crate::autodiff::{ops, Conv2d, Graph, Init, ParamStore, T};
use crate::err::{Error, Result};
use crate::scalar::Scalar;

pub const INN_CHANNELS: usize = 3;
pub const COUPLING_BLOCKS: usize = 8;

const HIDDEN: usize = 16;

/// One affine coupling step: the first channel conditions a scale/shift of the
/// other two, followed by a fixed channel rotation. The scale is `exp(tanh(·))`
/// so it stays in `[e⁻¹, e]` and the inverse never divides by anything small.
#[derive(Debug, Clone)]
struct CouplingBlock {
    c0: Conv2d,
    c1: Conv2d,
}

impl CouplingBlock {
    fn new<S: Scalar>(ps: &mut ParamStore<S>, rng: &mut impl Rng, name: &str) -> Result<Self> {
        let c0 = Conv2d::new(ps, rng, &format!("{name}.c0"), 1, HIDDEN, 3, 1, 1, Init::He)?;
        let c1 = Conv2d::new(ps, rng, &format!("{name}.c1"), HIDDEN, 4, 3, 1, 1, Init::Zero)?;
        Ok(CouplingBlock { c0, c1 })
    }

    /// `(log_scale, shift)` of the transformed channels, conditioned on `cond`.
    fn affine<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, cond: T) -> (T, T) {
        let mut h = self.c0.forward(g, ps, cond);
        h = ops::leaky_relu(g, h, 0.2);
        let out = self.c1.forward(g, ps, h);
        let raw = ops::slice_c(g, out, 0, 2);
        let shift = ops::slice_c(g, out, 2, 4);
        let log_scale = ops::tanh(g, raw);
        (log_scale, shift)
    }
}

fn rotate<S: Scalar>(g: &mut Graph<S>, v: T) -> T {
    let tail = ops::slice_c(g, v, 2, 3);
    let head = ops::slice_c(g, v, 0, 2);
    ops::concat_c(g, &[tail, head])
}

fn rotate_back<S: Scalar>(g: &mut Graph<S>, v: T) -> T {
    let head = ops::slice_c(g, v, 1, 3);
    let tail = ops::slice_c(g, v, 0, 1);
    ops::concat_c(g, &[head, tail])
}

/// Stack of coupling blocks over `[n, 3, h, w]` tensors.
#[derive(Debug, Clone)]
pub struct Inn {
    blocks: Vec<CouplingBlock>,
}

impl Inn {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, rng: &mut impl Rng, name: &str) -> Result<Self> {
        let blocks = (0..COUPLING_BLOCKS)
            .map(|i| CouplingBlock::new(ps, rng, &format!("{name}.b{i}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Inn { blocks })
    }

    fn check<S: Scalar>(g: &Graph<S>, v: T) -> Result<()> {
        let shape = g.value(v).shape();
        if shape.len() != 4 || shape[1] != INN_CHANNELS {
            return Err(Error::invalid(format!(
                "invertible stage expects [n, {INN_CHANNELS}, h, w], got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Feature → pixel map, plus the log-determinant of its Jacobian (the sum
    /// of all coupling log-scales over the whole batch).
    pub fn forward_with_logdet<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        v: T,
    ) -> Result<(T, T)> {
        Self::check(g, v)?;
        let mut cur = v;
        let mut logdet: Option<T> = None;
        for block in &self.blocks {
            let cond = ops::slice_c(g, cur, 0, 1);
            let rest = ops::slice_c(g, cur, 1, 3);
            let (log_scale, shift) = block.affine(g, ps, cond);
            let scale = ops::exp(g, log_scale);
            let scaled = ops::mul(g, rest, scale);
            let moved = ops::add(g, scaled, shift);
            let merged = ops::concat_c(g, &[cond, moved]);
            cur = rotate(g, merged);
            let contrib = ops::sum_all(g, log_scale);
            logdet = Some(match logdet {
                Some(acc) => ops::add(g, acc, contrib),
                None => contrib,
            });
        }
        Ok((cur, logdet.expect("at least one block")))
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, v: T) -> Result<T> {
        Ok(self.forward_with_logdet(g, ps, v)?.0)
    }

    /// Pixel → feature map, the exact inverse of [`Self::forward`].
    pub fn inverse<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, u: T) -> Result<T> {
        Self::check(g, u)?;
        let mut cur = u;
        for block in self.blocks.iter().rev() {
            cur = rotate_back(g, cur);
            let cond = ops::slice_c(g, cur, 0, 1);
            let moved = ops::slice_c(g, cur, 1, 3);
            let (log_scale, shift) = block.affine(g, ps, cond);
            let neg_log = ops::neg(g, log_scale);
            let inv_scale = ops::exp(g, neg_log);
            let shifted = ops::sub(g, moved, shift);
            let rest = ops::mul(g, shifted, inv_scale);
            cur = ops::concat_c(g, &[cond, rest]);
        }
        Ok(cur)
    }

    /// Array-level forward for inference.
    pub fn forward_values<S: Scalar>(&self, ps: &ParamStore<S>, v: &ArrayD<S>) -> Result<ArrayD<S>> {
        let mut g = Graph::new();
        let vt = g.constant(v.clone());
        let out = self.forward(&mut g, ps, vt)?;
        Ok(g.value(out).clone())
    }

    /// Array-level inverse for inference.
    pub fn inverse_values<S: Scalar>(&self, ps: &ParamStore<S>, u: &ArrayD<S>) -> Result<ArrayD<S>> {
        let mut g = Graph::new();
        let ut = g.constant(u.clone());
        let out = self.inverse(&mut g, ps, ut)?;
        Ok(g.value(out).clone())
    }
}
