//! Enhancement objective: pixel L1 plus weighted perceptual terms.
//!
//! Perceptual metrics are pluggable behind [`PerceptualTerm`]. The resident
//! pair needs no pretrained weights: a multi-scale gradient-magnitude L1 and a
//! local-structure dissimilarity over sliding windows. Both operate on
//! `[n, c, h, w]` tensors in the `[-1, 1]` range.

use crate::autodiff::{ops, Graph, T};
use crate::err::{Error, Result};
use crate::scalar::Scalar;

/// A differentiable image-similarity penalty; zero when the inputs match.
pub trait PerceptualTerm<S: Scalar> {
    fn name(&self) -> &'static str;
    fn eval(&self, g: &mut Graph<S>, a: T, b: T) -> Result<T>;
}

/// L1 between horizontal/vertical difference maps, averaged over `levels`
/// dyadic scales. Penalizes edge softening that a plain pixel loss tolerates.
#[derive(Debug, Clone)]
pub struct GradientMagnitude {
    pub levels: usize,
}

impl Default for GradientMagnitude {
    fn default() -> Self {
        GradientMagnitude { levels: 2 }
    }
}

impl<S: Scalar> PerceptualTerm<S> for GradientMagnitude {
    fn name(&self) -> &'static str {
        "grad-mag"
    }

    fn eval(&self, g: &mut Graph<S>, a: T, b: T) -> Result<T> {
        if self.levels == 0 {
            return Err(Error::invalid("gradient term needs at least one level"));
        }
        let shape = g.value(a).shape().to_vec();
        if shape.len() != 4 || shape[2] < 2 || shape[3] < 2 {
            return Err(Error::invalid("gradient term needs [n, c, h>=2, w>=2]"));
        }
        let mut total: Option<T> = None;
        let mut pieces = 0usize;
        let (mut xa, mut xb) = (a, b);
        for level in 0..self.levels {
            let (h, w) = {
                let s = g.value(xa).shape();
                (s[2], s[3])
            };
            let dxa = diff_w(g, xa, w);
            let dxb = diff_w(g, xb, w);
            let dya = diff_h(g, xa, h);
            let dyb = diff_h(g, xb, h);
            let lx = ops::l1_mean(g, dxa, dxb);
            let ly = ops::l1_mean(g, dya, dyb);
            let lvl = ops::add(g, lx, ly);
            total = Some(match total {
                Some(t) => ops::add(g, t, lvl),
                None => lvl,
            });
            pieces += 2;
            let can_halve = h >= 4 && w >= 4 && h % 2 == 0 && w % 2 == 0;
            if level + 1 < self.levels && can_halve {
                xa = ops::avg_pool2(g, xa);
                xb = ops::avg_pool2(g, xb);
            } else if level + 1 < self.levels {
                break;
            }
        }
        let sum = total.expect("at least one level ran");
        Ok(ops::scale(g, sum, 1.0 / pieces as f64))
    }
}

fn diff_w<S: Scalar>(g: &mut Graph<S>, x: T, w: usize) -> T {
    let hi = ops::slice_w(g, x, 1, w);
    let lo = ops::slice_w(g, x, 0, w - 1);
    ops::sub(g, hi, lo)
}

fn diff_h<S: Scalar>(g: &mut Graph<S>, x: T, h: usize) -> T {
    let hi = ops::slice_h(g, x, 1, h);
    let lo = ops::slice_h(g, x, 0, h - 1);
    ops::sub(g, hi, lo)
}

/// Mean structural dissimilarity over `window`-sized neighborhoods, with the
/// stabilizers chosen for a dynamic range of 2 (signals in `[-1, 1]`).
#[derive(Debug, Clone)]
pub struct LocalStructure {
    pub window: usize,
}

impl Default for LocalStructure {
    fn default() -> Self {
        LocalStructure { window: 7 }
    }
}

const STRUCT_C1: f64 = 4e-4;
const STRUCT_C2: f64 = 3.6e-3;

impl<S: Scalar> PerceptualTerm<S> for LocalStructure {
    fn name(&self) -> &'static str {
        "local-structure"
    }

    fn eval(&self, g: &mut Graph<S>, a: T, b: T) -> Result<T> {
        let shape = g.value(a).shape().to_vec();
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::invalid("window must be odd and positive"));
        }
        if shape.len() != 4 || shape[2] < self.window || shape[3] < self.window {
            return Err(Error::invalid(format!(
                "inputs must be [n, c, h, w] with sides >= {}",
                self.window
            )));
        }
        let k = self.window;
        let mu_a = ops::box_mean_valid(g, a, k);
        let mu_b = ops::box_mean_valid(g, b, k);
        let aa = ops::mul(g, a, a);
        let bb = ops::mul(g, b, b);
        let ab = ops::mul(g, a, b);
        let m_aa = ops::box_mean_valid(g, aa, k);
        let m_bb = ops::box_mean_valid(g, bb, k);
        let m_ab = ops::box_mean_valid(g, ab, k);
        let mu_aa = ops::mul(g, mu_a, mu_a);
        let mu_bb = ops::mul(g, mu_b, mu_b);
        let mu_ab = ops::mul(g, mu_a, mu_b);
        let var_a = ops::sub(g, m_aa, mu_aa);
        let var_b = ops::sub(g, m_bb, mu_bb);
        let cov = ops::sub(g, m_ab, mu_ab);

        let two_mu = ops::scale(g, mu_ab, 2.0);
        let num_l = ops::add_scalar(g, two_mu, STRUCT_C1);
        let two_cov = ops::scale(g, cov, 2.0);
        let num_r = ops::add_scalar(g, two_cov, STRUCT_C2);
        let num = ops::mul(g, num_l, num_r);

        let mu_sum = ops::add(g, mu_aa, mu_bb);
        let den_l = ops::add_scalar(g, mu_sum, STRUCT_C1);
        let var_sum = ops::add(g, var_a, var_b);
        let den_r = ops::add_scalar(g, var_sum, STRUCT_C2);
        let den = ops::mul(g, den_l, den_r);

        let sim = ops::div(g, num, den);
        let mean_sim = ops::mean_all(g, sim);
        let neg = ops::neg(g, mean_sim);
        Ok(ops::add_scalar(g, neg, 1.0))
    }
}

/// `‖x̂ − x‖₁ + λ·Σᵢ Pᵢ(x̂, x)`; with `λ = 0` the result is the pixel term
/// itself, bit for bit.
pub fn loss_enh<S: Scalar>(
    g: &mut Graph<S>,
    x_hat: T,
    x: T,
    terms: &[&dyn PerceptualTerm<S>],
    lambda_pec: f64,
) -> Result<T> {
    if !(lambda_pec >= 0.0) {
        return Err(Error::invalid("perceptual weight must be non-negative"));
    }
    if g.value(x_hat).shape() != g.value(x).shape() {
        return Err(Error::invalid("prediction and target shapes differ"));
    }
    let pixel = ops::l1_mean(g, x_hat, x);
    if lambda_pec == 0.0 || terms.is_empty() {
        return Ok(pixel);
    }
    let mut acc: Option<T> = None;
    for term in terms {
        let v = term.eval(g, x_hat, x)?;
        acc = Some(match acc {
            Some(t) => ops::add(g, t, v),
            None => v,
        });
    }
    let perc = ops::scale(g, acc.expect("terms non-empty"), lambda_pec);
    Ok(ops::add(g, pixel, perc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    fn eval_loss(a: &ArrayD<f64>, b: &ArrayD<f64>, lambda: f64) -> f64 {
        let gm = GradientMagnitude::default();
        let ls = LocalStructure { window: 5 };
        let terms: Vec<&dyn PerceptualTerm<f64>> = vec![&gm, &ls];
        let mut g = Graph::new();
        let at = g.constant(a.clone());
        let bt = g.constant(b.clone());
        let loss = loss_enh(&mut g, at, bt, &terms, lambda).unwrap();
        g.scalar_value(loss)
    }

    #[test]
    fn identical_inputs_give_zero_everywhere() {
        let x = rand_img(&[1, 3, 12, 12], 1);
        let v = eval_loss(&x, &x, 0.7);
        assert!(v.abs() < 1e-12, "loss on identical inputs was {v}");
    }

    #[test]
    fn zero_weight_reduces_to_mean_l1() {
        let a = rand_img(&[1, 3, 10, 10], 2);
        let b = rand_img(&[1, 3, 10, 10], 3);
        let v = eval_loss(&a, &b, 0.0);
        let l1: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / a.len() as f64;
        assert_eq!(v, l1);
    }

    #[test]
    fn perceptual_terms_increase_the_penalty_for_structure_loss() {
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 1, 16, 16]), |ix| {
            if (ix[2] / 2 + ix[3] / 2) % 2 == 0 {
                0.8
            } else {
                -0.8
            }
        });
        let flat = ArrayD::from_elem(IxDyn(&[1, 1, 16, 16]), 0.0);
        let with = eval_loss(&x, &flat, 1.0);
        let without = eval_loss(&x, &flat, 0.0);
        assert!(with > without + 0.05, "{with} vs {without}");
    }

    #[test]
    fn blur_is_penalized_more_than_small_offset() {
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 1, 14, 14]), |ix| {
            if ix[3] % 2 == 0 {
                0.6
            } else {
                -0.6
            }
        });
        let offset = x.mapv(|v: f64| (v + 0.02).clamp(-1.0, 1.0));
        let blurred = ArrayD::from_elem(IxDyn(&[1, 1, 14, 14]), 0.0);
        let gm = GradientMagnitude::default();
        let score = |a: &ArrayD<f64>, b: &ArrayD<f64>| {
            let mut g = Graph::new();
            let at = g.constant(a.clone());
            let bt = g.constant(b.clone());
            let t = PerceptualTerm::<f64>::eval(&gm, &mut g, at, bt).unwrap();
            g.scalar_value(t)
        };
        assert!(score(&x, &blurred) > 10.0 * score(&x, &offset));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a0 = rand_img(&[1, 2, 8, 8], 4);
        let b = rand_img(&[1, 2, 8, 8], 5);
        let gm = GradientMagnitude { levels: 2 };
        let ls = LocalStructure { window: 5 };
        let terms: Vec<&dyn PerceptualTerm<f64>> = vec![&gm, &ls];

        let f = |a: &ArrayD<f64>| {
            let mut g = Graph::new();
            let at = g.constant(a.clone());
            let bt = g.constant(b.clone());
            let loss = loss_enh(&mut g, at, bt, &terms, 0.5).unwrap();
            g.scalar_value(loss)
        };

        let mut g = Graph::new();
        let at = g.var(a0.clone());
        let bt = g.constant(b.clone());
        let loss = loss_enh(&mut g, at, bt, &terms, 0.5).unwrap();
        let grads = g.backward(loss);
        let da = grads.of(at).expect("input gradient").clone();

        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..12 {
            let idx: Vec<usize> = a0.shape().iter().map(|&s| rng.gen_range(0..s)).collect();
            let mut plus = a0.clone();
            plus[IxDyn(&idx)] += h;
            let mut minus = a0.clone();
            minus[IxDyn(&idx)] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let an = da[IxDyn(&idx)];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-3, "at {idx:?}: analytic {an} vs numeric {fd}");
        }
    }

    #[test]
    fn undersized_inputs_are_rejected() {
        let small = rand_img(&[1, 1, 4, 4], 7);
        let ls = LocalStructure { window: 7 };
        let mut g = Graph::new();
        let at = g.constant(small.clone());
        let bt = g.constant(small);
        assert!(PerceptualTerm::<f64>::eval(&ls, &mut g, at, bt).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = rand_img(&[1, 3, 8, 8], 8);
        let b = rand_img(&[1, 3, 8, 6], 9);
        let mut g = Graph::new();
        let at = g.constant(a);
        let bt = g.constant(b);
        assert!(loss_enh(&mut g, at, bt, &[], 1.0).is_err());
    }
}
