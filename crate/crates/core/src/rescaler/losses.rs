//! Training objectives for the rescaler.
//!
//! Reconstruction holds the decoder to the original latent along two chains:
//! straight from the compact code, and after a full feature/pixel round trip.
//! Guidance holds the pixel form of the code to the bicubic reduction of the
//! source image, which is what keeps the stored file viewable.

use crate::autodiff::{Graph, T};
use crate::autodiff::ops;
use crate::autodiff::ParamStore;
use crate::err::{Error, Result};
use crate::scalar::Scalar;

use super::{Dfrm, GuidancePyramid};

/// Mixing weights for the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct RescaleLossWeights {
    pub rec: f64,
    pub gui: f64,
}

impl Default for RescaleLossWeights {
    fn default() -> Self {
        Self { rec: 1.0, gui: 1.0 }
    }
}

impl RescaleLossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.rec.is_finite() || !self.gui.is_finite() || self.rec < 0.0 || self.gui < 0.0 {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if self.rec == 0.0 && self.gui == 0.0 {
            return Err(Error::invalid("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// The combined objective and its two addends, before weighting.
pub struct RescaleLossParts {
    pub total: T,
    pub rec: T,
    pub gui: T,
}

/// Reconstruction core: mean absolute error of both chains against `z`.
pub fn rec_from_chains<S: Scalar>(g: &mut Graph<S>, direct: T, cycled: T, z: T) -> T {
    let a = ops::l1_mean(g, direct, z);
    let b = ops::l1_mean(g, cycled, z);
    ops::add(g, a, b)
}

/// Guidance core: mean absolute error of the pixel-form code against the
/// bicubic target.
pub fn gui_from_code<S: Scalar>(g: &mut Graph<S>, u: T, target: T) -> T {
    ops::l1_mean(g, u, target)
}

struct ChainNodes {
    code: T,
    pixels: T,
    rec: T,
}

fn build_chains<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParamStore<S>,
    dfrm: &Dfrm,
    z: T,
    pyr: &GuidancePyramid<S>,
    quantize: bool,
) -> Result<ChainNodes> {
    let code = dfrm.encode(g, ps, z, pyr)?;
    let direct = dfrm.decode(g, ps, code)?;
    let pixels = dfrm.to_pixels(g, ps, code)?;
    let stored = if quantize { ops::quantize_ste(g, pixels) } else { pixels };
    let back = dfrm.from_pixels(g, ps, stored)?;
    let cycled = dfrm.decode(g, ps, back)?;
    let rec = rec_from_chains(g, direct, cycled, z);
    Ok(ChainNodes { code, pixels, rec })
}

fn guidance_target<S: Scalar>(
    g: &mut Graph<S>,
    pyr: &GuidancePyramid<S>,
    u: T,
) -> Result<T> {
    if pyr.lr_target().shape() != g.value(u).shape() {
        return Err(Error::invalid(format!(
            "guidance target {:?} does not match the code {:?}",
            pyr.lr_target().shape(),
            g.value(u).shape()
        )));
    }
    Ok(g.constant(pyr.lr_target().clone()))
}

/// Two-chain latent reconstruction loss. `quantize` snaps the stored pixels
/// to the 8-bit grid with a straight-through gradient, matching what the
/// decoder sees at restoration time.
pub fn loss_rec<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParamStore<S>,
    dfrm: &Dfrm,
    z: T,
    pyr: &GuidancePyramid<S>,
    quantize: bool,
) -> Result<T> {
    Ok(build_chains(g, ps, dfrm, z, pyr, quantize)?.rec)
}

/// Bicubic appearance loss on the pixel form of the compact code.
pub fn loss_gui<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParamStore<S>,
    dfrm: &Dfrm,
    z: T,
    pyr: &GuidancePyramid<S>,
) -> Result<T> {
    let code = dfrm.encode(g, ps, z, pyr)?;
    let u = dfrm.to_pixels(g, ps, code)?;
    let target = guidance_target(g, pyr, u)?;
    Ok(gui_from_code(g, u, target))
}

/// Weighted sum of reconstruction and guidance, sharing one encoder pass.
pub fn loss_res<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParamStore<S>,
    dfrm: &Dfrm,
    z: T,
    pyr: &GuidancePyramid<S>,
    weights: RescaleLossWeights,
    quantize: bool,
) -> Result<RescaleLossParts> {
    weights.validate()?;
    let chains = build_chains(g, ps, dfrm, z, pyr, quantize)?;
    let target = guidance_target(g, pyr, chains.pixels)?;
    let gui = gui_from_code(g, chains.pixels, target);
    let _ = chains.code;
    let wr = ops::scale(g, chains.rec, weights.rec);
    let wg = ops::scale(g, gui, weights.gui);
    let total = ops::add(g, wr, wg);
    Ok(RescaleLossParts { total, rec: chains.rec, gui })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{Image, ValueRange};
    use crate::rescaler::DfrmOptions;
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(g: &Graph<f64>, t: T) -> f64 {
        g.value(t)[[0usize; 0].as_slice()]
    }

    fn fixture(factor: usize, seed: u64, use_inn: bool) -> (ParamStore<f64>, Dfrm) {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let opts = DfrmOptions { use_inn, use_guidance: true };
        let dfrm = Dfrm::with_options(&mut ps, &mut rng, factor, opts).unwrap();
        (ps, dfrm)
    }

    fn inputs(seed: u64, side: usize) -> (Image<f64>, ArrayD<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Image::from_fn(3, side, side, ValueRange::Unit, |_, _, _| {
            rng.gen_range(-0.9..0.9)
        })
        .unwrap();
        let z = ArrayD::from_shape_fn(vec![1, 4, side / 8, side / 8], |_| {
            rng.gen_range(-1.0..1.0)
        });
        (x, z)
    }

    #[test]
    fn reconstruction_core_matches_hand_values() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = ArrayD::from_shape_fn(vec![1, 4, 4, 4], |_| rng.gen_range(-0.5..0.5));
        let zn = g.constant(z.clone());
        let off = g.constant(z.mapv(|v| v + 0.3));
        let perfect = rec_from_chains(&mut g, zn, zn, zn);
        assert_eq!(scalar(&g, perfect), 0.0);
        let shifted = rec_from_chains(&mut g, off, off, zn);
        assert!((scalar(&g, shifted) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn guidance_core_matches_hand_values() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = ArrayD::from_shape_fn(vec![1, 3, 4, 4], |_| rng.gen_range(-0.5..0.5));
        let tn = g.constant(t.clone());
        let un = g.constant(t.mapv(|v| v - 0.1));
        let gui = gui_from_code(&mut g, un, tn);
        assert!((scalar(&g, gui) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_decomposes_into_weighted_terms() {
        let (ps, dfrm) = fixture(16, 3, true);
        let (x, z) = inputs(4, 32);
        let pyr = GuidancePyramid::build(std::slice::from_ref(&x), 16).unwrap();
        let w = RescaleLossWeights { rec: 0.7, gui: 0.3 };

        let mut g = Graph::new();
        let zn = g.constant(z.clone());
        let parts = loss_res(&mut g, &ps, &dfrm, zn, &pyr, w, false).unwrap();
        let total = scalar(&g, parts.total);

        let mut g2 = Graph::new();
        let zn2 = g2.constant(z.clone());
        let rec_node = loss_rec(&mut g2, &ps, &dfrm, zn2, &pyr, false).unwrap();
        let rec = scalar(&g2, rec_node);
        let mut g3 = Graph::new();
        let zn3 = g3.constant(z);
        let gui_node = loss_gui(&mut g3, &ps, &dfrm, zn3, &pyr).unwrap();
        let gui = scalar(&g3, gui_node);

        assert!((total - (0.7 * rec + 0.3 * gui)).abs() < 1e-9);
        assert!(rec > 0.0 && gui > 0.0);
    }

    #[test]
    fn invalid_weights_are_rejected() {
        assert!(RescaleLossWeights { rec: -1.0, gui: 1.0 }.validate().is_err());
        assert!(RescaleLossWeights { rec: 0.0, gui: 0.0 }.validate().is_err());
        assert!(RescaleLossWeights { rec: f64::NAN, gui: 1.0 }.validate().is_err());
        assert!(RescaleLossWeights::default().validate().is_ok());
    }

    #[test]
    fn guidance_loss_leaves_the_decoder_untouched() {
        let (ps, dfrm) = fixture(16, 5, true);
        let (x, z) = inputs(6, 32);
        let pyr = GuidancePyramid::build(std::slice::from_ref(&x), 16).unwrap();

        let mut g = Graph::new();
        let zn = g.constant(z);
        let gui = loss_gui(&mut g, &ps, &dfrm, zn, &pyr).unwrap();
        let mut grads = g.backward(gui);
        let by_param = g.take_param_grads(&ps, &mut grads);

        let mut saw_encoder = false;
        for id in ps.ids() {
            let name = ps.name(id);
            let grad = &by_param[id.0];
            if name.starts_with("gd.") {
                assert!(grad.is_none(), "guidance loss must not reach {name}");
            }
            if name.starts_with("ge.") && grad.is_some() {
                saw_encoder = true;
            }
        }
        assert!(saw_encoder, "guidance loss should train the encoder");
    }

    #[test]
    fn bypassed_converter_gets_no_gradient() {
        let (ps, dfrm) = fixture(16, 7, false);
        let (x, z) = inputs(8, 32);
        let pyr = GuidancePyramid::build(std::slice::from_ref(&x), 16).unwrap();

        let mut g = Graph::new();
        let zn = g.constant(z);
        let parts = loss_res(&mut g, &ps, &dfrm, zn, &pyr, RescaleLossWeights::default(), false).unwrap();
        let mut grads = g.backward(parts.total);
        let by_param = g.take_param_grads(&ps, &mut grads);
        for id in ps.ids() {
            if ps.name(id).starts_with("inn.") {
                assert!(by_param[id.0].is_none());
            }
        }
    }

    #[test]
    fn quantized_chain_still_trains_the_encoder() {
        let (ps, dfrm) = fixture(16, 9, true);
        let (x, z) = inputs(10, 32);
        let pyr = GuidancePyramid::build(std::slice::from_ref(&x), 16).unwrap();

        let mut g = Graph::new();
        let zn = g.constant(z);
        let parts = loss_res(&mut g, &ps, &dfrm, zn, &pyr, RescaleLossWeights::default(), true).unwrap();
        let mut grads = g.backward(parts.total);
        let by_param = g.take_param_grads(&ps, &mut grads);
        let id = ps.id("ge.c0.w").unwrap();
        let grad = by_param[id.0].as_ref().expect("encoder gradient");
        assert!(grad.iter().all(|v| v.is_finite()));
        assert!(grad.iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (mut ps, dfrm) = fixture(8, 11, true);
        let (x, z) = inputs(12, 16);
        let pyr = GuidancePyramid::build(std::slice::from_ref(&x), 8).unwrap();
        let w = RescaleLossWeights::default();

        let eval = |ps: &ParamStore<f64>| {
            let mut g = Graph::new();
            let zn = g.constant(z.clone());
            let parts = loss_res(&mut g, ps, &dfrm, zn, &pyr, w, false).unwrap();
            scalar(&g, parts.total)
        };

        let mut g = Graph::new();
        let zn = g.constant(z.clone());
        let parts = loss_res(&mut g, &ps, &dfrm, zn, &pyr, w, false).unwrap();
        let mut grads = g.backward(parts.total);
        let by_param = g.take_param_grads(&ps, &mut grads);

        let h = 1e-5;
        for name in ["ge.c0.w", "gd.out.w", "inn.b0.c0.w"] {
            let id = ps.id(name).unwrap();
            let analytic = by_param[id.0].as_ref().expect("gradient")[[0, 0, 0, 0]];
            let base = ps.value(id).clone();
            let mut plus = base.clone();
            plus[[0, 0, 0, 0]] += h;
            ps.set_value(id, plus).unwrap();
            let fp = eval(&ps);
            let mut minus = base.clone();
            minus[[0, 0, 0, 0]] -= h;
            ps.set_value(id, minus).unwrap();
            let fm = eval(&ps);
            ps.set_value(id, base).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
            assert!(rel < 1e-3, "{name}: fd {fd} vs analytic {analytic} (rel {rel})");
        }
    }
}
