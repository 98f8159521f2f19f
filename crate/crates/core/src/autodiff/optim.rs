//! Adam optimizer with serializable state.

use ndarray::ArrayD;

use super::store::{ParamId, ParamStore};
use crate::err::{Error, Result};
use crate::scalar::Scalar;

/// Adam with bias correction. Moment buffers are aligned with the store's
/// registration order; updates run in that order so training is
/// reproducible bit for bit.
pub struct Adam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<ArrayD<S>>,
    v: Vec<ArrayD<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, lr: f64) -> Self {
        let m = store.ids().map(|id| ArrayD::zeros(store.value(id).raw_dim())).collect();
        let v = store.ids().map(|id| ArrayD::zeros(store.value(id).raw_dim())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from gradients aligned with the store order.
    /// Frozen parameters and `None` gradients are skipped.
    pub fn apply(&mut self, store: &mut ParamStore<S>, grads: &[Option<ArrayD<S>>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "gradient vector has {} slots, optimizer tracks {}",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let b1 = S::of(self.beta1);
        let b2 = S::of(self.beta2);
        let one = S::one();
        let corr1 = S::of(1.0 - self.beta1.powi(self.step as i32));
        let corr2 = S::of(1.0 - self.beta2.powi(self.step as i32));
        let lr = S::of(self.lr);
        let eps = S::of(self.eps);
        for (idx, grad) in grads.iter().enumerate() {
            let id = ParamId(idx);
            let Some(grad) = grad else { continue };
            if !store.trainable(id) {
                continue;
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(&mut *m).and(grad).for_each(|mv, &gv| {
                *mv = *mv * b1 + gv * (one - b1);
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|vv, &gv| {
                *vv = *vv * b2 + gv * gv * (one - b2);
            });
            let mut new_val = store.value(id).clone();
            ndarray::Zip::from(&mut new_val).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
                let mhat = mv / corr1;
                let vhat = vv / corr2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            });
            store.set_value(id, new_val)?;
        }
        Ok(())
    }

    /// Serializable state: step count plus first/second moment buffers in
    /// store order.
    pub fn state(&self) -> (u64, &[ArrayD<S>], &[ArrayD<S>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<ArrayD<S>>, v: Vec<ArrayD<S>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::format("optimizer state has the wrong number of buffers"));
        }
        for (cur, new) in self.m.iter().zip(&m) {
            if cur.shape() != new.shape() {
                return Err(Error::format("optimizer moment buffer shape mismatch"));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::graph::Graph;
    use crate::autodiff::ops;
    use ndarray::IxDyn;

    /// Minimizing (w - 3)^2 must converge to w = 3.
    #[test]
    fn adam_converges_on_a_quadratic() {
        let mut ps = ParamStore::<f64>::new();
        let w = ps.register("w", ArrayD::from_elem(IxDyn(&[1]), 0.0)).unwrap();
        let mut opt = Adam::new(&ps, 0.1);
        for _ in 0..400 {
            let mut g = Graph::<f64>::new();
            let wt = g.param(&ps, w);
            let target = g.constant(ArrayD::from_elem(IxDyn(&[1]), 3.0));
            let loss = ops::mse_mean(&mut g, wt, target);
            let mut grads = g.backward(loss);
            let pg = g.take_param_grads(&ps, &mut grads);
            opt.apply(&mut ps, &pg).unwrap();
        }
        let final_w = ps.value(w)[IxDyn(&[0])];
        assert!((final_w - 3.0).abs() < 1e-3, "converged to {final_w}");
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut ps = ParamStore::<f64>::new();
        let w = ps.register("w", ArrayD::from_elem(IxDyn(&[1]), 1.0)).unwrap();
        ps.set_trainable(w, false);
        let mut opt = Adam::new(&ps, 0.5);
        let mut g = Graph::<f64>::new();
        let wt = g.param(&ps, w);
        let loss = ops::mean_all(&mut g, wt);
        let mut grads = g.backward(loss);
        let pg = g.take_param_grads(&ps, &mut grads);
        opt.apply(&mut ps, &pg).unwrap();
        assert_eq!(ps.value(w)[IxDyn(&[0])], 1.0);
    }

    #[test]
    fn state_roundtrip_keeps_updates_identical() {
        let build_loss = |ps: &ParamStore<f64>, w| {
            let mut g = Graph::<f64>::new();
            let wt = g.param(ps, w);
            let sq = ops::square(&mut g, wt);
            let loss = ops::mean_all(&mut g, sq);
            (g, loss)
        };
        let mut ps = ParamStore::<f64>::new();
        let w = ps.register("w", ArrayD::from_elem(IxDyn(&[2]), 2.0)).unwrap();
        let mut opt = Adam::new(&ps, 0.05);
        for _ in 0..3 {
            let (g, loss) = build_loss(&ps, w);
            let mut grads = g.backward(loss);
            let pg = g.take_param_grads(&ps, &mut grads);
            opt.apply(&mut ps, &pg).unwrap();
        }
        let (step, m, v) = opt.state();
        let (m, v) = (m.to_vec(), v.to_vec());
        let snapshot = ps.value(w).clone();

        // Continue two different ways: directly, and via a restored copy.
        let mut direct_ps = ParamStore::<f64>::new();
        let dw = direct_ps.register("w", snapshot.clone()).unwrap();
        let mut restored = Adam::new(&direct_ps, 0.05);
        restored.restore(step, m, v).unwrap();
        let (g, loss) = build_loss(&direct_ps, dw);
        let mut grads = g.backward(loss);
        let pg = g.take_param_grads(&direct_ps, &mut grads);
        restored.apply(&mut direct_ps, &pg).unwrap();

        let (g, loss) = build_loss(&ps, w);
        let mut grads = g.backward(loss);
        let pg = g.take_param_grads(&ps, &mut grads);
        opt.apply(&mut ps, &pg).unwrap();

        assert_eq!(ps.value(w), direct_ps.value(dw));
    }
}
