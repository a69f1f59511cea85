use crate::compute::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Adam hyperparameters. Weight decay enters as an L2 term added to the
/// gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Moment estimates for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect();
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update to every trainable parameter using
    /// the gradients held in `store`. Nothing is modified when any gradient
    /// is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (_, p) in store.iter() {
            if p.trainable && !p.grad.all_finite() {
                return Err(Error::Numeric {
                    step: self.step as usize + 1,
                    reason: format!("non-finite gradient for `{}`", p.name),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let wd = T::lit(c.weight_decay);
        let eps = T::lit(c.eps);
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let lr = T::lit(c.lr);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let mut w = p.value.data().to_vec();
            for (((wi, &gi), mi), vi) in w.iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = gi + wd * *wi;
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *wi -= lr * mh / (vh.sqrt() + eps);
            }
            p.value = Tensor::from_vec(p.value.shape(), w);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_grad(store: &mut ParamStore<f64>, id: crate::compute::ParamId) -> f64 {
        let w = store.value(id).data().to_vec();
        let g: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        store.get_mut(id).grad = Tensor::new(&[w.len()], g).unwrap();
        w.iter().map(|v| v * v).sum()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("t", Tensor::full(&[1], 1.0));
        let mut opt = AdamState::new(&store, AdamConfig::new(0.1, 0.0));
        quad_grad(&mut store, id);
        opt.step(&mut store).unwrap();
        assert!((store.value(id).data()[0] - 0.9).abs() < 1e-7);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("t", Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let mut opt = AdamState::new(&store, AdamConfig::new(0.1, 0.0));
        opt.step(&mut store).unwrap();
        assert_eq!(store.value(id).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::full(&[1], 1.0));
        let b = store.add("b", Tensor::full(&[1], 1.0));
        store.get_mut(a).grad = Tensor::full(&[1], 1.0);
        store.get_mut(b).grad = Tensor::full(&[1], f64::NAN);
        let mut opt = AdamState::new(&store, AdamConfig::new(0.1, 0.0));
        assert!(matches!(opt.step(&mut store), Err(Error::Numeric { .. })));
        assert_eq!(store.value(a).data(), &[1.0]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn buffers_are_skipped() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_buffer("running", Tensor::full(&[1], 1.0));
        store.get_mut(id).grad = Tensor::full(&[1], 5.0);
        let mut opt = AdamState::new(&store, AdamConfig::new(0.1, 0.1));
        opt.step(&mut store).unwrap();
        assert_eq!(store.value(id).data(), &[1.0]);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("t", Tensor::new(&[2], vec![1.0, -0.5]).unwrap());
        let mut opt = AdamState::new(&store, AdamConfig::new(0.01, 0.0));
        let initial = quad_grad(&mut store, id);
        let mut last = initial;
        for i in 0..200 {
            opt.step(&mut store).unwrap();
            let loss = quad_grad(&mut store, id);
            assert!(loss <= last, "step {i}: {loss} after {last}");
            last = loss;
        }
        assert!(last < 1e-3 * initial, "{last}");
    }
}
