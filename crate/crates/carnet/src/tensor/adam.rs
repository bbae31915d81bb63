//! Adam optimizer with bias correction over named parameters.

use indexmap::IndexMap;

use super::{Elem, Params, Result, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments<E> {
    m: Vec<E>,
    v: Vec<E>,
}

/// Optimizer state; moments are allocated lazily per parameter on first update.
pub struct Adam<E: Elem> {
    pub cfg: AdamConfig,
    t: u64,
    state: IndexMap<String, Moments<E>>,
}

impl<E: Elem> Adam<E> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            state: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update. Only parameters present in `grads` move; a gradient
    /// for a name missing from `params` is an error.
    pub fn step(&mut self, params: &mut Params<E>, grads: &IndexMap<String, Vec<E>>) -> Result<()> {
        self.t += 1;
        let b1 = E::from_f64(self.cfg.beta1);
        let b2 = E::from_f64(self.cfg.beta2);
        let one = E::one();
        let bc1 = E::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = E::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        let lr = E::from_f64(self.cfg.lr);
        let eps = E::from_f64(self.cfg.eps);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            assert_eq!(p.data.len(), g.len(), "gradient length for '{name}'");
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![E::zero(); g.len()],
                v: vec![E::zero(); g.len()],
            });
            for i in 0..g.len() {
                st.m[i] = b1 * st.m[i] + (one - b1) * g[i];
                st.v[i] = b2 * st.v[i] + (one - b2) * g[i] * g[i];
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                p.data[i] = p.data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::PTensor;

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // with m̂=g and v̂=g² the first update is lr·g/(|g|+eps) ≈ lr·sign(g)
        let mut p: Params<f64> = Params::new();
        p.insert("w", PTensor::new(vec![2], vec![1.0, -2.0]));
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), vec![1.0, -1.0]);
        let mut opt = Adam::new(AdamConfig {
            lr: 1e-3,
            ..Default::default()
        });
        opt.step(&mut p, &grads).unwrap();
        let w = &p.get("w").unwrap().data;
        assert!((w[0] - (1.0 - 9.99999995e-4)).abs() < 1e-11, "got {}", w[0]);
        assert!((w[1] - (-2.0 + 9.99999995e-4)).abs() < 1e-11);
    }

    #[test]
    fn larger_grad_does_not_move_less() {
        // Adam normalizes per-coordinate; a 10x gradient still moves ~lr
        let run = |g0: f64| {
            let mut p: Params<f64> = Params::new();
            p.insert("w", PTensor::new(vec![1], vec![0.0]));
            let mut grads = IndexMap::new();
            grads.insert("w".to_string(), vec![g0]);
            let mut opt = Adam::new(AdamConfig::default());
            opt.step(&mut p, &grads).unwrap();
            p.get("w").unwrap().data[0].abs()
        };
        let d1 = run(0.1);
        let d2 = run(1.0);
        assert!((d1 - d2).abs() < 1e-9);
    }

    #[test]
    fn unknown_param_in_grads_errors() {
        let mut p: Params<f64> = Params::new();
        p.insert("w", PTensor::zeros(vec![1]));
        let mut grads = IndexMap::new();
        grads.insert("nope".to_string(), vec![1.0]);
        let mut opt = Adam::new(AdamConfig::default());
        assert!(opt.step(&mut p, &grads).is_err());
    }
}
