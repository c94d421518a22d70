use super::{Float, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers matching a parameter store.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    step: u64,
}

impl<F: Float> AdamState<F> {
    pub fn new(store: &ParamStore<F>, config: AdamConfig) -> Self {
        let m: Vec<Vec<F>> = store.iter().map(|p| vec![F::zero(); p.value.numel()]).collect();
        AdamState { config, v: m.clone(), m, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update from the store's gradient buffers, which
    /// are zeroed afterwards. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64) -> Result<()> {
        assert_eq!(self.m.len(), store.len(), "optimizer built for a different store");
        if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFiniteGrad(p.name.clone()));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (F::of(beta1), F::of(beta2));
        let (one_b1, one_b2) = (F::of(1.0 - beta1), F::of(1.0 - beta2));
        let step_size = F::of(lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(eps);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = p.grad.data();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                w[j] -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

/// Linear warmup from 0 over the first `warmup_frac` of `total` steps,
/// then constant `lr`.
pub fn warmup_lr(step: usize, total: usize, warmup_frac: f64, lr: f64) -> f64 {
    let warm = (warmup_frac * total as f64).ceil() as usize;
    if warm == 0 || step >= warm {
        lr
    } else {
        lr * step as f64 / warm as f64
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Float>(store: &mut ParamStore<F>, max_norm: f64) -> f64 {
    let total: f64 = store.iter().flat_map(|p| p.grad.data().iter()).map(|g| g.f64() * g.f64()).sum();
    let norm = total.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = F::of(max_norm / norm);
        for p in store.params_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn warmup_schedule_endpoints() {
        assert_eq!(warmup_lr(0, 1000, 0.05, 1e-3), 0.0);
        assert_eq!(warmup_lr(25, 1000, 0.05, 1e-3), 5e-4);
        assert_eq!(warmup_lr(50, 1000, 0.05, 1e-3), 1e-3);
        assert_eq!(warmup_lr(999, 1000, 0.05, 1e-3), 1e-3);
        assert_eq!(warmup_lr(0, 1000, 0.0, 1e-3), 1e-3);
    }

    fn one_param(v: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(v));
        s.accumulate_grad(id, &[g]);
        s
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = one_param(1.5, 0.0);
        let mut opt = AdamState::new(&s, AdamConfig::default());
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.iter().next().unwrap().value.item(), 1.5);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        // m_hat = g, v_hat = g^2 -> update = lr * g / (|g| + eps)
        for &g in &[0.3, -2.0, 1e-3] {
            let mut s = one_param(0.0, g);
            let mut opt = AdamState::new(&s, AdamConfig::default());
            opt.step(&mut s, 0.01).unwrap();
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((s.iter().next().unwrap().value.item() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn second_identical_step_matches_bias_corrected_formula() {
        let g = 0.5;
        let mut s = one_param(0.0, g);
        let mut opt = AdamState::new(&s, AdamConfig::default());
        opt.step(&mut s, 0.01).unwrap();
        let id = s.find("w").unwrap();
        s.accumulate_grad(id, &[g]);
        opt.step(&mut s, 0.01).unwrap();
        // constant gradient: m_t/(1-b1^t) = g and v_t/(1-b2^t) = g^2 at every t
        let per_step = 0.01 * g / (g.abs() + 1e-8);
        assert!((s.value(id).item() + 2.0 * per_step).abs() < 1e-12);
        assert_eq!(opt.steps_taken(), 2);
    }

    #[test]
    fn non_finite_gradient_is_rejected_by_name() {
        let mut s = one_param(0.0, f64::NAN);
        let mut opt = AdamState::new(&s, AdamConfig::default());
        match opt.step(&mut s, 0.1) {
            Err(Error::NonFiniteGrad(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(opt.steps_taken(), 0);
    }
}
