use std::collections::BTreeMap;

use crate::error::{DiffError, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Real, Tensor};

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Validation runs over all gradients before any
    /// parameter is touched, so a rejected step leaves the store unchanged.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = store.get(name)?;
            if store.is_frozen(name) {
                return Err(DiffError::FrozenGradient(name.clone()));
            }
            if p.shape() != g.shape() {
                return Err(DiffError::shape("adamw", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(DiffError::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let decay = T::lit(1.0 - lr * self.weight_decay);
        for (name, g) in grads.iter() {
            let n = g.numel();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let p = store.get_mut(name)?;
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = m.as_f64() / bc1;
                let v_hat = v.as_f64() / bc2;
                *p = *p * decay - T::lit(lr * m_hat / (v_hat.sqrt() + self.eps));
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors, for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, map) in [("opt.m.", &self.first), ("opt.v.", &self.second)] {
            for (name, buf) in map {
                out.push((format!("{prefix}{name}"), Tensor::row(buf.clone())));
            }
        }
        out
    }

    pub fn restore(&mut self, step: u64, tensors: impl IntoIterator<Item = (String, Tensor<T>)>) {
        self.step = step;
        self.first.clear();
        self.second.clear();
        for (name, t) in tensors {
            if let Some(rest) = name.strip_prefix("opt.m.") {
                self.first.insert(rest.to_string(), t.into_data());
            } else if let Some(rest) = name.strip_prefix("opt.v.") {
                self.second.insert(rest.to_string(), t.into_data());
            }
        }
    }
}

/// Linear warm-up from 0 to `base_lr` over `warmup_steps`, constant afterwards.
pub fn lr_schedule(step: u64, base_lr: f64, warmup_steps: i64) -> f64 {
    if warmup_steps <= 0 || step as i64 >= warmup_steps {
        base_lr
    } else {
        base_lr * step as f64 / warmup_steps as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(v)).unwrap();
        s
    }

    fn grad(v: f64) -> Gradients<f64> {
        let mut g = Gradients::new();
        g.insert("p", Tensor::scalar(v));
        g
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut s = single(1.5);
        let mut opt = AdamW::new((0.9, 0.999), 1e-8, 0.0);
        opt.step(&mut s, &grad(3.0), 0.0).unwrap();
        assert_eq!(s.get("p").unwrap().data(), &[1.5]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is lr * g / (|g| + eps).
        let mut s = single(0.0);
        let mut opt = AdamW::new((0.9, 0.999), 1e-8, 0.0);
        opt.step(&mut s, &grad(1.0), 0.1).unwrap();
        let p = s.get("p").unwrap().data()[0];
        assert!((p + 0.1).abs() < 1e-8, "{p}");
    }

    #[test]
    fn frozen_gradient_is_an_error() {
        let mut s = single(1.0);
        s.freeze("p").unwrap();
        let mut opt = AdamW::new((0.9, 0.999), 1e-8, 0.0);
        assert!(matches!(
            opt.step(&mut s, &grad(1.0), 0.1),
            Err(DiffError::FrozenGradient(_))
        ));
        assert_eq!(s.get("p").unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_finite_gradient_names_param() {
        let mut s = single(1.0);
        let mut opt = AdamW::new((0.9, 0.999), 1e-8, 0.0);
        let err = opt.step(&mut s, &grad(f64::NAN), 0.1).unwrap_err();
        assert!(err.to_string().contains("`p`"));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn schedule_ramp() {
        assert_eq!(lr_schedule(0, 1e-4, 960), 0.0);
        assert_eq!(lr_schedule(960, 1e-4, 960), 1e-4);
        assert!((lr_schedule(480, 1e-4, 960) - 5e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(5000, 1e-4, 960), 1e-4);
        assert_eq!(lr_schedule(3, 1e-4, 0), 1e-4);
    }
}
