//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimState {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || {
            params
                .values()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        OptimState {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
        }
    }

    /// `beta1 = 0.9, beta2 = 0.95, eps = 1e-8, weight decay = 1e-4`.
    pub fn with_defaults(params: &ParamStore) -> Self {
        Self::new(params, 0.9, 0.95, 1e-8, 1e-4)
    }
}

/// One AdamW step over every parameter of `params`.
pub fn adamw_update(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    let op = "adamw_update";
    if !(lr >= 0.0) {
        return Err(Error::config(
            op,
            format!("learning rate must be >= 0, got {lr}"),
        ));
    }
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            op,
            format!(
                "{} parameters, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (id, g) in params.ids().zip(grads) {
        if g.shape() != params.get(id).shape() {
            return Err(Error::shape(
                op,
                format!("gradient of {} has shape {:?}", params.name(id), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::numeric(
                op,
                format!("non-finite gradient for parameter {}", params.name(id)),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = lr * state.weight_decay;
    for (i, g) in grads.iter().enumerate() {
        let p = &mut params.values_mut()[i];
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *p -= decay * *p;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `lr_max`, then cosine decay to `lr_min`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(lr_max: f64, lr_min: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(Error::config(
                "Schedule",
                format!("warmup {warmup_steps} exceeds total steps {total_steps}"),
            ));
        }
        if !(lr_max >= 0.0 && lr_min >= 0.0) {
            return Err(Error::config("Schedule", "learning rates must be >= 0"));
        }
        Ok(Schedule {
            lr_max,
            lr_min,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::config(
                "lr_at",
                format!("step {step} outside 0..={}", self.total_steps),
            ));
        }
        if step < self.warmup_steps {
            return Ok(self.lr_max * step as f64 / self.warmup_steps as f64);
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return Ok(self.lr_max);
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        Ok(self.lr_min
            + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore {
        let mut p = ParamStore::new();
        p.add("w", Tensor::from_vec(vec![vals.len()], vals.to_vec()));
        p
    }

    #[test]
    fn zero_gradients_without_decay_leave_params() {
        let mut p = store(&[1.0, -2.0]);
        let mut s = OptimState::new(&p, 0.9, 0.95, 1e-8, 0.0);
        adamw_update(&mut p, &[Tensor::zeros(vec![2])], &mut s, 1e-2).unwrap();
        assert_eq!(p.values()[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn pure_decay_scales_params() {
        let mut p = store(&[1.0, -2.0]);
        let mut s = OptimState::new(&p, 0.9, 0.95, 1e-8, 0.1);
        adamw_update(&mut p, &[Tensor::zeros(vec![2])], &mut s, 1.0).unwrap();
        assert_eq!(p.values()[0].data(), &[0.9, -1.8]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(&[0.0]);
        let mut s = OptimState::new(&p, 0.9, 0.95, 1e-8, 0.0);
        adamw_update(&mut p, &[Tensor::full(vec![1], 1.0)], &mut s, 1e-4).unwrap();
        // m_hat / (sqrt(v_hat) + eps) = 1 / (1 + 1e-8)
        let want = -1e-4 / (1.0 + 1e-8);
        assert!((p.values()[0].data()[0] - want).abs() < 1e-18);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = store(&[0.0]);
        let mut s = OptimState::with_defaults(&p);
        let err =
            adamw_update(&mut p, &[Tensor::full(vec![1], f64::NAN)], &mut s, 1e-4).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert!(matches!(err, Error::Numeric { .. }));
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule::new(1e-4, 1e-6, 10, 110).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(10).unwrap(), 1e-4);
        assert!((s.lr_at(60).unwrap() - (1e-4 + 1e-6) / 2.0).abs() < 1e-12);
        assert!((s.lr_at(110).unwrap() - 1e-6).abs() < 1e-18);
        assert!(s.lr_at(111).is_err());
        // continuity at the junction
        let before = s.lr_at(9).unwrap();
        let at = s.lr_at(10).unwrap();
        let after = s.lr_at(11).unwrap();
        assert!((at - before).abs() <= 1e-5 + 1e-12 && (at - after).abs() < 1e-7);
        assert!(Schedule::new(1e-4, 0.0, 5, 4).is_err());
        let no_warm = Schedule::new(1.0, 0.0, 0, 0).unwrap();
        assert_eq!(no_warm.lr_at(0).unwrap(), 1.0);
    }
}
