//! SGD with momentum and a cosine learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// lr = lr0 · ½(1 + cos(π·step/total)).
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(CoreError::Input("total steps must be positive".into()));
    }
    if step > total {
        return Err(CoreError::Input(format!(
            "step {step} exceeds total {total}"
        )));
    }
    Ok(lr0 * 0.5 * (1.0 + (core::f64::consts::PI * step as f64 / total as f64).cos()))
}

/// Per-parameter velocity plus schedule bookkeeping. Parameter names key the
/// velocity map; shapes are locked in on first sight of each parameter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Real> {
    pub initial_lr: f64,
    pub momentum: f64,
    pub step_counter: usize,
    pub total_steps: usize,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(initial_lr: f64, momentum: f64, total_steps: usize) -> Result<Self> {
        if initial_lr <= 0.0 {
            return Err(CoreError::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(CoreError::Config("momentum must be in [0, 1)".into()));
        }
        if total_steps == 0 {
            return Err(CoreError::Config("total steps must be positive".into()));
        }
        Ok(OptimizerState {
            initial_lr,
            momentum,
            step_counter: 0,
            total_steps,
            velocity: BTreeMap::new(),
        })
    }

    /// Learning rate at the current step.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step_counter, self.total_steps, self.initial_lr)
            .expect("step_counter <= total_steps by invariant")
    }

    pub fn velocity(&self, name: &str) -> Option<&[T]> {
        self.velocity.get(name).map(|v| v.as_slice())
    }

    /// One SGD step over named parameters: v ← momentum·v + g,
    /// p ← p − lr·v, with lr from the cosine schedule. Every parameter must
    /// carry a gradient; gradients are consumed (cleared) by the update.
    pub fn sgd_step(&mut self, params: &mut [(String, &mut Tensor<T>)]) -> Result<()> {
        if self.step_counter >= self.total_steps {
            return Err(CoreError::State(format!(
                "optimizer exhausted: {} of {} steps taken",
                self.step_counter, self.total_steps
            )));
        }
        let lr = T::from_f64(self.current_lr());
        let momentum = T::from_f64(self.momentum);
        for (name, p) in params.iter_mut() {
            let n = p.len();
            let grad = p
                .grad()
                .ok_or_else(|| CoreError::State(format!("parameter {name} has no gradient")))?
                .to_vec();
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); n]);
            if vel.len() != n {
                return Err(CoreError::State(format!(
                    "velocity shape for {name} changed: {} vs {n}",
                    vel.len()
                )));
            }
            let data = p.data_mut();
            for i in 0..n {
                vel[i] = momentum * vel[i] + grad[i];
                data[i] = data[i] - lr * vel[i];
            }
            p.clear_grad();
        }
        self.step_counter += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_abs_diff_eq!(cosine_lr(0, 100, 0.01).unwrap(), 0.01, epsilon = 0.0);
        assert_abs_diff_eq!(cosine_lr(100, 100, 0.01).unwrap(), 0.0, epsilon = 1e-18);
        assert_abs_diff_eq!(cosine_lr(50, 100, 0.01).unwrap(), 0.005, epsilon = 1e-12);
        assert!(cosine_lr(101, 100, 0.01).is_err());
    }

    #[test]
    fn cosine_is_monotone_non_increasing() {
        let mut prev = f64::INFINITY;
        for step in 0..=1000 {
            let lr = cosine_lr(step, 1000, 0.01).unwrap();
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = Tensor::<f64>::from_vec(&[1], vec![1.0]).unwrap();
        p.set_grad(vec![2.0]).unwrap();
        let mut state = OptimizerState::new(0.1, 0.0, 10).unwrap();
        // First step of a 10-step cosine schedule: lr very close to lr0.
        let mut params = [(String::from("p"), &mut p)];
        state.sgd_step(&mut params).unwrap();
        assert_abs_diff_eq!(p.data()[0], 1.0 - 0.1 * 2.0, epsilon = 1e-12);
        assert_eq!(state.step_counter, 1);
    }

    #[test]
    fn zero_grad_zero_velocity_is_identity() {
        let mut p = Tensor::<f64>::from_vec(&[2], vec![3.0, -1.0]).unwrap();
        p.set_grad(vec![0.0, 0.0]).unwrap();
        let mut state = OptimizerState::new(0.5, 0.9, 5).unwrap();
        let mut params = [(String::from("p"), &mut p)];
        state.sgd_step(&mut params).unwrap();
        assert_eq!(p.data(), &[3.0, -1.0]);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        // momentum 0.9, lr 0.1, g = 1 twice from p = 0, v = 0:
        // p = −0.1 − 0.19 = −0.29 with a constant schedule. Use a very large
        // total so the cosine factor stays ≈ 1 for both steps.
        let total = 100_000_000;
        let mut p = Tensor::<f64>::from_vec(&[1], vec![0.0]).unwrap();
        let mut state = OptimizerState::new(0.1, 0.9, total).unwrap();
        for _ in 0..2 {
            p.set_grad(vec![1.0]).unwrap();
            let mut params = [(String::from("p"), &mut p)];
            state.sgd_step(&mut params).unwrap();
        }
        assert_abs_diff_eq!(p.data()[0], -0.29, epsilon = 1e-9);
    }

    #[test]
    fn missing_grad_is_a_state_error() {
        let mut p = Tensor::<f64>::zeros(&[1]);
        let mut state = OptimizerState::new(0.1, 0.0, 10).unwrap();
        let mut params = [(String::from("p"), &mut p)];
        assert!(matches!(
            state.sgd_step(&mut params),
            Err(CoreError::State(_))
        ));
    }
}
