//! Finite-difference verification of analytic gradients. Runs in 64-bit
//! mode: the layer under test is probed with a fixed random linear
//! functional of its output, and every input and parameter coordinate is
//! wiggled by central differences.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::layer::{Layer, Mode};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

/// Relative-error denominator floor.
const DENOM_FLOOR: f64 = 1e-8;

/// Central-difference gradient of a scalar function at `x`.
pub fn fd_gradient<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let saved = probe[i];
        probe[i] = saved + eps;
        let up = f(&probe)?;
        probe[i] = saved - eps;
        let down = f(&probe)?;
        probe[i] = saved;
        let g = (up - down) / (2.0 * eps);
        if !g.is_finite() {
            return Err(CoreError::Numeric(format!(
                "non-finite finite-difference at coordinate {i}"
            )));
        }
        grad.push(g);
    }
    Ok(grad)
}

/// Max relative error between analytic and numeric gradients:
/// max over coordinates of |analytic − numeric| / max(|numeric|, 1e-8).
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / n.abs().max(DENOM_FLOOR))
        .fold(0.0, f64::max)
}

/// Verify a layer's backward pass against central finite differences.
///
/// The scalar objective is a fixed random weighting of the layer output;
/// both the input gradient and every parameter gradient are checked.
/// Returns the max relative error over all coordinates.
pub fn grad_check(layer: &mut Layer<f64>, input: &Tensor<f64>, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(CoreError::Input(format!(
            "eps must lie in (0, 1e-3], got {eps}"
        )));
    }
    layer.reset();
    let probe_out = layer.forward(input, Mode::Train)?;
    probe_out.ensure_finite(layer.kind())?;
    let mut rng = stream_rng(0x9d5c, "gradcheck-weights", probe_out.len() as u64);
    let weights: Vec<f64> = (0..probe_out.len())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let upstream = Tensor::from_vec(probe_out.shape(), weights.clone())?;

    let analytic_input = layer.backward(&upstream)?;
    let analytic_params: Vec<Vec<f64>> = layer
        .params()
        .iter()
        .map(|(_, p)| p.grad().map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let objective = |layer: &mut Layer<f64>, x: &Tensor<f64>| -> Result<f64> {
        let out = layer.forward(x, Mode::Train)?;
        let mut s = 0.0;
        for (o, w) in out.data().iter().zip(&weights) {
            if !o.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "non-finite forward value in {}",
                    layer.kind()
                )));
            }
            s += o * w;
        }
        Ok(s)
    };

    let mut worst = 0.0f64;

    // Input coordinates.
    let mut probe = input.clone();
    for i in 0..probe.len() {
        let saved = probe.data()[i];
        probe.data_mut()[i] = saved + eps;
        let up = objective(layer, &probe)?;
        probe.data_mut()[i] = saved - eps;
        let down = objective(layer, &probe)?;
        probe.data_mut()[i] = saved;
        let numeric = (up - down) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(CoreError::Numeric(format!(
                "non-finite numeric gradient at input coordinate {i}"
            )));
        }
        let err = (analytic_input.data()[i] - numeric).abs() / numeric.abs().max(DENOM_FLOOR);
        worst = worst.max(err);
    }

    // Parameter coordinates.
    for (pi, analytic) in analytic_params.iter().enumerate() {
        for i in 0..analytic.len() {
            let saved = {
                let mut params = layer.params_mut();
                let (_, p) = &mut params[pi];
                let v = p.data()[i];
                p.data_mut()[i] = v + eps;
                v
            };
            let up = objective(layer, input)?;
            {
                let mut params = layer.params_mut();
                params[pi].1.data_mut()[i] = saved - eps;
            }
            let down = objective(layer, input)?;
            {
                let mut params = layer.params_mut();
                params[pi].1.data_mut()[i] = saved;
            }
            let numeric = (up - down) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "non-finite numeric gradient at parameter {pi} coordinate {i}"
                )));
            }
            let err = (analytic[i] - numeric).abs() / numeric.abs().max(DENOM_FLOOR);
            worst = worst.max(err);
        }
    }

    layer.reset();
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{BatchNorm, Conv2d, Dense, Flatten, MaxPool, PadSpec, Relu, Softmax};

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-6;

    /// Inputs with coordinates kept away from relu/maxpool kinks.
    fn kink_safe_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut t = Tensor::<f64>::uniform(shape, 1.0, seed, "gc-input", 0);
        for v in t.data_mut() {
            if v.abs() < 1e-3 {
                *v += 2e-3;
            }
        }
        // Spread values so no pooling window sees a near-tie.
        let n = t.len();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += 1e-3 * (i % 97) as f64 / 97.0 + 3e-3 * (i % 13) as f64;
        }
        let _ = n;
        t
    }

    #[test]
    fn dense_4_to_3_matches_finite_differences() {
        let mut layer = Layer::Dense(Dense::new(4, 3, 11, "gc", 0));
        let input = Tensor::<f64>::uniform(&[2, 4], 1.0, 12, "gc-x", 0);
        let err = grad_check(&mut layer, &input, EPS).unwrap();
        assert!(err <= TOL, "dense error {err}");
    }

    #[test]
    fn conv_4x4_two_channels_matches_finite_differences() {
        let mut layer = Layer::Conv2d(Conv2d::new(2, 3, 4, 4, PadSpec::same(4, 4), 13, "gc", 0));
        let input = Tensor::<f64>::uniform(&[2, 2, 6, 5], 1.0, 14, "gc-x", 0);
        let err = grad_check(&mut layer, &input, EPS).unwrap();
        assert!(err <= TOL, "conv error {err}");
    }

    #[test]
    fn softmax_with_temperature_two_matches_finite_differences() {
        let mut layer = Layer::Softmax(Softmax::new(2.0));
        let input = Tensor::<f64>::uniform(&[3, 5], 2.0, 15, "gc-x", 0);
        let err = grad_check(&mut layer, &input, EPS).unwrap();
        assert!(err <= TOL, "softmax error {err}");
    }

    #[test]
    fn batchnorm_matches_finite_differences() {
        let mut layer = Layer::BatchNorm(BatchNorm::new(3, 1e-5, 0.1));
        let input = Tensor::<f64>::uniform(&[4, 3, 2, 3], 1.5, 16, "gc-x", 0);
        let err = grad_check(&mut layer, &input, EPS).unwrap();
        assert!(err <= TOL, "batchnorm error {err}");
    }

    #[test]
    fn relu_maxpool_flatten_match_finite_differences() {
        let mut relu = Layer::Relu(Relu::default());
        let x = kink_safe_input(&[2, 6], 17);
        let err = grad_check(&mut relu, &x, EPS).unwrap();
        assert!(err <= TOL, "relu error {err}");

        let mut pool = Layer::MaxPool(MaxPool::new(2, 2, 2, 2));
        let x = kink_safe_input(&[2, 2, 4, 4], 18);
        let err = grad_check(&mut pool, &x, EPS).unwrap();
        assert!(err <= TOL, "maxpool error {err}");

        let mut flat = Layer::Flatten(Flatten::default());
        let x = kink_safe_input(&[2, 3, 2, 2], 19);
        let err = grad_check(&mut flat, &x, EPS).unwrap();
        assert!(err <= TOL, "flatten error {err}");
    }

    #[test]
    fn eps_out_of_range_is_rejected() {
        let mut layer = Layer::<f64>::Relu(Relu::default());
        let x = Tensor::<f64>::zeros(&[1, 2]);
        assert!(grad_check(&mut layer, &x, 0.0).is_err());
        assert!(grad_check(&mut layer, &x, 1e-2).is_err());
    }
}
