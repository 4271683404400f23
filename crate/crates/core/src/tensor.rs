//! Dense N-dimensional tensors with an optional gradient slot. Row-major
//! contiguous storage; the last axis varies fastest.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::real::Real;
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::Input(format!(
                "shape {shape:?} expects {n} elements, got {}",
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(CoreError::Input(format!("zero-sized axis in shape {shape:?}")));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    /// Uniform draw in [-limit, limit), seeded.
    pub fn uniform(shape: &[usize], limit: f64, master: u64, stream: &str, index: u64) -> Self {
        let mut rng = stream_rng(master, stream, index);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    /// Kaiming-uniform fan-in init: limit = sqrt(6 / fan_in).
    pub fn kaiming(shape: &[usize], fan_in: usize, master: u64, stream: &str, index: u64) -> Self {
        let limit = (6.0 / fan_in as f64).sqrt();
        Self::uniform(shape, limit, master, stream, index)
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Install a gradient; must match the data shape.
    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(CoreError::Input(format!(
                "gradient length {} does not match tensor length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Add `delta` into the gradient slot, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(CoreError::Input(format!(
                "gradient length {} does not match tensor length {}",
                delta.len(),
                self.data.len()
            )));
        }
        let g = self.grad.get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = *gi + *di;
        }
        Ok(())
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(CoreError::Input(format!(
                "cannot reshape {} elements to {shape:?}",
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Error if any data value is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "{context}: non-finite value {v} at flat index {i}"
                )));
            }
        }
        Ok(())
    }

    /// Convert element precision (f32 <-> f64).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.to_f64())).collect()),
        }
    }

    pub fn describe(&self) -> String {
        format!("Tensor{:?}", self.shape)
    }
}

/// One-hot row vectors for a label batch.
pub fn one_hot<T: Real>(labels: &[usize], num_classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * num_classes];
    for (i, &c) in labels.iter().enumerate() {
        if c >= num_classes {
            return Err(CoreError::Input(format!(
                "label {c} out of range for {num_classes} classes"
            )));
        }
        data[i * num_classes + c] = T::one();
    }
    Tensor::from_vec(&[labels.len(), num_classes], data)
}

/// Recover class indices from one-hot rows; rejects rows that are not
/// exactly one-hot.
pub fn one_hot_to_indices<T: Real>(labels: &Tensor<T>) -> Result<Vec<usize>> {
    if labels.shape().len() != 2 {
        return Err(CoreError::Input(format!(
            "one-hot labels must be 2-D, got {:?}",
            labels.shape()
        )));
    }
    let (n, k) = (labels.shape()[0], labels.shape()[1]);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &labels.data()[i * k..(i + 1) * k];
        let mut hot = None;
        for (j, &v) in row.iter().enumerate() {
            if v == T::one() {
                if hot.is_some() {
                    return Err(CoreError::Input(format!("label row {i} has multiple ones")));
                }
                hot = Some(j);
            } else if v != T::zero() {
                return Err(CoreError::Input(format!(
                    "label row {i} is not one-hot (entry {j} = {v})"
                )));
            }
        }
        match hot {
            Some(j) => out.push(j),
            None => return Err(CoreError::Input(format!("label row {i} has no one"))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_shape_product() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn grad_slot_mirrors_shape() {
        let mut t = Tensor::<f32>::zeros(&[2, 2]);
        assert!(t.set_grad(vec![1.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        t.accumulate_grad(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = Tensor::<f32>::kaiming(&[4, 3], 3, 42, "w", 0);
        let b = Tensor::<f32>::kaiming(&[4, 3], 3, 42, "w", 0);
        let c = Tensor::<f32>::kaiming(&[4, 3], 3, 42, "w", 1);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn ensure_finite_names_the_offender() {
        let mut t = Tensor::<f64>::zeros(&[3]);
        t.data_mut()[1] = f64::NAN;
        let err = t.ensure_finite("relu output").unwrap_err();
        assert!(matches!(err, CoreError::Numeric(_)));
    }

    #[test]
    fn one_hot_round_trip_and_rejection() {
        let t = one_hot::<f32>(&[3, 0], 10).unwrap();
        assert_eq!(t.data()[3], 1.0);
        assert_eq!(t.data()[10], 1.0);
        assert_eq!(one_hot_to_indices(&t).unwrap(), vec![3, 0]);

        let bad = Tensor::<f32>::from_vec(&[1, 3], vec![0.5, 0.5, 0.0]).unwrap();
        assert!(one_hot_to_indices(&bad).is_err());
    }
}
