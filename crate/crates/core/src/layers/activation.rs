use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `max(0, x)` elementwise.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `dz` where `x > 0`; the derivative at exactly zero is taken as 0.
pub fn relu_backward<T: Scalar>(dz: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if dz.shape() != x.shape() {
        return Err(Error::Dimension(format!(
            "relu gradient {:?} does not match input {:?}",
            dz.shape(),
            x.shape()
        )));
    }
    let data = dz
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(dz.shape(), data)
}

/// ReLU with the forward input cached for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let z = relu(x);
        self.cache = Some(x.clone());
        z
    }

    pub fn backward(&self, dz: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("relu backward called without a cached forward".into()))?;
        relu_backward(dz, x)
    }

    pub fn reset(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn definition() {
        let x = Tensor::from_f64(&[3], &[-1., 0., 2.]).unwrap();
        assert_eq!(relu(&x).data(), &[0., 0., 2.]);
        let dy = relu_backward(&Tensor::full(&[3], 1.0), &x).unwrap();
        assert_eq!(dy.data(), &[0., 0., 1.]);
    }

    #[test]
    fn all_negative_blocks_everything() {
        let x = Tensor::from_f64(&[4], &[-1., -2., -0.5, -7.]).unwrap();
        let mut r = Relu::new();
        r.forward(&x);
        assert_eq!(r.backward(&Tensor::full(&[4], 3.0)).unwrap().nnz(), 0);
    }

    #[test]
    fn backward_nnz_equals_positive_fraction() {
        let data: Vec<f64> = (0..100).map(|i| ((i * 37) % 23) as f64 - 11.0).collect();
        let x = Tensor::from_f64(&[100], &data).unwrap();
        let positives = data.iter().filter(|&&v| v > 0.0).count();
        let dy = relu_backward(&Tensor::full(&[100], 1.0), &x).unwrap();
        assert_eq!(dy.nnz(), positives);
    }

    #[test]
    fn needs_cache() {
        let r = Relu::<f32>::new();
        assert!(matches!(r.backward(&Tensor::zeros(&[1])), Err(Error::State(_))));
    }
}
