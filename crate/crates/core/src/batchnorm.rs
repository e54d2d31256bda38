//! Batch normalization over the channel (last) axis.
//!
//! For conv activations `[m, h, w, c]` the statistics of map `c` are taken
//! over all `m * h * w` positions; for dense activations `[m, n]` each unit
//! is normalised over the batch. Training uses the biased batch variance;
//! inference uses running estimates of the mean and of the unbiased
//! variance `m' / (m' - 1) * var_batch`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone)]
struct BnCache<T> {
    shape: Vec<usize>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

/// Gradients of one batch-norm backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    epsilon: f64,
    momentum: f64,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    /// `gamma = 1`, `beta = 0`, running statistics `(0, 1)`.
    pub fn new(channels: usize, epsilon: f64, momentum: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::Argument(format!("epsilon must be >= 0, got {epsilon}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Argument(format!(
                "running-average momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            epsilon,
            momentum,
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    fn groups(&self, x: &Tensor<T>) -> Result<usize> {
        let c = self.channels();
        match x.shape().last() {
            Some(&last) if x.rank() >= 2 && last == c => Ok(x.len() / c.max(1)),
            _ => Err(Error::Dimension(format!(
                "batch norm over {c} channels cannot take input {:?}",
                x.shape()
            ))),
        }
    }

    /// Normalises with batch statistics, caches for backward and updates the
    /// running estimates.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let groups = self.groups(x)?;
        if groups < 2 {
            return Err(Error::Argument(format!(
                "batch norm needs at least 2 values per channel, got {groups} (input {:?})",
                x.shape()
            )));
        }
        let c = self.channels();
        let count = T::of(groups as f64);
        let mut mean = vec![T::zero(); c];
        for row in x.data().chunks_exact(c) {
            for (acc, &v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for v in &mut mean {
            *v /= count;
        }
        let mut var = vec![T::zero(); c];
        for row in x.data().chunks_exact(c) {
            for ((acc, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - mu;
                *acc += d * d;
            }
        }
        for v in &mut var {
            *v /= count;
        }

        let eps = T::of(self.epsilon);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(c) {
            for (ch, &v) in row.iter().enumerate() {
                let h = (v - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(self.gamma.data()[ch] * h + self.beta.data()[ch]);
            }
        }

        let keep = T::of(self.momentum);
        let fresh = T::one() - keep;
        let unbias = count / (count - T::one());
        for ch in 0..c {
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = keep * *rm + fresh * mean[ch];
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = keep * *rv + fresh * var[ch] * unbias;
        }

        self.cache = Some(BnCache {
            shape: x.shape().to_vec(),
            xhat,
            inv_std,
        });
        let y = Tensor::new(x.shape(), out)?;
        y.check_finite("batch norm output")?;
        Ok(y)
    }

    /// Normalises with the running estimates. Does not touch any state.
    pub fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.groups(x)?;
        let c = self.channels();
        let eps = T::of(self.epsilon);
        let scale: Vec<T> = (0..c)
            .map(|ch| self.gamma.data()[ch] / (self.running_var.data()[ch] + eps).sqrt())
            .collect();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(c) {
            for (ch, &v) in row.iter().enumerate() {
                out.push(scale[ch] * (v - self.running_mean.data()[ch]) + self.beta.data()[ch]);
            }
        }
        Tensor::new(x.shape(), out)
    }

    /// Exact gradient of the training transform, including the dependence of
    /// the batch mean and variance on every input.
    pub fn backward(&self, dy: &Tensor<T>) -> Result<BnGrads<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("batch norm backward called without a cached forward".into()))?;
        if dy.shape() != cache.shape.as_slice() {
            return Err(Error::Dimension(format!(
                "batch norm gradient {:?} does not match cached input {:?}",
                dy.shape(),
                cache.shape
            )));
        }
        let c = self.channels();
        let mut dbeta = vec![T::zero(); c];
        let mut dgamma = vec![T::zero(); c];
        for (row, hrow) in dy.data().chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
            for ch in 0..c {
                dbeta[ch] += row[ch];
                dgamma[ch] += row[ch] * hrow[ch];
            }
        }
        let count = T::of((dy.len() / c) as f64);
        let mut dx = Vec::with_capacity(dy.len());
        for (row, hrow) in dy.data().chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
            for ch in 0..c {
                let k = self.gamma.data()[ch] * cache.inv_std[ch] / count;
                dx.push(k * (count * row[ch] - dbeta[ch] - hrow[ch] * dgamma[ch]));
            }
        }
        Ok(BnGrads {
            dx: Tensor::new(dy.shape(), dx)?,
            dgamma: Tensor::new(&[c], dgamma)?,
            dbeta: Tensor::new(&[c], dbeta)?,
        })
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn reset(&mut self) {
        self.cache = None;
    }
}
