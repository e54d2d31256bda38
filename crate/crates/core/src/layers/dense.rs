use rand::Rng;

use super::{backward_flops, he_normal, LayerGrads};
use crate::error::{Error, Result};
use crate::meprop::{GradientGate, Sparsifiable};
use crate::tensor::{axpy, Scalar, Tensor};

/// Fully-connected layer `y = x W^T + b`.
///
/// Inputs of any rank `[m, ...]` are flattened to `[m, in_features]`; the
/// input gradient is returned in the original input shape.
#[derive(Debug, Clone)]
pub struct DenseLayer<T> {
    /// `[out_features, in_features]`
    pub weight: Tensor<T>,
    /// `[out_features]`
    pub bias: Tensor<T>,
    cache: Option<Tensor<T>>,
    gate: GradientGate<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (n, _) = weight.dims2("dense weight")?;
        if bias.shape() != [n] {
            return Err(Error::Dimension(format!(
                "dense bias {:?} does not match {n} outputs",
                bias.shape()
            )));
        }
        weight.check_finite("dense weight")?;
        bias.check_finite("dense bias")?;
        Ok(Self {
            weight,
            bias,
            cache: None,
            gate: GradientGate::new(),
        })
    }

    pub fn he_init<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Result<Self> {
        let weight = he_normal(&[out_features, in_features], in_features, rng);
        Self::new(weight, Tensor::zeros(&[out_features]))
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let m = *x.shape().first().unwrap_or(&0);
        let features: usize = x.shape().iter().skip(1).product();
        if x.rank() < 2 || features != self.in_features() {
            return Err(Error::Dimension(format!(
                "dense layer expects [m, {}] input, got {:?}",
                self.in_features(),
                x.shape()
            )));
        }
        Ok(m)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let m = self.check_input(x)?;
        let (n, d) = (self.out_features(), self.in_features());
        let w = self.weight.data();
        let mut out = Vec::with_capacity(m * n);
        for row in x.data().chunks_exact(d) {
            for (i, &b) in self.bias.data().iter().enumerate() {
                let mut acc = b;
                for (&wv, &xv) in w[i * d..(i + 1) * d].iter().zip(row) {
                    acc += wv * xv;
                }
                out.push(acc);
            }
        }
        let y = Tensor::new(&[m, n], out)?;
        y.check_finite("dense output")?;
        Ok(y)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn reset(&mut self) {
        self.cache = None;
    }

    /// Backward pass through the attached policy (if any).
    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<LayerGrads<T>> {
        self.cached_input(dy)?;
        let mut gate = std::mem::take(&mut self.gate);
        let grads = gate.apply(dy).and_then(|dy| self.backward_ungated(&dy));
        self.gate = gate;
        grads
    }

    fn cached_input(&self, dy: &Tensor<T>) -> Result<&Tensor<T>> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("dense backward called without a cached forward".into()))?;
        let expected = [x.shape()[0], self.out_features()];
        if dy.shape() != expected {
            return Err(Error::Dimension(format!(
                "dense output gradient {:?} does not match last output {expected:?}",
                dy.shape()
            )));
        }
        Ok(x)
    }

    /// `dW = dy^T x`, `db = sum_batch dy`, `dx = dy W`. Rows of `dW` whose
    /// output gradient is zero for every sample stay exactly zero.
    pub fn backward_ungated(&self, dy: &Tensor<T>) -> Result<LayerGrads<T>> {
        let x = self.cached_input(dy)?;
        let (n, d) = (self.out_features(), self.in_features());
        let w = self.weight.data();
        let mut dw = vec![T::zero(); n * d];
        let mut db = vec![T::zero(); n];
        let mut dx = vec![T::zero(); x.len()];
        for ((grow, xrow), dxrow) in dy
            .data()
            .chunks_exact(n)
            .zip(x.data().chunks_exact(d))
            .zip(dx.chunks_exact_mut(d))
        {
            for (i, &g) in grow.iter().enumerate() {
                if g.is_zero() {
                    continue;
                }
                db[i] += g;
                axpy(&mut dw[i * d..(i + 1) * d], g, xrow);
                axpy(dxrow, g, &w[i * d..(i + 1) * d]);
            }
        }
        Ok(LayerGrads {
            dw: Tensor::new(&[n, d], dw)?,
            db: Tensor::new(&[n], db)?,
            dx: Tensor::new(x.shape(), dx)?,
        })
    }

    pub fn backward_flops(&self, entries: usize) -> u64 {
        backward_flops(entries, self.in_features())
    }
}

impl<T: Scalar> Sparsifiable<T> for DenseLayer<T> {
    fn gate(&self) -> &GradientGate<T> {
        &self.gate
    }

    fn gate_mut(&mut self) -> &mut GradientGate<T> {
        &mut self.gate
    }
}
