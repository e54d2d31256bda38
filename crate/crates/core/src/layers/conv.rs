use rand::Rng;

use super::{backward_flops, he_normal, LayerGrads};
use crate::error::{Error, Result};
use crate::meprop::{GradientGate, Sparsifiable};
use crate::tensor::{axpy, col2im_geom, im2col_geom, ConvGeometry, Padding, Scalar, Tensor};

#[derive(Debug, Clone)]
struct ConvCache<T> {
    input_shape: [usize; 4],
    geom: ConvGeometry,
    cols: Tensor<T>,
}

/// 2-D convolution lowered to a matrix product over im2col patches.
#[derive(Debug, Clone)]
pub struct ConvLayer<T> {
    /// `[kh, kw, c_in, c_out]`
    pub weight: Tensor<T>,
    /// `[c_out]`
    pub bias: Tensor<T>,
    stride: usize,
    padding: Padding,
    cache: Option<ConvCache<T>>,
    gate: GradientGate<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, stride: usize, padding: Padding) -> Result<Self> {
        let [_, _, _, cout] = weight.dims4("conv weight")?;
        if bias.shape() != [cout] {
            return Err(Error::Dimension(format!(
                "conv bias {:?} does not match {cout} output channels",
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Argument("conv stride must be at least 1".into()));
        }
        weight.check_finite("conv weight")?;
        bias.check_finite("conv bias")?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            cache: None,
            gate: GradientGate::new(),
        })
    }

    pub fn he_init<R: Rng + ?Sized>(
        kernel: (usize, usize),
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        let weight = he_normal(&[kh, kw, in_channels, out_channels], kh * kw * in_channels, rng);
        Self::new(weight, Tensor::zeros(&[out_channels]), stride, padding)
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[0], self.weight.shape()[1])
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    /// Length of one im2col row: `kh * kw * c_in`.
    pub fn patch_len(&self) -> usize {
        let (kh, kw) = self.kernel();
        kh * kw * self.in_channels()
    }

    fn geometry(&self, x_shape: &[usize]) -> Result<ConvGeometry> {
        let [_, h, w, c] = match *x_shape {
            [m, h, w, c] => [m, h, w, c],
            _ => {
                return Err(Error::Dimension(format!(
                    "conv input must be [m, h, w, c], got {x_shape:?}"
                )))
            }
        };
        if c != self.in_channels() {
            return Err(Error::Dimension(format!(
                "conv expects {} input channels, input {x_shape:?} has {c}",
                self.in_channels()
            )));
        }
        let (kh, kw) = self.kernel();
        ConvGeometry::new(h, w, kh, kw, self.stride, self.padding)
    }

    pub fn output_shape(&self, x_shape: &[usize]) -> Result<[usize; 4]> {
        let g = self.geometry(x_shape)?;
        Ok([x_shape[0], g.out_h, g.out_w, self.out_channels()])
    }

    fn apply(&self, cols: &Tensor<T>, m: usize, g: &ConvGeometry) -> Result<Tensor<T>> {
        let k = self.patch_len();
        let cout = self.out_channels();
        let rows = cols.shape()[0];
        let w = self.weight.data();
        let mut out = Vec::with_capacity(rows * cout);
        for r in 0..rows {
            out.extend_from_slice(self.bias.data());
            let acc = &mut out[r * cout..(r + 1) * cout];
            for (kk, &a) in cols.data()[r * k..(r + 1) * k].iter().enumerate() {
                if !a.is_zero() {
                    axpy(acc, a, &w[kk * cout..(kk + 1) * cout]);
                }
            }
        }
        let y = Tensor::new(&[m, g.out_h, g.out_w, cout], out)?;
        y.check_finite("conv output")?;
        Ok(y)
    }

    /// Training forward pass; caches the input geometry and patch matrix.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geometry(x.shape())?;
        let cols = im2col_geom(x, &g);
        let y = self.apply(&cols, x.shape()[0], &g)?;
        self.cache = Some(ConvCache {
            input_shape: [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]],
            geom: g,
            cols,
        });
        Ok(y)
    }

    /// Forward pass without caching.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geometry(x.shape())?;
        let cols = im2col_geom(x, &g);
        self.apply(&cols, x.shape()[0], &g)
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn reset(&mut self) {
        self.cache = None;
    }

    /// Backward pass through the attached policy (if any).
    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<LayerGrads<T>> {
        self.check_dy(dy)?;
        let mut gate = std::mem::take(&mut self.gate);
        let routed = gate.apply(dy);
        let grads = routed.and_then(|dy| self.backward_ungated(&dy));
        self.gate = gate;
        grads
    }

    fn check_dy(&self, dy: &Tensor<T>) -> Result<&ConvCache<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("conv backward called without a cached forward".into()))?;
        let [m, _, _, _] = cache.input_shape;
        let expected = [m, cache.geom.out_h, cache.geom.out_w, self.out_channels()];
        if dy.shape() != expected {
            return Err(Error::Dimension(format!(
                "conv output gradient {:?} does not match last output {expected:?}",
                dy.shape()
            )));
        }
        Ok(cache)
    }

    /// Backward pass on `dy` as given, bypassing any policy.
    ///
    /// Zero entries of `dy` are skipped, so work is proportional to its
    /// nonzero count.
    pub fn backward_ungated(&self, dy: &Tensor<T>) -> Result<LayerGrads<T>> {
        let cache = self.check_dy(dy)?;
        let k = self.patch_len();
        let cout = self.out_channels();
        let rows = cache.cols.shape()[0];
        let cols = cache.cols.data();
        let dyd = dy.data();

        // Filter rows of the transposed weight matrix, [c_out, k].
        let w_t = self.weight.clone().reshape(&[k, cout])?.transpose()?;
        let w_t = w_t.data();

        let mut dw_t = vec![T::zero(); cout * k];
        let mut db = vec![T::zero(); cout];
        let mut dcols = vec![T::zero(); rows * k];
        for r in 0..rows {
            let patch = &cols[r * k..(r + 1) * k];
            let dpatch = &mut dcols[r * k..(r + 1) * k];
            for (co, &g) in dyd[r * cout..(r + 1) * cout].iter().enumerate() {
                if g.is_zero() {
                    continue;
                }
                db[co] += g;
                axpy(&mut dw_t[co * k..(co + 1) * k], g, patch);
                axpy(dpatch, g, &w_t[co * k..(co + 1) * k]);
            }
        }
        let dw = Tensor::new(&[cout, k], dw_t)?
            .transpose()?
            .reshape(self.weight.shape())?;
        let dcols = Tensor::new(&[rows, k], dcols)?;
        let dx = col2im_geom(&dcols, cache.input_shape, &cache.geom)?;
        Ok(LayerGrads {
            dw,
            db: Tensor::new(&[cout], db)?,
            dx,
        })
    }

    /// Backward FLOPs for `entries` output-gradient entries.
    pub fn backward_flops(&self, entries: usize) -> u64 {
        backward_flops(entries, self.patch_len())
    }
}

impl<T: Scalar> Sparsifiable<T> for ConvLayer<T> {
    fn gate(&self) -> &GradientGate<T> {
        &self.gate
    }

    fn gate_mut(&mut self) -> &mut GradientGate<T> {
        &mut self.gate
    }
}
