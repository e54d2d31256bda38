use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Padding, Scalar, Tensor};

#[derive(Debug, Clone)]
struct PoolCache {
    input_shape: [usize; 4],
    /// Flat input offset of the maximum for every output cell.
    argmax: Vec<usize>,
}

/// Max pooling over square windows, per channel.
///
/// Uses `same` geometry: `out = ceil(in / stride)`, and border windows that
/// overhang the input only look at in-bounds positions. The backward pass
/// routes each output gradient to the argmax of its window; ties resolve to
/// the lowest flat input offset.
#[derive(Debug, Clone)]
pub struct MaxPool {
    size: usize,
    stride: usize,
    cache: Option<PoolCache>,
}

impl Default for MaxPool {
    fn default() -> Self {
        Self::new(2, 2).expect("2x2 stride-2 pooling is valid")
    }
}

impl MaxPool {
    pub fn new(size: usize, stride: usize) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(Error::Argument(
                "pool size and stride must be positive".into(),
            ));
        }
        Ok(Self {
            size,
            stride,
            cache: None,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    fn geometry(&self, h: usize, w: usize) -> Result<ConvGeometry> {
        ConvGeometry::new(h, w, self.size, self.size, self.stride, Padding::Same)
    }

    pub fn output_shape(&self, x_shape: &[usize]) -> Result<[usize; 4]> {
        match *x_shape {
            [m, h, w, c] => {
                let g = self.geometry(h, w)?;
                Ok([m, g.out_h, g.out_w, c])
            }
            _ => Err(Error::Dimension(format!(
                "max-pool input must be [m, h, w, c], got {x_shape:?}"
            ))),
        }
    }

    fn pool<T: Scalar>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let [m, h, w, c] = x.dims4("max-pool")?;
        let g = self.geometry(h, w)?;
        let xd = x.data();
        let n_out = m * g.out_h * g.out_w * c;
        let mut out = Vec::with_capacity(n_out);
        let mut argmax = Vec::with_capacity(n_out);
        for i in 0..m {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    for ch in 0..c {
                        let mut best: Option<(usize, T)> = None;
                        // Taps are visited in increasing flat offset, so a
                        // strict comparison keeps the lowest index on ties.
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                                    let o = ((i * h + y) * w + xx) * c + ch;
                                    let v = xd[o];
                                    if best.is_none_or(|(_, b)| v > b) {
                                        best = Some((o, v));
                                    }
                                }
                            }
                        }
                        let (o, v) = best.ok_or_else(|| {
                            Error::Dimension("pooling window lies entirely in padding".into())
                        })?;
                        out.push(v);
                        argmax.push(o);
                    }
                }
            }
        }
        Ok((Tensor::new(&[m, g.out_h, g.out_w, c], out)?, argmax))
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, argmax) = self.pool(x)?;
        let s = x.shape();
        self.cache = Some(PoolCache {
            input_shape: [s[0], s[1], s[2], s[3]],
            argmax,
        });
        Ok(y)
    }

    pub fn infer<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.pool(x)?.0)
    }

    pub fn backward<T: Scalar>(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("max-pool backward called without a cached forward".into()))?;
        if dy.len() != cache.argmax.len() {
            return Err(Error::Dimension(format!(
                "max-pool output gradient {:?} does not match cached output ({} cells)",
                dy.shape(),
                cache.argmax.len()
            )));
        }
        let mut dx = Tensor::zeros(&cache.input_shape);
        let dxd = dx.data_mut();
        for (&o, &g) in cache.argmax.iter().zip(dy.data()) {
            dxd[o] += g;
        }
        Ok(dx)
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn reset(&mut self) {
        self.cache = None;
    }
}
