//! Fixtures for the kernel benchmarks.

use meprop::{ConvLayer, MePropPolicy, Padding, Sparsifiable, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// A convolution with a cached forward pass, ready for `backward`.
pub struct ConvFixture {
    pub layer: ConvLayer<f32>,
    pub dy: Tensor<f32>,
}

/// `[batch, side, side, cin]` input through a same-padded `kernel`x`kernel`
/// convolution to `cout` maps. With `ratio` set, a top-k policy is attached.
pub fn conv_fixture(
    batch: usize,
    side: usize,
    cin: usize,
    cout: usize,
    kernel: usize,
    ratio: Option<f64>,
) -> ConvFixture {
    let mut r = rng(7);
    let mut layer =
        ConvLayer::he_init((kernel, kernel), cin, cout, 1, Padding::Same, &mut r).unwrap();
    if let Some(ratio) = ratio {
        layer
            .attach(MePropPolicy::new(ratio, 0.0, &[side, side, cout]).unwrap())
            .unwrap();
    }
    let x = uniform(&mut r, &[batch, side, side, cin]);
    let y = layer.forward(&x).unwrap();
    // About three quarters zero, as behind ReLU and 2x2 max pooling.
    let mut dy = uniform(&mut r, y.shape());
    for v in dy.data_mut() {
        if r.gen_bool(0.75) {
            *v = 0.0;
        }
    }
    ConvFixture { layer, dy }
}
