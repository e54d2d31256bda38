//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod grad;

use std::path::PathBuf;

use meprop::data::{load_mnist_dir, Dataset};
use meprop::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-7;

/// Worst disagreement seen by a gradient check.
#[derive(Debug, Clone, Copy, Default)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
    pub max_abs: f64,
}

/// Compares `analytic` against central differences of `f` around `x`.
///
/// An entry passes when its relative error is below [`FD_REL_TOL`] or its
/// absolute error is below [`FD_ABS_FLOOR`].
pub fn fd_check(
    what: &str,
    x: &[f64],
    analytic: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
) -> Result<FdReport, String> {
    assert_eq!(x.len(), analytic.len(), "{what}: gradient length");
    let mut probe = x.to_vec();
    let mut report = FdReport::default();
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        let scale = a.abs().max(numeric.abs());
        let rel = if scale > 0.0 { abs / scale } else { 0.0 };
        if rel >= FD_REL_TOL && abs >= FD_ABS_FLOOR {
            return Err(format!(
                "{what}[{i}]: analytic {a:.10e}, numeric {numeric:.10e} (rel {rel:.2e}, abs {abs:.2e})"
            ));
        }
        report.checked += 1;
        if abs >= FD_ABS_FLOOR {
            report.max_rel = report.max_rel.max(rel);
        }
        report.max_abs = report.max_abs.max(abs);
    }
    Ok(report)
}

pub fn merge(a: FdReport, b: FdReport) -> FdReport {
    FdReport {
        checked: a.checked + b.checked,
        max_rel: a.max_rel.max(b.max_rel),
        max_abs: a.max_abs.max(b.max_abs),
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Uniform values kept at least `gap` away from zero, so ReLU kinks sit
/// outside the finite-difference stencil.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Distinct values on a 0.01 grid in random order plus tiny noise, so every
/// pooling window has a unique maximum with a wide margin.
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.005 * n as f64).collect();
    data.shuffle(rng);
    for v in &mut data {
        *v += rng.gen_range(-1e-4..1e-4);
    }
    Tensor::from_f64(shape, &data).unwrap()
}

pub fn with_data(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

/// `sum(r * y)`, the scalar used to project a layer output for checking.
pub fn project(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.dot(r).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `MNIST_DIR`, else `data/mnist` at the workspace root.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub fn load_mnist() -> Result<(Dataset, Dataset), String> {
    let dir = mnist_dir();
    load_mnist_dir(&dir).map_err(|e| {
        format!(
            "MNIST not available at {} ({e}); run scripts/fetch_mnist.sh or set MNIST_DIR",
            dir.display()
        )
    })
}

/// `n` 28x28 images where class `k` is a bright bar at row `2k + 4` over
/// random background noise.
pub fn synthetic_digits(n: usize, seed: u64) -> Dataset {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.gen_range(0..10u8);
        let row = 2 * k as usize + 4;
        for y in 0..28 {
            for _ in 0..28 {
                let bar = y == row || y == row + 1;
                pixels.push(if bar { rng.gen_range(180..=255) } else { rng.gen_range(0..60) });
            }
        }
        labels.push(k);
    }
    Dataset::new(pixels, labels, 28, 28).unwrap()
}
