//! The im2col convolution against direct nested loops.

mod support;

use meprop::tensor::ConvGeometry;
use meprop::{ConvLayer, Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    x: Tensor<f64>,
    w: Tensor<f64>,
    b: Tensor<f64>,
    stride: usize,
    padding: Padding,
}

fn case(rng: &mut ChaCha8Rng) -> Case {
    let (m, h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=9), rng.gen_range(1..=9));
    let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
    let k = rng.gen_range(1..=5.min(h.min(w)).max(1));
    let stride = rng.gen_range(1..=3);
    let padding = if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
    Case {
        x: support::uniform(rng, &[m, h, w, cin], -1.0, 1.0),
        w: support::uniform(rng, &[k, k, cin, cout], -1.0, 1.0),
        b: support::uniform(rng, &[cout], -1.0, 1.0),
        stride,
        padding,
    }
}

/// Input coordinate of a filter tap, or `None` in the zero padding.
fn tap(g: &ConvGeometry, o: usize, kk: usize, pad: usize, limit: usize) -> Option<usize> {
    let pos = (o * g.stride + kk) as isize - pad as isize;
    (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
}

fn direct(c: &Case) -> (Tensor<f64>, ConvGeometry) {
    let s = c.x.shape();
    let (m, h, w, cin) = (s[0], s[1], s[2], s[3]);
    let (k, cout) = (c.w.shape()[0], c.w.shape()[3]);
    let g = ConvGeometry::new(h, w, k, k, c.stride, c.padding).unwrap();
    let mut y = Tensor::zeros(&[m, g.out_h, g.out_w, cout]);
    for i in 0..m {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for co in 0..cout {
                    let mut acc = c.b.data()[co];
                    for ky in 0..k {
                        for kx in 0..k {
                            let (Some(yy), Some(xx)) =
                                (tap(&g, oy, ky, g.pad_top, h), tap(&g, ox, kx, g.pad_left, w))
                            else {
                                continue;
                            };
                            for ci in 0..cin {
                                acc += c.x.get(&[i, yy, xx, ci]) * c.w.get(&[ky, kx, ci, co]);
                            }
                        }
                    }
                    y.set(&[i, oy, ox, co], acc);
                }
            }
        }
    }
    (y, g)
}

/// dW and dx by looping over every (output, tap) pair.
fn direct_backward(c: &Case, g: &ConvGeometry, dy: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let s = c.x.shape();
    let (m, h, w, cin) = (s[0], s[1], s[2], s[3]);
    let (k, cout) = (c.w.shape()[0], c.w.shape()[3]);
    let mut dw = Tensor::zeros(c.w.shape());
    let mut dx = Tensor::zeros(c.x.shape());
    for i in 0..m {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for co in 0..cout {
                    let d = dy.get(&[i, oy, ox, co]);
                    for ky in 0..k {
                        for kx in 0..k {
                            let (Some(yy), Some(xx)) =
                                (tap(g, oy, ky, g.pad_top, h), tap(g, ox, kx, g.pad_left, w))
                            else {
                                continue;
                            };
                            for ci in 0..cin {
                                let wi = [ky, kx, ci, co];
                                let xi = [i, yy, xx, ci];
                                dw.set(&wi, dw.get(&wi) + d * c.x.get(&xi));
                                dx.set(&xi, dx.get(&xi) + d * c.w.get(&wi));
                            }
                        }
                    }
                }
            }
        }
    }
    (dw, dx)
}

#[test]
fn forward_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let c = case(&mut rng);
        let layer = ConvLayer::new(c.w.clone(), c.b.clone(), c.stride, c.padding).unwrap();
        let got = layer.infer(&c.x).unwrap();
        let (want, _) = direct(&c);
        assert_eq!(got.shape(), want.shape());
        assert!(support::max_abs_diff(got.data(), want.data()) < 1e-10);
    }
}

#[test]
fn backward_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..200 {
        let c = case(&mut rng);
        let mut layer = ConvLayer::new(c.w.clone(), c.b.clone(), c.stride, c.padding).unwrap();
        let y = layer.forward(&c.x).unwrap();
        // Roughly half the entries zero, as after ReLU and pooling.
        let mut dy = support::uniform(&mut rng, y.shape(), -1.0, 1.0);
        for v in dy.data_mut() {
            if rng.gen_bool(0.5) {
                *v = 0.0;
            }
        }
        let got = layer.backward(&dy).unwrap();
        let (_, g) = direct(&c);
        let (dw, dx) = direct_backward(&c, &g, &dy);
        assert!(support::max_abs_diff(got.dw.data(), dw.data()) < 1e-10);
        assert!(support::max_abs_diff(got.dx.data(), dx.data()) < 1e-10);
    }
}

#[test]
fn same_padding_geometry() {
    let g = ConvGeometry::new(28, 28, 5, 5, 1, Padding::Same).unwrap();
    assert_eq!((g.out_h, g.out_w, g.pad_top, g.pad_left), (28, 28, 2, 2));
    let g = ConvGeometry::new(7, 7, 2, 2, 2, Padding::Same).unwrap();
    assert_eq!((g.out_h, g.pad_top), (4, 0));
    let g = ConvGeometry::new(6, 6, 4, 4, 1, Padding::Same).unwrap();
    // pad_total = 3, split 1 before and 2 after.
    assert_eq!((g.out_h, g.pad_top), (6, 1));
}
