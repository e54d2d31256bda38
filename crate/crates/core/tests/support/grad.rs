//! One randomised finite-difference check per layer type.

use meprop::layers::{relu, relu_backward, softmax_xent};
use meprop::{BatchNorm, ConvLayer, DenseLayer, MaxPool, MePropPolicy, Padding, Sparsifiable};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{away_from_zero, distinct, fd_check, merge, project, uniform, with_data, FdReport};

type Check = Result<FdReport, String>;

fn conv_setup(rng: &mut ChaCha8Rng) -> (ConvLayer<f64>, meprop::Tensor<f64>) {
    let m = rng.gen_range(1..=2);
    let h = rng.gen_range(3..=6);
    let w = rng.gen_range(3..=6);
    let cin = rng.gen_range(1..=3);
    let cout = rng.gen_range(1..=3);
    let k = rng.gen_range(1..=3);
    let stride = rng.gen_range(1..=2);
    let padding = if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
    let layer = ConvLayer::new(
        uniform(rng, &[k, k, cin, cout], -1.0, 1.0),
        uniform(rng, &[cout], -0.5, 0.5),
        stride,
        padding,
    )
    .unwrap();
    let x = uniform(rng, &[m, h, w, cin], -1.0, 1.0);
    (layer, x)
}

pub fn conv(rng: &mut ChaCha8Rng) -> Check {
    let (mut layer, x) = conv_setup(rng);
    let y = layer.forward(&x).map_err(|e| e.to_string())?;
    let r = uniform(rng, y.shape(), -1.0, 1.0);
    let g = layer.backward(&r).map_err(|e| e.to_string())?;
    let (stride, padding) = (layer.stride(), layer.padding());
    let (w, b) = (layer.weight.clone(), layer.bias.clone());

    let dx = fd_check("conv dx", x.data(), g.dx.data(), |v| {
        project(&layer.infer(&with_data(x.shape(), v)).unwrap(), &r)
    })?;
    let dw = fd_check("conv dw", w.data(), g.dw.data(), |v| {
        let l = ConvLayer::new(with_data(w.shape(), v), b.clone(), stride, padding).unwrap();
        project(&l.infer(&x).unwrap(), &r)
    })?;
    let db = fd_check("conv db", b.data(), g.db.data(), |v| {
        let l = ConvLayer::new(w.clone(), with_data(b.shape(), v), stride, padding).unwrap();
        project(&l.infer(&x).unwrap(), &r)
    })?;
    Ok(merge(merge(dx, dw), db))
}

/// Conv backward with a meProp policy attached matches the gradient of
/// `sum((mask * r) * y)`, the projection restricted to the kept entries.
pub fn masked_conv(rng: &mut ChaCha8Rng) -> Check {
    let (mut layer, x) = conv_setup(rng);
    let y = layer.forward(&x).map_err(|e| e.to_string())?;
    let ratio = rng.gen_range(0.05..0.9);
    let decay = if rng.gen_bool(0.5) { 0.0 } else { 0.6 };
    layer
        .attach(MePropPolicy::new(ratio, decay, &y.shape()[1..]).unwrap())
        .map_err(|e| e.to_string())?;
    let r = uniform(rng, y.shape(), -1.0, 1.0);
    let g = layer.backward(&r).map_err(|e| e.to_string())?;
    let mask = layer.gate().policy().unwrap().mask().map_err(|e| e.to_string())?;
    let mut masked = r.clone();
    for sample in masked.data_mut().chunks_exact_mut(mask.len()) {
        for (v, &keep) in sample.iter_mut().zip(&mask) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    let (stride, padding) = (layer.stride(), layer.padding());
    let (w, b) = (layer.weight.clone(), layer.bias.clone());
    let dx = fd_check("masked conv dx", x.data(), g.dx.data(), |v| {
        project(&layer.infer(&with_data(x.shape(), v)).unwrap(), &masked)
    })?;
    let dw = fd_check("masked conv dw", w.data(), g.dw.data(), |v| {
        let l = ConvLayer::new(with_data(w.shape(), v), b.clone(), stride, padding).unwrap();
        project(&l.infer(&x).unwrap(), &masked)
    })?;
    Ok(merge(dx, dw))
}

pub fn dense(rng: &mut ChaCha8Rng) -> Check {
    let m = rng.gen_range(1..=4);
    let n_in = rng.gen_range(1..=8);
    let n_out = rng.gen_range(1..=6);
    let w = uniform(rng, &[n_out, n_in], -1.0, 1.0);
    let b = uniform(rng, &[n_out], -0.5, 0.5);
    let mut layer = DenseLayer::new(w.clone(), b.clone()).unwrap();
    let x = uniform(rng, &[m, n_in], -1.0, 1.0);
    let y = layer.forward(&x).map_err(|e| e.to_string())?;
    let r = uniform(rng, y.shape(), -1.0, 1.0);
    let g = layer.backward(&r).map_err(|e| e.to_string())?;
    let dx = fd_check("dense dx", x.data(), g.dx.data(), |v| {
        project(&layer.infer(&with_data(x.shape(), v)).unwrap(), &r)
    })?;
    let dw = fd_check("dense dw", w.data(), g.dw.data(), |v| {
        let l = DenseLayer::new(with_data(w.shape(), v), b.clone()).unwrap();
        project(&l.infer(&x).unwrap(), &r)
    })?;
    let db = fd_check("dense db", b.data(), g.db.data(), |v| {
        let l = DenseLayer::new(w.clone(), with_data(b.shape(), v)).unwrap();
        project(&l.infer(&x).unwrap(), &r)
    })?;
    Ok(merge(merge(dx, dw), db))
}

pub fn relu_layer(rng: &mut ChaCha8Rng) -> Check {
    let shape = [rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=4)];
    let x = away_from_zero(rng, &shape, 1e-3);
    let r = uniform(rng, &shape, -1.0, 1.0);
    let dx = relu_backward(&r, &x).map_err(|e| e.to_string())?;
    fd_check("relu dx", x.data(), dx.data(), |v| {
        project(&relu(&with_data(&shape, v)), &r)
    })
}

pub fn pool(rng: &mut ChaCha8Rng) -> Check {
    let shape = [
        rng.gen_range(1..=2),
        rng.gen_range(2..=7),
        rng.gen_range(2..=7),
        rng.gen_range(1..=3),
    ];
    let mut p = MaxPool::default();
    let x = distinct(rng, &shape);
    let y = p.forward(&x).map_err(|e| e.to_string())?;
    let r = uniform(rng, y.shape(), -1.0, 1.0);
    let dx = p.backward(&r).map_err(|e| e.to_string())?;
    fd_check("pool dx", x.data(), dx.data(), |v| {
        project(&p.infer(&with_data(&shape, v)).unwrap(), &r)
    })
}

pub fn softmax_loss(rng: &mut ChaCha8Rng) -> Check {
    let m = rng.gen_range(1..=5);
    let classes = rng.gen_range(2..=10);
    let logits = uniform(rng, &[m, classes], -3.0, 3.0);
    let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..classes)).collect();
    let (_, d) = softmax_xent(&logits, &labels).map_err(|e| e.to_string())?;
    fd_check("softmax-xent dlogits", logits.data(), d.data(), |v| {
        softmax_xent(&with_data(logits.shape(), v), &labels).unwrap().0
    })
}

pub fn batchnorm(rng: &mut ChaCha8Rng) -> Check {
    let c = rng.gen_range(1..=3);
    let shape = if rng.gen_bool(0.5) {
        vec![rng.gen_range(2..=3), rng.gen_range(1..=3), rng.gen_range(1..=3), c]
    } else {
        vec![rng.gen_range(2..=6), c]
    };
    let mut bn = BatchNorm::<f64>::new(c, 1e-3, 0.99).unwrap();
    bn.gamma = uniform(rng, &[c], 0.5, 1.5);
    bn.beta = uniform(rng, &[c], -0.5, 0.5);
    let x = uniform(rng, &shape, -2.0, 2.0);
    let y = bn.forward_train(&x).map_err(|e| e.to_string())?;
    let r = uniform(rng, y.shape(), -1.0, 1.0);
    let g = bn.backward(&r).map_err(|e| e.to_string())?;
    let base = bn.clone();
    let dx = fd_check("bn dx", x.data(), g.dx.data(), |v| {
        let mut b = base.clone();
        project(&b.forward_train(&with_data(&shape, v)).unwrap(), &r)
    })?;
    let dgamma = fd_check("bn dgamma", base.gamma.data(), g.dgamma.data(), |v| {
        let mut b = base.clone();
        b.gamma = with_data(&[c], v);
        project(&b.forward_train(&x).unwrap(), &r)
    })?;
    let dbeta = fd_check("bn dbeta", base.beta.data(), g.dbeta.data(), |v| {
        let mut b = base.clone();
        b.beta = with_data(&[c], v);
        project(&b.forward_train(&x).unwrap(), &r)
    })?;
    Ok(merge(merge(dx, dgamma), dbeta))
}

pub type Case = fn(&mut ChaCha8Rng) -> Check;

pub const LAYERS: [(&str, Case); 6] = [
    ("conv", conv),
    ("dense", dense),
    ("relu", relu_layer),
    ("pool", pool),
    ("softmax-xent", softmax_loss),
    ("batchnorm", batchnorm),
];
