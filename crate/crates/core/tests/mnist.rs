//! Checks against the official MNIST files. Each test returns early, with a
//! note on stderr, when the files are not present.

mod support;

use std::collections::HashSet;

use meprop::config::TrainConfig;
use meprop::data::Subset;
use meprop::network::{Network, Op};
use meprop::trainer::{self, evaluate, Splits};

macro_rules! mnist_or_skip {
    () => {
        match support::load_mnist() {
            Ok(d) => d,
            Err(msg) => {
                eprintln!("skipping: {msg}");
                return;
            }
        }
    };
}

/// Label counts read straight from the IDX bytes, independent of the loader.
fn raw_label_counts(file: &str) -> Option<[usize; 10]> {
    let bytes = std::fs::read(support::mnist_dir().join(file)).ok()?;
    let mut counts = [0usize; 10];
    for &b in &bytes[8..] {
        counts[b as usize] += 1;
    }
    Some(counts)
}

#[test]
fn official_sizes() {
    let (train, test) = mnist_or_skip!();
    assert_eq!(train.len(), 60_000);
    assert_eq!(test.len(), 10_000);
    assert_eq!((train.rows(), train.cols()), (28, 28));
    assert_eq!(train.label(0), 5);
    assert_eq!(test.label(0), 7);
}

#[test]
fn loader_agrees_with_raw_label_bytes() {
    let (_, test) = mnist_or_skip!();
    let Some(raw) = raw_label_counts("t10k-labels-idx1-ubyte") else {
        eprintln!("skipping: uncompressed label file not present");
        return;
    };
    let mut counts = [0usize; 10];
    for &l in test.labels() {
        counts[l as usize] += 1;
    }
    assert_eq!(counts, raw);
    assert_eq!(raw[1], 1135);
}

#[test]
fn pixels_scale_to_unit_interval() {
    let (train, _) = mnist_or_skip!();
    let x = train.images::<f32>(&[0, 1, 2]);
    assert_eq!(x.shape(), &[3, 28, 28, 1]);
    assert!(x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(x.data().contains(&1.0));
}

#[test]
fn splits_are_disjoint() {
    let (train, test) = mnist_or_skip!();
    let cfg = TrainConfig::desk();
    let s = Splits::new(&train, &test, &cfg).unwrap();
    assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (55_000, 5_000, 10_000));
    let tr: HashSet<usize> = s.train.indices().iter().copied().collect();
    assert!(s.dev.indices().iter().all(|i| !tr.contains(i)));
    assert_eq!(tr.len(), 55_000);
}

#[test]
fn constant_logits_score_modal_class_frequency() {
    let (_, test) = mnist_or_skip!();
    let Some(raw) = raw_label_counts("t10k-labels-idx1-ubyte") else {
        eprintln!("skipping: uncompressed label file not present");
        return;
    };
    let modal = (0..10).max_by_key(|&c| raw[c]).unwrap();
    let expected = raw[modal] as f64 / 10_000.0;

    let mut net = Network::<f32>::build(&TrainConfig::desk()).unwrap();
    let Op::Dense(fc2) = net.node_mut("fc2").unwrap().op_mut() else {
        panic!("fc2 is dense");
    };
    fc2.weight.data_mut().fill(0.0);
    fc2.bias.data_mut().fill(0.0);
    fc2.bias.data_mut()[modal] = 1.0;
    let acc = evaluate(&net, &Subset::all(&test), 1000).unwrap();
    assert_eq!(acc, expected);
    assert!((acc - 0.1135).abs() < 1e-12);
}

#[test]
fn untrained_network_is_near_chance() {
    let (train, test) = mnist_or_skip!();
    let mut cfg = TrainConfig::desk();
    cfg.epochs = 0;
    let (_, summary) = trainer::run(&cfg, &train, &test, &mut |_| Ok(())).unwrap();
    let dev = summary.best_dev_acc.unwrap();
    assert_eq!(summary.steps, 0);
    assert!((dev - 0.1).abs() <= 0.05, "dev accuracy {dev}");
}

#[test]
fn sparsity_after_one_step_respects_pool_bound() {
    let (train, test) = mnist_or_skip!();
    let cfg = TrainConfig::desk();
    let s = Splits::new(&train, &test, &cfg).unwrap();
    let rows = trainer::sparsity_after_steps::<f32>(&cfg, &s.train, 1).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.layer.as_str()).collect();
    assert_eq!(names, ["conv1", "conv2", "fc1", "fc2"]);
    assert!(rows[0].density <= 0.25 && rows[1].density <= 0.25, "{rows:?}");
    assert!(rows[2].density > 0.0 && rows[2].density < 1.0);
}
