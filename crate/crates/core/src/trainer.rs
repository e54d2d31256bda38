//! Training loop, evaluation, sparsity probing and grid sweeps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::checkpoint::Entry;
use crate::config::{Precision, TrainConfig};
use crate::data::{split, Dataset, Subset};
use crate::error::{Error, Result};
use crate::layers::softmax_xent;
use crate::network::{LayerTraffic, Network};
use crate::tensor::Scalar;

/// Upper bound on the steps averaged for the head and tail loss of an
/// epoch; short epochs use a quarter of their steps.
pub const LOSS_WINDOW: usize = 100;

/// Train, dev and test subsets for one run.
#[derive(Debug, Clone)]
pub struct Splits<'a> {
    pub train: Subset<'a>,
    pub dev: Subset<'a>,
    pub test: Subset<'a>,
}

impl<'a> Splits<'a> {
    /// Holds out the last `dev_fraction` of `train` for model selection and
    /// caps the remainder at `limit`.
    pub fn new(train: &'a Dataset, test: &'a Dataset, cfg: &TrainConfig) -> Result<Self> {
        let (mut tr, dev) = split(train, cfg.dev_fraction, cfg.seed)?;
        if let Some(limit) = cfg.limit {
            tr.truncate(limit);
        }
        Ok(Self {
            train: tr,
            dev,
            test: Subset::all(test),
        })
    }
}

/// Per-layer gradient statistics averaged over an epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerEpochStats {
    pub layer: String,
    pub meprop: bool,
    /// Mean fraction of nonzero output-gradient entries before masking.
    pub grad_density: f64,
    /// Mean fraction of entries passed to the backward kernels.
    pub kept_fraction: f64,
    pub flops_dense: u64,
    pub flops_sparse: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub train_loss: f64,
    /// Mean loss of the first steps of the epoch.
    pub loss_head: f64,
    /// Mean loss of the last steps of the epoch.
    pub loss_tail: f64,
    pub dev_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub layers: Vec<LayerEpochStats>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    /// Epoch whose weights were kept; 0 means the initial weights.
    pub best_epoch: usize,
    pub best_dev_acc: Option<f64>,
    /// Test accuracy of the kept weights.
    pub test_acc: f64,
    pub steps: u64,
    pub train_samples: usize,
    pub flops_dense: u64,
    pub flops_sparse: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Event {
    Epoch(EpochRecord),
    Summary(Summary),
}

/// Appends one JSON object per line.
pub struct JsonlWriter<W: Write> {
    out: W,
}

impl JsonlWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(BufWriter::new(f)))
    }
}

impl<W: Write> JsonlWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write<S: Serialize>(&mut self, record: &S) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out
            .write_all(b"\n")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io("metrics stream", e))
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Result of [`train`]: the epoch log and the best-dev weights.
#[derive(Debug, Clone)]
pub struct Outcome<T> {
    pub epochs: Vec<EpochRecord>,
    pub summary: Summary,
    pub best: Network<T>,
}

/// Classification accuracy over `data` in inference mode.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Subset<'_>, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Argument("cannot evaluate on an empty split".into()));
    }
    let mut correct = 0usize;
    for batch in data.sequential::<T>(batch_size.max(1)) {
        let pred = net.predict(&batch.x)?;
        correct += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Default)]
struct LayerAccum {
    density: f64,
    kept: f64,
    flops_dense: u64,
    flops_sparse: u64,
}

fn nonfinite_report<T: Scalar>(net: &Network<T>, epoch: usize, step: u64, err: &Error) -> Error {
    let fmt = |v: Vec<(String, f64)>| {
        v.iter()
            .map(|(n, x)| format!("{n}={x:.4e}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    Error::NonFinite(format!(
        "epoch {epoch}, step {step}: {err}; gradient norms: [{}]; parameter norms: [{}]",
        fmt(net.grad_norms()),
        fmt(net.param_norms())
    ))
}

/// Trains `net` for `cfg.epochs` epochs of shuffled mini-batches.
///
/// After each epoch the network is scored on the dev split and the weights
/// with the best dev accuracy are kept; the test split is scored once, on
/// those weights. `sink` receives one event per epoch and a final summary.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    cfg: &TrainConfig,
    splits: &Splits<'_>,
    sink: &mut dyn FnMut(&Event) -> Result<()>,
) -> Result<Outcome<T>> {
    cfg.validate()?;
    if splits.train.is_empty() && cfg.epochs > 0 {
        return Err(Error::Argument("training split is empty".into()));
    }
    let started = Instant::now();
    let has_dev = !splits.dev.is_empty();
    let mut best = net.clone();
    let mut best_epoch = 0;
    let mut best_dev = if has_dev && cfg.epochs == 0 {
        Some(evaluate(net, &splits.dev, cfg.eval_batch_size)?)
    } else {
        None
    };
    let mut steps = 0u64;
    let (mut total_dense, mut total_sparse) = (0u64, 0u64);
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut losses = Vec::with_capacity(splits.train.len() / cfg.batch_size + 1);
        let mut accum: Vec<LayerAccum> = Vec::new();
        let mut names: Vec<(String, bool)> = Vec::new();
        for batch in splits.train.batches::<T>(cfg.batch_size, cfg.seed, epoch as u64) {
            let loss = net
                .train_step(&batch.x, &batch.labels)
                .map_err(|e| match e {
                    Error::NonFinite(_) => nonfinite_report(net, epoch, steps + 1, &e),
                    other => other,
                })?;
            steps += 1;
            losses.push(loss);
            let traffic = net.traffic();
            if accum.is_empty() {
                accum = traffic.iter().map(|_| LayerAccum::default()).collect();
                names = traffic.iter().map(|t| (t.layer.clone(), t.meprop)).collect();
            }
            for (a, t) in accum.iter_mut().zip(&traffic) {
                a.density += t.nnz as f64 / t.len.max(1) as f64;
                a.kept += t.selected as f64 / t.len.max(1) as f64;
                a.flops_dense += t.flops_dense;
                a.flops_sparse += t.flops_sparse;
            }
        }
        net.reset();
        let n = losses.len().max(1) as f64;
        let layers: Vec<LayerEpochStats> = names
            .into_iter()
            .zip(accum)
            .map(|((layer, meprop), a)| LayerEpochStats {
                layer,
                meprop,
                grad_density: a.density / n,
                kept_fraction: a.kept / n,
                flops_dense: a.flops_dense,
                flops_sparse: a.flops_sparse,
            })
            .collect();
        total_dense += layers.iter().map(|l| l.flops_dense).sum::<u64>();
        total_sparse += layers.iter().map(|l| l.flops_sparse).sum::<u64>();

        let dev_acc = if has_dev {
            Some(evaluate(net, &splits.dev, cfg.eval_batch_size)?)
        } else {
            None
        };
        let improved = match (dev_acc, best_dev) {
            (Some(d), Some(b)) => d > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best = net.clone();
            best_epoch = epoch;
            best_dev = dev_acc;
        }
        let window = LOSS_WINDOW.min(losses.len() / 4).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        let record = EpochRecord {
            epoch,
            step: steps,
            train_loss: mean(&losses),
            loss_head: mean(&losses[..window.min(losses.len())]),
            loss_tail: mean(&losses[losses.len().saturating_sub(window)..]),
            dev_acc,
            test_acc: None,
            layers,
            seconds: t0.elapsed().as_secs_f64(),
        };
        sink(&Event::Epoch(record.clone()))?;
        epochs.push(record);
    }

    let test_acc = evaluate(&best, &splits.test, cfg.eval_batch_size)?;
    let summary = Summary {
        best_epoch,
        best_dev_acc: best_dev,
        test_acc,
        steps,
        train_samples: splits.train.len(),
        flops_dense: total_dense,
        flops_sparse: total_sparse,
        seconds: started.elapsed().as_secs_f64(),
    };
    sink(&Event::Summary(summary.clone()))?;
    Ok(Outcome {
        epochs,
        summary,
        best,
    })
}

/// Builds a network from `cfg`, trains it, and writes the metrics stream
/// and best-dev checkpoint when the configuration names them.
pub fn run_typed<T: Scalar>(
    cfg: &TrainConfig,
    train_data: &Dataset,
    test_data: &Dataset,
    sink: &mut dyn FnMut(&Event) -> Result<()>,
) -> Result<Outcome<T>> {
    let splits = Splits::new(train_data, test_data, cfg)?;
    let mut net = Network::<T>::build(cfg)?;
    let mut file = match &cfg.metrics_out {
        Some(p) => Some(JsonlWriter::create(p)?),
        None => None,
    };
    let outcome = train(&mut net, cfg, &splits, &mut |ev| {
        if let Some(f) = file.as_mut() {
            f.write(ev)?;
        }
        sink(ev)
    })?;
    if let Some(path) = &cfg.checkpoint {
        let mut ck = outcome.best.to_checkpoint();
        ck.push("config", Entry::Text(cfg.to_toml_string()));
        ck.write(path)?;
    }
    Ok(outcome)
}

/// [`run_typed`] at the precision named in the configuration.
pub fn run(
    cfg: &TrainConfig,
    train_data: &Dataset,
    test_data: &Dataset,
    sink: &mut dyn FnMut(&Event) -> Result<()>,
) -> Result<(Vec<EpochRecord>, Summary)> {
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, train_data, test_data, sink).map(|o| (o.epochs, o.summary)),
        Precision::F64 => run_typed::<f64>(cfg, train_data, test_data, sink).map(|o| (o.epochs, o.summary)),
    }
}

/// Output-gradient density of one weight layer, pooled over probe batches.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityRow {
    pub layer: String,
    pub entries: usize,
    pub nonzero: usize,
    pub density: f64,
}

/// Measures how many output-gradient entries are nonzero at each weight
/// layer under plain back-propagation, over up to `batches` mini-batches of
/// `data`. Works on a copy, so `net` (including batch-norm running
/// statistics and policy accumulators) is left unchanged.
pub fn measure_sparsity<T: Scalar>(
    net: &Network<T>,
    data: &Subset<'_>,
    batch_size: usize,
    batches: usize,
) -> Result<Vec<SparsityRow>> {
    if data.is_empty() {
        return Err(Error::Argument("cannot measure sparsity on an empty split".into()));
    }
    let mut probe = net.clone();
    let mut rows: Vec<SparsityRow> = Vec::new();
    for batch in data.sequential::<T>(batch_size.max(1)).take(batches.max(1)) {
        let logits = probe.forward(&batch.x)?;
        let (_, d) = softmax_xent(&logits, &batch.labels)?;
        let traffic: Vec<LayerTraffic> = probe.backward_probe(&d)?;
        if rows.is_empty() {
            rows = traffic
                .iter()
                .map(|t| SparsityRow {
                    layer: t.layer.clone(),
                    entries: 0,
                    nonzero: 0,
                    density: 0.0,
                })
                .collect();
        }
        for (r, t) in rows.iter_mut().zip(&traffic) {
            r.entries += t.len;
            r.nonzero += t.nnz;
        }
    }
    for r in &mut rows {
        r.density = r.nonzero as f64 / r.entries.max(1) as f64;
    }
    Ok(rows)
}

/// Builds a network from `cfg`, takes `steps` training steps on shuffled
/// batches of `train`, then probes the gradient density on the next batch.
pub fn sparsity_after_steps<T: Scalar>(
    cfg: &TrainConfig,
    train: &Subset<'_>,
    steps: usize,
) -> Result<Vec<SparsityRow>> {
    let mut net = Network::<T>::build(cfg)?;
    let mut batches = train.batches::<T>(cfg.batch_size, cfg.seed, 1);
    for _ in 0..steps {
        let b = batches
            .next()
            .ok_or_else(|| Error::Argument(format!("training split has fewer than {steps} batches")))?;
        net.train_step(&b.x, &b.labels)?;
    }
    let probe = batches
        .next()
        .ok_or_else(|| Error::Argument("no batch left to probe".into()))?;
    let logits = net.forward(&probe.x)?;
    let (_, d) = softmax_xent(&logits, &probe.labels)?;
    Ok(net
        .backward_probe(&d)?
        .into_iter()
        .map(|t| SparsityRow {
            density: t.nnz as f64 / t.len.max(1) as f64,
            layer: t.layer,
            entries: t.len,
            nonzero: t.nnz,
        })
        .collect())
}

/// One cell of a sweep grid. `ratio = None` is plain back-propagation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub ratio: Option<f64>,
    pub decay: f64,
    pub bn: bool,
}

impl SweepPoint {
    pub fn label(&self) -> String {
        let bn = if self.bn { "+bn" } else { "" };
        match self.ratio {
            None => format!("baseline{bn}"),
            Some(r) => format!("topk{}%-decay{}{bn}", (r * 1e4).round() / 100.0, self.decay),
        }
    }

    /// `base` with this point's meProp and batch-norm settings applied.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.set_bn(self.bn);
        match self.ratio {
            None => cfg.disable_meprop(),
            Some(r) => {
                cfg.set_topk(r);
                cfg.set_decay(self.decay);
            }
        }
        cfg.metrics_out = None;
        cfg.checkpoint = None;
        cfg
    }
}

/// Baseline plus every `ratio x decay` combination.
pub fn sweep_grid(ratios: &[f64], decays: &[f64], bn: bool) -> Vec<SweepPoint> {
    let mut grid = vec![SweepPoint {
        ratio: None,
        decay: 0.0,
        bn,
    }];
    for &r in ratios {
        for &d in decays {
            grid.push(SweepPoint {
                ratio: Some(r),
                decay: d,
                bn,
            });
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub label: String,
    pub topk: Option<f64>,
    pub decay: f64,
    pub bn: bool,
    pub best_epoch: Option<usize>,
    pub dev_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub seconds: Option<f64>,
    /// `ok`, or the error that stopped this configuration.
    pub status: String,
}

/// Trains every point of `grid`. A failing point is recorded in its row and
/// the sweep moves on.
pub fn sweep(
    base: &TrainConfig,
    grid: &[SweepPoint],
    train_data: &Dataset,
    test_data: &Dataset,
    on_row: &mut dyn FnMut(&SweepRow),
) -> Vec<SweepRow> {
    grid.iter()
        .map(|p| {
            let cfg = p.apply(base);
            let result = cfg
                .validate()
                .and_then(|_| run(&cfg, train_data, test_data, &mut |_| Ok(())));
            let row = match result {
                Ok((_, s)) => SweepRow {
                    label: p.label(),
                    topk: p.ratio,
                    decay: p.decay,
                    bn: p.bn,
                    best_epoch: Some(s.best_epoch),
                    dev_acc: s.best_dev_acc,
                    test_acc: Some(s.test_acc),
                    seconds: Some(s.seconds),
                    status: "ok".into(),
                },
                Err(e) => SweepRow {
                    label: p.label(),
                    topk: p.ratio,
                    decay: p.decay,
                    bn: p.bn,
                    best_epoch: None,
                    dev_acc: None,
                    test_acc: None,
                    seconds: None,
                    status: format!("failed: {e}"),
                },
            };
            on_row(&row);
            row
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
