use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};

use meprop::config::{LayerSpec, Precision, TrainConfig};
use meprop::data::{load_mnist_dir, Dataset};
use meprop::trainer::{self, Event, Splits, SweepRow};

#[derive(Parser)]
#[command(name = "meprop", version, about = "Train MNIST CNNs with meProp sparse back-propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and report the best-dev test accuracy.
    Train(Overrides),
    /// Train the baseline and every top-k x decay grid point.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        /// Top-k ratios of the grid.
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.08,0.10")]
        grid_topk: Vec<f64>,
        /// Decay values of the grid.
        #[arg(long, value_delimiter = ',', default_value = "0,0.6")]
        grid_decay: Vec<f64>,
        /// CSV file for the results table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report the nonzero ratio of each weight layer's output gradient under
    /// plain back-propagation.
    Sparsity {
        #[command(flatten)]
        overrides: Overrides,
        /// Training steps taken before probing.
        #[arg(long, default_value_t = 1)]
        steps: usize,
    },
    /// Print the resolved configuration as TOML.
    Config(Overrides),
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// TrainConfig TOML file; the built-in desk-scale network otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Top-k ratio for every layer with meProp enabled.
    #[arg(long)]
    topk: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    /// Batch norm before every ReLU.
    #[arg(long, action = ArgAction::Set)]
    bn: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Cap on training samples after the dev split.
    #[arg(long)]
    limit: Option<usize>,
    /// conv 32/64, FC 1024 instead of the desk-scale 8/16/128.
    #[arg(long, action = ArgAction::Set)]
    paper_scale: Option<bool>,
    #[arg(long, value_parser = ["32", "64"])]
    precision: Option<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let paper = self.paper_scale.unwrap_or(false);
        let mut cfg = match &self.config {
            Some(path) => {
                let mut cfg = TrainConfig::load(path)?;
                if paper {
                    cfg.layers = TrainConfig::paper().layers;
                }
                cfg
            }
            None if paper => TrainConfig::paper(),
            None => TrainConfig::desk(),
        };
        if let Some(bn) = self.bn {
            cfg.set_bn(bn);
        }
        if let Some(r) = self.topk {
            cfg.set_topk(r);
        }
        if let Some(d) = self.decay {
            cfg.set_decay(d);
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(lr) = self.lr {
            cfg.optimizer.lr = lr;
        }
        if let Some(d) = &self.data_dir {
            cfg.data_dir = d.clone();
        }
        if let Some(p) = &self.metrics_out {
            cfg.metrics_out = Some(p.clone());
        }
        if let Some(p) = &self.checkpoint {
            cfg.checkpoint = Some(p.clone());
        }
        if let Some(l) = self.limit {
            cfg.limit = Some(l);
        }
        if let Some(p) = &self.precision {
            cfg.precision = Precision::try_from(p.parse::<u32>()?).map_err(anyhow::Error::msg)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_data(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    load_mnist_dir(&cfg.data_dir).with_context(|| {
        format!(
            "loading MNIST from {} (scripts/fetch_mnist.sh downloads it)",
            cfg.data_dir.display()
        )
    })
}

fn log_event(ev: &Event) -> meprop::Result<()> {
    if let Event::Epoch(e) = ev {
        let dev = e.dev_acc.map_or("-".into(), |d| format!("{:.4}", d));
        eprintln!(
            "epoch {:>3}  step {:>7}  loss {:.4}  dev {}  {:.1}s",
            e.epoch, e.step, e.train_loss, dev, e.seconds
        );
    }
    Ok(())
}

fn print_row(r: &SweepRow) {
    let acc = |v: Option<f64>| v.map_or("-".into(), |a| format!("{:.2}", 100.0 * a));
    eprintln!(
        "{:<24} epoch {:>3}  dev {:>6}  test {:>6}  {}",
        r.label,
        r.best_epoch.map_or("-".into(), |e| e.to_string()),
        acc(r.dev_acc),
        acc(r.test_acc),
        r.status
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config(o) => {
            print!("{}", o.resolve()?.to_toml_string());
        }
        Command::Train(o) => {
            let cfg = o.resolve()?;
            let (train, test) = load_data(&cfg)?;
            let (_, summary) = trainer::run(&cfg, &train, &test, &mut log_event)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Sweep {
            overrides,
            grid_topk,
            grid_decay,
            out,
        } => {
            let cfg = overrides.resolve()?;
            if cfg.metrics_out.is_some() || cfg.checkpoint.is_some() {
                bail!("--metrics-out and --checkpoint apply to single runs, not sweeps");
            }
            let (train, test) = load_data(&cfg)?;
            let bn = cfg.layers.iter().any(|l| {
                matches!(l, LayerSpec::Conv { bn: true, .. } | LayerSpec::Dense { bn: true, .. })
            });
            let grid = trainer::sweep_grid(&grid_topk, &grid_decay, bn);
            let rows = trainer::sweep(&cfg, &grid, &train, &test, &mut print_row);
            if let Some(path) = out {
                trainer::write_sweep_csv(&path, &rows)?;
            }
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            if failed > 0 {
                bail!("{failed} of {} sweep runs failed", rows.len());
            }
        }
        Command::Sparsity { overrides, steps } => {
            let cfg = overrides.resolve()?;
            let (train, test) = load_data(&cfg)?;
            let splits = Splits::new(&train, &test, &cfg)?;
            let rows = match cfg.precision {
                Precision::F32 => trainer::sparsity_after_steps::<f32>(&cfg, &splits.train, steps)?,
                Precision::F64 => trainer::sparsity_after_steps::<f64>(&cfg, &splits.train, steps)?,
            };
            for r in rows {
                println!("{}", serde_json::to_string(&r)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
