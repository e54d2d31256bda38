//! Experiment description, loadable from TOML.
//!
//! ```toml
//! seed = 1
//! epochs = 3
//! batch_size = 10
//! precision = 32
//!
//! [optimizer]
//! lr = 0.001
//! beta1 = 0.9
//! beta2 = 0.999
//! eps = 1e-8
//!
//! [[layers]]
//! type = "conv"
//! kernel = 5
//! filters = 8
//! meprop = { enabled = true, ratio = 0.05, decay = 0.6 }
//!
//! [[layers]]
//! type = "pool"
//!
//! [[layers]]
//! type = "dense"
//! units = 10
//! relu = false
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::batchnorm::{DEFAULT_EPSILON, DEFAULT_MOMENTUM};
use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::tensor::{ConvGeometry, Padding};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MePropSpec {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "one")]
    pub ratio: f64,
    #[serde(default)]
    pub decay: f64,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn two() -> usize {
    2
}

fn unit_stride() -> usize {
    1
}

fn same() -> Padding {
    Padding::Same
}

impl Default for MePropSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            ratio: 1.0,
            decay: 0.0,
        }
    }
}

impl MePropSpec {
    pub fn on(ratio: f64, decay: f64) -> Self {
        Self {
            enabled: true,
            ratio,
            decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        kernel: usize,
        filters: usize,
        #[serde(default = "unit_stride")]
        stride: usize,
        #[serde(default = "same")]
        padding: Padding,
        #[serde(default)]
        bn: bool,
        #[serde(default = "yes")]
        relu: bool,
        #[serde(default)]
        meprop: MePropSpec,
    },
    Pool {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default = "two")]
        size: usize,
        #[serde(default = "two")]
        stride: usize,
    },
    Dense {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        units: usize,
        #[serde(default)]
        bn: bool,
        #[serde(default = "yes")]
        relu: bool,
        #[serde(default)]
        meprop: MePropSpec,
    },
}

impl LayerSpec {
    pub fn conv(kernel: usize, filters: usize, meprop: MePropSpec) -> Self {
        LayerSpec::Conv {
            name: None,
            kernel,
            filters,
            stride: 1,
            padding: Padding::Same,
            bn: false,
            relu: true,
            meprop,
        }
    }

    pub fn pool() -> Self {
        LayerSpec::Pool {
            name: None,
            size: 2,
            stride: 2,
        }
    }

    pub fn dense(units: usize, relu: bool) -> Self {
        LayerSpec::Dense {
            name: None,
            units,
            bn: false,
            relu,
            meprop: MePropSpec::default(),
        }
    }

    pub fn meprop(&self) -> Option<&MePropSpec> {
        match self {
            LayerSpec::Conv { meprop, .. } | LayerSpec::Dense { meprop, .. } => Some(meprop),
            LayerSpec::Pool { .. } => None,
        }
    }

    pub fn meprop_mut(&mut self) -> Option<&mut MePropSpec> {
        match self {
            LayerSpec::Conv { meprop, .. } | LayerSpec::Dense { meprop, .. } => Some(meprop),
            LayerSpec::Pool { .. } => None,
        }
    }

    fn explicit_name(&self) -> Option<&str> {
        match self {
            LayerSpec::Conv { name, .. } | LayerSpec::Pool { name, .. } | LayerSpec::Dense { name, .. } => {
                name.as_deref()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Precision {
    F32,
    F64,
}

impl TryFrom<u32> for Precision {
    type Error = String;

    fn try_from(bits: u32) -> std::result::Result<Self, String> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(format!("precision must be 32 or 64, got {other}")),
        }
    }
}

impl From<Precision> for u32 {
    fn from(p: Precision) -> u32 {
        match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u32::from(*self))
    }
}

fn default_input() -> [usize; 3] {
    [28, 28, 1]
}

fn default_batch() -> usize {
    10
}

fn default_epochs() -> usize {
    3
}

fn default_seed() -> u64 {
    1
}

fn default_precision() -> Precision {
    Precision::F32
}

fn default_dev_fraction() -> f64 {
    1.0 / 12.0
}

fn default_eval_batch() -> usize {
    500
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data/mnist")
}

fn default_eps() -> f64 {
    DEFAULT_EPSILON
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Per-sample input shape `[h, w, c]`.
    #[serde(default = "default_input")]
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default = "default_dev_fraction")]
    pub dev_fraction: f64,
    /// Caps the number of training samples after the dev split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default = "default_eps")]
    pub bn_epsilon: f64,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics_out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    fn with_layers(layers: Vec<LayerSpec>) -> Self {
        Self {
            input: default_input(),
            layers,
            optimizer: AdamConfig::default(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            seed: default_seed(),
            precision: default_precision(),
            dev_fraction: default_dev_fraction(),
            limit: None,
            bn_epsilon: DEFAULT_EPSILON,
            bn_momentum: DEFAULT_MOMENTUM,
            eval_batch_size: default_eval_batch(),
            data_dir: default_data_dir(),
            metrics_out: None,
            checkpoint: None,
        }
    }

    /// CPU-sized network: conv 5x5x8, conv 5x5x16, FC 128, FC 10. Both conv
    /// layers carry a full-selection policy, the dense layers none.
    pub fn desk() -> Self {
        Self::with_layers(Self::architecture(8, 16, 128))
    }

    /// conv 5x5x32, conv 5x5x64, FC 1024, FC 10.
    pub fn paper() -> Self {
        let mut cfg = Self::with_layers(Self::architecture(32, 64, 1024));
        cfg.epochs = 10;
        cfg
    }

    fn architecture(c1: usize, c2: usize, fc: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::conv(5, c1, MePropSpec::on(1.0, 0.0)),
            LayerSpec::pool(),
            LayerSpec::conv(5, c2, MePropSpec::on(1.0, 0.0)),
            LayerSpec::pool(),
            LayerSpec::dense(fc, true),
            LayerSpec::dense(NUM_CLASSES, false),
        ]
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Sets the top-k ratio of every layer whose policy is enabled.
    pub fn set_topk(&mut self, ratio: f64) {
        for m in self.layers.iter_mut().filter_map(LayerSpec::meprop_mut) {
            if m.enabled {
                m.ratio = ratio;
            }
        }
    }

    /// Sets the accumulator decay of every layer whose policy is enabled.
    pub fn set_decay(&mut self, decay: f64) {
        for m in self.layers.iter_mut().filter_map(LayerSpec::meprop_mut) {
            if m.enabled {
                m.decay = decay;
            }
        }
    }

    /// Turns every policy off (plain back-propagation).
    pub fn disable_meprop(&mut self) {
        for m in self.layers.iter_mut().filter_map(LayerSpec::meprop_mut) {
            m.enabled = false;
        }
    }

    /// Batch norm before every ReLU (conv layers and hidden dense layers).
    pub fn set_bn(&mut self, on: bool) {
        for layer in &mut self.layers {
            match layer {
                LayerSpec::Conv { bn, relu, .. } | LayerSpec::Dense { bn, relu, .. } => {
                    *bn = on && *relu;
                }
                LayerSpec::Pool { .. } => {}
            }
        }
    }

    /// Display names: explicit names, else `conv1`, `pool1`, `fc1`, ...
    pub fn layer_names(&self) -> Vec<String> {
        let (mut conv, mut pool, mut fc) = (0, 0, 0);
        self.layers
            .iter()
            .map(|l| {
                let auto = match l {
                    LayerSpec::Conv { .. } => {
                        conv += 1;
                        format!("conv{conv}")
                    }
                    LayerSpec::Pool { .. } => {
                        pool += 1;
                        format!("pool{pool}")
                    }
                    LayerSpec::Dense { .. } => {
                        fc += 1;
                        format!("fc{fc}")
                    }
                };
                l.explicit_name().map(str::to_owned).unwrap_or(auto)
            })
            .collect()
    }

    /// Per-sample output shape of every layer, checking that the chain is
    /// well-typed.
    pub fn shape_chain(&self) -> Result<Vec<Vec<usize>>> {
        let names = self.layer_names();
        let mut shape = self.input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (layer, name) in self.layers.iter().zip(&names) {
            shape = match layer {
                LayerSpec::Conv {
                    kernel,
                    filters,
                    stride,
                    padding,
                    ..
                } => {
                    let [h, w, _] = match shape[..] {
                        [h, w, c] => [h, w, c],
                        _ => {
                            return Err(Error::config(
                                name,
                                format!("convolution needs an [h, w, c] input, got {shape:?}"),
                            ))
                        }
                    };
                    if *filters == 0 {
                        return Err(Error::config(name, "filters must be positive"));
                    }
                    let g = ConvGeometry::new(h, w, *kernel, *kernel, *stride, *padding)
                        .map_err(|e| Error::config(name, e.to_string()))?;
                    vec![g.out_h, g.out_w, *filters]
                }
                LayerSpec::Pool { size, stride, .. } => {
                    let [h, w, c] = match shape[..] {
                        [h, w, c] => [h, w, c],
                        _ => {
                            return Err(Error::config(
                                name,
                                format!("pooling needs an [h, w, c] input, got {shape:?}"),
                            ))
                        }
                    };
                    let g = ConvGeometry::new(h, w, *size, *size, *stride, Padding::Same)
                        .map_err(|e| Error::config(name, e.to_string()))?;
                    vec![g.out_h, g.out_w, c]
                }
                LayerSpec::Dense { units, .. } => {
                    if *units == 0 {
                        return Err(Error::config(name, "units must be positive"));
                    }
                    vec![*units]
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let names = self.layer_names();
        if self.batch_size == 0 {
            return Err(Error::config("trainer", "batch_size must be at least 1"));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::config("trainer", "eval_batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::config("trainer", "dev_fraction must lie in [0, 1)"));
        }
        if self.input.contains(&0) {
            return Err(Error::config("input", "input extents must be positive"));
        }
        self.optimizer
            .validate()
            .map_err(|e| Error::config("optimizer", e.to_string()))?;
        for (layer, name) in self.layers.iter().zip(&names) {
            if let Some(m) = layer.meprop() {
                if !(m.ratio > 0.0 && m.ratio <= 1.0) {
                    return Err(Error::config(name, format!("top-k ratio {} outside (0, 1]", m.ratio)));
                }
                if !(0.0..1.0).contains(&m.decay) {
                    return Err(Error::config(name, format!("decay {} outside [0, 1)", m.decay)));
                }
            }
        }
        let chain = self.shape_chain()?;
        match (self.layers.last(), chain.last(), names.last()) {
            (Some(LayerSpec::Dense { relu: false, bn: false, .. }), Some(shape), _)
                if shape[..] == [NUM_CLASSES] => {}
            (_, _, name) => {
                return Err(Error::config(
                    name.map(String::as_str).unwrap_or("network"),
                    format!("the last layer must be a dense layer with {NUM_CLASSES} units, no ReLU and no batch norm"),
                ))
            }
        }
        let mut seen = std::collections::HashSet::new();
        for name in &names {
            if !seen.insert(name) {
                return Err(Error::config(name, "duplicate layer name"));
            }
        }
        Ok(())
    }
}
