//! Convolutional networks trained with meProp: back-propagation in which
//! each convolution keeps only the top-k entries, per feature map, of its
//! output gradient.
//!
//! The building blocks ([`tensor`], [`layers`], [`meprop`], [`batchnorm`],
//! [`optim`]) are usable on their own; [`network`] and [`trainer`] assemble
//! them into the MNIST experiments described by a [`config::TrainConfig`].

pub mod batchnorm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod meprop;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use batchnorm::{BatchNorm, BnGrads};
pub use checkpoint::Checkpoint;
pub use config::{LayerSpec, MePropSpec, Precision, TrainConfig};
pub use data::{Batch, Dataset, Subset};
pub use error::{Error, Result};
pub use layers::{ConvLayer, DenseLayer, LayerGrads, MaxPool, Relu};
pub use meprop::{GateStats, GradientGate, MePropPolicy, Sparsifiable};
pub use network::{LayerTraffic, Network};
pub use optim::{AdamConfig, AdamState};
pub use tensor::{Padding, Scalar, Tensor};
pub use trainer::{Event, EpochRecord, Splits, Summary};
