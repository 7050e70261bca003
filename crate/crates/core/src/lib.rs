//! Fault injection for binary neural networks executed as XNOR gates on
//! memristive crossbars.
//!
//! The pipeline: load a model ([`dataio::read_model`]) and a dataset
//! ([`dataio::read_idx`]), generate fault masks ([`faultgen`]), then run
//! inference through an [`injector::InjectionSession`]. [`harness`] repeats
//! this over seeded sweeps and writes result CSVs.
//!
//! Tensors holding real-valued pixels are generic over [`Real`]; the aliases
//! below cover the usual `f32` and `f64` cases.

pub mod bitpack;
pub mod crossbar;
pub mod dataio;
pub mod engine;
pub mod error;
pub mod faultgen;
pub mod harness;
pub mod injector;
pub mod scalar;
pub mod tensor;

pub use bitpack::{xnor_popcount_dot, BinaryTensor, PackedBits, Sign};
pub use crossbar::{CrossbarConfig, GateCoord};
pub use dataio::{read_idx, read_model, write_model, write_results_csv, LabeledDataset, ResultRow};
pub use engine::{LayerKind, LayerSpec, ModelGraph, Padding, Prediction};
pub use error::{Error, Result};
pub use faultgen::{FaultMask, FaultType, FaultVectorFile};
pub use harness::{ExperimentConfig, LineAxis, Sweep, SweepConfig, Target};
pub use injector::{InjectionSession, Mode};
pub use scalar::Real;
pub use tensor::{IntTensor, RealTensor};

pub type Image = RealTensor<f32>;
pub type Image64 = RealTensor<f64>;
pub type Dataset = LabeledDataset<f32>;
pub type Dataset64 = LabeledDataset<f64>;
