//! Frequency-compressed multimodal fusion with energy-based reconstruction of
//! missing modalities.

pub mod autodiff;
pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod dataset;
pub mod dct;
pub mod encoders;
pub mod energy;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod runtime;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{DcerError, Result};
pub use params::{Decay, GradBuffer, ParamId, ParamStore};
pub use tensor::Tensor;
pub use batch::{Modality, ModalityBatch, Presence, Sample, TextInput};
pub use config::RunConfig;
pub use energy::ReconConfig;
pub use eval::{MaskingProtocol, SweepGrid};
pub use metrics::MetricReport;
pub use model::{DcerModel, MissingMode, ModelConfig};
pub use synthetic::SyntheticSpec;
pub use train::{TrainConfig, Trainer};
