//! Self-supervised conditional diffusion for multivariate time series.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod embedder;
pub mod error;
pub mod graph;
pub mod heads;
pub mod layers;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use checkpoint::{Checkpoint, HeadRecord};
pub use config::{ModelConfig, ScheduleConfig};
pub use data::{DatasetManifest, Normalizer, RawSeries, Series, SeriesBatch, SynthConfig};
pub use diffusion::NoiseSchedule;
pub use embedder::Embedding;
pub use error::{Error, Result};
pub use heads::{ClassifierHead, ClassifierLayout, Detection, HeadTrainConfig, ProjectionHead, ThresholdRule};
pub use masking::{MaskKind, MaskSet};
pub use metrics::{EvalMasks, PointMetrics, Prf};
pub use model::Model;
pub use params::ParamStore;
pub use sampler::{SampleSet, SamplerConfig};
pub use tensor::Matrix;
pub use trainer::{EpochStats, TrainConfig, Trainer};
