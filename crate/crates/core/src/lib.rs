//! Multi-page, multi-modal document representation learning at desk scale.
//!
//! Documents are encoded as one token sequence across pages. Text, layout,
//! page-image and page embeddings are summed and fed to a sliding-window
//! transformer. Pre-training combines masked visual-language modelling,
//! category classification, page-shuffle prediction and topic prediction.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod embedder;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod pretrain;
pub mod tensor;
pub mod topics;
pub mod trainer;
pub mod vision;

pub use config::{BackboneConfig, BackbonePreset, DtmMode, ModelConfig, TaskSchedule, TaskSet, TrainConfig};
pub use corpus::{BBox, Document, EncodedDocument, PageRecord, Raster, SyntheticSpec, TokenRecord};
pub use embedder::{AblationMask, PackedBatch};
pub use error::{Error, Result};
pub use finetune::FinetuneConfig;
pub use metrics::MetricsReport;
pub use model::Model;
pub use pipeline::{EvalTask, RunConfig};
pub use pretrain::{Task, TaskBatch};
pub use tensor::{Float, Precision, Tensor};
pub use topics::{LdaParams, TopicModel};
pub use trainer::{PretrainData, StepLosses, Trainer};
