//! Emotion-guided image recoloring.
//!
//! Given a source photograph and a desired seven-channel emotion
//! distribution, the [`pipeline::Pipeline`] picks database images whose
//! emotion distributions are close to the target (Bhattacharyya coefficient
//! above a mean-relative threshold), keeps the `K` of those nearest to the
//! source in a deep or descriptor feature space, blends their CIELab
//! histograms with bc weights and reshapes the source's colors toward the
//! blend.
//!
//! Module map:
//!
//! * [`emotion`]: distributions, similarity, candidate thresholding
//! * [`features`]: feature backends and sidecar files
//! * [`retrieval`]: exact k-NN
//! * [`color`]: sRGB/Lab conversion and histograms
//! * [`transfer`]: CDF-matching color transfer
//! * [`datastore`]: manifest ingest and database loading
//! * [`pipeline`]: orchestration and provenance plans

pub mod canonical;
pub mod color;
pub mod datastore;
pub mod emotion;
pub mod features;
#[cfg(feature = "onnx")]
pub mod onnx;
pub mod pipeline;
pub mod retrieval;
pub mod synthetic;
pub mod transfer;

pub use color::{Binning, ColorHistogram, LabImage};
pub use datastore::{Database, IngestConfig, IngestReport};
pub use emotion::{bhattacharyya, Emotion, EmotionDistribution};
pub use features::{BackendRegistry, FeatureSignature, FeatureVector};
pub use pipeline::{Pipeline, PipelineError, PipelineParams, Source, TransferPlan, TransformResult};
pub use transfer::TransferParams;
