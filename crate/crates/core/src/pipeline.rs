//! End-to-end recoloring: emotion filtering, feature k-NN, bc-weighted
//! histogram blending and color transfer, with a provenance plan.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canonical::to_canonical_string;
use crate::color::{blend_histograms, lab_to_rgb, rgb_to_lab, ColorError, ColorHistogram};
use crate::datastore::Database;
use crate::emotion::{select_candidates, Emotion, EmotionDistribution, EmotionError, DEFAULT_OMEGA_MULTIPLIER};
use crate::features::{BackendRegistry, FeatureError, FeatureVector};
use crate::retrieval::{knn_select, Candidate, RetrievalError, DEFAULT_K};
use crate::transfer::{transfer_colors, TransferError, TransferParams};

pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Validate,
    Features,
    Candidates,
    Retrieval,
    Blend,
    Transfer,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Validate => "validate",
            Stage::Features => "features",
            Stage::Candidates => "candidates",
            Stage::Retrieval => "retrieval",
            Stage::Blend => "blend",
            Stage::Transfer => "transfer",
        })
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error("database is empty")]
    EmptyDatabase,
    #[error("source features have signature `{found}`, database uses `{expected}`")]
    SignatureMismatch { expected: String, found: String },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Emotion(#[from] EmotionError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Color(#[from] ColorError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
}

/// A stage failure, tagged with the stage that raised it.
#[derive(Debug, Error)]
#[error("{stage} stage: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: StageError,
}

impl PipelineError {
    fn at(stage: Stage) -> impl FnOnce(StageError) -> Self {
        move |source| Self { stage, source }
    }
}

fn stage<E: Into<StageError>>(s: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError { stage: s, source: e.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub k: usize,
    pub omega_multiplier: f64,
    pub strength: f64,
    pub smoothing_passes: usize,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            omega_multiplier: DEFAULT_OMEGA_MULTIPLIER,
            strength: 1.0,
            smoothing_passes: 0,
        }
    }
}

impl PipelineParams {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let invalid = |m: &str| Err(PipelineError::at(Stage::Validate)(StageError::InvalidParams(m.into())));
        if self.k == 0 {
            return invalid("k must be at least 1");
        }
        if !(self.omega_multiplier.is_finite() && self.omega_multiplier > 0.0) {
            return invalid("omega multiplier must be positive");
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return invalid("strength must lie in [0, 1]");
        }
        Ok(())
    }
}

/// The image to recolor. Features are extracted from the raster unless supplied.
#[derive(Debug, Clone)]
pub struct Source {
    pub id: String,
    pub image: RgbImage,
    pub features: Option<FeatureVector>,
}

impl Source {
    pub fn new(id: impl Into<String>, image: RgbImage) -> Self {
        Self { id: id.into(), image, features: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub size: usize,
    pub omega: f64,
    pub fallback_used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanTarget {
    pub id: String,
    pub path: String,
    pub distance: f64,
    pub bc: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanParams {
    pub k: usize,
    pub omega_multiplier: f64,
    pub strength: f64,
    pub smoothing_passes: usize,
    pub binning: String,
}

/// Everything that determined an output image, resolved before pixel work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPlan {
    pub version: u32,
    pub source: String,
    pub target_distribution: BTreeMap<String, f64>,
    pub candidates: CandidateSummary,
    pub k_requested: usize,
    pub k_returned: usize,
    /// Nearest first.
    pub targets: Vec<PlanTarget>,
    /// Weights were uniform because every selected bc was zero.
    pub uniform_weights: bool,
    pub blended_histogram_digest: String,
    pub params: PlanParams,
    pub feature_signature: String,
    pub database_digest: String,
}

impl TransferPlan {
    /// Sorted keys, nine-decimal floats, no whitespace.
    pub fn to_canonical_json(&self) -> String {
        to_canonical_string(self).expect("plan serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical_json().as_bytes()))
    }

    pub fn mean_target_distance(&self) -> f64 {
        if self.targets.is_empty() {
            return 0.0;
        }
        self.targets.iter().map(|t| t.distance).sum::<f64>() / self.targets.len() as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub features_ms: f64,
    pub candidates_ms: f64,
    pub retrieval_ms: f64,
    pub blend_ms: f64,
    pub transfer_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TransformResult {
    pub output: RgbImage,
    pub plan: TransferPlan,
    pub timings: StageTimings,
}

/// A plan together with the blended target histogram it describes.
#[derive(Debug, Clone)]
pub struct ResolvedPlan {
    pub plan: TransferPlan,
    pub histogram: ColorHistogram,
    pub timings: StageTimings,
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Recoloring engine over one immutable database.
#[derive(Debug, Clone)]
pub struct Pipeline {
    db: Arc<Database>,
    registry: BackendRegistry,
}

impl Pipeline {
    pub fn new(db: Arc<Database>, registry: BackendRegistry) -> Self {
        Self { db, registry }
    }

    pub fn database(&self) -> &Database {
        &self.db
    }

    pub fn registry(&self) -> &BackendRegistry {
        &self.registry
    }

    /// Computes the source's features in the database's feature space.
    pub fn source_features(&self, source: &Source) -> Result<FeatureVector, PipelineError> {
        let features = match &source.features {
            Some(f) => f.clone(),
            None => self
                .registry
                .extract(&source.image, self.db.signature())
                .map_err(stage(Stage::Features))?,
        };
        let expected = self.db.signature().key();
        if features.signature_key() != expected {
            return Err(PipelineError::at(Stage::Features)(StageError::SignatureMismatch {
                expected,
                found: features.signature_key(),
            }));
        }
        Ok(features)
    }

    /// Resolves targets, weights and the blended histogram without touching source pixels.
    pub fn resolve(
        &self,
        source: &Source,
        target: &EmotionDistribution,
        params: &PipelineParams,
    ) -> Result<ResolvedPlan, PipelineError> {
        params.validate()?;
        if self.db.is_empty() {
            return Err(PipelineError::at(Stage::Validate)(StageError::EmptyDatabase));
        }
        let mut timings = StageTimings::default();

        let t = Instant::now();
        let features = self.source_features(source)?;
        timings.features_ms = elapsed_ms(t);

        let t = Instant::now();
        let records = self.db.records();
        let candidates = select_candidates(
            records.iter().map(|r| (r.id.as_str(), &r.emotion)),
            target,
            params.omega_multiplier,
            params.k,
        )
        .map_err(stage(Stage::Candidates))?;
        timings.candidates_ms = elapsed_ms(t);

        let t = Instant::now();
        let pool: Vec<Candidate<'_>> = candidates
            .entries
            .iter()
            .map(|c| {
                let record = self.db.get(&c.id).expect("candidate ids come from the database");
                Candidate { id: &record.id, features: &record.features, bc: c.bc }
            })
            .collect();
        let selection = knn_select(&features, &pool, params.k).map_err(stage(Stage::Retrieval))?;
        timings.retrieval_ms = elapsed_ms(t);

        let t = Instant::now();
        let bcs: Vec<f64> = selection.targets.iter().map(|t| t.bc).collect();
        let bc_total: f64 = bcs.iter().sum();
        let uniform_weights = bc_total <= 0.0;
        let weights: Vec<f64> = if uniform_weights {
            vec![1.0 / bcs.len() as f64; bcs.len()]
        } else {
            bcs.iter().map(|b| b / bc_total).collect()
        };
        let histograms: Vec<&ColorHistogram> = selection
            .targets
            .iter()
            .map(|t| &self.db.get(&t.id).expect("selected ids come from the database").histogram)
            .collect();
        let blend_weights = if uniform_weights { &weights } else { &bcs };
        let histogram = blend_histograms(&histograms, blend_weights).map_err(stage(Stage::Blend))?;
        timings.blend_ms = elapsed_ms(t);

        let plan = TransferPlan {
            version: PLAN_VERSION,
            source: source.id.clone(),
            target_distribution: Emotion::ALL
                .iter()
                .map(|e| (e.name().to_string(), target.get(*e)))
                .collect(),
            candidates: CandidateSummary {
                size: candidates.len(),
                omega: candidates.omega,
                fallback_used: candidates.fallback_used,
            },
            k_requested: selection.k_requested,
            k_returned: selection.k_returned,
            targets: selection
                .targets
                .iter()
                .zip(&weights)
                .map(|(t, w)| PlanTarget {
                    id: t.id.clone(),
                    path: self.db.get(&t.id).map(|r| r.path.clone()).unwrap_or_default(),
                    distance: t.distance,
                    bc: t.bc,
                    weight: *w,
                })
                .collect(),
            uniform_weights,
            blended_histogram_digest: histogram.digest(),
            params: PlanParams {
                k: params.k,
                omega_multiplier: params.omega_multiplier,
                strength: params.strength,
                smoothing_passes: params.smoothing_passes,
                binning: self.db.binning().key(),
            },
            feature_signature: self.db.signature().key(),
            database_digest: self.db.digest().to_string(),
        };
        timings.total_ms = timings.features_ms + timings.candidates_ms + timings.retrieval_ms + timings.blend_ms;
        Ok(ResolvedPlan { plan, histogram, timings })
    }

    /// Plan-only dry run.
    pub fn preview_targets(
        &self,
        source: &Source,
        target: &EmotionDistribution,
        params: &PipelineParams,
    ) -> Result<TransferPlan, PipelineError> {
        self.resolve(source, target, params).map(|r| r.plan)
    }

    pub fn transform(
        &self,
        source: &Source,
        target: &EmotionDistribution,
        params: &PipelineParams,
    ) -> Result<TransformResult, PipelineError> {
        let start = Instant::now();
        let ResolvedPlan { plan, histogram, mut timings } = self.resolve(source, target, params)?;

        let t = Instant::now();
        let transfer = TransferParams {
            strength: params.strength,
            smoothing_passes: params.smoothing_passes,
            binning: *self.db.binning(),
        };
        let lab = rgb_to_lab(&source.image);
        let recolored = transfer_colors(&lab, &histogram, &transfer).map_err(stage(Stage::Transfer))?;
        let output = lab_to_rgb(&recolored);
        timings.transfer_ms = elapsed_ms(t);
        timings.total_ms = elapsed_ms(start);

        Ok(TransformResult { output, plan, timings })
    }
}
