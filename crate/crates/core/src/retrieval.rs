//! Exact K-nearest-neighbor target selection in feature space.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureVector;

/// Number of targets selected per query unless overridden.
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error("candidate `{id}` has feature signature `{found}`, source has `{expected}`")]
    SignatureMismatch { id: String, expected: String, found: String },
    #[error("no candidates to select from")]
    EmptyCandidates,
    #[error("k must be at least 1")]
    ZeroK,
}

/// A database image eligible for selection.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub id: &'a str,
    pub features: &'a FeatureVector,
    pub bc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub id: String,
    pub distance: f64,
    pub bc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSelection {
    /// Sorted by distance ascending, then id ascending.
    pub targets: Vec<Target>,
    pub k_requested: usize,
    pub k_returned: usize,
}

struct Scored<'a> {
    squared: f64,
    id: &'a str,
    bc: f64,
}

fn scored_order(a: &Scored, b: &Scored) -> Ordering {
    a.squared.total_cmp(&b.squared).then_with(|| a.id.cmp(b.id))
}

/// Returns the `k` candidates closest to `source` in Euclidean distance.
pub fn knn_select(
    source: &FeatureVector,
    candidates: &[Candidate<'_>],
    k: usize,
) -> Result<TargetSelection, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if candidates.is_empty() {
        return Err(RetrievalError::EmptyCandidates);
    }
    let expected = source.signature_key();
    let dim = source.dim();
    let mut scored = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.features.dim() != dim || c.features.signature_key() != expected {
            return Err(RetrievalError::SignatureMismatch {
                id: c.id.to_string(),
                expected,
                found: c.features.signature_key(),
            });
        }
        scored.push(Scored {
            squared: source.squared_distance(c.features),
            id: c.id,
            bc: c.bc,
        });
    }

    let k_returned = k.min(scored.len());
    if k_returned < scored.len() {
        scored.select_nth_unstable_by(k_returned - 1, scored_order);
        scored.truncate(k_returned);
    }
    scored.sort_by(scored_order);

    Ok(TargetSelection {
        targets: scored
            .into_iter()
            .map(|s| Target {
                id: s.id.to_string(),
                distance: s.squared.sqrt(),
                bc: s.bc,
            })
            .collect(),
        k_requested: k,
        k_returned,
    })
}
