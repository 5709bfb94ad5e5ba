//! Emotion distributions over the six Ekman basic emotions plus neutral,
//! Bhattacharyya similarity and threshold-based candidate selection.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of emotion channels.
pub const CHANNEL_COUNT: usize = 7;

/// Inputs whose sum lies in this window are renormalized by [`EmotionDistribution::new`].
pub const RENORMALIZE_WINDOW: (f64, f64) = (0.99, 1.01);

/// Default ω multiplier: ω = 1.5 × mean(bc).
pub const DEFAULT_OMEGA_MULTIPLIER: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmotionError {
    #[error("emotion channel {channel} has negative probability {value}")]
    NegativeProbability { channel: Emotion, value: f64 },
    #[error("emotion channel {channel} is not a finite number")]
    NonFinite { channel: Emotion },
    #[error("probabilities sum to {sum}, outside the accepted window [0.99, 1.01]")]
    DistributionSumOutOfRange { sum: f64 },
    #[error("emotion weights sum to zero")]
    ZeroMass,
    #[error("unknown emotion `{0}`")]
    UnknownEmotion(String),
    #[error("malformed emotion value `{0}`")]
    MalformedValue(String),
    #[error("database holds no emotion distributions")]
    EmptyDatabase,
    #[error("invalid selection parameter: {0}")]
    InvalidParameter(&'static str),
}

/// Emotion channels in their fixed storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Anger,
    Disgust,
    Fear,
    Joy,
    Sadness,
    Surprise,
    Neutral,
}

impl Emotion {
    pub const ALL: [Emotion; CHANNEL_COUNT] = [
        Emotion::Anger,
        Emotion::Disgust,
        Emotion::Fear,
        Emotion::Joy,
        Emotion::Sadness,
        Emotion::Surprise,
        Emotion::Neutral,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Anger => "anger",
            Emotion::Disgust => "disgust",
            Emotion::Fear => "fear",
            Emotion::Joy => "joy",
            Emotion::Sadness => "sadness",
            Emotion::Surprise => "surprise",
            Emotion::Neutral => "neutral",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Emotion {
    type Err = EmotionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Emotion::ALL
            .into_iter()
            .find(|e| e.name() == lower)
            .ok_or_else(|| EmotionError::UnknownEmotion(s.trim().to_string()))
    }
}

/// Channel names in storage order, as they appear in manifests and plans.
pub fn channel_order() -> [&'static str; CHANNEL_COUNT] {
    Emotion::ALL.map(Emotion::name)
}

/// A probability distribution over the seven emotion channels.
///
/// Every component is non-negative and the components sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(into = "[f64; CHANNEL_COUNT]")]
pub struct EmotionDistribution([f64; CHANNEL_COUNT]);

impl EmotionDistribution {
    /// Validates `p`, renormalizing when its sum falls within [`RENORMALIZE_WINDOW`].
    pub fn new(p: [f64; CHANNEL_COUNT]) -> Result<Self, EmotionError> {
        let sum = checked_sum(&p)?;
        if !(RENORMALIZE_WINDOW.0..=RENORMALIZE_WINDOW.1).contains(&sum) {
            return Err(EmotionError::DistributionSumOutOfRange { sum });
        }
        Ok(Self(p.map(|v| v / sum)))
    }

    /// Normalizes arbitrary non-negative weights with a positive sum.
    pub fn from_weights(w: [f64; CHANNEL_COUNT]) -> Result<Self, EmotionError> {
        let sum = checked_sum(&w)?;
        if sum <= 0.0 {
            return Err(EmotionError::ZeroMass);
        }
        Ok(Self(w.map(|v| v / sum)))
    }

    pub fn one_hot(emotion: Emotion) -> Self {
        let mut p = [0.0; CHANNEL_COUNT];
        p[emotion.index()] = 1.0;
        Self(p)
    }

    pub fn uniform() -> Self {
        Self([1.0 / CHANNEL_COUNT as f64; CHANNEL_COUNT])
    }

    pub fn get(&self, emotion: Emotion) -> f64 {
        self.0[emotion.index()]
    }

    pub fn as_array(&self) -> &[f64; CHANNEL_COUNT] {
        &self.0
    }

    /// The channel with the highest probability; the earliest channel wins ties.
    pub fn dominant(&self) -> Emotion {
        let mut best = Emotion::Anger;
        for e in Emotion::ALL {
            if self.get(e) > self.get(best) {
                best = e;
            }
        }
        best
    }
}

impl From<EmotionDistribution> for [f64; CHANNEL_COUNT] {
    fn from(d: EmotionDistribution) -> Self {
        d.0
    }
}

impl<'de> Deserialize<'de> for EmotionDistribution {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = <[f64; CHANNEL_COUNT]>::deserialize(deserializer)?;
        EmotionDistribution::new(raw).map_err(serde::de::Error::custom)
    }
}

impl FromStr for EmotionDistribution {
    type Err = EmotionError;

    /// Accepts a single channel name (`joy`), a `name=value` list
    /// (`anger=0.5,sadness=0.3,fear=0.2`), or seven comma-separated values in
    /// channel order. Omitted channels are zero and the result is renormalized.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Ok(emotion) = s.parse::<Emotion>() {
            return Ok(Self::one_hot(emotion));
        }
        let parse_value = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| EmotionError::MalformedValue(v.trim().to_string()))
        };
        let items: Vec<&str> = s.split(',').filter(|t| !t.trim().is_empty()).collect();
        let mut weights = [0.0; CHANNEL_COUNT];
        if items.iter().all(|t| !t.contains('=')) {
            if items.len() != CHANNEL_COUNT {
                return Err(EmotionError::MalformedValue(s.to_string()));
            }
            for (w, item) in weights.iter_mut().zip(&items) {
                *w = parse_value(item)?;
            }
        } else {
            for item in items {
                let (name, value) = item
                    .split_once('=')
                    .ok_or_else(|| EmotionError::MalformedValue(item.trim().to_string()))?;
                let emotion: Emotion = name.parse()?;
                weights[emotion.index()] += parse_value(value)?;
            }
        }
        Self::from_weights(weights)
    }
}

impl fmt::Display for EmotionDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in Emotion::ALL.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}={}", e, self.0[i])?;
        }
        Ok(())
    }
}

fn checked_sum(p: &[f64; CHANNEL_COUNT]) -> Result<f64, EmotionError> {
    for (e, &v) in Emotion::ALL.iter().zip(p) {
        if !v.is_finite() {
            return Err(EmotionError::NonFinite { channel: *e });
        }
        if v < 0.0 {
            return Err(EmotionError::NegativeProbability { channel: *e, value: v });
        }
    }
    Ok(p.iter().sum())
}

/// Bhattacharyya coefficient `Σ_k √(a_k·b_k)`, clamped to `[0, 1]` against rounding.
pub fn bhattacharyya(a: &EmotionDistribution, b: &EmotionDistribution) -> f64 {
    a.0.iter()
        .zip(&b.0)
        .map(|(x, y)| (x * y).sqrt())
        .sum::<f64>()
        .min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub bc: f64,
}

/// Database images whose emotion similarity to the target exceeds ω.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    /// Sorted by `bc` descending, then id ascending.
    pub entries: Vec<Candidate>,
    pub omega: f64,
    pub fallback_used: bool,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|c| c.id.as_str())
    }
}

fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.bc.total_cmp(&a.bc).then_with(|| a.id.cmp(&b.id))
}

/// Scores every database distribution against `target` and applies the ω threshold.
pub fn select_candidates<'a, I>(
    db: I,
    target: &EmotionDistribution,
    omega_multiplier: f64,
    min_size: usize,
) -> Result<CandidateSet, EmotionError>
where
    I: IntoIterator<Item = (&'a str, &'a EmotionDistribution)>,
{
    let scores = db
        .into_iter()
        .map(|(id, p)| Candidate {
            id: id.to_string(),
            bc: bhattacharyya(target, p),
        })
        .collect();
    threshold_candidates(scores, omega_multiplier, min_size)
}

/// Keeps entries with `bc > omega_multiplier × mean(bc)`. When fewer than
/// `min_size` survive, the top `min_size` entries by `bc` are returned instead
/// and `fallback_used` is set.
pub fn threshold_candidates(
    mut scores: Vec<Candidate>,
    omega_multiplier: f64,
    min_size: usize,
) -> Result<CandidateSet, EmotionError> {
    if scores.is_empty() {
        return Err(EmotionError::EmptyDatabase);
    }
    if !(omega_multiplier.is_finite() && omega_multiplier > 0.0) {
        return Err(EmotionError::InvalidParameter("omega multiplier must be positive"));
    }
    if min_size == 0 {
        return Err(EmotionError::InvalidParameter("minimum candidate count must be at least 1"));
    }
    let mean = scores.iter().map(|c| c.bc).sum::<f64>() / scores.len() as f64;
    let omega = omega_multiplier * mean;

    scores.sort_by(candidate_order);
    let survivors = scores.iter().take_while(|c| c.bc > omega).count();
    let fallback_used = survivors < min_size;
    scores.truncate(if fallback_used { min_size } else { survivors });

    Ok(CandidateSet {
        entries: scores,
        omega,
        fallback_used,
    })
}
