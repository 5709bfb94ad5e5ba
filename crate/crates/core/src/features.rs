//! Semantic feature vectors: per-backend outputs, L2-normalized and
//! concatenated in signature order.
//!
//! Backends are looked up by id in a [`BackendRegistry`]. The registry always
//! carries the deterministic `fallback` descriptor so the whole pipeline runs
//! without neural models; precomputed vectors and (with the `onnx` feature)
//! model inference plug in behind the same trait.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::color::srgb_to_lab_pixel;

/// Grid size of the fallback descriptor when the layer is just `grid`.
pub const DEFAULT_GRID: usize = 4;
/// Hue bins in the fallback descriptor.
pub const HUE_BINS: usize = 64;
/// Stored vectors whose part norms deviate from 1 by more than this are reported.
pub const NORM_WARN_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("unknown feature backend `{0}`")]
    UnknownBackend(String),
    #[error("backend `{backend}` has no layer `{layer}`")]
    UnknownLayer { backend: String, layer: String },
    #[error("backend `{backend}` failed: {reason}")]
    BackendFailure { backend: String, reason: String },
    #[error("backend `{backend}` layer `{layer}` produced {got} values, expected {expected}")]
    DimensionMismatch { backend: String, layer: String, expected: usize, got: usize },
    #[error("feature signature mismatch: expected `{expected}`, found `{found}`")]
    SignatureMismatch { expected: String, found: String },
    #[error("invalid feature signature `{0}`")]
    InvalidSignature(String),
    #[error("cannot extract features from an empty image")]
    EmptyImage,
    #[error("{}:{line}: {reason}{}", path.display(), id.as_ref().map(|i| format!(" (record `{i}`)")).unwrap_or_default())]
    Parse { path: PathBuf, line: usize, id: Option<String>, reason: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

/// One (backend, layer) pair of a feature signature and its output length.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackendSpec {
    pub backend: String,
    pub layer: String,
    pub dim: usize,
}

impl BackendSpec {
    pub fn new(backend: impl Into<String>, layer: impl Into<String>, dim: usize) -> Result<Self, FeatureError> {
        let spec = Self { backend: backend.into(), layer: layer.into(), dim };
        if spec.dim == 0 || spec.backend.is_empty() || spec.layer.is_empty() {
            return Err(FeatureError::InvalidSignature(spec.to_string()));
        }
        Ok(spec)
    }

    /// The fallback descriptor on a `grid × grid` layout.
    pub fn fallback(grid: usize) -> Self {
        Self {
            backend: FallbackBackend::ID.into(),
            layer: format!("grid{grid}"),
            dim: fallback_dim(grid),
        }
    }

    fn key(&self) -> String {
        format!("{}:{}", self.backend, self.layer)
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.backend, self.layer, self.dim)
    }
}

impl FromStr for BackendSpec {
    type Err = FeatureError;

    /// `backend:layer:dim`; the dimension may be omitted for the fallback backend.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let invalid = || FeatureError::InvalidSignature(s.to_string());
        let mut it = s.trim().split(':');
        let backend = it.next().filter(|b| !b.is_empty()).ok_or_else(invalid)?;
        let layer = it.next().filter(|l| !l.is_empty()).ok_or_else(invalid)?;
        let dim = match it.next() {
            Some(d) => d.parse::<usize>().map_err(|_| invalid())?,
            None if backend == FallbackBackend::ID => fallback_dim(parse_grid(layer).ok_or_else(invalid)?),
            None => return Err(invalid()),
        };
        if it.next().is_some() {
            return Err(invalid());
        }
        BackendSpec::new(backend, layer, dim)
    }
}

/// Ordered list of backend specs defining one feature space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSignature(pub Vec<BackendSpec>);

impl FeatureSignature {
    pub fn fallback() -> Self {
        Self(vec![BackendSpec::fallback(DEFAULT_GRID)])
    }

    pub fn specs(&self) -> &[BackendSpec] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.iter().map(|s| s.dim).sum()
    }

    /// Identity of the feature space: `backend:layer` pairs joined by `+`.
    pub fn key(&self) -> String {
        self.0.iter().map(BackendSpec::key).collect::<Vec<_>>().join("+")
    }
}

impl fmt::Display for FeatureSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|s| s.to_string()).collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for FeatureSignature {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let specs = s
            .split('+')
            .map(str::parse)
            .collect::<Result<Vec<BackendSpec>, _>>()?;
        if specs.is_empty() {
            return Err(FeatureError::InvalidSignature(s.to_string()));
        }
        Ok(Self(specs))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePart {
    pub backend: String,
    pub layer: String,
    pub values: Vec<f64>,
    /// The raw output was all zero and is stored unnormalized.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub zero: bool,
}

impl FeaturePart {
    /// L2-normalizes `raw`; an all-zero vector stays zero and is flagged.
    pub fn normalized(backend: impl Into<String>, layer: impl Into<String>, mut raw: Vec<f64>) -> Self {
        let norm = l2_norm(&raw);
        let zero = norm == 0.0;
        if !zero {
            raw.iter_mut().for_each(|v| *v /= norm);
        }
        Self { backend: backend.into(), layer: layer.into(), values: raw, zero }
    }
}

/// Concatenation of normalized per-backend sub-vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub parts: Vec<FeaturePart>,
}

impl FeatureVector {
    pub fn from_parts(parts: Vec<FeaturePart>) -> Self {
        Self { parts }
    }

    pub fn dim(&self) -> usize {
        self.parts.iter().map(|p| p.values.len()).sum()
    }

    pub fn signature_key(&self) -> String {
        self.parts
            .iter()
            .map(|p| format!("{}:{}", p.backend, p.layer))
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.parts.iter().flat_map(|p| p.values.iter().copied())
    }

    /// Squared Euclidean distance; both vectors must share a signature.
    pub fn squared_distance(&self, other: &FeatureVector) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.parts.iter().zip(&other.parts) {
            for (x, y) in a.values.iter().zip(&b.values) {
                let d = x - y;
                acc += d * d;
            }
        }
        acc
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A source of raw (unnormalized) feature vectors.
pub trait FeatureBackend: Send + Sync {
    fn id(&self) -> &str;

    fn extract(&self, image: &RgbImage, layer: &str) -> Result<Vec<f64>, FeatureError>;
}

/// Registered backends by id.
#[derive(Clone)]
pub struct BackendRegistry {
    backends: BTreeMap<String, Arc<dyn FeatureBackend>>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        let mut r = Self { backends: BTreeMap::new() };
        r.register(Arc::new(FallbackBackend));
        r
    }
}

impl fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.backends.keys()).finish()
    }
}

impl BackendRegistry {
    pub fn register(&mut self, backend: Arc<dyn FeatureBackend>) {
        self.backends.insert(backend.id().to_string(), backend);
    }

    pub fn get(&self, id: &str) -> Option<&Arc<dyn FeatureBackend>> {
        self.backends.get(id)
    }

    /// Checks that every backend of `signature` is registered.
    pub fn supports(&self, signature: &FeatureSignature) -> Result<(), FeatureError> {
        for spec in signature.specs() {
            if !self.backends.contains_key(&spec.backend) {
                return Err(FeatureError::UnknownBackend(spec.backend.clone()));
            }
        }
        Ok(())
    }

    /// Runs each backend of `signature` in order, normalizing and concatenating the outputs.
    pub fn extract(&self, image: &RgbImage, signature: &FeatureSignature) -> Result<FeatureVector, FeatureError> {
        if image.width() == 0 || image.height() == 0 {
            return Err(FeatureError::EmptyImage);
        }
        let mut parts = Vec::with_capacity(signature.0.len());
        for spec in signature.specs() {
            let backend = self
                .get(&spec.backend)
                .ok_or_else(|| FeatureError::UnknownBackend(spec.backend.clone()))?;
            let raw = backend.extract(image, &spec.layer)?;
            if raw.len() != spec.dim {
                return Err(FeatureError::DimensionMismatch {
                    backend: spec.backend.clone(),
                    layer: spec.layer.clone(),
                    expected: spec.dim,
                    got: raw.len(),
                });
            }
            if let Some(bad) = raw.iter().find(|v| !v.is_finite()) {
                return Err(FeatureError::BackendFailure {
                    backend: spec.backend.clone(),
                    reason: format!("non-finite output {bad}"),
                });
            }
            parts.push(FeaturePart::normalized(&spec.backend, &spec.layer, raw));
        }
        Ok(FeatureVector::from_parts(parts))
    }
}

fn parse_grid(layer: &str) -> Option<usize> {
    match layer.strip_prefix("grid")? {
        "" => Some(DEFAULT_GRID),
        n => n.parse().ok().filter(|g| *g >= 1),
    }
}

fn fallback_dim(grid: usize) -> usize {
    grid * grid * 3 + HUE_BINS
}

/// Deterministic hand-crafted descriptor, layer `grid<N>`.
///
/// Layout: for each of the `N×N` cells in row-major order the mean
/// `(L/100, a/128, b/128)`, followed by a 64-bin hue histogram holding the
/// fraction of pixels per hue bin. Achromatic pixels count toward hue bin 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct FallbackBackend;

impl FallbackBackend {
    pub const ID: &'static str = "fallback";
}

impl FeatureBackend for FallbackBackend {
    fn id(&self) -> &str {
        Self::ID
    }

    fn extract(&self, image: &RgbImage, layer: &str) -> Result<Vec<f64>, FeatureError> {
        let grid = parse_grid(layer).ok_or_else(|| FeatureError::UnknownLayer {
            backend: Self::ID.into(),
            layer: layer.into(),
        })?;
        Ok(fallback_descriptor(image, grid))
    }
}

fn cell_range(cell: usize, grid: usize, len: u32) -> std::ops::Range<u32> {
    let len = len as usize;
    let start = (cell * len / grid).min(len - 1);
    let end = ((cell + 1) * len / grid).max(start + 1).min(len);
    start as u32..end as u32
}

/// Raw fallback descriptor of length `grid·grid·3 + 64`. Panics on an empty image.
pub fn fallback_descriptor(image: &RgbImage, grid: usize) -> Vec<f64> {
    assert!(grid >= 1, "grid must be at least 1");
    let (w, h) = image.dimensions();
    assert!(w > 0 && h > 0, "empty image");
    let mut out = Vec::with_capacity(fallback_dim(grid));
    for gy in 0..grid {
        for gx in 0..grid {
            let mut acc = [0.0f64; 3];
            let mut n = 0usize;
            for y in cell_range(gy, grid, h) {
                for x in cell_range(gx, grid, w) {
                    let lab = srgb_to_lab_pixel(image.get_pixel(x, y).0);
                    acc.iter_mut().zip(lab).for_each(|(a, v)| *a += v);
                    n += 1;
                }
            }
            let n = n as f64;
            out.extend([acc[0] / n / 100.0, acc[1] / n / 128.0, acc[2] / n / 128.0]);
        }
    }
    let mut hue = [0usize; HUE_BINS];
    for p in image.pixels() {
        hue[hue_bin(p.0)] += 1;
    }
    let total = (w as usize * h as usize) as f64;
    out.extend(hue.iter().map(|c| *c as f64 / total));
    out
}

fn hue_bin([r, g, b]: [u8; 3]) -> usize {
    let (r, g, b) = (r as f64, g as f64, b as f64);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta == 0.0 {
        return 0;
    }
    let sector = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    ((sector / 6.0 * HUE_BINS as f64) as usize).min(HUE_BINS - 1)
}

/// SHA-256 over the raster dimensions and pixel bytes.
pub fn raster_digest(image: &RgbImage) -> String {
    let mut hasher = Sha256::new();
    hasher.update(image.width().to_le_bytes());
    hasher.update(image.height().to_le_bytes());
    hasher.update(image.as_raw());
    hex::encode(hasher.finalize())
}

/// Backend serving raw vectors computed elsewhere, keyed by raster content.
#[derive(Debug, Default)]
pub struct PrecomputedBackend {
    id: String,
    vectors: RwLock<HashMap<(String, String), Vec<f64>>>,
}

impl PrecomputedBackend {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into(), vectors: RwLock::default() }
    }

    pub fn insert(&self, image: &RgbImage, layer: &str, raw: Vec<f64>) {
        self.vectors
            .write()
            .expect("precomputed table poisoned")
            .insert((raster_digest(image), layer.to_string()), raw);
    }
}

impl FeatureBackend for PrecomputedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn extract(&self, image: &RgbImage, layer: &str) -> Result<Vec<f64>, FeatureError> {
        let key = (raster_digest(image), layer.to_string());
        self.vectors
            .read()
            .expect("precomputed table poisoned")
            .get(&key)
            .cloned()
            .ok_or_else(|| FeatureError::BackendFailure {
                backend: self.id.clone(),
                reason: format!("no precomputed `{layer}` vector for this image"),
            })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SidecarRecord {
    id: String,
    signature: String,
    parts: Vec<FeaturePart>,
}

/// Vectors read from a sidecar, plus any normalization warnings raised.
#[derive(Debug, Default)]
pub struct LoadedFeatures {
    pub vectors: BTreeMap<String, FeatureVector>,
    pub warnings: Vec<String>,
}

/// Writes one JSON record per line: `{"id", "signature", "parts": [{"backend", "layer", "values"}]}`.
pub fn save_precomputed<'a>(
    path: &Path,
    signature: &FeatureSignature,
    vectors: impl IntoIterator<Item = (&'a str, &'a FeatureVector)>,
) -> Result<(), FeatureError> {
    let io = |source| FeatureError::Io { path: path.to_path_buf(), source };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    let key = signature.key();
    for (id, v) in vectors {
        if v.signature_key() != key {
            return Err(FeatureError::SignatureMismatch { expected: key, found: v.signature_key() });
        }
        let record = SidecarRecord { id: id.to_string(), signature: key.clone(), parts: v.parts.clone() };
        serde_json::to_writer(&mut out, &record).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads a feature sidecar, checking each record against `expected` and
/// renormalizing every part.
pub fn load_precomputed(path: &Path, expected: &FeatureSignature) -> Result<LoadedFeatures, FeatureError> {
    let io = |source| FeatureError::Io { path: path.to_path_buf(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let key = expected.key();
    let mut loaded = LoadedFeatures::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| FeatureError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            id: leading_id(&line),
            reason,
        };
        let record: SidecarRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let found: Vec<String> = record.parts.iter().map(|p| format!("{}:{}", p.backend, p.layer)).collect();
        if record.signature != key || found.join("+") != key {
            return Err(FeatureError::SignatureMismatch { expected: key, found: record.signature });
        }
        let mut parts = Vec::with_capacity(record.parts.len());
        for (part, spec) in record.parts.into_iter().zip(expected.specs()) {
            if part.values.len() != spec.dim {
                return Err(parse_err(format!(
                    "part `{}` has {} values, expected {}",
                    spec.key(),
                    part.values.len(),
                    spec.dim
                )));
            }
            if part.values.iter().any(|v| !v.is_finite()) {
                return Err(parse_err(format!("part `{}` holds non-finite values", spec.key())));
            }
            let norm = l2_norm(&part.values);
            if norm != 0.0 && (norm - 1.0).abs() > NORM_WARN_TOLERANCE {
                let msg = format!("record `{}` part `{}` had norm {norm:.6}; renormalized", record.id, spec.key());
                log::warn!("{msg}");
                loaded.warnings.push(msg);
            }
            parts.push(if norm == 0.0 || (norm - 1.0).abs() > 1e-12 {
                FeaturePart::normalized(part.backend, part.layer, part.values)
            } else {
                FeaturePart { zero: false, ..part }
            });
        }
        if loaded.vectors.insert(record.id.clone(), FeatureVector::from_parts(parts)).is_some() {
            return Err(parse_err(format!("duplicate record `{}`", record.id)));
        }
    }
    Ok(loaded)
}

/// Best-effort id from a possibly truncated `{"id":"..."` line.
fn leading_id(line: &str) -> Option<String> {
    let rest = line.trim_start().strip_prefix("{\"id\":\"")?;
    let end = rest.find('"')?;
    Some(rest[..end].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::rgb_from_fn;

    struct Constant(&'static str, Vec<f64>);

    impl FeatureBackend for Constant {
        fn id(&self) -> &str {
            self.0
        }

        fn extract(&self, _: &RgbImage, _: &str) -> Result<Vec<f64>, FeatureError> {
            Ok(self.1.clone())
        }
    }

    #[test]
    fn raw_three_four_normalizes() {
        let p = FeaturePart::normalized("x", "y", vec![3.0, 4.0]);
        assert_eq!(p.values, vec![0.6, 0.8]);
        assert!(!p.zero);
    }

    #[test]
    fn zero_vector_is_flagged_not_nan() {
        let p = FeaturePart::normalized("x", "y", vec![0.0; 4]);
        assert!(p.zero);
        assert_eq!(p.values, vec![0.0; 4]);
    }

    #[test]
    fn two_backends_concatenate_to_5120() {
        let mut reg = BackendRegistry::default();
        reg.register(Arc::new(Constant("alexnet", vec![1.0; 4096])));
        reg.register(Arc::new(Constant("googlenet", vec![2.0; 1024])));
        let sig: FeatureSignature = "alexnet:fc7:4096+googlenet:pool5:1024".parse().unwrap();
        let img = rgb_from_fn(4, 4, |_, _| [1, 2, 3]);
        let f = reg.extract(&img, &sig).unwrap();
        assert_eq!(f.dim(), 5120);
        assert_eq!(f.signature_key(), "alexnet:fc7+googlenet:pool5");
        for part in &f.parts {
            assert!((l2_norm(&part.values) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spec_order_is_part_order() {
        let mut reg = BackendRegistry::default();
        reg.register(Arc::new(Constant("a", vec![1.0, 0.0])));
        reg.register(Arc::new(Constant("b", vec![0.0, 1.0, 0.0])));
        let img = rgb_from_fn(2, 2, |_, _| [0; 3]);
        let ab = reg.extract(&img, &"a:l:2+b:l:3".parse().unwrap()).unwrap();
        let ba = reg.extract(&img, &"b:l:3+a:l:2".parse().unwrap()).unwrap();
        assert_eq!(ab.parts[0], ba.parts[1]);
        assert_eq!(ab.parts[1], ba.parts[0]);
    }

    #[test]
    fn unknown_backend_and_bad_dim() {
        let reg = BackendRegistry::default();
        let img = rgb_from_fn(2, 2, |_, _| [0; 3]);
        assert!(matches!(
            reg.extract(&img, &"alexnet:fc7:4096".parse().unwrap()),
            Err(FeatureError::UnknownBackend(b)) if b == "alexnet"
        ));
        assert!(matches!(
            reg.extract(&img, &"fallback:grid2:5".parse().unwrap()),
            Err(FeatureError::DimensionMismatch { expected: 5, got: 76, .. })
        ));
        assert!(matches!(
            reg.extract(&img, &"fallback:pool5:10".parse().unwrap()),
            Err(FeatureError::UnknownLayer { .. })
        ));
    }

    #[test]
    fn signature_parsing() {
        let sig: FeatureSignature = "fallback:grid4".parse().unwrap();
        assert_eq!(sig, FeatureSignature::fallback());
        assert_eq!(sig.dim(), 112);
        assert_eq!(sig.to_string(), "fallback:grid4:112");
        assert_eq!(sig.to_string().parse::<FeatureSignature>().unwrap(), sig);
        assert!("alexnet:fc7".parse::<FeatureSignature>().is_err());
        assert!("alexnet:fc7:0".parse::<FeatureSignature>().is_err());
        assert!("fallback".parse::<FeatureSignature>().is_err());
    }

    #[test]
    fn gray_descriptor_g1() {
        let img = rgb_from_fn(5, 3, |_, _| [128, 128, 128]);
        let raw = fallback_descriptor(&img, 1);
        assert_eq!(raw.len(), 3 + HUE_BINS);
        let l = srgb_to_lab_pixel([128; 3])[0];
        assert!((raw[0] - l / 100.0).abs() < 1e-12);
        assert!(raw[1].abs() < 1e-6 && raw[2].abs() < 1e-6);
        assert_eq!(raw[3], 1.0);
        assert!(raw[4..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mirrored_image_changes_descriptor() {
        let img = rgb_from_fn(2, 1, |x, _| if x == 0 { [200, 30, 30] } else { [30, 30, 200] });
        let mirrored = image::imageops::flip_horizontal(&img);
        let a = fallback_descriptor(&img, 2);
        let b = fallback_descriptor(&mirrored, 2);
        assert_ne!(a, b);
        // cells (0,0) and (0,1) swap
        assert_eq!(a[0..3], b[3..6]);
        assert_eq!(a[3..6], b[0..3]);
        assert_eq!(a[12..], b[12..]);
    }

    #[test]
    fn hue_bins_cover_primaries() {
        assert_eq!(hue_bin([255, 0, 0]), 0);
        assert_eq!(hue_bin([0, 255, 0]), HUE_BINS / 3);
        assert_eq!(hue_bin([0, 0, 255]), 2 * HUE_BINS / 3);
        assert_eq!(hue_bin([255, 0, 1]), HUE_BINS - 1);
        assert_eq!(hue_bin([7, 7, 7]), 0);
    }

    #[test]
    fn precomputed_backend_keys_by_content() {
        let backend = PrecomputedBackend::new("alexnet");
        let img = rgb_from_fn(3, 3, |x, y| [x as u8, y as u8, 0]);
        backend.insert(&img, "fc7", vec![3.0, 4.0]);
        assert_eq!(backend.extract(&img, "fc7").unwrap(), vec![3.0, 4.0]);
        assert!(backend.extract(&img, "fc6").is_err());
        let other = rgb_from_fn(3, 3, |_, _| [9; 3]);
        assert!(matches!(backend.extract(&other, "fc7"), Err(FeatureError::BackendFailure { .. })));
    }

    #[test]
    fn sidecar_round_trip_and_guards() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.jsonl");
        let sig = FeatureSignature::fallback();
        let reg = BackendRegistry::default();
        let imgs: Vec<RgbImage> = (0..3u8).map(|i| rgb_from_fn(6, 6, move |x, y| [x as u8 * 40, y as u8 * i * 10, 90])).collect();
        let vecs: Vec<(String, FeatureVector)> = imgs
            .iter()
            .enumerate()
            .map(|(i, img)| (format!("img{i}"), reg.extract(img, &sig).unwrap()))
            .collect();
        save_precomputed(&path, &sig, vecs.iter().map(|(id, v)| (id.as_str(), v))).unwrap();

        let loaded = load_precomputed(&path, &sig).unwrap();
        assert!(loaded.warnings.is_empty());
        assert_eq!(loaded.vectors.len(), 3);
        for (id, v) in &vecs {
            let got = &loaded.vectors[id];
            for (a, b) in got.values().zip(v.values()) {
                assert!((a - b).abs() <= 1e-7);
            }
        }

        let other: FeatureSignature = "fallback:grid2".parse().unwrap();
        assert!(matches!(load_precomputed(&path, &other), Err(FeatureError::SignatureMismatch { .. })));
    }

    #[test]
    fn off_norm_vector_is_renormalized_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        let sig: FeatureSignature = "net:fc7:2".parse().unwrap();
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"signature\":\"net:fc7\",\"parts\":[{\"backend\":\"net\",\"layer\":\"fc7\",\"values\":[0.606,0.808]}]}\n",
        )
        .unwrap();
        let loaded = load_precomputed(&path, &sig).unwrap();
        assert_eq!(loaded.warnings.len(), 1);
        let v: Vec<f64> = loaded.vectors["a"].values().collect();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn truncated_line_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        std::fs::write(&path, "{\"id\":\"img042\",\"signature\":\"net:fc7\",\"parts\":[{\"backe").unwrap();
        let err = load_precomputed(&path, &"net:fc7:2".parse().unwrap()).unwrap_err();
        match err {
            FeatureError::Parse { id, line, .. } => {
                assert_eq!(id.as_deref(), Some("img042"));
                assert_eq!(line, 1);
            }
            other => panic!("unexpected {other}"),
        }
    }
}
