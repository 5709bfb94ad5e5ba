//! Emotion-annotated image databases: manifest ingest, derived sidecars and
//! the immutable in-memory [`Database`] served to the pipeline.
//!
//! A manifest is delimiter-separated UTF-8 text (comma or tab, detected from
//! the header) with a required header row; lines starting with `#` are
//! comments. Each row carries an image id, a path relative to the image root
//! and seven probabilities in channel order. Derived data lives next to the
//! manifest in `<manifest>.derived/<signature>__<binning>/`:
//!
//! * `database.json`: schema version, channel order, binning, signature, records
//! * `features.jsonl`: one feature vector per line (see [`crate::features`])
//! * `histograms.jsonl`: `{"id", "binning", "densities": [L, a, b]}` per line
//! * `thumbs/`: PNG thumbnails named by a hash of the image id

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::color::{compute_histogram, rgb_to_lab, Binning, ColorHistogram};
use crate::emotion::{channel_order, Emotion, EmotionDistribution, EmotionError, CHANNEL_COUNT};
use crate::features::{self, BackendRegistry, FeatureError, FeatureSignature, FeatureVector};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_THUMBNAIL_SIZE: u32 = 160;

const DATABASE_FILE: &str = "database.json";
const FEATURES_FILE: &str = "features.jsonl";
const HISTOGRAMS_FILE: &str = "histograms.jsonl";
const THUMBS_DIR: &str = "thumbs";

#[derive(Debug, Error)]
pub enum DatastoreError {
    #[error("manifest {}: {reason}", path.display())]
    ManifestParse { path: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("feature signature mismatch: expected `{expected}`, found `{found}`")]
    SignatureMismatch { expected: String, found: String },
    #[error("binning mismatch: expected `{expected}`, database was ingested with `{found}`")]
    BinningMismatch { expected: String, found: String },
    #[error("record `{id}` has no {kind} sidecar entry")]
    MissingSidecar { id: String, kind: &'static str },
    #[error("{}:{line}: {reason}{}", path.display(), id.as_ref().map(|i| format!(" (record `{i}`)")).unwrap_or_default())]
    SidecarParse { path: PathBuf, line: usize, id: Option<String>, reason: String },
    #[error("no ingested database for signature `{signature}` with binning `{binning}` under {}", dir.display())]
    NotIngested { dir: PathBuf, signature: String, binning: String },
    #[error("database schema: {0}")]
    Schema(String),
    #[error("record `{id}` is invalid: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error(transparent)]
    Features(#[from] FeatureError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatastoreError + '_ {
    move |source| DatastoreError::Io { path: path.to_path_buf(), source }
}

/// Header names of the manifest columns holding id, path and the seven probabilities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub id: String,
    pub path: String,
    pub emotions: [String; CHANNEL_COUNT],
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            id: "id".into(),
            path: "path".into(),
            emotions: channel_order().map(String::from),
        }
    }
}

impl ColumnMapping {
    /// Overrides entries from `key=column` pairs, e.g. `id=filename,path=filename,joy=prob_joy`.
    pub fn with_overrides(mut self, spec: &str) -> Result<Self, String> {
        for item in spec.split(',').filter(|s| !s.trim().is_empty()) {
            let (key, column) = item
                .split_once('=')
                .ok_or_else(|| format!("column mapping `{item}` is not key=column"))?;
            let column = column.trim().to_string();
            match key.trim() {
                "id" => self.id = column,
                "path" => self.path = column,
                name => {
                    let e: Emotion = name.parse().map_err(|e: EmotionError| e.to_string())?;
                    self.emotions[e.index()] = column;
                }
            }
        }
        Ok(self)
    }
}

#[derive(Debug, Clone)]
pub struct IngestConfig {
    pub signature: FeatureSignature,
    pub binning: Binning,
    pub columns: ColumnMapping,
    pub thumbnail_size: u32,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            signature: FeatureSignature::fallback(),
            binning: Binning::default(),
            columns: ColumnMapping::default(),
            thumbnail_size: DEFAULT_THUMBNAIL_SIZE,
        }
    }
}

/// A database entry; features and histogram are filled in during ingest.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub path: String,
    pub emotion: EmotionDistribution,
    pub features: Option<FeatureVector>,
    pub histogram: Option<ColorHistogram>,
}

/// A complete record of a loaded database.
#[derive(Debug, Clone, PartialEq)]
pub struct DbRecord {
    pub id: String,
    pub path: String,
    pub emotion: EmotionDistribution,
    pub features: FeatureVector,
    pub histogram: ColorHistogram,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub emotion: EmotionDistribution,
}

/// Contents of `database.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatabaseManifest {
    pub schema_version: u32,
    pub channel_order: Vec<String>,
    pub binning: Binning,
    pub feature_signature: FeatureSignature,
    pub image_root: PathBuf,
    pub records: Vec<ManifestEntry>,
}

/// Why a manifest row was not ingested.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RejectReason {
    MalformedRow { detail: String },
    DistributionSumOutOfRange { sum: f64 },
    InvalidProbability { detail: String },
    DuplicateId,
    MissingImage { path: String },
    ImageDecode { detail: String },
    FeatureExtraction { detail: String },
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::MalformedRow { detail } => write!(f, "MalformedRow: {detail}"),
            RejectReason::DistributionSumOutOfRange { sum } => {
                write!(f, "DistributionSumOutOfRange: probabilities sum to {sum}")
            }
            RejectReason::InvalidProbability { detail } => write!(f, "InvalidProbability: {detail}"),
            RejectReason::DuplicateId => f.write_str("DuplicateId"),
            RejectReason::MissingImage { path } => write!(f, "MissingImage: {path}"),
            RejectReason::ImageDecode { detail } => write!(f, "ImageDecode: {detail}"),
            RejectReason::FeatureExtraction { detail } => write!(f, "FeatureExtraction: {detail}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    /// 1-based line in the manifest.
    pub line: u64,
    pub id: Option<String>,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Serialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
    /// Records whose features were extracted in this run.
    pub extracted: usize,
    /// Records whose features came from an existing sidecar.
    pub reused: usize,
    pub digest: String,
    pub derived_dir: PathBuf,
}

/// Directory holding derived data for one (signature, binning) pair.
pub fn derived_dir(manifest: &Path, signature: &FeatureSignature, binning: &Binning) -> PathBuf {
    derived_root(manifest).join(format!("{}__{}", sanitize(&signature.key()), sanitize(&binning.key())))
}

fn derived_root(manifest: &Path) -> PathBuf {
    let name = manifest.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    manifest.with_file_name(format!("{name}.derived"))
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

fn thumbnail_name(id: &str) -> String {
    format!("{}.png", &hex::encode(Sha256::digest(id.as_bytes()))[..20])
}

struct ParsedRow {
    line: u64,
    id: String,
    path: String,
    emotion: EmotionDistribution,
}

fn parse_manifest(path: &Path, columns: &ColumnMapping) -> Result<(Vec<ParsedRow>, Vec<Rejection>), DatastoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let parse_err = |reason: String| DatastoreError::ManifestParse { path: path.to_path_buf(), reason };
    let header_line = text
        .lines()
        .find(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .ok_or_else(|| parse_err("missing header row".into()))?;
    let delimiter = if header_line.contains('\t') { b'\t' } else { b',' };

    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| parse_err(e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(format!("header has no `{name}` column")))
    };
    let id_col = column(&columns.id)?;
    let path_col = column(&columns.path)?;
    let emotion_cols = columns
        .emotions
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rows = Vec::new();
    let mut rejected = Vec::new();
    let mut seen = HashSet::new();
    for result in reader.records() {
        let record = match result {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                if matches!(e.kind(), csv::ErrorKind::Utf8 { .. }) {
                    rejected.push(Rejection {
                        line,
                        id: None,
                        reason: RejectReason::MalformedRow { detail: e.to_string() },
                    });
                    continue;
                }
                return Err(parse_err(e.to_string()));
            }
        };
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let id = record.get(id_col).filter(|s| !s.is_empty()).map(String::from);
        let reject = |reason| Rejection { line, id: id.clone(), reason };

        let Some(row_id) = id.clone() else {
            rejected.push(reject(RejectReason::MalformedRow { detail: "missing id".into() }));
            continue;
        };
        let Some(row_path) = record.get(path_col).filter(|s| !s.is_empty()) else {
            rejected.push(reject(RejectReason::MalformedRow { detail: "missing path".into() }));
            continue;
        };
        let mut probs = [0.0; CHANNEL_COUNT];
        let mut bad = None;
        for (slot, &col) in probs.iter_mut().zip(&emotion_cols) {
            match record.get(col).map(str::parse::<f64>) {
                Some(Ok(v)) => *slot = v,
                Some(Err(_)) => bad = Some(format!("non-numeric value `{}`", &record[col])),
                None => bad = Some(format!("row has {} fields, header has {}", record.len(), headers.len())),
            }
        }
        if let Some(detail) = bad {
            rejected.push(reject(RejectReason::MalformedRow { detail }));
            continue;
        }
        let emotion = match EmotionDistribution::new(probs) {
            Ok(e) => e,
            Err(EmotionError::DistributionSumOutOfRange { sum }) => {
                rejected.push(reject(RejectReason::DistributionSumOutOfRange { sum }));
                continue;
            }
            Err(e) => {
                rejected.push(reject(RejectReason::InvalidProbability { detail: e.to_string() }));
                continue;
            }
        };
        if !seen.insert(row_id.clone()) {
            rejected.push(reject(RejectReason::DuplicateId));
            continue;
        }
        rows.push(ParsedRow { line, id: row_id, path: row_path.to_string(), emotion });
    }
    Ok((rows, rejected))
}

fn read_existing_sidecars(
    dir: &Path,
    config: &IngestConfig,
) -> (BTreeMap<String, FeatureVector>, BTreeMap<String, ColorHistogram>) {
    let features = features::load_precomputed(&dir.join(FEATURES_FILE), &config.signature)
        .map(|l| l.vectors)
        .unwrap_or_else(|e| {
            if dir.join(FEATURES_FILE).exists() {
                log::warn!("ignoring unreadable feature sidecar: {e}");
            }
            BTreeMap::new()
        });
    let histograms = load_histograms(&dir.join(HISTOGRAMS_FILE), &config.binning).unwrap_or_else(|e| {
        if dir.join(HISTOGRAMS_FILE).exists() {
            log::warn!("ignoring unreadable histogram sidecar: {e}");
        }
        BTreeMap::new()
    });
    (features, histograms)
}

fn thumbnail(image: &RgbImage, size: u32) -> RgbImage {
    let (w, h) = image.dimensions();
    let scale = (size as f64 / w.max(h) as f64).min(1.0);
    let tw = ((w as f64 * scale).round() as u32).max(1);
    let th = ((h as f64 * scale).round() as u32).max(1);
    image::imageops::thumbnail(image, tw, th)
}

/// Validates a manifest, computes missing features/histograms/thumbnails,
/// writes the derived directory and returns a report with the database digest.
///
/// Rows failing validation are collected in the report; only an unreadable
/// manifest or an I/O failure aborts.
pub fn ingest(
    manifest: &Path,
    image_root: &Path,
    config: &IngestConfig,
    registry: &BackendRegistry,
) -> Result<IngestReport, DatastoreError> {
    let (rows, mut rejected) = parse_manifest(manifest, &config.columns)?;
    let dir = derived_dir(manifest, &config.signature, &config.binning);
    let (known_features, known_histograms) = read_existing_sidecars(&dir, config);
    // precomputed sidecars let unregistered backends through
    if rows.iter().any(|r| !known_features.contains_key(&r.id)) {
        registry.supports(&config.signature)?;
    }
    let thumbs = dir.join(THUMBS_DIR);
    fs::create_dir_all(&thumbs).map_err(io_err(&thumbs))?;

    enum Outcome {
        Reused(ImageRecord),
        Extracted(ImageRecord),
        Rejected(Rejection),
    }

    let outcomes: Vec<Outcome> = rows
        .into_par_iter()
        .map(|row| {
            let reject = |reason| {
                Outcome::Rejected(Rejection { line: row.line, id: Some(row.id.clone()), reason })
            };
            let image_path = image_root.join(&row.path);
            if !image_path.is_file() {
                return reject(RejectReason::MissingImage { path: image_path.display().to_string() });
            }
            let thumb_path = thumbs.join(thumbnail_name(&row.id));
            let cached = (known_features.get(&row.id), known_histograms.get(&row.id));
            if let (Some(f), Some(h)) = cached {
                if thumb_path.is_file() {
                    return Outcome::Reused(ImageRecord {
                        id: row.id,
                        path: row.path,
                        emotion: row.emotion,
                        features: Some(f.clone()),
                        histogram: Some(h.clone()),
                    });
                }
            }
            let image = match image::open(&image_path) {
                Ok(img) => img.to_rgb8(),
                Err(e) => return reject(RejectReason::ImageDecode { detail: e.to_string() }),
            };
            if image.width() == 0 || image.height() == 0 {
                return reject(RejectReason::ImageDecode { detail: "empty image".into() });
            }
            let features = match cached.0 {
                Some(f) => f.clone(),
                None => match registry.extract(&image, &config.signature) {
                    Ok(f) => f,
                    Err(e) => return reject(RejectReason::FeatureExtraction { detail: e.to_string() }),
                },
            };
            let histogram = match cached.1 {
                Some(h) => h.clone(),
                None => compute_histogram(&rgb_to_lab(&image), &config.binning),
            };
            if !thumb_path.is_file() {
                if let Err(e) = thumbnail(&image, config.thumbnail_size).save(&thumb_path) {
                    log::warn!("could not write thumbnail for `{}`: {e}", row.id);
                }
            }
            let record = ImageRecord {
                id: row.id,
                path: row.path,
                emotion: row.emotion,
                features: Some(features),
                histogram: Some(histogram),
            };
            if cached.0.is_some() {
                Outcome::Reused(record)
            } else {
                Outcome::Extracted(record)
            }
        })
        .collect();

    let mut records = Vec::new();
    let (mut extracted, mut reused) = (0, 0);
    for outcome in outcomes {
        match outcome {
            Outcome::Reused(r) => {
                reused += 1;
                records.push(r);
            }
            Outcome::Extracted(r) => {
                extracted += 1;
                records.push(r);
            }
            Outcome::Rejected(r) => rejected.push(r),
        }
    }
    rejected.sort_by_key(|r| r.line);
    records.sort_by(|a, b| a.id.cmp(&b.id));

    write_derived(&dir, image_root, config, &records)?;
    let db = load_dir(&dir, &config.signature, &config.binning)?;
    Ok(IngestReport {
        accepted: records.len(),
        rejected,
        extracted,
        reused,
        digest: db.digest().to_string(),
        derived_dir: dir,
    })
}

fn write_atomically(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), DatastoreError> {
    let tmp = path.with_extension("tmp");
    let result = (|| {
        let mut out = BufWriter::new(File::create(&tmp)?);
        write(&mut out)?;
        out.flush()?;
        drop(out);
        fs::rename(&tmp, path)
    })();
    result.map_err(io_err(path))
}

#[derive(Serialize, Deserialize)]
struct HistogramRecord {
    id: String,
    binning: Binning,
    densities: [Vec<f64>; 3],
}

fn write_derived(dir: &Path, image_root: &Path, config: &IngestConfig, records: &[ImageRecord]) -> Result<(), DatastoreError> {
    let complete: Vec<(&str, &FeatureVector)> = records
        .iter()
        .filter_map(|r| Some((r.id.as_str(), r.features.as_ref()?)))
        .collect();
    let features_tmp = dir.join("features.jsonl.tmp");
    features::save_precomputed(&features_tmp, &config.signature, complete)?;
    let features_path = dir.join(FEATURES_FILE);
    fs::rename(&features_tmp, &features_path).map_err(io_err(&features_path))?;

    write_atomically(&dir.join(HISTOGRAMS_FILE), |out| {
        for r in records {
            if let Some(h) = &r.histogram {
                let rec = HistogramRecord {
                    id: r.id.clone(),
                    binning: h.binning,
                    densities: h.channels.clone().map(|c| c.density),
                };
                serde_json::to_writer(&mut *out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    })?;

    let manifest = DatabaseManifest {
        schema_version: SCHEMA_VERSION,
        channel_order: channel_order().map(String::from).to_vec(),
        binning: config.binning,
        feature_signature: config.signature.clone(),
        image_root: image_root.to_path_buf(),
        records: records
            .iter()
            .map(|r| ManifestEntry { id: r.id.clone(), path: r.path.clone(), emotion: r.emotion })
            .collect(),
    };
    write_atomically(&dir.join(DATABASE_FILE), |out| {
        serde_json::to_writer_pretty(&mut *out, &manifest)?;
        out.write_all(b"\n")
    })
}

fn load_histograms(path: &Path, binning: &Binning) -> Result<BTreeMap<String, ColorHistogram>, DatastoreError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| DatastoreError::SidecarParse {
            path: path.to_path_buf(),
            line: i + 1,
            id: line
                .strip_prefix("{\"id\":\"")
                .and_then(|r| r.split('"').next())
                .map(String::from),
            reason,
        };
        let rec: HistogramRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if rec.binning != *binning {
            return Err(DatastoreError::BinningMismatch { expected: binning.key(), found: rec.binning.key() });
        }
        let hist = ColorHistogram::new(rec.binning, rec.densities).map_err(|e| err(e.to_string()))?;
        out.insert(rec.id, hist);
    }
    Ok(out)
}

/// Loads the database ingested from `manifest` for the given signature and binning.
pub fn load(manifest: &Path, signature: &FeatureSignature, binning: &Binning) -> Result<Database, DatastoreError> {
    let dir = derived_dir(manifest, signature, binning);
    if dir.join(DATABASE_FILE).is_file() {
        return load_dir(&dir, signature, binning);
    }
    // Explain a miss: another binning or signature may have been ingested.
    let root = derived_root(manifest);
    let prefix = format!("{}__", sanitize(&signature.key()));
    let suffix = format!("__{}", sanitize(&binning.key()));
    if let Ok(entries) = fs::read_dir(&root) {
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(DATABASE_FILE).is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        if let Some(other) = names.iter().find(|n| n.starts_with(&prefix)) {
            return Err(DatastoreError::BinningMismatch {
                expected: binning.key(),
                found: other[prefix.len()..].to_string(),
            });
        }
        if let Some(other) = names.iter().find(|n| n.ends_with(&suffix)) {
            return Err(DatastoreError::SignatureMismatch {
                expected: signature.key(),
                found: other[..other.len() - suffix.len()].to_string(),
            });
        }
    }
    Err(DatastoreError::NotIngested { dir: root, signature: signature.key(), binning: binning.key() })
}

/// Loads and fully validates a derived directory.
pub fn load_dir(dir: &Path, signature: &FeatureSignature, binning: &Binning) -> Result<Database, DatastoreError> {
    let db_path = dir.join(DATABASE_FILE);
    let text = fs::read_to_string(&db_path).map_err(io_err(&db_path))?;
    let manifest: DatabaseManifest =
        serde_json::from_str(&text).map_err(|e| DatastoreError::Schema(format!("{}: {e}", db_path.display())))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(DatastoreError::Schema(format!("unsupported schema version {}", manifest.schema_version)));
    }
    if manifest.channel_order != channel_order() {
        return Err(DatastoreError::Schema(format!(
            "channel order {:?} differs from {:?}",
            manifest.channel_order,
            channel_order()
        )));
    }
    if manifest.feature_signature.key() != signature.key() {
        return Err(DatastoreError::SignatureMismatch {
            expected: signature.key(),
            found: manifest.feature_signature.key(),
        });
    }
    if manifest.binning != *binning {
        return Err(DatastoreError::BinningMismatch { expected: binning.key(), found: manifest.binning.key() });
    }

    let mut features = features::load_precomputed(&dir.join(FEATURES_FILE), signature)?.vectors;
    let mut histograms = load_histograms(&dir.join(HISTOGRAMS_FILE), binning)?;
    let records = manifest
        .records
        .iter()
        .map(|entry| {
            let features = features
                .remove(&entry.id)
                .ok_or_else(|| DatastoreError::MissingSidecar { id: entry.id.clone(), kind: "feature" })?;
            let histogram = histograms
                .remove(&entry.id)
                .ok_or_else(|| DatastoreError::MissingSidecar { id: entry.id.clone(), kind: "histogram" })?;
            Ok(DbRecord {
                id: entry.id.clone(),
                path: entry.path.clone(),
                emotion: entry.emotion,
                features,
                histogram,
            })
        })
        .collect::<Result<Vec<_>, DatastoreError>>()?;

    let mut db = Database::from_records(manifest.feature_signature, manifest.binning, records)?;
    db.image_root = Some(manifest.image_root);
    db.derived_dir = Some(dir.to_path_buf());
    Ok(db)
}

/// Immutable, validated collection of complete records, sorted by id.
#[derive(Debug, Clone)]
pub struct Database {
    signature: FeatureSignature,
    binning: Binning,
    records: Vec<DbRecord>,
    digest: String,
    image_root: Option<PathBuf>,
    derived_dir: Option<PathBuf>,
}

impl Database {
    /// Validates every record against `signature` and `binning` and computes the digest.
    pub fn from_records(
        signature: FeatureSignature,
        binning: Binning,
        mut records: Vec<DbRecord>,
    ) -> Result<Self, DatastoreError> {
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let key = signature.key();
        for pair in records.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(DatastoreError::InvalidRecord { id: pair[0].id.clone(), reason: "duplicate id".into() });
            }
        }
        for r in &records {
            let invalid = |reason: String| DatastoreError::InvalidRecord { id: r.id.clone(), reason };
            if r.features.signature_key() != key {
                return Err(DatastoreError::SignatureMismatch { expected: key, found: r.features.signature_key() });
            }
            for (part, spec) in r.features.parts.iter().zip(signature.specs()) {
                if part.values.len() != spec.dim {
                    return Err(invalid(format!("feature part `{}` has {} values", spec.layer, part.values.len())));
                }
                let norm = part.values.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !part.zero && (norm - 1.0).abs() > 1e-6 {
                    return Err(invalid(format!("feature part `{}` has norm {norm}", spec.layer)));
                }
            }
            if r.histogram.binning != binning {
                return Err(DatastoreError::BinningMismatch { expected: binning.key(), found: r.histogram.binning.key() });
            }
            r.histogram.validate().map_err(|e| invalid(e.to_string()))?;
        }
        let digest = compute_digest(&signature, &binning, &records);
        Ok(Self { signature, binning, records, digest, image_root: None, derived_dir: None })
    }

    pub fn records(&self) -> &[DbRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&DbRecord> {
        self.records
            .binary_search_by(|r| r.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn signature(&self) -> &FeatureSignature {
        &self.signature
    }

    pub fn binning(&self) -> &Binning {
        &self.binning
    }

    /// Lowercase hex SHA-256 over the canonical record serialization.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn image_path(&self, id: &str) -> Option<PathBuf> {
        let record = self.get(id)?;
        Some(self.image_root.as_ref()?.join(&record.path))
    }

    pub fn thumbnail_path(&self, id: &str) -> Option<PathBuf> {
        self.get(id)?;
        let path = self.derived_dir.as_ref()?.join(THUMBS_DIR).join(thumbnail_name(id));
        path.is_file().then_some(path)
    }

    /// A copy without the record `id`; digest recomputed.
    pub fn without(&self, id: &str) -> Result<Self, DatastoreError> {
        let records = self.records.iter().filter(|r| r.id != id).cloned().collect();
        let mut db = Self::from_records(self.signature.clone(), self.binning, records)?;
        db.image_root = self.image_root.clone();
        db.derived_dir = self.derived_dir.clone();
        Ok(db)
    }
}

#[derive(Serialize)]
struct CanonicalRecord<'a> {
    id: &'a str,
    path: &'a str,
    emotion: &'a [f64; CHANNEL_COUNT],
    features: Vec<&'a [f64]>,
    histogram: [&'a [f64]; 3],
}

fn compute_digest(signature: &FeatureSignature, binning: &Binning, records: &[DbRecord]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(format!("affect-db/{SCHEMA_VERSION}\n{}\n{}\n", signature.key(), binning.key()));
    for r in records {
        let canonical = CanonicalRecord {
            id: &r.id,
            path: &r.path,
            emotion: r.emotion.as_array(),
            features: r.features.parts.iter().map(|p| p.values.as_slice()).collect(),
            histogram: [0, 1, 2].map(|c| r.histogram.channels[c].density.as_slice()),
        };
        hasher.update(serde_json::to_vec(&canonical).expect("record serializes"));
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}
