//! Commands behind the `affect` binary.
//!
//! Every command writes its report to a caller-supplied writer so tests and
//! the acceptance harness can capture it. Failures carry an [`ExitClass`]
//! that maps to the process exit status:
//!
//! | status | meaning |
//! |-------:|---------|
//! | 0 | success |
//! | 2 | invalid input: usage, manifest, emotion, source image, database load, no accepted rows |
//! | 3 | pipeline failure; the message names the failing stage |
//! | 4 | an output file or the report could not be written |

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use affect_core::color::Binning;
use affect_core::datastore::{self, ColumnMapping, Database, IngestConfig, DEFAULT_THUMBNAIL_SIZE};
use affect_core::pipeline::{PipelineParams, Source, TransferPlan};
use affect_core::{BackendRegistry, EmotionDistribution, FeatureSignature, Pipeline};
use anyhow::Context;
use clap::{Args, Parser, Subcommand};

pub const DB_ENV: &str = "AFFECT_DB";
pub const DEFAULT_SIGNATURE: &str = "fallback:grid4";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    Validation,
    Pipeline,
    Output,
}

impl ExitClass {
    pub fn code(self) -> i32 {
        match self {
            ExitClass::Validation => 2,
            ExitClass::Pipeline => 3,
            ExitClass::Output => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub class: ExitClass,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        self.class.code()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl std::error::Error for CliError {}

trait Classify<T> {
    fn class(self, class: ExitClass) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn class(self, class: ExitClass) -> Result<T, CliError> {
        self.map_err(|e| CliError { class, error: e.into() })
    }
}

fn invalid(msg: String) -> CliError {
    CliError { class: ExitClass::Validation, error: anyhow::anyhow!(msg) }
}

#[derive(Debug, Parser)]
#[command(name = "affect", version, about = "Emotion-guided image recoloring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a manifest and compute features, histograms and thumbnails.
    Ingest(IngestArgs),
    /// Recolor one image toward a target emotion distribution.
    Transform(TransformArgs),
    /// Compare target selections across feature signatures.
    Ablate(AblateArgs),
    /// Print record count, signature, binning and digest of a database.
    Stats(DbArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Manifest CSV/TSV: id, path and seven emotion probability columns.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory image paths are relative to (default: the manifest's directory).
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long = "features", default_value = DEFAULT_SIGNATURE)]
    pub signature: String,
    #[arg(long, default_value_t = affect_core::color::DEFAULT_BINS)]
    pub bins: usize,
    /// Column overrides, e.g. `id=image,joy=amusement`.
    #[arg(long)]
    pub columns: Option<String>,
    #[arg(long, default_value_t = DEFAULT_THUMBNAIL_SIZE)]
    pub thumbnail_size: u32,
}

/// Database selection shared by every read-only command.
#[derive(Debug, Clone, Args)]
pub struct DbArgs {
    /// Manifest the database was ingested from.
    #[arg(long, env = DB_ENV)]
    pub db: PathBuf,
    #[arg(long = "features", default_value = DEFAULT_SIGNATURE)]
    pub signature: String,
    #[arg(long, default_value_t = affect_core::color::DEFAULT_BINS)]
    pub bins: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ParamArgs {
    #[arg(long, default_value_t = affect_core::retrieval::DEFAULT_K)]
    pub k: usize,
    #[arg(long = "omega-mult", default_value_t = affect_core::emotion::DEFAULT_OMEGA_MULTIPLIER)]
    pub omega_mult: f64,
    #[arg(long, default_value_t = 1.0)]
    pub strength: f64,
    #[arg(long, default_value_t = 0)]
    pub passes: usize,
}

impl ParamArgs {
    pub fn params(&self) -> PipelineParams {
        PipelineParams {
            k: self.k,
            omega_multiplier: self.omega_mult,
            strength: self.strength,
            smoothing_passes: self.passes,
        }
    }
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    pub source: PathBuf,
    /// Preset (`joy`), `name=value` list or seven comma-separated values.
    #[arg(long)]
    pub emotion: String,
    /// Output PNG; the plan is written to `<output>.plan.json`.
    #[arg(short, long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub db: DbArgs,
    #[command(flatten)]
    pub params: ParamArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(required = true)]
    pub sources: Vec<PathBuf>,
    #[arg(long)]
    pub emotion: String,
    /// Manifest the databases were ingested from.
    #[arg(long, env = DB_ENV)]
    pub db: PathBuf,
    /// Feature signature to compare; repeat for each.
    #[arg(long = "features", required = true)]
    pub signatures: Vec<String>,
    #[arg(long, default_value_t = affect_core::color::DEFAULT_BINS)]
    pub bins: usize,
    /// Directory for one plan file per (source, signature).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub params: ParamArgs,
}

/// Resolved, validated settings of a transform-like command.
#[derive(Debug, Clone)]
pub struct CliConfig {
    pub db: PathBuf,
    pub signature: FeatureSignature,
    pub binning: Binning,
    pub params: PipelineParams,
}

impl CliConfig {
    pub fn new(db: &DbArgs, params: &ParamArgs) -> Result<Self, CliError> {
        let config = Self {
            db: db.db.clone(),
            signature: parse_signature(&db.signature)?,
            binning: parse_binning(db.bins)?,
            params: params.params(),
        };
        config.params.validate().class(ExitClass::Validation)?;
        Ok(config)
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest(args) => cmd_ingest(&args, out),
        Command::Transform(args) => cmd_transform(&args, out),
        Command::Ablate(args) => cmd_ablate(&args, out),
        Command::Stats(args) => cmd_stats(&args, out),
    }
}

fn parse_signature(s: &str) -> Result<FeatureSignature, CliError> {
    s.parse().with_context(|| format!("--features `{s}`")).class(ExitClass::Validation)
}

fn parse_binning(bins: usize) -> Result<Binning, CliError> {
    Binning::lab(bins).with_context(|| format!("--bins {bins}")).class(ExitClass::Validation)
}

pub fn parse_emotion(s: &str) -> Result<EmotionDistribution, CliError> {
    s.parse::<EmotionDistribution>().with_context(|| format!("--emotion `{s}`")).class(ExitClass::Validation)
}

fn load_database(manifest: &Path, signature: &FeatureSignature, binning: &Binning) -> Result<Database, CliError> {
    datastore::load(manifest, signature, binning)
        .with_context(|| format!("loading database for signature `{}` from {}", signature.key(), manifest.display()))
        .class(ExitClass::Validation)
}

fn load_source(path: &Path) -> Result<Source, CliError> {
    let image = image::open(path)
        .with_context(|| format!("reading source image {}", path.display()))
        .class(ExitClass::Validation)?;
    Ok(Source::new(source_id(path), image.to_rgb8()))
}

/// File name of the source; keeps plans independent of the working directory.
pub fn source_id(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

pub fn plan_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".plan.json");
    PathBuf::from(s)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display())).class(ExitClass::Output)
}

macro_rules! out {
    ($w:expr, $($arg:tt)*) => {
        writeln!($w, $($arg)*).context("writing report").class(ExitClass::Output)
    };
}

pub fn cmd_ingest(args: &IngestArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let columns = match &args.columns {
        Some(spec) => ColumnMapping::default().with_overrides(spec).map_err(|e| invalid(format!("--columns: {e}")))?,
        None => ColumnMapping::default(),
    };
    let config = IngestConfig {
        signature: parse_signature(&args.signature)?,
        binning: parse_binning(args.bins)?,
        columns,
        thumbnail_size: args.thumbnail_size,
    };
    let image_root = match &args.images {
        Some(dir) => dir.clone(),
        None => args.manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let registry = BackendRegistry::default();
    let report = datastore::ingest(&args.manifest, &image_root, &config, &registry)
        .with_context(|| format!("ingesting {}", args.manifest.display()))
        .class(ExitClass::Validation)?;

    out!(out, "accepted   {}", report.accepted)?;
    out!(out, "rejected   {}", report.rejected.len())?;
    for r in &report.rejected {
        let id = r.id.as_deref().map(|i| format!(" [{i}]")).unwrap_or_default();
        out!(out, "  line {}{id}: {}", r.line, r.reason)?;
    }
    out!(out, "extracted  {}", report.extracted)?;
    out!(out, "reused     {}", report.reused)?;
    out!(out, "signature  {}", config.signature.key())?;
    out!(out, "binning    {}", config.binning.key())?;
    out!(out, "digest     {}", report.digest)?;
    out!(out, "derived    {}", report.derived_dir.display())?;
    if report.accepted == 0 {
        return Err(invalid(format!("{}: no record was accepted", args.manifest.display())));
    }
    Ok(())
}

pub fn cmd_transform(args: &TransformArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = CliConfig::new(&args.db, &args.params)?;
    let target = parse_emotion(&args.emotion)?;
    let source = load_source(&args.source)?;
    let db = load_database(&config.db, &config.signature, &config.binning)?;
    let pipeline = Pipeline::new(Arc::new(db), BackendRegistry::default());
    let result = pipeline.transform(&source, &target, &config.params).class(ExitClass::Pipeline)?;

    result
        .output
        .save_with_format(&args.output, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", args.output.display()))
        .class(ExitClass::Output)?;
    let plan_file = plan_path(&args.output);
    write_file(&plan_file, &(result.plan.to_canonical_json() + "\n"))?;

    let t = &result.timings;
    log::info!(
        "timings ms: features {:.1} candidates {:.1} retrieval {:.1} blend {:.1} transfer {:.1} total {:.1}",
        t.features_ms,
        t.candidates_ms,
        t.retrieval_ms,
        t.blend_ms,
        t.transfer_ms,
        t.total_ms
    );
    write_gallery(out, &result.plan)?;
    out!(out, "output     {}", args.output.display())?;
    out!(out, "plan       {}", plan_file.display())?;
    Ok(())
}

/// Target table: rank, id, bc, distance, weight.
pub fn write_gallery(out: &mut dyn Write, plan: &TransferPlan) -> Result<(), CliError> {
    let width = plan.targets.iter().map(|t| t.id.len()).max().unwrap_or(0).max(2);
    out!(
        out,
        "candidates {} (omega {:.6}{}), targets {} of k={}",
        plan.candidates.size,
        plan.candidates.omega,
        if plan.candidates.fallback_used { ", fallback" } else { "" },
        plan.k_returned,
        plan.k_requested
    )?;
    out!(out, "{:>4}  {:<width$}  {:>8}  {:>10}  {:>8}", "rank", "id", "bc", "distance", "weight")?;
    for (i, t) in plan.targets.iter().enumerate() {
        out!(out, "{:>4}  {:<width$}  {:>8.6}  {:>10.6}  {:>8.6}", i + 1, t.id, t.bc, t.distance, t.weight)?;
    }
    Ok(())
}

pub fn cmd_stats(args: &DbArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let signature = parse_signature(&args.signature)?;
    let binning = parse_binning(args.bins)?;
    let db = load_database(&args.db, &signature, &binning)?;
    out!(out, "records    {}", db.len())?;
    out!(out, "signature  {}", db.signature().key())?;
    out!(out, "binning    {}", db.binning().key())?;
    out!(out, "digest     {}", db.digest())?;
    Ok(())
}

/// One row of the ablation comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub source: String,
    pub signature: String,
    pub plan: TransferPlan,
}

impl AblationRow {
    pub fn target_ids(&self) -> Vec<&str> {
        self.plan.targets.iter().map(|t| t.id.as_str()).collect()
    }
}

/// Resolves plans for every (source, signature) pair, source-major.
pub fn ablate(
    manifest: &Path,
    sources: &[PathBuf],
    signatures: &[FeatureSignature],
    binning: &Binning,
    target: &EmotionDistribution,
    params: &PipelineParams,
) -> Result<Vec<AblationRow>, CliError> {
    let mut pipelines = Vec::with_capacity(signatures.len());
    for sig in signatures {
        let db = load_database(manifest, sig, binning)?;
        pipelines.push(Pipeline::new(Arc::new(db), BackendRegistry::default()));
    }
    let mut rows = Vec::new();
    for path in sources {
        let source = load_source(path)?;
        for (sig, pipeline) in signatures.iter().zip(&pipelines) {
            let plan = pipeline
                .preview_targets(&source, target, params)
                .with_context(|| format!("signature `{}`", sig.key()))
                .class(ExitClass::Pipeline)?;
            rows.push(AblationRow { source: source.id.clone(), signature: sig.key(), plan });
        }
    }
    Ok(rows)
}

/// Comparison table followed by per-source target overlap between signatures.
pub fn render_ablation(rows: &[AblationRow]) -> String {
    let sw = rows.iter().map(|r| r.source.len()).max().unwrap_or(0).max("source".len());
    let gw = rows.iter().map(|r| r.signature.len()).max().unwrap_or(0).max("signature".len());
    let mut s = format!("{:<sw$}  {:<gw$}  {:>3}  {:>13}  targets\n", "source", "signature", "k", "mean_distance");
    for r in rows {
        s += &format!(
            "{:<sw$}  {:<gw$}  {:>3}  {:>13.6}  {}\n",
            r.source,
            r.signature,
            r.plan.k_returned,
            r.plan.mean_target_distance(),
            r.target_ids().join(",")
        );
    }
    let mut overlap = String::new();
    let mut i = 0;
    while i < rows.len() {
        let j = rows[i..].iter().position(|r| r.source != rows[i].source).map_or(rows.len(), |p| i + p);
        let group = &rows[i..j];
        for a in 0..group.len() {
            for b in a + 1..group.len() {
                let ids_b = group[b].target_ids();
                let shared = group[a].target_ids().iter().filter(|id| ids_b.contains(id)).count();
                overlap += &format!(
                    "{}: {} vs {} share {}/{}\n",
                    group[a].source,
                    group[a].signature,
                    group[b].signature,
                    shared,
                    group[a].plan.k_returned.max(group[b].plan.k_returned)
                );
            }
        }
        i = j;
    }
    if !overlap.is_empty() {
        s += "\n";
        s += &overlap;
    }
    s
}

/// Plan file name for one ablation row.
pub fn ablation_plan_name(row: &AblationRow) -> String {
    let clean = |s: &str| s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect::<String>();
    format!("{}__{}.plan.json", clean(&row.source), clean(&row.signature))
}

pub fn cmd_ablate(args: &AblateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let signatures = args.signatures.iter().map(|s| parse_signature(s)).collect::<Result<Vec<_>, _>>()?;
    let binning = parse_binning(args.bins)?;
    let params = args.params.params();
    params.validate().class(ExitClass::Validation)?;
    let target = parse_emotion(&args.emotion)?;
    let rows = ablate(&args.db, &args.sources, &signatures, &binning, &target, &params)?;
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).class(ExitClass::Output)?;
        for row in &rows {
            write_file(&dir.join(ablation_plan_name(row)), &(row.plan.to_canonical_json() + "\n"))?;
        }
    }
    write!(out, "{}", render_ablation(&rows)).context("writing report").class(ExitClass::Output)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_path_appends_suffix() {
        assert_eq!(plan_path(Path::new("out/x.png")), PathBuf::from("out/x.png.plan.json"));
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [ExitClass::Validation, ExitClass::Pipeline, ExitClass::Output].map(ExitClass::code);
        assert_eq!(codes, [2, 3, 4]);
    }

    #[test]
    fn emotion_list_is_reordered_and_normalized() {
        let d = parse_emotion("anger=0.5,sadness=0.3,fear=0.2").unwrap();
        let want = [0.5, 0.0, 0.2, 0.0, 0.3, 0.0, 0.0];
        for (a, b) in d.as_array().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let joy = parse_emotion("joy=1").unwrap();
        assert_eq!(joy.as_array(), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(parse_emotion("joy=0").unwrap_err().class, ExitClass::Validation);
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
