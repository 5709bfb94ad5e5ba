use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use affect_core::color::{Binning, DEFAULT_BINS};
use affect_core::{datastore, BackendRegistry, FeatureSignature, Pipeline};
use affect_service::{router, AppState, ServiceConfig, DEFAULT_BODY_LIMIT};
use anyhow::Context;
use clap::Parser;

#[derive(Debug, Parser)]
#[command(name = "affect-service", version, about = "HTTP API for emotion-guided recoloring")]
struct Opt {
    /// Manifest the database was ingested from. Without it, pipeline routes answer 503.
    #[arg(long, env = "AFFECT_DB")]
    db: Option<PathBuf>,
    #[arg(long = "features", default_value = "fallback:grid4")]
    signature: String,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Allowed CORS origin; repeatable. Default allows any.
    #[arg(long = "cors-origin")]
    cors_origins: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_BODY_LIMIT)]
    body_limit: usize,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let opt = Opt::parse();
    let signature: FeatureSignature = opt.signature.parse().context("--features")?;
    let binning = Binning::lab(opt.bins).context("--bins")?;

    let pipeline = match &opt.db {
        Some(manifest) => match datastore::load(manifest, &signature, &binning) {
            Ok(db) => {
                log::info!("loaded {} records, digest {}", db.len(), db.digest());
                Some(Pipeline::new(Arc::new(db), BackendRegistry::default()))
            }
            Err(e) => {
                log::error!("database not loaded: {e}");
                None
            }
        },
        None => None,
    };

    let config = ServiceConfig { body_limit: opt.body_limit, cors_origins: opt.cors_origins };
    let app = router(AppState::new(pipeline), &config);
    let listener = tokio::net::TcpListener::bind(opt.bind).await.with_context(|| format!("binding {}", opt.bind))?;
    log::info!("listening on {}", opt.bind);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            tokio::signal::ctrl_c().await.ok();
        })
        .await?;
    Ok(())
}
