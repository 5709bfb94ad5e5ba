use std::sync::Arc;

use affect_core::color::Binning;
use affect_core::datastore::{self, Database, IngestConfig};
use affect_core::synthetic::{self, Pattern};
use affect_core::{BackendRegistry, FeatureSignature, Pipeline};
use affect_service::{router, AppState, ServiceConfig, Stats};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    app: Router,
    digest: String,
}

fn fixture(count: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synthetic::write_fixture(dir.path(), count, 24, 5).unwrap();
    let config = IngestConfig::default();
    let report = datastore::ingest(&manifest, dir.path(), &config, &BackendRegistry::default()).unwrap();
    let db = datastore::load(&manifest, &config.signature, &config.binning).unwrap();
    let pipeline = Pipeline::new(Arc::new(db), BackendRegistry::default());
    Fixture { _dir: dir, app: router(AppState::new(Some(pipeline)), &ServiceConfig::default()), digest: report.digest }
}

fn source_b64() -> String {
    let mut png = Vec::new();
    synthetic::image(Pattern::Noise, 32, 32, 3)
        .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
        .unwrap();
    BASE64.encode(png)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(serde_json::to_vec(&b).unwrap())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

/// The `plan` member exactly as sent.
fn raw_plan(bytes: &[u8]) -> String {
    #[derive(serde::Deserialize)]
    struct Envelope<'a> {
        #[serde(borrow)]
        plan: &'a serde_json::value::RawValue,
    }
    serde_json::from_slice::<Envelope>(bytes).unwrap().plan.get().to_string()
}

#[tokio::test]
async fn transform_returns_image_and_deterministic_plan() {
    let f = fixture(12);
    let body = json!({"image": source_b64(), "emotion": {"joy": 0.7, "surprise": 0.3}});
    let (status, a) = call(&f.app, "POST", "/v1/transform", Some(body.clone())).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&a));
    let (_, b) = call(&f.app, "POST", "/v1/transform", Some(body)).await;
    assert_eq!(raw_plan(&a), raw_plan(&b));

    let v = json_of(&a);
    let png = BASE64.decode(v["image"].as_str().unwrap()).unwrap();
    let out = image::load_from_memory(&png).unwrap();
    assert_eq!((out.width(), out.height()), (32, 32));
    let plan = &v["plan"];
    let candidates = plan["candidates"]["size"].as_u64().unwrap();
    assert_eq!(plan["targets"].as_array().unwrap().len() as u64, candidates.min(10));
    assert_eq!(plan["database_digest"], f.digest.as_str());
    assert!(v["timings"]["total_ms"].as_f64().unwrap() >= 0.0);
}

#[tokio::test]
async fn preview_matches_transform_and_honours_k() {
    let f = fixture(12);
    let body = json!({"image": source_b64(), "emotion": [0.1, 0.0, 0.4, 0.0, 0.5, 0.0, 0.0], "k": 3});
    let (status, preview) = call(&f.app, "POST", "/v1/preview", Some(body.clone())).await;
    assert_eq!(status, StatusCode::OK);
    let (_, transform) = call(&f.app, "POST", "/v1/transform", Some(body)).await;
    assert_eq!(raw_plan(&preview), raw_plan(&transform));

    let v = json_of(&preview);
    assert_eq!(v["plan"]["targets"].as_array().unwrap().len(), 3);
    let thumbs = v["thumbnails"].as_array().unwrap();
    assert_eq!(thumbs.len(), 3);
    let url = thumbs[0]["url"].as_str().unwrap();
    assert_eq!(thumbs[0]["id"], v["plan"]["targets"][0]["id"]);
    let (status, png) = call(&f.app, "GET", url, None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(image::load_from_memory(&png).is_ok());
    assert_eq!(call(&f.app, "GET", "/thumbnails/nope", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn invalid_inputs_are_400_with_field() {
    let f = fixture(4);
    let zero = json!({"image": source_b64(), "emotion": {"joy": 0.0}});
    let (status, body) = call(&f.app, "POST", "/v1/transform", Some(zero)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(json_of(&body)["field"], "emotion");

    let garbage = json!({"image": BASE64.encode(b"not an image"), "emotion": "joy"});
    let (status, body) = call(&f.app, "POST", "/v1/preview", Some(garbage)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(json_of(&body)["field"], "image");

    let unknown = json!({"image": source_b64(), "emotion": {"happiness": 1.0}});
    assert_eq!(call(&f.app, "POST", "/v1/preview", Some(unknown)).await.0, StatusCode::BAD_REQUEST);

    let strength = json!({"image": source_b64(), "emotion": "joy", "strength": 2.0});
    assert_eq!(call(&f.app, "POST", "/v1/transform", Some(strength)).await.0, StatusCode::BAD_REQUEST);

    let (status, _) = call(&f.app, "POST", "/v1/transform", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn oversize_body_is_413() {
    let f = fixture(3);
    let big = "A".repeat(17 * 1024 * 1024);
    let body = json!({"image": big, "emotion": "joy"});
    assert_eq!(call(&f.app, "POST", "/v1/transform", Some(body)).await.0, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn stats_and_health() {
    let f = fixture(12);
    let (status, body) = call(&f.app, "GET", "/v1/database/stats", None).await;
    assert_eq!(status, StatusCode::OK);
    let stats: Stats = serde_json::from_slice(&body).unwrap();
    assert_eq!(stats.records, 12);
    assert_eq!(stats.digest, f.digest);
    assert_eq!(stats.feature_signature, "fallback:grid4");
    assert_eq!(stats.binning, "lab256");
    let (status, body) = call(&f.app, "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&body)["database_loaded"], true);
}

#[tokio::test]
async fn without_database_pipeline_routes_are_503() {
    let app = router(AppState::new(None), &ServiceConfig::default());
    let body = json!({"image": source_b64(), "emotion": "joy"});
    assert_eq!(call(&app, "POST", "/v1/transform", Some(body.clone())).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(call(&app, "GET", "/v1/database/stats", None).await.0, StatusCode::SERVICE_UNAVAILABLE);
    let (status, health) = call(&app, "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&health)["database_loaded"], false);

    let empty = Database::from_records(FeatureSignature::fallback(), Binning::default(), Vec::new()).unwrap();
    let app = router(
        AppState::new(Some(Pipeline::new(Arc::new(empty), BackendRegistry::default()))),
        &ServiceConfig::default(),
    );
    assert_eq!(call(&app, "POST", "/v1/preview", Some(body)).await.0, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn concurrent_requests_agree() {
    let f = fixture(12);
    let body = json!({"image": source_b64(), "emotion": "sadness"});
    let calls = (0..8).map(|_| {
        let app = f.app.clone();
        let body = body.clone();
        tokio::spawn(async move { call(&app, "POST", "/v1/preview", Some(body)).await })
    });
    let mut plans = Vec::new();
    for c in calls {
        let (status, bytes) = c.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        plans.push(raw_plan(&bytes));
    }
    assert!(plans.windows(2).all(|w| w[0] == w[1]));
}
