#![allow(dead_code)]

use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::Value;
use tower::ServiceExt;

use te_core::api::{cors_layer, router, AppState, Service, DEFAULT_ORIGINS};
use te_core::fixture::{generate, Fixture, FixtureSpec};
use te_core::ingest::{parse_terminology, Terminology};
use te_core::pipeline::{build_snapshot, ComputeParams};
use te_core::snapshot::Snapshot;

pub struct Built {
    pub fixture: Fixture,
    pub terminology: Terminology,
    pub snapshot: Snapshot,
}

pub fn build(spec: &FixtureSpec, params: &ComputeParams) -> Built {
    let fixture = generate(spec).expect("fixture");
    let terminology = parse_terminology(fixture.terminology_tsv.as_bytes()).expect("terminology");
    let snapshot = build_snapshot(&fixture.sets, &terminology, params)
        .expect("snapshot")
        .snapshot;
    Built {
        fixture,
        terminology,
        snapshot,
    }
}

/// Default fixture through the default pipeline, built once per test binary.
pub fn default_build() -> &'static Built {
    static CELL: OnceLock<Built> = OnceLock::new();
    CELL.get_or_init(|| build(&FixtureSpec::default(), &ComputeParams::default()))
}

pub fn app(snapshot: Snapshot) -> Router {
    router(AppState::new(Service::new(snapshot)), cors_layer(DEFAULT_ORIGINS).unwrap())
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    let resp = app
        .clone()
        .oneshot(Request::builder().uri(uri).body(Body::empty()).unwrap())
        .await
        .unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).expect("JSON body"))
}

/// Validates `value` against a published schema, returning every violation.
pub fn schema_errors(schema: &str, value: &Value) -> Vec<String> {
    let schema: Value = serde_json::from_str(schema).expect("schema parses");
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    validator.iter_errors(value).map(|e| format!("{e} at {}", e.instance_path)).collect()
}

pub fn assert_schema(schema: &str, value: &Value) {
    let errors = schema_errors(schema, value);
    assert!(errors.is_empty(), "schema violations: {errors:#?}");
}
