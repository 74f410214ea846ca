//! Read-only HTTP JSON service over a loaded snapshot.
//!
//! Routes:
//!
//! | route | response |
//! |---|---|
//! | `GET /api/corpora` | corpus descriptors ordered by `order_index` |
//! | `GET /api/corpora/{id}/projection` | aligned high-confidence points |
//! | `GET /api/concepts/search?q=` | up to 50 selectable matches |
//! | `GET /api/concepts/{id}` | per-corpus confidence and neighbor tables |
//! | `GET /api/similarity?ref=&cmp=[&cmp=]` | one similarity series per `cmp` |
//!
//! Errors are `{"code": ..., "message": ...}` with a matching status. The
//! logic lives on [`Service`] so it can be exercised without a socket.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use axum::extract::{Path, RawQuery, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::ingest::{ConceptId, ConceptMetadata};
use crate::similarity::{similarity_series, CorpusView, SimilaritySeries, MAX_COMPARISONS};
use crate::snapshot::{CorpusDescriptor, Snapshot};

pub const SEARCH_LIMIT: usize = 50;
pub const MIN_QUERY_CHARS: usize = 2;

/// Origins allowed cross-origin access unless configured otherwise.
pub const DEFAULT_ORIGINS: &[&str] = &[
    "http://localhost:3000",
    "http://localhost:5173",
    "http://localhost:8080",
    "http://127.0.0.1:3000",
    "http://127.0.0.1:5173",
    "http://127.0.0.1:8080",
];

/// JSON Schemas for every response body.
pub mod schemas {
    pub const CORPORA: &str = include_str!("../schemas/corpora.schema.json");
    pub const PROJECTION: &str = include_str!("../schemas/projection.schema.json");
    pub const SEARCH: &str = include_str!("../schemas/search.schema.json");
    pub const CONCEPT: &str = include_str!("../schemas/concept.schema.json");
    pub const SIMILARITY: &str = include_str!("../schemas/similarity.schema.json");
    pub const ERROR: &str = include_str!("../schemas/error.schema.json");
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn no_snapshot() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "NoSnapshot", "no snapshot is loaded")
    }

    fn unknown_corpus(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "UnknownCorpus", format!("no corpus `{id}`"))
    }

    fn unknown_concept(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "UnknownConcept", format!("no concept `{id}`"))
    }

    fn not_selectable(id: &str) -> Self {
        Self::new(
            StatusCode::CONFLICT,
            "NotSelectable",
            format!("concept `{id}` is not high-confidence in any corpus"),
        )
    }

    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPoint {
    pub id: ConceptId,
    pub term: String,
    pub group: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResponse {
    pub corpus_id: String,
    pub aligned: bool,
    pub points: Vec<ProjectionPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    Exact,
    Prefix,
    Substring,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub id: ConceptId,
    pub preferred_term: String,
    pub semantic_group: String,
    /// The preferred term or synonym that matched best.
    pub matched_term: String,
    #[serde(rename = "match")]
    pub kind: MatchKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetailNeighbor {
    pub id: ConceptId,
    pub preferred_term: String,
    pub mean_sim: f64,
    pub std_sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusBlock {
    pub corpus_id: String,
    pub label: String,
    pub order_index: i64,
    pub present: bool,
    pub ec: Option<f64>,
    pub high_confidence: bool,
    /// Present but not high-confidence.
    pub warning: bool,
    pub neighbors: Vec<DetailNeighbor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDetail {
    pub metadata: ConceptMetadata,
    pub corpora: Vec<CorpusBlock>,
}

struct SearchEntry {
    id: ConceptId,
    /// (original, lowercased), preferred term first.
    terms: Vec<(String, String)>,
}

/// Query logic over one immutable snapshot.
pub struct Service {
    snapshot: Snapshot,
    high_conf: Vec<BTreeSet<ConceptId>>,
    confidence: Vec<BTreeMap<ConceptId, f64>>,
    selectable: BTreeSet<ConceptId>,
    search: Vec<SearchEntry>,
}

impl Service {
    pub fn new(snapshot: Snapshot) -> Self {
        let high_conf = snapshot.corpora.iter().map(|c| c.high_confidence()).collect();
        let confidence = snapshot
            .corpora
            .iter()
            .map(|c| c.confidence.iter().map(|r| (r.concept.clone(), r.ec)).collect())
            .collect();
        let selectable = snapshot.selectable();
        let search = selectable
            .iter()
            .map(|id| {
                let meta = snapshot.metadata(id);
                let mut terms = vec![(meta.preferred_term.to_lowercase(), meta.preferred_term)];
                for s in meta.synonyms {
                    terms.push((s.to_lowercase(), s));
                }
                SearchEntry {
                    id: id.clone(),
                    terms: terms.into_iter().map(|(lower, orig)| (orig, lower)).collect(),
                }
            })
            .collect();
        Service {
            snapshot,
            high_conf,
            confidence,
            selectable,
            search,
        }
    }

    pub fn snapshot(&self) -> &Snapshot {
        &self.snapshot
    }

    pub fn selectable(&self) -> &BTreeSet<ConceptId> {
        &self.selectable
    }

    pub fn corpora(&self) -> Vec<CorpusDescriptor> {
        self.snapshot.corpora.iter().map(|c| c.descriptor.clone()).collect()
    }

    pub fn projection(&self, corpus_id: &str) -> Result<ProjectionResponse, ApiError> {
        let c = self
            .snapshot
            .corpora
            .iter()
            .find(|c| c.descriptor.id == corpus_id)
            .ok_or_else(|| ApiError::unknown_corpus(corpus_id))?;
        let points = c
            .projection
            .points
            .iter()
            .map(|(id, p)| {
                let meta = self.snapshot.metadata(id);
                ProjectionPoint {
                    id: id.clone(),
                    term: meta.preferred_term,
                    group: meta.semantic_group,
                    x: p.x,
                    y: p.y,
                }
            })
            .collect();
        Ok(ProjectionResponse {
            corpus_id: corpus_id.to_string(),
            aligned: c.projection.aligned,
            points,
        })
    }

    /// Case-insensitive substring search over preferred terms and synonyms of
    /// selectable concepts. Ranked exact, prefix, substring, then by matched
    /// term length, then id.
    pub fn search(&self, query: &str) -> Result<Vec<SearchHit>, ApiError> {
        let q = query.trim().to_lowercase();
        if q.chars().count() < MIN_QUERY_CHARS {
            return Err(ApiError::bad_request(
                "QueryTooShort",
                format!("query must have at least {MIN_QUERY_CHARS} characters"),
            ));
        }
        let mut hits: Vec<(MatchKind, usize, &SearchEntry, &str)> = self
            .search
            .iter()
            .filter_map(|e| {
                e.terms
                    .iter()
                    .filter_map(|(orig, lower)| {
                        let kind = if *lower == q {
                            MatchKind::Exact
                        } else if lower.starts_with(&q) {
                            MatchKind::Prefix
                        } else if lower.contains(&q) {
                            MatchKind::Substring
                        } else {
                            return None;
                        };
                        Some((kind, orig.chars().count(), orig.as_str()))
                    })
                    .min_by_key(|&(kind, len, _)| (kind, len))
                    .map(|(kind, len, term)| (kind, len, e, term))
            })
            .collect();
        hits.sort_by(|a, b| (a.0, a.1, &a.2.id).cmp(&(b.0, b.1, &b.2.id)));
        hits.truncate(SEARCH_LIMIT);
        Ok(hits
            .into_iter()
            .map(|(kind, _, e, term)| {
                let meta = self.snapshot.metadata(&e.id);
                SearchHit {
                    id: e.id.clone(),
                    preferred_term: meta.preferred_term,
                    semantic_group: meta.semantic_group,
                    matched_term: term.to_string(),
                    kind,
                }
            })
            .collect())
    }

    fn is_known(&self, id: &ConceptId) -> bool {
        self.snapshot.concepts.contains_key(id) || self.confidence.iter().any(|c| c.contains_key(id))
    }

    /// Resolves `raw` to a selectable concept.
    fn selectable_id(&self, raw: &str) -> Result<ConceptId, ApiError> {
        let id = ConceptId::new(raw).map_err(|_| ApiError::unknown_concept(raw))?;
        if self.selectable.contains(&id) {
            Ok(id)
        } else if self.is_known(&id) {
            Err(ApiError::not_selectable(raw))
        } else {
            Err(ApiError::unknown_concept(raw))
        }
    }

    pub fn concept(&self, raw: &str) -> Result<ConceptDetail, ApiError> {
        let id = self.selectable_id(raw)?;
        let corpora = self
            .snapshot
            .corpora
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let ec = self.confidence[i].get(&id).copied();
                let present = ec.is_some();
                let high_confidence = self.high_conf[i].contains(&id);
                let neighbors = match c.neighbors.get(&id) {
                    Some(t) if present => t
                        .rows
                        .iter()
                        .map(|r| DetailNeighbor {
                            id: r.neighbor.clone(),
                            preferred_term: self.snapshot.metadata(&r.neighbor).preferred_term,
                            mean_sim: r.mean_sim,
                            std_sim: r.std_sim,
                        })
                        .collect(),
                    _ => Vec::new(),
                };
                CorpusBlock {
                    corpus_id: c.descriptor.id.clone(),
                    label: c.descriptor.label.clone(),
                    order_index: c.descriptor.order_index,
                    present,
                    ec,
                    high_confidence,
                    warning: present && !high_confidence,
                    neighbors,
                }
            })
            .collect();
        Ok(ConceptDetail {
            metadata: self.snapshot.metadata(&id),
            corpora,
        })
    }

    pub fn similarity(&self, reference: &str, comparisons: &[String]) -> Result<Vec<SimilaritySeries>, ApiError> {
        if comparisons.is_empty() {
            return Err(ApiError::bad_request("MissingParameter", "at least one `cmp` is required"));
        }
        if comparisons.len() > MAX_COMPARISONS {
            return Err(ApiError::bad_request(
                "TooManyComparisons",
                format!("{} comparisons requested, at most {MAX_COMPARISONS} allowed", comparisons.len()),
            ));
        }
        let reference = self.selectable_id(reference)?;
        let cmps = comparisons
            .iter()
            .map(|c| self.selectable_id(c))
            .collect::<Result<Vec<_>, _>>()?;
        let views: Vec<CorpusView> = self
            .snapshot
            .corpora
            .iter()
            .zip(&self.high_conf)
            .map(|(c, hc)| CorpusView {
                order_index: c.descriptor.order_index,
                vectors: &c.vectors,
                high_confidence: hc,
            })
            .collect();
        similarity_series(&views, &reference, &cmps)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))
    }
}

/// Shared handler state; `None` when no snapshot is loaded.
#[derive(Clone, Default)]
pub struct AppState(pub Option<Arc<Service>>);

impl AppState {
    pub fn new(service: Service) -> Self {
        AppState(Some(Arc::new(service)))
    }

    fn service(&self) -> Result<&Service, ApiError> {
        self.0.as_deref().ok_or_else(ApiError::no_snapshot)
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn corpora(State(st): State<AppState>) -> ApiResult<Vec<CorpusDescriptor>> {
    Ok(Json(st.service()?.corpora()))
}

async fn projection(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<ProjectionResponse> {
    st.service()?.projection(&id).map(Json)
}

async fn search(State(st): State<AppState>, RawQuery(q): RawQuery) -> ApiResult<Vec<SearchHit>> {
    let svc = st.service()?;
    let pairs = query_pairs(q.as_deref())?;
    let q = pairs
        .iter()
        .find(|(k, _)| k == "q")
        .map(|(_, v)| v.as_str())
        .unwrap_or("");
    svc.search(q).map(Json)
}

async fn concept(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<ConceptDetail> {
    st.service()?.concept(&id).map(Json)
}

async fn similarity(State(st): State<AppState>, RawQuery(q): RawQuery) -> ApiResult<Vec<SimilaritySeries>> {
    let svc = st.service()?;
    let pairs = query_pairs(q.as_deref())?;
    let reference = pairs
        .iter()
        .find(|(k, _)| k == "ref")
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| ApiError::bad_request("MissingParameter", "`ref` is required"))?;
    let cmps: Vec<String> = pairs
        .iter()
        .filter(|(k, _)| k == "cmp")
        .map(|(_, v)| v.clone())
        .collect();
    svc.similarity(reference, &cmps).map(Json)
}

fn query_pairs(raw: Option<&str>) -> Result<Vec<(String, String)>, ApiError> {
    serde_urlencoded::from_str(raw.unwrap_or(""))
        .map_err(|e| ApiError::bad_request("MalformedQuery", e.to_string()))
}

/// CORS layer permitting GET from `origins`.
pub fn cors_layer<S: AsRef<str>>(origins: &[S]) -> Result<CorsLayer, String> {
    let values = origins
        .iter()
        .map(|o| HeaderValue::from_str(o.as_ref()).map_err(|_| format!("invalid origin `{}`", o.as_ref())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CorsLayer::new()
        .allow_origin(AllowOrigin::list(values))
        .allow_methods([Method::GET]))
}

pub fn router(state: AppState, cors: CorsLayer) -> Router {
    Router::new()
        .route("/api/corpora", get(corpora))
        .route("/api/corpora/{id}/projection", get(projection))
        .route("/api/concepts/search", get(search))
        .route("/api/concepts/{id}", get(concept))
        .route("/api/similarity", get(similarity))
        .layer(cors)
        .with_state(state)
}

/// Serves `app` on `listener` until Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
