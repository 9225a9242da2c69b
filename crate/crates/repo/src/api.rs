//! HTTP API of the repository.
//!
//! | route | purpose |
//! |---|---|
//! | `GET /api/services` | discovered services, upstream state and counters |
//! | `GET /api/series` | chart data: points, or bins with min/max envelopes |
//! | `GET /api/stream` | server-sent events: `values`, `tree`, `registry` |
//! | `GET /api/mst` | overlay tree, vertices and per-link measurements |
//! | `POST /api/admin` | relays an admin command to a station (Bearer token) |
//! | `POST /api/admin/sign-filter` | signs a filter spec with the trust key |
//! | `GET /api/alerts` | supervisor escalations and the admin audit trail |
//!
//! Errors are JSON objects `{"error": CODE, "msg": text}`.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;
use vigil_core::predicate::{Predicate, PredicateSpec};
use vigil_core::subscription::FilterSpec;
use vigil_net::station::ALERTS_CLUSTER;

use crate::admin::{self, AdminCommand, AdminFailure};
use crate::audit::AuditRecord;
use crate::bus::StreamFilter;
use crate::error::Result;
use crate::repository::Shared;

pub(crate) struct HttpServer {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl HttpServer {
    pub(crate) fn start(listen: &str, shared: Arc<Shared>) -> Result<Self> {
        let listener = std::net::TcpListener::bind(listen)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .thread_name("repo-http")
            .enable_all()
            .build()?;
        let (stop_tx, stop_rx) = oneshot::channel::<()>();
        let app = router(shared);
        let thread = thread::Builder::new().name("repo-http-main".into()).spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        tracing::error!("http listener: {e}");
                        return;
                    }
                };
                tokio::select! {
                    res = async { axum::serve(listener, app).await } => {
                        if let Err(e) = res {
                            tracing::error!("http server: {e}");
                        }
                    }
                    _ = stop_rx => {}
                }
            });
            // open event streams never finish on their own
            runtime.shutdown_timeout(Duration::from_millis(200));
        })?;
        Ok(Self {
            addr,
            stop: Some(stop_tx),
            thread: Some(thread),
        })
    }

    pub(crate) fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub(crate) fn shutdown(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(h) = self.thread.take() {
            let _ = h.join();
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub(crate) fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/api/services", get(services))
        .route("/api/series", get(series))
        .route("/api/stream", get(stream))
        .route("/api/mst", get(mst))
        .route("/api/admin", post(admin))
        .route("/api/admin/sign-filter", post(sign_filter))
        .route("/api/alerts", get(alerts))
        .with_state(shared)
}

fn error(status: StatusCode, code: &str, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": code, "msg": msg.into() }))).into_response()
}

async fn services(State(s): State<Arc<Shared>>) -> Response {
    Json(json!({ "services": s.services(), "repository": s.stats() })).into_response()
}

/// Address selectors shared by `/api/series` and `/api/stream`. Each is
/// an anchored regex; absent means any.
#[derive(Debug, Default)]
struct Selector {
    farm: Option<String>,
    cluster: Option<String>,
    node: Option<String>,
    param: Option<String>,
    source: Option<String>,
    vmin: Option<f64>,
    vmax: Option<f64>,
}

impl Selector {
    fn predicate(&self, t1: Option<u64>, t2: Option<u64>) -> std::result::Result<Predicate, Response> {
        let any = || ".*".to_string();
        let spec = PredicateSpec {
            farm: self.farm.clone().unwrap_or_else(any),
            cluster: self.cluster.clone().unwrap_or_else(any),
            node: self.node.clone().unwrap_or_else(any),
            param: self.param.clone().unwrap_or_else(any),
            t1,
            t2,
            vmin: self.vmin,
            vmax: self.vmax,
        };
        Predicate::new(spec).map_err(|e| error(StatusCode::BAD_REQUEST, "INVALID", e.to_string()))
    }

    fn source(&self) -> std::result::Result<Option<Regex>, Response> {
        self.source
            .as_ref()
            .map(|re| Regex::new(&format!("^(?:{re})$")))
            .transpose()
            .map_err(|e| error(StatusCode::BAD_REQUEST, "INVALID", format!("source: {e}")))
    }
}

fn rejected(e: QueryRejection) -> Response {
    error(StatusCode::BAD_REQUEST, "INVALID", e.body_text())
}

#[derive(Debug, Deserialize)]
struct SeriesParams {
    farm: Option<String>,
    cluster: Option<String>,
    node: Option<String>,
    param: Option<String>,
    source: Option<String>,
    vmin: Option<f64>,
    vmax: Option<f64>,
    t1: Option<u64>,
    t2: Option<u64>,
    width: Option<u64>,
}

async fn series(State(s): State<Arc<Shared>>, query: std::result::Result<Query<SeriesParams>, QueryRejection>) -> Response {
    let params = match query {
        Ok(Query(p)) => p,
        Err(e) => return rejected(e),
    };
    let selector = Selector {
        farm: params.farm,
        cluster: params.cluster,
        node: params.node,
        param: params.param,
        source: params.source,
        vmin: params.vmin,
        vmax: params.vmax,
    };
    let (t1, t2) = (params.t1.unwrap_or(0), params.t2.unwrap_or(u64::MAX));
    let pred = match selector.predicate(Some(t1), Some(t2)) {
        Ok(p) => p,
        Err(resp) => return resp,
    };
    let source = match selector.source() {
        Ok(re) => re.unwrap_or_else(|| Regex::new("").expect("empty regex")),
        Err(resp) => return resp,
    };
    let store = s.store.read();
    match store.query(&source, &pred, t1, t2, params.width) {
        Ok(result) => Json(result).into_response(),
        Err(crate::error::RepoError::Core(vigil_core::Error::InvalidWidth { requested, base, examples })) => (
            StatusCode::BAD_REQUEST,
            Json(json!({
                "error": "INVALID_WIDTH",
                "msg": format!("width {requested} ms does not fit the stored data; use a multiple of {base} ms"),
                "base_width_ms": base,
                "valid_widths": examples,
            })),
        )
            .into_response(),
        Err(e) => error(StatusCode::BAD_REQUEST, "INVALID", e.to_string()),
    }
}

#[derive(Debug, Deserialize)]
struct StreamParams {
    farm: Option<String>,
    cluster: Option<String>,
    node: Option<String>,
    param: Option<String>,
    source: Option<String>,
    vmin: Option<f64>,
    vmax: Option<f64>,
    /// Comma list of `values`, `tree`, `registry`; all when absent.
    events: Option<String>,
}

async fn stream(State(s): State<Arc<Shared>>, query: std::result::Result<Query<StreamParams>, QueryRejection>) -> Response {
    let params = match query {
        Ok(Query(p)) => p,
        Err(e) => return rejected(e),
    };
    let selector = Selector {
        farm: params.farm,
        cluster: params.cluster,
        node: params.node,
        param: params.param,
        source: params.source,
        vmin: params.vmin,
        vmax: params.vmax,
    };
    let predicate = match selector.predicate(None, None) {
        Ok(p) => p,
        Err(resp) => return resp,
    };
    let source = match selector.source() {
        Ok(re) => re,
        Err(resp) => return resp,
    };
    let kinds: Vec<String> = params
        .events
        .as_deref()
        .unwrap_or("values,tree,registry")
        .split(',')
        .map(|k| k.trim().to_string())
        .collect();
    if let Some(bad) = kinds.iter().find(|k| !["values", "tree", "registry"].contains(&k.as_str())) {
        return error(StatusCode::BAD_REQUEST, "INVALID", format!("unknown event kind `{bad}`"));
    }
    let has = |k: &str| kinds.iter().any(|x| x == k);
    let (id, rx) = s.bus.subscribe(StreamFilter {
        predicate,
        source,
        values: has("values"),
        tree: has("tree"),
        registry: has("registry"),
    });
    let ready = Event::default().event("ready").data(json!({ "client": id }).to_string());
    let first = futures::stream::once(async move { Ok::<_, Infallible>(ready) });
    // ends when the bus drops the sender (overflow) or on shutdown
    let live = futures::stream::unfold(rx, |mut rx| async move {
        let ev = rx.recv().await?;
        Some((Ok(Event::default().event(ev.name()).data(ev.to_json())), rx))
    });
    use futures::StreamExt;
    Sse::new(first.chain(live)).keep_alive(KeepAlive::default()).into_response()
}

async fn mst(State(s): State<Arc<Shared>>) -> Response {
    Json(s.overlay.lock().view()).into_response()
}

/// Index of the presented admin token, if it is one.
fn principal(s: &Shared, headers: &HeaderMap) -> Option<usize> {
    let value = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    let token = value.strip_prefix("Bearer ")?.trim();
    s.config.admin_tokens.iter().position(|t| !t.is_empty() && t == token)
}

fn audit(s: &Shared, kind: &str, target: &str, principal: Option<usize>, outcome: &str, detail: impl Into<String>) -> AuditRecord {
    s.audit.append(AuditRecord {
        seq: 0,
        at: s.clock.now_ms(),
        kind: kind.to_string(),
        target: target.to_string(),
        principal,
        outcome: outcome.to_string(),
        detail: detail.into(),
    })
}

/// Authentication shared by the admin routes; writes the audit record
/// for a refusal.
fn authorize(s: &Shared, headers: &HeaderMap, kind: &str, target: &str) -> std::result::Result<usize, Response> {
    if !s.config.admin_enabled {
        audit(s, kind, target, None, "denied", "admin disabled");
        return Err(error(StatusCode::FORBIDDEN, "ADMIN_DISABLED", "admin endpoints are disabled"));
    }
    match principal(s, headers) {
        Some(p) => Ok(p),
        None => {
            audit(s, kind, target, None, "denied", "missing or unknown bearer token");
            Err(error(StatusCode::UNAUTHORIZED, "UNAUTHORIZED", "a valid bearer token is required"))
        }
    }
}

async fn admin(State(s): State<Arc<Shared>>, headers: HeaderMap, body: Bytes) -> Response {
    let parsed: std::result::Result<AdminCommand, _> = serde_json::from_slice(&body);
    let (kind, target) = match &parsed {
        Ok(c) => (c.kind.as_str().to_string(), c.target.clone()),
        Err(_) => ("?".to_string(), String::new()),
    };
    let who = match authorize(&s, &headers, &kind, &target) {
        Ok(p) => p,
        Err(resp) => return resp,
    };
    let cmd = match parsed {
        Ok(c) => c,
        Err(e) => {
            audit(&s, &kind, &target, Some(who), "invalid", e.to_string());
            return error(StatusCode::BAD_REQUEST, "INVALID", e.to_string());
        }
    };
    if let Err(AdminFailure::BadPayload(msg)) = admin::validate(&cmd) {
        audit(&s, &kind, &target, Some(who), "invalid", msg.clone());
        return error(StatusCode::BAD_REQUEST, "INVALID", msg);
    }
    let Some(endpoint) = s.endpoint_of(&cmd.target) else {
        let msg = format!("no attached service `{}`", cmd.target);
        audit(&s, &kind, &target, Some(who), "failed", msg.clone());
        return error(StatusCode::NOT_FOUND, "UNKNOWN_SERVICE", msg);
    };
    // one forward at a time per station
    let lock = s.admin_locks.lock().entry(cmd.target.clone()).or_default().clone();
    let relayed = tokio::task::spawn_blocking(move || {
        let _guard = lock.lock();
        admin::forward(&endpoint, &cmd)
    })
    .await
    .unwrap_or_else(|e| Err(AdminFailure::Unreachable(e.to_string())));
    match relayed {
        Ok(result) => {
            let rec = audit(&s, &kind, &target, Some(who), "ok", result.to_string());
            Json(json!({ "ok": true, "kind": kind, "target": target, "result": result, "audit_seq": rec.seq }))
                .into_response()
        }
        Err(AdminFailure::Remote { code, msg }) => {
            audit(&s, &kind, &target, Some(who), "failed", format!("{code}: {msg}"));
            error(StatusCode::UNPROCESSABLE_ENTITY, &code, msg)
        }
        Err(AdminFailure::Unreachable(msg)) | Err(AdminFailure::BadPayload(msg)) => {
            audit(&s, &kind, &target, Some(who), "failed", msg.clone());
            error(StatusCode::BAD_GATEWAY, "UNREACHABLE", msg)
        }
    }
}

async fn sign_filter(State(s): State<Arc<Shared>>, headers: HeaderMap, body: Bytes) -> Response {
    const KIND: &str = "SIGN_FILTER";
    let parsed: std::result::Result<FilterSpec, _> = serde_json::from_slice(&body);
    let target = parsed.as_ref().map(|f| f.filter_id.clone()).unwrap_or_default();
    let who = match authorize(&s, &headers, KIND, &target) {
        Ok(p) => p,
        Err(resp) => return resp,
    };
    let spec = match parsed {
        Ok(spec) => spec,
        Err(e) => {
            audit(&s, KIND, &target, Some(who), "invalid", e.to_string());
            return error(StatusCode::BAD_REQUEST, "INVALID", e.to_string());
        }
    };
    let Some(trust) = &s.trust else {
        audit(&s, KIND, &target, Some(who), "failed", "no trust key configured");
        return error(StatusCode::NOT_IMPLEMENTED, "SIGNING_DISABLED", "no trust key configured");
    };
    let signature = trust.sign(&spec);
    audit(&s, KIND, &target, Some(who), "ok", "signed");
    Json(json!({ "spec": spec, "signature": signature })).into_response()
}

/// A supervisor escalation as recorded by a station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertView {
    pub source: String,
    pub farm: String,
    pub target: String,
    pub reason: String,
    pub attempts: u64,
    pub at: u64,
}

async fn alerts(State(s): State<Arc<Shared>>) -> Response {
    let pred = PredicateSpec::default().cluster(ALERTS_CLUSTER).compile().expect("literal predicate");
    let store = s.store.read();
    let mut list: Vec<AlertView> = Vec::new();
    for source in store.sources() {
        let Ok(values) = store.raw(source, &pred, 0, u64::MAX) else { continue };
        list.extend(values.into_iter().map(|v| AlertView {
            source: source.to_string(),
            farm: v.farm,
            target: v.node,
            reason: v.param,
            attempts: v.value as u64,
            at: v.time,
        }));
    }
    drop(store);
    list.sort_by(|a, b| (a.at, &a.source, &a.target).cmp(&(b.at, &b.source, &b.target)));
    Json(json!({ "alerts": list, "audit": s.audit.records() })).into_response()
}
