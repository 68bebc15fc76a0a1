//! HTTP sessions over the incremental partitioner.
//!
//! A session owns a base module and a log of tactics. Tactics are applied
//! one at a time under the session's lock; a rejected tactic leaves the
//! session as it was. There is no undo: fork a prefix of the log instead.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tilepart::ir::{parse_module, print_module, Mesh};
use tilepart::schedule::{Partitioner, ScheduleError, Tactic, TacticReport};
use tilepart::sim::DeviceSpec;
use tower_http::cors::CorsLayer;

/// Body of `POST /sessions`.
#[derive(Debug, Deserialize)]
pub struct CreateSession {
    /// Textual IR.
    pub module: String,
    /// Such as `B:4,M:2`. Overrides the module's mesh header.
    pub mesh: Option<String>,
    /// Builtin device name. Defaults to `tpu-v3-core`.
    pub spec: Option<String>,
    /// Device spec file contents. Takes precedence over `spec`.
    pub spec_text: Option<String>,
}

/// Body of `POST /sessions/{id}/fork`.
#[derive(Debug, Default, Deserialize)]
pub struct Fork {
    /// Number of tactics to keep. Defaults to the whole log.
    pub upto: Option<usize>,
}

/// A session as returned by `GET /sessions/{id}`.
#[derive(Debug, Serialize)]
pub struct SessionView {
    pub id: String,
    pub mesh: String,
    pub spec: String,
    /// The module the session started from.
    pub base: String,
    /// Current loop-form IR, loops fused for reading.
    pub ir: String,
    pub tactics: Vec<Tactic>,
    /// Cost of the unpartitioned module.
    pub initial: TacticReport,
    pub reports: Vec<TacticReport>,
}

struct Session {
    partitioner: Partitioner,
    initial: TacticReport,
}

impl Session {
    fn new(partitioner: Partitioner) -> Self {
        let initial = partitioner.snapshot("(unpartitioned)", Vec::new(), Default::default());
        Self { partitioner, initial }
    }

    fn view(&self, id: &str) -> SessionView {
        let p = &self.partitioner;
        SessionView {
            id: id.to_string(),
            mesh: p.state.mesh.to_string(),
            spec: p.spec.name.clone(),
            base: print_module(&p.base),
            ir: current_ir(p),
            tactics: p.log.clone(),
            initial: self.initial.clone(),
            reports: p.reports.clone(),
        }
    }
}

/// Loop-form IR of the current state, as a replay would print it.
pub fn current_ir(p: &Partitioner) -> String {
    match p.reports.last() {
        Some(r) => r.ir.clone(),
        None => print_module(&tilepart::nest::fuse_loops(&p.module())),
    }
}

/// Shared server state. Cloning shares the sessions.
#[derive(Clone, Default)]
pub struct AppState {
    inner: Arc<Inner>,
}

#[derive(Default)]
struct Inner {
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    next: AtomicU64,
    dump_dir: Option<PathBuf>,
}

impl AppState {
    /// With `dump_dir`, every applied tactic is also written to
    /// `<dump_dir>/<id>/tactic-NN.{ir,spmd.ir,json}`.
    pub fn new(dump_dir: Option<PathBuf>) -> Self {
        Self {
            inner: Arc::new(Inner {
                dump_dir,
                ..Default::default()
            }),
        }
    }

    fn insert(&self, s: Session) -> String {
        let id = format!("s{}", self.inner.next.fetch_add(1, Ordering::Relaxed) + 1);
        self.inner.sessions.write().unwrap().insert(id.clone(), Arc::new(Mutex::new(s)));
        id
    }

    fn get(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.inner.sessions.read().unwrap().get(id).cloned().ok_or_else(|| ApiError::NotFound(id.to_string()))
    }

    fn dump(&self, id: &str, r: &TacticReport) -> Result<(), ApiError> {
        let Some(root) = &self.inner.dump_dir else { return Ok(()) };
        let dir = root.join(id);
        let stem = format!("tactic-{:02}", r.index + 1);
        let io = |e: std::io::Error| ApiError::Internal(format!("writing dumps to {}: {e}", dir.display()));
        fs::create_dir_all(&dir).map_err(io)?;
        fs::write(dir.join(format!("{stem}.ir")), &r.ir).map_err(io)?;
        fs::write(dir.join(format!("{stem}.spmd.ir")), &r.spmd).map_err(io)?;
        let body = serde_json::to_string_pretty(r).map_err(|e| ApiError::Internal(e.to_string()))? + "\n";
        fs::write(dir.join(format!("{stem}.json")), body).map_err(io)
    }
}

/// Error responses carry `{"error": {"kind", "message", ...}}`.
#[derive(Debug)]
pub enum ApiError {
    /// 400 with extra fields such as `line`, `col` or `diagnostics`.
    BadRequest { kind: &'static str, message: String, extra: Value },
    NotFound(String),
    /// 409: the tactic was rejected and the session is unchanged.
    Conflict(String),
    Internal(String),
}

impl ApiError {
    fn bad(kind: &'static str, message: impl Into<String>) -> Self {
        ApiError::BadRequest {
            kind,
            message: message.into(),
            extra: json!({}),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, mut body) = match self {
            ApiError::BadRequest { kind, message, extra } => {
                let mut b = json!({ "kind": kind, "message": message });
                if let (Some(b), Value::Object(extra)) = (b.as_object_mut(), extra) {
                    b.extend(extra);
                }
                (StatusCode::BAD_REQUEST, b)
            }
            ApiError::NotFound(id) => (StatusCode::NOT_FOUND, json!({ "kind": "not_found", "message": format!("no session `{id}`") })),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, json!({ "kind": "tactic", "message": m })),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "kind": "internal", "message": m })),
        };
        body = json!({ "error": body });
        (status, Json(body)).into_response()
    }
}

fn setup_error(e: ScheduleError) -> ApiError {
    match e {
        ScheduleError::Verify(d) => ApiError::BadRequest {
            kind: "verify",
            message: "module does not verify".into(),
            extra: json!({ "diagnostics": d }),
        },
        ScheduleError::NoMesh => ApiError::bad("mesh", "no mesh in the module and none given"),
        other => ApiError::bad("module", other.to_string()),
    }
}

/// Runs `f` on the session's lock off the async workers.
async fn with_session<T, F>(state: &AppState, id: &str, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&mut Session) -> Result<T, ApiError> + Send + 'static,
{
    let s = state.get(id)?;
    tokio::task::spawn_blocking(move || f(&mut s.lock().unwrap_or_else(|e| e.into_inner())))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

pub fn app(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create).get(list))
        .route("/sessions/{id}", get(show))
        .route("/sessions/{id}/tactics", post(apply))
        .route("/sessions/{id}/tactics/{index}", get(report))
        .route("/sessions/{id}/shardable", get(shardable))
        .route("/sessions/{id}/export", get(export))
        .route("/sessions/{id}/fork", post(fork))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn create(State(st): State<AppState>, Json(req): Json<CreateSession>) -> Result<(StatusCode, Json<Value>), ApiError> {
    let module = parse_module(&req.module).map_err(|e| ApiError::BadRequest {
        kind: "parse",
        message: e.message.clone(),
        extra: json!({ "line": e.line, "col": e.col }),
    })?;
    let mesh = match &req.mesh {
        Some(m) => Some(m.parse::<Mesh>().map_err(|e| ApiError::bad("mesh", e.to_string()))?),
        None => None,
    };
    let spec = match (&req.spec_text, &req.spec) {
        (Some(t), _) => DeviceSpec::parse(t),
        (None, Some(n)) => DeviceSpec::by_name(n),
        (None, None) => Ok(DeviceSpec::tpu_v3_core()),
    }
    .map_err(|e| ApiError::bad("spec", e.to_string()))?;
    let s = tokio::task::spawn_blocking(move || Partitioner::new(&module, mesh, spec).map(Session::new))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(setup_error)?;
    let initial = s.initial.clone();
    let id = st.insert(s);
    Ok((StatusCode::CREATED, Json(json!({ "id": id, "initial": initial }))))
}

async fn list(State(st): State<AppState>) -> Json<Value> {
    let sessions: Vec<_> = st.inner.sessions.read().unwrap().iter().map(|(id, s)| (id.clone(), s.clone())).collect();
    let mut out = Vec::new();
    for (id, s) in sessions {
        let n = s.lock().unwrap_or_else(|e| e.into_inner()).partitioner.log.len();
        out.push(json!({ "id": id, "tactics": n }));
    }
    out.sort_by_key(|v| v["id"].as_str().map(|s| (s.len(), s.to_string())));
    Json(Value::Array(out))
}

async fn show(State(st): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let key = id.clone();
    with_session(&st, &key, move |s| Ok(Json(s.view(&id)))).await
}

async fn apply(State(st): State<AppState>, Path(id): Path<String>, Json(t): Json<Tactic>) -> Result<Json<Value>, ApiError> {
    let r = with_session(&st, &id, move |s| match s.partitioner.apply(&t) {
        Ok(r) => Ok(r.clone()),
        Err(e @ ScheduleError::Tactic { .. }) => Err(ApiError::Conflict(e.to_string())),
        Err(e) => Err(ApiError::Internal(e.to_string())),
    })
    .await?;
    st.dump(&id, &r)?;
    let mut v = serde_json::to_value(&r).map_err(|e| ApiError::Internal(e.to_string()))?;
    v["dump"] = json!(format!("/sessions/{id}/tactics/{}", r.index));
    Ok(Json(v))
}

async fn report(State(st): State<AppState>, Path((id, index)): Path<(String, usize)>) -> Result<Json<TacticReport>, ApiError> {
    with_session(&st, &id, move |s| {
        s.partitioner
            .reports
            .get(index)
            .cloned()
            .map(Json)
            .ok_or_else(|| ApiError::bad("index", format!("no tactic {index}")))
    })
    .await
}

async fn shardable(State(st): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    with_session(&st, &id, |s| Ok(Json(json!(s.partitioner.shardable())))).await
}

async fn export(State(st): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    with_session(&st, &id, |s| {
        let (collectives, cost, dp) = s.partitioner.cost();
        Ok(Json(json!({
            "spmd": print_module(&dp.module),
            "sharding": dp.spec,
            "collectives": collectives,
            "cost": cost,
        })))
    })
    .await
}

async fn fork(State(st): State<AppState>, Path(id): Path<String>, body: Option<Json<Fork>>) -> Result<(StatusCode, Json<Value>), ApiError> {
    let upto = body.and_then(|Json(f)| f.upto);
    let s = with_session(&st, &id, move |s| {
        let p = &s.partitioner;
        let n = upto.unwrap_or(p.log.len());
        if n > p.log.len() {
            return Err(ApiError::bad("upto", format!("session has {} tactic(s), asked for {n}", p.log.len())));
        }
        let mut q = Partitioner::new(&p.base, None, p.spec.clone()).map_err(|e| ApiError::Internal(e.to_string()))?;
        q.fuse = p.fuse.clone();
        for t in &p.log[..n] {
            q.apply(t).map_err(|e| ApiError::Internal(format!("replay: {e}")))?;
        }
        Ok(Session {
            partitioner: q,
            initial: s.initial.clone(),
        })
    })
    .await?;
    let view = s.view("");
    let new_id = st.insert(s);
    Ok((StatusCode::CREATED, Json(json!({ "id": new_id, "tactics": view.tactics.len(), "ir": view.ir }))))
}
