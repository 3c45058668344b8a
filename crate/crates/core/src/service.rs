//! The HTTP API as a transport-independent request handler.
//!
//! [`Service::handle`] maps an [`ApiRequest`] to an [`ApiResponse`]; any HTTP
//! server can sit in front of it. Generations run on a background worker, one
//! at a time in submission order, and are polled through `/api/jobs/{id}`.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, RwLock, RwLockReadGuard, RwLockWriteGuard};
use std::thread;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dsl::{expression_id, parse_bend_expression, DslError};
use crate::featureviz::{CaptureSidecar, NormalizeMode, ReductionSpec, VizError};
use crate::graph::{Component, LayerPath, ModuleKind};
use crate::hooks::{BendSpec, CapturePhase, CaptureRequest, HookError, StepSchedule};
use crate::pipeline::{ConditioningEdit, GenerationParams, PipelineError, PipelineHandle, RunReport};
use crate::recipe::{parse_recipe, serialize_recipe, RecipeError};
use crate::session::{Session, SessionError};

pub const DEFAULT_PORT: u16 = 8688;
pub const PORT_ENV: &str = "BENDLAB_PORT";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiRequest {
    pub method: String,
    pub path: String,
    pub query: BTreeMap<String, String>,
    pub body: Vec<u8>,
}

impl ApiRequest {
    pub fn new(method: &str, path: &str) -> Self {
        Self {
            method: method.to_ascii_uppercase(),
            path: path.to_owned(),
            query: BTreeMap::new(),
            body: Vec::new(),
        }
    }

    pub fn get(path: &str) -> Self {
        Self::new("GET", path)
    }

    pub fn post(path: &str, body: impl Into<Vec<u8>>) -> Self {
        Self::new("POST", path).with_body(body)
    }

    pub fn put(path: &str, body: impl Into<Vec<u8>>) -> Self {
        Self::new("PUT", path).with_body(body)
    }

    pub fn delete(path: &str) -> Self {
        Self::new("DELETE", path)
    }

    pub fn with_query(mut self, key: &str, value: &str) -> Self {
        self.query.insert(key.into(), value.into());
        self
    }

    pub fn with_body(mut self, body: impl Into<Vec<u8>>) -> Self {
        self.body = body.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiResponse {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

impl ApiResponse {
    fn json(status: u16, value: &impl Serialize) -> Self {
        Self {
            status,
            content_type: "application/json",
            body: serde_json::to_vec(value).expect("response values serialize"),
        }
    }

    fn png(bytes: Vec<u8>) -> Self {
        Self {
            status: 200,
            content_type: "image/png",
            body: bytes,
        }
    }

    /// Body parsed as JSON (`Value::Null` if it is not JSON).
    pub fn json_body(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or(Value::Null)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: u16, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.into(),
            message: message.into(),
        }
    }

    fn into_response(self) -> ApiResponse {
        ApiResponse::json(self.status, &json!({ "error": self }))
    }
}

impl From<HookError> for ApiError {
    fn from(e: HookError) -> Self {
        let (status, code) = match &e {
            HookError::PathNotFound(_) => (404, "path_not_found"),
            HookError::NotBendable { .. } => (400, "not_bendable"),
            HookError::NoMatch { .. } => (404, "no_match"),
            HookError::DuplicateId(_) => (409, "duplicate_id"),
            HookError::UnknownHandle { .. } => (404, "unknown_handle"),
            HookError::MissingComponent(_) => (404, "unknown_component"),
            HookError::NonFinite { .. } => (422, "non_finite_output"),
            HookError::Operator { .. } => (422, "operator_error"),
            HookError::OutOfOrderStep { .. } | HookError::StepOutOfRange { .. } => (500, "sampler_error"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let (status, code) = match &e {
            PipelineError::Hook(h) => return h.clone().into(),
            PipelineError::ConcurrentGeneration => (409, "busy"),
            PipelineError::InvalidParams(_) => (400, "invalid_params"),
            PipelineError::InvalidEdit(_) => (400, "invalid_edit"),
            PipelineError::ShapeMismatch { .. } => (400, "shape_mismatch"),
            PipelineError::NonFiniteOutput { .. } => (422, "non_finite_output"),
            PipelineError::Adapter(_) => (500, "adapter_error"),
            PipelineError::Viz(_) => (400, "visualization_error"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<RecipeError> for ApiError {
    fn from(e: RecipeError) -> Self {
        let code = match e {
            RecipeError::Schema { .. } => "schema_error",
            RecipeError::Version { .. } => "version_error",
        };
        ApiError::new(400, code, e.to_string())
    }
}

impl From<DslError> for ApiError {
    fn from(e: DslError) -> Self {
        let code = match e {
            DslError::Parse { .. } => "parse_error",
            DslError::UnknownOperator { .. } => "unknown_operator",
            DslError::BadParamValue { .. } => "bad_param_value",
            DslError::Unformattable(_) => "parse_error",
        };
        ApiError::new(400, code, e.to_string())
    }
}

impl From<VizError> for ApiError {
    fn from(e: VizError) -> Self {
        let code = match e {
            VizError::ChannelOutOfRange { .. } => "channel_out_of_range",
            VizError::NonFiniteInput => "non_finite_input",
            _ => "visualization_error",
        };
        ApiError::new(400, code, e.to_string())
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Hook(h) => h.into(),
            SessionError::Pipeline(p) => p.into(),
            SessionError::Recipe(r) => r.into(),
            SessionError::Viz(v) => v.into(),
            SessionError::UnknownBend(_) => ApiError::new(404, "unknown_bend", e.to_string()),
            SessionError::UnknownEdit(_) => ApiError::new(404, "unknown_edit", e.to_string()),
            SessionError::UnknownComponent(_) => ApiError::new(400, "unknown_component", e.to_string()),
            SessionError::EmptyCapture => ApiError::new(400, "empty_capture", e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_finished(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub status: JobStatus,
    pub params: GenerationParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<RunReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiError>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_url: Option<String>,
}

#[derive(Default)]
struct JobTable {
    jobs: BTreeMap<String, Job>,
    order: Vec<String>,
    queue: VecDeque<String>,
    next_id: u64,
    images: HashMap<String, Vec<u8>>,
}

struct StoredCapture {
    png: Vec<u8>,
    meta: Value,
}

#[derive(Default)]
struct Stores {
    captures: HashMap<String, StoredCapture>,
    next_capture: u64,
    removed_bends: HashSet<String>,
}

struct Inner {
    session: RwLock<Session>,
    jobs: Mutex<JobTable>,
    job_events: Condvar,
    stores: Mutex<Stores>,
    shutdown: AtomicBool,
}

impl Inner {
    fn session(&self) -> RwLockReadGuard<'_, Session> {
        self.session.read().unwrap_or_else(|p| p.into_inner())
    }

    fn session_mut(&self) -> RwLockWriteGuard<'_, Session> {
        self.session.write().unwrap_or_else(|p| p.into_inner())
    }

    fn jobs(&self) -> MutexGuard<'_, JobTable> {
        self.jobs.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn stores(&self) -> MutexGuard<'_, Stores> {
        self.stores.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// One session behind the API, with its job worker.
pub struct Service {
    inner: Arc<Inner>,
}

impl Drop for Service {
    fn drop(&mut self) {
        self.inner.shutdown.store(true, Ordering::Release);
        self.inner.job_events.notify_all();
    }
}

fn worker(inner: Arc<Inner>) {
    loop {
        let (id, params) = {
            let mut table = inner.jobs();
            loop {
                if inner.shutdown.load(Ordering::Acquire) {
                    return;
                }
                if let Some(id) = table.queue.pop_front() {
                    let job = table.jobs.get_mut(&id).expect("queued jobs exist");
                    job.status = JobStatus::Running;
                    break (id, job.params.clone());
                }
                table = inner.job_events.wait(table).unwrap_or_else(|p| p.into_inner());
            }
        };
        inner.job_events.notify_all();

        let result = inner.session().generate(&params);

        let mut table = inner.jobs();
        match result {
            Ok(out) => {
                table.images.insert(id.clone(), out.png);
                let job = table.jobs.get_mut(&id).expect("running job exists");
                job.status = JobStatus::Done;
                job.report = Some(out.report);
                job.image_url = Some(format!("/api/images/{id}.png"));
            }
            Err(e) => {
                let job = table.jobs.get_mut(&id).expect("running job exists");
                job.status = JobStatus::Failed;
                job.error = Some(e.into());
            }
        }
        drop(table);
        inner.job_events.notify_all();
    }
}

fn parse_json<T: DeserializeOwned>(value: Value) -> Result<T, ApiError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let at = e.path().to_string();
        ApiError::new(400, "schema_error", format!("at {at}: {}", e.into_inner()))
    })
}

fn body_value(body: &[u8]) -> Result<Value, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(400, "schema_error", format!("invalid JSON body: {e}")))
}

/// Overlay a partial JSON object onto `base`.
fn merge_params(base: &GenerationParams, overlay: Option<Value>) -> Result<GenerationParams, ApiError> {
    let mut merged = serde_json::to_value(base).expect("params serialize");
    match overlay {
        None | Some(Value::Null) => {}
        Some(Value::Object(fields)) => {
            let target = merged.as_object_mut().expect("params are an object");
            for (k, v) in fields {
                target.insert(k, v);
            }
        }
        Some(_) => return Err(ApiError::new(400, "schema_error", "generation parameters must be an object")),
    }
    let params: GenerationParams = parse_json(merged)?;
    params.validate()?;
    Ok(params)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptureBody {
    #[serde(default)]
    component: Option<Component>,
    path: LayerPath,
    #[serde(default)]
    steps: StepSchedule,
    #[serde(default = "default_phase")]
    phase: CapturePhase,
    #[serde(default)]
    reduction: ReductionSpec,
    #[serde(default)]
    normalize: NormalizeMode,
    #[serde(default)]
    columns: Option<usize>,
    #[serde(default)]
    generation: Option<Value>,
}

fn default_phase() -> CapturePhase {
    CapturePhase::PostBend
}

fn component_query(req: &ApiRequest) -> Result<Component, ApiError> {
    match req.query.get("component") {
        None => Ok(Component::Unet),
        Some(c) => Component::parse(c)
            .ok_or_else(|| ApiError::new(400, "bad_request", format!("unknown component `{c}`"))),
    }
}

fn png_id(file: &str) -> Option<&str> {
    file.strip_suffix(".png")
}

impl Service {
    pub fn new(pipeline: PipelineHandle) -> Self {
        Self::with_session(Session::new(pipeline))
    }

    pub fn with_session(session: Session) -> Self {
        let inner = Arc::new(Inner {
            session: RwLock::new(session),
            jobs: Mutex::new(JobTable::default()),
            job_events: Condvar::new(),
            stores: Mutex::new(Stores::default()),
            shutdown: AtomicBool::new(false),
        });
        let worker_inner = Arc::clone(&inner);
        thread::Builder::new()
            .name("bendlab-jobs".into())
            .spawn(move || worker(worker_inner))
            .expect("spawn job worker");
        Self { inner }
    }

    /// Queue a generation regardless of what is already queued.
    pub fn enqueue(&self, params: GenerationParams) -> String {
        let mut table = self.inner.jobs();
        table.next_id += 1;
        let id = format!("j{}", table.next_id);
        table.jobs.insert(
            id.clone(),
            Job {
                id: id.clone(),
                status: JobStatus::Queued,
                params,
                report: None,
                error: None,
                image_url: None,
            },
        );
        table.order.push(id.clone());
        table.queue.push_back(id.clone());
        drop(table);
        self.inner.job_events.notify_all();
        id
    }

    pub fn job(&self, id: &str) -> Option<Job> {
        self.inner.jobs().jobs.get(id).cloned()
    }

    /// Job ids in submission order.
    pub fn job_ids(&self) -> Vec<String> {
        self.inner.jobs().order.clone()
    }

    pub fn image(&self, job_id: &str) -> Option<Vec<u8>> {
        self.inner.jobs().images.get(job_id).cloned()
    }

    /// Block until the job finishes or `timeout` passes.
    pub fn wait_for_job(&self, id: &str, timeout: Duration) -> Option<Job> {
        let deadline = Instant::now() + timeout;
        let mut table = self.inner.jobs();
        loop {
            let job = table.jobs.get(id)?.clone();
            if job.status.is_finished() {
                return Some(job);
            }
            let now = Instant::now();
            if now >= deadline {
                return Some(job);
            }
            table = self
                .inner
                .job_events
                .wait_timeout(table, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    fn has_pending_job(&self) -> bool {
        self.inner
            .jobs()
            .jobs
            .values()
            .any(|j| matches!(j.status, JobStatus::Queued | JobStatus::Running))
    }

    pub fn handle(&self, req: &ApiRequest) -> ApiResponse {
        match self.route(req) {
            Ok(resp) => resp,
            Err(e) => e.into_response(),
        }
    }

    fn route(&self, req: &ApiRequest) -> Result<ApiResponse, ApiError> {
        let segments: Vec<&str> = req.path.trim_matches('/').split('/').collect();
        match (req.method.as_str(), segments.as_slice()) {
            ("GET", ["api", "model", "tree"]) => self.get_tree(req),
            ("GET", ["api", "model", "layers"]) => self.get_layers(req),
            ("GET", ["api", "bends"]) => Ok(self.list_bends()),
            ("POST", ["api", "bends"]) => self.install_bend(&req.body),
            ("DELETE", ["api", "bends", id]) => self.remove_bend(id),
            ("POST", ["api", "generate"]) => self.submit_generation(&req.body),
            ("GET", ["api", "jobs"]) => {
                let table = self.inner.jobs();
                let jobs: Vec<&Job> = table.order.iter().map(|id| &table.jobs[id]).collect();
                Ok(ApiResponse::json(200, &json!({ "jobs": jobs })))
            }
            ("GET", ["api", "jobs", id]) => self
                .job(id)
                .map(|j| ApiResponse::json(200, &j))
                .ok_or_else(|| ApiError::new(404, "unknown_job", format!("no job `{id}`"))),
            ("GET", ["api", "images", file]) => {
                let id = png_id(file).ok_or_else(|| ApiError::new(404, "not_found", "images are served as .png"))?;
                self.image(id)
                    .map(ApiResponse::png)
                    .ok_or_else(|| ApiError::new(404, "unknown_image", format!("no image for job `{id}`")))
            }
            ("POST", ["api", "captures"]) => self.capture(&req.body),
            ("GET", ["api", "captures", file]) => {
                let stores = self.inner.stores();
                let unknown = || ApiError::new(404, "unknown_capture", format!("no capture `{file}`"));
                match png_id(file) {
                    Some(id) => Ok(ApiResponse::png(stores.captures.get(id).ok_or_else(unknown)?.png.clone())),
                    None => Ok(ApiResponse::json(200, &stores.captures.get(*file).ok_or_else(unknown)?.meta)),
                }
            }
            ("GET", ["api", "recipe"]) => {
                let text = serialize_recipe(&self.inner.session().export_recipe());
                Ok(ApiResponse {
                    status: 200,
                    content_type: "application/json",
                    body: text.into_bytes(),
                })
            }
            ("PUT", ["api", "recipe"]) => self.import_recipe(&req.body),
            ("GET", ["api", "conditioning_edits"]) => {
                let session = self.inner.session();
                Ok(ApiResponse::json(200, &json!({ "edits": session.conditioning_edits() })))
            }
            ("POST", ["api", "conditioning_edits"]) => {
                let edit: ConditioningEdit = parse_json(body_value(&req.body)?)?;
                let id = self.inner.session_mut().add_conditioning_edit(edit)?;
                Ok(ApiResponse::json(201, &json!({ "id": id })))
            }
            ("DELETE", ["api", "conditioning_edits", id]) => {
                self.inner.session_mut().remove_conditioning_edit(id)?;
                Ok(ApiResponse::json(200, &json!({ "id": id, "removed": true })))
            }
            (
                _,
                ["api", "model", "tree" | "layers"]
                | ["api", "bends" | "jobs" | "recipe" | "captures" | "generate" | "conditioning_edits"]
                | ["api", "bends" | "jobs" | "images" | "captures" | "conditioning_edits", _],
            ) => Err(ApiError::new(405, "method_not_allowed", format!("{} {}", req.method, req.path))),
            _ => Err(ApiError::new(404, "not_found", format!("no route for {}", req.path))),
        }
    }

    fn get_tree(&self, req: &ApiRequest) -> Result<ApiResponse, ApiError> {
        let component = component_query(req)?;
        let session = self.inner.session();
        let tree = session.tree(component)?;
        Ok(ApiResponse::json(200, tree))
    }

    fn get_layers(&self, req: &ApiRequest) -> Result<ApiResponse, ApiError> {
        let component = component_query(req)?;
        let kind = match req.query.get("kind") {
            None => None,
            Some(k) => Some(
                ModuleKind::parse(k).ok_or_else(|| ApiError::new(400, "bad_request", format!("unknown kind `{k}`")))?,
            ),
        };
        let session = self.inner.session();
        let tree = session.tree(component)?;
        let layers: Vec<Value> = tree
            .bendable_layers(kind)
            .into_iter()
            .map(|p| {
                let kind = tree.resolve(&p).map(|n| n.kind().as_str()).unwrap_or("other");
                json!({ "path": p.to_string(), "kind": kind })
            })
            .collect();
        Ok(ApiResponse::json(200, &json!({ "component": component, "layers": layers })))
    }

    fn list_bends(&self) -> ApiResponse {
        let session = self.inner.session();
        let bends: Vec<Value> = session
            .bends()
            .iter()
            .map(|b| json!({ "id": b.spec.id, "handle": b.handle, "spec": b.spec, "targets": b.resolved }))
            .collect();
        ApiResponse::json(200, &json!({ "bends": bends }))
    }

    fn install_bend(&self, body: &[u8]) -> Result<ApiResponse, ApiError> {
        let value = body_value(body)?;
        let spec = match value.get("expr") {
            Some(expr) => {
                if value.as_object().is_some_and(|o| o.len() > 1) {
                    return Err(ApiError::new(400, "schema_error", "`expr` cannot be combined with other fields"));
                }
                let text = expr
                    .as_str()
                    .ok_or_else(|| ApiError::new(400, "schema_error", "`expr` must be a string"))?;
                parse_bend_expression(text)?
            }
            None => {
                let Value::Object(mut obj) = value else {
                    return Err(ApiError::new(400, "schema_error", "bend body must be an object"));
                };
                obj.entry("schedule").or_insert_with(|| json!({ "ranges": [] }));
                obj.entry("enabled").or_insert(Value::Bool(true));
                if !obj.contains_key("id") {
                    let canonical = Value::Object(obj.clone()).to_string();
                    obj.insert("id".into(), Value::String(expression_id(&canonical)));
                }
                parse_json::<BendSpec>(Value::Object(obj))?
            }
        };
        let mut session = self.inner.session_mut();
        let handle = session.install(spec.clone())?;
        self.inner.stores().removed_bends.remove(&spec.id);
        let targets = &session.bends().last().expect("just installed").resolved;
        Ok(ApiResponse::json(
            201,
            &json!({ "id": spec.id, "handle": handle, "targets": targets }),
        ))
    }

    fn remove_bend(&self, id: &str) -> Result<ApiResponse, ApiError> {
        let mut session = self.inner.session_mut();
        match session.remove_by_id(id) {
            Ok(handle) => {
                self.inner.stores().removed_bends.insert(id.to_owned());
                Ok(ApiResponse::json(200, &json!({ "id": id, "handle": handle, "removed": true })))
            }
            Err(SessionError::UnknownBend(_)) if self.inner.stores().removed_bends.contains(id) => Ok(
                ApiResponse::json(200, &json!({ "id": id, "removed": false, "already_removed": true })),
            ),
            Err(e) => Err(e.into()),
        }
    }

    fn submit_generation(&self, body: &[u8]) -> Result<ApiResponse, ApiError> {
        let overlay = if body.iter().all(u8::is_ascii_whitespace) {
            None
        } else {
            Some(body_value(body)?)
        };
        let params = merge_params(&self.inner.session().generation_params(), overlay)?;
        if self.has_pending_job() {
            return Err(ApiError::new(409, "busy", "a generation is already queued or running"));
        }
        let id = self.enqueue(params);
        Ok(ApiResponse::json(202, &json!({ "job_id": id, "status": JobStatus::Queued })))
    }

    fn capture(&self, body: &[u8]) -> Result<ApiResponse, ApiError> {
        let body: CaptureBody = parse_json(body_value(body)?)?;
        let session = self.inner.session();
        let component = match body.component {
            Some(c) => c,
            None => session
                .component_of(&body.path)
                .ok_or_else(|| ApiError::from(SessionError::UnknownComponent(body.path.to_string())))?,
        };
        let params = merge_params(&session.generation_params(), body.generation)?;
        let request = CaptureRequest::new(component, body.path, body.phase).with_steps(body.steps);
        let grid = session.capture_grid(&params, request, body.reduction, body.normalize, body.columns)?;
        drop(session);

        let mut stores = self.inner.stores();
        stores.next_capture += 1;
        let id = format!("c{}", stores.next_capture);
        let tiles: Vec<CaptureSidecar> = grid.tiles;
        let meta = json!({
            "capture_id": id,
            "image_url": format!("/api/captures/{id}.png"),
            "component": component,
            "tiles": tiles,
            "report": grid.output.report,
        });
        stores.captures.insert(
            id,
            StoredCapture {
                png: grid.png,
                meta: meta.clone(),
            },
        );
        Ok(ApiResponse::json(201, &meta))
    }

    fn import_recipe(&self, body: &[u8]) -> Result<ApiResponse, ApiError> {
        let text = std::str::from_utf8(body).map_err(|_| ApiError::new(400, "schema_error", "recipe is not UTF-8"))?;
        let recipe = parse_recipe(text)?;
        let mut session = self.inner.session_mut();
        let old: Vec<String> = session.bends().iter().map(|b| b.spec.id.clone()).collect();
        let handles = session.import_recipe(&recipe)?;
        let mut stores = self.inner.stores();
        for id in old {
            if !recipe.bends.iter().any(|b| b.id == id) {
                stores.removed_bends.insert(id);
            }
        }
        Ok(ApiResponse::json(200, &json!({ "handles": handles })))
    }
}
