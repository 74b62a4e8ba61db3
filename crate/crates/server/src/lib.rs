//! HTTP/JSON front end for the runtime.
//!
//! Every handler hands its work to a blocking thread: runtime calls may wait
//! on the container engine and must not stall the async executor.

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use aasrt_core::instance::InstanceId;
use aasrt_core::manager::ManagerError;
use aasrt_core::model::{AasId, AssetAdministrationShell, ElementReference, IdShort, Submodel, SubmodelElement, Value};
use aasrt_core::runtime::{Runtime, RuntimeError};
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value as JsonValue};

/// Content type of AASX uploads.
pub const AASX_CONTENT_TYPE: &str = "application/asset-administration-shell-package";

/// Header a service sends to mark its reads as internal. Internal reads never
/// raise Access events.
pub const SERVICE_HEADER: &str = "x-aas-service-id";

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Static bearer token. When set, every route except `/healthz` requires it.
    pub token: Option<String>,
    /// Period of the supervision loop (reaping, timeouts, health polls).
    pub tick_interval: Duration,
    pub body_limit: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            token: None,
            tick_interval: Duration::from_millis(250),
            body_limit: 512 * 1024 * 1024,
        }
    }
}

#[derive(Clone)]
struct AppState {
    runtime: Arc<Runtime>,
}

/// An error rendered as `{"error": code, "message": ..., "details": ...}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    details: Option<JsonValue>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            details: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }
}

impl From<RuntimeError> for ApiError {
    fn from(e: RuntimeError) -> Self {
        let details = match &e {
            RuntimeError::Invalid(report) => serde_json::to_value(&report.findings).ok(),
            RuntimeError::Conflict(ids) => Some(json!(ids)),
            _ => None,
        };
        let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            tracing::error!("request failed: {e}");
        }
        Self {
            status,
            code: e.code(),
            message: e.to_string(),
            details,
        }
    }
}

impl From<ManagerError> for ApiError {
    fn from(e: ManagerError) -> Self {
        RuntimeError::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.code, "message": self.message });
        if let Some(details) = self.details {
            body["details"] = details;
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T, F>(state: &AppState, f: F) -> ApiResult<T>
where
    F: FnOnce(&Runtime) -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    let runtime = state.runtime.clone();
    tokio::task::spawn_blocking(move || f(&runtime))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
}

fn parse_id(raw: &str) -> ApiResult<AasId> {
    AasId::new(raw).map_err(|e| ApiError::bad_request(e.to_string()))
}

fn parse_short(raw: &str) -> ApiResult<IdShort> {
    IdShort::new(raw).map_err(|e| ApiError::bad_request(e.to_string()))
}

fn element_ref(sm: &str, dotted: &str) -> ApiResult<ElementReference> {
    ElementReference::from_dotted(parse_id(sm)?, dotted).map_err(|e| ApiError::bad_request(e.to_string()))
}

fn json_body<T: serde::de::DeserializeOwned>(bytes: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

/// Reads count as external unless they come from a registered service.
fn is_external(rt: &Runtime, headers: &HeaderMap) -> bool {
    let Some(service) = headers.get(SERVICE_HEADER).and_then(|v| v.to_str().ok()) else {
        return true;
    };
    !rt.specs().iter().any(|s| s.binding.spec.service_id.as_str() == service)
}

pub fn router(runtime: Arc<Runtime>, config: &ServerConfig) -> Router {
    let state = AppState { runtime };
    let api = Router::new()
        .route("/shells", get(list_shells).post(create_shell))
        .route("/shells/{aas}", get(get_shell).delete(delete_shell))
        .route("/shells/{aas}/submodels/{sm}", get(shell_get_submodel))
        .route(
            "/shells/{aas}/submodels/{sm}/submodel-elements/{path}",
            get(shell_get_element).patch(shell_patch_element),
        )
        .route("/submodels", get(list_submodels).post(create_submodel))
        .route("/submodels/{sm}", get(get_submodel).delete(delete_submodel))
        .route("/submodels/{sm}/submodel-elements", post(add_root_element))
        .route(
            "/submodels/{sm}/submodel-elements/{path}",
            get(get_element).patch(patch_element).post(add_child_element).delete(delete_element),
        )
        .route("/import", post(import))
        .route("/services", get(list_services))
        .route("/services/{service}/invoke", post(invoke))
        .route("/instances", get(list_instances))
        .route("/instances/{id}", get(get_instance))
        .route("/instances/{id}/stop", post(stop_instance))
        .route("/contexts", get(list_contexts))
        .route("/contexts/gc", post(gc_contexts))
        .route_layer(middleware::from_fn_with_state(config.token.clone(), require_token));
    Router::new()
        .route("/healthz", get(healthz))
        .merge(api)
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such route") })
        .layer(DefaultBodyLimit::max(config.body_limit))
        .with_state(state)
}

async fn require_token(State(token): State<Option<String>>, request: Request, next: Next) -> Response {
    if let Some(expected) = token {
        let presented = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(expected.as_str()) {
            let mut response =
                ApiError::new(StatusCode::UNAUTHORIZED, "Unauthorized", "missing or wrong bearer token").into_response();
            response
                .headers_mut()
                .insert(header::WWW_AUTHENTICATE, header::HeaderValue::from_static("Bearer"));
            return response;
        }
    }
    next.run(request).await
}

async fn healthz() -> Json<JsonValue> {
    Json(json!({ "status": "ok" }))
}

// ---------------------------------------------------------------- shells

async fn list_shells(State(s): State<AppState>) -> ApiResult<impl IntoResponse> {
    blocking(&s, |rt| Ok(Json(rt.manager().list_shells()))).await
}

async fn create_shell(State(s): State<AppState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let shell: AssetAdministrationShell = json_body(&body)?;
    blocking(&s, move |rt| {
        let id = rt.manager().create_shell(shell)?;
        Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
    })
    .await
}

async fn get_shell(State(s): State<AppState>, Path(aas): Path<String>) -> ApiResult<impl IntoResponse> {
    let id = parse_id(&aas)?;
    blocking(&s, move |rt| Ok(Json(rt.manager().get_shell(&id)?))).await
}

async fn delete_shell(State(s): State<AppState>, Path(aas): Path<String>) -> ApiResult<impl IntoResponse> {
    let id = parse_id(&aas)?;
    blocking(&s, move |rt| {
        rt.manager().delete_shell(&id)?;
        Ok(StatusCode::NO_CONTENT)
    })
    .await
}

/// Shell-scoped paths resolve only when the shell references the submodel.
fn check_membership(rt: &Runtime, aas: &AasId, sm: &AasId) -> ApiResult<()> {
    let shell = rt.manager().get_shell(aas)?;
    if shell.submodel_refs.iter().any(|r| &r.submodel_id == sm) {
        Ok(())
    } else {
        Err(ManagerError::UnknownSubmodel(sm.clone()).into())
    }
}

async fn shell_get_submodel(
    State(s): State<AppState>,
    Path((aas, sm)): Path<(String, String)>,
    headers: HeaderMap,
) -> ApiResult<impl IntoResponse> {
    let (aas, sm) = (parse_id(&aas)?, parse_id(&sm)?);
    blocking(&s, move |rt| {
        check_membership(rt, &aas, &sm)?;
        Ok(Json(rt.get_submodel(&sm, is_external(rt, &headers))?))
    })
    .await
}

async fn shell_get_element(
    State(s): State<AppState>,
    Path((aas, sm, path)): Path<(String, String, String)>,
    headers: HeaderMap,
) -> ApiResult<impl IntoResponse> {
    let aas = parse_id(&aas)?;
    let r = element_ref(&sm, &path)?;
    blocking(&s, move |rt| {
        check_membership(rt, &aas, &r.submodel_id)?;
        Ok(Json(rt.get_element(&r, is_external(rt, &headers))?))
    })
    .await
}

async fn shell_patch_element(
    State(s): State<AppState>,
    Path((aas, sm, path)): Path<(String, String, String)>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let aas = parse_id(&aas)?;
    let r = element_ref(&sm, &path)?;
    let value = patch_value(&body, &r)?;
    blocking(&s, move |rt| {
        check_membership(rt, &aas, &r.submodel_id)?;
        Ok(Json(json!({ "version": rt.update_element(&r, value)? })))
    })
    .await
}

// ---------------------------------------------------------------- submodels

async fn list_submodels(State(s): State<AppState>) -> ApiResult<impl IntoResponse> {
    blocking(&s, |rt| Ok(Json(rt.manager().list_submodels()))).await
}

async fn create_submodel(State(s): State<AppState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let sm: Submodel = json_body(&body)?;
    blocking(&s, move |rt| {
        let id = rt.create_submodel(sm)?;
        Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
    })
    .await
}

async fn get_submodel(
    State(s): State<AppState>,
    Path(sm): Path<String>,
    headers: HeaderMap,
) -> ApiResult<impl IntoResponse> {
    let id = parse_id(&sm)?;
    blocking(&s, move |rt| Ok(Json(rt.get_submodel(&id, is_external(rt, &headers))?))).await
}

async fn delete_submodel(State(s): State<AppState>, Path(sm): Path<String>) -> ApiResult<impl IntoResponse> {
    let id = parse_id(&sm)?;
    blocking(&s, move |rt| {
        rt.delete_submodel(&id)?;
        Ok(StatusCode::NO_CONTENT)
    })
    .await
}

async fn get_element(
    State(s): State<AppState>,
    Path((sm, path)): Path<(String, String)>,
    headers: HeaderMap,
) -> ApiResult<impl IntoResponse> {
    let r = element_ref(&sm, &path)?;
    blocking(&s, move |rt| Ok(Json(rt.get_element(&r, is_external(rt, &headers))?))).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ValuePatch {
    value: JsonValue,
}

/// Turns `{"value": <scalar>}` into a value; the manager coerces it to the property's type.
fn patch_value(body: &Bytes, r: &ElementReference) -> ApiResult<Value> {
    let patch: ValuePatch = json_body(body)?;
    let mismatch = |what: &str| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "TypeMismatch",
            format!("{}: value must be a string, number or boolean, got {what}", r.canonical_path()),
        )
    };
    Ok(match patch.value {
        JsonValue::String(s) => Value::String(s),
        JsonValue::Bool(b) => Value::Boolean(b),
        JsonValue::Number(n) => match n.as_i64() {
            Some(i) => Value::Integer(i),
            None => Value::Double(n.as_f64().filter(|f| f.is_finite()).ok_or_else(|| mismatch("a non-finite number"))?),
        },
        JsonValue::Null => return Err(mismatch("null")),
        JsonValue::Array(_) => return Err(mismatch("an array")),
        JsonValue::Object(_) => return Err(mismatch("an object")),
    })
}

async fn patch_element(
    State(s): State<AppState>,
    Path((sm, path)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let r = element_ref(&sm, &path)?;
    let value = patch_value(&body, &r)?;
    blocking(&s, move |rt| Ok(Json(json!({ "version": rt.update_element(&r, value)? })))).await
}

async fn add_root_element(
    State(s): State<AppState>,
    Path(sm): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let parent = ElementReference::submodel(parse_id(&sm)?);
    add_element(s, parent, body).await
}

async fn add_child_element(
    State(s): State<AppState>,
    Path((sm, path)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let parent = element_ref(&sm, &path)?;
    add_element(s, parent, body).await
}

async fn add_element(s: AppState, parent: ElementReference, body: Bytes) -> ApiResult<impl IntoResponse> {
    let element: SubmodelElement = json_body(&body)?;
    blocking(&s, move |rt| {
        let version = rt.add_element(&parent, element)?;
        Ok((StatusCode::CREATED, Json(json!({ "version": version }))))
    })
    .await
}

async fn delete_element(
    State(s): State<AppState>,
    Path((sm, path)): Path<(String, String)>,
) -> ApiResult<impl IntoResponse> {
    let r = element_ref(&sm, &path)?;
    blocking(&s, move |rt| Ok(Json(json!({ "version": rt.remove_element(&r)? })))).await
}

// ---------------------------------------------------------------- import

async fn import(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<impl IntoResponse> {
    let content_type = headers.get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok()).unwrap_or("");
    let accepted = [AASX_CONTENT_TYPE, "application/octet-stream", "application/zip", ""];
    if !accepted.contains(&content_type.split(';').next().unwrap_or("").trim()) {
        return Err(ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "UnsupportedMediaType",
            format!("expected {AASX_CONTENT_TYPE}, got {content_type}"),
        ));
    }
    blocking(&s, move |rt| {
        let report = rt.import_bytes(&body)?;
        Ok((StatusCode::CREATED, Json(report)))
    })
    .await
}

// ---------------------------------------------------------------- services

async fn list_services(State(s): State<AppState>) -> ApiResult<impl IntoResponse> {
    blocking(&s, |rt| Ok(Json(rt.specs()))).await
}

async fn invoke(State(s): State<AppState>, Path(service): Path<String>) -> ApiResult<impl IntoResponse> {
    let service = parse_short(&service)?;
    blocking(&s, move |rt| {
        let receipt = rt.demand(&service)?;
        let body = json!({
            "eventSeq": receipt.event_seq,
            "instanceId": receipt.instance.as_ref().map(|i| &i.instance_id),
            "instance": receipt.instance,
        });
        Ok((StatusCode::ACCEPTED, Json(body)))
    })
    .await
}

async fn list_instances(State(s): State<AppState>) -> ApiResult<impl IntoResponse> {
    blocking(&s, |rt| Ok(Json(rt.instances()))).await
}

async fn get_instance(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    blocking(&s, move |rt| {
        let id = InstanceId(id);
        rt.instance(&id).map(Json).ok_or_else(|| {
            ApiError::new(StatusCode::NOT_FOUND, "UnknownInstance", format!("unknown instance {id}"))
        })
    })
    .await
}

async fn stop_instance(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    blocking(&s, move |rt| Ok(Json(rt.stop_instance(&InstanceId(id))?))).await
}

async fn list_contexts(State(s): State<AppState>) -> ApiResult<impl IntoResponse> {
    blocking(&s, |rt| Ok(Json(rt.context_store().list_all()))).await
}

async fn gc_contexts(State(s): State<AppState>) -> ApiResult<impl IntoResponse> {
    blocking(&s, |rt| Ok(Json(json!({ "removed": rt.gc_contexts()? })))).await
}

/// Runs supervision ticks until the returned handle is aborted.
pub fn spawn_supervisor(runtime: Arc<Runtime>, interval: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut ticker = tokio::time::interval(interval);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            ticker.tick().await;
            let rt = runtime.clone();
            if let Err(e) = tokio::task::spawn_blocking(move || rt.supervision_tick()).await {
                tracing::error!("supervision tick panicked: {e}");
            }
        }
    })
}

/// Serves until `shutdown` resolves, then stops every running instance with
/// `OperatorStop` before returning.
pub async fn serve(
    listener: tokio::net::TcpListener,
    runtime: Arc<Runtime>,
    config: ServerConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let supervisor = spawn_supervisor(runtime.clone(), config.tick_interval);
    let app = router(runtime.clone(), &config);
    let result = axum::serve(listener, app).with_graceful_shutdown(shutdown).await;
    supervisor.abort();
    let stopped = tokio::task::spawn_blocking(move || runtime.shutdown())
        .await
        .map_err(std::io::Error::other)?;
    tracing::info!(instances = stopped.len(), "stopped running instances");
    result
}
