//! HTTP and WebSocket interface.
//!
//! | method | path                      | body                              |
//! |--------|---------------------------|-----------------------------------|
//! | GET    | /state                    |                                   |
//! | POST   | /joints/{n}/reference     | `{"counts": u16}` or `{"si": f64}`|
//! | POST   | /joints/{n}/gains         | any of `{"kp","ki","kd"}`         |
//! | POST   | /home                     |                                   |
//! | POST   | /estop                    |                                   |
//! | POST   | /enable                   |                                   |
//! | GET    | /registers                |                                   |
//! | GET    | /registers/{index}        |                                   |
//! | POST   | /registers/{index}        | `{"value": u32 or "0x.."}`        |
//! | GET    | /telemetry                | WebSocket upgrade                 |
//!
//! Every JSON response carries `tick` and `sim_time_s`. Errors are
//! `{"error": ..}` with 404 for unknown joints or registers, 422 for bad
//! payloads, 409 while homing, 403 for read-only registers, 401 for a
//! missing or wrong token, and 503 if the simulator is gone.

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use edspid_core::regbank::{self, parse_word, RegisterError, RegisterRole};
use edspid_core::{JointId, SimError, Simulator, SpidGains, Tick};
use serde_json::{json, Map, Value};

use crate::driver::SimHandle;
use crate::hub::TelemetryHub;

#[derive(Clone)]
pub struct AppState {
    pub sim: SimHandle,
    pub hub: TelemetryHub,
    pub token: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn homing() -> Self {
        Self::new(StatusCode::CONFLICT, "homing is in progress")
    }
}

impl From<SimError> for ApiError {
    fn from(e: SimError) -> Self {
        let status = match &e {
            SimError::Register(RegisterError::ReadOnly { .. }) => StatusCode::FORBIDDEN,
            SimError::Register(RegisterError::IndexOutOfRange(_)) | SimError::UnknownJoint(_) => {
                StatusCode::NOT_FOUND
            }
            SimError::HomingInProgress => StatusCode::CONFLICT,
            SimError::Map(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

fn envelope(tick: Tick, status: StatusCode, body: Value) -> Response {
    let mut obj = match body {
        Value::Object(m) => m,
        other => {
            let mut m = Map::new();
            m.insert("data".into(), other);
            m
        }
    };
    obj.insert("tick".into(), json!(tick.0));
    obj.insert("sim_time_s".into(), json!(tick.as_secs()));
    (status, Json(Value::Object(obj))).into_response()
}

fn error_response(tick: Tick, e: ApiError) -> Response {
    envelope(tick, e.status, json!({ "error": e.message }))
}

type JobResult = (Tick, Result<Value, ApiError>);

/// Runs `f` on the simulator and wraps its result.
async fn on_sim<F>(state: &AppState, f: F) -> Response
where
    F: FnOnce(&mut Simulator) -> Result<Value, ApiError> + Send + 'static,
{
    match state
        .sim
        .call(move |sim| -> JobResult {
            let out = f(sim);
            (sim.now(), out)
        })
        .await
    {
        Ok((tick, Ok(v))) => envelope(tick, StatusCode::OK, v),
        Ok((tick, Err(e))) => error_response(tick, e),
        Err(gone) => error_response(
            state.sim.tick(),
            ApiError::new(StatusCode::SERVICE_UNAVAILABLE, gone.to_string()),
        ),
    }
}

fn parse_joint(raw: &str) -> Result<JointId, ApiError> {
    raw.parse::<i64>()
        .ok()
        .and_then(|n| JointId::try_from(n).ok())
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown joint {raw:?}")))
}

fn parse_index(raw: &str) -> Result<usize, ApiError> {
    raw.parse::<usize>()
        .ok()
        .filter(|&i| i < regbank::REGISTER_COUNT)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown register {raw:?}")))
}

fn parse_object(body: &Bytes) -> Result<Map<String, Value>, ApiError> {
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ApiError::invalid("body must be a JSON object")),
        Err(e) => Err(ApiError::invalid(format!("invalid JSON: {e}"))),
    }
}

fn as_u16(key: &str, v: &Value) -> Result<u16, ApiError> {
    v.as_u64()
        .and_then(|n| u16::try_from(n).ok())
        .ok_or_else(|| ApiError::invalid(format!("{key} must be an integer in 0-65535")))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceInput {
    Counts(u16),
    Si(f64),
}

pub fn parse_reference(body: &Bytes) -> Result<ReferenceInput, ApiError> {
    let obj = parse_object(body)?;
    if obj.len() != 1 {
        return Err(ApiError::invalid(
            "expected exactly one of \"counts\" or \"si\"",
        ));
    }
    let (key, value) = obj.iter().next().expect("one entry");
    match key.as_str() {
        "counts" => Ok(ReferenceInput::Counts(as_u16("counts", value)?)),
        "si" => value
            .as_f64()
            .filter(|v| v.is_finite())
            .map(ReferenceInput::Si)
            .ok_or_else(|| ApiError::invalid("si must be a finite number")),
        other => Err(ApiError::invalid(format!("unexpected key {other:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GainsPatch {
    pub kp: Option<u16>,
    pub ki: Option<u16>,
    pub kd: Option<u16>,
}

impl GainsPatch {
    pub fn apply(self, g: SpidGains) -> SpidGains {
        SpidGains {
            kp: self.kp.unwrap_or(g.kp),
            ki: self.ki.unwrap_or(g.ki),
            kd: self.kd.unwrap_or(g.kd),
        }
    }
}

pub fn parse_gains(body: &Bytes) -> Result<GainsPatch, ApiError> {
    let obj = parse_object(body)?;
    if obj.is_empty() {
        return Err(ApiError::invalid("expected at least one of kp, ki, kd"));
    }
    let mut patch = GainsPatch::default();
    for (key, value) in &obj {
        let slot = match key.as_str() {
            "kp" => &mut patch.kp,
            "ki" => &mut patch.ki,
            "kd" => &mut patch.kd,
            other => return Err(ApiError::invalid(format!("unexpected key {other:?}"))),
        };
        *slot = Some(as_u16(key, value)?);
    }
    Ok(patch)
}

fn parse_register_value(body: &Bytes) -> Result<u32, ApiError> {
    let obj = parse_object(body)?;
    let bad = || ApiError::invalid("expected {\"value\": u32 or \"0x..\" string}");
    if obj.len() != 1 {
        return Err(bad());
    }
    match obj.get("value") {
        Some(Value::Number(n)) => n.as_u64().and_then(|v| u32::try_from(v).ok()).ok_or_else(bad),
        Some(Value::String(s)) => parse_word(s).ok_or_else(bad),
        _ => Err(bad()),
    }
}

fn not_homing(sim: &Simulator) -> Result<(), ApiError> {
    if sim.is_homing() {
        Err(ApiError::homing())
    } else {
        Ok(())
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

async fn get_state(State(state): State<AppState>) -> Response {
    on_sim(&state, |sim| Ok(to_value(&sim.snapshot()))).await
}

pub fn apply_reference(
    sim: &mut Simulator,
    joint: JointId,
    input: ReferenceInput,
) -> Result<Value, ApiError> {
    not_homing(sim)?;
    let map = sim.config().joint_map.clone();
    let mut warning = None;
    let mut applied_si = None;
    let counts = match input {
        ReferenceInput::Si(si) => {
            let c = map.clamp_reference(joint, si).map_err(|_| {
                ApiError::invalid(format!("{joint} has no SI mapping; send counts"))
            })?;
            if c.clamped {
                warning = Some(format!("{joint} reference {si} SI clamped to {} SI", c.value));
            }
            applied_si = Some(c.value);
            let counts = map.si_to_counts(joint, c.value).map_err(SimError::from)?;
            map.clamp_counts(joint, counts).map_err(SimError::from)?.value
        }
        ReferenceInput::Counts(p) if map.is_mapped(joint) => {
            let c = map.clamp_counts(joint, p).map_err(SimError::from)?;
            if c.clamped {
                warning = Some(format!("{joint} reference {p} counts clamped to {}", c.value));
            }
            c.value
        }
        ReferenceInput::Counts(p) => p,
    };
    sim.set_reference(joint, counts)?;
    Ok(json!({
        "joint": joint.number(),
        "counts": counts,
        "si": applied_si,
        "clamped": warning.is_some(),
        "warning": warning,
    }))
}

async fn post_reference(
    State(state): State<AppState>,
    Path(raw): Path<String>,
    body: Bytes,
) -> Response {
    let parsed = parse_joint(&raw).and_then(|j| Ok((j, parse_reference(&body)?)));
    let (joint, input) = match parsed {
        Ok(v) => v,
        Err(e) => return error_response(state.sim.tick(), e),
    };
    on_sim(&state, move |sim| apply_reference(sim, joint, input)).await
}

async fn post_gains(
    State(state): State<AppState>,
    Path(raw): Path<String>,
    body: Bytes,
) -> Response {
    let parsed = parse_joint(&raw).and_then(|j| Ok((j, parse_gains(&body)?)));
    let (joint, patch) = match parsed {
        Ok(v) => v,
        Err(e) => return error_response(state.sim.tick(), e),
    };
    on_sim(&state, move |sim| {
        not_homing(sim)?;
        let gains = patch.apply(sim.controller(joint).gains());
        sim.set_gains(joint, gains)?;
        Ok(json!({ "joint": joint.number(), "gains": gains }))
    })
    .await
}

async fn post_home(State(state): State<AppState>) -> Response {
    on_sim(&state, |sim| {
        not_homing(sim)?;
        sim.write_word(
            regbank::GLOBAL_CTRL,
            regbank::CTRL_ENABLE | regbank::CTRL_HOME_ALL,
        )?;
        Ok(json!({ "homing": sim.is_homing() }))
    })
    .await
}

async fn post_estop(State(state): State<AppState>) -> Response {
    on_sim(&state, |sim| {
        sim.write_word(regbank::GLOBAL_CTRL, 0)?;
        Ok(json!({ "status": sim.read_word(regbank::STATUS)? }))
    })
    .await
}

async fn post_enable(State(state): State<AppState>) -> Response {
    on_sim(&state, |sim| {
        not_homing(sim)?;
        sim.write_word(regbank::GLOBAL_CTRL, regbank::CTRL_ENABLE)?;
        Ok(json!({ "status": sim.read_word(regbank::STATUS)? }))
    })
    .await
}

fn register_json(sim: &mut Simulator, index: usize) -> Result<Value, ApiError> {
    let value = sim.read_word(index)?;
    let role = RegisterRole::of(index).map_err(SimError::from)?;
    let address = sim.bank().address_of(index).map_err(SimError::from)?;
    Ok(json!({
        "index": index,
        "name": role.name(),
        "address": address,
        "value": value,
        "writable": role.writable(),
    }))
}

async fn get_registers(State(state): State<AppState>) -> Response {
    on_sim(&state, |sim| {
        let regs = (0..regbank::REGISTER_COUNT)
            .map(|i| register_json(sim, i))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(json!({ "registers": regs }))
    })
    .await
}

async fn get_register(State(state): State<AppState>, Path(raw): Path<String>) -> Response {
    let index = match parse_index(&raw) {
        Ok(i) => i,
        Err(e) => return error_response(state.sim.tick(), e),
    };
    on_sim(&state, move |sim| register_json(sim, index)).await
}

async fn post_register(
    State(state): State<AppState>,
    Path(raw): Path<String>,
    body: Bytes,
) -> Response {
    let parsed = parse_index(&raw).and_then(|i| Ok((i, parse_register_value(&body)?)));
    let (index, value) = match parsed {
        Ok(v) => v,
        Err(e) => return error_response(state.sim.tick(), e),
    };
    on_sim(&state, move |sim| {
        not_homing(sim)?;
        sim.write_word(index, value)?;
        register_json(sim, index)
    })
    .await
}

async fn telemetry(State(state): State<AppState>, ws: WebSocketUpgrade) -> Response {
    let rx = state.hub.subscribe();
    ws.on_upgrade(move |socket| stream_telemetry(socket, rx))
}

async fn stream_telemetry(
    mut socket: WebSocket,
    mut rx: tokio::sync::mpsc::Receiver<crate::hub::Frame>,
) {
    loop {
        tokio::select! {
            frame = rx.recv() => {
                let Some(frame) = frame else { break };
                if socket.send(Message::Text(frame.as_ref().into())).await.is_err() {
                    break;
                }
            }
            msg = socket.recv() => {
                match msg {
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => {}
                }
            }
        }
    }
}

fn token_matches(req: &Request, token: &str) -> bool {
    let bearer = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if bearer == Some(token) {
        return true;
    }
    req.uri().query().is_some_and(|q| {
        q.split('&')
            .any(|kv| kv.strip_prefix("token=") == Some(token))
    })
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    match &state.token {
        Some(token) if !token_matches(&req, token) => error_response(
            state.sim.tick(),
            ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid token"),
        ),
        _ => next.run(req).await,
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/state", get(get_state))
        .route("/joints/{n}/reference", post(post_reference))
        .route("/joints/{n}/gains", post(post_gains))
        .route("/home", post(post_home))
        .route("/estop", post(post_estop))
        .route("/enable", post(post_enable))
        .route("/registers", get(get_registers))
        .route("/registers/{index}", get(get_register).post(post_register))
        .route("/telemetry", get(telemetry))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}
