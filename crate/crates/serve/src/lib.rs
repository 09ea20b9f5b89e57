//! JSON chat service over trained snapshots.

pub mod error;
pub mod session;
pub mod snapshots;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use phredgan::checkpoint::Snapshot;
use phredgan::corpus::{tokenize, EOS};
use phredgan::inference::{generate, ContextTurn, GenerateRequest, GenerationCandidate};
use serde::{Deserialize, Serialize};

pub use error::{ApiError, ErrorBody};
pub use session::{ChatSession, TranscriptLog, TranscriptTurn};
pub use snapshots::{SnapshotInfo, SnapshotRegistry};

pub const DEFAULT_CANDIDATES: usize = 8;
pub const MAX_CANDIDATES: usize = 64;

/// Where generation noise seeds come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedMode {
    /// Seed derived from the base seed and the transcript length.
    Fixed(u64),
    /// Fresh random seed per request.
    Entropy,
}

impl FromStr for SeedMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fixed" => Ok(SeedMode::Fixed(0)),
            "entropy" => Ok(SeedMode::Entropy),
            _ => Err(format!("unknown seed mode `{s}`; expected fixed or entropy")),
        }
    }
}

impl SeedMode {
    pub fn seed(self, history_len: usize) -> u64 {
        match self {
            SeedMode::Fixed(base) => fixed_seed(base, history_len),
            SeedMode::Entropy => rand::random(),
        }
    }
}

/// Seed used in fixed mode for a request made when the transcript holds
/// `history_len` turns.
pub fn fixed_seed(base: u64, history_len: usize) -> u64 {
    base ^ (history_len as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub snapshot_dir: PathBuf,
    pub persist: Option<PathBuf>,
    pub seed_mode: SeedMode,
    /// Static files served under `/ui`.
    pub ui_dir: Option<PathBuf>,
}

pub struct AppState {
    pub snapshots: SnapshotRegistry,
    sessions: RwLock<HashMap<String, Arc<Mutex<ChatSession>>>>,
    log: Option<TranscriptLog>,
    seed_mode: SeedMode,
}

impl AppState {
    pub fn new(config: &ServeConfig) -> std::io::Result<Self> {
        Ok(Self {
            snapshots: SnapshotRegistry::new(&config.snapshot_dir),
            sessions: RwLock::new(HashMap::new()),
            log: config.persist.as_ref().map(TranscriptLog::new).transpose()?,
            seed_mode: config.seed_mode,
        })
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<ChatSession>>, ApiError> {
        self.sessions
            .read()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown session `{id}`")))
    }

    fn snapshot_for(&self, session: &ChatSession) -> Result<Arc<Snapshot>, ApiError> {
        self.snapshots
            .get(&session.snapshot_id)
            .ok_or_else(|| ApiError::Conflict(format!("snapshot `{}` is not loaded", session.snapshot_id)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub snapshot_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessageRequest {
    pub speaker: String,
    pub text: String,
    pub respond_as: String,
    #[serde(default)]
    pub num_candidates: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageResponse {
    pub responses: Vec<ScoredResponse>,
    pub ranked: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfRequest {
    #[serde(default)]
    pub text: Option<String>,
    /// Speaker of `text`; defaults to the first label that did not speak last.
    #[serde(default)]
    pub speaker: Option<String>,
    #[serde(default)]
    pub num_candidates: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub per_attribute: BTreeMap<String, ScoredResponse>,
}

fn attribute(snap: &Snapshot, label: &str) -> Result<usize, ApiError> {
    snap.attributes.get(label).map_err(|_| {
        ApiError::BadRequest(format!("unknown attribute `{label}`; known: {}", snap.attributes.labels().join(", ")))
    })
}

fn candidates(n: Option<usize>) -> Result<usize, ApiError> {
    let n = n.unwrap_or(DEFAULT_CANDIDATES);
    if n == 0 || n > MAX_CANDIDATES {
        return Err(ApiError::BadRequest(format!("num_candidates must be between 1 and {MAX_CANDIDATES}, got {n}")));
    }
    Ok(n)
}

fn encode(snap: &Snapshot, text: &str) -> Vec<usize> {
    tokenize(text).iter().map(|w| snap.vocab.encode(w)).collect()
}

/// Response text of a candidate, without the end token.
pub fn candidate_text(snap: &Snapshot, c: &GenerationCandidate) -> String {
    let words: Vec<usize> = c.tokens.iter().copied().filter(|&t| t != EOS).collect();
    snap.vocab.detokenize(&words)
}

/// Model context for a transcript: every turn becomes a context utterance.
pub fn context_of(snap: &Snapshot, turns: &[TranscriptTurn]) -> Result<Vec<ContextTurn>, ApiError> {
    turns
        .iter()
        .map(|t| Ok(ContextTurn { attribute: attribute(snap, &t.speaker)?, tokens: encode(snap, &t.text) }))
        .collect()
}

fn run_generate(snap: &Snapshot, context: Vec<ContextTurn>, target: usize, n: usize, seed: u64) -> Result<Vec<GenerationCandidate>, ApiError> {
    let req = GenerateRequest { context, target, num_candidates: n, max_len: None, alpha: None, seed };
    generate(&snap.model, &req).map_err(|e| ApiError::Internal(format!("generation failed: {e}")))
}

fn body_of<T>(body: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    body.map(|Json(v)| v).map_err(|e| ApiError::BadRequest(e.body_text()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
}

async fn list_snapshots(State(state): State<Arc<AppState>>) -> Result<Json<Vec<SnapshotInfo>>, ApiError> {
    blocking(move || state.snapshots.list()).await.map(Json)
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let req = body_of(body)?;
    let snap = {
        let state = state.clone();
        let id = req.snapshot_id.clone();
        blocking(move || state.snapshots.load(&id)).await?
    };
    let session_id = uuid::Uuid::new_v4().simple().to_string();
    let session = ChatSession::new(session_id.clone(), req.snapshot_id);
    state.sessions.write().expect("session table lock").insert(session_id.clone(), Arc::new(Mutex::new(session)));
    log::info!("session {session_id} on {}", snap.model.variant());
    Ok((StatusCode::CREATED, Json(SessionCreated { session_id, attributes: snap.attributes.labels().to_vec() })))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<ChatSession>, ApiError> {
    let session = state.session(&id)?;
    let s = session.lock().expect("session lock").clone();
    Ok(Json(s))
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<MessageRequest>, JsonRejection>,
) -> Result<Json<MessageResponse>, ApiError> {
    let req = body_of(body)?;
    let session = state.session(&id)?;
    blocking(move || {
        let mut s = session.lock().expect("session lock");
        let snap = state.snapshot_for(&s)?;
        attribute(&snap, &req.speaker)?;
        let target = attribute(&snap, &req.respond_as)?;
        let n = candidates(req.num_candidates)?;
        if tokenize(&req.text).is_empty() {
            return Err(ApiError::BadRequest("text is empty".into()));
        }
        let user = TranscriptTurn { speaker: req.speaker, text: req.text };
        let mut history = s.turns.clone();
        history.push(user.clone());
        let seed = state.seed_mode.seed(s.turns.len());
        let cands = run_generate(&snap, context_of(&snap, &history)?, target, n, seed)?;
        let responses: Vec<ScoredResponse> =
            cands.iter().map(|c| ScoredResponse { text: candidate_text(&snap, c), score: c.rank_score }).collect();
        let reply = TranscriptTurn { speaker: req.respond_as, text: responses[0].text.clone() };
        if let Some(log) = &state.log {
            log.append(&s.session_id, &[user.clone(), reply.clone()])
                .map_err(|e| ApiError::Internal(format!("cannot persist transcript: {e}")))?;
        }
        s.turns.push(user);
        s.turns.push(reply);
        Ok(MessageResponse { responses, ranked: true })
    })
    .await
    .map(Json)
}

async fn post_whatif(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<WhatIfRequest>, JsonRejection>,
) -> Result<Json<WhatIfResponse>, ApiError> {
    let req = body_of(body)?;
    let session = state.session(&id)?;
    blocking(move || {
        let s = session.lock().expect("session lock");
        let snap = state.snapshot_for(&s)?;
        let n = candidates(req.num_candidates)?;
        let mut history = s.turns.clone();
        let seed = state.seed_mode.seed(history.len());
        drop(s);
        if let Some(text) = req.text.filter(|t| !tokenize(t).is_empty()) {
            let speaker = match req.speaker {
                Some(label) => {
                    attribute(&snap, &label)?;
                    label
                }
                None => {
                    let last = history.last().map(|t| t.speaker.as_str());
                    let labels = snap.attributes.labels();
                    labels.iter().find(|l| Some(l.as_str()) != last).unwrap_or(&labels[0]).clone()
                }
            };
            history.push(TranscriptTurn { speaker, text });
        }
        if history.is_empty() {
            return Err(ApiError::BadRequest("session is empty and no text was given".into()));
        }
        let context = context_of(&snap, &history)?;
        let mut per_attribute = BTreeMap::new();
        for (k, label) in snap.attributes.labels().iter().enumerate() {
            let cands = run_generate(&snap, context.clone(), k, n, seed)?;
            let top = &cands[0];
            per_attribute.insert(label.clone(), ScoredResponse { text: candidate_text(&snap, top), score: top.rank_score });
        }
        Ok(WhatIfResponse { per_attribute })
    })
    .await
    .map(Json)
}

pub fn router(state: Arc<AppState>, ui_dir: Option<&std::path::Path>) -> Router {
    let mut app = Router::new()
        .route("/v1/snapshots", get(list_snapshots))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/message", post(post_message))
        .route("/v1/sessions/{id}/whatif", post(post_whatif))
        .with_state(state);
    if let Some(dir) = ui_dir {
        app = app.nest_service("/ui", tower_http::services::ServeDir::new(dir));
    }
    app
}

/// Serves until the process is stopped.
pub async fn serve(config: ServeConfig, addr: SocketAddr) -> std::io::Result<()> {
    let state = Arc::new(AppState::new(&config)?);
    let app = router(state, config.ui_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await
}
