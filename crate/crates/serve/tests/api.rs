use std::path::Path;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use phredgan::checkpoint::Snapshot;
use phredgan::config::{ModelConfig, NoiseMode, TrainConfig, Variant};
use phredgan::corpus::{encode_raw, generate_synthetic_persona_corpus, tokenize, SynthOptions, Vocabulary};
use phredgan::inference::rank_score;
use phredgan::model::PhredModel;
use phredgan::training::{train, TrainOutputs};
use phredgan_serve::{context_of, fixed_seed, router, AppState, SeedMode, ServeConfig, TranscriptLog, TranscriptTurn};
use serde_json::{json, Value};
use tower::ServiceExt;

fn persona_snapshot(variant: Variant, epochs: usize) -> Snapshot {
    let synth = generate_synthetic_persona_corpus(1000, 2, 0.8, 11, &SynthOptions::default()).unwrap();
    let toks: Vec<String> = synth.train.iter().flat_map(|c| c.turns.iter().flat_map(|t| tokenize(&t.text))).collect();
    let vocab = Vocabulary::build(toks.iter().map(String::as_str), 100).unwrap();
    let attributes = synth.attributes.clone();
    let (convs, _) = encode_raw(synth.train, &vocab, &attributes).unwrap();
    let cfg = ModelConfig {
        variant,
        embedding_dim: 16,
        attribute_dim: 8,
        hidden_size: 32,
        layers: 1,
        attention_dim: 32,
        noise_mode: NoiseMode::Word,
        noise_std: 1.0,
        max_len: 10,
        max_turns: 5,
        ..ModelConfig::default()
    };
    let model = PhredModel::new(&cfg, vocab.len(), attributes.len(), 3).unwrap();
    let train_cfg = TrainConfig { epochs, batch_size: 32, learning_rate: 0.5, ..TrainConfig::default() };
    let mut snap = Snapshot { model, train: train_cfg, vocab, attributes, step: 0 };
    if epochs > 0 {
        train(&mut snap, &convs, &TrainOutputs::default()).unwrap();
    }
    snap
}

/// Directory with a trained `persona` snapshot and an untrained `raw` one.
fn snapshot_root() -> &'static Path {
    static ROOT: OnceLock<tempfile::TempDir> = OnceLock::new();
    ROOT.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        persona_snapshot(Variant::PhredganD, 6).save(&dir.path().join("persona")).unwrap();
        persona_snapshot(Variant::Hredgan, 0).save(&dir.path().join("raw")).unwrap();
        std::fs::create_dir(dir.path().join("not-a-snapshot")).unwrap();
        dir
    })
    .path()
}

struct Service {
    app: axum::Router,
    state: Arc<AppState>,
}

impl Service {
    fn new(persist: Option<&Path>) -> Self {
        let config = ServeConfig {
            snapshot_dir: snapshot_root().to_path_buf(),
            persist: persist.map(Path::to_path_buf),
            seed_mode: SeedMode::Fixed(0),
            ui_dir: None,
        };
        let state = Arc::new(AppState::new(&config).unwrap());
        Self { app: router(state.clone(), None), state }
    }

    async fn call(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
        let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
    }

    async fn session(&self, snapshot: &str) -> String {
        let (status, body) = self.call("POST", "/v1/sessions", Some(json!({"snapshot_id": snapshot}))).await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        body["session_id"].as_str().unwrap().to_string()
    }

    async fn message(&self, id: &str, speaker: &str, text: &str, respond_as: &str, n: Option<usize>) -> (StatusCode, Value) {
        let mut body = json!({"speaker": speaker, "text": text, "respond_as": respond_as});
        if let Some(n) = n {
            body["num_candidates"] = json!(n);
        }
        self.call("POST", &format!("/v1/sessions/{id}/message"), Some(body)).await
    }
}

fn assert_error(status: StatusCode, body: &Value, expected: StatusCode) {
    assert_eq!(status, expected, "{body}");
    assert!(body["code"].is_string() && body["message"].is_string(), "{body}");
}

#[tokio::test]
async fn snapshots_are_listed_with_variant() {
    let s = Service::new(None);
    let (status, body) = s.call("GET", "/v1/snapshots", None).await;
    assert_eq!(status, StatusCode::OK);
    let list = body.as_array().unwrap();
    assert_eq!(list.len(), 2);
    assert_eq!(list[0]["id"], "persona");
    assert_eq!(list[0]["variant"], "phredgan_d");
    assert_eq!(list[1]["variant"], "hredgan");
}

#[tokio::test]
async fn session_creation() {
    let s = Service::new(None);
    let (status, body) = s.call("POST", "/v1/sessions", Some(json!({"snapshot_id": "persona"}))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["attributes"], json!(["persona0", "persona1"]));
    let other = s.session("persona").await;
    assert_ne!(body["session_id"].as_str().unwrap(), other);
    for bad in ["nope", "not-a-snapshot", "../persona"] {
        let (status, body) = s.call("POST", "/v1/sessions", Some(json!({"snapshot_id": bad}))).await;
        assert_error(status, &body, StatusCode::NOT_FOUND);
    }
    let (status, body) = s.call("POST", "/v1/sessions", Some(json!({"snapshot": "persona"}))).await;
    assert_error(status, &body, StatusCode::BAD_REQUEST);
    let (status, body) = s.call("GET", &format!("/v1/sessions/{other}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["turns"], json!([]));
    let (status, body) = s.call("GET", "/v1/sessions/missing", None).await;
    assert_error(status, &body, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn messages_grow_the_transcript() {
    let s = Service::new(None);
    let id = s.session("persona").await;
    let (status, body) = s.message(&id, "persona0", "sig0w1 fill2 sig0w3", "persona1", None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["ranked"], true);
    let responses = body["responses"].as_array().unwrap();
    assert_eq!(responses.len(), 8);
    let scores: Vec<f64> = responses.iter().map(|r| r["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    let top = responses[0]["text"].as_str().unwrap().to_string();

    let (_, one) = s.message(&id, "persona0", "fill1 sig0w0", "persona0", Some(1)).await;
    assert_eq!(one["responses"].as_array().unwrap().len(), 1);
    s.message(&id, "persona1", "sig1w2", "persona0", Some(3)).await;
    let (_, session) = s.call("GET", &format!("/v1/sessions/{id}"), None).await;
    let turns = session["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 6);
    assert_eq!(turns[0], json!({"speaker": "persona0", "text": "sig0w1 fill2 sig0w3"}));
    assert_eq!(turns[1], json!({"speaker": "persona1", "text": top}));
}

#[tokio::test]
async fn message_errors() {
    let s = Service::new(None);
    let id = s.session("persona").await;
    for (speaker, respond_as) in [("nobody", "persona0"), ("persona0", "nobody")] {
        let (status, body) = s.message(&id, speaker, "fill1", respond_as, None).await;
        assert_error(status, &body, StatusCode::BAD_REQUEST);
    }
    for n in [0, 65] {
        let (status, body) = s.message(&id, "persona0", "fill1", "persona1", Some(n)).await;
        assert_error(status, &body, StatusCode::BAD_REQUEST);
    }
    let (status, _) = s.message(&id, "persona0", "fill1", "persona1", Some(64)).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = s.message("missing", "persona0", "fill1", "persona1", None).await;
    assert_error(status, &body, StatusCode::NOT_FOUND);
    // Failed requests leave the transcript alone.
    let (_, session) = s.call("GET", &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(session["turns"].as_array().unwrap().len(), 2);

    let raw = s.session("raw").await;
    assert!(s.state.snapshots.unload("raw"));
    let (status, body) = s.message(&raw, "persona0", "fill1", "persona1", None).await;
    assert_error(status, &body, StatusCode::CONFLICT);
}

#[tokio::test]
async fn whatif_leaves_history_alone() {
    let s = Service::new(None);
    let id = s.session("persona").await;
    let (status, body) = s.call("POST", &format!("/v1/sessions/{id}/whatif"), Some(json!({}))).await;
    assert_error(status, &body, StatusCode::BAD_REQUEST);
    let (status, body) = s.call("POST", &format!("/v1/sessions/{id}/whatif"), Some(json!({"text": "fill3 sig1w0"}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["per_attribute"].as_object().unwrap().len(), 2);

    s.message(&id, "persona0", "sig0w2 sig0w4", "persona1", None).await;
    let before = s.call("GET", &format!("/v1/sessions/{id}"), None).await.1;
    let a = s.call("POST", &format!("/v1/sessions/{id}/whatif"), Some(json!({"num_candidates": 4}))).await.1;
    let b = s.call("POST", &format!("/v1/sessions/{id}/whatif"), Some(json!({"num_candidates": 4}))).await.1;
    let after = s.call("GET", &format!("/v1/sessions/{id}"), None).await.1;
    assert_eq!(a, b);
    assert_eq!(before, after);
    assert_eq!(a["per_attribute"].as_object().unwrap().keys().collect::<Vec<_>>(), ["persona0", "persona1"]);
}

#[tokio::test]
async fn scores_match_recomputation() {
    let s = Service::new(None);
    let id = s.session("persona").await;
    let text = "sig1w1 fill0 sig1w5";
    let (_, body) = s.message(&id, "persona1", text, "persona0", Some(5)).await;
    let snap = s.state.snapshots.get("persona").unwrap();
    let history = vec![TranscriptTurn { speaker: "persona1".into(), text: text.into() }];
    let req = phredgan::inference::GenerateRequest {
        context: context_of(&snap, &history).unwrap(),
        target: 0,
        num_candidates: 5,
        max_len: None,
        alpha: None,
        seed: fixed_seed(0, 0),
    };
    let cands = phredgan::inference::generate(&snap.model, &req).unwrap();
    for (c, r) in cands.iter().zip(body["responses"].as_array().unwrap()) {
        let again = rank_score(snap.model.variant(), c.adv_score, c.att_log_confidence, c.tokens.len(), c.generator_log_likelihood);
        assert_eq!(r["score"].as_f64().unwrap(), again);
        assert_eq!(r["text"].as_str().unwrap(), phredgan_serve::candidate_text(&snap, c));
    }
}

#[tokio::test]
async fn transcripts_persist_as_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let s = Service::new(Some(dir.path()));
    let id = s.session("persona").await;
    s.message(&id, "persona0", "fill1 fill2", "persona1", Some(2)).await;
    s.message(&id, "persona0", "sig0w0", "persona1", Some(2)).await;
    let stored = TranscriptLog::read(&dir.path().join(format!("{id}.jsonl"))).unwrap();
    let (_, session) = s.call("GET", &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(serde_json::to_value(&stored).unwrap(), session["turns"]);
}

#[tokio::test]
async fn responders_speak_in_their_own_signature() {
    let s = Service::new(None);
    let snap = s.state.snapshots.load("persona").unwrap();
    let manifest = generate_synthetic_persona_corpus(1000, 2, 0.8, 11, &SynthOptions::default()).unwrap().manifest;
    let (mut own, mut other) = (0.0, 0.0);
    for k in 0..100 {
        let id = s.session("persona").await;
        let prompt = format!("sig1w{} fill{} sig1w{}", k % 6, k % 12, (k / 6) % 6);
        let (status, body) = s.message(&id, "persona1", &prompt, "persona0", Some(4)).await;
        assert_eq!(status, StatusCode::OK);
        let text = body["responses"][0]["text"].as_str().unwrap();
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        own += words.iter().filter(|w| manifest.owner(w) == Some("persona0")).count() as f64 / words.len() as f64;
        other += words.iter().filter(|w| manifest.owner(w) == Some("persona1")).count() as f64 / words.len() as f64;
    }
    assert!(own > other, "own {own} other {other} ({})", snap.model.variant());
}
