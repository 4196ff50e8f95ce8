use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use topicswitch_core::model::checkpoint::{blob_path, save_checkpoint};
use topicswitch_core::model::{ModelConfig, NetworkKind, Parameters};
use topicswitch_core::tokenizer::Vocab;
use topicswitch_service::store::{read_events, CloseReason, Event};
use topicswitch_service::{serve, AppState, CorsOrigins, Reply, ServiceConfig, Transcript};

/// Writes untrained generator and selector checkpoints plus a
/// discriminator that always scores `beta`.
fn write_models(dir: &Path, beta: f64) -> ServiceConfig {
    let vocab = Vocab::bytes_only(3);
    let mut c = ModelConfig::tiny(vocab.len(), 3);
    c.seed = 4;
    let mut disc = Parameters::init(NetworkKind::Discriminator, &c).unwrap();
    disc.get_mut("coherence_head.b").unwrap().values[0] = (beta / (1.0 - beta)).ln() as f32;
    let p = |n: &str| dir.join(n);
    save_checkpoint(
        &Parameters::init(NetworkKind::Generator, &c).unwrap(),
        Some(&vocab),
        p("gen.json"),
    )
    .unwrap();
    save_checkpoint(
        &Parameters::init(NetworkKind::Selector, &c).unwrap(),
        None,
        p("sel.json"),
    )
    .unwrap();
    save_checkpoint(&disc, None, p("disc.json")).unwrap();
    let mut config = ServiceConfig::new(p("gen.json"), p("sel.json"), p("disc.json"));
    config.log_dir = dir.join("sessions");
    config
}

struct Server {
    base: String,
    client: reqwest::Client,
    stop: Option<oneshot::Sender<()>>,
    handle: JoinHandle<std::io::Result<()>>,
}

impl Server {
    async fn start(config: ServiceConfig) -> Self {
        let state = AppState::load(config).unwrap();
        Self::with_state(state).await
    }

    async fn with_state(state: AppState) -> Self {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr: SocketAddr = listener.local_addr().unwrap();
        let (tx, rx) = oneshot::channel();
        let handle = tokio::spawn(serve(listener, Arc::new(state), async {
            let _ = rx.await;
        }));
        Self {
            base: format!("http://{addr}"),
            client: reqwest::Client::new(),
            stop: Some(tx),
            handle,
        }
    }

    async fn stop(mut self) {
        self.stop.take().unwrap().send(()).unwrap();
        self.handle.await.unwrap().unwrap();
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self.client.post(self.url(path)).json(&body).send().await.unwrap();
        let status = r.status();
        let text = r.text().await.unwrap();
        (status, serde_json::from_str(&text).unwrap_or(Value::Null))
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.client.get(self.url(path)).send().await.unwrap();
        let status = r.status();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    async fn create(&self) -> String {
        let (status, body) = self.post("/sessions", json!({})).await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        body["id"].as_str().unwrap().to_string()
    }

    async fn say(&self, id: &str, text: &str) -> Reply {
        let (status, body) = self
            .post(&format!("/sessions/{id}/messages"), json!({ "text": text }))
            .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        serde_json::from_value(body).unwrap()
    }

    async fn transcript(&self, id: &str) -> Transcript {
        let (status, body) = self.get(&format!("/sessions/{id}")).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        serde_json::from_value(body).unwrap()
    }
}

fn error_code(body: &Value) -> &str {
    assert!(body["error"]["message"].is_string(), "{body}");
    body["error"]["code"].as_str().unwrap()
}

const RATING: fn() -> Value = || json!({"coherence": 2, "informativeness": 2, "engagingness": 1, "humanness": 2});

#[tokio::test]
async fn lifecycle_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(write_models(dir.path(), 0.2)).await;
    let id = server.create().await;

    let mut replies = Vec::new();
    for text in ["how was the trip?", "let us talk about food", "any good recipes?"] {
        replies.push(server.say(&id, text).await);
    }
    // turn 0 never switches; a constant beta of 0.2 under epsilon 0.61 switches every later turn
    assert_eq!(
        replies.iter().map(|r| r.switched).collect::<Vec<_>>(),
        [false, true, true]
    );
    for r in &replies {
        assert!((r.beta - 0.2).abs() < 1e-6);
        let cands = r.candidates.as_ref().unwrap();
        assert_eq!(cands.len(), 3);
        let best = cands.iter().map(|c| c.score.unwrap()).fold(f64::NEG_INFINITY, f64::max);
        let chosen = cands.iter().find(|c| c.text == r.response).unwrap();
        assert_eq!(chosen.score.unwrap(), best);
    }

    let t = server.transcript(&id).await;
    assert_eq!(t.turns.len(), 3);
    assert_eq!(t.topic_segments, 3);
    for (i, (rec, reply)) in t.turns.iter().zip(&replies).enumerate() {
        assert_eq!(rec.index, i);
        assert_eq!(&rec.reply, reply);
        assert_eq!(rec.reply.switched, rec.decision.switched);
        assert_eq!(rec.reply.beta, rec.decision.beta);
    }
    assert_eq!(server.transcript(&id).await, t, "transcript is stable");

    let (status, body) = server.post(&format!("/sessions/{id}/ratings"), RATING()).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["session_id"], id.as_str());
    let (status, body) = server.post(&format!("/sessions/{id}/ratings"), RATING()).await;
    assert_eq!((status, error_code(&body)), (StatusCode::CONFLICT, "duplicate_rating"));
    assert_eq!(server.transcript(&id).await.rating.unwrap().engagingness, 1);

    let csv = server
        .client
        .get(server.url("/ratings"))
        .send()
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(
        rows,
        [
            "session_id,coherence,informativeness,engagingness,humanness",
            &format!("{id},2,2,1,2")
        ]
    );
    server.stop().await;
}

#[tokio::test]
async fn overlapping_turns_get_exactly_one_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = write_models(dir.path(), 0.7);
    config.min_turn_duration = Duration::from_millis(400);
    let server = Server::start(config).await;
    let id = server.create().await;
    let path = format!("/sessions/{id}/messages");
    let (a, b) = tokio::join!(
        server.post(&path, json!({"text": "one"})),
        server.post(&path, json!({"text": "two"}))
    );
    let mut statuses = [a.0, b.0];
    statuses.sort();
    assert_eq!(statuses, [StatusCode::OK, StatusCode::CONFLICT]);
    let conflict = if a.0 == StatusCode::CONFLICT { &a.1 } else { &b.1 };
    assert_eq!(error_code(conflict), "turn_in_progress");
    assert_eq!(server.transcript(&id).await.turns.len(), 1);

    // other sessions are not blocked by a busy one
    let other = server.create().await;
    let (x, y) = tokio::join!(server.post(&path, json!({"text": "three"})), async {
        tokio::time::sleep(Duration::from_millis(50)).await;
        server
            .post(&format!("/sessions/{other}/messages"), json!({"text": "four"}))
            .await
    });
    assert_eq!((x.0, y.0), (StatusCode::OK, StatusCode::OK));
    server.stop().await;
}

#[tokio::test]
async fn validation_and_missing_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(write_models(dir.path(), 0.5)).await;

    let (status, body) = server.post("/sessions", json!({"epsilon": 1.5})).await;
    assert_eq!(
        (status, error_code(&body)),
        (StatusCode::UNPROCESSABLE_ENTITY, "invalid_epsilon")
    );
    let (status, body) = server.post("/sessions", json!({"k": 0})).await;
    assert_eq!(
        (status, error_code(&body)),
        (StatusCode::UNPROCESSABLE_ENTITY, "invalid_k")
    );
    let (status, body) = server.post("/sessions", json!({"k": 4})).await;
    assert_eq!(
        (status, error_code(&body)),
        (StatusCode::UNPROCESSABLE_ENTITY, "invalid_k")
    );
    let (status, body) = server.post("/sessions", json!({"epsilon": 0.3, "k": 2})).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!((body["epsilon"].as_f64(), body["k"].as_u64()), (Some(0.3), Some(2)));
    let id = body["id"].as_str().unwrap().to_string();
    assert_eq!(server.say(&id, "hello").await.candidates.unwrap().len(), 2);

    // no body at all reads as {}
    let r = server.client.post(server.url("/sessions")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::CREATED);

    let msg = format!("/sessions/{id}/messages");
    let (status, body) = server.post(&msg, json!({"text": "   "})).await;
    assert_eq!(
        (status, error_code(&body)),
        (StatusCode::UNPROCESSABLE_ENTITY, "empty_text")
    );
    let (status, body) = server.post(&msg, json!({})).await;
    assert_eq!(
        (status, error_code(&body)),
        (StatusCode::UNPROCESSABLE_ENTITY, "invalid_body")
    );
    let r = server.client.post(server.url(&msg)).body("{oops").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);

    let rate = format!("/sessions/{id}/ratings");
    let (status, body) = server
        .post(
            &rate,
            json!({"coherence": 3, "informativeness": 2, "engagingness": 1, "humanness": 2}),
        )
        .await;
    assert_eq!(
        (status, error_code(&body)),
        (StatusCode::UNPROCESSABLE_ENTITY, "rating_out_of_range")
    );
    let (status, _) = server.post(&rate, json!({"coherence": 1})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = server.post(&rate, RATING()).await;
    assert_eq!(status, StatusCode::CREATED, "rejected ratings leave the slot free");

    for (status, body) in [
        server.get("/sessions/nope").await,
        server.post("/sessions/nope/messages", json!({"text": "hi"})).await,
        server.post("/sessions/nope/ratings", RATING()).await,
    ] {
        assert_eq!(
            (status, error_code(&body)),
            (StatusCode::NOT_FOUND, "session_not_found")
        );
    }
    let (status, body) = server.get("/nowhere").await;
    assert_eq!((status, error_code(&body)), (StatusCode::NOT_FOUND, "no_route"));
    server.stop().await;
}

#[tokio::test]
async fn health_reports_hashes_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_models(dir.path(), 0.5);
    let paths: Vec<PathBuf> = vec![
        config.generator.clone(),
        config.selector.clone(),
        config.discriminator.clone(),
    ];
    let server = Server::start(config).await;
    let (status, h) = server.get("/healthz").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((h["status"].as_str(), h["sessions"].as_u64()), (Some("ok"), Some(0)));
    assert_eq!((h["epsilon"].as_f64(), h["k"].as_u64()), (Some(0.61), Some(3)));

    use sha2::{Digest, Sha256};
    let digest = |p: &Path| hex::encode(Sha256::digest(std::fs::read(p).unwrap()));
    let cks = h["checkpoints"].as_array().unwrap();
    for (ck, (path, role)) in cks
        .iter()
        .zip(paths.iter().zip(["generator", "selector", "discriminator"]))
    {
        assert_eq!(ck["role"], role);
        assert_eq!(ck["sha256"].as_str().unwrap(), digest(path));
        assert_eq!(ck["blob_sha256"].as_str().unwrap(), digest(&blob_path(path)));
    }

    let ids = [server.create().await, server.create().await, server.create().await];
    assert!(ids[0] != ids[1] && ids[1] != ids[2] && ids[0] != ids[2]);
    assert_eq!(server.get("/healthz").await.1["sessions"], 3);
    server.stop().await;
}

#[tokio::test]
async fn sessions_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_models(dir.path(), 0.3);
    let server = Server::start(config.clone()).await;
    let (rated, open, gone) = (server.create().await, server.create().await, server.create().await);
    server.say(&rated, "first").await;
    server.say(&open, "alpha").await;
    server.say(&open, "beta").await;
    server.post(&format!("/sessions/{rated}/ratings"), RATING()).await;
    let r = server
        .client
        .delete(server.url(&format!("/sessions/{gone}")))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::NO_CONTENT);
    let before = (server.transcript(&rated).await, server.transcript(&open).await);
    server.stop().await;

    let server = Server::start(config.clone()).await;
    assert_eq!(server.get("/healthz").await.1["sessions"], 2);
    assert_eq!(server.transcript(&rated).await, before.0);
    assert_eq!(server.transcript(&open).await, before.1);
    let (status, _) = server.post(&format!("/sessions/{rated}/ratings"), RATING()).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(server.get(&format!("/sessions/{gone}")).await.0, StatusCode::NOT_FOUND);

    // the replayed context continues exactly where the first process left it
    let resumed = server.say(&open, "gamma").await;
    server.stop().await;
    let fresh_dir = tempfile::tempdir().unwrap();
    let mut fresh = config.clone();
    fresh.log_dir = fresh_dir.path().to_path_buf();
    let server = Server::start(fresh).await;
    let id = server.create().await;
    server.say(&id, "alpha").await;
    server.say(&id, "beta").await;
    assert_eq!(server.say(&id, "gamma").await, resumed);
    server.stop().await;
}

#[tokio::test]
async fn deleted_sessions_are_gone() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_models(dir.path(), 0.5);
    let server = Server::start(config.clone()).await;
    let id = server.create().await;
    server.say(&id, "hi").await;
    let del = |id: String| server.client.delete(server.url(&format!("/sessions/{id}"))).send();
    assert_eq!(del(id.clone()).await.unwrap().status(), StatusCode::NO_CONTENT);
    assert_eq!(del(id.clone()).await.unwrap().status(), StatusCode::NOT_FOUND);
    let (status, _) = server
        .post(&format!("/sessions/{id}/messages"), json!({"text": "still there?"}))
        .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    server.stop().await;
    let events = read_events(&config.log_dir.join(format!("{id}.jsonl"))).unwrap();
    assert!(matches!(
        events.last(),
        Some(Event::Closed {
            reason: CloseReason::Deleted,
            ..
        })
    ));
}

#[tokio::test]
async fn idle_sessions_expire() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = write_models(dir.path(), 0.5);
    config.session_ttl = Duration::from_millis(300);
    let server = Server::start(config.clone()).await;
    let idle = server.create().await;
    let lazy = server.create().await;
    assert_eq!(server.get("/healthz").await.1["sessions"], 2);
    tokio::time::sleep(Duration::from_millis(700)).await;
    assert_eq!(server.get(&format!("/sessions/{lazy}")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(server.get(&format!("/sessions/{idle}")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(server.get("/healthz").await.1["sessions"], 0);
    server.stop().await;
    let server = Server::start(config).await;
    assert_eq!(server.get("/healthz").await.1["sessions"], 0);
    server.stop().await;
}

#[tokio::test]
async fn candidates_can_be_turned_off() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = write_models(dir.path(), 0.5);
    config.include_candidates = false;
    let server = Server::start(config).await;
    let id = server.create().await;
    let (_, body) = server
        .post(&format!("/sessions/{id}/messages"), json!({"text": "hi"}))
        .await;
    assert!(body.get("candidates").is_none() && body["response"].is_string());
    let (_, t) = server.get(&format!("/sessions/{id}")).await;
    assert!(t["turns"][0].get("candidates").is_none());
    server.stop().await;
}

#[tokio::test]
async fn cors_allows_only_configured_origins() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = write_models(dir.path(), 0.5);
    config.cors = CorsOrigins::List(vec!["http://ui.test".into()]);
    let server = Server::start(config).await;
    let origin_header = |origin: &'static str| {
        let req = server
            .client
            .get(server.url("/healthz"))
            .header("Origin", origin)
            .send();
        async move { req.await.unwrap().headers().get("access-control-allow-origin").cloned() }
    };
    assert_eq!(origin_header("http://ui.test").await.unwrap(), "http://ui.test");
    assert!(origin_header("http://evil.test").await.is_none());
    let preflight = server
        .client
        .request(reqwest::Method::OPTIONS, server.url("/sessions"))
        .header("Origin", "http://ui.test")
        .header("Access-Control-Request-Method", "POST")
        .header("Access-Control-Request-Headers", "content-type")
        .send()
        .await
        .unwrap();
    assert!(preflight.status().is_success());
    assert!(preflight.headers().contains_key("access-control-allow-methods"));
    server.stop().await;
}

#[tokio::test]
async fn sessions_are_isolated_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(write_models(dir.path(), 0.5)).await;
    let (a, b) = (server.create().await, server.create().await);
    let ra = [server.say(&a, "where to?").await, server.say(&a, "the coast").await];
    let before_b = server.transcript(&b).await;
    assert!(before_b.turns.is_empty());
    let rb = [server.say(&b, "where to?").await, server.say(&b, "the coast").await];
    assert_eq!(ra, rb);
    server.stop().await;
}

#[tokio::test]
async fn unloaded_models_refuse_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ServiceConfig::new("g", "s", "d");
    config.log_dir = dir.path().join("sessions");
    let server = Server::with_state(AppState::new(config, None, vec![]).unwrap()).await;
    let (status, h) = server.get("/healthz").await;
    assert_eq!((status, h["status"].as_str()), (StatusCode::OK, Some("not_ready")));
    let (status, body) = server.post("/sessions", json!({})).await;
    assert_eq!(
        (status, error_code(&body)),
        (StatusCode::SERVICE_UNAVAILABLE, "not_ready")
    );
    server.stop().await;
}

#[test]
fn bad_startup_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = write_models(dir.path(), 0.5);
    config.k = Some(9);
    assert!(AppState::load(config.clone()).is_err());
    config.k = None;
    config.epsilon = 2.0;
    assert!(AppState::load(config.clone()).is_err());
    config.epsilon = 0.5;
    config.discriminator = config.selector.clone();
    assert!(AppState::load(config).is_err());
}
