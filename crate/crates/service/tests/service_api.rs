mod common;

use std::time::Duration;

use reqwest::StatusCode;
use serde_json::{json, Value};

use common::{config, direct_engine, slow_factory, without_timing, Running};
use rmm_core::transcript::TranscriptStore;
use rmm_service::server::AppState;

async fn post(c: &reqwest::Client, url: String, body: Value) -> (StatusCode, Value) {
    let r = c.post(url).json(&body).send().await.unwrap();
    (r.status(), r.json().await.unwrap())
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn session_lifecycle_persists_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let srv = Running::start(AppState::new(cfg.clone())).await;
    let c = reqwest::Client::new();

    let health = c.get(srv.url("/healthz")).send().await.unwrap();
    assert_eq!(health.headers()["x-rmm-seed"], "11");

    let (s, info) = post(&c, srv.url("/v1/sessions"), json!({})).await;
    assert_eq!(s, StatusCode::CREATED);
    let id = info["session_id"].as_str().unwrap().to_owned();
    assert_eq!(id, "alice-s0000");

    let (s, turn) = post(&c, srv.url(&format!("/v1/sessions/{id}/messages")), json!({"text": "#topic I keep bees"})).await;
    assert_eq!(s, StatusCode::OK);
    assert!(turn["response"].is_string());

    let r = c.delete(srv.url(&format!("/v1/sessions/{id}"))).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let report: Value = r.json().await.unwrap();
    assert_eq!(report["added"], 1);

    let again = c.delete(srv.url(&format!("/v1/sessions/{id}"))).send().await.unwrap();
    assert_eq!(again.status(), StatusCode::CONFLICT);
    let (s, _) = post(&c, srv.url("/v1/sessions/nope/messages"), json!({"text": "x"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    srv.stop().await;

    let store = TranscriptStore::load(&dir.path().join("owners/alice/transcripts.jsonl")).unwrap();
    assert_eq!(store.len(), 1);
    assert_eq!(store.sessions()[0].turns[0].user_utterance, "#topic I keep bees");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn endpoints_match_library_calls() {
    let served = tempfile::tempdir().unwrap();
    let direct = tempfile::tempdir().unwrap();
    let cfg = config(served.path());
    let srv = Running::start(AppState::new(cfg.clone())).await;
    let c = reqwest::Client::new();
    let mut lib = direct_engine(&cfg, "alice", direct.path());

    let sessions: [&[&str]; 2] = [
        &["#topic I am allergic to penicillin", "it gives me a rash", "#topic my dog is a beagle named Biscuit"],
        &["which medication gives me a rash?", "#topic I swim every morning", "what about my dog Biscuit?"],
    ];
    for utterances in sessions {
        let (_, info) = post(&c, srv.url("/v1/sessions"), json!({"owner": "alice"})).await;
        let id = info["session_id"].as_str().unwrap().to_owned();
        let lib_info = lib.start_session().unwrap();
        assert_eq!(info, serde_json::to_value(&lib_info).unwrap());
        for u in utterances {
            let (_, got) = post(&c, srv.url(&format!("/v1/sessions/{id}/messages")), json!({"text": u})).await;
            let want = serde_json::to_value(lib.run_turn(&id, u).unwrap()).unwrap();
            assert_eq!(without_timing(got), without_timing(want));
        }
        let got: Value = c.delete(srv.url(&format!("/v1/sessions/{id}"))).send().await.unwrap().json().await.unwrap();
        assert_eq!(got, serde_json::to_value(lib.end_session(&id).unwrap()).unwrap());
    }

    let got: Value = c
        .get(srv.url("/v1/memory/search?q=penicillin%20rash&k=5"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let want = lib.bank().search_text(lib.embedder(), "penicillin rash", 5).unwrap();
    assert_eq!(got, serde_json::to_value(&want).unwrap());
    assert!(!want.is_empty());

    let first = &want[0].entry_id;
    let got: Value = c.get(srv.url(&format!("/v1/memory/{first}"))).send().await.unwrap().json().await.unwrap();
    assert_eq!(got, serde_json::to_value(lib.bank().get(first).unwrap()).unwrap());
    let missing = c.get(srv.url("/v1/memory/none")).send().await.unwrap();
    assert_eq!(missing.status(), StatusCode::NOT_FOUND);

    let got: Value = c.get(srv.url("/v1/metrics?owner=alice")).send().await.unwrap().json().await.unwrap();
    assert_eq!(got, serde_json::to_value(lib.metrics()).unwrap());
    let all: Value = c.get(srv.url("/v1/metrics")).send().await.unwrap().json().await.unwrap();
    assert_eq!(all["owners"]["alice"], got);
    srv.stop().await;

    for f in ["bank.jsonl", "transcripts.jsonl", "reflected.jsonl", "params.json"] {
        let a = std::fs::read(served.path().join("owners/alice").join(f)).unwrap();
        let b = std::fs::read(direct.path().join("owners/alice").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_turns_for_one_owner_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let state = AppState::with_factory(cfg.clone(), slow_factory(cfg, Duration::from_millis(400)));
    let srv = Running::start(state).await;
    let c = reqwest::Client::new();
    let (_, info) = post(&c, srv.url("/v1/sessions"), json!({})).await;
    let id = info["session_id"].as_str().unwrap().to_owned();
    let (_, other) = post(&c, srv.url("/v1/sessions"), json!({"owner": "bob"})).await;
    let other = other["session_id"].as_str().unwrap().to_owned();

    let url = srv.url(&format!("/v1/sessions/{id}/messages"));
    let first = tokio::spawn({
        let (c, url) = (c.clone(), url.clone());
        async move { post(&c, url, json!({"text": "first"})).await }
    });
    tokio::time::sleep(Duration::from_millis(100)).await;
    let started = std::time::Instant::now();
    let (second, err) = post(&c, url, json!({"text": "second"})).await;
    let (bob, _) = post(&c, srv.url(&format!("/v1/sessions/{other}/messages")), json!({"text": "hello"})).await;
    assert_eq!(bob, StatusCode::OK);
    assert_eq!(second, StatusCode::CONFLICT);
    assert_eq!(err["error"], "busy");
    assert!(started.elapsed() < Duration::from_secs(2));
    assert_eq!(first.await.unwrap().0, StatusCode::OK);
    srv.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn retries_with_idempotency_key_replay_the_first_reply() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Running::start(AppState::new(config(dir.path()))).await;
    let c = reqwest::Client::new();
    let create = || c.post(srv.url("/v1/sessions")).header("Idempotency-Key", "k1").json(&json!({}));
    let a: Value = create().send().await.unwrap().json().await.unwrap();
    let b = create().send().await.unwrap();
    assert_eq!(b.status(), StatusCode::CREATED);
    assert_eq!(a, b.json::<Value>().await.unwrap());
    let id = a["session_id"].as_str().unwrap().to_owned();

    let msg = || {
        c.post(srv.url(&format!("/v1/sessions/{id}/messages")))
            .header("Idempotency-Key", "m1")
            .json(&json!({"text": "#topic I paint"}))
    };
    let t1: Value = msg().send().await.unwrap().json().await.unwrap();
    let t2: Value = msg().send().await.unwrap().json().await.unwrap();
    assert_eq!(t1, t2);

    let end = || c.delete(srv.url(&format!("/v1/sessions/{id}"))).header("Idempotency-Key", "d1");
    let r1: Value = end().send().await.unwrap().json().await.unwrap();
    let r2 = end().send().await.unwrap();
    assert_eq!(r2.status(), StatusCode::OK);
    assert_eq!(r1, r2.json::<Value>().await.unwrap());
    srv.stop().await;

    let store = TranscriptStore::load(&dir.path().join("owners/alice/transcripts.jsonl")).unwrap();
    assert_eq!(store.sessions()[0].len(), 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bad_requests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Running::start(AppState::new(config(dir.path()))).await;
    let c = reqwest::Client::new();
    let (s, e) = post(&c, srv.url("/v1/sessions"), json!({"owner": "../etc"})).await;
    assert_eq!((s, e["error"].as_str()), (StatusCode::BAD_REQUEST, Some("invalid_owner")));
    let (_, info) = post(&c, srv.url("/v1/sessions"), json!({})).await;
    let id = info["session_id"].as_str().unwrap();
    let (s, _) = post(&c, srv.url(&format!("/v1/sessions/{id}/messages")), json!({"text": "  "})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post(&c, srv.url("/v1/sessions"), json!({})).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let r = c.get(srv.url("/v1/memory/search?q=x&k=0")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    srv.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn corrupt_store_refuses_to_serve() {
    let dir = tempfile::tempdir().unwrap();
    let owner = dir.path().join("owners/alice");
    std::fs::create_dir_all(&owner).unwrap();
    std::fs::write(owner.join("bank.jsonl"), "{not json\n").unwrap();
    let mut cfg = config(dir.path());
    cfg.bind = "127.0.0.1:0".into();
    let err = rmm_service::server::run(cfg).await.unwrap_err();
    assert!(matches!(err, rmm_service::server::ServeError::StoreCorruption(_)), "{err}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn shutdown_checkpoints_params() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Running::start(AppState::new(config(dir.path()))).await;
    let c = reqwest::Client::new();
    let (_, info) = post(&c, srv.url("/v1/sessions"), json!({})).await;
    let id = info["session_id"].as_str().unwrap().to_owned();
    post(&c, srv.url(&format!("/v1/sessions/{id}/messages")), json!({"text": "hi"})).await;
    let params = dir.path().join("owners/alice/params.json");
    assert!(!params.exists());
    srv.stop().await;
    assert!(params.exists());
}
