use std::io::Write;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use tower::ServiceExt;

use xmodal::exec::Execution;
use xmodal::index::{build_index_with, save_index};
use xmodal::ingest::write_embeddings;
use xmodal::model::{init_params, save_params};
use xmodal::synth::{generate, SynthConfig};
use xmodal_service::{router, AppState, ErrorBody, SearchResponse, Stats};

fn corpus() -> xmodal::EmbeddingSet {
    generate(&SynthConfig {
        n: 60,
        dim: 8,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn app() -> (Router, xmodal::FusedIndex) {
    let set = corpus();
    let params = init_params(8, 1).unwrap();
    let index = build_index_with(Some(&params), &set, Execution::Sequential).unwrap();
    let state = AppState::new(index.clone(), Some(set), Some(params));
    (router(Arc::new(state)), index)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn search(app: &Router, body: serde_json::Value) -> (StatusCode, Vec<u8>) {
    call(app, "POST", "/v1/search", Some(body.to_string())).await
}

fn vector_of(index: &xmodal::FusedIndex, i: usize) -> Vec<f64> {
    index.entries()[i].vector.iter().map(|&v| f64::from(v)).collect()
}

#[tokio::test]
async fn healthz_and_stats() {
    let (app, _) = app();
    let (status, body) = call(&app, "GET", "/v1/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"ok");
    let (status, body) = call(&app, "GET", "/v1/stats", None).await;
    assert_eq!(status, StatusCode::OK);
    let stats: Stats = serde_json::from_slice(&body).unwrap();
    assert_eq!((stats.count, stats.dim), (60, 8));
    assert_eq!(stats.embeddings, Some(60));
    assert!(stats.model_loaded);
}

#[tokio::test]
async fn stored_vector_returns_itself() {
    let (app, index) = app();
    let (status, body) = search(&app, serde_json::json!({"vector": vector_of(&index, 17), "k": 1})).await;
    assert_eq!(status, StatusCode::OK);
    let resp: SearchResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.results.len(), 1);
    assert_eq!(resp.results[0].study_id, index.entries()[17].study_id);
    assert!((resp.results[0].score - 1.0).abs() < 1e-6);
    assert!(resp.took_ms >= 0.0);
}

#[tokio::test]
async fn scores_are_nonincreasing_and_labels_named() {
    let (app, index) = app();
    let (_, body) = search(&app, serde_json::json!({"vector": vector_of(&index, 2), "k": 25})).await;
    let resp: SearchResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.results.len(), 25);
    assert!(resp.results.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(resp
        .results
        .iter()
        .all(|h| h.label == "normal" || h.label == "abnormal"));
}

#[tokio::test]
async fn study_id_queries() {
    let (app, index) = app();
    let id = index.entries()[5].study_id.clone();
    let (status, body) = search(&app, serde_json::json!({"study_id": id, "modality": "text", "k": 3})).await;
    assert_eq!(status, StatusCode::OK);
    let resp: SearchResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.results.len(), 3);
    let (status, body) = search(
        &app,
        serde_json::json!({"study_id": id, "modality": "image", "k": 3, "exclude_self": true}),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let resp: SearchResponse = serde_json::from_slice(&body).unwrap();
    assert!(resp.results.iter().all(|h| h.study_id != id));

    let (status, body) = search(&app, serde_json::json!({"study_id": "nope", "modality": "image"})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let err: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert!(err.error.contains("nope"));
}

#[tokio::test]
async fn bad_requests() {
    let (app, index) = app();
    let (status, body) = search(&app, serde_json::json!({"vector": [1.0, 2.0, 3.0], "k": 1})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let err: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert!(err.error.contains("D = 8"), "{}", err.error);

    let cases = [
        serde_json::json!({"vector": vector_of(&index, 0), "k": 0}),
        serde_json::json!({"vector": vector_of(&index, 0), "k": 1001}),
        serde_json::json!({"vector": vector_of(&index, 0), "study_id": "x", "k": 1}),
        serde_json::json!({"k": 1}),
        serde_json::json!({"study_id": "x", "k": 1}),
        serde_json::json!({"study_id": "x", "modality": "audio"}),
        serde_json::json!({"vector": vec![0.0; 8], "k": 1}),
        serde_json::json!({"vector": vector_of(&index, 0), "bogus": 1}),
    ];
    for case in cases {
        let (status, _) = search(&app, case.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{case}");
    }
    let (status, _) = call(&app, "POST", "/v1/search", Some("{not json".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn study_id_without_embeddings_is_rejected() {
    let set = corpus();
    let index = build_index_with(None, &set, Execution::Sequential).unwrap();
    let id = index.entries()[0].study_id.clone();
    let app = router(Arc::new(AppState::new(index, None, None)));
    let (status, _) = search(&app, serde_json::json!({"study_id": id, "modality": "image"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[test]
fn load_checks_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let set = corpus();
    let index = build_index_with(None, &set, Execution::Sequential).unwrap();
    let (ip, ep, mp, bad) = (
        dir.path().join("i.cmxi"),
        dir.path().join("e.cmxe"),
        dir.path().join("m.cmxm"),
        dir.path().join("bad.cmxm"),
    );
    save_index(&index, &ip).unwrap();
    write_embeddings(&set, &ep).unwrap();
    save_params(&init_params(8, 0).unwrap(), &mp).unwrap();
    save_params(&init_params(4, 0).unwrap(), &bad).unwrap();
    let state = AppState::load(&ip, Some(&ep), Some(&mp)).unwrap();
    assert_eq!(state.metadata.index_path.as_deref(), Some(ip.as_path()));
    assert!(AppState::load(&ip, None, Some(&bad)).is_err());
    assert!(AppState::load(&dir.path().join("missing"), None, None).is_err());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn service_conformance() {
    let (app, index) = app();
    let (health, body) = call(&app, "GET", "/v1/healthz", None).await;
    let healthz_ok = health == StatusCode::OK && body == b"ok";

    let target = &index.entries()[31].study_id;
    let (_, body) = search(&app, serde_json::json!({"vector": vector_of(&index, 31), "k": 1})).await;
    let resp: SearchResponse = serde_json::from_slice(&body).unwrap();
    let self_score = resp.results[0].score;
    let self_ok = &resp.results[0].study_id == target && (self_score - 1.0).abs() < 1e-6;

    let (wrong_dim, _) = search(&app, serde_json::json!({"vector": vec![0.5; 3], "k": 1})).await;
    let wrong_dim_ok = wrong_dim == StatusCode::BAD_REQUEST;

    let request = serde_json::json!({"vector": vector_of(&index, 9), "k": 20});
    let (_, body) = search(&app, request.clone()).await;
    let sequential: SearchResponse = serde_json::from_slice(&body).unwrap();
    let handles: Vec<_> = (0..64)
        .map(|_| {
            let app = app.clone();
            let request = request.clone();
            tokio::spawn(async move { search(&app, request).await })
        })
        .collect();
    let mut identical = true;
    for h in handles {
        let (status, body) = h.await.unwrap();
        let resp: SearchResponse = serde_json::from_slice(&body).unwrap();
        identical &= status == StatusCode::OK && resp.results == sequential.results;
    }

    let ok = healthz_ok && self_ok && wrong_dim_ok && identical;
    let status = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "[{status}] service conformance: healthz {healthz_ok}, self rank 1 score {self_score:.9}, wrong dimension 400 {wrong_dim_ok}, 64 concurrent identical {identical}"
    );
    assert!(ok);
}
