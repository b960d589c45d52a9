use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use ffaa_core::dataset::{build_dataset, BuildConfig, CandidateStatus};
use ffaa_core::generator::{MockGenerator, MockPolicy, PromptPool};
use ffaa_core::review::{replay, ReviewStore, DECISION_LOG};
use ffaa_core::synth::{write_corpus, ClassCounts};
use ffaa_core::Split;
use ffaa_review::{router, ApiState};

const TOKEN: &str = "s3cret";
const HEADER: &str = "x-review-token";

/// A build run with five candidates pending review.
fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let counts = ClassCounts {
        real: 2,
        identity_exchange: 1,
        attribute_manipulation: 1,
        entire_synthesis: 1,
    };
    let m = write_corpus(&dir.path().join("corpus"), "src", counts, Split::Train, 3).unwrap();
    let g = MockGenerator::from_manifests(MockPolicy::default(), [&m]);
    let cfg = BuildConfig {
        budget: 5,
        ..BuildConfig::default()
    };
    let out = build_dataset(
        &m,
        &g,
        &PromptPool::default(),
        &cfg,
        &dir.path().join("data"),
        false,
        None,
    )
    .unwrap();
    assert_eq!(out.status_counts()[&CandidateStatus::PendingReview], 5);
    dir
}

fn app(dir: &std::path::Path) -> axum::Router {
    let store = ReviewStore::open(&dir.join("data")).unwrap();
    router(ApiState::new(store, TOKEN, HEADER).unwrap())
}

async fn call(
    app: &axum::Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let mut req = Request::builder()
        .method(method)
        .uri(uri)
        .header(HEADER, TOKEN);
    let body = match body {
        Some(b) => {
            req = req.header("content-type", "application/json");
            Body::from(b.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or(Value::Null),
    )
}

async fn pending_ids(app: &axum::Router) -> Vec<String> {
    let (s, page) = call(
        app,
        "GET",
        "/api/candidates?status=PENDING_REVIEW&page=0",
        None,
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    page["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["candidate_id"].as_str().unwrap().to_string())
        .collect()
}

fn decision(d: &str) -> Value {
    json!({"reviewer": "alice", "decision": d, "reason": if d == "REJECT" { json!("vague reasoning") } else { Value::Null }})
}

#[tokio::test]
async fn token_is_required() {
    let dir = fixture();
    let app = app(dir.path());
    for token in [None, Some("wrong")] {
        let mut req = Request::builder().uri("/api/stats");
        if let Some(t) = token {
            req = req.header(HEADER, t);
        }
        let resp = app
            .clone()
            .oneshot(req.body(Body::empty()).unwrap())
            .await
            .unwrap();
        assert_eq!(resp.status(), StatusCode::UNAUTHORIZED);
    }
    assert_eq!(
        call(&app, "GET", "/api/stats", None).await.0,
        StatusCode::OK
    );
}

#[tokio::test]
async fn review_loop_approves_three_rejects_two() {
    let dir = fixture();
    let app = app(dir.path());
    let ids = pending_ids(&app).await;
    assert_eq!(ids.len(), 5);

    let (s, detail) = call(&app, "GET", &format!("/api/candidates/{}", ids[0]), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(!detail["image_b64"].as_str().unwrap().is_empty());
    assert!(detail["answer"]["reasoning"].is_string());

    for (i, id) in ids.iter().enumerate() {
        let d = if i < 3 { "APPROVE" } else { "REJECT" };
        let (s, out) = call(
            &app,
            "POST",
            &format!("/api/candidates/{id}/decision"),
            Some(decision(d)),
        )
        .await;
        assert_eq!(s, StatusCode::OK, "{out}");
        assert_eq!(out["duplicate"], false);
    }
    assert!(pending_ids(&app).await.is_empty());

    let (_, stats) = call(&app, "GET", "/api/stats", None).await;
    assert_eq!(stats["by_status"]["APPROVED"], 3);
    assert_eq!(stats["by_status"]["REJECTED_BY_EXPERT"], 2);

    let (s, export) = call(&app, "GET", "/api/export", None).await;
    assert_eq!(s, StatusCode::OK);
    let vqa = export["vqa"].as_array().unwrap();
    assert_eq!(vqa.len(), 3);
    let approved: Vec<String> = export["candidates"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["status"] == "APPROVED")
        .map(|c| c["record"]["id"].as_str().unwrap().to_string())
        .collect();
    let exported: Vec<String> = vqa
        .iter()
        .map(|r| r["image_id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(approved, exported);

    // Replaying the logs alone reconstructs the same statuses.
    let replayed = replay(&dir.path().join("data")).unwrap();
    for (i, id) in ids.iter().enumerate() {
        let want = if i < 3 {
            CandidateStatus::Approved
        } else {
            CandidateStatus::RejectedByExpert
        };
        assert_eq!(replayed[id], want);
    }
}

#[tokio::test]
async fn conflicts_and_missing() {
    let dir = fixture();
    let app = app(dir.path());
    let id = pending_ids(&app).await.remove(0);
    let uri = format!("/api/candidates/{id}/decision");
    assert_eq!(
        call(&app, "POST", &uri, Some(decision("APPROVE"))).await.0,
        StatusCode::OK
    );
    // Same intent again: idempotent.
    let (s, out) = call(&app, "POST", &uri, Some(decision("APPROVE"))).await;
    assert_eq!((s, out["duplicate"].clone()), (StatusCode::OK, json!(true)));
    // Different decision on a decided candidate.
    let (s, out) = call(&app, "POST", &uri, Some(decision("REJECT"))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(out["error"], "not_pending");
    // An explicit revision goes through.
    let mut rev = decision("REJECT");
    rev["revision"] = json!(true);
    let (s, out) = call(&app, "POST", &uri, Some(rev)).await;
    assert_eq!(
        (s, out["status"].clone()),
        (StatusCode::OK, json!("REJECTED_BY_EXPERT"))
    );

    assert_eq!(
        call(&app, "GET", "/api/candidates/nope", None).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        call(
            &app,
            "POST",
            "/api/candidates/nope/decision",
            Some(decision("APPROVE"))
        )
        .await
        .0,
        StatusCode::NOT_FOUND
    );
    let (s, _) = call(
        &app,
        "POST",
        &uri,
        Some(json!({"reviewer": "a", "decision": "MAYBE"})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "GET", "/api/candidates?status=BOGUS", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn paging() {
    let dir = fixture();
    let app = app(dir.path());
    let (_, p0) = call(&app, "GET", "/api/candidates?page=0&page_size=2", None).await;
    let (_, p2) = call(&app, "GET", "/api/candidates?page=2&page_size=2", None).await;
    assert_eq!(p0["total"], 5);
    assert_eq!(p0["items"].as_array().unwrap().len(), 2);
    assert_eq!(p2["items"].as_array().unwrap().len(), 1);
}

/// A crash after the decision line hit the log (before the snapshot or the
/// response) must not produce a second entry when the client retries.
#[tokio::test]
async fn retry_after_crash_is_idempotent() {
    let dir = fixture();
    let data = dir.path().join("data");
    let id = {
        let app = app(dir.path());
        let id = pending_ids(&app).await.remove(0);
        call(
            &app,
            "POST",
            &format!("/api/candidates/{id}/decision"),
            Some(decision("APPROVE")),
        )
        .await;
        id
    };
    // Lose the snapshot and leave a torn half-line, as an interrupted write would.
    let _ = std::fs::remove_file(data.join(ffaa_core::review::STATUS_SNAPSHOT));
    let log = data.join(DECISION_LOG);
    let mut text = std::fs::read_to_string(&log).unwrap();
    text.push_str("{\"candidate_id\":\"x");
    std::fs::write(&log, text).unwrap();

    let app = app(dir.path());
    let (s, out) = call(
        &app,
        "POST",
        &format!("/api/candidates/{id}/decision"),
        Some(decision("APPROVE")),
    )
    .await;
    assert_eq!((s, out["duplicate"].clone()), (StatusCode::OK, json!(true)));
    let lines = std::fs::read_to_string(&log).unwrap();
    assert_eq!(lines.lines().count(), 1, "{lines}");
    assert_eq!(replay(&data).unwrap()[&id], CandidateStatus::Approved);
}
