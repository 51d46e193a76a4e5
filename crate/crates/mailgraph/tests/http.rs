use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use mailgraph::api::router;
use mailgraph_core::mime::{MessageLocation, RawMessage, SourceKind};
use mailgraph_core::service::{AppConfig, Engine, FixedClock, Service};

fn raw(uid: u64, id: &str, subject: &str, body: &str) -> RawMessage {
    RawMessage {
        bytes: format!("Message-ID: <{id}>\r\nFrom: a@example.com\r\nSubject: {subject}\r\n\r\n{body}\r\n").into_bytes(),
        location: MessageLocation {
            account_id: "acct".into(),
            mailbox: "INBOX".into(),
            uid,
            uidvalidity: 1,
            source_kind: SourceKind::Imap,
        },
    }
}

fn seeded_service(dir: &Path) -> Arc<Service> {
    let clock = FixedClock(chrono::DateTime::from_timestamp(1_714_550_400, 0).unwrap());
    let mut engine = Engine::open(AppConfig::with_data_dir(dir), Arc::new(clock)).unwrap();
    let messages = vec![
        raw(1, "grid1@x", "substation outage", "The substation feeder tripped. Voltage recovered after the outage."),
        raw(2, "bill1@x", "invoice overdue", "Your invoice remains unpaid. Payment reminder for the ledger."),
        raw(3, "grid2@x", "feeder voltage", "Feeder voltage dipped at the substation during the outage."),
    ];
    engine.run_pipeline(messages, Default::default()).unwrap();
    Service::new(engine)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
        .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = axum::body::to_bytes(response.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, value)
}

#[tokio::test]
async fn category_tree_and_message_views() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(seeded_service(dir.path()), None);

    let (status, tree) = call(&app, "GET", "/api/categories", None).await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = tree.as_array().unwrap().iter().map(|c| c["category_id"].as_str().unwrap()).collect();
    assert!(ids.contains(&"unsorted") && ids.contains(&"spam"));
    for field in ["name", "parent", "pinned", "provenance", "member_count", "children"] {
        assert!(tree[0].get(field).is_some(), "missing {field}");
    }

    // every message is reachable from some listed category
    let mut seen = std::collections::BTreeSet::new();
    for id in &ids {
        let (status, msgs) = call(&app, "GET", &format!("/api/categories/{id}/messages"), None).await;
        assert_eq!(status, StatusCode::OK);
        for m in msgs.as_array().unwrap() {
            for field in ["subject", "from", "date", "score", "keywords"] {
                assert!(m.get(field).is_some(), "missing {field}");
            }
            seen.insert(m["message_id"].as_str().unwrap().to_string());
        }
    }
    assert_eq!(seen.len(), 3);

    let (status, detail) = call(&app, "GET", "/api/messages/grid1@x", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(detail["subject"], "substation outage");
    assert_eq!(detail["location"]["account_id"], "acct");
    assert!(!detail["keywords"].as_array().unwrap().is_empty());
    assert!(detail["spam_score"].is_number());
    assert!(!detail["memberships"].as_array().unwrap().is_empty());

    let (status, err) = call(&app, "GET", "/api/messages/nope@x", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(err["error"].as_str().unwrap().contains("nope@x"));
    let (status, _) = call(&app, "GET", "/api/categories/ghost/messages", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, err) = call(&app, "GET", "/api/nothing-here", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(err["error"].is_string());
}

#[tokio::test]
async fn categories_corrections_and_spam() {
    let dir = tempfile::tempdir().unwrap();
    let service = seeded_service(dir.path());
    let app = router(Arc::clone(&service), None);

    let (status, created) = call(&app, "POST", "/api/categories", Some(json!({"name": "Billing"}))).await;
    assert_eq!(status, StatusCode::CREATED);
    let billing = created["category_id"].as_str().unwrap().to_string();
    assert_eq!(created["pinned"], true);
    assert_eq!(created["provenance"], "user");

    let (status, child) =
        call(&app, "POST", "/api/categories", Some(json!({"name": "Overdue", "parent": billing}))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(child["parent"], billing.as_str());

    let (status, _) = call(&app, "POST", "/api/categories", Some(json!({"name": "x", "parent": "ghost"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, err) = call(&app, "POST", "/api/categories", Some(json!({"parent": "x"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(err["error"].as_str().unwrap().contains("name"));

    // move the invoice message out of its auto category into Billing
    let from = service.snapshot().categories_of("bill1@x").unwrap()[0].id.clone();
    let (status, members) = call(
        &app,
        "POST",
        "/api/corrections",
        Some(json!({"message_id": "bill1@x", "from_category": from, "to_category": billing})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let list = members.as_array().unwrap();
    assert_eq!(list.len(), 1);
    assert_eq!(list[0]["category_id"], billing.as_str());
    assert_eq!(list[0]["score"], 1.0);
    assert_eq!(list[0]["provenance"], "user");
    assert_eq!(list[0]["name"], "Billing");

    let (status, _) =
        call(&app, "POST", "/api/corrections", Some(json!({"message_id": "ghost", "to_category": billing}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, members) = call(&app, "POST", "/api/messages/grid2@x/spam", Some(json!({"is_spam": true}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(members, json!([{"category_id": "spam", "name": "spam", "score": 1.0, "provenance": "user"}]));
    assert_eq!(service.read(|e| e.classifier().spam_model.nbad), 1);

    let (status, members) = call(&app, "POST", "/api/messages/grid2@x/spam", Some(json!({"is_spam": false}))).await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = members.as_array().unwrap().iter().map(|m| m["category_id"].as_str().unwrap()).collect();
    assert!(!ids.contains(&"spam") && !ids.is_empty());
    assert_eq!(service.read(|e| e.classifier().spam_model.ngood), 1);

    let (status, _) = call(&app, "POST", "/api/messages/grid2@x/spam", Some(json!({"is_spam": "yes"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, err) = call(&app, "POST", &format!("/api/categories/{billing}/subcluster"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["error"], "too few members");
}

#[tokio::test]
async fn malformed_json_is_a_bad_request() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(seeded_service(dir.path()), None);
    let request = Request::builder()
        .method("POST")
        .uri("/api/corrections")
        .header("content-type", "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    let response = app.oneshot(request).await.unwrap();
    assert_eq!(response.status(), StatusCode::BAD_REQUEST);
    let bytes = axum::body::to_bytes(response.into_body(), usize::MAX).await.unwrap();
    let v: Value = serde_json::from_slice(&bytes).unwrap();
    assert!(v["error"].as_str().unwrap().starts_with("invalid request body"));
}

#[tokio::test]
async fn sync_jobs_are_pollable() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(seeded_service(dir.path()), None);

    let (status, started) = call(&app, "POST", "/api/sync", None).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let job_id = started["job_id"].as_str().unwrap().to_string();

    let mut job = Value::Null;
    for _ in 0..200 {
        let (status, j) = call(&app, "GET", &format!("/api/sync/{job_id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        job = j;
        if job["state"] == "done" || job["state"] == "failed" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    assert_eq!(job["state"], "done");
    assert_eq!(job["fetched"], 0);
    assert!(job["finished_at"].is_string());

    let (status, _) = call(&app, "GET", "/api/sync/job-999", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, err) = call(&app, "POST", "/api/sync", Some(json!({"accounts": ["nobody"]}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(err["error"].as_str().unwrap().contains("nobody"));
}

#[tokio::test]
async fn serves_static_files_at_root() {
    let dir = tempfile::tempdir().unwrap();
    let service = seeded_service(&dir.path().join("data"));

    let (status, _) = call(&router(Arc::clone(&service), None), "GET", "/", None).await;
    assert_eq!(status, StatusCode::OK);

    let web = dir.path().join("web");
    std::fs::create_dir(&web).unwrap();
    std::fs::write(web.join("index.html"), "<h1>console</h1>").unwrap();
    let app = router(service, Some(web));
    let response = app.clone().oneshot(Request::get("/").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(response.status(), StatusCode::OK);
    let bytes = axum::body::to_bytes(response.into_body(), usize::MAX).await.unwrap();
    assert_eq!(&bytes[..], b"<h1>console</h1>");
    // the API still wins over the static tree
    let (status, _) = call(&app, "GET", "/api/categories", None).await;
    assert_eq!(status, StatusCode::OK);
}
