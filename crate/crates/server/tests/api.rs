use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use vaxopt_core::control::project_feasible;
use vaxopt_core::DosingPolicy;
use vaxopt_server::{router, Job, JobState, Store};

const CONFIG: &str = r#"
name = "api"
seed = 3
objective = "deceased"

[model]
kind = "reference"
populations = [1.0e6, 1.2e6, 1.3e6, 1.1e6, 4.0e5]
contact = [[3.0, 1.0, 0.8, 0.4, 0.2], [1.0, 2.5, 1.2, 0.5, 0.2], [0.8, 1.2, 2.0, 0.7, 0.3], [0.4, 0.5, 0.7, 1.5, 0.5], [0.2, 0.2, 0.3, 0.5, 1.0]]
beta = [0.02, 0.02, 0.02, 0.02]
hosp_fraction = 0.1
hosp_propensity = [0.01, 0.03, 0.08, 0.2, 0.4]

[initial]
infected = [2000.0, 3000.0, 3000.0, 1500.0, 500.0]

[scenario]
ig_kind = "homogeneous"
horizon_days = 28
budget = { mode = "constant", per_week = 70000.0 }

[policy]
delta_w = 21

[pgd]
max_iters = 15

[diagnostics]
scan_resolution = 3
"#;

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, body)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, _, b) = send(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (s, _, b) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn create_config(app: &Router, toml: &str) -> String {
    let req = Request::post("/api/v1/configs")
        .header(header::CONTENT_TYPE, "application/toml")
        .body(Body::from(toml.to_string()))
        .unwrap();
    let (s, _, b) = send(app, req).await;
    assert_eq!(s, StatusCode::CREATED, "{}", String::from_utf8_lossy(&b));
    let v: Value = serde_json::from_slice(&b).unwrap();
    v["id"].as_str().unwrap().to_string()
}

async fn wait_finished(app: &Router, id: &str) -> Job {
    for _ in 0..600 {
        let (s, v) = get(app, &format!("/api/v1/runs/{id}")).await;
        assert_eq!(s, StatusCode::OK);
        let job: Job = serde_json::from_value(v).unwrap();
        if job.state.finished() {
            return job;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("job {id} did not finish");
}

fn app(dir: &std::path::Path) -> Router {
    router(Store::open(dir, 2).unwrap())
}

#[tokio::test]
async fn configs_are_created_listed_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create_config(&app, CONFIG).await;
    assert_eq!(create_config(&app, CONFIG).await, id);

    let (s, list) = get(&app, "/api/v1/configs").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(list, json!([{ "id": id, "name": "api", "objective": "deceased" }]));

    let (s, cfg) = get(&app, &format!("/api/v1/configs/{id}")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(cfg["scenario"]["horizon_days"], 28);

    // JSON body of the same config maps to the same id.
    let (s, created) = post(&app, "/api/v1/configs", cfg.clone()).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(created["id"], id);

    let mut bad = cfg.clone();
    bad["policy"]["delta_w"] = json!(10);
    let (s, err) = post(&app, "/api/v1/configs", bad).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(err["error"].as_str().unwrap().contains("delta_w"));

    let (s, _) = get(&app, "/api/v1/configs/0123456789abcdef").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn zero_budget_run_goes_queued_running_done() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create_config(&app, &CONFIG.replace("per_week = 70000.0", "per_week = 0.0")).await;
    let (s, job) = post(&app, "/api/v1/runs", json!({ "config_id": id })).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_eq!(job["history"], json!(["queued"]));
    let job = wait_finished(&app, &id).await;
    assert_eq!(job.state, JobState::Done, "{:?}", job.failure);
    assert_eq!(job.history, [JobState::Queued, JobState::Running, JobState::Done]);

    let (s, trace) = get(&app, &format!("/api/v1/runs/{id}/trace")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(trace["records"].as_array().unwrap().len(), 1);

    // Resubmitting binds to the finished job.
    let (s, again) = post(&app, "/api/v1/runs", json!({ "config_id": id })).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(again["state"], "done");

    // A fresh process on the same directory sees the finished job.
    let reopened = router(Store::open(dir.path(), 1).unwrap());
    let (s, v) = get(&reopened, &format!("/api/v1/runs/{id}")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["state"], "done");
}

#[tokio::test]
async fn artifacts_carry_stable_etags() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create_config(&app, CONFIG).await;
    post(&app, "/api/v1/runs", json!({ "config_id": id })).await;
    assert_eq!(wait_finished(&app, &id).await.state, JobState::Done);

    for artifact in ["trajectories", "trace", "variation", "scan", "policy", "reproduction", "status", "manifest"] {
        let uri = format!("/api/v1/runs/{id}/{artifact}");
        let (s, h, body) = send(&app, Request::get(&uri).body(Body::empty()).unwrap()).await;
        assert_eq!(s, StatusCode::OK, "{artifact}");
        assert!(serde_json::from_slice::<Value>(&body).is_ok(), "{artifact}");
        let etag = h[header::ETAG].to_str().unwrap().to_string();
        let (s2, h2, body2) = send(&app, Request::get(&uri).body(Body::empty()).unwrap()).await;
        assert_eq!((s2, h2[header::ETAG].to_str().unwrap()), (StatusCode::OK, etag.as_str()));
        assert_eq!(body, body2);
        let cached = Request::get(&uri).header(header::IF_NONE_MATCH, &etag).body(Body::empty()).unwrap();
        let (s3, _, body3) = send(&app, cached).await;
        assert_eq!(s3, StatusCode::NOT_MODIFIED, "{artifact}");
        assert!(body3.is_empty());
    }

    let (s, h, csv) = send(
        &app,
        Request::get(format!("/api/v1/runs/{id}/policy?which=initial&format=csv")).body(Body::empty()).unwrap(),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(h[header::CONTENT_TYPE], "text/csv");
    assert!(!csv.is_empty());

    let (s, _) = get(&app, &format!("/api/v1/runs/{id}/calibration")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = get(&app, &format!("/api/v1/runs/{id}/nonsense")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn policy_edits_round_trip_through_projection() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create_config(&app, CONFIG).await;
    post(&app, "/api/v1/runs", json!({ "config_id": id })).await;
    assert_eq!(wait_finished(&app, &id).await.state, JobState::Done);

    let (_, initial) = get(&app, &format!("/api/v1/runs/{id}/policy?which=initial")).await;
    let skeleton: DosingPolicy = serde_json::from_value(initial).unwrap();
    let table = vec![
        vec![5000.0, 0.0, 2000.0, 9000.0],
        vec![1000.0, 1000.0, -5.0, 0.0],
        vec![0.0, 4000.0, 4000.0, 0.0],
        vec![3000.0, 0.0, 0.0, 12000.0],
        vec![800.0, 800.0, 800.0, 800.0],
    ];
    let (s, v) = post(&app, &format!("/api/v1/runs/{id}/simulate"), json!({ "u1": table })).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let returned: DosingPolicy = serde_json::from_value(v["policy"].clone()).unwrap();
    assert_eq!(returned, project_feasible(&table, &skeleton).unwrap());
    assert!(returned.is_feasible());
    assert_eq!(v["trajectory"]["days"].as_array().unwrap().len(), 29);

    // A feasible table comes back unchanged.
    let (_, again) = post(&app, &format!("/api/v1/runs/{id}/simulate"), json!({ "u1": returned.u1 })).await;
    let again: DosingPolicy = serde_json::from_value(again["policy"].clone()).unwrap();
    assert_eq!(again, returned);

    let (s, _) = post(&app, &format!("/api/v1/runs/{id}/simulate"), json!({ "u1": [[1.0]] })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn identical_policies_compare_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create_config(&app, CONFIG).await;
    post(&app, "/api/v1/runs", json!({ "config_id": id })).await;
    assert_eq!(wait_finished(&app, &id).await.state, JobState::Done);

    let (_, initial) = get(&app, &format!("/api/v1/runs/{id}/policy?which=initial")).await;
    let u1 = initial["u1"].clone();
    let (s, report) = post(&app, &format!("/api/v1/runs/{id}/compare"), json!({ "base": u1, "optimal": u1 })).await;
    assert_eq!(s, StatusCode::OK);
    for key in ["lambda_i", "lambda_h", "lambda_d"] {
        let series = report[key].as_array().unwrap();
        assert_eq!(series.len(), 29);
        assert!(series.iter().all(|x| x.as_f64() == Some(0.0)), "{key}");
    }

    let (_, stored) = get(&app, &format!("/api/v1/runs/{id}/variation")).await;
    let (_, fresh) = post(&app, &format!("/api/v1/runs/{id}/compare"), json!({})).await;
    assert_eq!(stored["lambda_d"], fresh["lambda_d"]);
}

#[tokio::test]
async fn unknown_jobs_are_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (s, v) = get(&app, "/api/v1/runs/deadbeef").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(v["error"].as_str().unwrap().contains("not found"));
    let (s, _) = get(&app, "/api/v1/runs/deadbeef/trace").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = post(&app, "/api/v1/runs", json!({ "config_id": "deadbeef" })).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = post(&app, "/api/v1/runs", json!({})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, v) = get(&app, "/api/v1/health").await;
    assert_eq!((s, v), (StatusCode::OK, json!({ "status": "ok" })));
}
