use std::path::{Path, PathBuf};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use broker_cli::service::{router, AppState, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn wwg_plan() -> String {
    std::fs::read_to_string(root().join("testbeds/wwg.pln")).unwrap()
}

fn app(data_dir: Option<PathBuf>) -> Router {
    router(AppState::new(ServiceConfig {
        data_dir,
        testbed_dir: root().join("testbeds"),
        pace: 0.0,
    }))
}

async fn send(app: &Router, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, String) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(Body::from(body.unwrap_or("").to_string())).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

async fn send_json(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let text = body.map(|b| b.to_string());
    let (s, t) = send(app, method, uri, text.as_deref()).await;
    (s, serde_json::from_str(&t).unwrap_or(Value::Null))
}

fn create_body(pace: f64, start: bool) -> Value {
    json!({
        "plan": wwg_plan(),
        "testbed": "wwg",
        "qos": { "deadline_min": 120, "budget": 396000, "strategy": "cost" },
        "config": { "seed": 1 },
        "pace": pace,
        "start": start,
    })
}

async fn create(app: &Router, pace: f64, start: bool) -> String {
    let (s, v) = send_json(app, Method::POST, "/experiments", Some(create_body(pace, start))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

async fn wait_for(app: &Router, id: &str, done: impl Fn(&Value) -> bool) -> Value {
    for _ in 0..2000 {
        let (s, v) = send_json(app, Method::GET, &format!("/experiments/{id}"), None).await;
        assert_eq!(s, StatusCode::OK);
        if done(&v) {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    panic!("experiment {id} never reached the expected state");
}

fn terminal(v: &Value) -> bool {
    matches!(v["phase"].as_str(), Some("Completed" | "FailedDeadline" | "FailedBudget" | "Stopped"))
}

struct Frame {
    event: Option<String>,
    data: String,
}

fn frames(text: &str) -> Vec<Frame> {
    text.split("\n\n")
        .filter_map(|block| {
            let mut event = None;
            let mut data = None;
            for line in block.lines() {
                if let Some(e) = line.strip_prefix("event: ") {
                    event = Some(e.to_string());
                } else if let Some(d) = line.strip_prefix("data: ") {
                    data = Some(d.to_string());
                }
            }
            data.map(|data| Frame { event, data })
        })
        .collect()
}

async fn events(app: &Router, id: &str, from: u64) -> Vec<Frame> {
    let uri = format!("/experiments/{id}/events?from={from}");
    let fut = send(app, Method::GET, &uri, None);
    let (s, text) = tokio::time::timeout(Duration::from_secs(30), fut).await.expect("stream never ended");
    assert_eq!(s, StatusCode::OK);
    frames(&text)
}

#[tokio::test]
async fn create_reports_jobs_and_starts_idle() {
    let app = app(None);
    let (s, v) = send_json(&app, Method::POST, "/experiments", Some(create_body(0.0, false))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["jobs"], 165);
    let id = v["id"].as_str().unwrap();
    let (s, v) = send_json(&app, Method::GET, &format!("/experiments/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["phase"], "Created");
    assert_eq!(v["jobs"]["Ready"], 165);
    assert_eq!(v["accounts"]["remaining"], 396000);
    let (s, _) = send(&app, Method::GET, &format!("/experiments/{id}/timeseries"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn unknown_experiments_are_404() {
    let app = app(None);
    for (m, uri) in [
        (Method::GET, "/experiments/exp-9"),
        (Method::POST, "/experiments/exp-9/start"),
        (Method::GET, "/experiments/exp-9/jobs"),
        (Method::GET, "/experiments/exp-9/events"),
        (Method::DELETE, "/experiments/exp-9"),
    ] {
        let (s, v) = send_json(&app, m, uri, None).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
        assert!(v["error"].is_string());
    }
}

#[tokio::test]
async fn malformed_requests_are_422() {
    let app = app(None);
    let mut bodies = vec![json!("not an object")];
    let mut b = create_body(0.0, false);
    b["testbed"] = json!("../secret");
    bodies.push(b);
    let mut b = create_body(0.0, false);
    b["testbed"] = json!("nowhere");
    bodies.push(b);
    let mut b = create_body(0.0, false);
    b["plan"] = json!("parameter x range from 1 to 3\n");
    bodies.push(b);
    let mut b = create_body(0.0, false);
    b["config"] = json!({ "turbo": true });
    bodies.push(b);
    let mut b = create_body(0.0, false);
    b["pace"] = json!(-1.0);
    bodies.push(b);
    let mut b = create_body(0.0, false);
    b["qos"]["deadline_min"] = json!(0);
    bodies.push(b);
    for body in bodies {
        let (s, v) = send_json(&app, Method::POST, "/experiments", Some(body.clone())).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{body}: {v}");
        assert!(v["error"].is_string());
    }
    let (s, _) = send(&app, Method::POST, "/experiments", Some("{")).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn named_and_inline_testbeds_resolve() {
    let app = app(None);
    let mut b = create_body(0.0, false);
    b["testbed"] = json!("wwg.testbed");
    assert_eq!(send_json(&app, Method::POST, "/experiments", Some(b)).await.0, StatusCode::CREATED);
    let mut b = create_body(0.0, false);
    b["testbed"] = json!("[[resource]]\nid = \"solo\"\nnodes = 40\nprice = 2\n");
    let (s, v) = send_json(&app, Method::POST, "/experiments", Some(b)).await;
    assert_eq!(s, StatusCode::CREATED);
    let id = v["id"].as_str().unwrap();
    send_json(&app, Method::POST, &format!("/experiments/{id}/start"), None).await;
    assert_eq!(wait_for(&app, id, terminal).await["phase"], "Completed");
    let (_, rows) = send_json(&app, Method::GET, &format!("/experiments/{id}/jobs?resource=solo"), None).await;
    assert_eq!(rows.as_array().unwrap().len(), 165);
}

#[tokio::test]
async fn unpaced_run_completes_and_reports() {
    let app = app(None);
    let id = create(&app, 0.0, true).await;
    let v = wait_for(&app, &id, terminal).await;
    assert_eq!(v["phase"], "Completed");
    assert_eq!(v["summary"]["jobs_done"], 165);
    assert_eq!(v["summary"]["total_cost"], 103500);
    assert_eq!(v["accounts"]["spent"], 103500);
    assert_eq!(v["accounts"]["committed"], 0);

    let (s, rows) = send_json(&app, Method::GET, &format!("/experiments/{id}/jobs?state=Done"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(rows.as_array().unwrap().len(), 165);
    let row = &rows[0];
    for key in ["id", "state", "resource", "attempts", "last_outcome", "command"] {
        assert!(row.get(key).is_some(), "missing {key}");
    }
    let (_, rows) = send_json(&app, Method::GET, &format!("/experiments/{id}/jobs?resource=monash-linux"), None).await;
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 160);
    assert!(rows.iter().all(|r| r["resource"] == "monash-linux"));
    let (s, _) = send_json(&app, Method::GET, &format!("/experiments/{id}/jobs?state=Bogus"), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, csv) = send(&app, Method::GET, &format!("/experiments/{id}/timeseries"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(csv.starts_with("t_min,resource,executing,done_cum,spent\n"));
    let (_, coarse) = send(&app, Method::GET, &format!("/experiments/{id}/timeseries?interval=600"), None).await;
    assert!(coarse.lines().count() < csv.lines().count());
    let (s, _) = send(&app, Method::GET, &format!("/experiments/{id}/timeseries?interval=0"), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    for cmd in ["start", "pause", "stop"] {
        let (s, _) = send_json(&app, Method::POST, &format!("/experiments/{id}/{cmd}"), None).await;
        assert_eq!(s, StatusCode::CONFLICT, "{cmd}");
    }
}

#[tokio::test]
async fn qos_patches_apply_and_validate() {
    let app = app(None);
    let id = create(&app, 0.0, false).await;
    let uri = format!("/experiments/{id}/qos");
    let (s, v) = send_json(&app, Method::PATCH, &uri, Some(json!({ "budget": 500000, "strategy": "time" }))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["qos"]["budget"], 500000);
    assert_eq!(v["qos"]["strategy"], "time");
    assert_eq!(v["qos"]["deadline_min"], 120);
    assert!(v["seq"].as_u64().unwrap() >= 2);
    let (s, _) = send_json(&app, Method::PATCH, &uri, Some(json!({ "deadline_min": 0 }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = send_json(&app, Method::PATCH, &uri, Some(json!({ "strategy": "fastest" }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, v) = send_json(&app, Method::PATCH, &uri, Some(json!({ "deadline": 90 }))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["qos"]["deadline_min"], 90);
}

#[tokio::test]
async fn budget_cut_below_commitments_is_refused() {
    let app = app(None);
    let id = create(&app, 600.0, true).await;
    wait_for(&app, &id, |v| v["accounts"]["committed"].as_u64().unwrap_or(0) > 0).await;
    let (s, v) = send_json(&app, Method::POST, &format!("/experiments/{id}/pause"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["phase"], "Paused");
    let floor = v["accounts"]["spent"].as_u64().unwrap() + v["accounts"]["committed"].as_u64().unwrap();
    let uri = format!("/experiments/{id}/qos");
    let (s, _) = send_json(&app, Method::PATCH, &uri, Some(json!({ "budget": floor - 1 }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = send_json(&app, Method::PATCH, &uri, Some(json!({ "budget": floor }))).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = send_json(&app, Method::POST, &format!("/experiments/{id}/stop"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["phase"], "Stopped");
}

#[tokio::test]
async fn event_replay_covers_the_journal() {
    let app = app(None);
    let id = create(&app, 0.0, true).await;
    let v = wait_for(&app, &id, terminal).await;
    let head = v["seq"].as_u64().unwrap();

    let all = events(&app, &id, 0).await;
    assert_eq!(all.len() as u64, head);
    let records: Vec<Value> = all.iter().map(|f| serde_json::from_str(&f.data).unwrap()).collect();
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["seq"], i as u64 + 1);
        assert!(all[i].event.is_none());
    }
    assert_eq!(records[0]["kind"], "ExperimentCreated");
    let last = records.last().unwrap();
    assert_eq!(last["kind"], "PhaseChanged");
    assert_eq!(last["payload"]["to"], "Completed");

    let tail = events(&app, &id, head - 4).await;
    assert_eq!(tail.len(), 5);
    assert_eq!(tail[0].data, all[head as usize - 5].data);
    assert!(events(&app, &id, head + 10).await.is_empty());
}

#[tokio::test]
async fn live_subscribers_see_identical_streams() {
    let app = app(None);
    let id = create(&app, 0.0, false).await;
    let a = tokio::spawn({
        let app = app.clone();
        let id = id.clone();
        async move { events(&app, &id, 0).await.into_iter().map(|f| f.data).collect::<Vec<_>>() }
    });
    let b = tokio::spawn({
        let app = app.clone();
        let id = id.clone();
        async move { events(&app, &id, 0).await.into_iter().map(|f| f.data).collect::<Vec<_>>() }
    });
    tokio::time::sleep(Duration::from_millis(20)).await;
    let (s, _) = send_json(&app, Method::POST, &format!("/experiments/{id}/start"), None).await;
    assert_eq!(s, StatusCode::OK);
    let (a, b) = (a.await.unwrap(), b.await.unwrap());
    assert_eq!(a, b);
    let last: Value = serde_json::from_str(a.last().unwrap()).unwrap();
    assert_eq!(last["payload"]["to"], "Completed");
}

#[tokio::test]
async fn delete_closes_streams_with_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(Some(dir.path().to_path_buf()));
    let id = create(&app, 1.0, true).await;
    let journal = dir.path().join(format!("{id}.jsonl"));
    assert!(journal.exists());
    let sub = tokio::spawn({
        let app = app.clone();
        let id = id.clone();
        async move { events(&app, &id, 0).await }
    });
    tokio::time::sleep(Duration::from_millis(50)).await;
    let (s, _) = send(&app, Method::DELETE, &format!("/experiments/{id}"), None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let got = sub.await.unwrap();
    let last = got.last().unwrap();
    assert_eq!(last.event.as_deref(), Some("error"));
    assert!(got[..got.len() - 1].iter().all(|f| f.event.is_none()));
    assert!(!journal.exists());
    let (s, _) = send(&app, Method::GET, &format!("/experiments/{id}"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn data_dir_experiments_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let first = app(Some(dir.path().to_path_buf()));
    let id = create(&first, 0.0, true).await;
    let before = wait_for(&first, &id, terminal).await;

    let state = AppState::new(ServiceConfig {
        data_dir: Some(dir.path().to_path_buf()),
        testbed_dir: root().join("testbeds"),
        pace: 0.0,
    });
    assert_eq!(state.recover_all().unwrap(), vec![id.clone()]);
    let second = router(state);
    let after = wait_for(&second, &id, terminal).await;
    assert_eq!(after["summary"], before["summary"]);
    assert_eq!(after["seq"], before["seq"]);
    let fresh = create(&second, 0.0, false).await;
    assert_ne!(fresh, id);
}

#[tokio::test]
async fn events_stream_over_a_socket() {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};

    let app = app(None);
    let id = create(&app, 0.0, true).await;
    wait_for(&app, &id, terminal).await;
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });

    let mut sock = tokio::net::TcpStream::connect(addr).await.unwrap();
    let req = format!("GET /experiments/{id}/events HTTP/1.1\r\nHost: x\r\nAccept: text/event-stream\r\nConnection: close\r\n\r\n");
    sock.write_all(req.as_bytes()).await.unwrap();
    let mut raw = Vec::new();
    tokio::time::timeout(Duration::from_secs(30), sock.read_to_end(&mut raw))
        .await
        .expect("socket never closed")
        .unwrap();
    let raw = String::from_utf8_lossy(&raw);
    let (head, _) = raw.split_once("\r\n\r\n").unwrap();
    assert!(head.starts_with("HTTP/1.1 200"));
    assert!(head.to_ascii_lowercase().contains("content-type: text/event-stream"));
    assert!(raw.contains("\"kind\":\"ExperimentCreated\""));
    assert!(raw.contains("\"to\":\"Completed\""));
}
