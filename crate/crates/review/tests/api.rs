use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use hapi_core::claims::PatientId;
use hapi_core::pipeline::Workspace;
use hapi_core::synth::GeneratorConfig;
use hapi_core::workflow::default_week_grid;
use hapi_review::api::router;
use hapi_review::service::{ReviewService, ServiceConfig};

fn data_dir() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        Workspace::new(dir.path())
            .run_all(&GeneratorConfig::with_total(500, 3), false)
            .unwrap();
        dir
    })
    .path()
}

struct Fixture {
    _logs: tempfile::TempDir,
    log: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let logs = tempfile::tempdir().unwrap();
        let log = logs.path().join("decisions.jsonl");
        Fixture { _logs: logs, log }
    }

    fn service(&self) -> Arc<ReviewService> {
        let config = ServiceConfig {
            log: Some(self.log.clone()),
            ..ServiceConfig::new(data_dir())
        };
        Arc::new(ReviewService::open(&config).unwrap())
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(
            body.map(|b| Body::from(b.to_string()))
                .unwrap_or_else(Body::empty),
        )
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, v)
}

async fn advance(app: &Router, weeks: i64) -> Value {
    let (s, v) = call(
        app,
        "POST",
        "/api/v1/clock/advance",
        Some(&json!({ "weeks": weeks }).to_string()),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v
}

async fn all_cases(app: &Router, status: &str) -> Vec<Value> {
    let mut out = Vec::new();
    for page in 1.. {
        let (s, v) = call(
            app,
            "GET",
            &format!("/api/v1/cases?status={status}&page={page}&page_size=7"),
            None,
        )
        .await;
        assert_eq!(s, StatusCode::OK, "{v}");
        let cases = v["cases"].as_array().unwrap();
        if cases.is_empty() {
            assert_eq!(out.len() as u64, v["total"].as_u64().unwrap());
            break;
        }
        out.extend(cases.iter().cloned());
    }
    out
}

fn decision() -> String {
    json!({"call": true, "predicted_complication": "ght", "note": "bp rising"}).to_string()
}

#[tokio::test]
async fn unknown_patient_is_404_with_a_code() {
    let fx = Fixture::new();
    let app = router(fx.service());
    for (method, uri, body) in [
        ("GET", "/api/v1/patients/nobody/timeline", None),
        ("GET", "/api/v1/patients/nobody/evidence", None),
        ("GET", "/api/v1/cases/nobody", None),
        ("POST", "/api/v1/cases/nobody/decision", Some(decision())),
    ] {
        let (s, v) = call(&app, method, uri, body.as_deref()).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(v["error"]["code"], "patient_not_found", "{uri}");
    }
    let (s, v) = call(&app, "GET", "/api/v1/nowhere", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["code"], "route_not_found");
}

#[tokio::test]
async fn malformed_bodies_list_every_bad_field() {
    let fx = Fixture::new();
    let svc = fx.service();
    let app = router(svc.clone());
    let pid = svc.corpus().patients().next().unwrap().to_string();
    let uri = format!("/api/v1/cases/{pid}/decision");

    let body =
        json!({"call": "yes", "predicted_complication": 4, "note": 1, "mood": "ok"}).to_string();
    let (s, v) = call(&app, "POST", &uri, Some(&body)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["code"], "validation_failed");
    let fields: Vec<&str> = v["error"]["fields"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["field"].as_str().unwrap())
        .collect();
    assert_eq!(fields, ["call", "predicted_complication", "note", "mood"]);

    let (s, v) = call(&app, "POST", &uri, Some("{not json")).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["fields"][0]["field"], "body");

    let (s, v) = call(
        &app,
        "POST",
        "/api/v1/clock/advance",
        Some(r#"{"weeks": -2}"#),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["fields"][0]["field"], "weeks");

    let (s, v) = call(
        &app,
        "GET",
        "/api/v1/cases?status=maybe&page=0&page_size=x",
        None,
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let n = v["error"]["fields"].as_array().unwrap().len();
    assert_eq!(n, 2, "{v}");
    let (s, _) = call(&app, "GET", "/api/v1/cases?page=0", None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn advancing_surfaces_cases_and_timelines_stop_at_the_clock() {
    let fx = Fixture::new();
    let svc = fx.service();
    let app = router(svc.clone());
    let (_, clock) = call(&app, "GET", "/api/v1/clock", None).await;
    let start = clock["week"].as_i64().unwrap();
    let max = clock["max_week"].as_i64().unwrap();

    let mut seen = 0;
    let mut week = start;
    while week < max {
        let v = advance(&app, 26).await;
        let now = v["clock"]["week"].as_i64().unwrap();
        assert!(now > week && now <= max);
        week = now;
        let cases = all_cases(&app, "all").await;
        assert_eq!(cases.len(), seen + v["surfaced"].as_array().unwrap().len());
        seen = cases.len();
        for c in &cases {
            assert!(c["surfaced_at"].as_i64().unwrap() <= week);
        }
        for pid in svc.corpus().patients().take(15) {
            let (s, t) = call(
                &app,
                "GET",
                &format!("/api/v1/patients/{pid}/timeline"),
                None,
            )
            .await;
            assert_eq!(s, StatusCode::OK);
            assert_eq!(t["clock_week"], week);
            for p in t["weeks"].as_array().unwrap() {
                assert!(p["week"].as_i64().unwrap() <= week);
            }
        }
    }
    assert!(seen > 0, "no case surfaced over the whole corpus");
    assert_eq!(advance(&app, 10).await["clock"]["week"], max);
}

#[tokio::test]
async fn surfaced_snapshot_equals_the_batch_computation() {
    let fx = Fixture::new();
    let svc = fx.service();
    let app = router(svc.clone());
    advance(&app, 100_000).await;
    let ws = Workspace::new(data_dir());
    let identifier = ws.load_identifier().unwrap();
    let (triage, _) = ws.load_triage().unwrap();
    let grid = default_week_grid();

    let cases = all_cases(&app, "pending").await;
    assert!(!cases.is_empty());
    for c in cases {
        let pid = PatientId::new(c["patient_id"].as_str().unwrap());
        let at = c["surfaced_at"].as_i64().unwrap();
        let record = svc.corpus().record(&pid).unwrap();
        let batch = identifier.run_patient(record, &grid, Some(grid.as_of(at)), None);
        let start = batch.inference.start.expect("batch run finds the start");
        assert_eq!(batch.weeks[start].week, at, "{pid}");
        let inferred_start = batch.weeks[start].as_of;
        let (risk, items) = triage.predict_with_evidence(record, inferred_start, grid.as_of(at));

        let case = svc.get_case(pid.as_str()).unwrap();
        assert_eq!(case.snapshot.inferred_start, inferred_start);
        assert_eq!(case.snapshot.risk, risk);
        let snap_items: Vec<_> = case
            .snapshot
            .evidence
            .iter()
            .map(|e| e.item.clone())
            .collect();
        assert_eq!(snap_items, items);
        let tail = &case.snapshot.timeline_tail;
        assert_eq!(tail.last().unwrap().week, at);
        let n = batch.weeks.len();
        assert_eq!(tail[..], batch.weeks[n - tail.len()..]);
    }
}

#[tokio::test]
async fn ordering_is_stable_and_responses_are_pure() {
    let fx = Fixture::new();
    let app = router(fx.service());
    advance(&app, 100_000).await;
    let a = all_cases(&app, "all").await;
    let keys: Vec<(i64, String)> = a
        .iter()
        .map(|c| {
            (
                c["surfaced_at"].as_i64().unwrap(),
                c["patient_id"].as_str().unwrap().to_string(),
            )
        })
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert_eq!(all_cases(&app, "all").await, a);

    let other = Fixture::new();
    let app2 = router(other.service());
    advance(&app2, 100_000).await;
    assert_eq!(all_cases(&app2, "all").await, a);
    let pid = keys[0].1.clone();
    let uri = format!("/api/v1/patients/{pid}/evidence");
    assert_eq!(
        call(&app, "GET", &uri, None).await,
        call(&app2, "GET", &uri, None).await
    );
}

#[tokio::test]
async fn decisions_conflict_and_survive_restart() {
    let fx = Fixture::new();
    let app = router(fx.service());
    advance(&app, 100_000).await;
    let cases = all_cases(&app, "pending").await;
    let pid = cases[0]["patient_id"].as_str().unwrap().to_string();
    let uri = format!("/api/v1/cases/{pid}/decision");

    let (s, d) = call(&app, "POST", &uri, Some(&decision())).await;
    assert_eq!(s, StatusCode::CREATED, "{d}");
    assert_eq!(d["predicted_complication"], "ght");
    let (s, v) = call(&app, "POST", &uri, Some(&decision())).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"]["code"], "duplicate_decision");

    let reviewed = all_cases(&app, "reviewed").await;
    assert_eq!(reviewed.len(), 1);
    assert_eq!(all_cases(&app, "pending").await.len(), cases.len() - 1);

    drop(app);
    let app = router(fx.service());
    let (_, clock) = call(&app, "GET", "/api/v1/clock", None).await;
    assert_eq!(clock["week"], clock["max_week"]);
    let (s, c) = call(&app, "GET", &format!("/api/v1/cases/{pid}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(c["status"], "reviewed");
    assert_eq!(c["decision"], d);
    assert_eq!(all_cases(&app, "reviewed").await, reviewed);
}

#[tokio::test]
async fn undecided_case_before_surfacing_is_404() {
    let fx = Fixture::new();
    let svc = fx.service();
    let app = router(svc.clone());
    let surfaced: Vec<String> = all_cases(&app, "all")
        .await
        .iter()
        .map(|c| c["patient_id"].as_str().unwrap().to_string())
        .collect();
    let pid = svc
        .corpus()
        .patients()
        .map(|p| p.to_string())
        .find(|p| !surfaced.contains(p))
        .unwrap();
    let (s, v) = call(
        &app,
        "POST",
        &format!("/api/v1/cases/{pid}/decision"),
        Some(&decision()),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["code"], "case_not_found");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 8)]
async fn concurrent_decisions_succeed_exactly_once() {
    let fx = Fixture::new();
    let app = router(fx.service());
    advance(&app, 100_000).await;
    let pid = all_cases(&app, "pending").await[0]["patient_id"]
        .as_str()
        .unwrap()
        .to_string();
    let uri = format!("/api/v1/cases/{pid}/decision");
    let tasks: Vec<_> = (0..32)
        .map(|_| {
            let app = app.clone();
            let uri = uri.clone();
            tokio::spawn(async move { call(&app, "POST", &uri, Some(&decision())).await.0 })
        })
        .collect();
    let mut created = 0;
    let mut conflicts = 0;
    for t in tasks {
        match t.await.unwrap() {
            StatusCode::CREATED => created += 1,
            StatusCode::CONFLICT => conflicts += 1,
            s => panic!("unexpected {s}"),
        }
    }
    assert_eq!((created, conflicts), (1, 31));
    let lines = std::fs::read_to_string(&fx.log).unwrap();
    assert_eq!(
        lines.lines().filter(|l| l.contains("\"decision\"")).count(),
        1
    );
}
