use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tilepart::ir::print_module;
use tilepart::schedule::{parse_schedule, Partitioner};
use tilepart::sim::DeviceSpec;
use tilepart::zoo::{generate_model, ModelKind, ZooConfig};
use tilepart_service::{app, current_ir, AppState};
use tower::ServiceExt;

fn chain() -> String {
    let m = generate_model(ModelKind::Chain, &ZooConfig::for_kind(ModelKind::Chain)).unwrap();
    print_module(&m.module)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

async fn session(app: &Router, module: &str) -> String {
    let (s, v) = call(app, "POST", "/sessions", Some(json!({ "module": module }))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

fn bp() -> Value {
    json!({"kind": "manual", "name": "BP", "axis": "B", "shardings": {"x": 0}})
}

fn z3() -> Value {
    json!({"kind": "manual", "name": "Z3", "axis": "B", "shardings": {"w1": "FIRST_DIVISIBLE_DIM", "w2": "FIRST_DIVISIBLE_DIM"}})
}

fn total(c: &Value) -> u64 {
    ["all_gather", "all_reduce", "reduce_scatter", "all_to_all"].iter().map(|k| c[k].as_u64().unwrap()).sum()
}

#[tokio::test]
async fn create_returns_distinct_ids_and_initial_cost() {
    let app = app(AppState::default());
    let (s, v) = call(&app, "POST", "/sessions", Some(json!({ "module": chain() }))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(total(&v["initial"]["collectives"]), 0);
    assert!(v["initial"]["cost"]["per_device_flops"].as_u64().unwrap() > 0);
    let b = session(&app, &chain()).await;
    assert_ne!(v["id"].as_str().unwrap(), b);
    let (_, list) = call(&app, "GET", "/sessions", None).await;
    assert_eq!(list.as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn tactics_report_collectives_and_cost() {
    let app = app(AppState::default());
    let (_, v) = call(&app, "POST", "/sessions", Some(json!({ "module": chain() }))).await;
    let id = v["id"].as_str().unwrap();
    let flops = v["initial"]["cost"]["per_device_flops"].as_u64().unwrap();

    let (s, r) = call(&app, "POST", &format!("/sessions/{id}/tactics"), Some(bp())).await;
    assert_eq!(s, StatusCode::OK, "{r}");
    assert_eq!(total(&r["collectives"]), 0);
    assert_eq!(r["cost"]["per_device_flops"].as_u64().unwrap(), flops / 4);
    assert_eq!(r["dump"], json!(format!("/sessions/{id}/tactics/0")));

    let (s, r) = call(&app, "POST", &format!("/sessions/{id}/tactics"), Some(z3())).await;
    assert_eq!(s, StatusCode::OK, "{r}");
    assert_eq!(r["index"], 1);
    assert_eq!(r["collectives"]["all_gather"], 2);

    let (s, one) = call(&app, "GET", &format!("/sessions/{id}/tactics/1"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(one["label"], "Z3");
    let (_, view) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    let labels: Vec<_> = view["reports"].as_array().unwrap().iter().map(|r| r["label"].clone()).collect();
    assert_eq!(labels, [json!("BP"), json!("Z3")]);
    assert_eq!(view["tactics"].as_array().unwrap().len(), 2);
    assert_eq!(view["ir"], one["ir"]);
}

#[tokio::test]
async fn batched_conflict_is_reported_not_rejected() {
    let app = app(AppState::default());
    let id = session(&app, &chain()).await;
    let t = json!({"kind": "manual", "axis": "B", "shardings": {"x": 0, "w1": 1}});
    let (s, r) = call(&app, "POST", &format!("/sessions/{id}/tactics"), Some(t)).await;
    assert_eq!(s, StatusCode::OK, "{r}");
    assert_eq!(r["conflicts"].as_array().unwrap().len(), 1);
    assert_eq!(r["conflicts"][0]["candidates"].as_array().unwrap().len(), 2);
    let (_, view) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(view["reports"].as_array().unwrap().len(), 1);
    assert_ne!(view["ir"], view["base"]);
}

#[tokio::test]
async fn rejected_tactics_leave_the_session_alone() {
    let app = app(AppState::default());
    let id = session(&app, &chain()).await;
    call(&app, "POST", &format!("/sessions/{id}/tactics"), Some(bp())).await;
    let (_, before) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    let bad = [
        json!({"kind": "manual", "axis": "B", "shardings": {"nothing*": 0}}),
        json!({"kind": "manual", "axis": "Q", "shardings": {"x": 1}}),
        json!({"kind": "manual", "axis": "B", "shardings": {"x": 1}}),
    ];
    for t in bad {
        let (s, e) = call(&app, "POST", &format!("/sessions/{id}/tactics"), Some(t)).await;
        assert_eq!(s, StatusCode::CONFLICT, "{e}");
        assert_eq!(e["error"]["kind"], "tactic");
        let (_, after) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
        assert_eq!(after, before);
    }

    let (_, v) = call(&app, "POST", "/sessions", Some(json!({ "module": chain(), "mesh": "B:3" }))).await;
    let id = v["id"].as_str().unwrap();
    let (s, e) = call(&app, "POST", &format!("/sessions/{id}/tactics"), Some(bp())).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(e["error"]["message"].as_str().unwrap().contains("divisible"), "{e}");
}

#[tokio::test]
async fn bad_modules_are_400() {
    let app = app(AppState::default());
    let (s, e) = call(&app, "POST", "/sessions", Some(json!({ "module": "mesh = {B:4}\nfunc @main(%x: tensor<4xf32>) -> tensor<4xf32> {\n  %y = bogus %x\n}\n" }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(e["error"]["kind"], "parse");
    assert_eq!(e["error"]["line"], 3);
    assert!(e["error"]["col"].as_u64().unwrap() > 0);

    let bad = include_str!("../../cli/tests/data/unverified.ir");
    let (s, e) = call(&app, "POST", "/sessions", Some(json!({ "module": bad }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(e["error"]["kind"], "verify");
    assert!(!e["error"]["diagnostics"].as_array().unwrap().is_empty());

    let (s, e) = call(&app, "POST", "/sessions", Some(json!({ "module": chain(), "spec": "tpu-v9" }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(e["error"]["kind"], "spec");
    let (s, _) = call(&app, "POST", "/sessions", Some(json!({ "module": chain(), "mesh": "B:" }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn unknown_sessions_are_404() {
    let app = app(AppState::default());
    for (m, uri) in [
        ("GET", "/sessions/nope"),
        ("GET", "/sessions/nope/shardable"),
        ("GET", "/sessions/nope/export"),
        ("GET", "/sessions/nope/tactics/0"),
    ] {
        let (s, e) = call(&app, m, uri, None).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(e["error"]["kind"], "not_found");
    }
    let (s, _) = call(&app, "POST", "/sessions/nope/tactics", Some(bp())).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "POST", "/sessions/nope/fork", Some(json!({}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn shardable_drops_used_axes() {
    let app = app(AppState::default());
    let id = session(&app, &chain()).await;
    let legal = |v: &Value, name: &str, dim: usize| -> Vec<String> {
        let e = v.as_array().unwrap().iter().find(|e| e["name"] == name).unwrap();
        serde_json::from_value(e["dims"][dim]["legal_axes"].clone()).unwrap()
    };
    let (_, v) = call(&app, "GET", &format!("/sessions/{id}/shardable"), None).await;
    assert_eq!(legal(&v, "x", 0), ["B", "M"]);
    call(&app, "POST", &format!("/sessions/{id}/tactics"), Some(bp())).await;
    let (_, v) = call(&app, "GET", &format!("/sessions/{id}/shardable"), None).await;
    assert_eq!(legal(&v, "x", 0), ["M"]);
    assert!(!legal(&v, "x", 1).contains(&"B".to_string()));
}

#[tokio::test]
async fn export_of_a_fresh_session_is_replicated() {
    let app = app(AppState::default());
    let text = chain();
    let id = session(&app, &text).await;
    let (s, v) = call(&app, "GET", &format!("/sessions/{id}/export"), None).await;
    assert_eq!(s, StatusCode::OK);
    for l in v["sharding"]["inputs"].as_array().unwrap().iter().chain(v["sharding"]["outputs"].as_array().unwrap()) {
        assert_eq!(l["global"], l["local"], "{l}");
    }
    assert_eq!(total(&v["collectives"]), 0);

    call(&app, "POST", &format!("/sessions/{id}/tactics"), Some(bp())).await;
    let (_, v) = call(&app, "GET", &format!("/sessions/{id}/export"), None).await;
    assert_eq!(v["sharding"]["inputs"][0]["local"], json!([64, 8]));
    assert_eq!(v["spmd"], include_str!("../../cli/tests/data/chain_bp.spmd.ir"));
}

#[tokio::test]
async fn forks_replay_a_prefix() {
    let app = app(AppState::default());
    let id = session(&app, &chain()).await;
    let (_, first) = call(&app, "POST", &format!("/sessions/{id}/tactics"), Some(bp())).await;
    call(&app, "POST", &format!("/sessions/{id}/tactics"), Some(z3())).await;

    let (s, f) = call(&app, "POST", &format!("/sessions/{id}/fork"), Some(json!({"upto": 1}))).await;
    assert_eq!(s, StatusCode::CREATED, "{f}");
    let fid = f["id"].as_str().unwrap();
    assert_ne!(fid, id);
    assert_eq!(f["ir"], first["ir"]);
    let (_, r) = call(&app, "POST", &format!("/sessions/{fid}/tactics"), Some(json!({"kind": "manual", "name": "MP", "axis": "M", "shardings": {"w1": 1}}))).await;
    assert_eq!(r["index"], 1);
    let (_, orig) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(orig["reports"][1]["label"], "Z3");

    let (s, f) = call(&app, "POST", &format!("/sessions/{id}/fork"), None).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(f["ir"], orig["ir"]);
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/fork"), Some(json!({"upto": 9}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn replaying_the_log_gives_identical_ir() {
    let app = app(AppState::default());
    let m = generate_model(ModelKind::MlpTrain, &ZooConfig::for_kind(ModelKind::MlpTrain)).unwrap();
    let id = session(&app, &print_module(&m.module)).await;
    let schedule = r#"[
        {"kind":"manual","name":"BP","axis":"B","shardings":{"x":0,"y":0}},
        {"kind":"manual","name":"MP","axis":"M","shardings":{"w0":1,"w1":0}},
        {"kind":"auto","axes":["B"],"budget":12,"seed":5}
    ]"#;
    for t in parse_schedule(schedule).unwrap() {
        let (s, r) = call(&app, "POST", &format!("/sessions/{id}/tactics"), Some(serde_json::to_value(&t).unwrap())).await;
        assert_eq!(s, StatusCode::OK, "{r}");
    }
    let (_, view) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    let log = parse_schedule(&view["tactics"].to_string()).unwrap();
    let mut p = Partitioner::new(&m.module, None, DeviceSpec::tpu_v3_core()).unwrap();
    for t in &log {
        p.apply(t).unwrap();
    }
    assert_eq!(view["ir"].as_str().unwrap(), current_ir(&p));
    let want = serde_json::to_value(&p.reports).unwrap();
    assert_eq!(view["reports"], want);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_tactics_on_one_session_are_serialized() {
    let app = app(AppState::default());
    let id = session(&app, &chain()).await;
    let other = session(&app, &chain()).await;
    let mut tasks = Vec::new();
    for i in 0..8 {
        let (app, target) = (app.clone(), if i % 2 == 0 { id.clone() } else { other.clone() });
        tasks.push(tokio::spawn(async move { call(&app, "POST", &format!("/sessions/{target}/tactics"), Some(bp())).await.0 }));
    }
    let mut ok = 0;
    for t in tasks {
        match t.await.unwrap() {
            StatusCode::OK => ok += 1,
            StatusCode::CONFLICT => {}
            s => panic!("unexpected {s}"),
        }
    }
    assert_eq!(ok, 2, "exactly one BP lands on each session");
    for sid in [&id, &other] {
        let (_, v) = call(&app, "GET", &format!("/sessions/{sid}"), None).await;
        assert_eq!(v["reports"].as_array().unwrap().len(), 1);
    }
}

#[tokio::test]
async fn dumps_are_written_through() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(AppState::new(Some(dir.path().to_path_buf())));
    let id = session(&app, &chain()).await;
    let (_, r) = call(&app, "POST", &format!("/sessions/{id}/tactics"), Some(bp())).await;
    let d = dir.path().join(&id);
    assert_eq!(std::fs::read_to_string(d.join("tactic-01.ir")).unwrap(), r["ir"].as_str().unwrap());
    assert_eq!(std::fs::read_to_string(d.join("tactic-01.spmd.ir")).unwrap(), r["spmd"].as_str().unwrap());
    assert!(d.join("tactic-01.json").is_file());
}
