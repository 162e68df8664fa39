use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use collab_core::recommend::Recommender;
use collab_core::study::{
    read_ndjson, Bonus, ManualClock, MlArm, PaymentSummary, ProblemView, SessionView, StudyConfig,
    StudyService, SubmitResponse, TrialPhase,
};
use collab_server::{router, ErrorBody, NDJSON};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn setup() -> (Router, Arc<ManualClock>, Arc<StudyService>) {
    let recs = MlArm::MODELS
        .into_iter()
        .zip([0.55, 0.41, 0.37, 0.32, 0.30, 0.28])
        .map(|(arm, sigma)| (arm, Recommender::noisy_greedy(arm.name(), sigma)))
        .collect();
    let clock = Arc::new(ManualClock::new(1_700_000_000_000));
    let svc = Arc::new(StudyService::in_memory(StudyConfig::new(recs), clock.clone()));
    (router(svc.clone()), clock, svc)
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>, Option<String>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, ctype)
}

async fn ok<T: serde::de::DeserializeOwned>(app: &Router, method: Method, uri: &str, body: Option<Value>) -> T {
    let (status, bytes, _) = call(app, method, uri, body).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    serde_json::from_slice(&bytes).unwrap()
}

async fn err(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, ErrorBody) {
    let (status, bytes, _) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn forced(bonus: &str, arm: &str, quiz: bool, seed: u64) -> Value {
    json!({
        "assignment": {"mode": "forced", "treatment": {"bonus": bonus, "ml_arm": arm, "comprehension_quiz": quiz}},
        "seed": seed
    })
}

async fn run_session(app: &Router, clock: &ManualClock, arm: &str, seed: u64) -> (String, PaymentSummary) {
    let quiz = arm != "none";
    let s: SessionView = ok(app, Method::POST, "/sessions", Some(forced("b10", arm, quiz, seed))).await;
    let id = s.session_id;
    ok::<SessionView>(app, Method::POST, &format!("/sessions/{id}/advance"), None).await;
    for phase in [TrialPhase::Practice, TrialPhase::Main] {
        loop {
            let (status, bytes, _) = call(app, Method::GET, &format!("/sessions/{id}/next"), None).await;
            if status != StatusCode::OK {
                break;
            }
            let p: ProblemView = serde_json::from_slice(&bytes).unwrap();
            assert_eq!(p.phase, phase);
            assert_eq!(p.recommendation.is_some(), phase == TrialPhase::Main && arm != "none");
            clock.advance(30_000);
            let selection = p.recommendation.clone().unwrap_or_else(|| vec![false; p.weights.len()]);
            let r: SubmitResponse = ok(
                app,
                Method::POST,
                &format!("/sessions/{id}/submit"),
                Some(json!({"problem_index": p.problem_index, "selection": selection, "client_elapsed_ms": 30_000})),
            )
            .await;
            assert_eq!(r.feedback.is_some(), phase == TrialPhase::Practice);
            assert_eq!(r.elapsed_ms, 30_000);
        }
        ok::<SessionView>(app, Method::POST, &format!("/sessions/{id}/advance"), None).await;
    }
    let pay = ok(app, Method::POST, &format!("/sessions/{id}/finalize"), None).await;
    (id, pay)
}

#[tokio::test]
async fn full_session_over_http() {
    let (app, clock, svc) = setup();
    let (id, pay) = run_session(&app, &clock, "q6", 5).await;
    assert_eq!(pay.session_id, id);
    assert_eq!(pay.payment_pence, collab_core::study::compute_payment(pay.mean_econ_percent, Bonus::B10));
    let s: SessionView = ok(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(s.main_done, 10);
    assert_eq!(s.payment_pence, Some(pay.payment_pence));
    assert!(collab_core::study::audit(&svc.events(), svc.config()).unwrap().is_clean());
}

#[tokio::test]
async fn export_filters_and_round_trips() {
    let (app, clock, svc) = setup();
    run_session(&app, &clock, "q1", 1).await;
    run_session(&app, &clock, "q6", 2).await;
    run_session(&app, &clock, "none", 3).await;

    let (status, body, ctype) = call(&app, Method::GET, "/export", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some(NDJSON));
    let all = read_ndjson(body.as_slice()).unwrap();
    assert_eq!(all.len(), 30);
    assert_eq!(all, svc.export_trials(&Default::default()).unwrap());

    let (_, body, _) = call(&app, Method::GET, "/export?arm=q1", None).await;
    let q1 = read_ndjson(body.as_slice()).unwrap();
    assert_eq!(q1.len(), 10);
    assert!(q1.iter().all(|t| t.treatment.ml_arm == MlArm::Q1));

    let (_, body, _) = call(&app, Method::GET, "/export?phase=all&bonus=b10", None).await;
    assert_eq!(read_ndjson(body.as_slice()).unwrap().len(), 36);
    let (_, body, _) = call(&app, Method::GET, "/export?bonus=b2", None).await;
    assert!(body.is_empty());

    let (status, e) = err(&app, Method::GET, "/export?phase=later", None).await;
    assert_eq!((status, e.error.as_str()), (StatusCode::BAD_REQUEST, "bad_request"));
}

#[tokio::test]
async fn error_statuses() {
    let (app, clock, _) = setup();
    let (status, e) = err(&app, Method::GET, "/sessions/nope/next", None).await;
    assert_eq!((status, e.error.as_str()), (StatusCode::UNAUTHORIZED, "unknown_session"));

    let (status, e) = err(&app, Method::POST, "/sessions", Some(forced("b2", "q3", true, 1))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{e:?}");

    let s: SessionView = ok(&app, Method::POST, "/sessions", Some(forced("b10", "q1", true, 9))).await;
    let id = s.session_id;
    let (status, e) = err(&app, Method::GET, &format!("/sessions/{id}/next"), None).await;
    assert_eq!((status, e.error.as_str()), (StatusCode::CONFLICT, "phase"));

    ok::<SessionView>(&app, Method::POST, &format!("/sessions/{id}/advance"), None).await;
    let p: ProblemView = ok(&app, Method::GET, &format!("/sessions/{id}/next"), None).await;
    let again: ProblemView = ok(&app, Method::GET, &format!("/sessions/{id}/next"), None).await;
    assert_eq!(p, again);

    let (status, e) = err(
        &app,
        Method::POST,
        &format!("/sessions/{id}/submit"),
        Some(json!({"problem_index": p.problem_index, "selection": vec![true; p.weights.len()]})),
    )
    .await;
    assert_eq!((status, e.error.as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "infeasible"));

    let (status, e) = err(
        &app,
        Method::POST,
        &format!("/sessions/{id}/submit"),
        Some(json!({"problem_index": p.problem_index, "selection": [false, true]})),
    )
    .await;
    assert_eq!((status, e.error.as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "shape"));

    let empty = json!({"problem_index": p.problem_index, "selection": vec![false; p.weights.len()]});
    clock.advance(500_000);
    let r: SubmitResponse = ok(&app, Method::POST, &format!("/sessions/{id}/submit"), Some(empty.clone())).await;
    assert!(r.auto_submitted);
    assert_eq!(r.elapsed_ms, 182_000);
    let (status, e) = err(&app, Method::POST, &format!("/sessions/{id}/submit"), Some(empty)).await;
    assert_eq!((status, e.error.as_str()), (StatusCode::CONFLICT, "conflict"));

    let (status, _) = err(&app, Method::POST, &format!("/sessions/{id}/finalize"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, _, _) = call(&app, Method::POST, &format!("/sessions/{id}/submit"), Some(json!({"oops": 1}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn exclusion_hides_sessions_from_export() {
    let (app, clock, _) = setup();
    let (id, _) = run_session(&app, &clock, "q6", 4).await;
    let s: SessionView = ok(
        &app,
        Method::POST,
        &format!("/sessions/{id}/exclude"),
        Some(json!({"reason": "reload"})),
    )
    .await;
    assert!(s.excluded);
    let (_, body, _) = call(&app, Method::GET, "/export", None).await;
    assert!(body.is_empty());
    let (_, body, _) = call(&app, Method::GET, "/export?include_excluded=true", None).await;
    assert_eq!(read_ndjson(body.as_slice()).unwrap().len(), 10);
}

#[tokio::test]
async fn random_assignment_is_the_default() {
    let (app, _, _) = setup();
    let a: SessionView = ok(&app, Method::POST, "/sessions", Some(json!({"seed": 77}))).await;
    assert!(a.treatment.validate().is_ok());
    let b: SessionView = ok(&app, Method::POST, "/sessions", Some(json!({}))).await;
    assert_ne!(a.session_id, b.session_id);
}
