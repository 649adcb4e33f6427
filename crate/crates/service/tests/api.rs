use allocrisk::allocator::{optimize, OptimizerConfig};
use allocrisk::model::CovariateMatrix;
use allocrisk::sequential::SequentialSession;
use allocrisk::NigPrior;
use allocrisk_service::api::{BatchResponse, CreateSessionResponse, OutcomesResponse, SessionView};
use allocrisk_service::{app, ErrorBody, ServiceConfig};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Harness {
    _dir: tempfile::TempDir,
    config: ServiceConfig,
    app: Router,
}

impl Harness {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = ServiceConfig {
            data_dir: dir.path().to_path_buf(),
            static_dir: None,
        };
        let app = app(&config).unwrap();
        Self { _dir: dir, config, app }
    }

    fn restart(&mut self) {
        self.app = app(&self.config).unwrap();
    }

    async fn call(&self, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(body.map(Body::from).unwrap_or_else(Body::empty))
            .unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
        (status, value)
    }

    async fn post(&self, uri: &str, body: Value) -> (StatusCode, Value) {
        self.call("POST", uri, Some(body.to_string())).await
    }

    async fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.call("GET", uri, None).await
    }

    async fn create_flat(&self, p: usize) -> String {
        let (status, body) = self.post("/sessions", json!({"prior": {"kind": "flat"}, "p": p})).await;
        assert_eq!(status, StatusCode::CREATED);
        let created: CreateSessionResponse = serde_json::from_value(body).unwrap();
        assert_eq!(created.revision, 0);
        created.session_id
    }
}

fn table_rows() -> Vec<Vec<f64>> {
    allocrisk::counterexample_table().rows()
}

fn error(body: Value) -> ErrorBody {
    serde_json::from_value(body).unwrap()
}

#[tokio::test]
async fn create_validates_priors_and_json() {
    let h = Harness::new();
    let id = h.create_flat(3).await;
    let (status, body) = h.get(&format!("/sessions/{id}")).await;
    assert_eq!(status, StatusCode::OK);
    let view: SessionView = serde_json::from_value(body).unwrap();
    assert_eq!((view.l_c, view.l_t), (0, 0));

    let (status, body) = h.post("/sessions", json!({"prior": {"kind": "flat", "a0": 0.5}, "p": 2})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let err = error(body);
    assert_eq!(err.code, "InvalidPrior");
    assert_eq!(err.module, "model");

    let (status, body) = h.call("POST", "/sessions", Some("{not json".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error(body).code, "ParseError");

    let schur = json!({"prior": {"kind": "covariance",
        "v0": [[2.0, 0.5, 0.0], [0.5, 2.0, 0.0], [0.0, 0.0, 1.0]]}, "p": 1});
    let (status, body) = h.post("/sessions", schur).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error(body).code, "SchurNotDiagonal");
}

#[tokio::test]
async fn first_batch_matches_single_shot_and_counts_arms() {
    let h = Harness::new();
    let prior = json!({"kind": "covariance", "v0": [[1,0,0,0,0],[0,1,0,0,0],[0,0,1,0,0],[0,0,0,1,0],[0,0,0,0,1]]});
    let (_, body) = h.post("/sessions", json!({"prior": prior, "p": 3})).await;
    let id = body["session_id"].as_str().unwrap().to_string();
    let rows = &table_rows()[..4];
    let (status, body) = h
        .post(&format!("/sessions/{id}/batches"), json!({"covariates": rows, "expected_revision": 0}))
        .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let resp: BatchResponse = serde_json::from_value(body).unwrap();
    assert_eq!(resp.revision, 1);
    assert_eq!(resp.batch_index, Some(0));
    assert_eq!(resp.arms.len(), 4);

    let x = CovariateMatrix::from_rows(rows).unwrap();
    let prior = NigPrior::new(nalgebra::DVector::zeros(5), nalgebra::DMatrix::identity(5, 5), 2.0, 1.0).unwrap();
    let single = optimize(&prior, &x, &OptimizerConfig::exhaustive(), 1.0).unwrap();
    assert_eq!(resp.allocation, single.best_alloc);
    assert_eq!(resp.risk.unwrap().risk, single.best_risk.risk);
    assert_eq!((resp.l_c, resp.l_t), (resp.allocation.n_c(), resp.allocation.n_t()));
}

#[tokio::test]
async fn two_by_two_batch_gives_two_per_arm() {
    let h = Harness::new();
    let id = h.create_flat(3).await;
    let (status, body) = h
        .post(
            &format!("/sessions/{id}/batches"),
            json!({"covariates": &table_rows()[..4], "expected_revision": 0, "quota": {"control": 2, "treatment": 2}}),
        )
        .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    // four units cannot identify the contrast for p = 3 under a flat prior
    let resp: BatchResponse = serde_json::from_value(body).unwrap();
    assert!(resp.risk.is_none() && resp.flat_limit.is_some());
    assert_eq!(resp.arms.iter().filter(|a| *a == "T").count(), 2);
    let (_, body) = h.get(&format!("/sessions/{id}")).await;
    let view: SessionView = serde_json::from_value(body).unwrap();
    assert_eq!((view.l_c, view.l_t), (2, 2));
}

#[tokio::test]
async fn forced_quota_and_stale_revisions() {
    let h = Harness::new();
    let id = h.create_flat(3).await;
    let uri = format!("/sessions/{id}/batches");
    let (status, body) = h
        .post(&uri, json!({"covariates": table_rows(), "expected_revision": 0, "quota": {"control": 3, "treatment": 4}}))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error(body).code, "InfeasibleConstraint");

    // a flat prior cannot score an all-treatment batch; it is still allocated,
    // reported through its ridge limit, and leaves the revision to advance
    let (status, body) = h
        .post(&uri, json!({"covariates": table_rows(), "expected_revision": 0, "quota": {"control": 0, "treatment": 8}, "dry_run": true}))
        .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let resp: BatchResponse = serde_json::from_value(body).unwrap();
    assert!(resp.risk.is_none());
    assert!(resp.flat_limit.unwrap().divergence > 0.0);
    assert_eq!(resp.revision, 0);

    let (status, _) = h.post(&uri, json!({"covariates": table_rows(), "expected_revision": 0})).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = h
        .post(&uri, json!({"covariates": [[0.1, 0.2, 0.3], [0.0, 1.0, 0.5]], "expected_revision": 1, "quota": {"control": 0, "treatment": 2}}))
        .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let resp: BatchResponse = serde_json::from_value(body).unwrap();
    assert_eq!(resp.arms, vec!["T", "T"]);
    assert!(resp.risk.unwrap().risk > 0.0);

    let before = h.get(&format!("/sessions/{id}")).await.1;
    let (status, body) = h.post(&uri, json!({"covariates": [[0.0, 0.0, 0.0]], "expected_revision": 1})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let err = error(body);
    assert_eq!(err.code, "RevisionConflict");
    assert_eq!(err.detail["revision"], 2);
    assert_eq!(h.get(&format!("/sessions/{id}")).await.1, before);
}

#[tokio::test]
async fn dimension_errors_and_unknown_sessions() {
    let h = Harness::new();
    let id = h.create_flat(3).await;
    let (status, body) = h
        .post(&format!("/sessions/{id}/batches"), json!({"covariates": [[1.0, 2.0]], "expected_revision": 0}))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error(body).code, "DimensionMismatch");

    let (status, body) = h.get("/sessions/0123456789abcdef0123456789abcdef").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error(body).code, "SessionNotFound");
    let (status, _) = h.get("/sessions/..%2Fetc").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn outcomes_rescale_without_changing_decisions() {
    let h = Harness::new();
    let id = h.create_flat(3).await;
    let rows = table_rows();
    let (_, _) = h.post(&format!("/sessions/{id}/batches"), json!({"covariates": &rows[..6], "expected_revision": 0})).await;
    let probe = json!({"covariates": &rows[6..], "expected_revision": 1, "dry_run": true});
    let (status, before) = h.post(&format!("/sessions/{id}/batches"), probe.clone()).await;
    assert_eq!(status, StatusCode::OK, "{before}");
    let before: BatchResponse = serde_json::from_value(before).unwrap();
    assert_eq!(before.batch_index, None);

    let (status, body) = h
        .post(&format!("/sessions/{id}/outcomes"), json!({"batch": 0, "y": [1.0, 0.5], "expected_revision": 1}))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error(body).code, "LengthMismatch");

    let y = json!({"batch": 0, "y": [1.0, 0.5, -0.2, 2.0, 0.0, 1.1], "expected_revision": 1});
    let (status, body) = h.post(&format!("/sessions/{id}/outcomes"), y).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let rec: OutcomesResponse = serde_json::from_value(body).unwrap();
    assert_eq!(rec.revision, 2);
    assert_eq!(rec.posterior_scalars.a, 5.0);

    let probe = json!({"covariates": &rows[6..], "expected_revision": 2, "dry_run": true});
    let (_, after) = h.post(&format!("/sessions/{id}/batches"), probe).await;
    let after: BatchResponse = serde_json::from_value(after).unwrap();
    assert_eq!(after.allocation, before.allocation);
    let ratio = after.risk.unwrap().risk / before.risk.unwrap().risk;
    assert!((ratio - rec.e_sigma2).abs() < 1e-12);

    let again = json!({"batch": 0, "y": [1.0, 0.5, -0.2, 2.0, 0.0, 1.1], "expected_revision": 2});
    let (status, body) = h.post(&format!("/sessions/{id}/outcomes"), again).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(error(body).code, "AlreadyScored");
}

#[tokio::test]
async fn state_survives_restart_and_replays() {
    let mut h = Harness::new();
    let id = h.create_flat(3).await;
    let rows = table_rows();
    h.post(&format!("/sessions/{id}/batches"), json!({"covariates": &rows[..4], "expected_revision": 0})).await;
    h.post(&format!("/sessions/{id}/batches"), json!({"covariates": &rows[4..], "expected_revision": 1})).await;
    let before = h.get(&format!("/sessions/{id}")).await.1;
    h.restart();
    let after = h.get(&format!("/sessions/{id}")).await.1;
    assert_eq!(before, after);

    let view: SessionView = serde_json::from_value(after).unwrap();
    let replayed = SequentialSession::from_snapshot(&view.state).unwrap();
    let gram = replayed.totals().gram.clone();
    let stored = nalgebra::DMatrix::from_row_slice(3, 3, &view.state.accumulated.gram.concat());
    assert!((gram - stored).amax() <= 1e-9);
    assert_eq!((view.l_c + view.l_t), 8);
}

#[tokio::test]
async fn tampered_files_are_reported_not_served() {
    let h = Harness::new();
    let id = h.create_flat(2).await;
    let path = h.config.data_dir.join(format!("{id}.json"));
    let mut record: Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    record["state"]["accumulated"]["l_c"] = json!(3);
    std::fs::write(&path, record.to_string()).unwrap();
    let (status, body) = h.get(&format!("/sessions/{id}")).await;
    assert_eq!(status, StatusCode::INTERNAL_SERVER_ERROR);
    assert_eq!(error(body).code, "StorageError");
}
