#![allow(dead_code)]

use std::path::Path;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use onesug_core::config::{RunConfig, Stage};
use onesug_core::pipeline::{run_stage, ModelSnapshot};
use onesug_serve::{router, FeedbackLog, Service, UserStore};
use tower::ServiceExt;

pub struct Fixture {
    _dir: tempfile::TempDir,
    pub cfg: RunConfig,
    pub snapshot: ModelSnapshot,
    pub users: UserStore,
}

/// One small trained run shared by every test in the binary.
pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::smoke(dir.path().join("run"));
        for s in Stage::ALL.into_iter().filter(|&s| s != Stage::Eval) {
            run_stage(&cfg, s).unwrap();
        }
        Fixture {
            snapshot: ModelSnapshot::load(&cfg).unwrap(),
            users: UserStore::load(&cfg).unwrap(),
            cfg,
            _dir: dir,
        }
    })
}

/// A service over the shared snapshot with its own feedback log.
pub fn service(log: &Path) -> Arc<Service> {
    let f = fixture();
    Arc::new(Service::new(f.snapshot.clone(), f.users.clone(), FeedbackLog::open(log).unwrap()).unwrap())
}

pub async fn call(service: &Arc<Service>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(service.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

pub async fn get(service: &Arc<Service>, uri: &str) -> (StatusCode, Vec<u8>) {
    call(service, Request::get(uri).body(Body::empty()).unwrap()).await
}

pub async fn post_json(service: &Arc<Service>, uri: &str, body: &serde_json::Value) -> (StatusCode, Vec<u8>) {
    let req = Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    call(service, req).await
}

pub fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).unwrap()
}

/// A frequent prefix of the training logs.
pub fn common_prefix() -> String {
    let f = fixture();
    let corpus = onesug_core::pipeline::Corpus::load(&f.cfg).unwrap();
    let mut counts = std::collections::BTreeMap::<String, usize>::new();
    for r in &corpus.records {
        *counts.entry(r.prefix.clone()).or_default() += 1;
    }
    counts.into_iter().max_by_key(|(p, c)| (*c, std::cmp::Reverse(p.clone()))).unwrap().0
}

/// A user that appears in the corpus.
pub fn known_user() -> String {
    let corpus = onesug_core::pipeline::Corpus::load(&fixture().cfg).unwrap();
    corpus.users[0].user_id.clone()
}
