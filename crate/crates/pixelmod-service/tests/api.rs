use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{HeaderMap, Request, StatusCode};
use axum::Router;
use base64::Engine as _;
use http_body_util::BodyExt;
use pixelmod::ocr::{OcrError, OcrProvider, OcrRequest, ProviderCapabilities, ProviderOutput, SidecarProvider};
use pixelmod::synth::{planted_corpus, PlantedCorpus, PlantedSpec, Role};
use pixelmod_service::{router, Config, Shared};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Resp {
    status: StatusCode,
    headers: HeaderMap,
    bytes: Vec<u8>,
}

impl Resp {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.bytes)))
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>, headers: &[(&str, &str)]) -> Resp {
    let mut req = Request::builder().method(method).uri(uri);
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Resp { status, headers, bytes }
}

async fn get(app: &Router, uri: &str) -> Value {
    let r = call(app, "GET", uri, None, &[]).await;
    assert_eq!(r.status, StatusCode::OK, "{uri}: {}", String::from_utf8_lossy(&r.bytes));
    r.json()
}

async fn post(app: &Router, uri: &str, body: Value) -> Resp {
    call(app, "POST", uri, Some(body), &[]).await
}

/// Submits a job and waits for it to succeed; returns the finished job.
async fn run_job(app: &Router, uri: &str, body: Value) -> Value {
    let r = post(app, uri, body).await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&r.bytes));
    let id = r.json()["job_id"].as_str().unwrap().to_string();
    for _ in 0..3000 {
        let job = get(app, &format!("/v1/jobs/{id}")).await;
        match job["status"].as_str().unwrap() {
            "SUCCEEDED" => return job,
            "FAILED" => panic!("job failed: {job}"),
            _ => tokio::time::sleep(Duration::from_millis(20)).await,
        }
    }
    panic!("job {id} did not finish");
}

fn config(root: &Path) -> Config {
    Config {
        store: root.join("store"),
        token_env: "PIXELMOD_TEST_TOKEN_UNSET".into(),
        ..Config::default()
    }
}

fn planted() -> PlantedCorpus {
    planted_corpus(11, PlantedSpec::default())
}

async fn loaded(dir: &Path, p: &PlantedCorpus) -> (Arc<Shared>, Router) {
    loaded_with(dir, p, Arc::new(SidecarProvider)).await
}

async fn loaded_with(dir: &Path, p: &PlantedCorpus, provider: Arc<dyn OcrProvider>) -> (Arc<Shared>, Router) {
    let (corpus, seeds) = p.write_to_dir(&dir.join("files")).unwrap();
    let shared = Shared::start_with_provider(config(dir), provider).unwrap();
    let app = router(shared.clone());
    let job = run_job(&app, "/v1/ingest", json!({ "manifest": corpus })).await;
    assert_eq!(job["summary"]["ingest"]["ingested"], 200);
    let job = run_job(&app, "/v1/ingest", json!({ "manifest": seeds, "seed_set": "election" })).await;
    assert_eq!(job["summary"]["seed_set"]["version"], 6);
    (shared, app)
}

async fn all_pages(app: &Router, query: &str, filter: &str, page_size: usize) -> Vec<Value> {
    let first = get(app, &format!("/v1/candidates?query={query}&page_size={page_size}{filter}")).await;
    let pages = first["pages"].as_u64().unwrap() as usize;
    let mut out: Vec<Value> = first["candidates"].as_array().unwrap().clone();
    for page in 2..=pages {
        let p = get(app, &format!("/v1/candidates?query={query}&page={page}&page_size={page_size}{filter}")).await;
        assert_eq!(p["total"], first["total"]);
        out.extend(p["candidates"].as_array().unwrap().iter().cloned());
    }
    assert_eq!(out.len(), first["total"].as_u64().unwrap() as usize);
    out
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn full_review_loop() {
    let dir = tempfile::tempdir().unwrap();
    let p = planted();
    let (shared, app) = loaded(dir.path(), &p).await;

    let job = run_job(&app, "/v1/batch-query", json!({ "seed_set": "election" })).await;
    assert_eq!(job["summary"]["accepted"], 40);
    let batch = job["summary"]["query"].as_str().unwrap().to_string();

    // pages tile the canonical order with no gaps or repeats
    let whole = all_pages(&app, &batch, "", 500).await;
    let paged = all_pages(&app, &batch, "", 7).await;
    assert_eq!(whole, paged);
    let accepted = all_pages(&app, &batch, "&decision=ACCEPTED", 15).await;
    assert_eq!(accepted.len(), 40);
    let ids: BTreeSet<&str> = accepted.iter().map(|c| c["image_id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 40);
    let variants: BTreeSet<String> = shared.with_store(|st| {
        p.ids_with_role(Role::Variant)
            .iter()
            .map(|id| st.image_for_post(id).unwrap().to_string())
            .collect()
    });
    assert_eq!(ids, variants.iter().map(String::as_str).collect());
    let twins = all_pages(&app, &batch, "&decision=REJECTED_TEXT", 50).await;
    assert_eq!(twins.len(), 10);

    // approve one candidate and promote it
    let chosen = accepted[0]["image_id"].as_str().unwrap().to_string();
    let body = json!({
        "query_id": batch, "image_id": chosen, "verdict": "APPROVE",
        "reviewer": "mod-1", "promote_to_seed": true, "expected_version": 6
    });
    let key = [("idempotency-key", "review-1")];
    let first = call(&app, "POST", "/v1/review", Some(body.clone()), &key).await;
    assert_eq!(first.status, StatusCode::OK, "{}", String::from_utf8_lossy(&first.bytes));
    let v = first.json();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["seed_set"]["version"], 7);
    assert_eq!(v["review"]["promoted"]["version"], 7);

    let replay = call(&app, "POST", "/v1/review", Some(body.clone()), &key).await;
    assert_eq!(replay.status, StatusCode::OK);
    assert_eq!(replay.bytes, first.bytes);
    assert_eq!(replay.headers["idempotent-replay"], "true");
    assert_eq!(shared.with_store(|st| st.seed_set("election").unwrap().version), 7);

    let mut other = body.clone();
    other["note"] = json!("changed");
    let reused = call(&app, "POST", "/v1/review", Some(other), &key).await;
    assert_eq!(reused.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(reused.json()["code"], "IDEMPOTENCY_KEY_REUSED");

    let mut again = body.clone();
    again["expected_version"] = json!(7);
    let dup = post(&app, "/v1/review", again).await;
    assert_eq!(dup.status, StatusCode::CONFLICT);
    assert_eq!(dup.json()["code"], "ALREADY_MEMBER");

    let stale = json!({
        "query_id": batch, "image_id": accepted[1]["image_id"], "verdict": "APPROVE",
        "reviewer": "mod-2", "promote_to_seed": true, "expected_version": 6
    });
    let conflict = post(&app, "/v1/review", stale).await;
    assert_eq!(conflict.status, StatusCode::CONFLICT);
    let err = conflict.json();
    assert_eq!(err["code"], "VERSION_CONFLICT");
    assert_eq!(err["details"]["actual"], 7);

    // the reviewed candidate now carries its verdict
    let page = all_pages(&app, &batch, "&decision=ACCEPTED", 50).await;
    let reviewed: Vec<&Value> = page.iter().filter(|c| c.get("review").is_some()).collect();
    assert_eq!(reviewed.len(), 1);
    assert_eq!(reviewed[0]["review"]["verdict"], "APPROVE");

    // re-running the batch shows the promoted seed in provenance
    let job = run_job(&app, "/v1/batch-query", json!({ "seed_set": "election" })).await;
    let rerun = job["summary"]["query"].as_str().unwrap().to_string();
    assert_eq!(job["summary"]["seed_set_version"], 7);
    let after = all_pages(&app, &rerun, "&decision=ACCEPTED", 50).await;
    let from_promoted = after
        .iter()
        .filter(|c| c["provenance"].as_array().unwrap().iter().any(|p| p["query_id"] == chosen.as_str()))
        .count();
    assert!(from_promoted > 0);

    // stories over the accepted candidates count the approval
    let job = run_job(&app, "/v1/stories/rebuild", json!({ "query": batch })).await;
    assert!(job["summary"]["stories"].as_u64().unwrap() >= 1);
    let stories = get(&app, "/v1/stories").await;
    let members: usize = stories["stories"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["members"].as_array().unwrap().len())
        .sum();
    assert_eq!(members, 40);
    let moderated: u64 = stories["stories"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["moderated_count"].as_u64().unwrap())
        .sum();
    assert_eq!(moderated, 1);

    let metrics = get(&app, "/v1/metrics").await;
    assert_eq!(metrics["images"], 205);
    assert!(metrics["queries"].as_u64().unwrap() >= 11);
    assert!(metrics["ocr_cache_hit_rate"].as_f64().unwrap() > 0.0);
    assert_eq!(metrics["reviews"], 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn single_queries_images_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = planted();
    let (shared, app) = loaded(dir.path(), &p).await;
    let seed_id = shared.with_store(|st| st.image_for_post(&p.seeds[0].id).unwrap().to_string());

    let r = post(&app, "/v1/query", json!({ "image_id": "f00d" })).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let e = r.json();
    assert_eq!(e["code"], "NOT_FOUND");
    assert!(e["message"].as_str().unwrap().contains("f00d"));
    assert_eq!(e["details"]["id"], "f00d");

    let r = post(&app, "/v1/query", json!({ "image_id": seed_id, "query_id": "q-one" })).await;
    assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.bytes));
    let v = r.json();
    assert_eq!(v["query"], "q-one");
    assert_eq!(v["report"]["accepted_count"], 8);
    assert_eq!(v["report"]["rejected_count"], 2);
    assert!(v["candidates"].as_array().unwrap().iter().all(|c| c["image_id"] != seed_id.as_str()));
    let page = get(&app, "/v1/candidates?query=q-one&decision=ACCEPTED").await;
    assert_eq!(page["total"], 8);
    let used = post(&app, "/v1/query", json!({ "image_id": seed_id, "query_id": "q-one" })).await;
    assert_eq!(used.status, StatusCode::BAD_REQUEST);

    let upload = base64::engine::general_purpose::STANDARD.encode(&p.seeds[0].bytes);
    let r = post(&app, "/v1/query", json!({ "image_base64": upload, "config": { "theta_visual": 0 } })).await;
    assert_eq!(r.status, StatusCode::OK);
    // an upload is not a stored record, so its own stored copy matches at radius 0
    let v = r.json();
    assert!(v["candidates"]
        .as_array()
        .unwrap()
        .iter()
        .any(|c| c["image_id"] == seed_id.as_str() && c["distance"] == 0));

    for bad in [
        json!({ "image_id": seed_id, "colour": "red" }),
        json!({ "image_id": seed_id, "image_base64": upload }),
        json!({ "image_base64": "%%%" }),
        json!({ "image_id": seed_id, "config": { "theta_textual": 2.0 } }),
    ] {
        let r = post(&app, "/v1/query", bad.clone()).await;
        assert_eq!(r.status, StatusCode::BAD_REQUEST, "{bad}");
        assert_eq!(r.json()["code"], "VALIDATION");
    }

    let bytes = call(&app, "GET", &format!("/v1/images/{seed_id}"), None, &[]).await;
    assert_eq!(bytes.status, StatusCode::OK);
    assert_eq!(bytes.bytes, p.seeds[0].bytes);
    assert_eq!(bytes.headers["content-type"], "image/png");
    let meta = get(&app, &format!("/v1/images/{seed_id}/meta")).await;
    assert_eq!(meta["image_id"], seed_id.as_str());
    assert_eq!(meta["sources"][0]["post_id"], p.seeds[0].id.as_str());
    assert_eq!(call(&app, "GET", "/v1/images/nope/meta", None, &[]).await.status, StatusCode::NOT_FOUND);

    assert_eq!(post(&app, "/v1/batch-query", json!({ "seed_set": "nope" })).await.status, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/v1/jobs/nope", None, &[]).await.status, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/v1/candidates?query=nope", None, &[]).await.status, StatusCode::NOT_FOUND);
    assert_eq!(
        call(&app, "GET", "/v1/candidates?query=q-one&page=0", None, &[]).await.status,
        StatusCode::BAD_REQUEST
    );
    let review = json!({ "query_id": "q-one", "image_id": "zzz", "verdict": "DISMISS", "reviewer": "r" });
    assert_eq!(post(&app, "/v1/review", review).await.status, StatusCode::NOT_FOUND);
    let review = json!({ "query_id": "q-one", "image_id": seed_id, "verdict": "MAYBE", "reviewer": "r" });
    assert_eq!(post(&app, "/v1/review", review).await.status, StatusCode::BAD_REQUEST);
    assert_eq!(
        post(&app, "/v1/ingest", json!({ "manifest": "/nonexistent.jsonl" })).await.status,
        StatusCode::INTERNAL_SERVER_ERROR
    );
    assert_eq!(post(&app, "/v1/ingest", json!({})).await.status, StatusCode::BAD_REQUEST);
    assert_eq!(
        post(&app, "/v1/stories/rebuild", json!({ "eps": 999 })).await.status,
        StatusCode::BAD_REQUEST
    );
    assert_eq!(get(&app, "/v1/stories").await["stories"], json!([]));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn state_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let p = planted();
    let batch;
    {
        let (shared, app) = loaded(dir.path(), &p).await;
        let job = run_job(&app, "/v1/batch-query", json!({ "seed_set": "election" })).await;
        batch = job["summary"]["query"].as_str().unwrap().to_string();
        let first = all_pages(&app, &batch, "&decision=ACCEPTED", 50).await;
        let review = json!({
            "query_id": batch, "image_id": first[0]["image_id"], "verdict": "DISMISS", "reviewer": "r"
        });
        assert_eq!(post(&app, "/v1/review", review).await.status, StatusCode::OK);
        run_job(&app, "/v1/stories/rebuild", json!({})).await;
        drop(app);
        // the job worker holds only a weak reference
        assert_eq!(Arc::strong_count(&shared), 1);
    }
    let shared = Shared::start_with_provider(config(dir.path()), Arc::new(SidecarProvider)).unwrap();
    let app = router(shared);
    let page = all_pages(&app, &batch, "&decision=ACCEPTED", 50).await;
    assert_eq!(page.len(), 40);
    assert_eq!(page.iter().filter(|c| c.get("review").is_some()).count(), 1);
    assert_eq!(get(&app, "/v1/stories").await["stories"].as_array().unwrap().len() > 0, true);
    // new ids do not collide with persisted ones
    let job = run_job(&app, "/v1/batch-query", json!({ "seed_set": "election" })).await;
    assert_ne!(job["summary"]["query"].as_str().unwrap(), batch);
}

#[tokio::test]
async fn bearer_token_is_required_when_configured() {
    let dir = tempfile::tempdir().unwrap();
    let var = "PIXELMOD_TEST_TOKEN_SET";
    std::env::set_var(var, "s3cret");
    let shared = Shared::start_with_provider(
        Config {
            token_env: var.into(),
            ..config(dir.path())
        },
        Arc::new(SidecarProvider),
    )
    .unwrap();
    let app = router(shared);
    let none = call(&app, "GET", "/v1/metrics", None, &[]).await;
    assert_eq!(none.status, StatusCode::UNAUTHORIZED);
    assert_eq!(none.json()["code"], "UNAUTHORIZED");
    let wrong = call(&app, "GET", "/v1/metrics", None, &[("authorization", "Bearer nope")]).await;
    assert_eq!(wrong.status, StatusCode::UNAUTHORIZED);
    let ok = call(&app, "GET", "/v1/metrics", None, &[("authorization", "Bearer s3cret")]).await;
    assert_eq!(ok.status, StatusCode::OK);
}

struct Down;

impl OcrProvider for Down {
    fn name(&self) -> &str {
        "down"
    }
    fn capabilities(&self) -> ProviderCapabilities {
        ProviderCapabilities {
            reports_coverage: false,
            deterministic: true,
        }
    }
    fn recognize(&self, _: &OcrRequest<'_>) -> Result<ProviderOutput, OcrError> {
        Err(OcrError::ProviderUnavailable("connection refused".into()))
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unavailable_provider_is_503() {
    let dir = tempfile::tempdir().unwrap();
    let p = planted();
    // the seed label is only needed once there are visual matches
    let (_, app) = loaded_with(dir.path(), &p, Arc::new(Down)).await;
    let upload = base64::engine::general_purpose::STANDARD.encode(&p.seeds[0].bytes);
    let r = post(&app, "/v1/query", json!({ "image_base64": upload })).await;
    assert_eq!(r.status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(r.json()["code"], "PROVIDER_UNAVAILABLE");
}
