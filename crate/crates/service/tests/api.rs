//! HTTP surface against a live listener with a short finetune.

use std::sync::Arc;
use std::time::{Duration, Instant};

use forgedit::backend::ToyBackend;
use forgedit::captioner::CaptionerConfig;
use forgedit::finetune::FinetuneConfig;
use forgedit::pipeline::Pipeline;
use forgedit::store::ArtifactStore;
use forgedit::synthetic::polar_bear_scene;
use forgedit::types::{ImageTensor, Verdict};
use forgedit_service::api::{router, AppState};
use reqwest::{multipart, Client, StatusCode};
use serde_json::{json, Value};
use tempfile::TempDir;

struct Server {
    base: String,
    client: Client,
    _dir: TempDir,
}

async fn start(webui: Option<std::path::PathBuf>) -> Server {
    let dir = tempfile::tempdir().unwrap();
    let finetune = FinetuneConfig { steps: 10, ..FinetuneConfig::default() };
    let pipeline = Pipeline::new(
        ArtifactStore::open(dir.path().join("store")).unwrap(),
        Arc::new(ToyBackend::standard()),
        CaptionerConfig::stub([]),
        finetune,
    )
    .unwrap();
    let app = router(AppState::new(pipeline).unwrap(), webui);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(async move { axum::serve(listener, app).await });
    Server { base, client: Client::new(), _dir: dir }
}

fn form(png: Vec<u8>) -> multipart::Form {
    multipart::Form::new()
        .part("image", multipart::Part::bytes(png).file_name("in.png"))
        .text("target_prompt", "A polar bear raising its hand")
}

async fn wait(server: &Server, job: &str) -> Value {
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let status: Value = server
            .client
            .get(format!("{}/api/jobs/{job}", server.base))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        match status["state"].as_str() {
            Some("done") | Some("failed") => return status,
            _ => {
                assert!(Instant::now() < deadline, "job {job} did not finish");
                tokio::time::sleep(Duration::from_millis(25)).await;
            }
        }
    }
}

async fn create(server: &Server) -> Value {
    let r = server
        .client
        .post(format!("{}/api/sessions", server.base))
        .multipart(form(polar_bear_scene(16).to_png().unwrap()))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::CREATED);
    r.json().await.unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn health_and_unknown_resources() {
    let s = start(None).await;
    let health: Value = s.client.get(format!("{}/api/health", s.base)).send().await.unwrap().json().await.unwrap();
    assert_eq!(health, json!({ "ok": true }));

    for path in ["/api/sessions/nope", "/api/jobs/nope", "/api/sessions/nope/manifest"] {
        let r = s.client.get(format!("{}{path}", s.base)).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::NOT_FOUND, "{path}");
    }
    let missing = "0".repeat(64);
    let r = s.client.get(format!("{}/api/images/{missing}", s.base)).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    let r = s.client.get(format!("{}/api/images/..%2Fsessions", s.base)).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn create_rejects_bad_uploads() {
    let s = start(None).await;
    let url = format!("{}/api/sessions", s.base);

    let r = s.client.post(&url).multipart(form(b"not a png".to_vec())).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);

    let no_target = multipart::Form::new().part("image", multipart::Part::bytes(polar_bear_scene(16).to_png().unwrap()));
    let r = s.client.post(&url).multipart(no_target).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);

    let wrong_size = ImageTensor::zeros(8, 8).unwrap().to_png().unwrap();
    let r = s.client.post(&url).multipart(form(wrong_size)).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);

    // None of the rejected uploads left a session behind.
    let list: Value = s.client.get(&url).send().await.unwrap().json().await.unwrap();
    assert_eq!(list, json!([]));
}

#[tokio::test(flavor = "multi_thread")]
async fn session_lifecycle() {
    let s = start(None).await;
    let created = create(&s).await;
    let id = created["id"].as_str().unwrap().to_owned();
    assert_eq!(created["state"]["value"], "Created");
    let jobs = created["jobs"].as_array().unwrap().clone();
    assert_eq!(jobs.len(), 2);

    let finetune = wait(&s, jobs[0].as_str().unwrap()).await;
    assert_eq!((finetune["kind"].as_str(), finetune["state"].as_str()), (Some("finetune"), Some("done")));
    let sweep = wait(&s, jobs[1].as_str().unwrap()).await;
    assert_eq!(sweep["state"], "done", "{sweep}");

    let session: Value = s.client.get(format!("{}/api/sessions/{id}", s.base)).send().await.unwrap().json().await.unwrap();
    assert_eq!(session["state"]["value"], "AwaitingVerdict");
    let images = session["sweeps"][0]["images"].as_array().unwrap();
    assert_eq!(images.len(), 8);

    let image = images[0].as_str().unwrap();
    let r = s.client.get(format!("{}/api/images/{image}", s.base)).send().await.unwrap();
    assert_eq!(r.headers()["content-type"], "image/png");
    let decoded = ImageTensor::from_png(&r.bytes().await.unwrap()).unwrap();
    assert_eq!((decoded.height(), decoded.width()), (16, 16));

    let list: Value = s.client.get(format!("{}/api/sessions", s.base)).send().await.unwrap().json().await.unwrap();
    assert_eq!(list[0]["id"], id.as_str());
    assert_eq!(list[0]["sweeps"], 1);

    // A malformed override is rejected before any job is queued.
    let r = s
        .client
        .post(format!("{}/api/sessions/{id}/sweeps", s.base))
        .json(&json!({ "strategy": "everything" }))
        .send()
        .await
        .unwrap();
    assert!(r.status().is_client_error(), "{}", r.status());

    let next: Value = s
        .client
        .post(format!("{}/api/sessions/{id}/verdict", s.base))
        .json(&Verdict::underfit())
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(next["mode"], "Projection");

    // The latest sweep already has a verdict.
    let r = s
        .client
        .post(format!("{}/api/sessions/{id}/verdict", s.base))
        .json(&Verdict::success(0))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);

    let started: Value = s
        .client
        .post(format!("{}/api/sessions/{id}/sweeps", s.base))
        .json(&json!({ "grid": [0.0, 1.0] }))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(started["action"]["mode"], "Projection");
    assert_eq!(wait(&s, started["job_id"].as_str().unwrap()).await["state"], "done");

    let done: Value = s
        .client
        .post(format!("{}/api/sessions/{id}/verdict", s.base))
        .json(&Verdict::success(1))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(done["done"], true);

    let r = s.client.post(format!("{}/api/sessions/{id}/sweeps", s.base)).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);
    let manifest: Value =
        s.client.get(format!("{}/api/sessions/{id}/manifest", s.base)).send().await.unwrap().json().await.unwrap();
    assert_eq!(manifest["final_image"], manifest["sweeps"][1]["images"][1]);
}

#[tokio::test(flavor = "multi_thread")]
async fn serves_static_assets_with_index_fallback() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>cockpit</html>").unwrap();
    std::fs::write(dir.path().join("app.js"), "console.log(1)").unwrap();
    let s = start(Some(dir.path().to_owned())).await;

    let js = s.client.get(format!("{}/app.js", s.base)).send().await.unwrap().text().await.unwrap();
    assert_eq!(js, "console.log(1)");
    let deep = s.client.get(format!("{}/sessions/abc", s.base)).send().await.unwrap().text().await.unwrap();
    assert_eq!(deep, "<html>cockpit</html>");
    let health = s.client.get(format!("{}/api/health", s.base)).send().await.unwrap();
    assert_eq!(health.status(), StatusCode::OK);
}
