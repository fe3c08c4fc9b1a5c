use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use dismesh_core::checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
use dismesh_core::model::{ModelConfig, Normalization};
use dismesh_core::synth::{self, counter_rng, PoseParams, ShapeParams};
use dismesh_core::{MeshHierarchy, MeshVae, TriangleMesh};
use dismesh_serve::{router, ServeConfig, MAX_BODY_BYTES, MODEL_HASH_HEADER};
use http_body_util::BodyExt;
use rand::Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

fn config() -> ModelConfig {
    ModelConfig {
        channels: vec![4, 8],
        cheb_order: vec![3, 3],
        hidden: 16,
        latent_shape: 4,
        latent_pose: 3,
        ..ModelConfig::default()
    }
}

fn mesh(subject: u64, pose_seed: u64) -> TriangleMesh {
    let shape = ShapeParams::sample(&mut counter_rng(1, 1, subject, 0), subject);
    let pose = PoseParams::sample(&mut counter_rng(1, 2, pose_seed, 0));
    synth::generate_mesh(&shape, &pose).unwrap()
}

fn checkpoint() -> Checkpoint {
    let template = mesh(0, 0);
    let hierarchy = Arc::new(MeshHierarchy::build(&template, &config().ratios).unwrap());
    let normalization = Normalization::fit(&[template.vertices()]);
    let mut model = MeshVae::init(
        config(),
        hierarchy,
        template.shared_faces(),
        normalization,
        &mut counter_rng(0, 99, 0, 0),
    )
    .unwrap();
    // the initializer zeroes the output layer; give every tensor some signal
    let mut r = counter_rng(0, 98, 0, 0);
    for v in model.params_mut().values_mut() {
        v.mapv_inplace(|x| x + r.gen_range(-0.1f32..0.1));
    }
    Checkpoint {
        meta: CheckpointMeta {
            version: CHECKPOINT_VERSION,
            model: config(),
            normalization,
            epoch: 0,
            seed: 0,
            val_recon_rmse: None,
            optimizer: None,
        },
        template,
        model,
        optimizer: None,
    }
}

fn app() -> (Router, String) {
    let ck = checkpoint();
    let hash = ck.model_hash();
    (router(ck, &ServeConfig::default()).unwrap(), hash)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Option<String>, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let header = resp
        .headers()
        .get(MODEL_HASH_HEADER)
        .map(|v| v.to_str().unwrap().to_string());
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, header, body)
}

fn post(uri: &str, body: impl Into<Body>) -> Request<Body> {
    Request::post(uri).header("content-type", "application/json").body(body.into()).unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

#[tokio::test]
async fn meta_describes_the_model() {
    let (app, hash) = app();
    let (status, header, body) = call(&app, get("/meta")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(header.as_deref(), Some(hash.as_str()));
    let v = json_of(&body);
    assert_eq!(v["model_hash"], hash);
    assert_eq!(v["n_vertices"], synth::VERTEX_COUNT);
    assert_eq!(v["d_s"], 4);
    assert_eq!(v["d_p"], 3);
    assert_eq!(v["faces"].as_array().unwrap().len(), synth::template_faces().len());
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
}

#[tokio::test]
async fn decode_of_zero_code_is_byte_identical() {
    let (app, hash) = app();
    let req = || post("/decode", json!({"z_shape": vec![0.0; 4], "z_pose": vec![0.0; 3]}).to_string());
    let (s1, _, b1) = call(&app, req()).await;
    let (s2, _, b2) = call(&app, req()).await;
    assert_eq!(s1, StatusCode::OK);
    assert_eq!(s2, StatusCode::OK);
    assert_eq!(b1, b2);
    let v = json_of(&b1);
    assert_eq!(v["vertices"].as_array().unwrap().len(), synth::VERTEX_COUNT);
    assert_eq!(v["model_hash"], hash);
}

#[tokio::test]
async fn wrong_code_length_names_the_field() {
    let (app, hash) = app();
    let (status, _, body) = call(&app, post("/decode", json!({"z_shape": vec![0.0; 3], "z_pose": vec![0.0; 3]}).to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let v = json_of(&body);
    assert_eq!(v["field"], "z_shape");
    assert!(v["error"].as_str().unwrap().contains("expected length 4"));
    assert_eq!(v["model_hash"], hash);

    let (status, _, body) = call(&app, post("/decode", json!({"z_shape": vec![0.0; 4], "z_pose": vec![0.0; 9]}).to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(json_of(&body)["field"], "z_pose");
}

#[tokio::test]
async fn malformed_bodies_are_field_level_400s() {
    let (app, _) = app();
    let (status, _, body) = call(&app, post("/decode", json!({"z_pose": vec![0.0; 3]}).to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(json_of(&body)["error"].as_str().unwrap().contains("z_shape"));

    let (status, _, body) = call(&app, post("/decode", json!({"z_shape": [0.0, "x", 0.0, 0.0], "z_pose": vec![0.0; 3]}).to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(json_of(&body)["field"], "z_shape[1]");

    let (status, _, body) = call(&app, post("/encode", "{not json")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(json_of(&body)["error"].is_string());

    let (status, _, body) = call(&app, post("/encode", json!({"vertices": [[0.0, 1.0, 2.0]]}).to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let v = json_of(&body);
    assert_eq!(v["field"], "vertices");
    assert!(v["error"].as_str().unwrap().contains(&format!("expected {} vertices", synth::VERTEX_COUNT)));

    let (status, _, body) = call(&app, post("/encode", json!({"vertices": [], "extra": 1}).to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(json_of(&body)["error"].as_str().unwrap().contains("extra"));
}

#[tokio::test]
async fn oversized_bodies_get_413() {
    let (app, hash) = app();
    let big = vec![b' '; MAX_BODY_BYTES + 1];
    let (status, _, body) = call(&app, post("/encode", big)).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(json_of(&body)["model_hash"], hash);
}

#[tokio::test]
async fn encode_matches_the_library() {
    let (app, _) = app();
    let m = mesh(3, 4);
    let (status, _, body) = call(&app, post("/encode", json!({"vertices": m.vertices()}).to_string())).await;
    assert_eq!(status, StatusCode::OK);
    let v = json_of(&body);
    let expected = checkpoint().model.encode(&[&m]).unwrap().remove(0);
    let mu: Vec<f64> = serde_json::from_value(v["mu"].clone()).unwrap();
    let logvar: Vec<f64> = serde_json::from_value(v["logvar"].clone()).unwrap();
    assert_eq!(mu, expected.mu);
    assert_eq!(logvar, expected.clamped_logvar());
    assert_eq!(mu.len(), 7);
}

#[tokio::test]
async fn transfer_matches_the_library() {
    let (app, _) = app();
    let (a, b) = (mesh(1, 1), mesh(2, 2));
    let req = json!({"shape_from": a.vertices(), "pose_from": b.vertices()}).to_string();
    let (status, _, body) = call(&app, post("/transfer", req)).await;
    assert_eq!(status, StatusCode::OK);
    let got: Vec<[f64; 3]> = serde_json::from_value(json_of(&body)["vertices"].clone()).unwrap();
    let expected = dismesh_core::tasks::transfer(&checkpoint().model, &a, &b).unwrap();
    assert_eq!(got, expected.vertices());

    let short = json!({"shape_from": a.vertices(), "pose_from": [[0.0, 0.0, 0.0]]}).to_string();
    let (status, _, body) = call(&app, post("/transfer", short)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(json_of(&body)["field"], "pose_from");
}

#[tokio::test]
async fn sampling_is_seeded_and_bounded() {
    let (app, _) = app();
    let (status, _, a) = call(&app, get("/sample?n=3&seed=5")).await;
    assert_eq!(status, StatusCode::OK);
    let (_, _, b) = call(&app, get("/sample?n=3&seed=5")).await;
    let (_, _, c) = call(&app, get("/sample?n=3&seed=6")).await;
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(json_of(&a)["samples"].as_array().unwrap().len(), 3);

    let (status, _, body) = call(&app, get("/sample")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&body)["samples"].as_array().unwrap().len(), 1);

    for bad in ["/sample?n=0", "/sample?n=100000", "/sample?n=abc"] {
        let (status, _, body) = call(&app, get(bad)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
        assert_eq!(json_of(&body)["field"], "n");
    }
    let (status, _, body) = call(&app, get("/sample?seed=-1")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(json_of(&body)["field"], "seed");
}

#[tokio::test]
async fn unknown_routes_are_json_404s() {
    let (app, hash) = app();
    let (status, header, body) = call(&app, get("/nope")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(header.as_deref(), Some(hash.as_str()));
    assert_eq!(json_of(&body)["model_hash"], hash);
}

#[tokio::test]
async fn cors_follows_the_allowlist() {
    let (app, _) = app();
    let req = Request::get("/meta").header("origin", "http://anywhere.example").body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");

    let cfg = ServeConfig {
        cors_origins: vec!["http://ui.example".into()],
        ..ServeConfig::default()
    };
    let app = router(checkpoint(), &cfg).unwrap();
    let allowed = Request::get("/meta").header("origin", "http://ui.example").body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(allowed).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "http://ui.example");
    let denied = Request::get("/meta").header("origin", "http://evil.example").body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(denied).await.unwrap();
    assert!(resp.headers().get("access-control-allow-origin").is_none());

    let preflight = Request::options("/decode")
        .header("origin", "http://ui.example")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(preflight).await.unwrap();
    assert!(resp.status().is_success());
    assert!(resp.headers()["access-control-allow-methods"].to_str().unwrap().contains("POST"));
}

#[test]
fn defaults() {
    let cfg = ServeConfig::default();
    assert_eq!(cfg.port, 8080);
    assert_eq!(cfg.cors_origins, vec!["*".to_string()]);
    assert!(router(
        checkpoint(),
        &ServeConfig {
            cors_origins: vec!["bad\norigin".into()],
            ..cfg
        }
    )
    .is_err());
}

#[test]
fn distinct_weights_give_distinct_hashes() {
    let a = checkpoint();
    let mut b = checkpoint();
    let v = b.model.params_mut().values_mut();
    v[0][[0, 0]] += 1.0;
    assert_ne!(a.model_hash(), b.model_hash());
}
