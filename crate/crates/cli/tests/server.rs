use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use ivsgen::cvae::{Architecture, CvaeModel};
use ivsgen::dataset::{build_dataset, SamplerConfig};
use ivsgen::Feature;
use ivsgen_cli::server::{router, AppState, ServerConfig};

/// Small model whose decoder is zeroed, so every decode is the training mean.
fn mean_model() -> &'static CvaeModel {
    static MODEL: OnceLock<CvaeModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let ds = build_dataset(&SamplerConfig::with_counts(15, 15, 3)).unwrap();
        let labels: Vec<_> = ds
            .labels
            .iter()
            .map(|l| l.select(&[Feature::Level, Feature::Slope]).unwrap())
            .collect();
        let arch = Architecture {
            d_z: 3,
            encoder_hidden: vec![16, 8],
            decoder_hidden: vec![8, 16],
            output_basis: None,
        };
        let mut m = CvaeModel::new(arch, 1.0, &ds.surfaces, &labels, 1).unwrap();
        m.decoder_mut().params_mut().fill(0.0);
        m
    })
}

fn app(cfg: ServerConfig) -> axum::Router {
    router(AppState::new(Some(mean_model().clone()), cfg).unwrap())
}

async fn call(app: axum::Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

fn point() -> Value {
    let y = mean_model().mean_features().unwrap();
    json!({"y": {"level": y.values()[0], "slope": y.values()[1]}, "z": [0.0, 0.0, 0.0]})
}

#[tokio::test]
async fn missing_checkpoint_is_503() {
    let app = router(AppState::new(None, ServerConfig::default()).unwrap());
    let (s, v) = call(app.clone(), "GET", "/model/info", None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert!(v["error"].as_str().unwrap().contains("checkpoint"));
    let (s, _) = call(app, "POST", "/decode", Some(point().to_string())).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn model_info_describes_the_model() {
    let (s, v) = call(app(ServerConfig::default()), "GET", "/model/info", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["feature_names"], json!(["level", "slope"]));
    assert_eq!(v["d_z"], 3);
    assert_eq!(v["grid"]["m_values"].as_array().unwrap().len(), 28);
    assert_eq!(v["grid"]["tau_values"].as_array().unwrap().len(), 28);
    let (lo, hi) = mean_model().feature_ranges()[0];
    assert_eq!(v["feature_ranges"]["level"], json!([lo, hi]));
    assert_eq!(v["fingerprint"].as_str().unwrap(), mean_model().fingerprint());
}

#[tokio::test]
async fn decode_returns_surface_features_and_audit() {
    let app = app(ServerConfig::default());
    let body = point().to_string();
    let (s, v) = call(app.clone(), "POST", "/decode", Some(body.clone())).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let rows = v["surface"].as_array().unwrap();
    assert_eq!(rows.len(), 28);
    assert!(rows.iter().all(|r| r.as_array().unwrap().len() == 28));
    assert!(v["features"]["level"].is_f64() && v["all_features"]["curvature"].is_f64());
    assert!(v["arbitrage"]["is_free"].is_boolean());

    // Bit-exact agreement with the engine and referential transparency.
    let y = mean_model().mean_features().unwrap();
    let sigma = mean_model().decode_values(&y, &[0.0; 3]).unwrap();
    let g = mean_model().grid();
    assert_eq!(rows[5][7].as_f64().unwrap(), sigma[g.flat_index(7, 5)]);
    let (_, again) = call(app, "POST", "/decode", Some(body)).await;
    assert_eq!(v, again);
}

#[tokio::test]
async fn decode_batches_up_to_the_limit() {
    let cfg = ServerConfig {
        max_batch: 2,
        ..ServerConfig::default()
    };
    let two = json!([point(), point()]).to_string();
    let (s, v) = call(app(cfg.clone()), "POST", "/decode", Some(two)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 2);
    let three = json!([point(), point(), point()]).to_string();
    let (s, _) = call(app(cfg), "POST", "/decode", Some(three)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn bad_requests_are_rejected() {
    let app = app(ServerConfig::default());
    let mut p = point();
    p["z"] = json!([0.0, 1.0]);
    let (s, v) = call(app.clone(), "POST", "/decode", Some(p.to_string())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "z");

    let mut p = point();
    p["y"]["skew"] = json!(0.1);
    let (s, v) = call(app.clone(), "POST", "/decode", Some(p.to_string())).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("skew"));

    let mut p = point();
    p["y"].as_object_mut().unwrap().remove("slope");
    let (s, _) = call(app.clone(), "POST", "/decode", Some(p.to_string())).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, _) = call(app.clone(), "POST", "/decode", Some("{not json".into())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(app.clone(), "POST", "/decode", Some(r#"{"y": {"level": 0.3}, "z": [1e999, 0, 0]}"#.into())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, v) = call(app.clone(), "POST", "/features", Some(json!({"surface": vec![vec![0.2; 28]; 27]}).to_string())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "surface");
    let (s, _) = call(app.clone(), "POST", "/features", Some(json!({"surface": vec![vec![-0.2; 28]; 28]}).to_string())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn oversized_bodies_are_refused() {
    let cfg = ServerConfig {
        max_body_bytes: 64,
        ..ServerConfig::default()
    };
    let (s, _) = call(app(cfg), "POST", "/decode", Some(point().to_string() + &" ".repeat(100))).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn features_round_trip_a_decoded_surface() {
    let app = app(ServerConfig::default());
    let (_, d) = call(app.clone(), "POST", "/decode", Some(point().to_string())).await;
    let (s, f) = call(app, "POST", "/features", Some(json!({"surface": d["surface"]}).to_string())).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(f["features"], d["all_features"]);
}

#[tokio::test]
async fn repair_of_a_valid_point_is_a_no_op() {
    let app = app(ServerConfig::default());
    let (_, d) = call(app.clone(), "POST", "/decode", Some(point().to_string())).await;
    assert_eq!(d["arbitrage"]["is_free"], true, "mean surface should be arbitrage-free");
    let (s, r) = call(app, "POST", "/repair", Some(point().to_string())).await;
    assert_eq!(s, StatusCode::OK, "{r}");
    assert_eq!(r["repaired"], true);
    assert_eq!(r["iterations"], 0);
    assert_eq!(r["z_optimized"], point()["z"]);
    assert_eq!(r["surface"], d["surface"]);
}

#[tokio::test]
async fn repair_can_be_disabled() {
    let cfg = ServerConfig {
        enable_repair: false,
        ..ServerConfig::default()
    };
    let (s, v) = call(app(cfg), "POST", "/repair", Some(point().to_string())).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert!(v["error"].as_str().unwrap().contains("disabled"));
}

#[tokio::test]
async fn checkpoint_loads_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    mean_model().save(&path).unwrap();
    let state = AppState::from_config(ServerConfig {
        checkpoint: Some(path),
        ..ServerConfig::default()
    })
    .unwrap();
    assert_eq!(state.fingerprint(), Some(mean_model().fingerprint().as_str()));
    let bad = dir.path().join("missing.ckpt");
    assert!(AppState::from_config(ServerConfig {
        checkpoint: Some(bad),
        ..ServerConfig::default()
    })
    .is_err());
}
