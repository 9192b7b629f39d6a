//! Config loading, HTTP endpoints and on-disk formats against their schemas.

mod common;

use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;

use common::{schema, schema_errors, World};
use drp_core::checkpoint::{Checkpoint, MANIFEST_FILE, WEIGHTS_FILE};
use drp_core::encoder::EncoderConfig;
use drp_core::model::ModelConfig;
use drp_core::service::{load_config_with, router, ConfigError, Service, Snapshot, StartupError, REQUEST_ID_HEADER};
use drp_core::synth::{files, generate_synthetic, SyntheticConfig};
use drp_core::tokenizer::build_vocabularies;
use drp_core::trainer::{pretrain_survival, read_log, train_joint, write_log, JointData, Resources, TrainConfig};

const NO_ENV: [(&str, &str); 0] = [];

/// Synthetic data directory plus a checkpoint under `ckpt/`.
fn deploy(dir: &Path) -> World {
    let w = World::catalog70();
    w.data.write_dir(dir).unwrap();
    w.checkpoint(3).save(&dir.join("ckpt")).unwrap();
    w
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("service.toml");
    let text = format!(
        "checkpoint = \"ckpt\"\ncatalog = \"{}\"\npanel = \"{}\"\n{extra}",
        files::CATALOG,
        files::PANEL
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .unwrap()
}

async fn send(app: &axum::Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    (
        status,
        headers,
        resp.into_body().collect().await.unwrap().to_bytes().to_vec(),
    )
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(uri: &str, content_type: &str, body: impl Into<Body>) -> Request<Body> {
    Request::post(uri)
        .header("content-type", content_type)
        .body(body.into())
        .unwrap()
}

#[test]
fn config_resolves_relative_paths_and_env_overrides() {
    let dir = tempfile::tempdir().unwrap();
    deploy(dir.path());
    let path = write_config(dir.path(), "port = 7000\n");
    let cfg = load_config_with(&path, NO_ENV).unwrap();
    assert_eq!(cfg.port, 7000);
    assert_eq!(cfg.catalog, dir.path().join(files::CATALOG));
    assert!(cfg.cohorts.is_empty());

    let cohort = dir.path().join(files::COHORT);
    let cfg = load_config_with(
        &path,
        [
            ("DRP_PORT", "9001"),
            ("DRP_COHORT_CRC", cohort.to_str().unwrap()),
            ("HOME", "/ignored"),
        ],
    )
    .unwrap();
    assert_eq!(cfg.port, 9001);
    assert_eq!(cfg.cohorts["CRC"], cohort);
    assert_eq!(cfg.bind_addr(), "127.0.0.1:9001");

    let err = load_config_with(&path, [("DRP_PORT", "many")]).unwrap_err();
    assert!(matches!(err, ConfigError::Env { .. }), "{err}");
}

#[test]
fn config_rejects_bad_values() {
    let dir = tempfile::tempdir().unwrap();
    deploy(dir.path());
    let cases = [
        ("[cohorts]\nCRC = \"missing.tsv\"\n", "cohort CRC not found"),
        ("top_k = 11\n", "capped at 10"),
        ("top_k = 0\n", "must be positive"),
        ("log_level = \"loud\"\n", "unknown log level"),
        ("listen = \"localhost\"\n", "not an IP address"),
        ("dispersion_threshold = -1.0\n", "non-negative"),
        ("colour = \"blue\"\n", "unknown field"),
    ];
    for (extra, needle) in cases {
        let path = write_config(dir.path(), extra);
        let err = load_config_with(&path, NO_ENV).unwrap_err().to_string();
        assert!(err.contains(needle), "{extra:?}: {err}");
    }
    std::fs::remove_file(dir.path().join("ckpt").join(MANIFEST_FILE)).unwrap();
    let path = write_config(dir.path(), "");
    assert!(matches!(
        load_config_with(&path, NO_ENV),
        Err(ConfigError::Missing { .. })
    ));
}

#[test]
fn startup_checks_panel_against_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    deploy(dir.path());
    let path = write_config(dir.path(), "");
    let cfg = load_config_with(&path, NO_ENV).unwrap();
    let snap = Snapshot::from_config(&cfg).unwrap();
    assert!(snap.cohort_ids().is_empty());

    let panel = dir.path().join(files::PANEL);
    let text = std::fs::read_to_string(&panel).unwrap();
    std::fs::write(&panel, text.lines().skip(1).collect::<Vec<_>>().join("\n") + "\n").unwrap();
    assert!(matches!(
        Snapshot::from_config(&cfg),
        Err(StartupError::PanelMismatch(_))
    ));
}

#[test]
fn endpoints_match_schemas() {
    let dir = tempfile::tempdir().unwrap();
    deploy(dir.path());
    let cohort = dir.path().join(files::COHORT);
    let path = write_config(
        dir.path(),
        &format!("[cohorts]\nCRC = {:?}\n", cohort.to_str().unwrap()),
    );
    let cfg = load_config_with(&path, NO_ENV).unwrap();
    let snap = Snapshot::from_config(&cfg).unwrap();
    let hash = snap.hash.clone();
    let app = router(Service::new(snap, 4096));

    runtime().block_on(async {
        let (status, _, body) = send(&app, get("/api/v1/health")).await;
        assert_eq!(status, StatusCode::OK);
        assert!(schema_errors(&schema("health"), &body).is_empty());
        let health: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(health["model_hash"], hash.as_str());
        assert_eq!(health["cohorts"], serde_json::json!(["cohort"]));

        let (status, _, body) = send(&app, get("/api/v1/drugs")).await;
        assert_eq!(status, StatusCode::OK);
        assert!(schema_errors(&schema("drugs"), &body).is_empty());
        let drugs: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(drugs["drugs"].as_array().unwrap().len(), 70);

        let (status, _, body) = send(&app, get("/api/v1/model")).await;
        assert_eq!(status, StatusCode::OK);
        let model: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(model["hash"], hash.as_str());
        assert_eq!(model["drugs"], 70);

        let tsv = "gene\tmutation\nKRAS\tG12D\nTP53\tR175H\n";
        let (status, h1, body) = send(
            &app,
            post("/api/v1/recommend?cancer_type=CRC", "text/tab-separated-values", tsv),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
        assert!(schema_errors(&schema("recommend_response"), &body).is_empty());
        let resp: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(resp["cohort_id"], "cohort");
        assert_eq!(resp["swarm"].as_array().unwrap().len(), 70);
        for rec in resp["recommendations"].as_array().unwrap() {
            let s = &rec["cohort_summary"];
            let five: Vec<f64> = ["min", "q1", "median", "q3", "max"]
                .iter()
                .map(|k| s[k].as_f64().unwrap())
                .collect();
            assert!(five.windows(2).all(|w| w[0] <= w[1]), "{s}");
        }

        let (status, h2, body) = send(&app, post("/api/v1/recommend", "application/json", "{not json")).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert!(schema_errors(&schema("error"), &body).is_empty());
        let err: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(err["error"]["code"], "malformed");
        let id = |h: &axum::http::HeaderMap| h[REQUEST_ID_HEADER].to_str().unwrap().parse::<u64>().unwrap();
        assert_eq!(id(&h2), id(&h1) + 1);

        let (status, _, body) = send(
            &app,
            post("/api/v1/recommend", "application/json", r#"{"mutations":[],"extra":1}"#),
        )
        .await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        let err: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(err["error"]["field"], "extra");

        let (status, _, body) = send(
            &app,
            post(
                "/api/v1/recommend",
                "application/json",
                r#"{"mutations":[{"gene":"KRAS","mutation":"G12D"}],"cohort":"nope"}"#,
            ),
        )
        .await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        assert!(schema_errors(&schema("error"), &body).is_empty());

        let big = format!(r#"{{"mutations":[],"pad":"{}"}}"#, "x".repeat(8192));
        let (status, _, _) = send(&app, post("/api/v1/recommend", "application/json", big)).await;
        assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);

        let (status, _, _) = send(&app, get("/api/v1/recommend")).await;
        assert_eq!(status, StatusCode::METHOD_NOT_ALLOWED);
    });
}

#[test]
fn training_logs_and_manifests_match_schemas() {
    let d = generate_synthetic(&SyntheticConfig {
        panel_size: 8,
        pairs_per_gene: 2,
        n_drugs: 6,
        n_survival_crc: 40,
        n_survival_nsclc: 40,
        n_recist: 60,
        n_cellline: 40,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let (gv, mv) = build_vocabularies(&d.panel, &d.known_pairs).unwrap();
    let res = Resources {
        gene_vocab: &gv,
        mutation_vocab: &mv,
        catalog: &d.catalog,
    };
    let cfg = TrainConfig {
        model: ModelConfig {
            encoder: EncoderConfig {
                d: 8,
                heads: 2,
                ffn_dim: 16,
                layers: 1,
                ..Default::default()
            },
            intervals: 4,
            ..Default::default()
        },
        epochs: 2,
        batch_size: 32,
        ..Default::default()
    };
    let pre = pretrain_survival(&cfg, res, &[&d.survival_crc], Some(&d.survival_nsclc)).unwrap();
    let data = JointData {
        survival: &d.survival_nsclc,
        recist: &d.recist,
        cellline: &d.cellline,
        val_recist: Some(&d.recist[..20]),
    };
    let joint = train_joint(&cfg, res, data, Some(&pre.checkpoint)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let log_schema = schema("epoch_log");
    for (name, out) in [("pretrain", &pre), ("joint", &joint)] {
        let path = dir.path().join(format!("{name}.jsonl"));
        write_log(&path, &out.log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), out.log.len());
        for line in text.lines() {
            let errs = schema_errors(&log_schema, line.as_bytes());
            assert!(errs.is_empty(), "{name}: {errs:?}");
        }
        assert_eq!(read_log(&path).unwrap(), out.log);
    }

    let manifest_schema = schema("checkpoint_manifest");
    let ckpt = dir.path().join("ckpt");
    joint.checkpoint.save(&ckpt).unwrap();
    let manifest = std::fs::read(ckpt.join(MANIFEST_FILE)).unwrap();
    let errs = schema_errors(&manifest_schema, &manifest);
    assert!(errs.is_empty(), "{errs:?}");
    let loaded = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(loaded.hash(), joint.checkpoint.hash());

    let weights = ckpt.join(WEIGHTS_FILE);
    let mut bytes = std::fs::read(&weights).unwrap();
    bytes[0] ^= 0x01;
    std::fs::write(&weights, bytes).unwrap();
    assert!(Checkpoint::load(&ckpt).is_err());
}
