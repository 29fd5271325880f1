//! Trains the desk model through the CLI (cached under the cargo target
//! tmp dir) and checks keyframe adherence through the HTTP service.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use condmdi::io::{ingest_corpus, Checkpoint};
use condmdi::mask::{generate_mask_seeded, JointsJson, KeyframeCount, KeyframeFile, MaskScheme};
use condmdi::training::TrainConfig;
use condmdi_app::service::{router, AppState, GenerateResponse, ModelSnapshot, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

/// Keep equal to the threshold in the core acceptance harness.
const KEYFRAME_THRESHOLD_M: f64 = 0.95;
const SEED: u64 = 0;
const CLIPS: &str = "600";
const HOLDOUT: &str = "50";
const EVAL_CLIPS: usize = 20;

fn condmdi(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_condmdi"))
        .args(args)
        .env_remove("CONDMDI_PRESET")
        .output()
        .unwrap();
    assert!(out.status.success(), "condmdi {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Corpus and checkpoint directories, training on first use.
fn desk_model() -> (PathBuf, PathBuf) {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("desk-seed{SEED}"));
    let corpus = root.join("corpus");
    let ckpt = root.join("ckpt");
    let last = format!("step_{:08}.cmdi", TrainConfig::desk().iterations);
    if !ckpt.join(last).exists() {
        let _ = std::fs::remove_dir_all(&root);
        let seed = SEED.to_string();
        condmdi(&["synth", "--out", p(&corpus), "--clips", CLIPS, "--seed", &seed]);
        condmdi(&["train", "--data", p(&corpus), "--preset", "desk", "--seed", &seed, "--holdout", HOLDOUT, "--out", p(&ckpt)]);
    }
    (corpus, ckpt)
}

#[tokio::test]
async fn five_keyframes_through_the_service_on_the_desk_model() {
    let (corpus_dir, ckpt_dir) = desk_model();
    let ckpt = Checkpoint::load(&ckpt_dir.join("latest.cmdi")).unwrap();
    assert_eq!(ckpt.manifest.step, TrainConfig::desk().iterations as u64);
    let snapshot = Arc::new(ModelSnapshot::from_checkpoint(&ckpt, true).unwrap());
    let state = AppState::new(Arc::clone(&snapshot), ServiceConfig::default());
    let config: Value = serde_json::from_slice(&std::fs::read(ckpt_dir.join("train_config.json")).unwrap()).unwrap();
    let held: Vec<usize> = serde_json::from_value(config["held_out"].clone()).unwrap();
    assert_eq!(held.len(), 50);
    let corpus = ingest_corpus(&corpus_dir, &snapshot.skeleton).unwrap();
    let scheme = MaskScheme::RandomFrames {
        count: KeyframeCount::Fixed(5),
    };
    let rows = snapshot.model.config().max_frames;
    let mut errors = Vec::new();
    for (n, &i) in held.iter().take(EVAL_CLIPS).enumerate() {
        let clip = &corpus.clips[i];
        let global = &clip.motion;
        let length = global.valid_length().min(rows);
        let mask = generate_mask_seeded(&scheme, &snapshot.skeleton, &snapshot.layout, length, rows, 1000 + n as u64).unwrap();
        let frames: Vec<_> = (0..length)
            .filter(|&t| mask.row(t).iter().any(|&m| m))
            .map(|t| (t, JointsJson::all()))
            .collect();
        assert_eq!(frames.len(), 5);
        let keyframes = KeyframeFile::from_reference(global.data().view(), &frames);
        let body = json!({
            "prompt": clip.prompt,
            "length": length,
            "keyframes": keyframes,
            "strategy": "cond",
            "seed": n,
        });
        let request = Request::builder()
            .method("POST")
            .uri("/generate")
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&body).unwrap()))
            .unwrap();
        let response = router(Arc::clone(&state)).oneshot(request).await.unwrap();
        assert_eq!(response.status(), StatusCode::OK);
        let bytes = response.into_body().collect().await.unwrap().to_bytes();
        let r: GenerateResponse = serde_json::from_slice(&bytes).unwrap();
        errors.push(r.keyframe_error_m.unwrap());
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    eprintln!("service keyframe error over {} held-out clips: {mean:.4} m", errors.len());
    assert!(mean < KEYFRAME_THRESHOLD_M, "mean keyframe error {mean:.4} m");
}
