use std::path::{Path, PathBuf};

use lexalign::config::SessionConfig;
use lexalign::ensemble::read_trace;
use lexalign::mapping::load_mapping;
use lexalign::pipeline::{run_pipeline, ArtifactStatus, Stage};
use lexalign::Error;

fn fixture_copy() -> (tempfile::TempDir, PathBuf) {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synthetic50");
    let dir = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(&src).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            std::fs::copy(entry.path(), dir.path().join(entry.file_name())).unwrap();
        }
    }
    let cfg = dir.path().join("session.toml");
    (dir, cfg)
}

fn load(cfg: &Path) -> SessionConfig {
    SessionConfig::load_with_env(cfg, std::iter::empty()).unwrap()
}

#[test]
fn full_pipeline_then_cached_rerun() {
    let (dir, cfg_path) = fixture_copy();
    let cfg = load(&cfg_path);
    let report = run_pipeline(cfg.clone(), &Stage::ALL).unwrap();
    assert_eq!(report.pivot, "big");
    // two transforms, two mappings, one trace, one stats report
    assert_eq!(report.artifacts.len(), 6);
    assert_eq!(report.built(), 6);

    let out = dir.path().join("out");
    let mapping = load_mapping(&out.join("mappings/mid.evam"), None, false).unwrap();
    assert_eq!((mapping.rows(), mapping.cols()), (44, 50));
    // shared tokens should mostly land on themselves
    let mid = lexalign::embed_store::load_embeddings(
        &dir.path().join("mid.vec"),
        lexalign::embed_store::EmbeddingFormat::Word2VecText,
    )
    .unwrap();
    let big = lexalign::embed_store::load_embeddings(
        &dir.path().join("big.vec"),
        lexalign::embed_store::EmbeddingFormat::Word2VecText,
    )
    .unwrap();
    let hits = (0..mapping.rows())
        .filter(|&i| {
            let tok = mid.vocab().token(i as u32).unwrap();
            mapping.row_argmax(i).and_then(|j| big.vocab().token(j)) == Some(tok)
        })
        .count();
    assert!(hits >= 30, "only {hits} self-alignments");

    let (inputs, states) = read_trace(&out.join("trace.jsonl")).unwrap();
    assert!(inputs.is_some());
    assert_eq!(states.len(), 3);
    assert!(states.iter().all(|s| s.finished.is_some() && !s.step_log.is_empty()));
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["diversity"]["per_n"].as_array().unwrap().len(), 3);
    assert!(stats["mappings"]["mid"]["checks"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["ok"] == true));
    assert!(out.join("stats.csv").is_file());

    let again = run_pipeline(cfg, &Stage::ALL).unwrap();
    assert_eq!(again.built(), 0);
    assert!(again.artifacts.iter().all(|a| a.status == ArtifactStatus::Cached));
}

#[test]
fn changed_noise_config_rebuilds_downstream_only() {
    let (_dir, cfg_path) = fixture_copy();
    let cfg = load(&cfg_path);
    run_pipeline(cfg.clone(), &Stage::ALL).unwrap();
    let changed = SessionConfig::load_with_env(
        &cfg_path,
        [("LEXALIGN_NOISE__T".to_string(), "3".to_string())],
    )
    .unwrap();
    let r = run_pipeline(changed, &Stage::ALL).unwrap();
    let status = |stage| {
        r.artifacts
            .iter()
            .filter(|a| a.stage == stage)
            .map(|a| a.status)
            .collect::<Vec<_>>()
    };
    assert_eq!(status(Stage::Align), vec![ArtifactStatus::Cached; 2]);
    assert_eq!(status(Stage::BuildMap), vec![ArtifactStatus::Built; 2]);
}

#[test]
fn missing_embedding_file_names_the_field() {
    let (dir, cfg_path) = fixture_copy();
    std::fs::remove_file(dir.path().join("mid.vec")).unwrap();
    let err = run_pipeline(load(&cfg_path), &Stage::ALL).unwrap_err();
    match err {
        Error::Validation(problems) => {
            assert_eq!(problems.len(), 1);
            assert!(problems[0].starts_with("models[1].embeddings"), "{problems:?}");
        }
        e => panic!("expected a validation error, got {e}"),
    }
}

#[test]
fn downstream_stage_without_artifacts_is_a_stage_error() {
    let (_dir, cfg_path) = fixture_copy();
    let err = run_pipeline(load(&cfg_path), &[Stage::Decode]).unwrap_err();
    assert!(matches!(err, Error::Stage { ref stage, .. } if stage == "decode"), "{err}");
}
