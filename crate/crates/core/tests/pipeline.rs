use std::fs;

use hapi_core::pipeline::{paths, PipelineError, Stage, StageStatus, TrainIdOptions, Workspace};
use hapi_core::synth::GeneratorConfig;

fn outputs(ws: &Workspace) -> Vec<(String, String)> {
    [
        Stage::Synth,
        Stage::Cohort,
        Stage::Features,
        Stage::TrainId,
        Stage::TrainRisk,
        Stage::EvalId,
        Stage::EvalRisk,
        Stage::EvalFairness,
    ]
    .into_iter()
    .flat_map(|s| ws.manifest(s).expect("manifest written").outputs)
    .map(|o| (o.path, o.sha256))
    .collect()
}

#[test]
fn stages_are_idempotent_deterministic_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path());
    let cfg = GeneratorConfig::with_total(400, 11);

    let err = ws.train_id(&TrainIdOptions::default(), false).unwrap_err();
    match &err {
        PipelineError::MissingArtifact { path, producer, .. } => {
            assert!(
                path.starts_with("claims/")
                    || path.starts_with("cohort/")
                    || path.starts_with("features/")
            );
            assert!(!producer.is_empty());
        }
        e => panic!("expected a missing artifact, got {e}"),
    }

    let first = ws.run_all(&cfg, false).unwrap();
    assert!(first.iter().all(|r| r.status == StageStatus::Ran));
    for f in ["summary.csv", "delays.csv", "fpr_sweep.csv", "report.html"] {
        assert!(ws.exists(&format!("{}/{f}", paths::ID_REPORTS)), "{f}");
    }
    for f in [
        "trend.csv",
        "earliest_alerts.csv",
        "metrics.json",
        "report.html",
    ] {
        assert!(ws.exists(&format!("{}/{f}", paths::RISK_REPORTS)), "{f}");
    }
    assert!(ws.exists(&format!("{}/subgroups.csv", paths::FAIRNESS_REPORTS)));
    let digests = outputs(&ws);

    let again = ws.run_all(&cfg, false).unwrap();
    assert!(again.iter().all(|r| r.status == StageStatus::UpToDate));

    let forced = ws.run_all(&cfg, true).unwrap();
    assert!(forced.iter().all(|r| r.status == StageStatus::Ran));
    assert_eq!(outputs(&ws), digests);

    // A changed seed reruns synth and everything downstream of it.
    let other = GeneratorConfig::with_total(400, 12);
    assert_eq!(ws.synth(&other, false).unwrap().status, StageStatus::Ran);
    let cohort = ws
        .cohort(
            &hapi_core::pipeline::CohortOptions {
                seed: 12,
                roles: None,
            },
            false,
        )
        .unwrap();
    assert_eq!(cohort.status, StageStatus::Ran);
}

#[test]
fn mismatched_model_names_both_fingerprints() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path());
    let cfg = GeneratorConfig::with_total(300, 5);
    ws.synth(&cfg, false).unwrap();
    ws.cohort(
        &hapi_core::pipeline::CohortOptions {
            seed: 5,
            roles: None,
        },
        false,
    )
    .unwrap();
    ws.features(&hapi_core::pipeline::FeatureOptions::new(5), false)
        .unwrap();
    ws.train_id(&TrainIdOptions::default(), false).unwrap();

    let model_path = ws.path(paths::ID_MODEL);
    let text = fs::read_to_string(&model_path).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let real = v["fingerprint"].as_str().unwrap().to_string();
    let tampered = text.replace(&real, "0000feedface");
    fs::write(&model_path, tampered).unwrap();

    let err = ws.load_identifier().unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, PipelineError::Fingerprint { .. }), "{msg}");
    assert!(msg.contains("0000feedface") && msg.contains(&real), "{msg}");
}

#[test]
fn feature_matrix_from_another_vocabulary_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path());
    let cfg = GeneratorConfig::with_total(300, 6);
    ws.synth(&cfg, false).unwrap();
    ws.cohort(
        &hapi_core::pipeline::CohortOptions {
            seed: 6,
            roles: None,
        },
        false,
    )
    .unwrap();
    ws.features(&hapi_core::pipeline::FeatureOptions::new(6), false)
        .unwrap();
    let id_vocab = fs::read(ws.path(paths::ID_VOCAB)).unwrap();
    fs::write(ws.path(paths::RISK_VOCAB), id_vocab).unwrap();
    let err = ws.train_risk(false).unwrap_err();
    assert!(matches!(err, PipelineError::Fingerprint { .. }), "{err}");
}
