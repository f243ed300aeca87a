use std::path::Path;

use fod_forge_core::config::PipelineConfig;
use fod_forge_core::dataset::{DatasetManifest, Split};
use fod_forge_core::error::Error;
use fod_forge_core::io;
use fod_forge_core::pipeline::{ArtifactMeta, Pipeline, Stage};

fn tiny() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.master_seed = 17;
    c.phantom.count = 4;
    c.phantom.volume_dim = 16;
    c.phantom.cube_dim = 8;
    c.phantom.ellipsoid_radius_min = 1.5;
    c.phantom.ellipsoid_radius_max = 2.5;
    c.geometry.detector_rows = 24;
    c.geometry.detector_cols = 24;
    c.geometry.n_angles = 16;
    c.sirt.iterations = 5;
    c.dataset.train_objects = 2;
    c.dataset.included = 2;
    c.dataset.total = 10;
    c
}

fn all_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn end_to_end_then_fully_cached() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(), dir.path()).unwrap();
    let first = p.run(None).unwrap();
    assert!(first.computed() > 0);
    assert!(first.mean_jaccard.is_some());
    let eval = first.eval.as_ref().unwrap();
    assert_eq!(eval.n_images, 4);

    let manifest: DatasetManifest = io::read_json(&dir.path().join("dataset/manifest.json")).unwrap();
    assert_eq!(manifest.records.len(), 10);
    assert_eq!(manifest.count(Split::Val), 1);
    manifest.check_files(&dir.path().join("dataset")).unwrap();
    let test: DatasetManifest = io::read_json(&dir.path().join("dataset/test_manifest.json")).unwrap();
    assert_eq!(test.records.len(), 4);

    // Every sidecar carries the config hash.
    let meta: ArtifactMeta = io::read_json(&dir.path().join("recons/obj00001.json")).unwrap();
    assert_eq!(meta.config_hash, p.config_hash());

    let again = Pipeline::new(tiny(), dir.path()).unwrap().run(None).unwrap();
    assert_eq!(again.computed(), 0, "{:?}", again.stages);
    assert_eq!(again.mean_jaccard, first.mean_jaccard);

    // Changing only the SIRT section recomputes from recon onwards.
    let mut c = tiny();
    c.sirt.iterations = 6;
    let third = Pipeline::new(c, dir.path()).unwrap().run(None).unwrap();
    let by_stage = |s: Stage| third.stages.iter().find(|r| r.stage == Some(s)).unwrap().computed;
    assert_eq!(by_stage(Stage::Phantom), 0);
    assert_eq!(by_stage(Stage::Scan), 0);
    assert_eq!(by_stage(Stage::Recon), 4);
}

#[test]
fn only_stage_reports_missing_precondition() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(), dir.path()).unwrap();
    match p.run(Some(Stage::Gt)) {
        Err(Error::MissingStage { stage, .. }) => assert_eq!(stage, "segment"),
        other => panic!("expected a missing-stage error, got {other:?}"),
    }
    p.run(Some(Stage::Phantom)).unwrap();
    match p.run(Some(Stage::Recon)) {
        Err(Error::MissingStage { stage, .. }) => assert_eq!(stage, "scan"),
        other => panic!("expected a missing-stage error, got {other:?}"),
    }
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let run = |threads: usize| {
        let dir = tempfile::tempdir().unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| Pipeline::new(tiny(), dir.path()).unwrap().run(None).unwrap());
        let files = all_files(dir.path());
        (dir, files)
    };
    let (_a, one) = run(1);
    let (_b, four) = run(4);
    assert_eq!(one.len(), four.len());
    for ((na, a), (nb, b)) in one.iter().zip(&four) {
        assert_eq!(na, nb);
        assert!(a == b, "{na} differs");
    }
}
