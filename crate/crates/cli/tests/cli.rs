use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
master_seed = 17

[phantom]
count = 4
volume_dim = 16
cube_dim = 8
ellipsoid_radius_min = 1.5
ellipsoid_radius_max = 2.5

[geometry]
detector_rows = 24
detector_cols = 24
n_angles = 16

[sirt]
iterations = 5

[dataset]
train_objects = 2
included = 2
total = 10
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fod-forge"))
        .args(args)
        .env("FOD_FORGE_THREADS", "2")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_stages_eval_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("run");

    let o = run(&["phantom", "-c", s(&cfg), "-o", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("phantoms/obj00003.u8").is_file());

    let o = run(&["pipeline", "-c", s(&cfg), "-o", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("phantom: computed 0, cached 4"), "{text}");
    assert!(out.join("eval/report.json").is_file());

    let o = run(&["segment", "-c", s(&cfg), "-o", s(&out), "--theta", "0.5", "--sweep", "0.4,0.6"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("segs/theta_0.4").is_dir());

    let ev = dir.path().join("ev");
    let target = out.join("dataset/test");
    let o = run(&["eval", "--pred", s(&target), "--target", s(&target), "-o", s(&ev)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("detection 100.00%"));
    assert!(ev.join("report.csv").is_file());

    let plots = dir.path().join("plots");
    let a = format!("2={}", s(&ev.join("report.json")));
    let b = format!("4={}", s(&out.join("eval/report.json")));
    let o = run(&["plot", &a, &a, &b, "-o", s(&plots)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(plots.join("curves.csv").is_file());
    assert!(plots.join("mean_jaccard.png").is_file());
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[phantom]\nno_such_key = 1\n").unwrap();
    let out = dir.path().join("run");
    assert_eq!(run(&["pipeline", "-c", s(&bad), "-o", s(&out)]).status.code(), Some(2));

    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let o = run(&["pipeline", "-c", s(&cfg), "-o", s(&out), "--only", "gt"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("segment"));

    let (p, t) = (dir.path().join("p"), dir.path().join("t"));
    std::fs::create_dir_all(&p).unwrap();
    std::fs::create_dir_all(&t).unwrap();
    std::fs::write(t.join("mask_0000.u8"), [0u8, 1, 1, 0]).unwrap();
    std::fs::write(t.join("mask_0000.json"), r#"{"rows":2,"cols":2,"object_id":0,"angle_index":0,"provenance":"absolute","config_hash":null}"#).unwrap();
    let o = run(&["eval", "--pred", s(&p), "--target", s(&t), "-o", s(&dir.path().join("ev"))]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
