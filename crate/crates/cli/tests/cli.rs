use std::process::Command;

const TINY: &str = r#"
seed = 2
detectors = ["spam_linear"]
manipulations = [{ kind = "median", kernel = 3 }]
attacks = []

[dataset]
images_per_device = 2
patch_size = 24
patches_per_image = 4
patch_stride = 24
"#;

fn cfx() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cfx"));
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn stages_run_in_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    for stage in [&["dataset", "build"][..], &["manipulate"], &["features", "extract"], &["train"], &["evaluate"], &["report"]] {
        let status = cfx()
            .args(stage)
            .arg("--config")
            .arg(&cfg)
            .arg("--seed")
            .arg("7")
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success(), "stage {stage:?} failed");
    }
    let csv = std::fs::read_to_string(out.join("reports/metrics.csv")).unwrap();
    assert!(csv.starts_with("# config=") && csv.lines().next().unwrap().ends_with("seed=7"));
    assert!(out.join("features/median3.csv").exists());
    assert!(out.join("models/median3__spam_linear.cfxm").exists());
    assert!(out.join("dataset/pristine/dev00/im0000_p000.pgm").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "unknown_key = 1\n").unwrap();
    let code = |args: &[&str]| cfx().args(args).arg("--out").arg(dir.path().join("o")).status().unwrap().code();
    assert_eq!(code(&["train", "--config", bad.to_str().unwrap()]), Some(2));
    assert_eq!(code(&["train", "--config", dir.path().join("missing.toml").to_str().unwrap()]), Some(2));
    let good = dir.path().join("good.toml");
    std::fs::write(&good, TINY).unwrap();
    // training before the dataset exists is a runtime failure
    assert_eq!(code(&["train", "--config", good.to_str().unwrap()]), Some(3));
    assert_eq!(code(&["config", "--config", good.to_str().unwrap()]), Some(0));
}
