use std::process::Command;

use sharpscore::config::ExperimentConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sharpscore"))
}

#[test]
fn presets_print_loadable_configs() {
    for kind in ["toy1d", "toy2d", "shapes", "estimator-bench", "score-evolution"] {
        let out = bin().args(["preset", kind]).output().unwrap();
        assert!(out.status.success(), "{kind}");
        let cfg = ExperimentConfig::from_toml_str(&String::from_utf8(out.stdout).unwrap()).unwrap();
        cfg.validate().unwrap();
    }
}

#[test]
fn oracle_run_writes_a_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "kind = \"toy1d\"\ndenoiser = \"oracle\"\nsamples = 40\n\
         [schedule]\nkind = \"linear\"\nsteps = 100\n\
         [metrics]\nlaplacian_window = [20, 40]\n",
    )
    .unwrap();
    let out = bin()
        .args(["run", cfg.to_str().unwrap(), "--alpha", "0.02", "--output-dir"])
        .arg(dir.path().join("runs"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("im_count_sharpened"));
    let runs: Vec<_> = std::fs::read_dir(dir.path().join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let run = runs[0].as_ref().unwrap().path();
    let saved = ExperimentConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(saved.sharpening.alpha, 0.02);
    assert!(run.join("metrics.csv").exists());
}

#[test]
fn errors_exit_nonzero() {
    let out = bin().args(["run", "/nonexistent/config.toml"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("e.toml");
    std::fs::write(&cfg, "kind = \"score-evolution\"\n").unwrap();
    let out = bin().args(["score-evolution", cfg.to_str().unwrap(), "--output-dir"]).arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn generate_and_classify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("shapes");
    let out = bin()
        .args(["generate-shapes", data.to_str().unwrap(), "--count", "30", "--adversarial"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = bin().args(["classify", data.to_str().unwrap(), "--out"]).arg(dir.path().join("l.csv")).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("accuracy on 30 annotated images: 100.00%"));
    assert!(dir.path().join("l.csv").exists());
}
