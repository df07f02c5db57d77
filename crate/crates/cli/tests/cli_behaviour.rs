//! CLI contract: exit codes (0 success, 1 runtime failure, 2 usage error),
//! JSON outcomes on stdout, and the end-to-end eval path.

use std::path::Path;
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_blenddiff")
}

fn write_tiny_config(dir: &Path, with_dataset: Option<&Path>) -> std::path::PathBuf {
    let mut cfg = blenddiff_engine::config::RunConfig::new(dir.join("out"), 5);
    cfg.schedule.steps = 24;
    cfg.schedule.beta_start = 4e-3;
    cfg.schedule.beta_end = 0.35;
    cfg.oracle.clip_count = 2;
    cfg.oracle.frames_per_clip = 16;
    cfg.oracle.feature_dim = 3;
    cfg.denoiser.layers = 1;
    cfg.denoiser.heads = 2;
    cfg.denoiser.width = 8;
    cfg.denoiser.ff_width = Some(16);
    cfg.diffusion_train.epochs = 1;
    cfg.diffusion_train.batch_size = 2;
    cfg.diffusion_train.chunk_len = 8;
    cfg.sampler.chunk_len = 8;
    cfg.dataset = with_dataset.map(|p| p.to_path_buf());
    let path = dir.join("cfg.json");
    cfg.save(&path).unwrap();
    path
}

#[test]
fn missing_config_file_exits_2() {
    let out = Command::new(bin())
        .args(["train-diffusion", "--config", "/nonexistent/cfg.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path(), None);
    let out = Command::new(bin())
        .args(["train-diffusion", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset"));
}

#[test]
fn config_with_unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"version":1,"seed":1,"output_dir":"o","mystery":true}"#).unwrap();
    let out = Command::new(bin())
        .args(["oracle-gen", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_gen_then_eval_succeeds_with_zero_distance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_tiny_config(dir.path(), None);
    let out = Command::new(bin())
        .args(["oracle-gen", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let outcome: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let manifest = outcome["manifest"].as_str().unwrap().to_string();

    // Point the config at the dataset and evaluate a clip against itself.
    let cfg_path = write_tiny_config(dir.path(), Some(Path::new(&manifest)));
    let clip = dir.path().join("out/dataset/clips");
    let first = std::fs::read_dir(&clip)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .find(|p| p.extension().is_some_and(|x| x == "csv"))
        .unwrap();
    let out = Command::new(bin())
        .args([
            "eval",
            "--config",
            cfg_path.to_str().unwrap(),
            "--pred",
            first.to_str().unwrap(),
            "--truth",
            first.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    let lmd = report["report"]["aggregate"]["mean_param_lmd"].as_f64().unwrap();
    assert_eq!(lmd, 0.0, "a sequence compared against itself has zero distance");
}

#[test]
fn unknown_style_clip_exits_2_and_lists_ids() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_tiny_config(dir.path(), None);
    Command::new(bin())
        .args(["oracle-gen", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    let manifest = dir.path().join("out/dataset/manifest.json");
    let cfg_path = write_tiny_config(dir.path(), Some(&manifest));

    let out = Command::new(bin())
        .args(["train-diffusion", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let trained: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    let ckpt = trained["checkpoint"].as_str().unwrap().to_string();
    let audio = dir.path().join("out/dataset/clips");
    let fmat = std::fs::read_dir(&audio)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .find(|p| p.extension().is_some_and(|x| x == "fmat"))
        .unwrap();

    let out = Command::new(bin())
        .args([
            "generate",
            "--config",
            cfg_path.to_str().unwrap(),
            "--audio",
            fmat.to_str().unwrap(),
            "--style",
            "does_not_exist",
            "--checkpoint",
            &ckpt,
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("does_not_exist"), "{stderr}");
    assert!(stderr.contains("available"), "{stderr}");
}
