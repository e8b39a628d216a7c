//! Command-surface tests: drives the `sta` binary as a subprocess with
//! tiny configs and checks its file outputs and error behavior.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sta() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sta"))
}

fn write_config(root: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "seed = 3\n\
         corpus.dir = {}\n\
         corpus.scenes = 24\n\
         run.dir = {}\n\
         vqvae.epochs = 2\n\
         encoder.max_epochs = 2\n\
         diffusion.epochs = 1\n\
         diffusion.T = 8\n\
         evalnet.epochs = 2\n\
         {}",
        root.join("corpus").display(),
        root.join("run").display(),
        extra
    );
    let path = root.join("test.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(
        !out.status.success(),
        "command unexpectedly succeeded: {}",
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn gen_data_summary_force_and_reproducibility() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "");

    let out = run_ok(sta().args(["gen-data", "--config"]).arg(&cfg));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("24 scenes"), "{}", text);
    assert!(text.contains("languages {a,b}"), "{}", text);

    // refuses to overwrite without --force
    let err = run_err(sta().args(["gen-data", "--config"]).arg(&cfg));
    assert!(err.contains("not empty"), "{}", err);

    // --force regenerates byte-identically
    let before = std::fs::read(root.path().join("corpus/manifest.json")).unwrap();
    run_ok(sta().args(["gen-data", "--force", "--config"]).arg(&cfg));
    let after = std::fs::read(root.path().join("corpus/manifest.json")).unwrap();
    assert_eq!(before, after);
}

#[test]
fn train_dependency_error_names_missing_stage() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "");
    run_ok(sta().args(["gen-data", "--config"]).arg(&cfg));

    let err = run_err(sta().args(["train", "--stage", "diffusion", "--config"]).arg(&cfg));
    assert!(err.contains("vqvae"), "should name the missing stage: {}", err);

    let err = run_err(sta().args(["train", "--stage", "nonsense", "--config"]).arg(&cfg));
    assert!(err.contains("unknown stage"), "{}", err);
}

#[test]
fn train_writes_log_lines_checkpoint_and_archived_config() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "");
    run_ok(sta().args(["gen-data", "--config"]).arg(&cfg));
    run_ok(sta().args(["train", "--stage", "vqvae", "--config"]).arg(&cfg));

    let log = std::fs::read_to_string(root.path().join("run/train_vqvae.log.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2, "one log line per epoch");
    for line in lines {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "loss", "dev_loss", "lr", "seed"] {
            assert!(v.get(key).is_some(), "log line missing {}", key);
        }
    }
    assert!(root.path().join("run/vqvae.stak").exists());
    assert!(root
        .path()
        .join("run/config_vqvae.resolved.cfg")
        .exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let root = tempfile::tempdir().unwrap();
    let path = root.path().join("bad.cfg");
    std::fs::write(&path, "no.such_key = 5\n").unwrap();
    let err = run_err(sta().args(["gen-data", "--config"]).arg(&path));
    assert!(err.contains("unknown key"), "{}", err);
}

#[test]
fn sample_produces_count_files_and_identical_bytes_under_seed() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "");
    run_ok(sta().args(["gen-data", "--config"]).arg(&cfg));
    for stage in ["vqvae", "encoder", "diffusion"] {
        run_ok(sta().args(["train", "--stage", stage, "--config"]).arg(&cfg));
    }

    let scene = "shape=triangle,color=green,size=large,pos=8";
    let out_a = root.path().join("sa");
    let out_b = root.path().join("sb");
    for out in [&out_a, &out_b] {
        run_ok(
            sta()
                .args(["sample", "--scene", scene, "--count", "4", "--config"])
                .arg(&cfg)
                .arg("--out")
                .arg(out),
        );
    }
    // count + grid
    for i in 0..4 {
        assert!(out_a.join(format!("sample_{:03}.png", i)).exists());
    }
    assert!(out_a.join("grid.png").exists());
    // same seed, same bytes
    for name in ["sample_000.png", "sample_003.png", "grid.png"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{} differs across identical-seed runs", name);
    }

    // unregistered language is rejected
    let err = run_err(
        sta()
            .args([
                "sample",
                "--scene",
                scene,
                "--language",
                "klingon",
                "--config",
            ])
            .arg(&cfg),
    );
    assert!(err.contains("unknown language"), "{}", err);
}

#[test]
fn evaluate_errors_without_classifier_then_reports_self_metrics() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "");
    run_ok(sta().args(["gen-data", "--config"]).arg(&cfg));

    let images = root.path().join("corpus/images");
    let err = run_err(
        sta()
            .args(["evaluate", "--config"])
            .arg(&cfg)
            .arg("--generated")
            .arg(&images)
            .arg("--reference")
            .arg(&images),
    );
    assert!(err.contains("classifier"), "{}", err);

    run_ok(sta().args(["train", "--stage", "eval-classifier", "--config"]).arg(&cfg));
    let out = run_ok(
        sta()
            .args(["evaluate", "--k", "1", "--config"])
            .arg(&cfg)
            .arg("--generated")
            .arg(&images)
            .arg("--reference")
            .arg(&images),
    );
    let reports: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("evaluate must print JSON");
    let arr = reports.as_array().unwrap();
    let get = |name: &str| -> f64 {
        arr.iter()
            .find(|r| r["metric"] == name)
            .unwrap_or_else(|| panic!("missing metric {}", name))["value"]
            .as_f64()
            .unwrap()
    };
    // reference vs itself
    assert!(get("fid").abs() < 1e-6, "self-FID = {}", get("fid"));
    assert_eq!(get("recall_at_k"), 100.0);
    // every report carries the extractor checksum
    for r in arr {
        assert!(r["extractor_checksum"].as_str().unwrap().len() == 16);
    }
    // report file also written
    assert!(root.path().join("run/metrics.json").exists());
}

#[test]
fn empty_directories_are_rejected() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "");
    run_ok(sta().args(["gen-data", "--config"]).arg(&cfg));
    run_ok(sta().args(["train", "--stage", "eval-classifier", "--config"]).arg(&cfg));
    let empty = root.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let err = run_err(
        sta()
            .args(["evaluate", "--config"])
            .arg(&cfg)
            .arg("--generated")
            .arg(&empty)
            .arg("--reference")
            .arg(root.path().join("corpus/images")),
    );
    assert!(err.contains("empty"), "{}", err);
}

#[test]
fn retrieval_eval_reports_both_directions() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "");
    run_ok(sta().args(["gen-data", "--config"]).arg(&cfg));
    run_ok(sta().args(["train", "--stage", "encoder", "--config"]).arg(&cfg));
    let out = run_ok(sta().args(["retrieval-eval", "--config"]).arg(&cfg));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("speech->image"), "{}", text);
    assert!(text.contains("image->speech"), "{}", text);
    assert!(root.path().join("run/retrieval.json").exists());
}

#[test]
fn resumed_run_reproduces_the_unbroken_loss_trajectory() {
    let root = tempfile::tempdir().unwrap();
    // unbroken: 4 epochs straight through
    let unbroken = write_config(root.path(), "");
    run_ok(sta().args(["gen-data", "--config"]).arg(&unbroken));
    let full = root.path().join("full.cfg");
    std::fs::write(
        &full,
        std::fs::read_to_string(&unbroken)
            .unwrap()
            .replace("vqvae.epochs = 2", "vqvae.epochs = 4")
            .replace("run.dir = ", "# run.dir moved\nrun.dir = ")
            .replace(
                root.path().join("run").to_str().unwrap(),
                root.path().join("run_full").to_str().unwrap(),
            ),
    )
    .unwrap();
    run_ok(sta().args(["train", "--stage", "vqvae", "--config"]).arg(&full));

    // broken: 2 epochs, then resume to 4
    run_ok(sta().args(["train", "--stage", "vqvae", "--config"]).arg(&unbroken));
    let extended = root.path().join("extended.cfg");
    std::fs::write(
        &extended,
        std::fs::read_to_string(&unbroken)
            .unwrap()
            .replace("vqvae.epochs = 2", "vqvae.epochs = 4"),
    )
    .unwrap();
    run_ok(
        sta()
            .args(["train", "--stage", "vqvae", "--resume", "--config"])
            .arg(&extended),
    );

    let a = std::fs::read_to_string(root.path().join("run_full/train_vqvae.log.jsonl")).unwrap();
    let b = std::fs::read_to_string(root.path().join("run/train_vqvae.log.jsonl")).unwrap();
    assert_eq!(a, b, "resumed trajectory must equal the unbroken one");
}

#[test]
fn seed_flag_overrides_config_seed() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "");
    // corpora from different seeds must differ
    let d1 = root.path().join("c1");
    let d2 = root.path().join("c2");
    run_ok(
        sta()
            .args(["gen-data", "--seed", "100", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&d1),
    );
    run_ok(
        sta()
            .args(["gen-data", "--seed", "101", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&d2),
    );
    let m1 = std::fs::read(d1.join("manifest.json")).unwrap();
    let m2 = std::fs::read(d2.join("manifest.json")).unwrap();
    assert_ne!(m1, m2);
}
