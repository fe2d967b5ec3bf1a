//! End-to-end checks of the `mdnet` binary: exit-code conventions and a
//! desk-scale phantom → train → predict → evaluate pipeline.

use mdnet_core::config::AppConfig;
use std::path::Path;
use std::process::{Command, Output};

fn mdnet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdnet"))
        .args(args)
        .current_dir(dir)
        .env_remove("MDNET_CONFIG")
        .output()
        .expect("failed to spawn mdnet")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn exit_code_conventions() {
    let dir = tempfile::tempdir().unwrap();
    // Usage errors and unknown subcommands are validation failures.
    assert_exit(&mdnet(&[], dir.path()), 1);
    assert_exit(&mdnet(&["no-such-command"], dir.path()), 1);
    // Help and version are successes.
    assert_exit(&mdnet(&["--help"], dir.path()), 0);
    assert_exit(&mdnet(&["--version"], dir.path()), 0);
    // A missing config file is a runtime (I/O) failure.
    assert_exit(&mdnet(&["--config", "missing.json", "selftest"], dir.path()), 2);
    // A malformed shape is a validation failure.
    assert_exit(
        &mdnet(&["phantom", "--out", "d", "--n", "1", "--shape", "9,9"], dir.path()),
        1,
    );
}

#[test]
fn phantom_generation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let run = mdnet(
            &["--seed", "7", "phantom", "--out", out, "--n", "1", "--shape", "16,16,16"],
            dir.path(),
        );
        assert_exit(&run, 0);
    }
    for file in ["t1.nii.gz", "t1c.nii.gz", "t2.nii.gz", "flair.nii.gz", "seg.nii.gz"] {
        let a = std::fs::read(dir.path().join("a/case_0000").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b/case_0000").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between same-seed runs");
    }
}

#[test]
fn full_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = AppConfig::toy(7);
    config.preprocess.target_shape = [16, 16, 16];
    config.model.input_shape = [16, 16, 16];
    config.train.n_epochs = 2;
    config.save(dir.path().join("toy.json")).unwrap();
    let cfg = ["--config", "toy.json", "--seed", "7"];
    let with_cfg = |rest: &[&str]| {
        let mut args: Vec<&str> = cfg.to_vec();
        args.extend_from_slice(rest);
        mdnet(&args, dir.path())
    };

    assert_exit(&with_cfg(&["selftest"]), 0);
    assert_exit(&with_cfg(&["phantom", "--out", "data", "--n", "2", "--shape", "16,16,16"]), 0);
    assert_exit(&with_cfg(&["preprocess", "--dataset", "data", "--out", "prep"]), 0);
    // Predicting before any model exists is a runtime failure.
    assert_exit(
        &with_cfg(&["ensemble-predict", "--dataset", "data", "--models", "models", "--out", "x"]),
        2,
    );
    assert_exit(&with_cfg(&[
        "train", "--dataset", "data", "--out", "models", "--folds", "1", "--ensemble", "2",
    ]), 0);
    assert_exit(&with_cfg(&[
        "ensemble-predict", "--dataset", "data", "--models", "models", "--out", "pred",
    ]), 0);
    assert_exit(&with_cfg(&["postprocess", "--probs", "pred", "--out", "post"]), 0);
    assert_exit(&with_cfg(&[
        "uncertainty", "--dataset", "data", "--models", "models", "--out", "unc",
    ]), 0);
    assert_exit(&with_cfg(&[
        "evaluate", "--pred", "pred", "--dataset", "data", "--unc", "unc",
        "--out", "metrics.csv", "--report", "report",
    ]), 0);

    for case in ["case_0000", "case_0001"] {
        assert!(dir.path().join(format!("pred/{case}_seg.nii.gz")).exists());
        // Post-processing saved probabilities reproduces the predicted labels.
        let a = std::fs::read(dir.path().join(format!("pred/{case}_seg.nii.gz"))).unwrap();
        let b = std::fs::read(dir.path().join(format!("post/{case}_seg.nii.gz"))).unwrap();
        assert_eq!(a, b, "{case}: postprocess output differs from predict output");
        for region in ["whole", "core", "enhance"] {
            assert!(dir.path().join(format!("unc/{case}_unc_{region}.nii.gz")).exists());
        }
    }
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with("case,region,dsc,sens,spec,hd95,dauc,rftp,rftn"));
    assert!(csv.lines().any(|l| l.starts_with("mean,")));
    assert!(dir.path().join("report/filtration_curves.png").exists());
}
