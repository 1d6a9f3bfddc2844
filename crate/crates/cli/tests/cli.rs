use std::path::Path;
use std::process::{Command, Output};

fn rotequiv(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rotequiv"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &[&str] = &[
    "--set",
    "orientations=4",
    "--set",
    "task.orientation_bins=4",
    "--set",
    "input_size=32",
    "--set",
    "stem.channels=4",
    "--set",
    "stages.*.channels=8",
    "--set",
    "head.hidden_channels=8",
    "--n-train",
    "8",
    "--n-test",
    "4",
    "--image-size",
    "32",
    "--batch-size",
    "4",
    "--eps-samples",
    "2",
];

#[test]
fn check_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = rotequiv(&["check"], dir.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let csv = std::fs::read_to_string(dir.path().join("strictness.csv")).unwrap();
    assert!(csv.starts_with("layer,name,padded_in,k,s,residue,verdict\n"));
    assert!(dir.path().join("manifest.toml").exists());

    let o = rotequiv(&["check", "--set", "stages.*.downsample_mode=approx"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("first flagged layer stage1.down.down"), "{}", stdout(&o));
}

#[test]
fn malformed_config_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "orientations = 8\ninput_size = \"big\"\n").unwrap();
    let o = rotequiv(&["check", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn unknown_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&rotequiv(&["check", "--frobnicate"], dir.path())), 2);
    assert_eq!(code(&rotequiv(&["mismatch-demo", "--config", "x.toml"], dir.path())), 2);
    assert_eq!(code(&rotequiv(&["check", "--set", "stem.width=3"], dir.path())), 2);
}

#[test]
fn equiv_error_strict_and_approx() {
    let dir = tempfile::tempdir().unwrap();
    let o = rotequiv(&["equiv-error", "--samples", "2"], dir.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let csv = std::fs::read_to_string(dir.path().join("equiv_error.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("stage,angle_deg,epsilon,epsilon_normalized"));
    let worst = |csv: &str| {
        csv.lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
            .fold(0.0, f64::max)
    };
    assert!(worst(&csv) <= 1e-5);

    let o = rotequiv(
        &["equiv-error", "--samples", "2", "--set", "stages.*.downsample_mode=approx"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(dir.path().join("equiv_error.csv")).unwrap();
    assert!(worst(&csv) > 1e-3);

    let o = rotequiv(&["equiv-error", "--angles", "90,45"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn zero_epochs_writes_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--epochs", "0"];
    args.extend_from_slice(TINY);
    let o = rotequiv(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cks: Vec<_> = std::fs::read_dir(dir.path().join("checkpoints")).unwrap().collect();
    assert_eq!(cks.len(), 1);
    assert!(dir.path().join("checkpoints/epoch_000.ckpt").exists());
    let csv = std::fs::read_to_string(dir.path().join("training.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("epoch,loss,accuracy,angular_error_deg,eps_S0,eps_S1,eps_S2,eps_S3,eps_S4\n"));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--epochs", "2"];
    args.extend_from_slice(TINY);
    assert_eq!(code(&rotequiv(&args, full.path())), 0);

    let part = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--epochs", "1"];
    args.extend_from_slice(TINY);
    assert_eq!(code(&rotequiv(&args, part.path())), 0);
    let ck = part.path().join("last.ckpt");
    let resumed = tempfile::tempdir().unwrap();
    let o = rotequiv(&["train", "--epochs", "2", "--resume", ck.to_str().unwrap()], resumed.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(full.path(), "training.csv"), read(resumed.path(), "training.csv"));
    assert_eq!(read(full.path(), "last.ckpt"), read(resumed.path(), "last.ckpt"));

    // Settings come from the checkpoint; overriding them is refused.
    let o = rotequiv(
        &["train", "--resume", ck.to_str().unwrap(), "--lr", "0.1"],
        resumed.path(),
    );
    assert_eq!(code(&o), 2);

    // A strict model predicts the same classes at every quarter turn.
    let last = full.path().join("last.ckpt");
    let o = rotequiv(
        &["robustness", "--checkpoint", last.to_str().unwrap(), "--n-test", "8", "--angles", "0,90,180,270,30"],
        full.path(),
    );
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let csv = std::fs::read_to_string(full.path().join("robustness.csv")).unwrap();
    let acc: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(acc.len(), 5);
    assert!(acc[..4].iter().all(|a| *a == acc[0]));

    // and equiv-error accepts the checkpoint
    let o = rotequiv(&["equiv-error", "--checkpoint", last.to_str().unwrap(), "--samples", "2"], full.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
}

#[test]
fn mismatch_demo_prints_disjoint_sets() {
    let dir = tempfile::tempdir().unwrap();
    let o = rotequiv(&["mismatch-demo", "--n", "2"], dir.path());
    assert_eq!(code(&o), 0);
    let s = stdout(&o);
    assert!(s.contains("pre rows {1,3}"), "{s}");
    assert!(s.contains("post rows {2,4}"), "{s}");
    let csv = std::fs::read_to_string(dir.path().join("mismatch.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn gradcheck_single_op() {
    let dir = tempfile::tempdir().unwrap();
    let o = rotequiv(&["gradcheck", "--op", "conv2d", "--points", "2"], dir.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let csv = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert!(csv.starts_with("op,points,step,max_rel_error,max_normwise_error,pass\n"));
    assert_eq!(code(&rotequiv(&["gradcheck", "--op", "nope"], dir.path())), 2);
}

#[test]
fn gen_data_writes_images_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let o = rotequiv(
        &["gen-data", "--n-train", "4", "--n-test", "2", "--image-size", "16", "--seed", "3"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let bytes = std::fs::read(dir.path().join("train_images.f32")).unwrap();
    assert_eq!(bytes.len(), 4 * 16 * 16 * 4);
    let labels = std::fs::read_to_string(dir.path().join("test_labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 3);
    assert!(dir.path().join("preview_0.pgm").exists());
    let manifest = std::fs::read_to_string(dir.path().join("manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 3"));
}
