use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hipseg::labeling::{label_components, Connectivity};
use hipseg::nifti::load_mask;

const TINY: &str = "\
network.base_width = 4
network.depth = 2
training.lr0 = 0.05
training.epochs = 2
training.decay_epoch = 1
training.batch_size = 4
training.max_steps_per_epoch = 2
training.val_crop_size = 32
sampler.patch_size = 32
consensus.crop_size = 32
";

fn hipseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hipseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hipseg(args);
    assert!(
        out.status.success(),
        "hipseg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("tiny.cfg");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

fn synth(dir: &Path, count: &str) -> Output {
    hipseg(&["synth", "--count", count, "--out-dir", s(dir), "--dims", "32,32,32", "--seed", "3"])
}

#[test]
fn synth_writes_pairs_and_manifest_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(synth(&a, "20").status.success());
    assert!(synth(&b, "20").status.success());
    let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
    let lines: Vec<&str> = manifest.lines().filter(|l| !l.starts_with('#') && !l.is_empty()).collect();
    assert_eq!(lines.len(), 20);
    let count = |tag: &str| lines.iter().filter(|l| l.ends_with(tag)).count();
    assert_eq!((count("\ttrain"), count("\tval"), count("\ttest")), (16, 2, 2));
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 41);
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
    let out = synth(&tmp.path().join("c"), "5");
    assert!(!out.status.success());
}

#[test]
fn train_without_manifest_names_the_expected_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = hipseg(&["train", "--data", s(tmp.path()), "--out", s(&tmp.path().join("m"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(s(&tmp.path().join("manifest.tsv"))), "{err}");
}

#[test]
fn bad_configuration_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = hipseg(&["train", "--data", s(&data), "--out", s(tmp.path()), "--set", "network.colour=blue"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("network.colour"));
}

#[test]
fn pipeline_from_an_empty_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (data, models) = (root.join("data"), root.join("models"));
    let cfg = write_config(root, "");
    assert!(synth(&data, "10").status.success());

    let log = ok(&["train", "--data", s(&data), "--out", s(&models), "--config", s(&cfg), "--orientation", "all"]);
    for o in ["sagittal", "coronal", "axial"] {
        assert!(models.join(format!("{o}.ckpt")).is_file());
        let metrics = fs::read_to_string(models.join(format!("{o}_metrics.csv"))).unwrap();
        assert_eq!(metrics.lines().count(), 3, "{metrics}");
        assert!(log.contains(&format!("{o}: best val dice")));
    }

    let before = fs::read(models.join("coronal.ckpt")).unwrap();
    let rerun = ok(&["train", "--data", s(&data), "--out", s(&models), "--config", s(&cfg), "--resume"]);
    assert_eq!(rerun.matches("checkpoint exists, skipping").count(), 3);
    assert_eq!(fs::read(models.join("coronal.ckpt")).unwrap(), before);

    let input = data.join("phantom_009.nii.gz");
    let reference = data.join("phantom_009_mask.nii.gz");
    let pred = root.join("pred.nii.gz");
    let stdout = ok(&[
        "predict", "--models", s(&models), "--input", s(&input), "--out", s(&pred), "--config", s(&cfg),
        "--export-heatmaps",
    ]);
    assert!(stdout.contains("foreground voxels:") && stdout.contains("wall time:"));
    let mask = load_mask(&pred).unwrap();
    assert!(label_components(&mask, Connectivity::TwentySix).sizes.len() <= 2);
    for tag in ["sagittal", "coronal", "axial", "fused"] {
        assert!(root.join(format!("pred_{tag}.nii.gz")).is_file(), "{tag}");
    }

    let missing = hipseg(&["predict", "--models", s(&models), "--input", s(&root.join("nope.nii")), "--out", s(&pred)]);
    assert!(!missing.status.success());

    let stdout = ok(&["evaluate", "--pred", s(&reference), "--ref", s(&reference)]);
    assert_eq!(stdout.trim(), "dice: 1.000000");

    let reports = root.join("reports");
    let stdout = ok(&[
        "evaluate", "--models", s(&models), "--data", s(&data), "--config", s(&cfg), "--report-dir", s(&reports),
    ]);
    assert!(stdout.contains("phantom_009"));
    let csv = fs::read_to_string(reports.join("evaluate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    let fused = root.join("pred_fused.nii.gz");
    let sweep_out = root.join("sweep.csv");
    let stdout = ok(&["sweep", "--heatmap", s(&fused), "--ref", s(&reference), "--out", s(&sweep_out)]);
    assert_eq!(stdout.lines().count(), 10);
    assert_eq!(fs::read_to_string(&sweep_out).unwrap(), stdout);
    let stdout = ok(&["sweep", "--models", s(&models), "--data", s(&data), "--config", s(&cfg)]);
    assert_eq!(stdout.lines().count(), 10);

    fs::remove_file(models.join("axial.ckpt")).unwrap();
    let out = hipseg(&["predict", "--models", s(&models), "--input", s(&input), "--out", s(&pred)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("axial"));
}

#[test]
fn ablate_reports_the_five_standard_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let cfg = write_config(root, "network.base_width = 64\nnetwork.depth = 1\ntraining.epochs = 1\ntraining.decay_epoch = 0\n");
    assert!(synth(&data, "10").status.success());
    let reports = root.join("reports");
    let stdout = ok(&["ablate", "--data", s(&data), "--config", s(&cfg), "--report-dir", s(&reports)]);
    let csv = fs::read_to_string(reports.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6, "{csv}");
    for name in ["baseline", "augmentation", "residual", "e2d", "vgg11"] {
        assert!(stdout.contains(name), "{stdout}");
    }
}

#[test]
fn help_lists_flags_and_configuration_defaults() {
    for cmd in ["synth", "train", "predict", "evaluate", "sweep", "ablate"] {
        let text = ok(&[cmd, "--help"]);
        for flag in ["--config", "--set", "--seed", "--workers"] {
            assert!(text.contains(flag), "{cmd} --help lacks {flag}");
        }
        assert!(text.contains("[default: 0]"));
        assert!(text.contains("training.lr0 = 0.001"), "{cmd} --help lacks configuration defaults");
    }
    let text = ok(&["synth", "--help"]);
    assert!(text.contains("[default: 20]") && text.contains("[default: 64,64,64]"));
}
