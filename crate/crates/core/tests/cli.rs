use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use mscdt::pipeline::checkpoint::sha256_hex;
use mscdt::pipeline::{ModelConfig, TrainConfig};
use mscdt::transformer::UNetConfig;

fn mscdt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mscdt"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = mscdt(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Relative path → SHA-256 of every file under `dir`, run manifests excluded.
fn hashes(dir: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<String, String>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else if p.file_name().unwrap() != "manifest.json" {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                acc.insert(rel, sha256_hex(&std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(dir, dir, &mut acc);
    acc
}

fn small_train_config(steps: usize) -> TrainConfig {
    let mut model = ModelConfig::toy();
    model.unet = UNetConfig {
        channels_per_level: vec![4, 8],
        latent_dim: 8,
        ..UNetConfig::toy()
    };
    model.lpeb.width = 4;
    model.lpeb.latent_dim = 8;
    model.denoiser.hidden = 16;
    TrainConfig {
        model,
        steps,
        batch_size: 2,
        ..TrainConfig::default()
    }
}

/// Corpus `data` of two 16×16 phantoms and a 2-step checkpoint `ckpt`.
fn trained_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    ok(
        &[
            "phantom", "--seed", "3", "--count", "2", "--size", "16", "--out", "data",
        ],
        w,
    );
    let cfg = serde_json::to_string(&small_train_config(2)).unwrap();
    std::fs::write(w.join("train.json"), cfg).unwrap();
    ok(
        &[
            "train",
            "--config",
            "train.json",
            "--data",
            "data",
            "--out",
            "ckpt",
            "--log-every",
            "0",
        ],
        w,
    );
    dir
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let help = mscdt(&["--help"], dir.path());
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in [
        "phantom",
        "train",
        "separate",
        "evaluate",
        "lbp",
        "sweep-tau",
        "--replay",
    ] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
    let sub_help = mscdt(&["train", "--help"], dir.path());
    assert_eq!(sub_help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&sub_help.stdout);
    for flag in [
        "--config",
        "--data",
        "--steps",
        "--seed",
        "--precision",
        "--threads",
        "--out",
    ] {
        assert!(text.contains(flag), "train help lacks {flag}");
    }

    let bad = mscdt(&["frobnicate"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("frobnicate"));
    let flag = mscdt(&["phantom", "--out", "x", "--bogus", "1"], dir.path());
    assert_eq!(flag.status.code(), Some(2));
    assert_eq!(mscdt(&[], dir.path()).status.code(), Some(2));
    let precision = mscdt(
        &["train", "--data", "d", "--out", "o", "--precision", "f16"],
        dir.path(),
    );
    assert_eq!(precision.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    ok(&["phantom", "--count", "1", "--out", "data"], w);
    let missing = mscdt(
        &[
            "sweep-tau",
            "--ckpt",
            "nope",
            "--data",
            "data",
            "--out",
            "s.csv",
        ],
        w,
    );
    assert_eq!(missing.status.code(), Some(1));
    let no_data = mscdt(&["train", "--data", "nowhere", "--out", "ck"], w);
    assert_eq!(no_data.status.code(), Some(1));
}

#[test]
fn phantom_runs_are_byte_identical_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    ok(&["phantom", "--seed", "7", "--count", "4", "--out", "a"], w);
    ok(&["phantom", "--seed", "7", "--count", "4", "--out", "b"], w);
    let a = hashes(&w.join("a"));
    assert_eq!(a.len(), 1 + 4 * 10);
    assert_eq!(a, hashes(&w.join("b")));
    ok(&["--replay", "a/manifest.json", "--out", "c"], w);
    assert_eq!(a, hashes(&w.join("c")));
    ok(&["phantom", "--seed", "8", "--count", "4", "--out", "d"], w);
    assert_ne!(a, hashes(&w.join("d")));
}

#[test]
fn train_flags_override_config_and_replay_is_exact() {
    let dir = trained_workspace();
    let w = dir.path();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.join("ckpt/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["steps"], 2);
    let ckpt_hash = sha256_hex(&std::fs::read(w.join("ckpt/checkpoint.json")).unwrap());
    assert_eq!(manifest["checkpoint_sha256"], ckpt_hash.as_str());

    ok(&["--replay", "ckpt/manifest.json", "--out", "again"], w);
    assert_eq!(hashes(&w.join("ckpt")), hashes(&w.join("again")));

    ok(
        &[
            "train",
            "--config",
            "train.json",
            "--data",
            "data",
            "--steps",
            "1",
            "--out",
            "one",
            "--log-every",
            "0",
        ],
        w,
    );
    let losses = std::fs::read_to_string(w.join("one/losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 2);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.join("one/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(m["config"]["steps"], 1);
    assert_eq!(m["config"]["batch_size"], 2);
}

#[test]
fn evaluate_ground_truth_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    ok(&["phantom", "--count", "3", "--out", "data"], w);
    ok(
        &[
            "evaluate",
            "--pred",
            "data",
            "--truth",
            "data",
            "--which",
            "single",
            "--out",
            "m/self.csv",
        ],
        w,
    );
    let rows = csv_rows(&w.join("m/self.csv"));
    assert_eq!(rows.len(), 6);
    for r in rows {
        assert_eq!(r[2], "inf");
        assert_eq!(r[3].parse::<f64>().unwrap(), 1.0);
        assert_eq!(r[4].parse::<f64>().unwrap(), 0.0);
    }
    assert!(w.join("m/manifest.json").is_file());
}

#[test]
fn single_tau_sweep_matches_separate_then_evaluate() {
    let dir = trained_workspace();
    let w = dir.path();
    ok(
        &[
            "separate", "--ckpt", "ckpt", "--input", "data", "--tau", "150", "--seed", "4",
            "--out", "sep",
        ],
        w,
    );
    ok(
        &[
            "evaluate", "--pred", "sep", "--truth", "data", "--out", "eval.csv",
        ],
        w,
    );
    ok(
        &[
            "sweep-tau",
            "--ckpt",
            "ckpt",
            "--data",
            "data",
            "--taus",
            "150",
            "--seed",
            "4",
            "--out",
            "sweep.csv",
            "--rows",
            "rows.csv",
        ],
        w,
    );
    let eval = csv_rows(&w.join("eval.csv"));
    let rows = csv_rows(&w.join("rows.csv"));
    assert_eq!(eval.len(), rows.len());
    for (e, r) in eval.iter().zip(&rows) {
        assert_eq!(r[0], "150");
        assert_eq!(&r[1..], &e[..]);
    }
    let summary = csv_rows(&w.join("sweep.csv"));
    assert_eq!(summary.len(), 1);
    let mean_psnr = eval
        .iter()
        .map(|r| r[2].parse::<f64>().unwrap())
        .sum::<f64>()
        / eval.len() as f64;
    assert_eq!(summary[0][1].parse::<f64>().unwrap(), mean_psnr);
}

#[test]
fn sweep_keeps_tau_order_and_thread_count_does_not_matter() {
    let dir = trained_workspace();
    let w = dir.path();
    let taus = "200,120,180,150";
    ok(
        &[
            "sweep-tau",
            "--ckpt",
            "ckpt",
            "--data",
            "data",
            "--taus",
            taus,
            "--out",
            "s1.csv",
        ],
        w,
    );
    ok(
        &[
            "sweep-tau",
            "--ckpt",
            "ckpt",
            "--data",
            "data",
            "--taus",
            taus,
            "--threads",
            "2",
            "--out",
            "s2.csv",
        ],
        w,
    );
    let s1 = csv_rows(&w.join("s1.csv"));
    let col: Vec<&str> = s1.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(col, taus.split(',').collect::<Vec<_>>());
    assert_eq!(s1, csv_rows(&w.join("s2.csv")));
    // Higher thresholds keep fewer texture pixels.
    let density = |tau: &str| {
        s1.iter().find(|r| r[0] == tau).unwrap()[4]
            .parse::<f64>()
            .unwrap()
    };
    assert!(
        density("120") >= density("150")
            && density("150") >= density("180")
            && density("180") >= density("200")
    );
}

#[test]
fn separate_single_image_writes_all_outputs() {
    let dir = trained_workspace();
    let w = dir.path();
    ok(
        &[
            "separate",
            "--ckpt",
            "ckpt",
            "--input",
            "data/phantom_000/dual.tsr",
            "--precision",
            "f64",
            "--out",
            "one",
        ],
        w,
    );
    for f in [
        "fused_0.tsr",
        "fused_1.pgm",
        "raw_0.tsr",
        "raw_1.pgm",
        "prior.tsr",
        "manifest.json",
    ] {
        assert!(w.join("one").join(f).is_file(), "missing {f}");
    }
    let bad_alpha = mscdt(
        &[
            "separate", "--ckpt", "ckpt", "--input", "data", "--alpha", "2", "--out", "x",
        ],
        w,
    );
    assert_eq!(bad_alpha.status.code(), Some(1));
}

#[test]
fn lbp_writes_codes_mask_and_texture() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    ok(&["phantom", "--count", "1", "--out", "data"], w);
    ok(
        &[
            "lbp",
            "--input",
            "data/phantom_000/dual.tsr",
            "--tau",
            "0",
            "--out",
            "l0",
        ],
        w,
    );
    ok(
        &[
            "lbp",
            "--input",
            "data/phantom_000/dual.pgm",
            "--out",
            "l180",
        ],
        w,
    );
    let mask = mscdt::image::Pgm::read(w.join("l0/mask.pgm")).unwrap();
    assert!(mask.samples.iter().all(|&s| s == 255));
    let codes = mscdt::image::Pgm::read(w.join("l180/lbp.pgm")).unwrap();
    assert_eq!((codes.height, codes.width, codes.maxval), (32, 32, 255));
    let dual = mscdt::Image::load_tsr(w.join("data/phantom_000/dual.tsr")).unwrap();
    let masked = mscdt::Image::load_tsr(w.join("l0/masked.tsr")).unwrap();
    assert_eq!(masked, dual);
}
