use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cryorecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cryorecon"))
        .args(args)
        .env("CRYORECON_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulate_small(dir: &Path, seed: &str) {
    let out = dir.to_str().unwrap();
    let o = cryorecon(&[
        "simulate", "--out", out, "--n", "16", "--pixel-size", "4", "--count", "48", "--snr", "0.5", "--seed", seed,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let o = cryorecon(&[
        "reconstruct",
        "--manifest",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.txt"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(cryorecon(&["simulate"]).status.code(), Some(1));
    assert_eq!(cryorecon(&["simulate", "--out", out, "--bogus", "3"]).status.code(), Some(1));
    assert_eq!(cryorecon(&["simulate", "--out", out, "--snr", "abc"]).status.code(), Some(1));
    assert_eq!(cryorecon(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cryorecon(&["--help"]).status.code(), Some(0));
}

#[test]
fn simulate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    simulate_small(a.path(), "7");
    simulate_small(b.path(), "7");
    for f in ["particles.mrcs", "ctf.csv", "truth.csv", "phantom.mrc"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    simulate_small(c.path(), "8");
    assert_ne!(fs::read(a.path().join("particles.mrcs")).unwrap(), fs::read(c.path().join("particles.mrcs")).unwrap());
    let resolved = fs::read_to_string(a.path().join("config.resolved")).unwrap();
    assert!(resolved.contains("seed = 7") && resolved.contains("snr = 0.5"), "{resolved}");
}

#[test]
fn info_summarizes_volume_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path(), "1");
    let o = cryorecon(&["info", dir.path().join("phantom.mrc").to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for key in ["N = 16", "voxel_size = 4", "min = ", "max = ", "mean = "] {
        assert!(text.contains(key), "{text}");
    }
    let o = cryorecon(&["info", dir.path().join("manifest.txt").to_str().unwrap()]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("images = 48"), "{text}");
}

#[test]
fn pipeline_and_bit_exact_resume() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path(), "3");
    let manifest = dir.path().join("manifest.txt");
    let run = |out: &Path, iters: &str, resume: bool| {
        let mut args = vec![
            "reconstruct",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--max-iters",
            iters,
            "--batch-size",
            "16",
            "--held-out",
            "8",
            "--eval-every",
            "2",
            "--checkpoint-every",
            "1",
        ];
        if resume {
            args.push("--resume");
        }
        let o = cryorecon(&args);
        assert!(o.status.success(), "{}", stderr(&o));
    };
    let full = dir.path().join("full");
    run(&full, "6", false);
    let part = dir.path().join("part");
    run(&part, "3", false);
    run(&part, "6", true);
    for f in ["volume.mrc", "diagnostics.csv", "checkpoint.cfrg"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(part.join(f)).unwrap(), "{f}");
    }
    let diag = fs::read_to_string(full.join("diagnostics.csv")).unwrap();
    assert_eq!(diag.lines().count(), 7);
    assert!(full.join("directions.csv").exists());

    // a changed configuration refuses to resume
    let o = cryorecon(&[
        "reconstruct",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        part.to_str().unwrap(),
        "--max-iters",
        "8",
        "--batch-size",
        "8",
        "--held-out",
        "8",
        "--resume",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let report = dir.path().join("eval/report.txt");
    let o = cryorecon(&[
        "evaluate",
        "--volume",
        full.join("volume.mrc").to_str().unwrap(),
        "--manifest",
        full.join("heldout_manifest.txt").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
        "--rho",
        "0.0625",
        "--diagnostics",
        full.join("diagnostics.csv").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("# cryorecon evaluation report v1"));
    assert!(text.contains("test_images = 8"));
    assert!(text.contains("[direction_marginal]"));
}
