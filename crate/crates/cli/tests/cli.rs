use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hcasci_core::experiment::{ExperimentReport, SweepSummary};
use hcasci_core::vsct;
use ndarray::{Array2, Array3};

const BIN: &str = env!("CARGO_BIN_EXE_hcasci");

fn hcasci(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn hcasci")
}

fn ok(args: &[&str]) -> String {
    let out = hcasci(args);
    assert!(
        out.status.success(),
        "hcasci {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("exp.cfg");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

const SMALL: &str = "scene = synthetic:moving-square\nscale = 24\ncr = 4\n\
                     geometry.shift_gain = 3\nsolver.k_max = 12\nsolver.k1 = 6\n";

#[test]
fn bench_writes_report_and_cubes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}noise.sigmas = 0, 10\n"));
    let out = dir.path().join("run");
    let stdout = ok(&["bench", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "3"]);
    assert!(stdout.contains("gap-tv"));

    let report: ExperimentReport =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.seeds.seed, 3);
    assert_eq!(report.cells.len(), 2);
    assert!(report.cells.iter().all(|c| c.ok && c.metrics.is_some()));
    for name in ["scene.vsct", "masks.vsct", "measurement_sigma10.vsct", "recon_gap-tv_sigma0.vsct"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let recon = vsct::load_array3(out.join("recon_gap-tv_sigma0.vsct")).unwrap();
    assert_eq!(recon.dim(), (4, 24, 24));
}

#[test]
fn bench_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let run = || {
        ok(&["bench", "--config", &cfg, "--out", out.to_str().unwrap()]);
        let r: ExperimentReport =
            serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        r.without_timing()
    };
    assert_eq!(run(), run());
}

#[test]
fn simulate_then_reconstruct_matches_bench() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let sim = dir.path().join("sim");
    ok(&["simulate", "--config", &cfg, "--out", sim.to_str().unwrap()]);
    assert!(sim.join("config.txt").is_file());

    let rec = dir.path().join("rec");
    ok(&["reconstruct", "--input", sim.to_str().unwrap(), "--out", rec.to_str().unwrap()]);
    let bench = dir.path().join("bench");
    ok(&["bench", "--config", &cfg, "--out", bench.to_str().unwrap()]);

    // VSCT stores f32, so measurements read back are rounded copies
    let a = vsct::load_array3(rec.join("recon_gap-tv_sigma0.vsct")).unwrap();
    let b = vsct::load_array3(bench.join("recon_gap-tv_sigma0.vsct")).unwrap();
    let diff = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-4, "max diff {diff}");

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(rec.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["cells"][0]["ok"], true);
    assert!(report["cells"][0]["metrics"]["psnr_mean"].as_f64().unwrap() > 10.0);
}

#[test]
fn pnp_with_echo_plugin_subprocess() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("pnp");
    let plugin = format!("{BIN} echo-plugin");
    ok(&[
        "bench",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--algo",
        "gap-tv,pnp-tv-plugin",
        "--plugin",
        &plugin,
    ]);
    let report: ExperimentReport =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let gap = &report.cells[0];
    let pnp = &report.cells[1];
    assert!(pnp.ok, "{:?}", pnp.error);
    assert_eq!(pnp.final_stage, ["tv", "plugin"]);
    assert_eq!(gap.final_stage, ["tv"]);
    // echo over f32 transport only perturbs by rounding
    let d = (gap.metrics.as_ref().unwrap().mean_psnr - pnp.metrics.as_ref().unwrap().mean_psnr).abs();
    assert!(d < 0.05, "psnr differs by {d}");
}

#[test]
fn missing_plugin_fails_the_cell_not_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("bad");
    ok(&[
        "bench",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--algo",
        "gap-tv,pnp-tv-plugin",
        "--plugin",
        "/nonexistent/plugin-binary",
    ]);
    let report: ExperimentReport =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report.cells[0].ok);
    assert!(!report.cells[1].ok);
    assert!(report.cells[1].error.is_some());
}

#[test]
fn noise_sweep_reports_both_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}noise.sigmas = 0, 20\nseeds = 0, 1\n"));
    let out = dir.path().join("sweep");
    let stdout = ok(&["noise-sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(stdout.contains("random-squares"));
    let s: SweepSummary =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(s.points.len(), 2);
    assert_eq!(s.seeds, [0, 1]);
    for p in &s.points {
        assert_eq!(p.per_seed.len(), 2);
        assert!((p.difference - (p.psnr_multiplexed - p.psnr_baseline)).abs() < 1e-12);
    }
}

#[test]
fn calibrate_recovers_masks() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("cap");
    fs::create_dir_all(&input).unwrap();
    let truth = Array3::from_shape_fn((3, 8, 10), |(k, i, j)| ((k + 2 * i + 3 * j) % 5) as f64 / 4.0);
    let illum = Array2::from_elem((8, 10), 0.75);
    let bg = Array2::from_elem((8, 10), 0.25);
    for (k, c) in truth.outer_iter().enumerate() {
        let raw = &c * 0.5 + &bg;
        vsct::save_array2(input.join(format!("raw_{k:03}.vsct")), &raw).unwrap();
    }
    vsct::save_array2(input.join("illum.vsct"), &illum).unwrap();
    vsct::save_array2(input.join("background.vsct"), &bg).unwrap();

    let out = dir.path().join("cal");
    ok(&["calibrate", "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let got = vsct::load_array3(out.join("masks.vsct")).unwrap();
    assert_eq!(got, truth);
}

#[test]
fn make_scene_writes_vsct_cube() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scene.vsct");
    ok(&[
        "make-scene",
        "--scene",
        "synthetic:moving-square",
        "--scale",
        "16",
        "--frames",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    let cube = vsct::load_array3(&out).unwrap();
    assert_eq!(cube.dim(), (3, 16, 16));
    // the square moves one pixel per frame
    assert_eq!(cube[[0, 4, 4]], 1.0);
    assert_eq!(cube[[1, 4, 4]], 0.0);
    assert_eq!(cube[[1, 5, 5]], 1.0);
}

#[test]
fn bad_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "scale = 16\nsolver.k_maxx = 3\n");
    let out = hcasci(&["bench", "--config", &cfg]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn unknown_algorithm_is_rejected() {
    let out = hcasci(&["bench", "--algo", "admm"]);
    assert!(!out.status.success());
}

#[test]
fn reconstruct_without_measurements_fails() {
    let dir = tempfile::tempdir().unwrap();
    let masks = Array3::from_elem((2, 4, 4), 1.0);
    vsct::save_array3(dir.path().join("masks.vsct"), &masks).unwrap();
    let out = hcasci(&["reconstruct", "--input", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no measurement"));
}
