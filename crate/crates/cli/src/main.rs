//! `hcasci`: simulate coded snapshots, reconstruct them, and run the
//! benchmark studies from a flat `key = value` config file.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hcasci_core::denoise::protocol::serve_echo;
use hcasci_core::experiment::{
    connect_secondary, recon_file, reconstruct, save_simulation, CellReport,
    MASKS_FILE, REPORT_FILE, SCENE_FILE,
};
use hcasci_core::scene::load_scene;
use hcasci_core::vsct;
use hcasci_core::{
    calibrate, compare_masks_noise_sweep, evaluate, preprocess_measurement, run_experiment, simulate,
    Algorithm, CalibrationSet, ExperimentConfig, Measurement, MaskStack, RawConfig, VideoCube,
};
use ndarray::Axis;
use serde_json::json;

/// Config snapshot written next to simulated data so `reconstruct` can
/// pick up the same solver settings.
const CONFIG_FILE: &str = "config.txt";

#[derive(Parser)]
#[command(name = "hcasci", version, about = "Hybrid coded aperture snapshot compressive imaging toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment config file (`key = value` per line)
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for master mask, aperture patterns and noise
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Reconstruction algorithm(s), comma separated: gap-tv, pnp-tv-plugin
    #[arg(long, value_name = "ALGO")]
    algo: Option<String>,
    /// Plugin command line for the secondary denoiser
    #[arg(long, value_name = "CMD")]
    plugin: Option<String>,
    /// Extra config override, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a scene and save scene, masks and measurements as VSCT
    Simulate(Common),
    /// Reconstruct measurements stored in a directory
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Directory holding masks.vsct and measurement_sigma*.vsct
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        /// Background frame subtracted from every measurement
        #[arg(long, value_name = "PATH")]
        background: Option<PathBuf>,
    },
    /// Full pipeline: simulate, reconstruct every cell, score, report
    Bench(Common),
    /// Multiplexed against non-multiplexed masks over the noise levels
    NoiseSweep(Common),
    /// Turn captured raw masks into normalized modulation masks
    Calibrate {
        /// Directory with raw_000.vsct.., illum.vsct and background.vsct
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Illumination guard threshold
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
    },
    /// Write a scene (synthetic or from files) as a VSCT cube
    MakeScene {
        /// `synthetic:<name>`, a VSCT cube or an image directory
        #[arg(long)]
        scene: String,
        #[arg(long, default_value_t = 64)]
        scale: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        /// Output file
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// VDN1 echo plugin on stdin/stdout
    #[command(hide = true)]
    EchoPlugin,
}

fn load_config(c: &Common, fallback: Option<&Path>) -> Result<ExperimentConfig> {
    let mut raw = match (&c.config, fallback) {
        (Some(p), _) => RawConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        (None, Some(p)) if p.is_file() => {
            RawConfig::load(p).with_context(|| format!("reading {}", p.display()))?
        }
        _ => RawConfig::default(),
    };
    if let Some(s) = c.seed {
        raw.set("seed", s.to_string());
        if raw.get("seeds").is_some() {
            raw.set("seeds", s.to_string());
        }
    }
    if let Some(a) = &c.algo {
        raw.set("algorithms", a.clone());
    }
    if let Some(p) = &c.plugin {
        raw.set("chain.plugin", p.clone());
        raw.set("chain.secondary", "plugin");
    }
    if let Some(o) = &c.out {
        raw.set("out", o.display().to_string());
    }
    for kv in &c.set {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got `{kv}`");
        };
        raw.set(k.trim(), v.trim());
    }
    let cfg = ExperimentConfig::from_raw(&raw)?;
    cfg.validate()?;
    Ok(cfg)
}

fn require_out(cfg: &ExperimentConfig) -> Result<&Path> {
    cfg.out.as_deref().context("--out DIR (or `out` in the config) is required")
}

fn cmd_simulate(c: &Common) -> Result<()> {
    let cfg = load_config(c, None)?;
    let out = require_out(&cfg)?;
    let sim = simulate(&cfg)?;
    save_simulation(&sim, out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    let (b, nx, ny) = sim.scene.data().dim();
    println!(
        "scene {b}x{nx}x{ny}, scheme {}, {} measurement(s) -> {}",
        cfg.mask.scheme.tag(),
        sim.measurements.len(),
        out.display()
    );
    Ok(())
}

/// `(sigma, path)` for every `measurement_sigma*.vsct` in `dir`, by sigma.
fn measurement_files(dir: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let mut found = Vec::new();
    for e in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = e?.path();
        let Some(name) = p.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(s) = name
            .strip_prefix("measurement_sigma")
            .and_then(|s| s.strip_suffix(".vsct"))
        else {
            continue;
        };
        let sigma: f64 = s.parse().with_context(|| format!("bad noise level in {name}"))?;
        found.push((sigma, p));
    }
    found.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(found)
}

fn cmd_reconstruct(c: &Common, input: &Path, background: Option<&Path>) -> Result<()> {
    let cfg = load_config(c, Some(&input.join(CONFIG_FILE)))?;
    let out = cfg.out.clone().unwrap_or_else(|| input.to_path_buf());
    fs::create_dir_all(&out)?;
    let masks = MaskStack::from_masks(vsct::load_array3(input.join(MASKS_FILE))?)?;
    let truth = match input.join(SCENE_FILE) {
        p if p.is_file() => Some(VideoCube::new(vsct::load_array3(p)?)?),
        _ => None,
    };
    let bg = background.map(vsct::load_array2).transpose()?;
    let files = measurement_files(input)?;
    if files.is_empty() {
        bail!("no measurement_sigma*.vsct in {}", input.display());
    }
    let session = if cfg.algorithms.contains(&Algorithm::PnpTvPlugin) {
        connect_secondary(&cfg)?
    } else {
        None
    };

    let mut cells = Vec::new();
    for (sigma, path) in &files {
        let raw = vsct::load_array2(path)?;
        let y = match &bg {
            Some(b) => preprocess_measurement(&raw, b)?,
            None => Measurement::clean(raw),
        };
        for &algo in &cfg.algorithms {
            let start = Instant::now();
            let mut cell = CellReport {
                sigma: *sigma,
                algorithm: algo,
                ok: false,
                error: None,
                metrics: None,
                residual_trace: Vec::new(),
                iterations_run: 0,
                final_stage: Vec::new(),
                wall_time_s: 0.0,
                output: None,
            };
            match reconstruct(&y, &masks, &cfg, algo, session.as_ref()) {
                Ok(res) => {
                    let name = recon_file(algo, *sigma);
                    vsct::save_array3(out.join(&name), res.video.data())?;
                    cell.metrics = truth.as_ref().map(|t| evaluate(t, &res.video)).transpose()?;
                    cell.residual_trace = res.residual_trace;
                    cell.iterations_run = res.iterations_run;
                    cell.final_stage = res.denoiser_log.last().cloned().unwrap_or_default();
                    cell.output = Some(name);
                    cell.ok = true;
                }
                Err(e) => cell.error = Some(e.to_string()),
            }
            cell.wall_time_s = start.elapsed().as_secs_f64();
            print_cell(&cell);
            cells.push(cell);
        }
    }
    let report = json!({
        "config": cfg.echo(),
        "input": input.display().to_string(),
        "background": background.map(|p| p.display().to_string()),
        "cells": cells,
    });
    fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    if cells.iter().any(|c| !c.ok) {
        bail!("some reconstructions failed, see {}", out.join(REPORT_FILE).display());
    }
    Ok(())
}

fn print_cell(c: &CellReport) {
    let score = match &c.metrics {
        Some(m) => format!("PSNR {:6.2} dB  SSIM {:.4}", m.mean_psnr, m.mean_ssim),
        None if c.ok => "no ground truth".to_string(),
        None => format!("error: {}", c.error.as_deref().unwrap_or("unknown")),
    };
    println!(
        "sigma {:>5}  {:<14} {score}  ({} it, {:.2}s)",
        c.sigma,
        c.algorithm.name(),
        c.iterations_run,
        c.wall_time_s
    );
}

fn cmd_bench(c: &Common) -> Result<()> {
    let cfg = load_config(c, None)?;
    let report = run_experiment(&cfg)?;
    for cell in &report.cells {
        print_cell(cell);
    }
    if let Some(dir) = &cfg.out {
        println!("report -> {}", dir.join(REPORT_FILE).display());
    } else {
        println!("{}", report.to_json()?);
    }
    Ok(())
}

fn cmd_noise_sweep(c: &Common) -> Result<()> {
    let mut cfg = load_config(c, None)?;
    if cfg.sigmas == [0.0] && c.config.is_none() {
        cfg.sigmas = vec![0.0, 5.0, 10.0, 15.0, 20.0];
    }
    let s = compare_masks_noise_sweep(&cfg)?;
    println!("sigma  {:>14}  {:>14}  diff", s.multiplexed, s.baseline);
    for p in &s.points {
        println!(
            "{:>5}  {:>14.2}  {:>14.2}  {:+.2}",
            p.sigma, p.psnr_multiplexed, p.psnr_baseline, p.difference
        );
    }
    match s.crossover_sigma {
        Some(x) => println!("crossover at sigma {x}"),
        None => println!("no crossover"),
    }
    let text = serde_json::to_string_pretty(&s)?;
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(REPORT_FILE), text)?;
    }
    Ok(())
}

fn cmd_calibrate(input: &Path, out: &Path, epsilon: f64) -> Result<()> {
    let mut raws = Vec::new();
    for k in 0.. {
        let p = input.join(format!("raw_{k:03}.vsct"));
        if !p.is_file() {
            break;
        }
        raws.push(vsct::load_array2(&p)?);
    }
    if raws.is_empty() {
        bail!("no raw_000.vsct in {}", input.display());
    }
    let views: Vec<_> = raws.iter().map(|a| a.view()).collect();
    let stacked = ndarray::stack(Axis(0), &views).context("raw masks differ in size")?;
    let mut cs = CalibrationSet::new(
        stacked,
        vsct::load_array2(input.join("illum.vsct"))?,
        vsct::load_array2(input.join("background.vsct"))?,
    );
    cs.epsilon = epsilon;
    let cal = calibrate(&cs)?;
    fs::create_dir_all(out)?;
    vsct::save_array3(out.join(MASKS_FILE), &cal.masks.masks().to_owned())?;
    fs::write(
        out.join(REPORT_FILE),
        serde_json::to_string_pretty(&json!({
            "input": input.display().to_string(),
            "frames": raws.len(),
            "epsilon": epsilon,
            "guarded_pixels": cal.guarded_pixels,
            "throughput": cal.masks.throughput(),
        }))?,
    )?;
    println!(
        "{} mask(s) calibrated, {} guarded pixel(s) -> {}",
        raws.len(),
        cal.guarded_pixels,
        out.join(MASKS_FILE).display()
    );
    Ok(())
}

fn cmd_make_scene(scene: &str, scale: usize, frames: usize, out: &Path) -> Result<()> {
    let cube = load_scene(scene, scale, frames)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    vsct::save_array3(out, cube.data())?;
    println!("{frames}x{scale}x{scale} -> {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => cmd_simulate(&c),
        Command::Reconstruct {
            common,
            input,
            background,
        } => cmd_reconstruct(&common, &input, background.as_deref()),
        Command::Bench(c) => cmd_bench(&c),
        Command::NoiseSweep(c) => cmd_noise_sweep(&c),
        Command::Calibrate {
            input,
            out,
            epsilon,
        } => cmd_calibrate(&input, &out, epsilon),
        Command::MakeScene {
            scene,
            scale,
            frames,
            out,
        } => cmd_make_scene(&scene, scale, frames, &out),
        Command::EchoPlugin => {
            serve_echo(io::stdin().lock(), io::stdout().lock()).context("echo plugin")
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
