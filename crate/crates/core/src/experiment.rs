//! Simulation studies: encode a scene, reconstruct it with every configured
//! algorithm at every noise level, and score the results.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, ExperimentConfig, SecondaryKind};
use crate::denoise::{DenoiserChain, PluginEndpoint, PluginSession, Secondary};
use crate::error::{invalid, Error, Result};
use crate::forward::{encode, Measurement, NoiseModel, VideoCube};
use crate::metrics::{evaluate, MetricReport};
use crate::optics::{gen_mask_stack, make_master_mask, MaskStack, Scheme};
use crate::scene::load_scene;
use crate::solver::{run_gap, ReconResult, SolverOptions};
use crate::vsct;

/// Mask stack for `scheme`, built from the configured geometry with the
/// master mask and patterns drawn from `seed`.
pub fn build_masks(cfg: &ExperimentConfig, scheme: Scheme, seed: u64) -> Result<MaskStack> {
    let g = cfg.geometry.build()?;
    let margin = cfg.mask.margin.unwrap_or_else(|| g.max_shift().max(1));
    let o = make_master_mask(cfg.scale, cfg.scale, margin, cfg.mask.density, seed)?;
    gen_mask_stack(&o, scheme, cfg.cr, &g, seed)
}

/// A scene, its masks and one snapshot per noise level.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub scene: VideoCube,
    pub masks: MaskStack,
    pub measurements: Vec<(f64, Measurement)>,
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<Simulation> {
    simulate_with(cfg, cfg.mask.scheme, cfg.seed)
}

fn simulate_with(cfg: &ExperimentConfig, scheme: Scheme, seed: u64) -> Result<Simulation> {
    cfg.validate()?;
    let scene = load_scene(&cfg.scene, cfg.scale, cfg.cr)?;
    let masks = build_masks(cfg, scheme, seed)?;
    let measurements = cfg
        .sigmas
        .iter()
        .map(|&s| Ok((s, encode(&scene, &masks, &NoiseModel::gaussian(s, seed))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Simulation {
        scene,
        masks,
        measurements,
    })
}

/// Solver options for `algo`: GAP-TV never leaves the TV stage.
pub fn solver_options(cfg: &ExperimentConfig, algo: Algorithm) -> SolverOptions {
    match algo {
        Algorithm::GapTv => cfg.solver.gap_tv(),
        Algorithm::PnpTvPlugin => cfg.solver,
    }
}

/// Connects the secondary denoiser the PnP variant needs. Only the
/// `plugin` and `in-process-echo` kinds open a session.
pub fn connect_secondary(cfg: &ExperimentConfig) -> Result<Option<Arc<PluginSession>>> {
    let ep = match cfg.chain.secondary {
        SecondaryKind::None | SecondaryKind::Echo => return Ok(None),
        SecondaryKind::InProcessEcho => PluginEndpoint::in_process_echo(cfg.chain.plugin_timeout),
        SecondaryKind::Plugin => {
            let cmd = cfg.chain.plugin.as_deref().ok_or_else(|| {
                invalid("pnp-tv-plugin needs chain.plugin (or --plugin) to name a plugin command")
            })?;
            PluginEndpoint::parse_command(cmd, cfg.chain.plugin_timeout)?
        }
    };
    PluginSession::connect(&ep).map(|s| Some(Arc::new(s)))
}

/// Runs one reconstruction. `session` is required for the PnP variant
/// when the configured secondary is served over VDN1.
pub fn reconstruct(
    y: &Measurement,
    masks: &MaskStack,
    cfg: &ExperimentConfig,
    algo: Algorithm,
    session: Option<&Arc<PluginSession>>,
) -> Result<ReconResult> {
    let secondary = match (algo, cfg.chain.secondary) {
        (Algorithm::GapTv, _) | (_, SecondaryKind::None) => Secondary::None,
        (_, SecondaryKind::Echo) => Secondary::Echo,
        (_, SecondaryKind::InProcessEcho | SecondaryKind::Plugin) => Secondary::External(Box::new(
            Arc::clone(session.ok_or_else(|| invalid("no plugin session for pnp-tv-plugin"))?),
        )),
    };
    run_gap(
        y,
        masks,
        &DenoiserChain::with_secondary(cfg.chain.tv, secondary),
        &solver_options(cfg, algo),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub master_mask: u64,
    pub patterns: u64,
    pub noise: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub source: String,
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskInfo {
    pub scheme: String,
    pub throughput: Vec<f64>,
    /// Pixels no frame's mask illuminates.
    pub dark_pixels: usize,
}

/// Outcome of one (noise level, algorithm) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub sigma: f64,
    pub algorithm: Algorithm,
    pub ok: bool,
    pub error: Option<String>,
    pub metrics: Option<MetricReport>,
    pub residual_trace: Vec<f64>,
    pub iterations_run: usize,
    /// Denoisers of the last iteration, e.g. `["tv", "plugin"]`.
    pub final_stage: Vec<String>,
    pub wall_time_s: f64,
    pub output: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: BTreeMap<String, String>,
    pub seeds: SeedReport,
    pub scene: SceneInfo,
    pub masks: MaskInfo,
    pub cells: Vec<CellReport>,
}

impl ExperimentReport {
    pub fn cell(&self, sigma: f64, algo: Algorithm) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.sigma == sigma && c.algorithm == algo)
    }

    /// Copy with every wall-time zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for c in &mut r.cells {
            c.wall_time_s = 0.0;
        }
        r
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn sigma_label(s: f64) -> String {
    format!("{s}")
}

/// File names used inside an output directory.
pub fn measurement_file(sigma: f64) -> String {
    format!("measurement_sigma{}.vsct", sigma_label(sigma))
}

pub fn recon_file(algo: Algorithm, sigma: f64) -> String {
    format!("recon_{}_sigma{}.vsct", algo.name(), sigma_label(sigma))
}

pub const SCENE_FILE: &str = "scene.vsct";
pub const MASKS_FILE: &str = "masks.vsct";
pub const REPORT_FILE: &str = "report.json";

/// Writes the scene, masks and measurements of `sim` to `dir`.
pub fn save_simulation(sim: &Simulation, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    vsct::save_array3(dir.join(SCENE_FILE), sim.scene.data())?;
    vsct::save_array3(dir.join(MASKS_FILE), &sim.masks.masks().to_owned())?;
    for (s, y) in &sim.measurements {
        vsct::save_array2(dir.join(measurement_file(*s)), &y.data)?;
    }
    Ok(())
}

/// Full pipeline for one configuration. A failing cell is recorded in the
/// report and the remaining cells still run; only setup failures (scene,
/// masks, output directory) abort the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let sim = simulate(cfg)?;
    if let Some(dir) = &cfg.out {
        save_simulation(&sim, dir)?;
    }

    let needs_session = cfg.algorithms.contains(&Algorithm::PnpTvPlugin);
    let session = if needs_session {
        connect_secondary(cfg).map_err(|e| e.to_string())
    } else {
        Ok(None)
    };

    let mut cells = Vec::new();
    for (sigma, y) in &sim.measurements {
        for &algo in &cfg.algorithms {
            let start = Instant::now();
            let outcome = match (&session, algo) {
                (Err(e), Algorithm::PnpTvPlugin) => Err(Error::PluginError(e.clone())),
                (s, _) => reconstruct(
                    y,
                    &sim.masks,
                    cfg,
                    algo,
                    s.as_ref().ok().and_then(Option::as_ref),
                ),
            };
            let elapsed = start.elapsed().as_secs_f64();
            cells.push(finish_cell(cfg, &sim.scene, *sigma, algo, outcome, elapsed));
        }
    }

    let (_, frames_rows, frames_cols) = sim.scene.data().dim();
    let r = crate::forward::hht_diag(&sim.masks);
    let report = ExperimentReport {
        config: cfg.echo(),
        seeds: SeedReport {
            seed: cfg.seed,
            master_mask: cfg.seed,
            patterns: cfg.seed,
            noise: cfg.seed,
        },
        scene: SceneInfo {
            source: cfg.scene.clone(),
            frames: sim.scene.frames(),
            rows: frames_rows,
            cols: frames_cols,
        },
        masks: MaskInfo {
            scheme: cfg.mask.scheme.tag().into(),
            throughput: sim.masks.throughput().to_vec(),
            dark_pixels: r.iter().filter(|&&v| v <= 0.0).count(),
        },
        cells,
    };
    if let Some(dir) = &cfg.out {
        fs::write(dir.join(REPORT_FILE), report.to_json()?)?;
    }
    Ok(report)
}

fn finish_cell(
    cfg: &ExperimentConfig,
    scene: &VideoCube,
    sigma: f64,
    algo: Algorithm,
    outcome: Result<ReconResult>,
    wall_time_s: f64,
) -> CellReport {
    let mut cell = CellReport {
        sigma,
        algorithm: algo,
        ok: false,
        error: None,
        metrics: None,
        residual_trace: Vec::new(),
        iterations_run: 0,
        final_stage: Vec::new(),
        wall_time_s,
        output: None,
    };
    let res = match outcome {
        Ok(r) => r,
        Err(Error::SolverAborted {
            iteration,
            partial,
            source,
        }) => {
            cell.error = Some(format!("aborted at iteration {iteration}: {source}"));
            cell.residual_trace = partial.residual_trace;
            cell.iterations_run = partial.iterations_run;
            return cell;
        }
        Err(e) => {
            cell.error = Some(e.to_string());
            return cell;
        }
    };
    cell.residual_trace = res.residual_trace;
    cell.iterations_run = res.iterations_run;
    cell.final_stage = res.denoiser_log.last().cloned().unwrap_or_default();
    match evaluate(scene, &res.video) {
        Ok(m) => cell.metrics = Some(m),
        Err(e) => {
            cell.error = Some(e.to_string());
            return cell;
        }
    }
    if let Some(dir) = &cfg.out {
        let name = recon_file(algo, sigma);
        if let Err(e) = vsct::save_array3(dir.join(&name), res.video.data()) {
            cell.error = Some(e.to_string());
            return cell;
        }
        cell.output = Some(name);
    }
    cell.ok = true;
    cell
}

/// PSNR of both schemes at one noise level, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sigma: f64,
    pub psnr_multiplexed: f64,
    pub psnr_baseline: f64,
    /// `psnr_multiplexed - psnr_baseline`.
    pub difference: f64,
    /// `(seed, multiplexed, baseline)` per seed.
    pub per_seed: Vec<(u64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub config: BTreeMap<String, String>,
    pub multiplexed: String,
    pub baseline: String,
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    pub points: Vec<SweepPoint>,
    /// Smallest noise level at which the sign of the difference changes
    /// with respect to the first level.
    pub crossover_sigma: Option<f64>,
}

/// Smallest `sigma` whose difference has a different sign from the first
/// point's (zero counts as non-positive).
pub fn crossover(points: &[SweepPoint]) -> Option<f64> {
    let first = points.first()?.difference > 0.0;
    points
        .iter()
        .find(|p| (p.difference > 0.0) != first)
        .map(|p| p.sigma)
}

/// Compares `cfg.mask.scheme` (multiplexed) against `cfg.compare_scheme`
/// over all noise levels and seeds, reconstructing with the first
/// configured algorithm.
pub fn compare_masks_noise_sweep(cfg: &ExperimentConfig) -> Result<SweepSummary> {
    cfg.validate()?;
    let algo = cfg.algorithms[0];
    let session = if algo == Algorithm::PnpTvPlugin {
        connect_secondary(cfg)?
    } else {
        None
    };
    let scene = load_scene(&cfg.scene, cfg.scale, cfg.cr)?;
    let psnr = |scheme: Scheme, seed: u64, sigma: f64| -> Result<f64> {
        let masks = build_masks(cfg, scheme, seed)?;
        let y = encode(&scene, &masks, &NoiseModel::gaussian(sigma, seed))?;
        let res = reconstruct(&y, &masks, cfg, algo, session.as_ref())?;
        Ok(evaluate(&scene, &res.video)?.mean_psnr)
    };
    let mut points = Vec::with_capacity(cfg.sigmas.len());
    for &sigma in &cfg.sigmas {
        let mut per_seed = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            per_seed.push((
                seed,
                psnr(cfg.mask.scheme, seed, sigma)?,
                psnr(cfg.compare_scheme, seed, sigma)?,
            ));
        }
        let n = per_seed.len() as f64;
        let pm = per_seed.iter().map(|p| p.1).sum::<f64>() / n;
        let pb = per_seed.iter().map(|p| p.2).sum::<f64>() / n;
        points.push(SweepPoint {
            sigma,
            psnr_multiplexed: pm,
            psnr_baseline: pb,
            difference: pm - pb,
            per_seed,
        });
    }
    Ok(SweepSummary {
        config: cfg.echo(),
        multiplexed: cfg.mask.scheme.tag().into(),
        baseline: cfg.compare_scheme.tag().into(),
        algorithm: algo,
        seeds: cfg.seeds.clone(),
        crossover_sigma: crossover(&points),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RawConfig;

    fn small(extra: &str) -> ExperimentConfig {
        let mut raw =
            RawConfig::parse("scale = 16\ncr = 4\nsolver.k_max = 8\nsolver.k1 = 4\ngeometry.shift_gain = 3")
                .unwrap();
        for (k, v) in RawConfig::parse(extra).unwrap().iter() {
            raw.set(k, v);
        }
        ExperimentConfig::from_raw(&raw).unwrap()
    }

    #[test]
    fn full_aperture_cr1_recovers_exactly() {
        let cfg = small(
            "cr = 1\nmask.density = 1\nmask.scheme = single-center\ngeometry.rows = 1\n\
             geometry.cols = 1\nchain.tv_weight = 0\nsolver.k_max = 1\nsolver.k1 = 1",
        );
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.cells[0].metrics.as_ref().unwrap().mean_psnr, 99.0);
    }

    #[test]
    fn reports_are_deterministic() {
        let cfg = small("noise.sigmas = 0, 10\nalgorithms = gap-tv, pnp-tv-plugin\nchain.secondary = echo");
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.without_timing(), b.without_timing());
        assert_eq!(a.cells.len(), 4);
        assert!(a.cells.iter().all(|c| c.ok));
        let pnp = a.cell(10.0, Algorithm::PnpTvPlugin).unwrap();
        assert_eq!(pnp.final_stage, vec!["tv", "echo"]);
        assert_eq!(a.cell(10.0, Algorithm::GapTv).unwrap().final_stage, vec!["tv"]);
        assert_eq!(a.config, cfg.echo());
    }

    #[test]
    fn failing_cells_do_not_stop_the_run() {
        let cfg = small("algorithms = pnp-tv-plugin, gap-tv\nnoise.sigmas = 0, 5");
        let r = run_experiment(&cfg).unwrap();
        for c in &r.cells {
            match c.algorithm {
                Algorithm::PnpTvPlugin => {
                    assert!(!c.ok);
                    assert!(c.error.as_ref().unwrap().contains("chain.plugin"));
                }
                Algorithm::GapTv => assert!(c.ok),
            }
        }
    }

    #[test]
    fn plugin_cells_record_partial_trace_on_failure() {
        // `true` exits immediately: the first full-stage request fails
        let cfg = small("algorithms = pnp-tv-plugin\nchain.plugin = true\nchain.plugin_timeout = 5");
        let r = run_experiment(&cfg).unwrap();
        let c = &r.cells[0];
        assert!(!c.ok);
        assert!(c.error.as_ref().unwrap().starts_with("aborted at iteration 5"));
        assert_eq!(c.residual_trace.len(), 4);
    }

    #[test]
    fn writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(&format!(
            "noise.sigmas = 0, 2.5\nout = {}",
            dir.path().display()
        ));
        let report = run_experiment(&cfg).unwrap();
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap()).unwrap();
        assert!(json["cells"][0]["metrics"]["psnr_mean"].is_number());
        assert_eq!(json["config"]["cr"], "4");
        for name in [SCENE_FILE, MASKS_FILE, "measurement_sigma2.5.vsct", "recon_gap-tv_sigma0.vsct"] {
            assert!(dir.path().join(name).is_file(), "{name}");
        }
        let recon = vsct::load_array3(dir.path().join(report.cells[0].output.as_ref().unwrap())).unwrap();
        assert_eq!(recon.dim(), (4, 16, 16));
    }

    #[test]
    fn identical_schemes_give_zero_differences() {
        let cfg = small("noise.sigmas = 0, 10\nseeds = 1, 2\ncompare.scheme = random-squares");
        let s = compare_masks_noise_sweep(&cfg).unwrap();
        assert!(s.points.iter().all(|p| p.difference == 0.0));
        assert_eq!(s.crossover_sigma, None);
        assert_eq!(s.points[0].per_seed.len(), 2);
    }

    #[test]
    fn crossover_finds_first_sign_change() {
        let pt = |sigma, d| SweepPoint {
            sigma,
            psnr_multiplexed: d,
            psnr_baseline: 0.0,
            difference: d,
            per_seed: vec![],
        };
        assert_eq!(crossover(&[pt(0.0, -1.0), pt(5.0, 0.0), pt(10.0, 0.5), pt(15.0, 1.0)]), Some(10.0));
        assert_eq!(crossover(&[pt(0.0, 1.0), pt(5.0, 2.0)]), None);
        assert_eq!(crossover(&[]), None);
    }
}
