//! Simulation and reconstruction toolkit for hybrid coded-aperture snapshot
//! compressive imaging (HCA-SCI).
//!
//! A dynamic low-resolution aperture modulator and a static high-resolution
//! mask jointly produce per-frame encoding masks ([`optics`]); `B` masked
//! frames are summed into one snapshot ([`forward`]); the video is recovered
//! with generalized alternating projection and plug-and-play denoisers
//! ([`solver`], [`denoise`]) and scored with PSNR/SSIM ([`metrics`]).

pub mod config;
pub mod denoise;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod metrics;
pub mod optics;
mod rng;
pub mod scene;
pub mod solver;
pub mod vsct;

pub use config::{Algorithm, ExperimentConfig, RawConfig, SecondaryKind};
pub use denoise::{
    chain_denoise, PluginEndpoint, PluginSession, DenoiserChain, Secondary, Stage, TvParams, VideoDenoiser,
};
pub use error::{Error, Result};
pub use experiment::{
    compare_masks_noise_sweep, run_experiment, simulate, ExperimentReport, Simulation, SweepSummary,
};
pub use forward::{
    adjoint_op, calibrate, dense_operator, encode, forward_op, hht_diag, preprocess_measurement,
    CalibrationSet, Measurement, NoiseModel, VideoCube,
};
pub use metrics::{evaluate, psnr, ssim, MetricReport};
pub use optics::{
    compose_mask, gen_mask_stack, gen_pattern, geometric_shift, make_master_mask, shift_window,
    AperturePattern, MaskStack, MasterMask, OpticsGeometry, Scheme,
};
pub use solver::{gap_x_update, run_gap, sigma_schedule, ReconResult, SolverOptions};
pub use vsct::VsctTensor;
