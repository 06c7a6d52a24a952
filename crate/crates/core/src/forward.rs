//! The SCI sensing operator `H = [D_1, ..., D_B]`, `D_k = diag(vec(C_k))`.
//!
//! `H` is never materialised: every product reduces to per-pixel work over
//! the frame axis. `HH^T` is diagonal with entries `sum_k C_k^2`, which is
//! what makes the GAP projection an element-wise division.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::optics::MaskStack;
use crate::rng;

/// `B` video frames of `nx x ny`, stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoCube {
    data: Array3<f64>,
    pub frame_rate: Option<f64>,
}

impl VideoCube {
    /// Source scenes live in `[0, 1]`; solver iterates may leave that range,
    /// so only finiteness and shape are enforced here.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (b, nx, ny) = data.dim();
        if b == 0 || nx == 0 || ny == 0 {
            return Err(invalid(format!("video cube dims must be positive, got {b}x{nx}x{ny}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("video cube contains non-finite values"));
        }
        Ok(Self {
            data,
            frame_rate: None,
        })
    }

    pub(crate) fn from_array_unchecked(data: Array3<f64>) -> Self {
        Self {
            data,
            frame_rate: None,
        }
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn frame(&self, k: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), k)
    }

    pub fn frame_dims(&self) -> (usize, usize) {
        let (_, nx, ny) = self.data.dim();
        (nx, ny)
    }

    pub fn clamped(&self, lo: f64, hi: f64) -> Self {
        Self {
            data: self.data.mapv(|v| v.clamp(lo, hi)),
            frame_rate: self.frame_rate,
        }
    }
}

/// A single coded snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub data: Array2<f64>,
    /// Standard deviation of the added noise in `[0, 1]` units.
    pub noise_sigma: f64,
    pub background_subtracted: bool,
}

impl Measurement {
    pub fn clean(data: Array2<f64>) -> Self {
        Self {
            data,
            noise_sigma: 0.0,
            background_subtracted: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    None,
    Gaussian,
}

/// Additive measurement noise. `sigma` is on the 8-bit scale (a full-scale
/// video value of 1.0 corresponds to 255).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            kind: NoiseKind::None,
            sigma: 0.0,
            seed: 0,
        }
    }

    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            sigma,
            seed,
        }
    }

    /// Standard deviation in `[0, 1]` units.
    pub fn unit_sigma(&self) -> f64 {
        match self.kind {
            NoiseKind::None => 0.0,
            NoiseKind::Gaussian => self.sigma / 255.0,
        }
    }
}

fn check_dims(x: &Array3<f64>, c: &MaskStack) -> Result<()> {
    if x.dim() != c.masks().dim() {
        return Err(invalid(format!(
            "video dims {:?} do not match mask stack dims {:?}",
            x.dim(),
            c.masks().dim()
        )));
    }
    Ok(())
}

fn check_frame(y: &Array2<f64>, c: &MaskStack) -> Result<()> {
    if y.dim() != c.frame_dims() {
        return Err(invalid(format!(
            "measurement dims {:?} do not match mask dims {:?}",
            y.dim(),
            c.frame_dims()
        )));
    }
    Ok(())
}

/// `sum_k C_k * X_k` over raw arrays; shapes are the caller's problem.
pub(crate) fn apply_h(x: &Array3<f64>, c: ArrayView3<'_, f64>) -> Array2<f64> {
    let (_, nx, ny) = x.dim();
    let mut y = Array2::<f64>::zeros((nx, ny));
    for (xk, ck) in x.outer_iter().zip(c.outer_iter()) {
        Zip::from(&mut y)
            .and(&xk)
            .and(&ck)
            .for_each(|acc, &xv, &cv| *acc += cv * xv);
    }
    y
}

/// `(H^T y)_k = C_k * y`.
pub(crate) fn apply_ht(y: &Array2<f64>, c: ArrayView3<'_, f64>) -> Array3<f64> {
    let mut out = c.to_owned();
    for mut frame in out.outer_iter_mut() {
        frame *= y;
    }
    out
}

pub fn forward_op(x: &VideoCube, c: &MaskStack) -> Result<Measurement> {
    check_dims(&x.data, c)?;
    Ok(Measurement::clean(apply_h(&x.data, c.masks())))
}

pub fn adjoint_op(y: &Measurement, c: &MaskStack) -> Result<VideoCube> {
    check_frame(&y.data, c)?;
    Ok(VideoCube::from_array_unchecked(apply_ht(&y.data, c.masks())))
}

/// Diagonal of `HH^T` as an image: `R = sum_k C_k * C_k`.
pub fn hht_diag(c: &MaskStack) -> Array2<f64> {
    let mut r = Array2::<f64>::zeros(c.frame_dims());
    for ck in c.masks().outer_iter() {
        Zip::from(&mut r).and(&ck).for_each(|acc, &v| *acc += v * v);
    }
    r
}

/// Largest `n = nx*ny` for which the explicit matrix may be built.
pub const DENSE_PIXEL_LIMIT: usize = 4096;

/// Explicit `n x nB` sensing matrix, pixels flattened row-major and frames
/// stacked. Only meant as a reference for small problems.
pub fn dense_operator(c: &MaskStack) -> Result<Array2<f64>> {
    let (nx, ny) = c.frame_dims();
    let n = nx * ny;
    let b = c.frames();
    if n > DENSE_PIXEL_LIMIT {
        return Err(Error::TooLarge {
            rows: n,
            cols: n * b,
            limit: DENSE_PIXEL_LIMIT,
        });
    }
    let mut h = Array2::<f64>::zeros((n, n * b));
    for (k, ck) in c.masks().outer_iter().enumerate() {
        for (p, &v) in ck.iter().enumerate() {
            h[[p, k * n + p]] = v;
        }
    }
    Ok(h)
}

/// `Y = H x + G`.
pub fn encode(x: &VideoCube, c: &MaskStack, noise: &NoiseModel) -> Result<Measurement> {
    if !(noise.sigma.is_finite() && noise.sigma >= 0.0) {
        return Err(invalid(format!("noise sigma {} must be >= 0", noise.sigma)));
    }
    let mut y = forward_op(x, c)?;
    let sigma = noise.unit_sigma();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
        let mut rng = rng::stream(noise.seed, rng::DOMAIN_NOISE, 0);
        y.data.mapv_inplace(|v| v + normal.sample(&mut rng));
    }
    y.noise_sigma = sigma;
    Ok(y)
}

/// Captured calibration data: raw mask images, a white illumination frame
/// and a dark background frame.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub raw_masks: Array3<f64>,
    pub illumination: Array2<f64>,
    pub background: Array2<f64>,
    /// Pixels with `I - Bg < epsilon` are zero-filled.
    pub epsilon: f64,
    /// Largest tolerated fraction of zero-filled pixels.
    pub max_guarded_fraction: f64,
}

impl CalibrationSet {
    pub fn new(raw_masks: Array3<f64>, illumination: Array2<f64>, background: Array2<f64>) -> Self {
        Self {
            raw_masks,
            illumination,
            background,
            epsilon: 1e-3,
            max_guarded_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Calibrated {
    pub masks: MaskStack,
    /// Pixels zero-filled because illumination barely exceeded background.
    pub guarded_pixels: usize,
}

/// `C'_k = (C_k - Bg) / (I - Bg)`, clamped to `[0, 1]`.
pub fn calibrate(cs: &CalibrationSet) -> Result<Calibrated> {
    let (b, nx, ny) = cs.raw_masks.dim();
    if b == 0 || nx == 0 || ny == 0 {
        return Err(invalid("calibration needs at least one raw mask"));
    }
    if cs.illumination.dim() != (nx, ny) || cs.background.dim() != (nx, ny) {
        return Err(invalid(format!(
            "calibration images differ in size: masks {nx}x{ny}, illumination {:?}, background {:?}",
            cs.illumination.dim(),
            cs.background.dim()
        )));
    }
    if !(cs.epsilon > 0.0) {
        return Err(invalid("calibration epsilon must be > 0"));
    }
    let span = &cs.illumination - &cs.background;
    let guard = span.mapv(|d| d < cs.epsilon);
    let guarded = guard.iter().filter(|&&g| g).count();
    let total = nx * ny;
    let allowed = (cs.max_guarded_fraction * total as f64).floor() as usize;
    if guarded > allowed {
        return Err(Error::CalibrationDegenerate {
            guarded,
            total,
            allowed,
        });
    }
    let mut out = Array3::<f64>::zeros((b, nx, ny));
    for (mut dst, raw) in out.outer_iter_mut().zip(cs.raw_masks.outer_iter()) {
        Zip::from(&mut dst)
            .and(&raw)
            .and(&cs.background)
            .and(&span)
            .and(&guard)
            .for_each(|d, &c, &bg, &s, &g| {
                *d = if g { 0.0 } else { ((c - bg) / s).clamp(0.0, 1.0) };
            });
    }
    if out.iter().any(|v| v.is_nan()) {
        return Err(invalid("calibration input contains non-finite values"));
    }
    Ok(Calibrated {
        masks: MaskStack::from_masks(out)?,
        guarded_pixels: guarded,
    })
}

/// Background-subtracted snapshot, negatives clamped to zero.
pub fn preprocess_measurement(y_raw: &Array2<f64>, background: &Array2<f64>) -> Result<Measurement> {
    if y_raw.dim() != background.dim() {
        return Err(invalid(format!(
            "measurement {:?} and background {:?} differ in size",
            y_raw.dim(),
            background.dim()
        )));
    }
    let mut data = y_raw - background;
    data.mapv_inplace(|v| v.max(0.0));
    Ok(Measurement {
        data,
        noise_sigma: 0.0,
        background_subtracted: true,
    })
}
