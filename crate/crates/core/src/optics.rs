//! Aperture multiplexing patterns and shifted-mask composition.
//!
//! A static high-resolution master mask is seen through one of `N`
//! switchable sub-apertures; each sub-aperture projects the mask onto the
//! sensor with a different integer translation. A frame's encoding mask is
//! the sum of the windows belonging to the open sub-apertures, divided by
//! `N`, so its amplitude tracks the fraction of the aperture that is open.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

/// Oversized static mask. Windows of the sensor size are cut out of it at
/// integer offsets up to `margin` in each direction.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterMask {
    data: Array2<f64>,
    margin: usize,
    binary: bool,
}

impl MasterMask {
    pub fn new(data: Array2<f64>, margin: usize) -> Result<Self> {
        let (h, w) = data.dim();
        if h <= 2 * margin || w <= 2 * margin {
            return Err(invalid(format!(
                "master mask {h}x{w} leaves no sensor area inside margin {margin}"
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("master mask values must lie in [0, 1]"));
        }
        let binary = data.iter().all(|&v| v == 0.0 || v == 1.0);
        Ok(Self {
            data,
            margin,
            binary,
        })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn margin(&self) -> usize {
        self.margin
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    /// Size of the sensor window, `(nx, ny)`.
    pub fn sensor_dims(&self) -> (usize, usize) {
        let (h, w) = self.data.dim();
        (h - 2 * self.margin, w - 2 * self.margin)
    }
}

/// I.i.d. Bernoulli(`density`) binary mask of size `(nx+2M) x (ny+2M)`.
pub fn make_master_mask(
    nx: usize,
    ny: usize,
    margin: usize,
    density: f64,
    seed: u64,
) -> Result<MasterMask> {
    if nx == 0 || ny == 0 || margin == 0 {
        return Err(invalid(format!(
            "master mask dims must be positive (nx={nx}, ny={ny}, margin={margin})"
        )));
    }
    if !(0.0..=1.0).contains(&density) {
        return Err(invalid(format!("density {density} outside [0, 1]")));
    }
    let mut rng = rng::stream(seed, rng::DOMAIN_MASTER_MASK, 0);
    let shape = (nx + 2 * margin, ny + 2 * margin);
    let data = Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < density {
            1.0
        } else {
            0.0
        }
    });
    MasterMask::new(data, margin)
}

/// Layout of the sub-apertures and the translation each one induces.
///
/// Sub-aperture centres are given in normalised aperture coordinates
/// (`[-1, 1]` per axis, first component along sensor rows). The shift for
/// sub-aperture `i` is `round(shift_gain * centre_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpticsGeometry {
    rows: usize,
    cols: usize,
    sub_centers: Vec<[f64; 2]>,
    shift_gain: f64,
    central: usize,
}

impl OpticsGeometry {
    /// Regular `rows x cols` grid. The sub-aperture at grid position
    /// `((rows-1)/2, (cols-1)/2)` sits at the origin and every axis is
    /// scaled so its farthest sub-aperture lands on +-1.
    pub fn grid(rows: usize, cols: usize, shift_gain: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid("sub-aperture grid must have positive rows and cols"));
        }
        let axis = |n: usize| -> Vec<f64> {
            let c = (n - 1) / 2;
            let ext = c.max(n - 1 - c);
            (0..n)
                .map(|i| {
                    if ext == 0 {
                        0.0
                    } else {
                        (i as f64 - c as f64) / ext as f64
                    }
                })
                .collect()
        };
        let (ax_r, ax_c) = (axis(rows), axis(cols));
        let centers = ax_r
            .iter()
            .flat_map(|&r| ax_c.iter().map(move |&c| [r, c]))
            .collect();
        Self::with_centers(rows, cols, centers, shift_gain)
    }

    pub fn with_centers(
        rows: usize,
        cols: usize,
        sub_centers: Vec<[f64; 2]>,
        shift_gain: f64,
    ) -> Result<Self> {
        if rows * cols == 0 || sub_centers.len() != rows * cols {
            return Err(invalid(format!(
                "{} sub-aperture centres for a {rows}x{cols} grid",
                sub_centers.len()
            )));
        }
        if !(shift_gain.is_finite() && shift_gain >= 0.0) {
            return Err(invalid(format!("shift gain {shift_gain} must be finite and >= 0")));
        }
        if sub_centers
            .iter()
            .flatten()
            .any(|v| !v.is_finite() || v.abs() > 1.0)
        {
            return Err(invalid("sub-aperture centres must lie in [-1, 1]^2"));
        }
        let central = sub_centers
            .iter()
            .enumerate()
            .min_by(|a, b| norm2(*a.1).total_cmp(&norm2(*b.1)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let g = Self {
            rows,
            cols,
            sub_centers,
            shift_gain,
            central,
        };
        if g.shift_of(central) != (0, 0) {
            return Err(invalid(
                "central sub-aperture does not map to a zero shift",
            ));
        }
        Ok(g)
    }

    pub fn n_sub(&self) -> usize {
        self.sub_centers.len()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shift_gain(&self) -> f64 {
        self.shift_gain
    }

    pub fn sub_centers(&self) -> &[[f64; 2]] {
        &self.sub_centers
    }

    /// Index of the sub-aperture closest to the origin (the centre view).
    pub fn central_index(&self) -> usize {
        self.central
    }

    /// Largest `|dx|` or `|dy|` any sub-aperture produces; the minimum
    /// master-mask margin for this geometry.
    pub fn max_shift(&self) -> usize {
        (0..self.n_sub())
            .map(|i| {
                let (dx, dy) = self.shift_of(i);
                dx.unsigned_abs().max(dy.unsigned_abs()) as usize
            })
            .max()
            .unwrap_or(0)
    }

    /// Stable fingerprint of the layout and gain.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(16 + 16 * self.n_sub() + 8);
        bytes.extend_from_slice(&(self.rows as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for c in &self.sub_centers {
            bytes.extend_from_slice(&c[0].to_le_bytes());
            bytes.extend_from_slice(&c[1].to_le_bytes());
        }
        bytes.extend_from_slice(&self.shift_gain.to_le_bytes());
        rng::fnv1a(bytes)
    }

    /// Mean of the sub-aperture centres; rotations of circular patterns
    /// happen around this point.
    pub fn aperture_center(&self) -> [f64; 2] {
        let n = self.n_sub() as f64;
        let (sr, sc) = self
            .sub_centers
            .iter()
            .fold((0.0, 0.0), |(a, b), c| (a + c[0], b + c[1]));
        [sr / n, sc / n]
    }

    fn shift_of(&self, i: usize) -> (i64, i64) {
        let [r, c] = self.sub_centers[i];
        (
            (self.shift_gain * r).round() as i64,
            (self.shift_gain * c).round() as i64,
        )
    }
}

fn norm2(p: [f64; 2]) -> f64 {
    p[0] * p[0] + p[1] * p[1]
}

/// Integer translation induced by sub-aperture `i`.
pub fn geometric_shift(i: usize, g: &OpticsGeometry) -> Result<(i64, i64)> {
    if i >= g.n_sub() {
        return Err(invalid(format!(
            "sub-aperture index {i} out of range (N = {})",
            g.n_sub()
        )));
    }
    Ok(g.shift_of(i))
}

/// The sensor-sized window of `o` starting at `(M + dx, M + dy)`.
pub fn shift_window(o: &MasterMask, dx: i64, dy: i64) -> Result<ArrayView2<'_, f64>> {
    let m = o.margin as i64;
    if dx.abs() > m || dy.abs() > m {
        return Err(Error::ShiftOutOfBounds {
            dx,
            dy,
            margin: o.margin,
        });
    }
    let (nx, ny) = o.sensor_dims();
    let r0 = (m + dx) as usize;
    let c0 = (m + dy) as usize;
    Ok(o.data.slice(s![r0..r0 + nx, c0..c0 + ny]))
}

/// Parameters of the rotating-circle scheme, in normalised aperture units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscParams {
    /// Disc radius.
    pub radius: f64,
    /// Distance of the disc centre from the aperture centre.
    pub offset: f64,
}

impl Default for DiscParams {
    fn default() -> Self {
        Self {
            radius: 0.6,
            offset: 0.5,
        }
    }
}

/// Multiplexing scheme deciding which sub-apertures open in each frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Scheme {
    /// `floor(N/2)` sub-apertures chosen at random for every frame.
    RandomSquares,
    /// Sub-apertures whose centres fall inside a disc that rotates by
    /// `360/B` degrees per frame.
    RotatingCircle(DiscParams),
    /// Only the centre view, every frame.
    SingleCenter,
    /// Exactly one sub-aperture per frame, cycling through a seeded
    /// permutation: shifted masks without multiplexing.
    SingleShift,
}

impl Scheme {
    pub fn tag(&self) -> &'static str {
        match self {
            Scheme::RandomSquares => "random-squares",
            Scheme::RotatingCircle(_) => "rotating-circle",
            Scheme::SingleCenter => "single-center",
            Scheme::SingleShift => "single-shift",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "random-squares" => Ok(Scheme::RandomSquares),
            "rotating-circle" => Ok(Scheme::RotatingCircle(DiscParams::default())),
            "single-center" => Ok(Scheme::SingleCenter),
            "single-shift" => Ok(Scheme::SingleShift),
            other => Err(invalid(format!("unknown mask scheme '{other}'"))),
        }
    }
}

/// Open/closed state of every sub-aperture for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AperturePattern {
    pub indicators: Vec<u8>,
    pub scheme: Scheme,
    pub frame_index: usize,
}

impl AperturePattern {
    pub fn open_count(&self) -> usize {
        self.indicators.iter().filter(|&&m| m == 1).count()
    }

    pub fn open_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.indicators
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == 1)
            .map(|(i, _)| i)
    }
}

/// Whether sub-aperture centre `p` lies inside the rotating disc of frame `k`.
pub(crate) fn in_rotating_disc(
    p: [f64; 2],
    center: [f64; 2],
    disc: DiscParams,
    k: usize,
    frames: usize,
) -> bool {
    let theta = 2.0 * PI * k as f64 / frames as f64;
    let dc = [
        center[0] + disc.offset * theta.cos(),
        center[1] + disc.offset * theta.sin(),
    ];
    norm2([p[0] - dc[0], p[1] - dc[1]]) <= disc.radius * disc.radius
}

pub fn gen_pattern(
    scheme: Scheme,
    k: usize,
    frames: usize,
    g: &OpticsGeometry,
    seed: u64,
) -> Result<AperturePattern> {
    if k >= frames {
        return Err(invalid(format!("frame index {k} out of range (B = {frames})")));
    }
    let n = g.n_sub();
    let mut indicators = vec![0u8; n];
    match scheme {
        Scheme::RandomSquares => {
            if n < 2 {
                return Err(invalid("random-squares needs at least 2 sub-apertures"));
            }
            let mut rng = rng::stream(seed, rng::DOMAIN_PATTERN, k as u64);
            for i in rand::seq::index::sample(&mut rng, n, n / 2) {
                indicators[i] = 1;
            }
        }
        Scheme::RotatingCircle(disc) => {
            if !(disc.radius > 0.0 && disc.offset >= 0.0) {
                return Err(invalid("rotating-circle needs radius > 0 and offset >= 0"));
            }
            let center = g.aperture_center();
            for (i, &p) in g.sub_centers().iter().enumerate() {
                if in_rotating_disc(p, center, disc, k, frames) {
                    indicators[i] = 1;
                }
            }
            if indicators.iter().all(|&m| m == 0) {
                // Disc falls between sub-aperture centres: open the nearest one.
                let theta = 2.0 * PI * k as f64 / frames as f64;
                let dc = [
                    center[0] + disc.offset * theta.cos(),
                    center[1] + disc.offset * theta.sin(),
                ];
                let nearest = g
                    .sub_centers()
                    .iter()
                    .enumerate()
                    .min_by(|a, b| {
                        norm2([a.1[0] - dc[0], a.1[1] - dc[1]])
                            .total_cmp(&norm2([b.1[0] - dc[0], b.1[1] - dc[1]]))
                    })
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                indicators[nearest] = 1;
            }
        }
        Scheme::SingleCenter => indicators[g.central_index()] = 1,
        Scheme::SingleShift => {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = rng::stream(seed, rng::DOMAIN_PATTERN, u64::MAX);
            order.shuffle(&mut rng);
            indicators[order[k % n]] = 1;
        }
    }
    Ok(AperturePattern {
        indicators,
        scheme,
        frame_index: k,
    })
}

/// Encoding mask `(1/N) * sum_i m_i * S_i(O)` and its throughput
/// `popcount(m)/N`.
pub fn compose_mask(
    o: &MasterMask,
    p: &AperturePattern,
    g: &OpticsGeometry,
) -> Result<(Array2<f64>, f64)> {
    if p.indicators.len() != g.n_sub() {
        return Err(invalid(format!(
            "pattern has {} indicators, geometry has {} sub-apertures",
            p.indicators.len(),
            g.n_sub()
        )));
    }
    if p.indicators.iter().any(|&m| m > 1) {
        return Err(invalid("pattern indicators must be 0 or 1"));
    }
    let n = g.n_sub() as f64;
    let mut acc = Array2::<f64>::zeros(o.sensor_dims());
    for i in p.open_indices() {
        let (dx, dy) = geometric_shift(i, g)?;
        acc += &shift_window(o, dx, dy)?;
    }
    acc.mapv_inplace(|v| v / n);
    Ok((acc, p.open_count() as f64 / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scheme: Scheme,
    pub seed: u64,
    pub geometry_hash: u64,
}

/// `B` per-frame encoding masks on the sensor grid, stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack {
    masks: Array3<f64>,
    throughput: Vec<f64>,
    provenance: Option<Provenance>,
}

impl MaskStack {
    pub fn new(
        masks: Array3<f64>,
        throughput: Vec<f64>,
        provenance: Option<Provenance>,
    ) -> Result<Self> {
        let (b, nx, ny) = masks.dim();
        if b == 0 || nx == 0 || ny == 0 {
            return Err(invalid("mask stack dims must be positive"));
        }
        if throughput.len() != b {
            return Err(invalid(format!(
                "{} throughput entries for {b} masks",
                throughput.len()
            )));
        }
        if masks.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("mask values must lie in [0, 1]"));
        }
        Ok(Self {
            masks,
            throughput,
            provenance,
        })
    }

    /// Wraps externally sourced masks (loaded or calibrated). Their
    /// throughput is unknown and recorded as the upper bound 1.
    pub fn from_masks(masks: Array3<f64>) -> Result<Self> {
        let b = masks.dim().0;
        Self::new(masks, vec![1.0; b], None)
    }

    pub fn masks(&self) -> ArrayView3<'_, f64> {
        self.masks.view()
    }

    pub fn mask(&self, k: usize) -> ArrayView2<'_, f64> {
        self.masks.index_axis(Axis(0), k)
    }

    pub fn throughput(&self) -> &[f64] {
        &self.throughput
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn frames(&self) -> usize {
        self.masks.dim().0
    }

    /// `(nx, ny)`.
    pub fn frame_dims(&self) -> (usize, usize) {
        let (_, nx, ny) = self.masks.dim();
        (nx, ny)
    }

    pub fn into_masks(self) -> Array3<f64> {
        self.masks
    }
}

pub fn gen_mask_stack(
    o: &MasterMask,
    scheme: Scheme,
    frames: usize,
    g: &OpticsGeometry,
    seed: u64,
) -> Result<MaskStack> {
    if frames == 0 {
        return Err(invalid("a mask stack needs at least one frame"));
    }
    let (nx, ny) = o.sensor_dims();
    let mut masks = Array3::<f64>::zeros((frames, nx, ny));
    let mut throughput = Vec::with_capacity(frames);
    for (k, mut slot) in masks.axis_iter_mut(Axis(0)).enumerate() {
        let pattern = gen_pattern(scheme, k, frames, g, seed)?;
        let (mask, tau) = compose_mask(o, &pattern, g)?;
        slot.assign(&mask);
        throughput.push(tau);
    }
    MaskStack::new(
        masks,
        throughput,
        Some(Provenance {
            scheme,
            seed,
            geometry_hash: g.fingerprint(),
        }),
    )
}
