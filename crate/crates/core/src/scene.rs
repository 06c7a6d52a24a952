//! Scene ingestion and built-in synthetic test scenes.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Axis};

use crate::error::{invalid, Error, Result};
use crate::forward::VideoCube;
use crate::vsct::VsctTensor;

/// Prefix selecting a built-in scene instead of a file path.
pub const SYNTHETIC_PREFIX: &str = "synthetic:";

const IMAGE_EXTENSIONS: &[&str] = &["png", "bmp", "pgm", "ppm", "pnm", "tif", "tiff"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticScene {
    /// A bright square on a black background moving one pixel per frame.
    MovingSquare,
    /// Smooth sinusoidal texture drifting one pixel per frame.
    DriftingSinusoid,
    /// Bright bars rotating about the frame centre.
    RotatingBars,
}

impl FromStr for SyntheticScene {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "moving-square" => Ok(Self::MovingSquare),
            "drifting-sinusoid" => Ok(Self::DriftingSinusoid),
            "rotating-bars" => Ok(Self::RotatingBars),
            other => Err(invalid(format!("unknown synthetic scene '{other}'"))),
        }
    }
}

impl SyntheticScene {
    pub fn name(&self) -> &'static str {
        match self {
            Self::MovingSquare => "moving-square",
            Self::DriftingSinusoid => "drifting-sinusoid",
            Self::RotatingBars => "rotating-bars",
        }
    }

    /// Geometry of the moving square: `(row0, col0, side)`. Frame `k` covers
    /// rows `row0..row0+side` and columns `col0+k..col0+k+side`, clipped to
    /// the frame.
    pub fn square_layout(size: usize) -> (usize, usize, usize) {
        let side = (size / 4).max(1);
        (size / 4, size / 4, side)
    }

    pub fn render(&self, size: usize, frames: usize) -> Result<VideoCube> {
        if size == 0 || frames == 0 {
            return Err(invalid("synthetic scene needs positive size and frame count"));
        }
        let n = size as f64;
        let data = match self {
            Self::MovingSquare => {
                let (r0, c0, side) = Self::square_layout(size);
                Array3::from_shape_fn((frames, size, size), |(k, r, c)| {
                    let inside = (r0..r0 + side).contains(&r) && (c0 + k..c0 + k + side).contains(&c);
                    if inside { 1.0 } else { 0.0 }
                })
            }
            Self::DriftingSinusoid => {
                let period = (n / 4.0).max(2.0);
                Array3::from_shape_fn((frames, size, size), |(k, r, c)| {
                    let phase = 2.0 * PI * (c as f64 + k as f64) / period;
                    let rows = 2.0 * PI * r as f64 / (1.5 * period);
                    0.5 + 0.3 * phase.sin() + 0.15 * rows.cos()
                })
            }
            Self::RotatingBars => {
                let center = (n - 1.0) / 2.0;
                let spacing = (n / 4.0).max(2.0);
                Array3::from_shape_fn((frames, size, size), |(k, r, c)| {
                    let theta = PI * k as f64 / (4.0 * frames as f64);
                    let (dr, dc) = (r as f64 - center, c as f64 - center);
                    let u = dr * theta.cos() + dc * theta.sin();
                    let m = u.rem_euclid(spacing);
                    if m < spacing / 3.0 { 0.9 } else { 0.1 }
                })
            }
        };
        VideoCube::new(data)
    }
}

fn center_crop(cube: Array3<f64>, scale: usize, frames: usize) -> Result<Array3<f64>> {
    let (b, h, w) = cube.dim();
    if b < frames {
        return Err(Error::InsufficientFrames {
            needed: frames,
            found: b,
        });
    }
    if h < scale || w < scale {
        return Err(invalid(format!(
            "scene frames are {h}x{w}, smaller than requested scale {scale}"
        )));
    }
    let (r0, c0) = ((h - scale) / 2, (w - scale) / 2);
    Ok(cube
        .slice(s![..frames, r0..r0 + scale, c0..c0 + scale])
        .to_owned())
}

/// Grayscale frame in `[0, 1]`. Colour images use luma weights
/// 0.299 / 0.587 / 0.114.
pub fn load_gray_image(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let eight_bit = matches!(
        img.color(),
        image::ColorType::L8 | image::ColorType::La8 | image::ColorType::Rgb8 | image::ColorType::Rgba8
    );
    let has_color = img.color().has_color();
    let luma = |r: f64, g: f64, b: f64| 0.299 * r + 0.587 * g + 0.114 * b;
    let values: Vec<f64> = match (has_color, eight_bit) {
        (false, true) => img.to_luma8().into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect(),
        (false, false) => img
            .to_luma16()
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 65535.0)
            .collect(),
        (true, true) => img
            .to_rgb8()
            .pixels()
            .map(|p| luma(p[0].into(), p[1].into(), p[2].into()) / 255.0)
            .collect(),
        (true, false) => img
            .to_rgb16()
            .pixels()
            .map(|p| luma(p[0].into(), p[1].into(), p[2].into()) / 65535.0)
            .collect(),
    };
    Ok(Array2::from_shape_vec((h, w), values).expect("image buffer matches dims"))
}

fn image_sequence(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Loads `frames` frames of a scene, centre-cropped to `scale x scale`.
///
/// `source` is either `synthetic:<name>`, a VSCT cube, or a directory of
/// numbered grayscale/colour images (sorted by file name).
pub fn load_scene(source: &str, scale: usize, frames: usize) -> Result<VideoCube> {
    if scale == 0 || frames == 0 {
        return Err(invalid("scale and frame count must be positive"));
    }
    if let Some(name) = source.strip_prefix(SYNTHETIC_PREFIX) {
        return name.parse::<SyntheticScene>()?.render(scale, frames);
    }
    let path = Path::new(source);
    let cube = if path.is_dir() {
        let files = image_sequence(path)?;
        if files.len() < frames {
            return Err(Error::InsufficientFrames {
                needed: frames,
                found: files.len(),
            });
        }
        let first = load_gray_image(&files[0])?;
        let mut cube = Array3::<f64>::zeros((frames, first.nrows(), first.ncols()));
        cube.index_axis_mut(Axis(0), 0).assign(&first);
        for (k, f) in files.iter().enumerate().take(frames).skip(1) {
            let img = load_gray_image(f)?;
            if img.dim() != first.dim() {
                return Err(invalid(format!(
                    "{} is {:?}, first frame is {:?}",
                    f.display(),
                    img.dim(),
                    first.dim()
                )));
            }
            cube.index_axis_mut(Axis(0), k).assign(&img);
        }
        cube
    } else {
        VsctTensor::load(path)?.to_array3()?
    };
    VideoCube::new(center_crop(cube, scale, frames)?)
}
