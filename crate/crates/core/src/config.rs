//! Experiment configuration.
//!
//! Plain UTF-8 text, one `key = value` per line. `#` starts a comment,
//! dotted keys group related settings and lists are comma separated:
//!
//! ```text
//! scene = synthetic:moving-square
//! scale = 64
//! cr = 8
//! mask.scheme = random-squares
//! noise.sigmas = 0, 10, 20
//! solver.k_max = 160
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::denoise::TvParams;
use crate::error::{invalid, Error, Result};
use crate::optics::{DiscParams, OpticsGeometry, Scheme};
use crate::solver::SolverOptions;

/// Reconstruction variant run for every noise level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// GAP with the TV denoiser only.
    GapTv,
    /// TV warm-up, then TV followed by the secondary denoiser.
    PnpTvPlugin,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::GapTv => "gap-tv",
            Algorithm::PnpTvPlugin => "pnp-tv-plugin",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gap-tv" => Ok(Algorithm::GapTv),
            "pnp-tv-plugin" => Ok(Algorithm::PnpTvPlugin),
            other => Err(invalid(format!(
                "unknown algorithm '{other}' (expected gap-tv or pnp-tv-plugin)"
            ))),
        }
    }
}

/// Which second-stage denoiser the PnP variant uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SecondaryKind {
    None,
    /// Identity, applied on the host.
    Echo,
    /// Identity served over the VDN1 transport by a thread of this process.
    InProcessEcho,
    /// External program given by `chain.plugin`.
    Plugin,
}

impl SecondaryKind {
    pub fn name(&self) -> &'static str {
        match self {
            SecondaryKind::None => "none",
            SecondaryKind::Echo => "echo",
            SecondaryKind::InProcessEcho => "in-process-echo",
            SecondaryKind::Plugin => "plugin",
        }
    }
}

impl FromStr for SecondaryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(SecondaryKind::None),
            "echo" => Ok(SecondaryKind::Echo),
            "in-process-echo" => Ok(SecondaryKind::InProcessEcho),
            "plugin" => Ok(SecondaryKind::Plugin),
            other => Err(invalid(format!("unknown secondary denoiser '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskConfig {
    pub scheme: Scheme,
    pub density: f64,
    /// Master mask margin; `None` uses the geometry's largest shift.
    pub margin: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryConfig {
    pub rows: usize,
    pub cols: usize,
    pub shift_gain: f64,
}

impl GeometryConfig {
    pub fn build(&self) -> Result<OpticsGeometry> {
        OpticsGeometry::grid(self.rows, self.cols, self.shift_gain)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub tv: TvParams,
    pub secondary: SecondaryKind,
    pub plugin: Option<String>,
    pub plugin_timeout: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// `synthetic:<name>`, a VSCT cube or a directory of frames.
    pub scene: String,
    pub scale: usize,
    /// Compression ratio, i.e. frames per snapshot.
    pub cr: usize,
    /// Seed for the master mask, aperture patterns and noise.
    pub seed: u64,
    /// Seeds averaged by the noise sweep.
    pub seeds: Vec<u64>,
    pub mask: MaskConfig,
    pub geometry: GeometryConfig,
    /// Noise levels on the 0..255 scale.
    pub sigmas: Vec<f64>,
    pub solver: SolverOptions,
    pub chain: ChainConfig,
    pub algorithms: Vec<Algorithm>,
    /// Non-multiplexed scheme the noise sweep compares against.
    pub compare_scheme: Scheme,
    pub out: Option<PathBuf>,
}

/// Key/value pairs as read from a file, before interpretation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, (usize, String)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line: n,
                message: format!("expected `key = value`, found `{content}`"),
            })?;
            let key = key.trim();
            let valid = !key.is_empty()
                && key.split('.').all(|part| {
                    !part.is_empty()
                        && part
                            .chars()
                            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
                });
            if !valid {
                return Err(Error::Config {
                    line: n,
                    message: format!("invalid key `{key}`"),
                });
            }
            if let Some((prev, _)) = raw.entries.get(key) {
                return Err(Error::Config {
                    line: n,
                    message: format!("duplicate key `{key}` (first set on line {prev})"),
                });
            }
            raw.entries.insert(key.to_string(), (n, value.trim().to_string()));
        }
        Ok(raw)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets or replaces a key. Errors for such overrides report line 0.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), (0, value.into()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, (_, v))| (k.as_str(), v.as_str()))
    }
}

const KNOWN_KEYS: &[&str] = &[
    "scene",
    "scale",
    "cr",
    "seed",
    "seeds",
    "out",
    "algorithms",
    "mask.scheme",
    "mask.density",
    "mask.margin",
    "geometry.rows",
    "geometry.cols",
    "geometry.shift_gain",
    "geometry.disc_radius",
    "geometry.disc_offset",
    "noise.sigmas",
    "solver.k_max",
    "solver.k1",
    "solver.lambda0",
    "solver.xi",
    "solver.sigma_floor",
    "solver.tol",
    "solver.tv_anneal",
    "chain.tv_weight",
    "chain.tv_iters",
    "chain.secondary",
    "chain.plugin",
    "chain.plugin_timeout",
    "compare.scheme",
];

struct Reader<'a> {
    raw: &'a RawConfig,
}

impl Reader<'_> {
    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.raw.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse::<T>().map(Some).map_err(|e| Error::Config {
                line: *line,
                message: format!("{key}: {e}"),
            }),
        }
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: fmt::Display,
    {
        let Some((line, v)) = self.raw.entries.get(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>().map_err(|e| Error::Config {
                    line: *line,
                    message: format!("{key}: `{s}`: {e}"),
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    fn line(&self, key: &str) -> usize {
        self.raw.entries.get(key).map_or(0, |(l, _)| *l)
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_raw(&RawConfig::default()).expect("defaults are valid")
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_raw(&RawConfig::parse(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_raw(&RawConfig::load(path)?)
    }

    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        for (key, (line, _)) in &raw.entries {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config {
                    line: *line,
                    message: format!("unknown key `{key}`"),
                });
            }
        }
        let r = Reader { raw };
        let cr: usize = r.or("cr", 8)?;
        let seed: u64 = r.or("seed", 0)?;

        let mut scheme: Scheme = r.or("mask.scheme", Scheme::RandomSquares)?;
        let mut compare_scheme: Scheme = r.or("compare.scheme", Scheme::SingleShift)?;
        let disc = DiscParams {
            radius: r.or("geometry.disc_radius", DiscParams::default().radius)?,
            offset: r.or("geometry.disc_offset", DiscParams::default().offset)?,
        };
        for s in [&mut scheme, &mut compare_scheme] {
            if let Scheme::RotatingCircle(p) = s {
                *p = disc;
            }
        }

        let mut solver = SolverOptions::for_compression_ratio(cr);
        solver.k_max = r.or("solver.k_max", solver.k_max)?;
        solver.k1 = r.or("solver.k1", solver.k1.min(solver.k_max))?;
        solver.lambda0 = r.or("solver.lambda0", solver.lambda0)?;
        solver.xi = r.or("solver.xi", solver.xi)?;
        solver.sigma_floor = r.or("solver.sigma_floor", solver.sigma_floor)?;
        solver.tol = r.or("solver.tol", solver.tol)?;
        solver.tv_anneal = r.or("solver.tv_anneal", solver.tv_anneal)?;

        let timeout_s: f64 = r.or("chain.plugin_timeout", 60.0)?;
        if !(timeout_s.is_finite() && timeout_s > 0.0) {
            return Err(Error::Config {
                line: r.line("chain.plugin_timeout"),
                message: "chain.plugin_timeout must be a positive number of seconds".into(),
            });
        }
        let plugin: Option<String> = r.get("chain.plugin")?;
        let chain = ChainConfig {
            tv: TvParams {
                weight: r.or("chain.tv_weight", TvParams::default().weight)?,
                inner_iters: r.or("chain.tv_iters", TvParams::default().inner_iters)?,
            },
            secondary: r.or("chain.secondary", SecondaryKind::Plugin)?,
            plugin: plugin.filter(|p| !p.trim().is_empty()),
            plugin_timeout: Duration::from_secs_f64(timeout_s),
        };

        let cfg = ExperimentConfig {
            scene: r.or("scene", "synthetic:moving-square".to_string())?,
            scale: r.or("scale", 64)?,
            cr,
            seed,
            seeds: r.list("seeds")?.unwrap_or_else(|| vec![seed]),
            mask: MaskConfig {
                scheme,
                density: r.or("mask.density", 0.5)?,
                margin: r.get("mask.margin")?,
            },
            geometry: GeometryConfig {
                rows: r.or("geometry.rows", 3)?,
                cols: r.or("geometry.cols", 4)?,
                shift_gain: r.or("geometry.shift_gain", 10.0)?,
            },
            sigmas: r.list("noise.sigmas")?.unwrap_or_else(|| vec![0.0]),
            solver,
            chain,
            algorithms: r
                .list("algorithms")?
                .unwrap_or_else(|| vec![Algorithm::GapTv]),
            compare_scheme,
            out: r.get::<String>("out")?.map(PathBuf::from),
        };
        cfg.validate().map_err(|e| match e {
            Error::InvalidArgument(message) => Error::Config { line: 0, message },
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cr == 0 {
            return Err(invalid("cr must be >= 1"));
        }
        if self.scale == 0 {
            return Err(invalid("scale must be >= 1"));
        }
        if self.sigmas.is_empty() {
            return Err(invalid("noise.sigmas must list at least one level"));
        }
        if self.sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(invalid("noise levels must be finite and >= 0"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds must not be empty"));
        }
        if self.algorithms.is_empty() {
            return Err(invalid("algorithms must not be empty"));
        }
        if !(0.0..=1.0).contains(&self.mask.density) {
            return Err(invalid("mask.density must lie in [0, 1]"));
        }
        if self.mask.margin == Some(0) {
            return Err(invalid("mask.margin must be >= 1"));
        }
        self.geometry.build()?;
        self.solver.validate()?;
        if !(self.chain.tv.weight.is_finite() && self.chain.tv.weight >= 0.0) {
            return Err(invalid("chain.tv_weight must be >= 0"));
        }
        if self.chain.tv.inner_iters == 0 {
            return Err(invalid("chain.tv_iters must be >= 1"));
        }
        Ok(())
    }

    /// Every setting, defaults included, as config keys. Parsing the echo
    /// gives back the same configuration.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let join = |v: Vec<String>| v.join(", ");
        let disc = [self.mask.scheme, self.compare_scheme]
            .into_iter()
            .find_map(|s| match s {
                Scheme::RotatingCircle(p) => Some(p),
                _ => None,
            })
            .unwrap_or_default();
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("scene", self.scene.clone());
        put("scale", self.scale.to_string());
        put("cr", self.cr.to_string());
        put("seed", self.seed.to_string());
        put("seeds", join(self.seeds.iter().map(u64::to_string).collect()));
        put("mask.scheme", self.mask.scheme.tag().into());
        put("mask.density", self.mask.density.to_string());
        if let Some(mg) = self.mask.margin {
            put("mask.margin", mg.to_string());
        }
        put("geometry.rows", self.geometry.rows.to_string());
        put("geometry.cols", self.geometry.cols.to_string());
        put("geometry.shift_gain", self.geometry.shift_gain.to_string());
        put("geometry.disc_radius", disc.radius.to_string());
        put("geometry.disc_offset", disc.offset.to_string());
        put("noise.sigmas", join(self.sigmas.iter().map(f64::to_string).collect()));
        put("solver.k_max", self.solver.k_max.to_string());
        put("solver.k1", self.solver.k1.to_string());
        put("solver.lambda0", self.solver.lambda0.to_string());
        put("solver.xi", self.solver.xi.to_string());
        put("solver.sigma_floor", self.solver.sigma_floor.to_string());
        put("solver.tol", self.solver.tol.to_string());
        put("solver.tv_anneal", self.solver.tv_anneal.to_string());
        put("chain.tv_weight", self.chain.tv.weight.to_string());
        put("chain.tv_iters", self.chain.tv.inner_iters.to_string());
        put("chain.secondary", self.chain.secondary.name().into());
        if let Some(p) = &self.chain.plugin {
            put("chain.plugin", p.clone());
        }
        put(
            "chain.plugin_timeout",
            self.chain.plugin_timeout.as_secs_f64().to_string(),
        );
        put(
            "algorithms",
            join(self.algorithms.iter().map(|a| a.name().to_string()).collect()),
        );
        put("compare.scheme", self.compare_scheme.tag().into());
        if let Some(o) = &self.out {
            put("out", o.display().to_string());
        }
        m
    }

    /// The echo rendered as config text.
    pub fn to_text(&self) -> String {
        self.echo()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
