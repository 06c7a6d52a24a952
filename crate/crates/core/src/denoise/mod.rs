//! Denoisers for the plug-and-play prior step.
//!
//! A [`DenoiserChain`] always runs TV first and, in its full stage, hands the
//! TV output to an optional secondary video denoiser (an echo stub, an
//! out-of-process VDN1 plugin, or any [`VideoDenoiser`]).

pub mod plugin;
pub mod protocol;
pub mod tv;

pub use plugin::{plugin_denoise, PluginEndpoint, PluginSession, PluginTarget};
pub use tv::{total_variation, tv_denoise, tv_denoise_frame};

use crate::error::{invalid, Error, Result};
use crate::forward::VideoCube;

/// A denoiser usable as the second stage of a chain. `sigma` is in `[0, 1]`
/// units.
pub trait VideoDenoiser: Send + Sync {
    fn name(&self) -> &str;
    fn denoise(&self, x: &VideoCube, sigma: f64) -> Result<VideoCube>;
}

impl VideoDenoiser for PluginSession {
    fn name(&self) -> &str {
        "plugin"
    }

    fn denoise(&self, x: &VideoCube, sigma: f64) -> Result<VideoCube> {
        PluginSession::denoise(self, x, sigma)
    }
}

impl<T: VideoDenoiser + ?Sized> VideoDenoiser for std::sync::Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn denoise(&self, x: &VideoCube, sigma: f64) -> Result<VideoCube> {
        (**self).denoise(x, sigma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvParams {
    pub weight: f64,
    pub inner_iters: usize,
}

impl Default for TvParams {
    fn default() -> Self {
        Self {
            weight: 0.1,
            inner_iters: 5,
        }
    }
}

pub enum Secondary {
    None,
    /// Host-side identity.
    Echo,
    External(Box<dyn VideoDenoiser>),
}

impl std::fmt::Debug for Secondary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Secondary::None => f.write_str("None"),
            Secondary::Echo => f.write_str("Echo"),
            Secondary::External(d) => write!(f, "External({})", d.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    TvOnly,
    Full,
}

#[derive(Debug)]
pub struct DenoiserChain {
    pub tv: TvParams,
    pub secondary: Secondary,
}

impl DenoiserChain {
    pub fn tv_only(tv: TvParams) -> Self {
        Self {
            tv,
            secondary: Secondary::None,
        }
    }

    pub fn with_secondary(tv: TvParams, secondary: Secondary) -> Self {
        Self { tv, secondary }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tv.weight.is_finite() && self.tv.weight >= 0.0) {
            return Err(invalid(format!("TV weight {} must be >= 0", self.tv.weight)));
        }
        if self.tv.inner_iters == 0 {
            return Err(invalid("TV inner iterations must be >= 1"));
        }
        Ok(())
    }

    /// Names of the denoisers `stage` runs, in order.
    pub fn stage_names(&self, stage: Stage) -> Vec<String> {
        let mut names = vec!["tv".to_string()];
        if stage == Stage::Full {
            match &self.secondary {
                Secondary::None => {}
                Secondary::Echo => names.push("echo".into()),
                Secondary::External(d) => names.push(d.name().to_string()),
            }
        }
        names
    }

    /// Runs the chain with an explicit TV parameter set (the solver may
    /// anneal the TV weight).
    pub fn apply(&self, x: &VideoCube, tv: TvParams, sigma: f64, stage: Stage) -> Result<VideoCube> {
        let v = tv_denoise(x, tv.weight, tv.inner_iters);
        if stage == Stage::TvOnly {
            return Ok(v);
        }
        match &self.secondary {
            Secondary::None | Secondary::Echo => Ok(v),
            Secondary::External(d) => d.denoise(&v, sigma).map_err(|e| match e {
                Error::InvalidArgument(m) => Error::InvalidArgument(format!("{}: {m}", d.name())),
                other => other,
            }),
        }
    }
}

/// TV, then (in the full stage) the secondary denoiser at noise level `sigma`.
pub fn chain_denoise(x: &VideoCube, chain: &DenoiserChain, sigma: f64, stage: Stage) -> Result<VideoCube> {
    chain.validate()?;
    chain.apply(x, chain.tv, sigma, stage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::time::Duration;

    fn noisy_cube() -> VideoCube {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = Normal::new(0.0, 0.1).unwrap();
        VideoCube::new(Array3::from_shape_fn((3, 16, 16), |(_, r, _)| {
            if r < 8 { 0.2 } else { 0.8 }
        }) + Array3::from_shape_simple_fn((3, 16, 16), || n.sample(&mut rng)))
        .unwrap()
    }

    /// Stand-in for a neural plugin: temporal mean with the centre frame.
    struct TemporalBlend;

    impl VideoDenoiser for TemporalBlend {
        fn name(&self) -> &str {
            "temporal-blend"
        }
        fn denoise(&self, x: &VideoCube, _sigma: f64) -> Result<VideoCube> {
            let mean = x.data().mean_axis(ndarray::Axis(0)).unwrap();
            let mut out = x.data().clone();
            for mut f in out.outer_iter_mut() {
                f += &mean;
                f *= 0.5;
            }
            VideoCube::new(out)
        }
    }

    #[test]
    fn tv_only_matches_tv_denoise() {
        let x = noisy_cube();
        let chain = DenoiserChain::tv_only(TvParams::default());
        let a = chain_denoise(&x, &chain, 0.1, Stage::TvOnly).unwrap();
        assert_eq!(a, tv_denoise(&x, 0.1, 5));
        assert_eq!(chain.stage_names(Stage::Full), vec!["tv"]);
    }

    #[test]
    fn full_with_echo_is_bitwise_tv() {
        let x = noisy_cube();
        let chain = DenoiserChain::with_secondary(TvParams::default(), Secondary::Echo);
        let full = chain_denoise(&x, &chain, 0.1, Stage::Full).unwrap();
        let tv = chain_denoise(&x, &chain, 0.1, Stage::TvOnly).unwrap();
        assert_eq!(full, tv);
        assert_eq!(chain.stage_names(Stage::Full), vec!["tv", "echo"]);
    }

    #[test]
    fn full_with_nontrivial_secondary_differs() {
        let x = noisy_cube();
        let chain = DenoiserChain::with_secondary(
            TvParams::default(),
            Secondary::External(Box::new(TemporalBlend)),
        );
        let full = chain_denoise(&x, &chain, 0.1, Stage::Full).unwrap();
        let tv = chain_denoise(&x, &chain, 0.1, Stage::TvOnly).unwrap();
        assert_ne!(full, tv);
    }

    #[test]
    fn plugin_errors_propagate() {
        let s = PluginSession::from_streams(
            std::io::Cursor::new(protocol::encode_message(&protocol::Message::Error(
                "no weights".into(),
            ))),
            std::io::sink(),
            Duration::from_secs(2),
        );
        let chain = DenoiserChain::with_secondary(TvParams::default(), Secondary::External(Box::new(s)));
        assert!(matches!(
            chain_denoise(&noisy_cube(), &chain, 0.1, Stage::Full),
            Err(Error::PluginError(_))
        ));
    }

    #[test]
    fn invalid_chain_rejected() {
        let chain = DenoiserChain::tv_only(TvParams {
            weight: -1.0,
            inner_iters: 5,
        });
        assert!(chain_denoise(&noisy_cube(), &chain, 0.1, Stage::TvOnly).is_err());
        let chain = DenoiserChain::tv_only(TvParams {
            weight: 0.1,
            inner_iters: 0,
        });
        assert!(chain.validate().is_err());
    }
}
