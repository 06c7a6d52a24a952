//! Generalized alternating projection with plug-and-play denoising.
//!
//! Each iteration projects the current estimate onto `{x : Hx = y}` (exact,
//! element-wise because `HH^T` is diagonal) and then denoises it. The first
//! `k1` iterations use TV alone; later ones run TV followed by the chain's
//! secondary denoiser.

use ndarray::{Array2, Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::denoise::{DenoiserChain, Stage, TvParams};
use crate::error::{invalid, Error, Result};
use crate::forward::{apply_h, hht_diag, Measurement, VideoCube};
use crate::optics::MaskStack;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub k_max: usize,
    /// Iterations that run the TV stage alone.
    pub k1: usize,
    /// `sigma(1) = sqrt(lambda0)`.
    pub lambda0: f64,
    /// Geometric decay of sigma per iteration.
    pub xi: f64,
    pub sigma_floor: f64,
    /// Stop once the relative change of the residual drops below this.
    /// Zero runs exactly `k_max` iterations.
    pub tol: f64,
    pub record_trace: bool,
    /// Scale the TV weight by `sigma(k) / sigma(1)` so the TV step follows
    /// the same schedule as the secondary denoiser.
    pub tv_anneal: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            k_max: 160,
            k1: 50,
            lambda0: 0.01,
            xi: 0.94,
            sigma_floor: 0.0,
            tol: 0.0,
            record_trace: true,
            tv_anneal: true,
        }
    }
}

impl SolverOptions {
    /// Iteration budget by compression ratio: 160 / 250 iterations and a TV
    /// warm-up of 50 / 80 for `cr <= 10` / larger.
    pub fn for_compression_ratio(cr: usize) -> Self {
        let (k_max, k1) = if cr <= 10 { (160, 50) } else { (250, 80) };
        Self {
            k_max,
            k1,
            ..Self::default()
        }
    }

    /// Pure GAP-TV: the secondary stage never runs.
    pub fn gap_tv(mut self) -> Self {
        self.k1 = self.k_max;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(invalid("k_max must be >= 1"));
        }
        if self.k1 > self.k_max {
            return Err(invalid(format!("k1 = {} exceeds k_max = {}", self.k1, self.k_max)));
        }
        if !(self.xi > 0.0 && self.xi <= 1.0) {
            return Err(invalid(format!("xi = {} outside (0, 1]", self.xi)));
        }
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return Err(invalid("lambda0 must be finite and >= 0"));
        }
        if !(self.sigma_floor >= 0.0) || !(self.tol >= 0.0) {
            return Err(invalid("sigma_floor and tol must be >= 0"));
        }
        Ok(())
    }
}

/// `sigma(k) = max(sqrt(lambda0) * xi^(k-1), sigma_floor)`, `k >= 1`.
pub fn sigma_schedule(opts: &SolverOptions, k: usize) -> f64 {
    let k = k.max(1);
    (opts.lambda0.sqrt() * opts.xi.powi((k - 1) as i32)).max(opts.sigma_floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconResult {
    pub video: VideoCube,
    /// `||y - H v(k)||_2` after every iteration (empty unless recorded).
    pub residual_trace: Vec<f64>,
    pub iterations_run: usize,
    /// Denoisers that ran in each iteration, in order.
    pub denoiser_log: Vec<Vec<String>>,
    /// Pixels no mask ever illuminates; reconstructed as 0.
    pub dark_pixels: usize,
}

fn check_problem(y: &Measurement, c: &MaskStack) -> Result<()> {
    if y.data.dim() != c.frame_dims() {
        return Err(invalid(format!(
            "measurement dims {:?} do not match mask dims {:?}",
            y.data.dim(),
            c.frame_dims()
        )));
    }
    if y.data.iter().any(|v| !v.is_finite()) {
        return Err(invalid("measurement contains non-finite values"));
    }
    Ok(())
}

/// `(y - Hv) / R` where `R > 0`, zero elsewhere.
fn scaled_residual(resid: &Array2<f64>, r: &Array2<f64>) -> Array2<f64> {
    let mut out = resid.clone();
    Zip::from(&mut out).and(r).for_each(|o, &rv| {
        *o = if rv > 0.0 { *o / rv } else { 0.0 };
    });
    out
}

/// `x = v + C_k * s` for every frame.
fn add_backprojection(v: &Array3<f64>, masks: ArrayView3<f64>, s: &Array2<f64>) -> Array3<f64> {
    let mut x = v.clone();
    for (mut xk, ck) in x.outer_iter_mut().zip(masks.outer_iter()) {
        Zip::from(&mut xk)
            .and(&ck)
            .and(s)
            .for_each(|xv, &cv, &sv| *xv += cv * sv);
    }
    x
}

/// `x = v + H^T (HH^T)^-1 (y - Hv)`, computed element-wise. Pixels no mask
/// illuminates keep `v`.
pub fn gap_x_update(v: &VideoCube, y: &Measurement, c: &MaskStack) -> Result<VideoCube> {
    check_problem(y, c)?;
    if v.data().dim() != c.masks().dim() {
        return Err(invalid(format!(
            "estimate dims {:?} do not match mask stack dims {:?}",
            v.data().dim(),
            c.masks().dim()
        )));
    }
    let r = hht_diag(c);
    let resid = &y.data - &apply_h(v.data(), c.masks());
    let s = scaled_residual(&resid, &r);
    Ok(VideoCube::from_array_unchecked(add_backprojection(
        v.data(),
        c.masks(),
        &s,
    )))
}

fn zero_dark(x: &mut Array3<f64>, r: &Array2<f64>) {
    for mut xk in x.outer_iter_mut() {
        Zip::from(&mut xk).and(r).for_each(|xv, &rv| {
            if rv <= 0.0 {
                *xv = 0.0;
            }
        });
    }
}

fn finish(mut v: Array3<f64>, r: &Array2<f64>) -> VideoCube {
    zero_dark(&mut v, r);
    v.mapv_inplace(|e| e.clamp(0.0, 1.0));
    VideoCube::from_array_unchecked(v)
}

pub fn run_gap(
    y: &Measurement,
    c: &MaskStack,
    chain: &DenoiserChain,
    opts: &SolverOptions,
) -> Result<ReconResult> {
    check_problem(y, c)?;
    chain.validate()?;
    opts.validate()?;

    let masks = c.masks();
    let r = hht_diag(c);
    let dark_pixels = r.iter().filter(|&&v| v <= 0.0).count();

    // warm start: R-normalised back-projection of y
    let mut v = add_backprojection(
        &Array3::zeros(masks.dim()),
        masks,
        &scaled_residual(&y.data, &r),
    );
    let mut resid = &y.data - &apply_h(&v, masks);

    let sigma_first = sigma_schedule(opts, 1);
    let mut trace = Vec::new();
    let mut log = Vec::new();
    let mut prev_norm: Option<f64> = None;
    let mut iterations_run = 0;

    for k in 1..=opts.k_max {
        let x = add_backprojection(&v, masks, &scaled_residual(&resid, &r));
        let sigma = sigma_schedule(opts, k);
        let stage = if k <= opts.k1 { Stage::TvOnly } else { Stage::Full };
        let tv = if opts.tv_anneal && sigma_first > 0.0 {
            TvParams {
                weight: chain.tv.weight * sigma / sigma_first,
                ..chain.tv
            }
        } else {
            chain.tv
        };
        let denoised = match chain.apply(&VideoCube::from_array_unchecked(x), tv, sigma, stage) {
            Ok(d) => d,
            Err(source) => {
                return Err(Error::SolverAborted {
                    iteration: k,
                    partial: Box::new(ReconResult {
                        video: finish(v, &r),
                        residual_trace: trace,
                        iterations_run,
                        denoiser_log: log,
                        dark_pixels,
                    }),
                    source: Box::new(source),
                })
            }
        };
        v = denoised.into_data();
        resid = &y.data - &apply_h(&v, masks);
        let norm = resid.iter().map(|e| e * e).sum::<f64>().sqrt();
        iterations_run = k;
        log.push(chain.stage_names(stage));
        if opts.record_trace {
            trace.push(norm);
        }
        if let Some(prev) = prev_norm {
            let change = if prev > 0.0 {
                (prev - norm).abs() / prev
            } else {
                (prev - norm).abs()
            };
            if change < opts.tol {
                break;
            }
        }
        prev_norm = Some(norm);
    }

    Ok(ReconResult {
        video: finish(v, &r),
        residual_trace: trace,
        iterations_run,
        denoiser_log: log,
        dark_pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::{Secondary, VideoDenoiser};
    use crate::forward::forward_op;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn random_stack(rng: &mut ChaCha8Rng, b: usize, n: usize) -> MaskStack {
        MaskStack::from_masks(Array3::from_shape_simple_fn((b, n, n), || {
            if rng.random::<f64>() < 0.5 { 0.0 } else { rng.random::<f64>() }
        }))
        .unwrap()
    }

    fn random_cube(rng: &mut ChaCha8Rng, b: usize, n: usize) -> VideoCube {
        VideoCube::new(Array3::from_shape_simple_fn((b, n, n), || rng.random::<f64>())).unwrap()
    }

    #[test]
    fn feasible_estimate_is_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = MaskStack::from_masks(Array3::from_shape_simple_fn((3, 6, 6), || {
            0.1 + rng.random::<f64>()
        }).mapv(|v: f64| v.min(1.0)))
        .unwrap();
        // y comes from the same H, so the residual is exactly zero
        let v = VideoCube::new(Array3::from_shape_fn((3, 6, 6), |(k, r, col)| {
            ((k + r + col) % 4) as f64 / 4.0
        }))
        .unwrap();
        let y = forward_op(&v, &c).unwrap();
        let x = gap_x_update(&v, &y, &c).unwrap();
        assert_eq!(x, v);
    }

    #[test]
    fn zero_estimate_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_stack(&mut rng, 4, 5);
        let y = Measurement::clean(Array2::from_shape_simple_fn((5, 5), || rng.random::<f64>()));
        let v = VideoCube::new(Array3::zeros((4, 5, 5))).unwrap();
        let x = gap_x_update(&v, &y, &c).unwrap();
        let r = hht_diag(&c);
        for k in 0..4 {
            for i in 0..5 {
                for j in 0..5 {
                    let expect = if r[[i, j]] > 0.0 {
                        c.mask(k)[[i, j]] * (y.data[[i, j]] / r[[i, j]])
                    } else {
                        0.0
                    };
                    assert_eq!(x.data()[[k, i, j]], expect);
                }
            }
        }
    }

    #[test]
    fn projection_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let c = random_stack(&mut rng, 5, 7);
            let v = random_cube(&mut rng, 5, 7);
            let y = Measurement::clean(Array2::from_shape_simple_fn((7, 7), || rng.random::<f64>()));
            let x = gap_x_update(&v, &y, &c).unwrap();
            let hx = forward_op(&x, &c).unwrap();
            let r = hht_diag(&c);
            let ynorm = y.data.iter().map(|e| e * e).sum::<f64>().sqrt();
            let err = Zip::from(&hx.data)
                .and(&y.data)
                .and(&r)
                .fold(0.0f64, |acc, &a, &b, &rv| if rv > 0.0 { acc + (a - b) * (a - b) } else { acc })
                .sqrt();
            assert!(err <= 1e-9 * ynorm, "{err}");
        }
    }

    #[test]
    fn sigma_schedule_contract() {
        let mut o = SolverOptions {
            lambda0: 0.01,
            xi: 1.0,
            ..SolverOptions::default()
        };
        assert_eq!(sigma_schedule(&o, 1), 0.1);
        assert_eq!(sigma_schedule(&o, 77), 0.1);
        o.xi = 0.97;
        assert_eq!(sigma_schedule(&o, 1), 0.1);
        o.sigma_floor = 0.02;
        let mut last = f64::INFINITY;
        for k in 1..=o.k_max {
            let s = sigma_schedule(&o, k);
            assert!(s <= last && s >= o.sigma_floor);
            last = s;
        }
        assert_eq!(last, 0.02);
    }

    #[test]
    fn exact_recovery_for_invertible_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_cube(&mut rng, 1, 12);
        let c = MaskStack::from_masks(Array3::ones((1, 12, 12))).unwrap();
        let y = forward_op(&x, &c).unwrap();
        let chain = DenoiserChain::tv_only(TvParams {
            weight: 0.0,
            inner_iters: 5,
        });
        let opts = SolverOptions {
            k_max: 1,
            ..SolverOptions::default()
        }
        .gap_tv();
        let res = run_gap(&y, &c, &chain, &opts).unwrap();
        assert_eq!(res.iterations_run, 1);
        assert_eq!(res.video.data(), x.data());
    }

    #[test]
    fn k1_equal_kmax_is_tv_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_stack(&mut rng, 3, 8);
        let x = random_cube(&mut rng, 3, 8);
        let y = forward_op(&x, &c).unwrap();
        let chain = DenoiserChain::with_secondary(TvParams::default(), Secondary::Echo);
        let opts = SolverOptions {
            k_max: 12,
            ..SolverOptions::default()
        }
        .gap_tv();
        let res = run_gap(&y, &c, &chain, &opts).unwrap();
        assert_eq!(res.denoiser_log.len(), 12);
        assert!(res.denoiser_log.iter().all(|l| l == &vec!["tv".to_string()]));
        assert_eq!(res.residual_trace.len(), res.iterations_run);
    }

    struct FailsAt {
        calls: AtomicUsize,
        fail_on: usize,
    }

    impl VideoDenoiser for FailsAt {
        fn name(&self) -> &str {
            "flaky"
        }
        fn denoise(&self, x: &VideoCube, _sigma: f64) -> Result<VideoCube> {
            if self.calls.fetch_add(1, Ordering::SeqCst) + 1 == self.fail_on {
                return Err(Error::PluginError("gpu fell over".into()));
            }
            Ok(x.clone())
        }
    }

    #[test]
    fn plugin_failure_keeps_partial_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = random_stack(&mut rng, 3, 8);
        let y = forward_op(&random_cube(&mut rng, 3, 8), &c).unwrap();
        let chain = DenoiserChain::with_secondary(
            TvParams::default(),
            Secondary::External(Box::new(FailsAt {
                calls: AtomicUsize::new(0),
                fail_on: 3,
            })),
        );
        let opts = SolverOptions {
            k_max: 10,
            k1: 4,
            ..SolverOptions::default()
        };
        match run_gap(&y, &c, &chain, &opts) {
            Err(Error::SolverAborted {
                iteration,
                partial,
                source,
            }) => {
                assert_eq!(iteration, 7);
                assert_eq!(partial.iterations_run, 6);
                assert_eq!(partial.residual_trace.len(), 6);
                assert!(matches!(*source, Error::PluginError(_)));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_options_rejected() {
        let c = MaskStack::from_masks(Array3::ones((1, 4, 4))).unwrap();
        let y = Measurement::clean(Array2::ones((4, 4)));
        let chain = DenoiserChain::tv_only(TvParams::default());
        for opts in [
            SolverOptions { k_max: 0, k1: 0, ..SolverOptions::default() },
            SolverOptions { k1: 200, ..SolverOptions::default() },
            SolverOptions { xi: 0.0, ..SolverOptions::default() },
            SolverOptions { xi: 1.5, ..SolverOptions::default() },
        ] {
            assert!(matches!(run_gap(&y, &c, &chain, &opts), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn tolerance_stops_early() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = random_stack(&mut rng, 2, 8);
        let y = forward_op(&random_cube(&mut rng, 2, 8), &c).unwrap();
        let chain = DenoiserChain::tv_only(TvParams { weight: 0.0, inner_iters: 1 });
        let opts = SolverOptions { tol: 1e-6, ..SolverOptions::default() }.gap_tv();
        let res = run_gap(&y, &c, &chain, &opts).unwrap();
        // identity denoiser: residual is zero from the first iteration on
        assert_eq!(res.iterations_run, 2);
    }

    #[test]
    fn dark_pixels_reconstruct_as_zero() {
        let mut masks = Array3::<f64>::from_elem((2, 4, 4), 0.5);
        masks[[0, 1, 1]] = 0.0;
        masks[[1, 1, 1]] = 0.0;
        let c = MaskStack::from_masks(masks).unwrap();
        let y = Measurement::clean(Array2::from_elem((4, 4), 0.5));
        let res = run_gap(&y, &c, &DenoiserChain::tv_only(TvParams::default()), &SolverOptions {
            k_max: 5,
            k1: 5,
            ..SolverOptions::default()
        })
        .unwrap();
        assert_eq!(res.dark_pixels, 1);
        assert_eq!(res.video.data()[[0, 1, 1]], 0.0);
        assert_eq!(res.video.data()[[1, 1, 1]], 0.0);
    }
}
