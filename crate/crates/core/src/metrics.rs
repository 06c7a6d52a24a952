//! PSNR and SSIM, per frame and averaged over a video.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::forward::VideoCube;

/// Reported PSNR when the two frames are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_dims(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(invalid(format!(
            "frame dims differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

pub fn mse(reference: ArrayView2<f64>, test: ArrayView2<f64>) -> Result<f64> {
    same_dims(&reference, &test)?;
    let n = reference.len() as f64;
    Ok(reference
        .iter()
        .zip(test.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(reference: ArrayView2<f64>, test: ArrayView2<f64>, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(invalid(format!("PSNR peak must be > 0, got {peak}")));
    }
    let m = mse(reference, test)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter over the valid region only.
fn filter_valid(img: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = img.dim();
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for r in 0..h {
        for c in 0..ow {
            rows[[r, c]] = (0..SSIM_WINDOW).map(|t| k[t] * img[[r, c + t]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            out[[r, c]] = (0..SSIM_WINDOW).map(|t| k[t] * rows[[r + t, c]]).sum();
        }
    }
    out
}

/// Mean luminance, contrast and structure components of SSIM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimTerms {
    pub ssim: f64,
    pub luminance: f64,
    pub contrast: f64,
    pub structure: f64,
}

pub fn ssim_terms(reference: ArrayView2<f64>, test: ArrayView2<f64>) -> Result<SsimTerms> {
    same_dims(&reference, &test)?;
    let (h, w) = reference.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid(format!(
            "frame {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let peak = 1.0;
    let c1 = (SSIM_K1 * peak) * (SSIM_K1 * peak);
    let c2 = (SSIM_K2 * peak) * (SSIM_K2 * peak);
    let c3 = c2 / 2.0;
    let k = gaussian_kernel();
    let x = reference.to_owned();
    let y = test.to_owned();
    let mu_x = filter_valid(&x, &k);
    let mu_y = filter_valid(&y, &k);
    let e_xx = filter_valid(&(&x * &x), &k);
    let e_yy = filter_valid(&(&y * &y), &k);
    let e_xy = filter_valid(&(&x * &y), &k);

    let n = mu_x.len() as f64;
    let (mut s_all, mut s_l, mut s_c, mut s_s) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x.as_slice().unwrap()[i], mu_y.as_slice().unwrap()[i]);
        let vx = e_xx.as_slice().unwrap()[i] - mx * mx;
        let vy = e_yy.as_slice().unwrap()[i] - my * my;
        let cxy = e_xy.as_slice().unwrap()[i] - mx * my;
        s_all += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
        let (sx, sy) = (vx.max(0.0).sqrt(), vy.max(0.0).sqrt());
        s_l += (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        s_c += (2.0 * sx * sy + c2) / (vx.max(0.0) + vy.max(0.0) + c2);
        s_s += (cxy + c3) / (sx * sy + c3);
    }
    Ok(SsimTerms {
        ssim: s_all / n,
        luminance: s_l / n,
        contrast: s_c / n,
        structure: s_s / n,
    })
}

/// Mean SSIM with an 11x11 Gaussian window (std 1.5), valid region only.
pub fn ssim(reference: ArrayView2<f64>, test: ArrayView2<f64>) -> Result<f64> {
    Ok(ssim_terms(reference, test)?.ssim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "psnr_frames")]
    pub per_frame_psnr: Vec<f64>,
    #[serde(rename = "ssim_frames")]
    pub per_frame_ssim: Vec<f64>,
    #[serde(rename = "psnr_mean")]
    pub mean_psnr: f64,
    #[serde(rename = "ssim_mean")]
    pub mean_ssim: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn evaluate(reference: &VideoCube, test: &VideoCube) -> Result<MetricReport> {
    if reference.data().dim() != test.data().dim() {
        return Err(invalid(format!(
            "video dims differ: {:?} vs {:?}",
            reference.data().dim(),
            test.data().dim()
        )));
    }
    let mut per_frame_psnr = Vec::with_capacity(reference.frames());
    let mut per_frame_ssim = Vec::with_capacity(reference.frames());
    for k in 0..reference.frames() {
        per_frame_psnr.push(psnr(reference.frame(k), test.frame(k), 1.0)?);
        per_frame_ssim.push(ssim(reference.frame(k), test.frame(k))?);
    }
    Ok(MetricReport {
        mean_psnr: mean(&per_frame_psnr),
        mean_ssim: mean(&per_frame_ssim),
        per_frame_psnr,
        per_frame_ssim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(seed: u64, h: usize, w: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((h, w), || rng.random::<f64>())
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Array2::<f64>::zeros((8, 8));
        assert_eq!(psnr(a.view(), a.view(), 1.0).unwrap(), PSNR_CAP_DB);
        let b = Array2::from_elem((8, 8), 0.1);
        assert!((psnr(a.view(), b.view(), 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(a.view(), b.view(), 0.0).is_err());
        assert!(psnr(a.view(), Array2::zeros((8, 7)).view(), 1.0).is_err());
    }

    #[test]
    fn psnr_matches_independent_formula() {
        let a = random_frame(1, 17, 23);
        let b = random_frame(2, 17, 23);
        // second route: accumulate squared error over explicit indices
        let mut acc = 0.0;
        for r in 0..17 {
            for c in 0..23 {
                let d = a[[r, c]] - b[[r, c]];
                acc += d * d;
            }
        }
        let expect = 20.0 * (1.0 / (acc / (17.0 * 23.0)).sqrt()).log10();
        assert!((psnr(a.view(), b.view(), 1.0).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let a = random_frame(3, 32, 40);
        assert_eq!(ssim(a.view(), a.view()).unwrap(), 1.0);
    }

    #[test]
    fn ssim_anticorrelated_is_negative() {
        let a = random_frame(4, 32, 32);
        let b = a.mapv(|v| 1.0 - v);
        assert!(ssim(a.view(), b.view()).unwrap() < 0.0);
    }

    #[test]
    fn ssim_mean_shift_keeps_structure() {
        let a = random_frame(5, 32, 32).mapv(|v| 0.5 * v);
        let b = a.mapv(|v| v + 0.5);
        let t = ssim_terms(a.view(), b.view()).unwrap();
        assert!(t.ssim < 1.0);
        assert!((t.structure - 1.0).abs() < 1e-9, "{}", t.structure);
        assert!((t.contrast - 1.0).abs() < 1e-9);
        assert!(t.luminance < 1.0);
    }

    #[test]
    fn ssim_rejects_small_frames() {
        let a = Array2::<f64>::zeros((10, 30));
        assert!(ssim(a.view(), a.view()).is_err());
    }

    #[test]
    fn evaluate_averages_frames() {
        let mut data = Array3::<f64>::zeros((4, 16, 16));
        for (k, mut f) in data.outer_iter_mut().enumerate() {
            f.assign(&random_frame(10 + k as u64, 16, 16));
        }
        let r = VideoCube::new(data.clone()).unwrap();
        let same = evaluate(&r, &r).unwrap();
        assert_eq!(same.mean_psnr, 99.0);
        assert_eq!(same.mean_ssim, 1.0);

        let mut corrupted = data;
        corrupted.index_axis_mut(ndarray::Axis(0), 2).mapv_inplace(|v| v + 0.1);
        let t = VideoCube::new(corrupted).unwrap();
        let rep = evaluate(&r, &t).unwrap();
        let bad = psnr(r.frame(2), t.frame(2), 1.0).unwrap();
        assert!((rep.mean_psnr - (99.0 * 3.0 + bad) / 4.0).abs() < 1e-12);
        assert_eq!(rep.mean_psnr, mean(&rep.per_frame_psnr));
        assert_eq!(rep.mean_ssim, mean(&rep.per_frame_ssim));
        assert!(rep.per_frame_ssim.iter().all(|s| (-1.0..=1.0).contains(s)));
    }

    #[test]
    fn report_json_keys() {
        let rep = MetricReport {
            per_frame_psnr: vec![30.0],
            per_frame_ssim: vec![0.9],
            mean_psnr: 30.0,
            mean_ssim: 0.9,
        };
        let v = serde_json::to_value(&rep).unwrap();
        for key in ["psnr_mean", "ssim_mean", "psnr_frames", "ssim_frames"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    proptest! {
        #[test]
        fn psnr_symmetric_and_peak_scaled(seed in 0u64..500, scale in 0.1f64..10.0) {
            let a = random_frame(seed, 12, 12);
            let b = random_frame(seed + 1000, 12, 12);
            let ab = psnr(a.view(), b.view(), 1.0).unwrap();
            prop_assert_eq!(ab, psnr(b.view(), a.view(), 1.0).unwrap());
            let scaled = psnr(a.mapv(|v| v * scale).view(), b.mapv(|v| v * scale).view(), scale).unwrap();
            prop_assert!((scaled - ab).abs() < 1e-9);
        }

        #[test]
        fn ssim_symmetric(seed in 0u64..200) {
            let a = random_frame(seed, 14, 14);
            let b = random_frame(seed + 7, 14, 14);
            let ab = ssim(a.view(), b.view()).unwrap();
            let ba = ssim(b.view(), a.view()).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert_eq!(ssim(a.view(), a.view()).unwrap(), 1.0);
        }
    }
}
