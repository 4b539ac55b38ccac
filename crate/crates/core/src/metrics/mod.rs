//! Full-reference image quality metrics, the dark-channel-prior baseline
//! and evaluation reports.

mod dcp;
mod report;

use crate::error::{Error, Result};
use crate::image::ImageRgb;

pub use dcp::{dark_channel, dcp_desmoke, guided_filter, raw_transmission, DcpConfig, DcpOutput};
pub use report::{evaluate, evaluate_images, Aggregate, EvalReport, Failure, SampleRow, REPORT_SCHEMA_VERSION};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair(a: &ImageRgb, b: &ImageRgb) -> Result<()> {
    a.ensure_same_shape(b, "metric inputs")
}

/// Neumaier summation; a constant error image sums to its correctly rounded
/// total, so its mean is the per-pixel error itself.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + comp
}

/// Peak signal-to-noise ratio in dB with a peak of 1; identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.data().len() as f64;
    let mse = compensated_sum(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y))) / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter keeping only fully covered positions.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over an 11x11 Gaussian window (sigma 1.5),
/// `K1 = 0.01`, `K2 = 0.03`, data range 1, computed per channel and averaged.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_kernel();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for c in 0..3 {
        let x = a.channel(c);
        let y = b.channel(c);
        let (x, y) = (x.data(), y.data());
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(x, h, w, &k);
        let my = filter_valid(y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (mu_x, mu_y) = (mx[i], my[i]);
            let vx = sxx[i] - mu_x * mu_x;
            let vy = syy[i] - mu_y * mu_y;
            let cov = sxy[i] - mu_x * mu_y;
            let num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2);
            let den = (mu_x * mu_x + mu_y * mu_y + c1) * (vx + vy + c2);
            sum += num / den;
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> ImageRgb {
        ImageRgb::from_fn(h, w, |y, x| {
            [
                0.1 + 0.5 * x as f64 / w as f64,
                0.2 + 0.4 * y as f64 / h as f64,
                0.3 + 0.2 * ((x + y) % 5) as f64 / 5.0,
            ]
        })
    }

    #[test]
    fn psnr_examples() {
        let a = ramp(16, 16);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let zero = ImageRgb::filled(8, 8, 0.0);
        let tenth = ImageRgb::filled(8, 8, 0.1);
        assert_eq!(psnr(&zero, &tenth).unwrap(), 20.0);
        assert_eq!(psnr(&ImageRgb::filled(16, 16, 0.0), &ImageRgb::filled(16, 16, 0.1)).unwrap(), 20.0);
        let hundredth = ImageRgb::filled(8, 8, 0.01);
        assert!((psnr(&zero, &hundredth).unwrap() - 40.0).abs() < 1e-12);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &ramp(16, 12)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = ramp(24, 20);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        assert!(ssim(&ImageRgb::filled(10, 30, 0.5), &ImageRgb::filled(10, 30, 0.5)).is_err());
    }

    #[test]
    fn ssim_of_constant_images_is_the_luminance_term() {
        let (p, q) = (0.2, 0.7);
        let a = ImageRgb::filled(16, 16, p);
        let b = ImageRgb::filled(16, 16, q);
        let c1 = 0.01f64 * 0.01;
        // variances and covariance vanish, so the contrast-structure term is c2 / c2
        let expected = (2.0 * p * q + c1) / (p * p + q * q + c1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    fn image_strategy() -> impl Strategy<Value = (ImageRgb, ImageRgb)> {
        prop::collection::vec(0.0f64..=1.0, 2 * 12 * 13 * 3).prop_map(|v| {
            let (x, y) = v.split_at(12 * 13 * 3);
            (
                ImageRgb::new(12, 13, x.to_vec()).unwrap(),
                ImageRgb::new(12, 13, y.to_vec()).unwrap(),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn metrics_are_symmetric((a, b) in image_strategy()) {
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            let (s, t) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            prop_assert!((s - t).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        }
    }
}
