//! Dark-channel-prior dehazing with guided-filter refinement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageRgb, Plane};

const MIN_AIRLIGHT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcpConfig {
    /// Side of the square minimum filter.
    pub patch: usize,
    pub omega: f64,
    pub t_floor: f64,
    /// Fraction of brightest dark-channel pixels averaged into the airlight.
    pub top_fraction: f64,
    pub guided_filter_radius: usize,
    pub guided_filter_eps: f64,
}

impl Default for DcpConfig {
    fn default() -> Self {
        Self {
            patch: 15,
            omega: 0.95,
            t_floor: 0.1,
            top_fraction: 0.001,
            guided_filter_radius: 40,
            guided_filter_eps: 1e-3,
        }
    }
}

impl DcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::Config("dcp patch must be positive".into()));
        }
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(Error::Config(format!("dcp omega {} outside (0, 1]", self.omega)));
        }
        if !(self.t_floor > 0.0 && self.t_floor < 1.0) {
            return Err(Error::Config(format!("dcp t_floor {} outside (0, 1)", self.t_floor)));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::Config(format!("dcp top_fraction {}", self.top_fraction)));
        }
        if !(self.guided_filter_eps > 0.0) {
            return Err(Error::Config("guided filter eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DcpOutput {
    pub image: ImageRgb,
    pub airlight: [f64; 3],
    /// Refined transmission actually used.
    pub transmission: Plane,
    /// Set when the input carries no usable airlight (all black); the
    /// output is then the input unchanged.
    pub degenerate: bool,
}

/// Minimum over a `patch x patch` window clipped at the borders.
fn min_filter(src: &Plane, patch: usize) -> Plane {
    let (h, w) = src.dims();
    let r = patch / 2;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            rows[y * w + x] = (lo..=hi).map(|i| src.get(y, i)).fold(f64::INFINITY, f64::min);
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|j| rows[j * w + x]).fold(f64::INFINITY, f64::min);
        }
    }
    Plane::new(h, w, out).expect("same dims")
}

/// Per-pixel channel minimum followed by a `patch x patch` minimum filter.
pub fn dark_channel(img: &ImageRgb, patch: usize) -> Plane {
    let (h, w) = img.dims();
    let mins = img.pixels().map(|p| p[0].min(p[1]).min(p[2])).collect();
    min_filter(&Plane::new(h, w, mins).expect("same dims"), patch)
}

/// `1 - omega * dark(I / A)` before refinement.
pub fn raw_transmission(img: &ImageRgb, a: [f64; 3], cfg: &DcpConfig) -> Plane {
    let (h, w) = img.dims();
    let a = a.map(|v| v.max(MIN_AIRLIGHT));
    let mins = img
        .pixels()
        .map(|p| (p[0] / a[0]).min(p[1] / a[1]).min(p[2] / a[2]))
        .collect();
    let dark = min_filter(&Plane::new(h, w, mins).expect("same dims"), cfg.patch);
    dark.map(|d| 1.0 - cfg.omega * d)
}

/// Box mean over a `(2r+1)^2` window clipped at the borders.
fn box_mean(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut integral = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += src[y * w + x];
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1]
                - integral[y1 * (w + 1) + x0]
                + integral[y0 * (w + 1) + x0];
            out[y * w + x] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

/// Edge-preserving smoothing of `p` steered by the grey-level `guide`.
pub fn guided_filter(guide: &Plane, p: &Plane, radius: usize, eps: f64) -> Result<Plane> {
    if guide.dims() != p.dims() {
        return Err(Error::Shape(format!(
            "guided filter: guide {:?} vs input {:?}",
            guide.dims(),
            p.dims()
        )));
    }
    let (h, w) = p.dims();
    let (i, q) = (guide.data(), p.data());
    let ip: Vec<f64> = i.iter().zip(q).map(|(a, b)| a * b).collect();
    let ii: Vec<f64> = i.iter().map(|a| a * a).collect();
    let mean_i = box_mean(i, h, w, radius);
    let mean_p = box_mean(q, h, w, radius);
    let mean_ip = box_mean(&ip, h, w, radius);
    let mean_ii = box_mean(&ii, h, w, radius);
    let mut a = vec![0.0; h * w];
    let mut b = vec![0.0; h * w];
    for k in 0..h * w {
        let cov = mean_ip[k] - mean_i[k] * mean_p[k];
        let var = mean_ii[k] - mean_i[k] * mean_i[k];
        a[k] = cov / (var + eps);
        b[k] = mean_p[k] - a[k] * mean_i[k];
    }
    let mean_a = box_mean(&a, h, w, radius);
    let mean_b = box_mean(&b, h, w, radius);
    let out = (0..h * w).map(|k| mean_a[k] * i[k] + mean_b[k]).collect();
    Plane::new(h, w, out)
}

fn estimate_airlight(img: &ImageRgb, dark: &Plane, top_fraction: f64) -> [f64; 3] {
    let n = dark.data().len();
    let count = ((n as f64 * top_fraction).round() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let intensity = |k: usize| img.data()[k * 3..k * 3 + 3].iter().sum::<f64>();
    // haziest first; ties go to the brighter pixel, then to the earlier one
    order.sort_by(|&p, &q| {
        dark.data()[q]
            .total_cmp(&dark.data()[p])
            .then(intensity(q).total_cmp(&intensity(p)))
            .then(p.cmp(&q))
    });
    let mut a = [0.0; 3];
    for &k in &order[..count] {
        let px = &img.data()[k * 3..k * 3 + 3];
        for c in 0..3 {
            a[c] += px[c];
        }
    }
    a.map(|v| v / count as f64)
}

/// Dark-channel-prior restoration `J = (I - A (1 - t)) / max(t, t_floor)`.
pub fn dcp_desmoke(img: &ImageRgb, cfg: &DcpConfig) -> Result<DcpOutput> {
    cfg.validate()?;
    img.ensure_unit_range("dcp input")?;
    let (h, w) = img.dims();
    let dark = dark_channel(img, cfg.patch);
    let a = estimate_airlight(img, &dark, cfg.top_fraction);
    if a.iter().all(|&v| v <= MIN_AIRLIGHT) {
        log::warn!("dcp: degenerate airlight {a:?}; returning the input unchanged");
        return Ok(DcpOutput {
            image: img.clone(),
            airlight: a,
            transmission: Plane::filled(h, w, 1.0),
            degenerate: true,
        });
    }
    let raw = raw_transmission(img, a, cfg);
    let gray = Plane::new(
        h,
        w,
        img.pixels().map(|p| (p[0] + p[1] + p[2]) / 3.0).collect(),
    )?;
    let t = guided_filter(&gray, &raw, cfg.guided_filter_radius, cfg.guided_filter_eps)?;
    let mut out = Vec::with_capacity(h * w * 3);
    for (px, &tv) in img.pixels().zip(t.data()) {
        let tt = tv.clamp(cfg.t_floor, 1.0);
        for c in 0..3 {
            out.push(((px[c] - a[c] * (1.0 - tt)) / tt).clamp(0.0, 1.0));
        }
    }
    Ok(DcpOutput {
        image: ImageRgb::new(h, w, out)?,
        airlight: a,
        transmission: t,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::{compose, AtmosphericLight, TransmissionMap};

    #[test]
    fn white_image_has_unit_dark_channel() {
        let img = ImageRgb::filled(20, 20, 1.0);
        let cfg = DcpConfig::default();
        let dark = dark_channel(&img, cfg.patch);
        assert!(dark.data().iter().all(|&v| v == 1.0));
        let t = raw_transmission(&img, [1.0; 3], &cfg);
        assert!(t.data().iter().all(|&v| (v - 0.05).abs() < 1e-15));
    }

    #[test]
    fn haze_free_image_is_a_fixed_point() {
        // one channel is zero everywhere, so the dark channel vanishes
        let img = ImageRgb::from_fn(32, 32, |y, x| [0.0, x as f64 / 31.0, y as f64 / 31.0]);
        let out = dcp_desmoke(&img, &DcpConfig::default()).unwrap();
        assert!(!out.degenerate);
        assert_eq!(out.image, img);
    }

    #[test]
    fn black_image_is_degenerate() {
        let img = ImageRgb::filled(16, 16, 0.0);
        let out = dcp_desmoke(&img, &DcpConfig::default()).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.image, img);
    }

    #[test]
    fn guided_filter_keeps_constants() {
        let guide = Plane::new(9, 7, (0..63).map(|v| (v % 5) as f64 / 4.0).collect()).unwrap();
        let p = Plane::filled(9, 7, 0.625);
        let q = guided_filter(&guide, &p, 2, 1e-3).unwrap();
        assert!(q.data().iter().all(|&v| (v - 0.625).abs() < 1e-12));
    }

    #[test]
    fn box_mean_matches_brute_force() {
        let (h, w, r) = (6, 9, 2);
        let src: Vec<f64> = (0..h * w).map(|v| ((v * 7) % 11) as f64).collect();
        let fast = box_mean(&src, h, w, r);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                let mut n = 0;
                for j in y.saturating_sub(r)..=(y + r).min(h - 1) {
                    for i in x.saturating_sub(r)..=(x + r).min(w - 1) {
                        s += src[j * w + i];
                        n += 1;
                    }
                }
                assert!((fast[y * w + x] - s / n as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_haze_is_reduced() {
        // textured scene with one bright, colourless region
        let clean = ImageRgb::from_fn(48, 48, |y, x| {
            if x < 10 && y < 10 {
                [0.95; 3]
            } else {
                [0.6 * (x % 7) as f64 / 6.0, 0.3, 0.5 * (y % 5) as f64 / 4.0]
            }
        });
        let t = TransmissionMap::uniform(48, 48, 0.6).unwrap();
        let hazy = compose(&clean, &t, AtmosphericLight::WHITE).unwrap();
        let out = dcp_desmoke(&hazy, &DcpConfig::default()).unwrap();
        let err = |a: &ImageRgb| {
            a.data().iter().zip(clean.data()).map(|(p, q)| (p - q).abs()).sum::<f64>()
        };
        assert!(err(&out.image) < err(&hazy));
    }
}
