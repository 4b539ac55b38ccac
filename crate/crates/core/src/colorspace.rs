//! HSL lightness.

use crate::error::Result;
use crate::image::{ImageRgb, Plane};

/// The L channel of HSL, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LightnessChannel(Plane);

impl LightnessChannel {
    pub fn plane(&self) -> &Plane {
        &self.0
    }

    pub fn into_plane(self) -> Plane {
        self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }
}

/// `(max(R, G, B) + min(R, G, B)) / 2` for one pixel.
#[inline]
pub fn pixel_lightness(px: &[f64]) -> f64 {
    let hi = px[0].max(px[1]).max(px[2]);
    let lo = px[0].min(px[1]).min(px[2]);
    0.5 * (hi + lo)
}

pub fn lightness(img: &ImageRgb) -> Result<LightnessChannel> {
    img.ensure_unit_range("lightness input")?;
    let data = img.pixels().map(pixel_lightness).collect();
    Ok(LightnessChannel(Plane::new(img.height(), img.width(), data)?))
}

/// HSL saturation of one pixel; only used to characterise generated textures.
pub fn pixel_saturation(px: &[f64]) -> f64 {
    let hi = px[0].max(px[1]).max(px[2]);
    let lo = px[0].min(px[1]).min(px[2]);
    let l = 0.5 * (hi + lo);
    let d = hi - lo;
    if d <= 0.0 {
        0.0
    } else {
        d / (1.0 - (2.0 * l - 1.0).abs()).max(1e-12)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(pixel_lightness(&[1.0, 0.0, 0.0]), 0.5);
        assert_eq!(pixel_lightness(&[0.37, 0.37, 0.37]), 0.37);
        assert!((pixel_lightness(&[0.2, 0.6, 0.4]) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn rejects_out_of_range() {
        let img = ImageRgb::filled(2, 2, 1.2);
        assert!(lightness(&img).is_err());
    }

    proptest! {
        #[test]
        fn range_and_permutation(r in 0.0..=1.0f64, g in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            let l = pixel_lightness(&[r, g, b]);
            prop_assert!((0.0..=1.0).contains(&l));
            for p in [[r, b, g], [g, r, b], [g, b, r], [b, r, g], [b, g, r]] {
                prop_assert_eq!(pixel_lightness(&p), l);
            }
        }

        #[test]
        fn constant_shift(r in 0.0..=0.5f64, g in 0.0..=0.5f64, b in 0.0..=0.5f64, c in 0.0..=0.5f64) {
            let l0 = pixel_lightness(&[r, g, b]);
            let l1 = pixel_lightness(&[r + c, g + c, b + c]);
            prop_assert!((l1 - l0 - c).abs() < 1e-12);
        }
    }
}
