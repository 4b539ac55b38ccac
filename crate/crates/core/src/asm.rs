//! Atmospheric scattering model algebra.
//!
//! Forward image formation `I = J t + A (1 - t)`, the residual rewrite
//! `J = I + K I + B I_s + eps` with `K = 1/t - 1`, `B = -1/t`, and the
//! exponential field transform `t = exp(-t~)` that keeps transmission inside
//! `(0, 1]`.
//!
//! Intermediate arithmetic is never clamped; only the final outputs of
//! [`compose`] and [`reconstruct`] are. The unclamped variants exist so the
//! round-trip identity can be checked exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageRgb, Plane};

/// Smallest transmission accepted by the analytic [`kb_from_t`] path.
pub const T_MIN: f64 = 1e-3;

/// Per-pixel transmission, every value in `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionMap(Plane);

impl TransmissionMap {
    pub fn new(plane: Plane) -> Result<Self> {
        if let Some(v) = plane
            .data()
            .iter()
            .find(|v| !(v.is_finite() && **v > 0.0 && **v <= 1.0))
        {
            return Err(Error::Domain(format!("transmission {v} outside (0, 1]")));
        }
        Ok(Self(plane))
    }

    pub fn uniform(height: usize, width: usize, t: f64) -> Result<Self> {
        Self::new(Plane::filled(height, width, t))
    }

    pub fn plane(&self) -> &Plane {
        &self.0
    }

    pub fn into_plane(self) -> Plane {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }
}

/// Global airlight, one value per channel in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtmosphericLight([f64; 3]);

impl AtmosphericLight {
    pub const WHITE: AtmosphericLight = AtmosphericLight([1.0; 3]);

    pub fn new(a: [f64; 3]) -> Result<Self> {
        if a.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain(format!("atmospheric light {a:?} outside [0, 1]")));
        }
        Ok(Self(a))
    }

    pub fn gray(a: f64) -> Result<Self> {
        Self::new([a; 3])
    }

    pub fn channels(&self) -> [f64; 3] {
        self.0
    }
}

/// `K` and `B` fields of the residual rewrite, interleaved `H x W x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualCoefficients {
    height: usize,
    width: usize,
    k: Vec<f64>,
    b: Vec<f64>,
}

impl ResidualCoefficients {
    pub fn new(height: usize, width: usize, k: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let n = height * width * 3;
        if k.len() != n || b.len() != n {
            return Err(Error::Shape(format!(
                "coefficient lengths {}/{} for {height}x{width}x3",
                k.len(),
                b.len()
            )));
        }
        if k.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite residual coefficient".into()));
        }
        Ok(Self {
            height,
            width,
            k,
            b,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        let n = height * width * 3;
        Self {
            height,
            width,
            k: vec![0.0; n],
            b: vec![0.0; n],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn k(&self) -> &[f64] {
        &self.k
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }
}

/// The additive smoke layer `A (1 - t)`, samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SmokeMaskImage(ImageRgb);

impl SmokeMaskImage {
    pub fn new(img: ImageRgb) -> Result<Self> {
        img.ensure_unit_range("smoke mask")?;
        Ok(Self(img))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(ImageRgb::filled(height, width, 0.0))
    }

    pub fn image(&self) -> &ImageRgb {
        &self.0
    }

    pub fn into_image(self) -> ImageRgb {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }
}

/// The additive background term `eps`, one value per channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionBias([f64; 3]);

impl ReconstructionBias {
    pub const ZERO: ReconstructionBias = ReconstructionBias([0.0; 3]);

    pub fn new(eps: [f64; 3]) -> Result<Self> {
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite reconstruction bias".into()));
        }
        Ok(Self(eps))
    }

    pub fn channels(&self) -> [f64; 3] {
        self.0
    }
}

fn check_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// `clean * t + a * (1 - t)` per channel, before clamping.
pub fn compose_unclamped(
    clean: &ImageRgb,
    t: &TransmissionMap,
    a: AtmosphericLight,
) -> Result<ImageRgb> {
    check_dims(clean.dims(), t.dims(), "compose")?;
    let a = a.channels();
    let mut out = clean.clone();
    for (px, &tv) in out.data_mut().chunks_exact_mut(3).zip(t.values()) {
        for c in 0..3 {
            px[c] = px[c] * tv + a[c] * (1.0 - tv);
        }
    }
    Ok(out)
}

/// Forward scattering model, clamped to `[0, 1]`.
pub fn compose(clean: &ImageRgb, t: &TransmissionMap, a: AtmosphericLight) -> Result<ImageRgb> {
    Ok(compose_unclamped(clean, t, a)?.clamped())
}

/// The smoke layer `a * (1 - t)` that [`compose`] adds.
pub fn smoke_mask_from_t(t: &TransmissionMap, a: AtmosphericLight) -> SmokeMaskImage {
    let (h, w) = t.dims();
    let a = a.channels();
    let data = t
        .values()
        .iter()
        .flat_map(|&tv| [a[0] * (1.0 - tv), a[1] * (1.0 - tv), a[2] * (1.0 - tv)])
        .collect();
    SmokeMaskImage(ImageRgb::new(h, w, data).expect("length matches"))
}

/// Analytic residual coefficients `k = 1/t - 1`, `b = -1/t`.
pub fn kb_from_t(t: &TransmissionMap) -> Result<ResidualCoefficients> {
    let min = t.plane().min();
    if min < T_MIN {
        return Err(Error::Singularity {
            min,
            threshold: T_MIN,
        });
    }
    let (h, w) = t.dims();
    let n = h * w * 3;
    let mut k = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for &tv in t.values() {
        let inv = 1.0 / tv;
        for _ in 0..3 {
            k.push(inv - 1.0);
            b.push(-inv);
        }
    }
    Ok(ResidualCoefficients {
        height: h,
        width: w,
        k,
        b,
    })
}

/// `i + k i + b mask + eps` without clamping.
pub fn reconstruct_unclamped(
    i: &ImageRgb,
    coeffs: &ResidualCoefficients,
    mask: &SmokeMaskImage,
    bias: ReconstructionBias,
) -> Result<ImageRgb> {
    check_dims(i.dims(), coeffs.dims(), "reconstruct coefficients")?;
    check_dims(i.dims(), mask.dims(), "reconstruct mask")?;
    let eps = bias.channels();
    let mut out = i.clone();
    let m = mask.image().data();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        *v = *v + coeffs.k[idx] * *v + coeffs.b[idx] * m[idx] + eps[idx % 3];
    }
    Ok(out)
}

/// Residual reconstruction, clamped to `[0, 1]`.
pub fn reconstruct(
    i: &ImageRgb,
    coeffs: &ResidualCoefficients,
    mask: &SmokeMaskImage,
    bias: ReconstructionBias,
) -> Result<ImageRgb> {
    Ok(reconstruct_unclamped(i, coeffs, mask, bias)?.clamped())
}

/// `t = exp(-t~)` for a non-negative field.
pub fn field_transform(t_tilde: &Plane) -> Result<TransmissionMap> {
    if let Some(v) = t_tilde
        .data()
        .iter()
        .find(|v| !(v.is_finite() && **v >= 0.0))
    {
        return Err(Error::Domain(format!(
            "field value {v} must be finite and non-negative"
        )));
    }
    let t = t_tilde.map(|v| (-v).exp());
    // exp underflows to zero past ~745; keep the (0, 1] contract.
    let t = t.map(|v| v.max(f64::MIN_POSITIVE));
    Ok(TransmissionMap(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_img(v: f64) -> ImageRgb {
        ImageRgb::filled(4, 4, v)
    }

    fn t_of(v: f64) -> TransmissionMap {
        TransmissionMap::uniform(4, 4, v).unwrap()
    }

    fn all_close(img: &ImageRgb, v: f64, tol: f64) -> bool {
        img.data().iter().all(|x| (x - v).abs() <= tol)
    }

    #[test]
    fn compose_examples() {
        let clean = ImageRgb::from_fn(4, 4, |y, x| [y as f64 / 4.0, x as f64 / 4.0, 0.3]);
        let out = compose(&clean, &t_of(1.0), AtmosphericLight::WHITE).unwrap();
        assert_eq!(out, clean);

        let out = compose(&uniform_img(0.4), &t_of(0.5), AtmosphericLight::gray(1.0).unwrap()).unwrap();
        assert!(all_close(&out, 0.7, 1e-15));

        let out = compose(&uniform_img(0.0), &t_of(0.25), AtmosphericLight::gray(0.8).unwrap()).unwrap();
        assert!(all_close(&out, 0.6, 1e-15));
    }

    #[test]
    fn compose_rejects_bad_inputs() {
        let clean = ImageRgb::filled(4, 5, 0.5);
        assert!(matches!(
            compose(&clean, &t_of(0.5), AtmosphericLight::WHITE),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            TransmissionMap::uniform(4, 4, 0.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            TransmissionMap::uniform(4, 4, 1.5),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn smoke_mask_examples() {
        let m = smoke_mask_from_t(&t_of(1.0), AtmosphericLight::WHITE);
        assert!(all_close(m.image(), 0.0, 0.0));
        let m = smoke_mask_from_t(&t_of(0.5), AtmosphericLight::WHITE);
        assert!(all_close(m.image(), 0.5, 0.0));
        let m = smoke_mask_from_t(&t_of(0.9), AtmosphericLight::gray(0.8).unwrap());
        assert!(all_close(m.image(), 0.08, 1e-15));
    }

    #[test]
    fn kb_examples() {
        for (t, k, b) in [(0.5, 1.0, -2.0), (1.0, 0.0, -1.0), (0.25, 3.0, -4.0)] {
            let c = kb_from_t(&t_of(t)).unwrap();
            assert!(c.k().iter().all(|&v| v == k));
            assert!(c.b().iter().all(|&v| v == b));
            assert!(c.k().iter().zip(c.b()).all(|(k, b)| *k == -*b - 1.0));
        }
    }

    #[test]
    fn kb_rejects_singular_transmission() {
        let mut p = Plane::filled(4, 4, 0.5);
        p.data_mut()[5] = 5e-4;
        let t = TransmissionMap::new(p).unwrap();
        match kb_from_t(&t) {
            Err(Error::Singularity { min, threshold }) => {
                assert_eq!(min, 5e-4);
                assert_eq!(threshold, T_MIN);
            }
            other => panic!("expected singularity error, got {other:?}"),
        }
    }

    #[test]
    fn reconstruct_identity_and_inverse() {
        let i = ImageRgb::from_fn(4, 4, |y, x| [0.1 * y as f64, 0.05 * x as f64, 0.9]);
        let mut coeffs = ResidualCoefficients::zeros(4, 4);
        coeffs.b.iter_mut().for_each(|b| *b = -3.7);
        let out = reconstruct(&i, &coeffs, &SmokeMaskImage::zeros(4, 4), ReconstructionBias::ZERO).unwrap();
        assert_eq!(out, i);

        let t = t_of(0.5);
        let a = AtmosphericLight::WHITE;
        let out = reconstruct(
            &uniform_img(0.7),
            &kb_from_t(&t).unwrap(),
            &smoke_mask_from_t(&t, a),
            ReconstructionBias::ZERO,
        )
        .unwrap();
        assert!(all_close(&out, 0.4, 1e-12));
    }

    #[test]
    fn field_transform_examples() {
        let t = field_transform(&Plane::filled(2, 2, 0.0)).unwrap();
        assert!(t.values().iter().all(|&v| v == 1.0));
        let t = field_transform(&Plane::filled(2, 2, std::f64::consts::LN_2)).unwrap();
        assert!(t.values().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let t = field_transform(&Plane::filled(2, 2, 10.0)).unwrap();
        assert!(t.values().iter().all(|&v| v > 0.0 && (v - 4.54e-5).abs() < 1e-7));
        assert!(field_transform(&Plane::filled(2, 2, -0.1)).is_err());
        let t = field_transform(&Plane::filled(2, 2, 1e4)).unwrap();
        assert!(t.values().iter().all(|&v| v > 0.0));
    }
}
