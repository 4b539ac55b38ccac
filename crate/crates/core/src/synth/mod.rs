//! Procedural smoke synthesis.
//!
//! Heterogeneous plumes come from multi-octave value noise mapped to a
//! non-negative optical depth `t~`, scaled per density level, and pushed
//! through `t = exp(-t~)`. Smoke is composited with a white airlight.

mod dataset;
pub mod noise;
mod texture;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::asm::{self, AtmosphericLight, SmokeMaskImage, TransmissionMap};
use crate::error::{Error, Result};
use crate::image::{ImageRgb, Plane};
use noise::{hash_words, Fbm};

pub use dataset::{
    build_dataset, build_dataset_from_images, load_manifest, BuildOptions, DatasetManifest,
    LoadedSample, SampleRecord, Split, IMAGE_EXTENSIONS, MANIFEST_FILE, MANIFEST_VERSION,
};
pub use texture::generate_texture_corpus;

/// Airlight used for every synthetic sample.
pub const A_SYNTH: AtmosphericLight = AtmosphericLight::WHITE;

/// Smallest image side accepted by [`generate_transmission`].
pub const MIN_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityLevel {
    Light,
    Medium,
    Heavy,
}

impl DensityLevel {
    pub const ALL: [DensityLevel; 3] = [DensityLevel::Light, DensityLevel::Medium, DensityLevel::Heavy];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DensityLevel::Light => "light",
            DensityLevel::Medium => "medium",
            DensityLevel::Heavy => "heavy",
        }
    }
}

impl fmt::Display for DensityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DensityLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "light" => Ok(DensityLevel::Light),
            "medium" => Ok(DensityLevel::Medium),
            "heavy" => Ok(DensityLevel::Heavy),
            other => Err(Error::Config(format!("unknown density level {other:?}"))),
        }
    }
}

/// Free parameters of the plume generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmokeParams {
    /// Optical-depth amplitude per density level.
    pub amplitudes: [f64; 3],
    /// Global multiplier on every amplitude; zero disables smoke entirely.
    pub amplitude_scale: f64,
    /// Lattice cells across the shorter image side for the first octave.
    pub base_cells: f64,
    pub octaves: u32,
    pub persistence: f64,
    /// Noise level below which a pixel is smoke-free.
    pub plume_low: f64,
    /// Noise level at which a plume reaches full depth.
    pub plume_high: f64,
}

impl Default for SmokeParams {
    fn default() -> Self {
        Self {
            amplitudes: [0.35, 0.8, 1.5],
            amplitude_scale: 1.0,
            base_cells: 4.0,
            octaves: 4,
            persistence: 0.5,
            plume_low: 0.3,
            plume_high: 0.7,
        }
    }
}

impl SmokeParams {
    pub fn amplitude(&self, density: DensityLevel) -> f64 {
        self.amplitudes[density.index()] * self.amplitude_scale
    }

    /// Lowest transmission the generator can emit for `density`.
    pub fn t_floor(&self, density: DensityLevel) -> f64 {
        (-self.amplitude(density)).exp()
    }
}

fn smoothstep(lo: f64, hi: f64, x: f64) -> f64 {
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Deterministic plume transmission for `(seed, density, size)` with default parameters.
pub fn generate_transmission(
    seed: u64,
    density: DensityLevel,
    size: (usize, usize),
) -> Result<TransmissionMap> {
    generate_transmission_with(seed, density, size, &SmokeParams::default())
}

pub fn generate_transmission_with(
    seed: u64,
    density: DensityLevel,
    size: (usize, usize),
    params: &SmokeParams,
) -> Result<TransmissionMap> {
    let (h, w) = size;
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::Domain(format!(
            "transmission size {h}x{w} below the {MIN_SIDE}x{MIN_SIDE} minimum"
        )));
    }
    let fbm = Fbm {
        octaves: params.octaves,
        persistence: params.persistence,
        lacunarity: 2.0,
    };
    let cell = h.min(w) as f64 / params.base_cells;
    // the plume shape depends on the seed only, so density levels of one
    // seed share a layout and differ in thickness
    let field_seed = hash_words(&[seed, 0x5_30_4B_45]);
    let (ox, oy) = (
        (field_seed % 1024) as f64 * 0.731,
        ((field_seed >> 10) % 1024) as f64 * 0.593,
    );
    let amp = params.amplitude(density);
    let mut depth = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let n = fbm.sample(field_seed, ox + x as f64 / cell, oy + y as f64 / cell);
            depth.push(amp * smoothstep(params.plume_low, params.plume_high, n));
        }
    }
    asm::field_transform(&Plane::new(h, w, depth)?)
}

/// One paired record: clean scene, smoked observation, additive smoke layer
/// and the transmission that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct SmokeSample {
    pub clean: ImageRgb,
    pub smoke: ImageRgb,
    pub mask: SmokeMaskImage,
    pub t: TransmissionMap,
    pub density: DensityLevel,
    pub seed: u64,
}

pub fn synthesize_sample(clean: &ImageRgb, seed: u64, density: DensityLevel) -> Result<SmokeSample> {
    synthesize_sample_with(clean, seed, density, &SmokeParams::default())
}

pub fn synthesize_sample_with(
    clean: &ImageRgb,
    seed: u64,
    density: DensityLevel,
    params: &SmokeParams,
) -> Result<SmokeSample> {
    clean.ensure_unit_range("clean image")?;
    let t = generate_transmission_with(seed, density, clean.dims(), params)?;
    let smoke = asm::compose(clean, &t, A_SYNTH)?;
    let mask = asm::smoke_mask_from_t(&t, A_SYNTH);
    Ok(SmokeSample {
        clean: clean.clone(),
        smoke,
        mask,
        t,
        density,
        seed,
    })
}

/// Per-sample seed derived from the dataset seed, source index and density.
pub fn sample_seed(dataset_seed: u64, source: usize, density: DensityLevel) -> u64 {
    hash_words(&[dataset_seed, source as u64, density.index() as u64])
}
