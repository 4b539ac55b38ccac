//! Tissue-like synthetic clean frames.

use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::parallel::{self, Execution};
use crate::synth::noise::{hash_words, Fbm};

const PALETTE: [[f64; 3]; 6] = [
    [0.55, 0.10, 0.12], // deep red
    [0.85, 0.45, 0.42], // flesh
    [0.88, 0.72, 0.40], // fat
    [0.32, 0.06, 0.08], // maroon
    [0.92, 0.62, 0.58], // pale pink
    [0.70, 0.25, 0.30], // mucosa
];

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn texture(seed: u64, (h, w): (usize, usize)) -> ImageRgb {
    let fbm = Fbm::default();
    let pick = |k: u64| PALETTE[(hash_words(&[seed, k]) % PALETTE.len() as u64) as usize];
    let (c0, c1, c2) = (pick(1), pick(2), pick(3));
    let vein = pick(4);
    let side = h.min(w) as f64;
    let s_warp = hash_words(&[seed, 10]);
    let s_base = hash_words(&[seed, 11]);
    let s_shade = hash_words(&[seed, 12]);
    let s_detail = hash_words(&[seed, 13]);
    ImageRgb::from_fn(h, w, |y, x| {
        let (u, v) = (x as f64 / side, y as f64 / side);
        // domain warp for folded, organic shapes
        let wx = fbm.sample(s_warp, u * 2.0, v * 2.0) - 0.5;
        let wy = fbm.sample(s_warp ^ 0xABCD, u * 2.0, v * 2.0) - 0.5;
        let base = fbm.sample(s_base, (u + wx) * 3.0, (v + wy) * 3.0);
        let t = ((base - 0.25) / 0.5).clamp(0.0, 1.0);
        let col = if t < 0.5 {
            lerp3(c0, c1, t * 2.0)
        } else {
            lerp3(c1, c2, (t - 0.5) * 2.0)
        };
        let detail = fbm.sample(s_detail, u * 14.0, v * 14.0);
        let vein_w = ((detail - 0.62) / 0.12).clamp(0.0, 1.0) * 0.6;
        let col = lerp3(col, vein, vein_w);
        let shade = 0.7 + 0.45 * fbm.sample(s_shade, u * 1.5, v * 1.5);
        [
            (col[0] * shade).clamp(0.0, 1.0),
            (col[1] * shade).clamp(0.0, 1.0),
            (col[2] * shade).clamp(0.0, 1.0),
        ]
    })
}

/// `n` deterministic smooth colour textures standing in for clean frames.
pub fn generate_texture_corpus(n: usize, seed: u64, size: (usize, usize)) -> Result<Vec<ImageRgb>> {
    generate_texture_corpus_with(n, seed, size, Execution::Parallel)
}

pub fn generate_texture_corpus_with(
    n: usize,
    seed: u64,
    size: (usize, usize),
    exec: Execution,
) -> Result<Vec<ImageRgb>> {
    if n == 0 {
        return Err(Error::Domain("texture corpus needs at least one image".into()));
    }
    if size.0 == 0 || size.1 == 0 {
        return Err(Error::Domain(format!("texture size {size:?}")));
    }
    Ok(parallel::map_range(exec, n, |i| {
        texture(hash_words(&[seed, i as u64, 0x7E47]), size)
    }))
}
