use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyper-parameters of the attention estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeConfig {
    pub patch_size: usize,
    pub blocks_per_stage: [usize; 5],
    pub embed_dims: [usize; 5],
    pub num_heads: [usize; 5],
    pub window_size: usize,
    /// Convolution kernel side of the three expanding layers (1 or 3).
    pub spe_kernels: [usize; 3],
    pub mlp_ratio: f64,
    pub attention_channels_out: usize,
}

impl SaeConfig {
    /// Reference architecture for 256x256 inputs.
    pub fn reference() -> Self {
        Self {
            patch_size: 4,
            blocks_per_stage: [8, 8, 2, 4, 1],
            embed_dims: [48, 96, 192, 96, 8],
            num_heads: [3, 6, 12, 6, 3],
            window_size: 8,
            spe_kernels: [1, 1, 3],
            mlp_ratio: 4.0,
            attention_channels_out: 8,
        }
    }

    /// Reference architecture with windows sized for 64x64 inputs.
    pub fn desk() -> Self {
        Self {
            window_size: 4,
            ..Self::reference()
        }
    }

    /// Minimal configuration for 16x16 inputs, used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            patch_size: 4,
            blocks_per_stage: [1; 5],
            embed_dims: [8, 8, 16, 8, 4],
            num_heads: [2, 2, 2, 2, 2],
            window_size: 2,
            spe_kernels: [1, 1, 3],
            mlp_ratio: 4.0,
            attention_channels_out: 4,
        }
    }

    /// Per-head width; rounded up when the stage width is not a multiple of
    /// the head count, so attention runs on `heads * head_dim` channels.
    pub fn head_dim(&self, stage: usize) -> usize {
        self.embed_dims[stage].div_ceil(self.num_heads[stage])
    }

    pub fn mlp_hidden(&self, stage: usize) -> usize {
        ((self.embed_dims[stage] as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Token grid of each stage for an `(h, w)` input.
    pub fn stage_grids(&self, (h, w): (usize, usize)) -> [(usize, usize); 5] {
        let g0 = (h / self.patch_size, w / self.patch_size);
        let g1 = (g0.0 / 2, g0.1 / 2);
        let g2 = (g1.0 / 2, g1.1 / 2);
        [g0, g1, g2, g1, g0]
    }

    /// Window side actually used on `grid`: the configured size, shrunk to
    /// the grid when the grid is smaller.
    pub fn effective_window(&self, grid: (usize, usize)) -> usize {
        self.window_size.min(grid.0).min(grid.1)
    }

    pub fn validate(&self, size: (usize, usize)) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.window_size == 0 || self.attention_channels_out == 0 {
            return bad("patch size, window size and attention channels must be positive".into());
        }
        if self.embed_dims.contains(&0) || self.num_heads.contains(&0) {
            return bad("embed dims and head counts must be positive".into());
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return bad(format!("mlp ratio {}", self.mlp_ratio));
        }
        if self.spe_kernels.iter().any(|&k| k != 1 && k != 3) {
            return bad(format!("expanding kernels {:?}: only 1 and 3 are supported", self.spe_kernels));
        }
        if self.embed_dims[1] != self.embed_dims[3] {
            return bad(format!(
                "stage 2 and 4 widths differ ({} vs {})",
                self.embed_dims[1], self.embed_dims[3]
            ));
        }
        let unit = self.patch_size * 4;
        let (h, w) = size;
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} is not a multiple of {unit} (patch size x 4)"
            )));
        }
        for (s, grid) in self.stage_grids(size).into_iter().enumerate() {
            let win = self.effective_window(grid);
            if grid.0 % win != 0 || grid.1 % win != 0 {
                return Err(Error::Shape(format!(
                    "stage {} grid {grid:?} is not divisible by window {win}",
                    s + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Drop the lightness embedding.
    NoLe,
    /// Replace soft patch expanding with plain patch expanding.
    NoSpe,
    /// Use `exp` instead of `tanh` inside the residual field transform.
    NoRft,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::NoLe, Ablation::NoSpe, Ablation::NoRft];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoLe => "no_le",
            Ablation::NoSpe => "no_spe",
            Ablation::NoRft => "no_rft",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation {s:?}; valid names are no_le, no_spe, no_rft"
                ))
            })
    }
}

/// Set of switched-off components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub no_le: bool,
    pub no_spe: bool,
    pub no_rft: bool,
}

impl Ablations {
    pub const NONE: Ablations = Ablations {
        no_le: false,
        no_spe: false,
        no_rft: false,
    };

    pub fn from_list(list: &[Ablation]) -> Self {
        let mut a = Self::NONE;
        for &x in list {
            a.set(x);
        }
        a
    }

    pub fn only(x: Ablation) -> Self {
        Self::from_list(&[x])
    }

    pub fn set(&mut self, x: Ablation) {
        match x {
            Ablation::NoLe => self.no_le = true,
            Ablation::NoSpe => self.no_spe = true,
            Ablation::NoRft => self.no_rft = true,
        }
    }

    pub fn contains(&self, x: Ablation) -> bool {
        match x {
            Ablation::NoLe => self.no_le,
            Ablation::NoSpe => self.no_spe,
            Ablation::NoRft => self.no_rft,
        }
    }

    pub fn list(&self) -> Vec<Ablation> {
        Ablation::ALL.into_iter().filter(|&a| self.contains(a)).collect()
    }

    /// `"full"` or the active ablations joined with `+`.
    pub fn label(&self) -> String {
        let l = self.list();
        if l.is_empty() {
            "full".into()
        } else {
            l.iter().map(|a| a.as_str()).collect::<Vec<_>>().join("+")
        }
    }
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Everything needed to instantiate a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub sae: SaeConfig,
    /// Input `(height, width)`; whole-map normalisation layers depend on it.
    pub image_size: (usize, usize),
    /// Hidden width of the residual field transform.
    pub rft_hidden: usize,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn reference() -> Self {
        Self {
            sae: SaeConfig::reference(),
            image_size: (256, 256),
            rft_hidden: 16,
            ablations: Ablations::NONE,
        }
    }

    pub fn desk() -> Self {
        Self {
            sae: SaeConfig::desk(),
            image_size: (64, 64),
            ..Self::reference()
        }
    }

    pub fn tiny() -> Self {
        Self {
            sae: SaeConfig::tiny(),
            image_size: (16, 16),
            rft_hidden: 4,
            ablations: Ablations::NONE,
        }
    }

    pub fn with_ablations(mut self, ablations: Ablations) -> Self {
        self.ablations = ablations;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rft_hidden == 0 {
            return Err(Error::Config("rft hidden width must be positive".into()));
        }
        self.sae.validate(self.image_size)
    }
}
