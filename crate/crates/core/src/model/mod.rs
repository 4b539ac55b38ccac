//! The desmoking network.
//!
//! The attention estimator is a five-stage windowed-attention U-Net over
//! 4x4 patch tokens. Stage 1 adds a lightness embedding to the patch tokens;
//! the decoder upsamples with soft patch expanding (conv, pixel shuffle,
//! whole-map layer norm) and fuses encoder features by concatenation and a
//! linear projection. A final softplus makes the attention map non-negative.
//!
//! The reconstruction head maps the attention map through
//! `conv -> tanh -> conv` to residual coefficients `K~`, `B~`, predicts an
//! additive smoke layer `a (1 - exp(-t_s))`, and outputs
//! `J~ = I + K~ I + B~ I_s + eps`.

mod config;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::asm::{ReconstructionBias, ResidualCoefficients, SmokeMaskImage};
use crate::colorspace;
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::nn::window::WindowLayout;
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Unary, Var};

pub use config::{Ablation, Ablations, ModelConfig, SaeConfig};

const INIT_STD: f64 = 0.02;

/// Non-negative attention map at full input resolution, `H x W x C_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl AttentionMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "attention map of {} values for {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain("attention map must be finite and non-negative".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height * self.width, self.channels], self.data.clone())
            .expect("attention map shape is checked on construction")
    }
}

/// Everything the reconstruction head produces for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct HgeOutput {
    /// `J~` clamped to `[0, 1]`.
    pub desmoked: ImageRgb,
    /// `J~` before clamping; what the losses see.
    pub desmoked_unclamped: ImageRgb,
    pub smoke_mask: SmokeMaskImage,
    pub coefficients: ResidualCoefficients,
    pub epsilon: ReconstructionBias,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub stages: [Var; 5],
    pub attention: Var,
    pub k: Var,
    pub b: Var,
    pub mask: Var,
    pub desmoked: Var,
}

struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

struct Block {
    ln1: Norm,
    qkv_w: ParamId,
    qkv_b: ParamId,
    bias_table: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln2: Norm,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    layout: Arc<WindowLayout>,
    heads: usize,
    head_dim: usize,
}

struct Merge {
    norm: Norm,
    w: ParamId,
}

enum Expand {
    /// conv (1x1 or 3x3) -> pixel shuffle -> layer norm over the whole map
    Soft {
        kernel: usize,
        w: ParamId,
        b: ParamId,
        norm: Norm,
    },
    /// linear -> pixel shuffle -> per-token layer norm
    Plain { w: ParamId, norm: Norm },
}

struct Linear {
    w: ParamId,
    b: ParamId,
}

struct LightnessEmbed {
    proj: Linear,
    norm: Norm,
}

struct Head {
    rft_in: Linear,
    rft_out: Linear,
    mask: Linear,
    airlight: ParamId,
    epsilon: ParamId,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init<'_> {
    fn trunc_normal(&mut self, name: String, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v = self.normal.sample(&mut self.rng);
                if v.abs() <= 2.0 * INIT_STD {
                    break v;
                }
            })
            .collect();
        self.store.add(name, Tensor::new(shape, data).expect("shape matches"))
    }

    fn full(&mut self, name: String, shape: &[usize], v: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, v))
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        Linear {
            w: self.trunc_normal(format!("{name}.w"), &[din, dout]),
            b: self.full(format!("{name}.b"), &[dout], 0.0),
        }
    }

    fn zero_linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        Linear {
            w: self.full(format!("{name}.w"), &[din, dout], 0.0),
            b: self.full(format!("{name}.b"), &[dout], 0.0),
        }
    }

    fn norm(&mut self, name: &str, shape: &[usize]) -> Norm {
        Norm {
            gamma: self.full(format!("{name}.gamma"), shape, 1.0),
            beta: self.full(format!("{name}.beta"), shape, 0.0),
        }
    }
}

pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    grids: [(usize, usize); 5],
    patch: Linear,
    lightness: Option<LightnessEmbed>,
    stages: [Vec<Block>; 5],
    merges: [Merge; 2],
    expands: [Expand; 3],
    fuses: [Linear; 2],
    head: Head,
}

impl Model {
    /// Freshly initialised network; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let sae = &config.sae;
        let (h, w) = config.image_size;
        let grids = sae.stage_grids(config.image_size);
        let dims = sae.embed_dims;
        let p = sae.patch_size;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        };
        let tokens = |g: (usize, usize)| g.0 * g.1;

        let patch = init.linear("patch_embed", p * p * 3, dims[0]);
        let lightness = (!config.ablations.no_le).then(|| LightnessEmbed {
            proj: init.linear("lightness_embed.conv", p * p, dims[0]),
            norm: init.norm("lightness_embed.norm", &[tokens(grids[0]), dims[0]]),
        });

        let mut stages: [Vec<Block>; 5] = Default::default();
        let mut merges = Vec::new();
        let mut expands = Vec::new();
        let mut fuses = Vec::new();
        for s in 0..5 {
            let c = dims[s];
            let heads = sae.num_heads[s];
            let head_dim = sae.head_dim(s);
            let inner = heads * head_dim;
            let hidden = sae.mlp_hidden(s);
            let win = sae.effective_window(grids[s]);
            let regular = Arc::new(WindowLayout::new(grids[s], win, 0)?);
            let shifted = if win < grids[s].0.min(grids[s].1) {
                Arc::new(WindowLayout::new(grids[s], win, win / 2)?)
            } else {
                Arc::clone(&regular)
            };
            if s == 3 || s == 4 {
                // decoder entry: expand from the previous stage, then fuse the skip
                let e = s - 3;
                let (cin, r) = (dims[s - 1], 2);
                expands.push(expand(&mut init, &config, e, cin, c, r, grids[s]));
                let skip = dims[4 - s];
                fuses.push(init.linear(&format!("fuse{}", s + 1), c + skip, c));
            }
            for j in 0..sae.blocks_per_stage[s] {
                let name = format!("stage{}.block{j}", s + 1);
                let layout = if j % 2 == 1 { &shifted } else { &regular };
                stages[s].push(Block {
                    ln1: init.norm(&format!("{name}.norm1"), &[c]),
                    qkv_w: init.trunc_normal(format!("{name}.qkv.w"), &[c, 3 * inner]),
                    qkv_b: init.full(format!("{name}.qkv.b"), &[3 * inner], 0.0),
                    bias_table: init.full(
                        format!("{name}.rel_pos_bias"),
                        &[layout.table_rows(), heads],
                        0.0,
                    ),
                    proj_w: init.trunc_normal(format!("{name}.proj.w"), &[inner, c]),
                    proj_b: init.full(format!("{name}.proj.b"), &[c], 0.0),
                    ln2: init.norm(&format!("{name}.norm2"), &[c]),
                    fc1_w: init.trunc_normal(format!("{name}.fc1.w"), &[c, hidden]),
                    fc1_b: init.full(format!("{name}.fc1.b"), &[hidden], 0.0),
                    fc2_w: init.trunc_normal(format!("{name}.fc2.w"), &[hidden, c]),
                    fc2_b: init.full(format!("{name}.fc2.b"), &[c], 0.0),
                    layout: Arc::clone(layout),
                    heads,
                    head_dim,
                });
            }
            if s < 2 {
                merges.push(Merge {
                    norm: init.norm(&format!("merge{}.norm", s + 1), &[4 * c]),
                    w: init.trunc_normal(format!("merge{}.w", s + 1), &[4 * c, dims[s + 1]]),
                });
            }
        }
        let ca = sae.attention_channels_out;
        expands.push(expand(&mut init, &config, 2, dims[4], ca, p, (h, w)));

        let hidden = config.rft_hidden;
        let head = Head {
            rft_in: init.linear("rft.conv_in", ca, hidden),
            rft_out: init.zero_linear("rft.conv_out", hidden, 6),
            mask: init.zero_linear("mask_head", ca, 1),
            airlight: init.full("airlight".into(), &[3], 1.0),
            epsilon: init.full("epsilon".into(), &[3], 0.0),
        };

        let [m0, m1]: [Merge; 2] = merges.try_into().ok().expect("two merges");
        let [e0, e1, e2]: [Expand; 3] = expands.try_into().ok().expect("three expands");
        let [f0, f1]: [Linear; 2] = fuses.try_into().ok().expect("two fuses");
        Ok(Self {
            config,
            store,
            grids,
            patch,
            lightness,
            stages,
            merges: [m0, m1],
            expands: [e0, e1, e2],
            fuses: [f0, f1],
            head,
        })
    }

    /// Rebuilds a network around previously trained parameters.
    pub fn from_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.store.load_from(params)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    fn check_input(&self, img: &ImageRgb) -> Result<()> {
        if img.dims() != self.config.image_size {
            return Err(Error::Shape(format!(
                "input {}x{} but the network is built for {:?}",
                img.height(),
                img.width(),
                self.config.image_size
            )));
        }
        Ok(())
    }

    fn image_input(g: &mut Graph, img: &ImageRgb) -> Var {
        g.input(Tensor::new(&[img.pixel_count(), 3], img.data().to_vec()).expect("rgb layout"))
    }

    fn lin(g: &mut Graph, x: Var, l: &Linear) -> Result<Var> {
        let (w, b) = (g.param(l.w), g.param(l.b));
        g.linear(x, w, Some(b))
    }

    fn norm_rows(g: &mut Graph, x: Var, n: &Norm) -> Result<Var> {
        let (a, b) = (g.param(n.gamma), g.param(n.beta));
        g.layer_norm_rows(x, a, b)
    }

    fn norm_all(g: &mut Graph, x: Var, n: &Norm) -> Result<Var> {
        let (a, b) = (g.param(n.gamma), g.param(n.beta));
        g.layer_norm_all(x, a, b)
    }

    /// Linear projection of flattened `p x p x 3` patches.
    pub fn patch_embed_graph(&self, g: &mut Graph, img: Var) -> Result<Var> {
        let x = g.patchify(img, self.config.image_size, self.config.sae.patch_size)?;
        Self::lin(g, x, &self.patch)
    }

    /// Patch-strided convolution of the lightness channel followed by a
    /// whole-map layer norm; `None` when the embedding is ablated.
    pub fn lightness_embed_graph(&self, g: &mut Graph, img: &ImageRgb) -> Result<Option<Var>> {
        let Some(le) = &self.lightness else {
            return Ok(None);
        };
        let l = colorspace::lightness(img)?;
        let l = g.input(Tensor::new(&[img.pixel_count(), 1], l.values().to_vec())?);
        let x = g.patchify(l, self.config.image_size, self.config.sae.patch_size)?;
        let x = Self::lin(g, x, &le.proj)?;
        Ok(Some(Self::norm_all(g, x, &le.norm)?))
    }

    /// Pre-norm windowed-attention transformer block.
    fn block(g: &mut Graph, x: Var, b: &Block) -> Result<Var> {
        let h = Self::norm_rows(g, x, &b.ln1)?;
        let (w, bias) = (g.param(b.qkv_w), g.param(b.qkv_b));
        let qkv = g.linear(h, w, Some(bias))?;
        let table = g.param(b.bias_table);
        let a = g.window_attention(qkv, table, &b.layout, b.heads, b.head_dim)?;
        let (w, bias) = (g.param(b.proj_w), g.param(b.proj_b));
        let a = g.linear(a, w, Some(bias))?;
        let x = g.add(x, a)?;
        let h = Self::norm_rows(g, x, &b.ln2)?;
        let (w, bias) = (g.param(b.fc1_w), g.param(b.fc1_b));
        let h = g.linear(h, w, Some(bias))?;
        let h = g.unary(h, Unary::Gelu);
        let (w, bias) = (g.param(b.fc2_w), g.param(b.fc2_b));
        let h = g.linear(h, w, Some(bias))?;
        g.add(x, h)
    }

    fn run_stage(&self, g: &mut Graph, mut x: Var, s: usize) -> Result<Var> {
        for b in &self.stages[s] {
            x = Self::block(g, x, b)?;
        }
        Ok(x)
    }

    /// 2x2 neighbourhood concatenation, layer norm, linear to the next width.
    fn merge(&self, g: &mut Graph, x: Var, i: usize) -> Result<Var> {
        let m = &self.merges[i];
        let x = g.patchify(x, self.grids[i], 2)?;
        let x = Self::norm_rows(g, x, &m.norm)?;
        let w = g.param(m.w);
        g.linear(x, w, None)
    }

    fn expand(&self, g: &mut Graph, x: Var, i: usize, grid: (usize, usize), r: usize) -> Result<Var> {
        match &self.expands[i] {
            Expand::Soft { kernel, w, b, norm } => {
                let x = if *kernel == 3 { g.im2col3(x, grid)? } else { x };
                let (wv, bv) = (g.param(*w), g.param(*b));
                let x = g.linear(x, wv, Some(bv))?;
                let x = g.pixel_shuffle(x, grid, r)?;
                Self::norm_all(g, x, norm)
            }
            Expand::Plain { w, norm } => {
                let wv = g.param(*w);
                let x = g.linear(x, wv, None)?;
                let x = g.pixel_shuffle(x, grid, r)?;
                Self::norm_rows(g, x, norm)
            }
        }
    }

    /// Records the attention estimator; returns the five stage outputs and
    /// the `[H*W, C_a]` attention map.
    pub fn sae_graph(&self, g: &mut Graph, img: &ImageRgb) -> Result<([Var; 5], Var)> {
        self.check_input(img)?;
        let input = Self::image_input(g, img);
        let mut x = self.patch_embed_graph(g, input)?;
        if let Some(le) = self.lightness_embed_graph(g, img)? {
            x = g.add(x, le)?;
        }
        let s1 = self.run_stage(g, x, 0)?;
        let x = self.merge(g, s1, 0)?;
        let s2 = self.run_stage(g, x, 1)?;
        let x = self.merge(g, s2, 1)?;
        let s3 = self.run_stage(g, x, 2)?;

        let x = self.expand(g, s3, 0, self.grids[2], 2)?;
        let x = g.concat(x, s2)?;
        let x = Self::lin(g, x, &self.fuses[0])?;
        let s4 = self.run_stage(g, x, 3)?;

        let x = self.expand(g, s4, 1, self.grids[3], 2)?;
        let x = g.concat(x, s1)?;
        let x = Self::lin(g, x, &self.fuses[1])?;
        let s5 = self.run_stage(g, x, 4)?;

        let x = self.expand(g, s5, 2, self.grids[4], self.config.sae.patch_size)?;
        let attn = g.unary(x, Unary::Softplus);
        Ok(([s1, s2, s3, s4, s5], attn))
    }

    /// Residual field transform: `[H*W, 3]` fields `K~` and `B~`.
    pub fn rft_graph(&self, g: &mut Graph, attn: Var) -> Result<(Var, Var)> {
        let h = Self::lin(g, attn, &self.head.rft_in)?;
        let act = if self.config.ablations.no_rft {
            Unary::Exp
        } else {
            Unary::Tanh
        };
        let h = g.unary(h, act);
        let kb = Self::lin(g, h, &self.head.rft_out)?;
        Ok((g.slice_cols(kb, 0, 3)?, g.slice_cols(kb, 3, 3)?))
    }

    /// `a (1 - exp(-t_s))` with `t_s` a rectified 1x1 projection of the
    /// attention map and `a` a learnable airlight clamped to `[0, 1]`.
    pub fn smoke_mask_graph(&self, g: &mut Graph, attn: Var) -> Result<Var> {
        let t = Self::lin(g, attn, &self.head.mask)?;
        let t = g.unary(t, Unary::Relu);
        let m = g.unary(t, Unary::OneMinusExpNeg);
        let a = g.param(self.head.airlight);
        let a = g.unary(a, Unary::Clamp01);
        g.col_times_row(m, a)
    }

    /// Records the whole network for one frame.
    pub fn forward_graph(&self, g: &mut Graph, img: &ImageRgb) -> Result<ForwardVars> {
        let (stages, attention) = self.sae_graph(g, img)?;
        let input = Self::image_input(g, img);
        let (k, b) = self.rft_graph(g, attention)?;
        let mask = self.smoke_mask_graph(g, attention)?;
        let eps = g.param(self.head.epsilon);
        let desmoked = reconstruct_graph(g, input, k, b, mask, eps)?;
        Ok(ForwardVars {
            stages,
            attention,
            k,
            b,
            mask,
            desmoked,
        })
    }

    pub fn sae_forward(&self, img: &ImageRgb) -> Result<AttentionMap> {
        let mut g = Graph::new(&self.store);
        let (_, attn) = self.sae_graph(&mut g, img)?;
        let (h, w) = img.dims();
        AttentionMap::new(h, w, self.config.sae.attention_channels_out, g.value(attn).data().to_vec())
    }

    /// Reconstruction head applied to a given attention map.
    pub fn hge_forward(&self, attn: &AttentionMap, img: &ImageRgb) -> Result<HgeOutput> {
        self.check_input(img)?;
        if attn.dims() != img.dims() || attn.channels() != self.config.sae.attention_channels_out {
            return Err(Error::Shape(format!(
                "attention map {:?}x{} for image {:?}",
                attn.dims(),
                attn.channels(),
                img.dims()
            )));
        }
        let mut g = Graph::new(&self.store);
        let a = g.input(attn.to_tensor());
        let input = Self::image_input(&mut g, img);
        let (k, b) = self.rft_graph(&mut g, a)?;
        let mask = self.smoke_mask_graph(&mut g, a)?;
        let eps = g.param(self.head.epsilon);
        let desmoked = reconstruct_graph(&mut g, input, k, b, mask, eps)?;
        self.collect(&g, img, k, b, mask, desmoked)
    }

    pub fn forward(&self, img: &ImageRgb) -> Result<HgeOutput> {
        let mut g = Graph::new(&self.store);
        let v = self.forward_graph(&mut g, img)?;
        self.collect(&g, img, v.k, v.b, v.mask, v.desmoked)
    }

    fn collect(&self, g: &Graph, img: &ImageRgb, k: Var, b: Var, mask: Var, out: Var) -> Result<HgeOutput> {
        let (h, w) = img.dims();
        let unclamped = ImageRgb::new(h, w, g.value(out).data().to_vec())?;
        Ok(HgeOutput {
            desmoked: unclamped.clamped(),
            desmoked_unclamped: unclamped,
            smoke_mask: SmokeMaskImage::new(ImageRgb::new(h, w, g.value(mask).data().to_vec())?)?,
            coefficients: ResidualCoefficients::new(
                h,
                w,
                g.value(k).data().to_vec(),
                g.value(b).data().to_vec(),
            )?,
            epsilon: self.epsilon(),
        })
    }

    pub fn epsilon(&self) -> ReconstructionBias {
        let e = self.store.get(self.head.epsilon).data();
        ReconstructionBias::new([e[0], e[1], e[2]]).unwrap_or(ReconstructionBias::ZERO)
    }

    /// Current learnable airlight after clamping.
    pub fn airlight(&self) -> [f64; 3] {
        let a = self.store.get(self.head.airlight).data();
        [0, 1, 2].map(|c| a[c].clamp(0.0, 1.0))
    }

    /// `(grid, channels)` of the five stage outputs and of the attention map.
    pub fn shape_chain(&self) -> Result<Vec<((usize, usize), usize)>> {
        let (h, w) = self.config.image_size;
        let img = ImageRgb::filled(h, w, 0.5);
        let mut g = Graph::new(&self.store);
        let (stages, attn) = self.sae_graph(&mut g, &img)?;
        let mut out: Vec<_> = stages
            .iter()
            .zip(self.grids)
            .map(|(&v, grid)| (grid, g.shape(v)[1]))
            .collect();
        out.push(((h, w), g.shape(attn)[1]));
        Ok(out)
    }
}

fn expand(
    init: &mut Init,
    config: &ModelConfig,
    i: usize,
    cin: usize,
    cout: usize,
    r: usize,
    out_grid: (usize, usize),
) -> Expand {
    let name = format!("expand{}", i + 1);
    let last = i == 2;
    if config.ablations.no_spe {
        return Expand::Plain {
            w: init.trunc_normal(format!("{name}.w"), &[cin, cout * r * r]),
            norm: init.norm(&format!("{name}.norm"), &[cout]),
        };
    }
    let kernel = config.sae.spe_kernels[i];
    let din = kernel * kernel * cin;
    // the last conv starts at zero so the initial attention map is uniform
    let w = if last {
        init.full(format!("{name}.conv.w"), &[din, cout * r * r], 0.0)
    } else {
        init.trunc_normal(format!("{name}.conv.w"), &[din, cout * r * r])
    };
    Expand::Soft {
        kernel,
        w,
        b: init.full(format!("{name}.conv.b"), &[cout * r * r], 0.0),
        norm: init.norm(&format!("{name}.norm"), &[out_grid.0 * out_grid.1, cout]),
    }
}

/// `I + K~ * I + B~ * I_s + eps` on `[H*W, 3]` operands.
pub fn reconstruct_graph(
    g: &mut Graph,
    img: Var,
    k: Var,
    b: Var,
    mask: Var,
    eps: Var,
) -> Result<Var> {
    let ki = g.mul(k, img)?;
    let bm = g.mul(b, mask)?;
    let x = g.add(img, ki)?;
    let x = g.add(x, bm)?;
    g.add_row(x, eps)
}

#[cfg(test)]
mod tests;
