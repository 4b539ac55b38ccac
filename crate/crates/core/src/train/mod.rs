//! Composite loss, learning-rate schedule and the training loop.

mod checkpoint;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asm::SmokeMaskImage;
use crate::colorspace::{self, pixel_lightness};
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::metrics::psnr;
use crate::model::{Ablations, ForwardVars, HgeOutput, Model, ModelConfig};
use crate::nn::{AdamW, AdamWConfig, Gradients, Graph, Tensor, Unary, Var};
use crate::parallel::{self, Execution};
use crate::synth::noise::hash_words;
use crate::synth::{DatasetManifest, DensityLevel, LoadedSample, SmokeSample, Split};

pub use checkpoint::{Checkpoint, CheckpointMeta, RngState, CHECKPOINT_VERSION, META_FILE, PARAMS_FILE};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// Per-sample PSNR is capped here when averaging validation scores.
const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_s: f64,
    pub alpha_l: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_s: 1.0,
            alpha_l: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub ablations: Ablations,
    pub loss: LossWeights,
    /// Fraction of training sources held out for validation.
    pub val_fraction: f64,
    /// Results do not depend on it, so it is not recorded.
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr_init: 1e-3,
            lr_min: 1e-6,
            weight_decay: 0.01,
            batch_size: 8,
            seed: 0,
            ablations: Ablations::NONE,
            loss: LossWeights::default(),
            val_fraction: 0.1,
            exec: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return bad(format!("lr_init {} must be positive", self.lr_init));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_init) {
            return bad(format!("lr_min {} outside [0, lr_init]", self.lr_min));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.loss.alpha_s >= 0.0 && self.loss.alpha_l >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val fraction {} outside [0, 1)", self.val_fraction));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_init` at step 0 to `lr_min` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Domain(format!("step {step} beyond {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(cfg.lr_init);
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + phase.cos()))
}

/// The three loss terms and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub image: f64,
    pub mask: f64,
    pub lightness: f64,
    pub total: f64,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn combine(image: f64, mask: f64, lightness: f64, w: LossWeights) -> LossParts {
    // same accumulation order as Graph::weighted_sum
    let mut total = 0.0;
    total += image;
    total += w.alpha_s * mask;
    total += w.alpha_l * lightness;
    LossParts {
        image,
        mask,
        lightness,
        total,
    }
}

/// `MSE(J~, J) + alpha_s MSE(I_s~, I_s) + alpha_l MSE(L(clip(J~)), L(J))`,
/// evaluated on the unclamped prediction.
pub fn total_loss(
    pred: &HgeOutput,
    clean: &ImageRgb,
    mask: &SmokeMaskImage,
    w: LossWeights,
) -> Result<LossParts> {
    pred.desmoked_unclamped.ensure_same_shape(clean, "prediction vs clean")?;
    pred.smoke_mask.image().ensure_same_shape(mask.image(), "mask vs target")?;
    let image = mse(pred.desmoked_unclamped.data(), clean.data());
    let m = mse(pred.smoke_mask.image().data(), mask.image().data());
    let pl: Vec<f64> = pred
        .desmoked_unclamped
        .pixels()
        .map(|p| pixel_lightness(&[p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0), p[2].clamp(0.0, 1.0)]))
        .collect();
    let tl = colorspace::lightness(clean)?;
    let l = mse(&pl, tl.values());
    Ok(combine(image, m, l, w))
}

/// One supervised pair with its loss targets laid out as tensors.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub id: String,
    pub density: DensityLevel,
    pub input: ImageRgb,
    pub clean: ImageRgb,
    pub mask: SmokeMaskImage,
    clean_t: Tensor,
    mask_t: Tensor,
    lightness_t: Tensor,
}

impl TrainSample {
    pub fn new(id: String, density: DensityLevel, input: ImageRgb, clean: ImageRgb, mask: SmokeMaskImage) -> Result<Self> {
        input.ensure_same_shape(&clean, "input vs clean")?;
        input.ensure_same_shape(mask.image(), "input vs mask")?;
        let n = input.pixel_count();
        let clean_t = Tensor::new(&[n, 3], clean.data().to_vec())?;
        let mask_t = Tensor::new(&[n, 3], mask.image().data().to_vec())?;
        let lightness_t = Tensor::new(&[n, 1], colorspace::lightness(&clean)?.values().to_vec())?;
        Ok(Self {
            id,
            density,
            input,
            clean,
            mask,
            clean_t,
            mask_t,
            lightness_t,
        })
    }

    pub fn from_loaded(s: &LoadedSample) -> Result<Self> {
        Self::new(s.id.clone(), s.density, s.smoke.clone(), s.clean.clone(), s.mask.clone())
    }

    pub fn from_synth(id: String, s: &SmokeSample) -> Result<Self> {
        Self::new(id, s.density, s.smoke.clone(), s.clean.clone(), s.mask.clone())
    }

    /// Loss of the do-nothing predictor `J~ = I`, `I_s~ = 0`.
    pub fn baseline_loss(&self, w: LossWeights) -> Result<LossParts> {
        let (h, wd) = self.input.dims();
        let pred = HgeOutput {
            desmoked: self.input.clone(),
            desmoked_unclamped: self.input.clone(),
            smoke_mask: SmokeMaskImage::zeros(h, wd),
            coefficients: crate::asm::ResidualCoefficients::zeros(h, wd),
            epsilon: crate::asm::ReconstructionBias::ZERO,
        };
        total_loss(&pred, &self.clean, &self.mask, w)
    }
}

/// Records the composite loss on top of a forward pass.
pub fn loss_graph(g: &mut Graph, v: &ForwardVars, s: &TrainSample, w: LossWeights) -> Result<Var> {
    let image = g.mse(v.desmoked, &s.clean_t)?;
    let mask = g.mse(v.mask, &s.mask_t)?;
    let clipped = g.unary(v.desmoked, Unary::Clamp01);
    let l = g.lightness(clipped)?;
    let light = g.mse(l, &s.lightness_t)?;
    g.weighted_sum(&[(image, 1.0), (mask, w.alpha_s), (light, w.alpha_l)])
}

/// Loss and parameter gradients for a single sample.
pub fn sample_gradients(model: &Model, s: &TrainSample, w: LossWeights) -> Result<(f64, Gradients)> {
    let mut g = Graph::new(model.params());
    let v = model.forward_graph(&mut g, &s.input)?;
    let loss = loss_graph(&mut g, &v, s, w)?;
    Ok((g.value(loss).item(), g.backward(loss)))
}

/// Summed losses and gradients of one mini-batch.
pub struct BatchGradients {
    pub loss_sum: f64,
    /// Sum over the batch, not yet divided by its size.
    pub grads: Gradients,
    /// Ids of samples whose loss was not finite.
    pub non_finite: Vec<String>,
}

/// Per-sample gradients, computed under `exec` and summed in batch order so
/// the result does not depend on the execution mode.
pub fn batch_gradients(model: &Model, batch: &[&TrainSample], w: LossWeights, exec: Execution) -> Result<BatchGradients> {
    let results = parallel::map(exec, batch, |s| sample_gradients(model, s, w));
    let mut out = BatchGradients {
        loss_sum: 0.0,
        grads: Gradients::for_store(model.params()),
        non_finite: Vec::new(),
    };
    for (s, r) in batch.iter().zip(results) {
        let (loss, g) = r?;
        if !loss.is_finite() {
            out.non_finite.push(s.id.clone());
        }
        out.loss_sum += loss;
        out.grads.add(&g);
    }
    Ok(out)
}

/// Mean total loss and mean (capped) PSNR of the clamped output over `samples`.
pub fn validate(model: &Model, samples: &[TrainSample], w: LossWeights, exec: Execution) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no validation samples".into()));
    }
    let per = parallel::map(exec, samples, |s| -> Result<(f64, f64)> {
        let out = model.forward(&s.input)?;
        let loss = total_loss(&out, &s.clean, &s.mask, w)?.total;
        Ok((loss, psnr(&out.desmoked, &s.clean)?.min(PSNR_CAP)))
    });
    let (mut l, mut p) = (0.0, 0.0);
    for r in per {
        let (a, b) = r?;
        l += a;
        p += b;
    }
    let n = samples.len() as f64;
    Ok((l / n, p / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: u64,
    /// Mean loss of the first batch before any update.
    pub initial_loss: f64,
    /// Mean loss of the do-nothing predictor on the same batch.
    pub baseline_loss: f64,
    pub param_count: usize,
}

pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: Model,
    pub summary: TrainSummary,
}

/// Train/validation split of the manifest's training records, by source.
pub fn split_training_set(
    manifest: &DatasetManifest,
    val_fraction: f64,
    exec: Execution,
) -> Result<(Vec<TrainSample>, Vec<TrainSample>)> {
    let loaded = manifest.load_split(Split::Train, exec)?;
    if loaded.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} has no training samples",
            manifest.root().display()
        )));
    }
    let mut sources: Vec<usize> = manifest.samples_in(Split::Train).map(|r| r.source).collect();
    sources.sort_unstable();
    sources.dedup();
    let mut n_val = (sources.len() as f64 * val_fraction).round() as usize;
    if n_val == 0 && val_fraction > 0.0 && sources.len() > 1 {
        n_val = 1;
    }
    let n_val = n_val.min(sources.len() - 1);
    let val_sources = &sources[sources.len() - n_val..];
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (rec, s) in manifest.samples_in(Split::Train).zip(&loaded) {
        let t = TrainSample::from_loaded(s)?;
        if val_sources.contains(&rec.source) {
            val.push(t);
        } else {
            train.push(t);
        }
    }
    Ok((train, val))
}

/// Trains on the manifest's training split and writes checkpoints and the
/// metrics log into `out_dir`.
pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig, model_cfg: ModelConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_set, val_set) = split_training_set(manifest, cfg.val_fraction, cfg.exec)?;
    let mut model_cfg = model_cfg;
    model_cfg.image_size = manifest.image_size;
    train_samples(&train_set, &val_set, cfg, model_cfg, Some(out_dir))
}

struct RunFiles {
    dir: PathBuf,
}

impl RunFiles {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join(METRICS_FILE);
        fs::write(&log, "").map_err(|e| Error::io(&log, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    fn append(&self, rec: &EpochRecord) -> Result<()> {
        let path = self.dir.join(METRICS_FILE);
        let line = serde_json::to_string(rec).map_err(|e| Error::json(&path, e))?;
        let mut f = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }

    fn write_summary(&self, s: &TrainSummary) -> Result<()> {
        let path = self.dir.join(SUMMARY_FILE);
        let text = serde_json::to_string_pretty(s).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Training loop over in-memory samples. `model_cfg.ablations` is replaced
/// by `cfg.ablations`. With an output directory, `best/` and `last/`
/// checkpoints, `metrics.jsonl` and `summary.json` are written there.
pub fn train_samples(
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
    mut model_cfg: ModelConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("no training samples".into()));
    }
    model_cfg.ablations = cfg.ablations;
    let mut model = Model::new(model_cfg, cfg.seed)?;
    let files = out_dir.map(RunFiles::new).transpose()?;
    let mut opt = AdamW::new(
        model.params(),
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut step = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize)> = None;
    let mut initial = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    log::info!(
        "training {} on {} samples ({} validation), {} params, {total_steps} steps",
        cfg.ablations.label(),
        train_set.len(),
        val_set.len(),
        model.num_params()
    );

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(hash_words(&[cfg.seed, epoch as u64]));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = cfg.lr_init;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let BatchGradients {
                loss_sum: batch_loss,
                mut grads,
                non_finite,
            } = batch_gradients(&model, &batch, cfg.loss, cfg.exec)?;
            if !non_finite.is_empty() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    samples: non_finite.join(","),
                });
            }
            if initial.is_none() {
                let mut base = 0.0;
                for &i in chunk {
                    base += train_set[i].baseline_loss(cfg.loss)?.total;
                }
                let n = chunk.len() as f64;
                initial = Some((batch_loss / n, base / n));
            }
            epoch_loss += batch_loss;
            grads.scale(1.0 / chunk.len() as f64);
            lr = lr_at(step, total_steps, cfg)?;
            opt.step(model.params_mut(), &grads, lr);
            step += 1;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let (val_loss, val_psnr) = if val_set.is_empty() {
            (None, None)
        } else {
            let (l, p) = validate(&model, val_set, cfg.loss, cfg.exec)?;
            (Some(l), Some(p))
        };
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_psnr,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} train {train_loss:.6} val {val_loss:?} psnr {val_psnr:?}"
        );
        history.push(rec);
        let score = val_loss.unwrap_or(train_loss);
        let improved = best.is_none_or(|(b, _)| score < b);
        if improved {
            best = Some((score, epoch));
        }
        if let Some(f) = &files {
            f.append(&rec)?;
            let ck = |tag: &str| Checkpoint::new(&model, cfg, tag, epoch, step as u64, val_loss);
            ck("last").save(&f.dir.join("last"))?;
            if improved {
                ck("best").save(&f.dir.join("best"))?;
            }
        }
    }
    let (initial_loss, baseline_loss) = initial.expect("at least one batch ran");
    let summary = TrainSummary {
        history,
        best_epoch: best.map_or(cfg.epochs, |(_, e)| e),
        steps: step as u64,
        initial_loss,
        baseline_loss,
        param_count: model.num_params(),
    };
    if let Some(f) = &files {
        f.write_summary(&summary)?;
    }
    Ok(TrainOutcome { model, summary })
}

#[cfg(test)]
mod tests;
