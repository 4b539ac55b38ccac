//! On-disk paired dataset: `manifest.json` plus `clean/`, `smoke/` and
//! `mask/` directories of 8-bit PNGs named `{id}_{density}.png`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::asm::{AtmosphericLight, SmokeMaskImage, TransmissionMap};
use crate::error::{Error, Result};
use crate::image::{ImageRgb, Plane};
use crate::parallel::{self, Execution};
use crate::synth::{sample_seed, synthesize_sample_with, DensityLevel, SmokeParams, A_SYNTH};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: &str = "1";

/// File extensions treated as images when scanning a directory.
pub const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// Index of the clean source image; splits never straddle a source.
    pub source: usize,
    pub split: Split,
    pub density: DensityLevel,
    pub seed: u64,
    pub clean: String,
    pub smoke: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub a_synth: AtmosphericLight,
    pub image_size: (usize, usize),
    pub samples: Vec<SampleRecord>,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn samples_in(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples_in(split).count()
    }

    pub fn load_sample(&self, record: &SampleRecord) -> Result<LoadedSample> {
        LoadedSample::load(&self.root, record, self.a_synth)
    }

    /// Loads every record of `split`, in manifest order.
    pub fn load_split(&self, split: Split, exec: Execution) -> Result<Vec<LoadedSample>> {
        let records: Vec<&SampleRecord> = self.samples_in(split).collect();
        parallel::map(exec, &records, |r| self.load_sample(r))
            .into_iter()
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        if self.version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: self.version.clone(),
                expected: MANIFEST_VERSION.into(),
            });
        }
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Format {
                    path,
                    reason: format!("duplicate sample id {}", s.id),
                });
            }
            for f in [&s.clean, &s.smoke, &s.mask] {
                if !self.root.join(f).is_file() {
                    return Err(Error::Format {
                        path,
                        reason: format!("sample {} references missing file {f}", s.id),
                    });
                }
            }
        }
        Ok(())
    }
}

/// A record read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub density: DensityLevel,
    pub split: Split,
    pub clean: ImageRgb,
    pub smoke: ImageRgb,
    pub mask: SmokeMaskImage,
    /// Recovered as `1 - mask / a`, exact up to 8-bit quantisation.
    pub t: TransmissionMap,
}

impl LoadedSample {
    pub fn load(root: &Path, record: &SampleRecord, a: AtmosphericLight) -> Result<Self> {
        let clean = ImageRgb::load(root.join(&record.clean))?;
        let smoke = ImageRgb::load(root.join(&record.smoke))?;
        let mask = ImageRgb::load(root.join(&record.mask))?;
        clean.ensure_same_shape(&smoke, "smoke vs clean")?;
        clean.ensure_same_shape(&mask, "mask vs clean")?;
        let av = a.channels();
        let t: Vec<f64> = mask
            .pixels()
            .map(|m| {
                let (mut sum, mut n) = (0.0, 0);
                for c in 0..3 {
                    if av[c] > 0.0 {
                        sum += 1.0 - m[c] / av[c];
                        n += 1;
                    }
                }
                let t = if n == 0 { 1.0 } else { sum / n as f64 };
                t.clamp(f64::MIN_POSITIVE, 1.0)
            })
            .collect();
        let t = TransmissionMap::new(Plane::new(clean.height(), clean.width(), t)?)?;
        Ok(Self {
            id: record.id.clone(),
            density: record.density,
            split: record.split,
            clean,
            smoke,
            mask: SmokeMaskImage::new(mask)?,
            t,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Output `(height, width)`; sources are resized to it.
    pub size: (usize, usize),
    /// Fraction of source images (not samples) held out for testing.
    pub test_fraction: f64,
    pub smoke: SmokeParams,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            size: (256, 256),
            test_fraction: 0.25,
            smoke: SmokeParams::default(),
            exec: Execution::Parallel,
        }
    }
}

impl BuildOptions {
    /// 64x64 frames for CPU-sized experiments.
    pub fn desk() -> Self {
        Self {
            size: (64, 64),
            ..Self::default()
        }
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && is_image {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Builds a dataset from the first `count` images (sorted by name) of `clean_dir`.
pub fn build_dataset(
    clean_dir: &Path,
    out_dir: &Path,
    count: usize,
    seed: u64,
    opts: &BuildOptions,
) -> Result<DatasetManifest> {
    if !clean_dir.is_dir() {
        return Err(Error::io(
            clean_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "clean image directory not found"),
        ));
    }
    let mut files = list_images(clean_dir)?;
    if files.is_empty() || count == 0 {
        return Err(Error::EmptyDataset(format!(
            "no readable images in {}",
            clean_dir.display()
        )));
    }
    if files.len() < count {
        log::warn!(
            "{} holds {} images, fewer than the requested {count}",
            clean_dir.display(),
            files.len()
        );
    }
    files.truncate(count);
    let (h, w) = opts.size;
    let images = parallel::map(opts.exec, &files, |f| ImageRgb::load_resized(f, h, w))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    build_dataset_from_images(&images, out_dir, seed, opts)
}

/// Synthesises three density levels per source image and writes the dataset.
pub fn build_dataset_from_images(
    images: &[ImageRgb],
    out_dir: &Path,
    seed: u64,
    opts: &BuildOptions,
) -> Result<DatasetManifest> {
    if images.is_empty() {
        return Err(Error::EmptyDataset("no source images".into()));
    }
    if !(0.0..=1.0).contains(&opts.test_fraction) {
        return Err(Error::Config(format!(
            "test fraction {} outside [0, 1]",
            opts.test_fraction
        )));
    }
    for img in images {
        if img.dims() != opts.size {
            return Err(Error::Shape(format!(
                "source image {}x{} does not match dataset size {:?}",
                img.height(),
                img.width(),
                opts.size
            )));
        }
    }
    for sub in ["clean", "smoke", "mask"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let n = images.len();
    let mut n_test = (n as f64 * opts.test_fraction).round() as usize;
    if n_test == 0 && opts.test_fraction > 0.0 && n > 1 {
        n_test = 1;
    }
    let n_test = n_test.min(n);
    let jobs: Vec<(usize, DensityLevel)> = (0..n)
        .flat_map(|s| DensityLevel::ALL.map(|d| (s, d)))
        .collect();
    let records = parallel::map(opts.exec, &jobs, |&(src, density)| -> Result<SampleRecord> {
        let index = src * DensityLevel::ALL.len() + density.index();
        let id = format!("{index:06}");
        let sseed = sample_seed(seed, src, density);
        let clean = images[src].quantized();
        let sample = synthesize_sample_with(&clean, sseed, density, &opts.smoke)?;
        let name = format!("{id}_{density}.png");
        let rel = |dir: &str| format!("{dir}/{name}");
        sample.clean.save_png(out_dir.join(rel("clean")))?;
        sample.smoke.save_png(out_dir.join(rel("smoke")))?;
        sample.mask.image().save_png(out_dir.join(rel("mask")))?;
        Ok(SampleRecord {
            id,
            source: src,
            split: if src >= n - n_test { Split::Test } else { Split::Train },
            density,
            seed: sseed,
            clean: rel("clean"),
            smoke: rel("smoke"),
            mask: rel("mask"),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.into(),
        a_synth: A_SYNTH,
        image_size: opts.size,
        samples: records,
        root: out_dir.to_path_buf(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a manifest from a dataset directory or from the manifest file itself.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let (root, file) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (root, path.to_path_buf())
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(&file, e))?;
    manifest.root = root;
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::compose_unclamped;
    use crate::synth::generate_texture_corpus;

    fn small_opts() -> BuildOptions {
        BuildOptions {
            size: (32, 32),
            test_fraction: 0.25,
            ..BuildOptions::default()
        }
    }

    #[test]
    fn builds_three_samples_per_source_with_source_split() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = generate_texture_corpus(10, 1, (32, 32)).unwrap();
        let m = build_dataset_from_images(&imgs, dir.path(), 9, &small_opts()).unwrap();
        assert_eq!(m.samples.len(), 30);
        // 10 sources, 25% test -> 3 test sources -> 9 samples
        assert_eq!(m.count(Split::Test), 9);
        for src in 0..10 {
            let splits: HashSet<Split> = m
                .samples
                .iter()
                .filter(|s| s.source == src)
                .map(|s| s.split)
                .collect();
            assert_eq!(splits.len(), 1);
        }
        let back = load_manifest(dir.path()).unwrap();
        assert_eq!(back, m);
        assert!(dir.path().join("smoke/000004_medium.png").is_file());
    }

    #[test]
    fn reloaded_samples_match_the_model_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = generate_texture_corpus(2, 4, (32, 32)).unwrap();
        let m = build_dataset_from_images(&imgs, dir.path(), 3, &small_opts()).unwrap();
        for r in &m.samples {
            let s = m.load_sample(r).unwrap();
            let recomposed = compose_unclamped(&s.clean, &s.t, m.a_synth).unwrap();
            for (a, b) in recomposed.data().iter().zip(s.smoke.data()) {
                assert!((a - b).abs() <= 2.0 / 255.0);
            }
        }
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let imgs = generate_texture_corpus(3, 8, (32, 32)).unwrap();
        let opts = small_opts();
        build_dataset_from_images(&imgs, d1.path(), 5, &opts).unwrap();
        let seq = BuildOptions {
            exec: Execution::Sequential,
            ..opts
        };
        build_dataset_from_images(&imgs, d2.path(), 5, &seq).unwrap();
        let a = fs::read(d1.path().join(MANIFEST_FILE)).unwrap();
        let b = fs::read(d2.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(a, b);
        let a = fs::read(d1.path().join("smoke/000002_heavy.png")).unwrap();
        let b = fs::read(d2.path().join("smoke/000002_heavy.png")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn from_directory_and_error_paths() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        for (i, img) in generate_texture_corpus(4, 2, (40, 36)).unwrap().iter().enumerate() {
            img.save_png(src.path().join(format!("f{i}.png"))).unwrap();
        }
        std::fs::write(src.path().join("notes.txt"), "ignored").unwrap();
        let m = build_dataset(src.path(), out.path(), 3, 1, &small_opts()).unwrap();
        assert_eq!(m.samples.len(), 9);
        assert_eq!(m.image_size, (32, 32));

        let missing = src.path().join("nope");
        let err = build_dataset(&missing, out.path(), 3, 1, &small_opts()).unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");

        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            build_dataset(empty.path(), out.path(), 3, 1, &small_opts()),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn manifest_validation_catches_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = generate_texture_corpus(1, 1, (32, 32)).unwrap();
        build_dataset_from_images(&imgs, dir.path(), 1, &small_opts()).unwrap();
        fs::remove_file(dir.path().join("mask/000001_medium.png")).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::Format { .. })));
    }
}
