//! Per-sample evaluation of a restoration method against clean references.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::metrics::{psnr, ssim};
use crate::parallel::{self, Execution};
use crate::synth::{DensityLevel, LoadedSample};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// JSON has no infinity; non-finite values travel as the strings
/// `"inf"`, `"-inf"` and `"nan"`.
mod lenient_f64 {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad number {other:?}"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    pub density: DensityLevel,
    #[serde(with = "lenient_f64")]
    pub psnr_in: f64,
    #[serde(with = "lenient_f64")]
    pub psnr_out: f64,
    pub ssim_in: f64,
    pub ssim_out: f64,
    /// Reserved for metrics computed by external tools and merged in later.
    #[serde(default)]
    pub external: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    #[serde(with = "lenient_f64")]
    pub psnr_in: f64,
    #[serde(with = "lenient_f64")]
    pub psnr_out: f64,
    #[serde(with = "lenient_f64")]
    pub ssim_in: f64,
    #[serde(with = "lenient_f64")]
    pub ssim_out: f64,
}

impl Aggregate {
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a SampleRow>) -> Self {
        let mut n = 0;
        let mut sums = [0.0; 4];
        for r in rows {
            n += 1;
            sums[0] += r.psnr_in;
            sums[1] += r.psnr_out;
            sums[2] += r.ssim_in;
            sums[3] += r.ssim_out;
        }
        let d = if n == 0 { f64::NAN } else { n as f64 };
        Self {
            count: n,
            psnr_in: sums[0] / d,
            psnr_out: sums[1] / d,
            ssim_in: sums[2] / d,
            ssim_out: sums[3] / d,
        }
    }

    pub fn psnr_gain(&self) -> f64 {
        self.psnr_out - self.psnr_in
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub method: String,
    pub rows: Vec<SampleRow>,
    pub failures: Vec<Failure>,
    pub aggregate: Aggregate,
    pub per_density: BTreeMap<DensityLevel, Aggregate>,
}

impl EvalReport {
    fn from_rows(method: &str, mut rows: Vec<SampleRow>, mut failures: Vec<Failure>) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        failures.sort_by(|a, b| a.id.cmp(&b.id));
        let aggregate = Aggregate::of(&rows);
        let per_density = DensityLevel::ALL
            .into_iter()
            .filter_map(|d| {
                let agg = Aggregate::of(rows.iter().filter(|r| r.density == d));
                (agg.count > 0).then_some((d, agg))
            })
            .collect();
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            method: method.to_string(),
            rows,
            failures,
            aggregate,
            per_density,
        }
    }

    /// Aligned plain-text table: one line per sample, then the aggregates.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method: {}", self.method);
        let _ = writeln!(
            s,
            "{:<12} {:<7} {:>9} {:>9} {:>8} {:>8}",
            "id", "density", "psnr_in", "psnr_out", "ssim_in", "ssim_out"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:<7} {:>9.3} {:>9.3} {:>8.4} {:>8.4}",
                r.id, r.density, r.psnr_in, r.psnr_out, r.ssim_in, r.ssim_out
            );
        }
        let _ = writeln!(s, "{}", "-".repeat(58));
        let mut line = |label: &str, a: &Aggregate| {
            let _ = writeln!(
                s,
                "{:<12} {:<7} {:>9.3} {:>9.3} {:>8.4} {:>8.4}",
                label, a.count, a.psnr_in, a.psnr_out, a.ssim_in, a.ssim_out
            );
        };
        for (d, a) in &self.per_density {
            line(&format!("mean:{d}"), a);
        }
        line("mean", &self.aggregate);
        if !self.failures.is_empty() {
            let _ = writeln!(s, "failures: {}", self.failures.len());
            for f in &self.failures {
                let _ = writeln!(s, "  {}: {}", f.id, f.reason);
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serialisable")
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        fs::write(&json, self.to_json() + "\n").map_err(|e| Error::io(&json, e))?;
        let txt = dir.join("report.txt");
        fs::write(&txt, self.table()).map_err(|e| Error::io(&txt, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Version {
                found: r.schema_version.to_string(),
                expected: REPORT_SCHEMA_VERSION.to_string(),
            });
        }
        Ok(r)
    }
}

fn score(id: &str, density: DensityLevel, input: &ImageRgb, clean: &ImageRgb, out: &ImageRgb) -> Result<SampleRow> {
    if out.dims() != clean.dims() {
        return Err(Error::Shape(format!(
            "output {:?} for reference {:?}",
            out.dims(),
            clean.dims()
        )));
    }
    let out = out.clamped();
    Ok(SampleRow {
        id: id.to_string(),
        density,
        psnr_in: psnr(input, clean)?,
        psnr_out: psnr(&out, clean)?,
        ssim_in: ssim(input, clean)?,
        ssim_out: ssim(&out, clean)?,
        external: BTreeMap::new(),
    })
}

/// Runs `method` on every sample's smoked frame and scores it against the
/// clean frame. Method errors and shape mismatches become [`Failure`]s.
pub fn evaluate<F>(samples: &[LoadedSample], label: &str, exec: Execution, method: F) -> EvalReport
where
    F: Fn(&LoadedSample) -> Result<ImageRgb> + Sync + Send,
{
    let results = parallel::map(exec, samples, |s| {
        method(s).and_then(|out| score(&s.id, s.density, &s.smoke, &s.clean, &out))
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (s, r) in samples.iter().zip(results) {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => failures.push(Failure {
                id: s.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    EvalReport::from_rows(label, rows, failures)
}

/// Scores precomputed outputs: `(id, density, input, clean, output)`.
pub fn evaluate_images(
    label: &str,
    items: &[(String, DensityLevel, ImageRgb, ImageRgb, ImageRgb)],
) -> EvalReport {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (id, d, input, clean, out) in items {
        match score(id, *d, input, clean, out) {
            Ok(r) => rows.push(r),
            Err(e) => failures.push(Failure {
                id: id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    EvalReport::from_rows(label, rows, failures)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_dataset_from_images, generate_texture_corpus, BuildOptions, Split};

    fn test_samples() -> Vec<LoadedSample> {
        let dir = tempfile::tempdir().unwrap();
        let imgs = generate_texture_corpus(4, 2, (24, 24)).unwrap();
        let opts = BuildOptions {
            size: (24, 24),
            test_fraction: 0.5,
            ..BuildOptions::default()
        };
        let m = build_dataset_from_images(&imgs, dir.path(), 1, &opts).unwrap();
        m.load_split(Split::Test, Execution::Sequential).unwrap()
    }

    #[test]
    fn identity_and_oracle_methods() {
        let samples = test_samples();
        let id = evaluate(&samples, "identity", Execution::Parallel, |s| Ok(s.smoke.clone()));
        assert_eq!(id.rows.len(), 6);
        for r in &id.rows {
            assert_eq!(r.psnr_in, r.psnr_out);
            assert_eq!(r.ssim_in, r.ssim_out);
        }
        let oracle = evaluate(&samples, "oracle", Execution::Sequential, |s| Ok(s.clean.clone()));
        for r in &oracle.rows {
            assert_eq!(r.psnr_out, f64::INFINITY);
            assert_eq!(r.ssim_out, 1.0);
        }
        assert_eq!(oracle.aggregate.psnr_out, f64::INFINITY);
        let json = oracle.to_json();
        assert!(json.contains("\"inf\""));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, oracle);
    }

    #[test]
    fn aggregates_match_rows_and_failures_are_counted() {
        let samples = test_samples();
        let r = evaluate(&samples, "half", Execution::Parallel, |s| {
            if s.id.ends_with('7') {
                Ok(ImageRgb::filled(8, 8, 0.0))
            } else {
                Ok(s.smoke.map(|v| 0.9 * v))
            }
        });
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.rows.len() + r.failures.len(), samples.len());
        let n = r.rows.len() as f64;
        let mean = r.rows.iter().map(|x| x.psnr_out).sum::<f64>() / n;
        assert!((mean - r.aggregate.psnr_out).abs() < 1e-12);
        let total: usize = r.per_density.values().map(|a| a.count).sum();
        assert_eq!(total, r.rows.len());
        assert!(r.rows.windows(2).all(|w| w[0].id < w[1].id));
        assert!(r.table().contains("failures: 1"));
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        assert_eq!(EvalReport::load(&dir.path().join("report.json")).unwrap(), r);
    }
}
