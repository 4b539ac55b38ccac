mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{error::ErrorKind, Args, CommandFactory, Parser, Subcommand, ValueEnum};
use desmoke::image::ImageRgb;
use desmoke::metrics::{dcp_desmoke, evaluate, DcpConfig, EvalReport};
use desmoke::model::{Ablation, Ablations, ModelConfig};
use desmoke::parallel::Execution;
use desmoke::synth::{build_dataset, build_dataset_from_images, generate_texture_corpus, load_manifest, BuildOptions, Split, IMAGE_EXTENSIONS, MANIFEST_FILE};
use desmoke::train::{self, Checkpoint};

use config::RunConfig;

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "desmoke", version, about = "Surgical smoke removal: data synthesis, training, inference and evaluation")]
struct Cli {
    /// TOML file with run settings; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run data-parallel loops on a single thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Log verbosity (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesise a paired smoke dataset.
    Synth(SynthArgs),
    /// Train a network on a dataset.
    Train(TrainArgs),
    /// Desmoke an image or a directory of images.
    Infer(InferArgs),
    /// Score a method on a dataset's test split.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Generate this many procedural textures as clean sources.
    #[arg(long, conflicts_with = "source")]
    textures: Option<usize>,
    /// Directory of clean frames.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Use at most this many frames from --source.
    #[arg(long, requires = "source")]
    count: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Square frame side in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Reference,
    Desk,
    Tiny,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Switch off a component (repeatable): no_le, no_spe, no_rft.
    #[arg(long, value_parser = parse_ablation)]
    ablate: Vec<Ablation>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Architecture preset; replaces the config file's model section.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Image file or directory of images.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    Dcp,
    Identity,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, conflicts_with = "ckpt")]
    method: Option<Method>,
    /// Checkpoint directory to evaluate.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Report directory; defaults to `<data>/reports/<method>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse().map_err(|e: desmoke::Error| e.to_string())
}

/// Outcome of a command that ran to completion.
enum Status {
    Ok,
    Partial,
}

fn usage_error(msg: impl std::fmt::Display) -> ! {
    Cli::command().error(ErrorKind::MissingRequiredArgument, msg).exit()
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> T {
    v.clone().unwrap_or_else(|| usage_error(format!("{flag} is required (flag or config file)")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let mut cfg = match &cli.config {
        Some(p) => match RunConfig::load(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e:#}");
                return ExitCode::from(EXIT_USAGE);
            }
        },
        None => RunConfig::default(),
    };
    if cli.sequential {
        cfg.exec = Execution::Sequential;
    }
    let result = match cli.command {
        Command::Synth(a) => synth(cfg, a),
        Command::Train(a) => train_cmd(cfg, a),
        Command::Infer(a) => infer(cfg, a),
        Command::Eval(a) => eval(cfg, a),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(EXIT_PARTIAL),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn synth(mut cfg: RunConfig, a: SynthArgs) -> Result<Status> {
    cfg.command = "synth".into();
    let s = &mut cfg.synth;
    if a.textures.is_some() {
        s.textures = a.textures;
        s.source = None;
    }
    if a.source.is_some() {
        s.source = a.source;
        s.textures = None;
    }
    s.count = a.count.or(s.count);
    s.seed = a.seed.unwrap_or(s.seed);
    s.size = a.size.unwrap_or(s.size);
    s.test_fraction = a.test_fraction.unwrap_or(s.test_fraction);
    cfg.out = a.out.or(cfg.out);
    let out = required(&cfg.out, "--out");
    if cfg.synth.textures.is_none() && cfg.synth.source.is_none() {
        usage_error("one of --textures or --source is required");
    }

    let s = &cfg.synth;
    let opts = BuildOptions {
        size: (s.size, s.size),
        test_fraction: s.test_fraction,
        smoke: s.smoke,
        exec: cfg.exec,
    };
    let manifest = match (&s.source, s.textures) {
        (Some(src), _) => build_dataset(src, &out, s.count.unwrap_or(usize::MAX), s.seed, &opts)?,
        (None, Some(n)) => {
            let images = generate_texture_corpus(n, s.seed, opts.size)?;
            build_dataset_from_images(&images, &out, s.seed, &opts)?
        }
        (None, None) => unreachable!("checked above"),
    };
    cfg.write_to(&out)?;
    println!(
        "{} ({} train, {} test)",
        out.join(MANIFEST_FILE).display(),
        manifest.count(Split::Train),
        manifest.count(Split::Test)
    );
    Ok(Status::Ok)
}

fn train_cmd(mut cfg: RunConfig, a: TrainArgs) -> Result<Status> {
    cfg.command = "train".into();
    cfg.data = a.data.or(cfg.data);
    cfg.out = a.out.or(cfg.out);
    let t = &mut cfg.train;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.seed = a.seed.unwrap_or(t.seed);
    t.lr_init = a.lr.unwrap_or(t.lr_init);
    t.lr_min = t.lr_min.min(t.lr_init);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    if !a.ablate.is_empty() {
        t.ablations = Ablations::from_list(&a.ablate);
    }
    t.exec = cfg.exec;
    if let Some(p) = a.preset {
        cfg.model = match p {
            Preset::Reference => ModelConfig::reference(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Tiny => ModelConfig::tiny(),
        };
    }
    let data = required(&cfg.data, "--data");
    let out = required(&cfg.out, "--out");

    let manifest = load_manifest(&data)?;
    cfg.model.image_size = manifest.image_size;
    cfg.model.ablations = cfg.train.ablations;
    cfg.write_to(&out)?;
    let outcome = train::train(&manifest, &cfg.train, cfg.model.clone(), &out)?;
    let s = &outcome.summary;
    let last = s.history.last().expect("at least one epoch");
    println!(
        "trained {} for {} epochs ({} steps): train loss {:.6}, best epoch {}, checkpoints in {}",
        cfg.train.ablations.label(),
        s.history.len(),
        s.steps,
        last.train_loss,
        s.best_epoch,
        out.display()
    );
    Ok(Status::Ok)
}

fn image_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = fs::read_dir(input).with_context(|| format!("reading {}", input.display()))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e?.path();
        let ok = p
            .extension()
            .and_then(|x| x.to_str())
            .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()));
        if p.is_file() && ok {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn infer(mut cfg: RunConfig, a: InferArgs) -> Result<Status> {
    cfg.command = "infer".into();
    cfg.infer.ckpt = a.ckpt.or(cfg.infer.ckpt);
    cfg.infer.input = a.input.or(cfg.infer.input);
    cfg.out = a.out.or(cfg.out);
    let ckpt = required(&cfg.infer.ckpt, "--ckpt");
    let input = required(&cfg.infer.input, "--input");
    let out = required(&cfg.out, "--out");

    let ck = Checkpoint::load(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let model = ck.model()?;
    let files = image_files(&input)?;
    if files.is_empty() {
        bail!("no images found in {}", input.display());
    }
    cfg.write_to(&out)?;
    let mut failed = 0;
    for f in &files {
        let run = || -> Result<()> {
            let img = ImageRgb::load(f)?;
            let res = model.forward(&img)?;
            let stem = f
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| anyhow!("unusable file name"))?;
            res.desmoked.save_png(out.join(format!("{stem}_desmoked.png")))?;
            res.smoke_mask.image().save_png(out.join(format!("{stem}_mask.png")))?;
            Ok(())
        };
        if let Err(e) = run() {
            eprintln!("{}: {e:#}", f.display());
            failed += 1;
        }
    }
    println!("{} of {} images processed into {}", files.len() - failed, files.len(), out.display());
    match failed {
        0 => Ok(Status::Ok),
        n if n == files.len() => bail!("every input failed"),
        _ => Ok(Status::Partial),
    }
}

fn eval(mut cfg: RunConfig, a: EvalArgs) -> Result<Status> {
    cfg.command = "eval".into();
    cfg.data = a.data.or(cfg.data);
    if let Some(m) = a.method {
        cfg.eval.method = Some(format!("{m:?}").to_lowercase());
        cfg.eval.ckpt = None;
    }
    if a.ckpt.is_some() {
        cfg.eval.ckpt = a.ckpt;
        cfg.eval.method = None;
    }
    let data = required(&cfg.data, "--data");
    let manifest = load_manifest(&data)?;
    let samples = manifest.load_split(Split::Test, cfg.exec)?;
    if samples.is_empty() {
        bail!("{} has no test samples", data.display());
    }
    let (report, dir_name): (EvalReport, String) = match (&cfg.eval.method, &cfg.eval.ckpt) {
        (_, Some(ckpt)) => {
            let ck = Checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            let model = ck.model()?;
            let r = evaluate(&samples, &ck.id(), cfg.exec, |s| Ok(model.forward(&s.smoke)?.desmoked));
            (r, ck.id().replace(':', "_"))
        }
        (Some(m), None) if m == "dcp" => {
            let dcp = DcpConfig::default();
            let r = evaluate(&samples, "DCP", cfg.exec, |s| Ok(dcp_desmoke(&s.smoke, &dcp)?.image));
            (r, "dcp".into())
        }
        (Some(m), None) if m == "identity" => {
            let r = evaluate(&samples, "identity", cfg.exec, |s| Ok(s.smoke.clone()));
            (r, "identity".into())
        }
        (Some(m), None) => usage_error(format!("unknown method {m:?}; valid methods are dcp, identity")),
        (None, None) => usage_error("one of --method or --ckpt is required"),
    };
    cfg.out = a.out.or(cfg.out).or_else(|| Some(data.join("reports").join(dir_name)));
    let out = cfg.out.clone().expect("set above");
    report.write(&out)?;
    cfg.write_to(&out)?;
    print!("{}", report.table());
    println!("report written to {}", out.display());
    if report.failures.is_empty() {
        Ok(Status::Ok)
    } else {
        Ok(Status::Partial)
    }
}
