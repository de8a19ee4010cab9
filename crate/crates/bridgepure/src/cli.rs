//! The `bridgepure` command line.

use std::fs;
use std::path::{Path, PathBuf};

use bridgepure_core::bridge_math::ScheduleMode;
use bridgepure_core::classifier::ClassifierArch;
use bridgepure_core::dataset::Dataset;
use bridgepure_core::eval;
use bridgepure_core::pairing::{self, LeakageRequest};
use bridgepure_core::protections::{Preprocess, ProtectionKind, ProtectionSpec, Protector};
use bridgepure_core::sampler;
use bridgepure_core::score_model::{self, Architecture, PairSet};
use bridgepure_core::synth::{self, SynthConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::config::{BridgeSection, Diagnostic, ExperimentConfig, Frac, ProtectionSection, SamplerSection};
use crate::error::{Error, IoContext};
use crate::experiment::{self, Plan};
use crate::{archive, checkpoint, imageio};

#[derive(Debug, Parser)]
#[command(name = "bridgepure", version, about = "Purify protected image data with a diffusion bridge learned from leaked pairs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled image folder.
    GenData(GenData),
    /// Protect a labeled image folder (the black-box protection service).
    Protect(Protect),
    /// Query the protection on reference images and store the pairs.
    Harvest(Harvest),
    /// Train a bridge model on a pair archive.
    Train(Train),
    /// Purify a protected image folder with a trained model.
    Purify(Purify),
    /// Train classifiers and/or measure PSNR and SSIM.
    Evaluate(Evaluate),
    /// Run a full experiment from a JSON config.
    Experiment(Experiment),
    /// Summarize a finished run and re-render its plots.
    Report(ReportCmd),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpecKind {
    ClasswiseLinf,
    OnePixel,
    PatchL2,
    Mixture,
}

impl From<SpecKind> for ProtectionKind {
    fn from(k: SpecKind) -> Self {
        match k {
            SpecKind::ClasswiseLinf => Self::ClasswiseLinf,
            SpecKind::OnePixel => Self::OnePixel,
            SpecKind::PatchL2 => Self::PatchL2,
            SpecKind::Mixture => Self::Mixture,
        }
    }
}

#[derive(Debug, Args)]
pub struct SpecArgs {
    #[arg(long, value_enum)]
    pub spec: SpecKind,
    /// Budget; accepts fractions such as 8/255. Defaults per protection.
    #[arg(long)]
    pub epsilon: Option<Frac>,
    #[arg(long, default_value_t = 0)]
    pub pattern_seed: u64,
    /// Number of classes; defaults to one more than the largest label.
    #[arg(long)]
    pub classes: Option<usize>,
}

impl SpecArgs {
    fn resolve(&self, data: &Dataset) -> Result<ProtectionSpec, CliError> {
        let shape = data.shape().ok_or_else(|| CliError::Usage("input folder holds no images".into()))?;
        let classes = self.classes.unwrap_or_else(|| data.class_count());
        let section = ProtectionSection { kind: self.spec.into(), epsilon: self.epsilon, pattern_seed: Some(self.pattern_seed) };
        let spec = section.resolve(shape, classes, 0, "protection");
        spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Args)]
pub struct Protect {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Harvest {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Folder of clean reference images.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long, conflicts_with = "per_class", required_unless_present = "per_class")]
    pub n: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Comma-separated classes to harvest from.
    #[arg(long, value_delimiter = ',')]
    pub classes_filter: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Schedule {
    Ve,
    Vp,
}

#[derive(Debug, Args)]
pub struct Train {
    #[arg(long)]
    pub pairs: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Schedule::Ve)]
    pub schedule: Schedule,
    #[arg(long, default_value_t = 20000)]
    pub steps: u64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 512)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    /// Use a convolutional U-net with this base width instead of the MLP.
    #[arg(long)]
    pub unet: Option<usize>,
    #[arg(long, default_value_t = Frac(0.05))]
    pub sigma_delta: Frac,
    #[arg(long, default_value_t = 0.995)]
    pub ema: f64,
    /// Gaussian pre-processing strength applied to the protected halves.
    #[arg(long, default_value_t = Frac(0.0))]
    pub beta: Frac,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct Purify {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Sampling randomness in [0, 1]; 0 is deterministic.
    #[arg(long, default_value_t = Frac(0.0))]
    pub s: Frac,
    #[arg(long, default_value_t = 40)]
    pub steps: usize,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long, default_value_t = Frac(0.0))]
    pub beta: Frac,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    Cnn,
    Mlp,
    Linear,
}

#[derive(Debug, Args)]
pub struct Evaluate {
    /// Training folder for the classifier.
    #[arg(long, requires = "test")]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Clean folder for PSNR/SSIM.
    #[arg(long, requires = "candidate")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub candidate: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, value_enum, default_value_t = Arch::Cnn)]
    pub arch: Arch,
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the results here as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Experiment {
    #[arg(long)]
    pub config: PathBuf,
    /// Print the stage plan and exit without writing anything.
    #[arg(long)]
    pub dry_run: bool,
    /// Run directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override a config value, e.g. `--set sampler.s=0.8` or `--set protection.epsilon="8/255"`.
    #[arg(long = "set", value_name = "PATH=JSON")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct ReportCmd {
    #[arg(long)]
    pub run: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {diag}")]
    Config { path: PathBuf, diag: Diagnostic },
    #[error(transparent)]
    Run(#[from] Error),
}

impl From<bridgepure_core::Error> for CliError {
    fn from(e: bridgepure_core::Error) -> Self {
        Self::Run(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config { .. } => 2,
            Self::Run(_) => 1,
        }
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 1 on runtime failure, 2 on usage or
/// configuration errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Protect(a) => protect(a),
        Command::Harvest(a) => harvest(a),
        Command::Train(a) => train(a),
        Command::Purify(a) => purify(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Experiment(a) => run_experiment(a),
        Command::Report(a) => report(a),
    }
}

fn gen_data(a: GenData) -> Result<(), CliError> {
    let cfg = SynthConfig { size: a.size, classes: a.classes, seed: a.seed, ..SynthConfig::default() };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let data = synth::generate(&cfg, a.count)?;
    imageio::write_folder(&a.out, &data)?;
    println!("wrote {} images to {}", data.len(), a.out.display());
    Ok(())
}

fn protect(a: Protect) -> Result<(), CliError> {
    let data = imageio::read_folder(&a.input)?;
    let spec = a.spec.resolve(&data)?;
    let out = Protector::new(&spec, data.shape().expect("non-empty"))?.protect_dataset(&data)?;
    imageio::write_folder(&a.out, &out)?;
    println!("protected {} images with {}", out.len(), spec.id());
    Ok(())
}

fn harvest(a: Harvest) -> Result<(), CliError> {
    let reference = imageio::read_folder(&a.reference)?;
    let spec = a.spec.resolve(&reference)?;
    let request = LeakageRequest { n: a.n, class_filter: a.classes_filter, per_class: a.per_class };
    let protector = Protector::new(&spec, reference.shape().expect("non-empty"))?;
    let pairs = pairing::harvest_leakage(&protector, &reference, &request, a.seed)?;
    let manifest = archive::write_archive(&a.out, &pairs)?;
    println!("harvested {} pairs into {} (manifest {})", pairs.len(), a.out.display(), &manifest.manifest_hash[..12]);
    Ok(())
}

fn train(a: Train) -> Result<(), CliError> {
    let pairs = archive::read_archive(&a.pairs)?;
    let first = pairs.records.first().ok_or_else(|| CliError::Usage("pair archive is empty".into()))?;
    let shape = first.clean.shape;
    let section = BridgeSection {
        schedule: match a.schedule {
            Schedule::Ve => ScheduleMode::Ve,
            Schedule::Vp => ScheduleMode::Vp,
        },
        architecture: match a.unet {
            Some(base_channels) => Architecture::UNet { base_channels },
            None => Architecture::Mlp { hidden: a.hidden, depth: a.depth },
        },
        sigma_delta: a.sigma_delta.0,
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        ema_decay: a.ema,
        ..BridgeSection::default()
    };
    let pre = Preprocess { beta: a.beta.0, seed: a.seed };
    pre.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let x_end = pre.apply_dataset(&pairs.protected_dataset());
    let mut set = PairSet::new(shape.len());
    for (r, e) in pairs.records.iter().zip(x_end.iter()) {
        set.push(&r.clean.data, &e.image.data)?;
    }
    let tc = section.train(a.seed);
    tc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut curve = score_model::LossCurve::default();
    let model = score_model::fit(section.schedule(), section.model(shape, a.seed), &set, &tc, &mut curve)?;
    checkpoint::save(&a.out, &model, None, Some(a.seed))?;
    let tail = &curve.0[curve.0.len().saturating_sub(100)..];
    println!(
        "trained {} steps on {} pairs; final loss {:.6}; wrote {}",
        tc.steps,
        set.len(),
        tail.iter().sum::<f64>() / tail.len() as f64,
        a.out.display()
    );
    Ok(())
}

fn purify(a: Purify) -> Result<(), CliError> {
    let (model, _) = checkpoint::load(&a.model)?;
    let data = imageio::read_folder(&a.input)?;
    let section = SamplerSection { steps: a.steps, guidance: a.guidance, batch_size: a.batch_size, ..SamplerSection::default() };
    let cfg = section.resolve(&model.schedule, a.s.0, a.seed);
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let pre = Preprocess { beta: a.beta.0, seed: a.seed };
    pre.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let input = pre.apply_dataset(&data);
    let out = sampler::purify_dataset(&model, &input, &cfg, a.batch_size, |p| {
        eprintln!("purified {}/{}", p.done, p.total);
    })?;
    let mut purified = out.dataset;
    for s in &mut purified.samples {
        s.image.quantize();
    }
    imageio::write_folder(&a.out, &purified)?;
    for (id, e) in &out.faults {
        eprintln!("warning: {id} not purified: {e}");
    }
    println!("purified {} images into {}", purified.len(), a.out.display());
    if out.faults.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} images could not be purified", out.faults.len())).into())
    }
}

fn evaluate(a: Evaluate) -> Result<(), CliError> {
    if a.train.is_none() && a.reference.is_none() {
        return Err(CliError::Usage("give --train/--test for accuracy and/or --reference/--candidate for fidelity".into()));
    }
    let mut result = serde_json::Map::new();
    if let (Some(train), Some(test)) = (&a.train, &a.test) {
        let (train, test) = (imageio::read_folder(train)?, imageio::read_folder(test)?);
        let classes = a.classes.unwrap_or_else(|| train.class_count().max(test.class_count()));
        let arch = match a.arch {
            Arch::Cnn => ClassifierArch::ResidualCnn { width: 16 },
            Arch::Mlp => ClassifierArch::Mlp { hidden: 256 },
            Arch::Linear => ClassifierArch::Linear,
        };
        let mut cfg = crate::config::EvalSection::default().resolve(a.seed);
        cfg.classifier.arch = arch;
        cfg.classifier.epochs = a.epochs;
        cfg.trials = a.trials;
        let r = eval::train_and_score(&train, &test, classes, &cfg)?;
        match r.std {
            Some(sd) => println!("accuracy {:.4} ± {:.4} over {} trials", r.mean, sd, r.trials.len()),
            None => println!("accuracy {:.4} (std n/a, {} trial)", r.mean, r.trials.len()),
        }
        if r.failed_trials() > 0 {
            println!("{} trial(s) diverged and were excluded", r.failed_trials());
        }
        result.insert("accuracy".into(), serde_json::to_value(&r).expect("serializable"));
    }
    if let (Some(reference), Some(candidate)) = (&a.reference, &a.candidate) {
        let f = eval::image_fidelity(&imageio::read_folder(reference)?, &imageio::read_folder(candidate)?)?;
        println!("PSNR {:.3} ± {:.3} dB  SSIM {:.4} ± {:.4}", f.psnr.mean, f.psnr.std, f.ssim.mean, f.ssim.std);
        result.insert("fidelity".into(), serde_json::to_value(&f).expect("serializable"));
    }
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&Value::Object(result)).expect("serializable");
        fs::write(path, text + "\n").at(path)?;
    }
    Ok(())
}

/// Sets `path` (dot-separated) in a JSON object tree, creating objects as needed.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), String> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        if p.is_empty() {
            return Err(format!("empty segment in `{path}`"));
        }
        let obj = match cur {
            Value::Object(m) => m,
            other if other.is_null() => {
                *other = json!({});
                other.as_object_mut().expect("object")
            }
            _ => return Err(format!("`{}` is not an object", parts[..i].join("."))),
        };
        if i + 1 == parts.len() {
            obj.insert((*p).to_string(), value);
            return Ok(());
        }
        cur = obj.entry((*p).to_string()).or_insert(Value::Null);
    }
    unreachable!("path has at least one segment")
}

/// Reads a config file and applies `--set` overrides and flags.
pub fn load_config(
    path: &Path,
    overrides: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).at(path)?;
    let mut cfg = ExperimentConfig::parse(&text).map_err(|diag| CliError::Config { path: path.into(), diag })?;
    if !overrides.is_empty() {
        let mut v = serde_json::to_value(&cfg).expect("config serializes");
        for o in overrides {
            let (k, raw) = o.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects PATH=VALUE, got `{o}`")))?;
            let val = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, k.trim(), val).map_err(|m| CliError::Usage(format!("--set {o}: {m}")))?;
        }
        let diag = |message: String| CliError::Config {
            path: path.into(),
            diag: Diagnostic { line: None, column: None, message: format!("after --set overrides: {message}") },
        };
        cfg = serde_json::from_value(v).map_err(|e| diag(e.to_string()))?;
        cfg.validate().map_err(|(_, m)| diag(m))?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = Some(o.to_path_buf());
    }
    Ok(cfg)
}

fn run_experiment(a: Experiment) -> Result<(), CliError> {
    let cfg = load_config(&a.config, &a.overrides, a.seed, a.out.as_deref())?;
    let dir = experiment::run_dir(&cfg);
    if a.dry_run {
        let plan = Plan::new(&cfg)?;
        println!("config {} -> {}", &cfg.hash()[..12], dir.display());
        for st in plan.stages() {
            let status = if dir.join("stages").join(&st.dir).join("stage.json").exists() { "cached" } else { "pending" };
            println!("  {:<8} {}", status, st.dir);
        }
        return Ok(());
    }
    let quiet = a.quiet;
    let mut log = |m: &str| {
        if !quiet {
            eprintln!("{m}");
        }
    };
    let report = experiment::run_experiment(&cfg, &dir, &mut log)?;
    print!("{}", experiment::summarize(&report));
    println!("run directory: {}", dir.display());
    Ok(())
}

fn report(a: ReportCmd) -> Result<(), CliError> {
    let r = experiment::read_report(&a.run)?;
    experiment::write_plots(&a.run.join("plots"), &r)?;
    print!("{}", experiment::summarize(&r));
    Ok(())
}
