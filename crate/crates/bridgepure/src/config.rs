//! Experiment configuration: JSON text, canonical hashing and diagnostics.

use std::fmt;
use std::path::PathBuf;

use bridgepure_core::bridge_math::{NoiseSchedule, ScheduleMode};
use bridgepure_core::classifier::{ClassifierArch, ClassifierTrainConfig};
use bridgepure_core::eval::EvalConfig;
use bridgepure_core::image::Shape;
use bridgepure_core::pairing::LeakageRequest;
use bridgepure_core::protections::{ProtectionKind, ProtectionSpec};
use bridgepure_core::rng;
use bridgepure_core::sampler::SamplerConfig;
use bridgepure_core::score_model::{Architecture, ModelConfig, Preconditioning, TrainConfig, Weighting};
use bridgepure_core::synth::SynthConfig;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// A number given either as a JSON number or as a string such as `"8/255"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Frac(pub f64);

pub fn parse_fraction(s: &str) -> Result<f64, String> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (
                a.trim().parse().map_err(|_| format!("bad numerator in `{s}`"))?,
                b.trim().parse().map_err(|_| format!("bad denominator in `{s}`"))?,
            );
            if b == 0.0 {
                return Err(format!("zero denominator in `{s}`"));
            }
            a / b
        }
        None => s.parse().map_err(|_| format!("`{s}` is not a number or fraction"))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}

impl<'de> Deserialize<'de> for Frac {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Frac(v)),
            Raw::Text(s) => parse_fraction(&s).map(Frac).map_err(serde::de::Error::custom),
        }
    }
}

impl fmt::Display for Frac {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for Frac {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        parse_fraction(s).map(Frac)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_contrast")]
        contrast: f64,
        #[serde(default = "default_clutter")]
        clutter: f64,
    },
    /// A folder of `<id>.png` with `labels.csv`.
    Folder { path: PathBuf, classes: usize },
}

fn default_size() -> usize {
    32
}
fn default_classes() -> usize {
    10
}
fn default_noise() -> f64 {
    SynthConfig::default().noise
}
fn default_contrast() -> f64 {
    SynthConfig::default().contrast
}
fn default_clutter() -> f64 {
    SynthConfig::default().clutter
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::Synthetic {
            size: default_size(),
            classes: default_classes(),
            noise: default_noise(),
            contrast: default_contrast(),
            clutter: default_clutter(),
        }
    }
}

impl DatasetSpec {
    pub fn classes(&self) -> usize {
        match self {
            Self::Synthetic { classes, .. } | Self::Folder { classes, .. } => *classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub protect: usize,
    pub reference: usize,
    pub test: usize,
}

impl Default for Splits {
    fn default() -> Self {
        Self { protect: 5000, reference: 1000, test: 1000 }
    }
}

/// Protection as written in a config; budgets default per kind and the
/// pattern seed defaults to one derived from the global seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtectionSection {
    pub kind: ProtectionKind,
    #[serde(default)]
    pub epsilon: Option<Frac>,
    #[serde(default)]
    pub pattern_seed: Option<u64>,
}

impl Default for ProtectionSection {
    fn default() -> Self {
        Self { kind: ProtectionKind::ClasswiseLinf, epsilon: None, pattern_seed: None }
    }
}

impl ProtectionSection {
    pub fn resolve(&self, shape: Shape, classes: usize, global_seed: u64, tag: &str) -> ProtectionSpec {
        let seed = self.pattern_seed.unwrap_or_else(|| rng::derive_seed(global_seed, tag));
        let eps = self.epsilon.map(|f| f.0);
        match self.kind {
            ProtectionKind::ClasswiseLinf => ProtectionSpec::classwise_linf(eps.unwrap_or(8.0 / 255.0), classes, seed),
            ProtectionKind::OnePixel => {
                let mut s = ProtectionSpec::one_pixel(classes, seed);
                if let Some(e) = eps {
                    s.epsilon = e;
                }
                s
            }
            ProtectionKind::PatchL2 => {
                ProtectionSpec::patch_l2(eps.unwrap_or_else(|| ProtectionSpec::default_l2_epsilon(shape)), classes, seed)
            }
            ProtectionKind::Mixture => ProtectionSpec::default_mixture(shape, classes, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeSection {
    pub schedule: ScheduleMode,
    pub architecture: Architecture,
    pub sigma_delta: f64,
    pub time_features: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub weighting: Weighting,
    pub t_pad_fraction: f64,
}

impl Default for BridgeSection {
    fn default() -> Self {
        Self {
            schedule: ScheduleMode::Ve,
            architecture: Architecture::Mlp { hidden: 512, depth: 2 },
            sigma_delta: 0.05,
            time_features: 16,
            steps: 20000,
            batch_size: 64,
            learning_rate: 1e-3,
            ema_decay: 0.995,
            weighting: Weighting::X0Mse,
            t_pad_fraction: 1e-3,
        }
    }
}

impl BridgeSection {
    pub fn schedule(&self) -> NoiseSchedule {
        match self.schedule {
            ScheduleMode::Ve => NoiseSchedule::default_ve(),
            ScheduleMode::Vp => NoiseSchedule::default_vp(),
        }
    }

    pub fn model(&self, shape: Shape, init_seed: u64) -> ModelConfig {
        ModelConfig {
            shape,
            architecture: self.architecture,
            time_features: self.time_features,
            preconditioning: Preconditioning::Bridge { sigma_delta: self.sigma_delta },
            init_seed,
        }
    }

    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weighting: self.weighting,
            t_pad_fraction: self.t_pad_fraction,
            ema_decay: self.ema_decay,
            checkpoint_every: 0,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: usize,
    pub s: f64,
    /// Defaults to 0.5 for VE and 1.0 for VP.
    pub guidance: Option<f64>,
    pub warp: f64,
    pub batch_size: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { steps: 40, s: 0.0, guidance: None, warp: 2.0, batch_size: 256 }
    }
}

impl SamplerSection {
    pub fn resolve(&self, schedule: &NoiseSchedule, s: f64, seed: u64) -> SamplerConfig {
        let base = SamplerConfig::for_schedule(schedule);
        SamplerConfig {
            steps: self.steps,
            s,
            guidance: self.guidance.unwrap_or(base.guidance),
            warp: self.warp,
            clamp: true,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub beta: Frac,
}

impl Default for Frac {
    fn default() -> Self {
        Frac(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    #[serde(default)]
    pub s: Vec<f64>,
    #[serde(default)]
    pub beta: Vec<Frac>,
    #[serde(default)]
    pub n: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub classifier: ClassifierTrainConfig,
    pub trials: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            classifier: ClassifierTrainConfig {
                arch: ClassifierArch::ResidualCnn { width: 16 },
                epochs: 15,
                learning_rate: 0.05,
                ..ClassifierTrainConfig::default()
            },
            trials: 1,
        }
    }
}

impl EvalSection {
    pub fn resolve(&self, seed: u64) -> EvalConfig {
        EvalConfig { classifier: self.classifier.clone(), trials: self.trials, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// Run directory; defaults to `$BRIDGEPURE_RUNS_DIR/<name>-<hash>`.
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub splits: Splits,
    /// Protection applied to the data being purified.
    pub protection: ProtectionSection,
    /// Protection queried for leaked pairs; defaults to `protection`.
    /// Setting it differently gives a transfer run.
    pub leak_protection: Option<ProtectionSection>,
    pub leakage: LeakageRequest,
    pub bridge: BridgeSection,
    pub sampler: SamplerSection,
    pub preprocess: PreprocessSection,
    pub grid: GridSection,
    pub eval: EvalSection,
    /// Also score the dilution baseline: protected data plus the clean
    /// halves of the leaked pairs.
    pub dilution: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            output_dir: None,
            dataset: DatasetSpec::default(),
            splits: Splits::default(),
            protection: ProtectionSection::default(),
            leak_protection: None,
            leakage: LeakageRequest::total(500),
            bridge: BridgeSection::default(),
            sampler: SamplerSection::default(),
            preprocess: PreprocessSection::default(),
            grid: GridSection::default(),
            eval: EvalSection::default(),
            dilution: false,
        }
    }
}

/// A configuration problem with the 1-based line it refers to, if known.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "line {l}, column {c}: {}", self.message),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            _ => write!(f, "{}", self.message),
        }
    }
}

/// Line of the first occurrence of `"key"` in `text`.
fn locate(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, Diagnostic> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Diagnostic {
            line: (e.line() > 0).then_some(e.line()),
            column: (e.column() > 0).then_some(e.column()),
            message: e.to_string().split(" at line ").next().unwrap_or_default().to_string(),
        })?;
        cfg.validate().map_err(|(key, message)| Diagnostic { line: locate(text, key), column: None, message })?;
        Ok(cfg)
    }

    /// Semantic checks; errors name the offending key.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let classes = self.dataset.classes();
        if classes == 0 {
            return Err(("classes", "the dataset needs at least one class".into()));
        }
        if let DatasetSpec::Synthetic { size, classes, noise, contrast, clutter } = &self.dataset {
            SynthConfig { size: *size, classes: *classes, noise: *noise, contrast: *contrast, clutter: *clutter, seed: 0 }
                .validate()
                .map_err(|e| ("dataset", e.to_string()))?;
        }
        if self.splits.protect == 0 || self.splits.test == 0 {
            return Err(("splits", "protect and test splits must be non-empty".into()));
        }
        let ns = self.grid_n();
        if self.leakage.per_class.is_none() && ns.is_empty() {
            return Err(("leakage", "leakage needs `n` or `per_class`".into()));
        }
        if let Some(f) = &self.leakage.class_filter {
            if let Some(c) = f.iter().find(|&&c| c >= classes) {
                return Err(("class_filter", format!("class {c} out of range for {classes} classes")));
            }
        }
        for &n in &ns {
            if n > self.splits.reference {
                return Err(("n", format!("{n} pairs requested but the reference split holds {}", self.splits.reference)));
            }
        }
        for s in self.grid_s() {
            if !(0.0..=1.0).contains(&s) {
                return Err(("s", format!("sampling randomness {s} outside [0, 1]")));
            }
        }
        for b in self.grid_beta() {
            if !(0.0..=1.0).contains(&b) {
                return Err(("beta", format!("beta {b} outside [0, 1]")));
            }
        }
        if self.sampler.steps == 0 || self.sampler.batch_size == 0 {
            return Err(("sampler", "sampler steps and batch_size must be positive".into()));
        }
        if let Some(e) = self.protection.epsilon {
            if e.0 < 0.0 {
                return Err(("epsilon", format!("budget {} must be non-negative", e.0)));
            }
        }
        self.bridge.train(0).validate().map_err(|e| ("bridge", e.to_string()))?;
        self.eval.resolve(0).validate().map_err(|e| ("eval", e.to_string()))?;
        Ok(())
    }

    pub fn grid_s(&self) -> Vec<f64> {
        if self.grid.s.is_empty() {
            vec![self.sampler.s]
        } else {
            self.grid.s.clone()
        }
    }

    pub fn grid_beta(&self) -> Vec<f64> {
        if self.grid.beta.is_empty() {
            vec![self.preprocess.beta.0]
        } else {
            self.grid.beta.iter().map(|b| b.0).collect()
        }
    }

    /// Leakage sizes to sweep; empty when leakage is given per class.
    pub fn grid_n(&self) -> Vec<usize> {
        if self.leakage.per_class.is_some() {
            Vec::new()
        } else if self.grid.n.is_empty() {
            self.leakage.n.into_iter().collect()
        } else {
            self.grid.n.clone()
        }
    }

    /// Canonical JSON: object keys sorted, no whitespace. The output
    /// directory is excluded because it does not affect results.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("output_dir");
        }
        canonical(&v)
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Seed of a named stage.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        rng::derive_seed(self.seed, stage)
    }
}

/// Serializes a JSON value with sorted keys and no insignificant whitespace.
pub fn canonical(v: &Value) -> String {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let body: Vec<String> =
                keys.iter().map(|k| format!("{}:{}", Value::String((*k).clone()), canonical(&m[*k]))).collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

/// Content hash of any serializable value in canonical form.
pub fn hash_of<T: Serialize>(v: &T) -> String {
    let value = serde_json::to_value(v).expect("value serializes");
    hex::encode(Sha256::digest(canonical(&value).as_bytes()))
}
