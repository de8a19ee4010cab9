//! Staged experiment runner.
//!
//! A run directory holds `config.json`, `stages/<stage>-<key>/`,
//! `report.json` and `plots/`. Every stage is keyed by a hash of its own
//! parameters and its parents' keys, so changing `beta` re-runs training and
//! purification while protection and the baselines stay cached. A stage
//! directory is only reused when its `stage.json` records the same key;
//! half-written stages are discarded and recomputed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use bridgepure_core::dataset::Dataset;
use bridgepure_core::eval::{self, AccuracyReport, Fidelity};
use bridgepure_core::pairing::{self, LeakageRequest, PairArchive};
use bridgepure_core::protections::{Preprocess, ProtectionSpec, Protector};
use bridgepure_core::sampler;
use bridgepure_core::score_model::{self, PairSet, ScoreModel, TrainObserver};
use bridgepure_core::synth::{self, SynthConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{hash_of, DatasetSpec, ExperimentConfig};
use crate::error::{Error, IoContext, Result};
use crate::plots::{self, Group};
use crate::{archive, checkpoint, imageio};

pub const REPORT_FORMAT: &str = "bridgepure-report";
pub const REPORT_VERSION: u32 = 1;

/// Default root for run directories when a config names none.
pub const RUNS_DIR_ENV: &str = "BRIDGEPURE_RUNS_DIR";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedStage {
    /// Directory name under `stages/`.
    pub dir: String,
    pub key: String,
    pub parents: Vec<String>,
}

/// One leakage level of the sweep.
#[derive(Debug, Clone, PartialEq)]
struct Leak {
    label: String,
    request: LeakageRequest,
    pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct CellKeys {
    leak: usize,
    beta: f64,
    s: f64,
    purify: PlannedStage,
    eval: PlannedStage,
}

/// Every stage of a run with its key; computing it touches no run files.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    data: PlannedStage,
    protect: PlannedStage,
    eval_clean: PlannedStage,
    eval_protected: PlannedStage,
    leaks: Vec<Leak>,
    harvest: Vec<PlannedStage>,
    dilution: Vec<Option<PlannedStage>>,
    /// Indexed `[leak][beta]`.
    train: Vec<Vec<PlannedStage>>,
    cells: Vec<CellKeys>,
}

fn short(key: &str) -> &str {
    &key[..12]
}

fn stage(prefix: &str, params: serde_json::Value, parents: &[&PlannedStage]) -> PlannedStage {
    let parents: Vec<String> = parents.iter().map(|p| p.key.clone()).collect();
    let key = hash_of(&json!({ "stage": prefix, "parents": parents, "params": params }));
    PlannedStage { dir: format!("{prefix}-{}", short(&key)), key, parents }
}

/// Digest of a dataset folder's `labels.csv` and images, so cached stages
/// notice edits to an input folder.
fn folder_fingerprint(dir: &Path) -> Result<String> {
    let csv = dir.join("labels.csv");
    let text = fs::read_to_string(&csv).at(&csv)?;
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    for (id, _) in imageio::parse_labels_csv(&csv, &text)? {
        let p = dir.join(format!("{id}.png"));
        h.update(fs::read(&p).at(&p)?);
    }
    Ok(hex::encode(h.finalize()))
}

impl Plan {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let fingerprint = match &cfg.dataset {
            DatasetSpec::Folder { path, .. } => Some(folder_fingerprint(path)?),
            DatasetSpec::Synthetic { .. } => None,
        };
        let seed = cfg.seed;
        let data =
            stage("data", json!({ "dataset": cfg.dataset, "fingerprint": fingerprint, "splits": cfg.splits, "seed": seed }), &[]);
        let protect = stage("protect", json!({ "protection": cfg.protection, "seed": seed }), &[&data]);
        let eval_params = json!({ "eval": cfg.eval, "seed": seed, "classes": cfg.dataset.classes() });
        let eval_clean = stage("eval-clean", eval_params.clone(), &[&data]);
        let eval_protected = stage("eval-protected", eval_params.clone(), &[&protect]);
        let leak_protection = cfg.leak_protection.as_ref().unwrap_or(&cfg.protection);

        let leaks: Vec<Leak> = match cfg.leakage.per_class {
            Some(k) => {
                let classes = cfg.leakage.class_filter.as_ref().map_or(cfg.dataset.classes(), Vec::len);
                vec![Leak { label: format!("pc{k}"), request: cfg.leakage.clone(), pairs: k * classes }]
            }
            None => cfg
                .grid_n()
                .into_iter()
                .map(|n| Leak {
                    label: format!("n{n}"),
                    request: LeakageRequest { n: Some(n), class_filter: cfg.leakage.class_filter.clone(), per_class: None },
                    pairs: n,
                })
                .collect(),
        };
        let mut plan = Plan {
            data,
            protect,
            eval_clean,
            eval_protected,
            leaks: Vec::new(),
            harvest: Vec::new(),
            dilution: Vec::new(),
            train: Vec::new(),
            cells: Vec::new(),
        };
        for (li, leak) in leaks.iter().enumerate() {
            let harvest = stage(
                &format!("harvest-{}", leak.label),
                json!({ "protection": leak_protection, "request": leak.request, "seed": seed }),
                &[&plan.data],
            );
            plan.dilution.push(
                cfg.dilution
                    .then(|| stage(&format!("eval-dilution-{}", leak.label), eval_params.clone(), &[&plan.protect, &harvest])),
            );
            let mut trains = Vec::new();
            for beta in cfg.grid_beta() {
                let train = stage(
                    &format!("train-{}-b{beta}", leak.label),
                    json!({ "bridge": cfg.bridge, "beta": beta, "seed": seed }),
                    &[&harvest],
                );
                for s in cfg.grid_s() {
                    let tag = format!("{}-b{beta}-s{s}", leak.label);
                    let purify = stage(
                        &format!("purify-{tag}"),
                        json!({ "sampler": cfg.sampler, "beta": beta, "s": s, "seed": seed }),
                        &[&train, &plan.protect],
                    );
                    let eval = stage(&format!("eval-purified-{tag}"), eval_params.clone(), &[&purify]);
                    plan.cells.push(CellKeys { leak: li, beta, s, purify, eval });
                }
                trains.push(train);
            }
            plan.harvest.push(harvest);
            plan.train.push(trains);
        }
        plan.leaks = leaks;
        Ok(plan)
    }

    /// Stages in execution order.
    pub fn stages(&self) -> Vec<&PlannedStage> {
        let mut out = vec![&self.data, &self.protect, &self.eval_clean, &self.eval_protected];
        for (li, h) in self.harvest.iter().enumerate() {
            out.push(h);
            if let Some(d) = &self.dilution[li] {
                out.push(d);
            }
            for t in &self.train[li] {
                out.push(t);
                for c in self.cells.iter().filter(|c| c.leak == li && c.purify.parents[0] == t.key) {
                    out.push(&c.purify);
                    out.push(&c.eval);
                }
            }
        }
        out
    }
}

/// Measurements for one training set (clean, protected, diluted or purified).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub accuracy: AccuracyReport,
    /// Against the clean protect split; absent for the clean baseline.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<Fidelity>,
    /// Mean accuracy over the leaked classes (partial-leakage runs only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub leaked_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub non_leaked_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub leakage: String,
    pub pairs: usize,
    pub beta: f64,
    pub s: f64,
    /// Images the sampler could not purify (dropped from training).
    pub faults: usize,
    pub purified: Condition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DilutionRow {
    pub leakage: String,
    pub pairs: usize,
    pub diluted: Condition,
}

/// The grid cell with the highest mean purified accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Best {
    pub leakage: String,
    pub beta: f64,
    pub s: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectionInfo {
    pub id: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub config_hash: String,
    pub classes: usize,
    pub protection: ProtectionInfo,
    pub leak_protection: ProtectionInfo,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub leaked_classes: Option<Vec<usize>>,
    pub clean: Condition,
    pub protected: Condition,
    pub purified: Vec<Cell>,
    pub best: Option<Best>,
    pub dilution: Vec<DilutionRow>,
    /// Stage directory name to key.
    pub stages: BTreeMap<String, String>,
}

impl Report {
    pub fn cell(&self, leakage: &str, beta: f64, s: f64) -> Option<&Cell> {
        self.purified.iter().find(|c| c.leakage == leakage && c.beta == beta && c.s == s)
    }
}

/// Exclusive ownership of a run directory; released on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "run directory {} is in use by another process (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Where a run lives when the config does not say.
pub fn default_run_dir(cfg: &ExperimentConfig) -> PathBuf {
    let root = std::env::var_os(RUNS_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(format!("{}-{}", cfg.name, &cfg.hash()[..12]))
}

pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| default_run_dir(cfg))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    fs::write(path, text).at(path)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

#[derive(Serialize, Deserialize)]
struct StageRecord {
    dir: String,
    key: String,
    parents: Vec<String>,
}

/// Outcome of one stage in a run, for logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Cached,
    Computed,
}

struct Runner<'a> {
    root: PathBuf,
    log: &'a mut dyn FnMut(&str),
    statuses: Vec<(String, StageStatus)>,
}

impl Runner<'_> {
    fn dir(&self, st: &PlannedStage) -> PathBuf {
        self.root.join("stages").join(&st.dir)
    }

    fn is_cached(&self, st: &PlannedStage) -> bool {
        let rec = self.dir(st).join("stage.json");
        read_json::<StageRecord>(&rec).is_ok_and(|r| r.key == st.key)
    }

    /// Runs `compute` into a scratch directory unless the stage is cached,
    /// then returns the stage directory.
    fn run(&mut self, st: &PlannedStage, compute: impl FnOnce(&Path, &mut dyn FnMut(&str)) -> Result<()>) -> Result<PathBuf> {
        let dir = self.dir(st);
        let wrap = |e: Error| Error::Stage { stage: st.dir.clone(), source: Box::new(e) };
        if self.is_cached(st) {
            (self.log)(&format!("[cached] {}", st.dir));
            self.statuses.push((st.dir.clone(), StageStatus::Cached));
            return Ok(dir);
        }
        (self.log)(&format!("[run] {}", st.dir));
        let scratch = dir.with_extension("partial");
        for d in [&scratch, &dir] {
            if d.exists() {
                fs::remove_dir_all(d).at(d).map_err(wrap)?;
            }
        }
        fs::create_dir_all(&scratch).at(&scratch).map_err(wrap)?;
        compute(&scratch, &mut *self.log).map_err(wrap)?;
        let rec = StageRecord { dir: st.dir.clone(), key: st.key.clone(), parents: st.parents.clone() };
        write_json(&scratch.join("stage.json"), &rec).map_err(wrap)?;
        fs::rename(&scratch, &dir).at(&dir).map_err(wrap)?;
        self.statuses.push((st.dir.clone(), StageStatus::Computed));
        Ok(dir)
    }
}

struct LogObserver<'a> {
    log: &'a mut dyn FnMut(&str),
    total: u64,
    window: Vec<f64>,
    curve: Vec<f64>,
}

impl TrainObserver for LogObserver<'_> {
    fn on_step(&mut self, step: u64, loss: f64) {
        self.window.push(loss);
        let every = (self.total / 10).max(1);
        if step % every == 0 || step == self.total {
            let mean = self.window.iter().sum::<f64>() / self.window.len() as f64;
            self.curve.push(mean);
            (self.log)(&format!("  step {step}/{} loss {mean:.6}", self.total));
            self.window.clear();
        }
    }
}

fn load_splits(dir: &Path) -> Result<(Dataset, Dataset, Dataset)> {
    Ok((
        imageio::read_folder(&dir.join("protect"))?,
        imageio::read_folder(&dir.join("reference"))?,
        imageio::read_folder(&dir.join("test"))?,
    ))
}

fn leaked_split(report: &AccuracyReport, leaked: Option<&[usize]>, classes: usize) -> (Option<f64>, Option<f64>) {
    match leaked {
        Some(l) => {
            let rest: Vec<usize> = (0..classes).filter(|c| !l.contains(c)).collect();
            (report.over_classes(l), report.over_classes(&rest))
        }
        None => (None, None),
    }
}

/// Clean images matching the ids of `candidate`, in its order.
fn aligned(clean: &Dataset, candidate: &Dataset) -> Dataset {
    let by_id: BTreeMap<&str, _> = clean.iter().map(|s| (s.id.as_str(), s)).collect();
    candidate.iter().filter_map(|s| by_id.get(s.id.as_str()).map(|c| (*c).clone())).collect()
}

fn evaluate_stage(
    runner: &mut Runner<'_>,
    st: &PlannedStage,
    train: impl FnOnce() -> Result<Dataset>,
    test: &Dataset,
    classes: usize,
    cfg: &ExperimentConfig,
) -> Result<AccuracyReport> {
    let eval_cfg = cfg.eval.resolve(cfg.stage_seed("eval"));
    let dir = runner.run(st, |dir, log| {
        let data = train()?;
        log(&format!("  training {} classifier(s) on {} images", eval_cfg.trials, data.len()));
        let r = eval::train_and_score(&data, test, classes, &eval_cfg)?;
        log(&format!("  accuracy {:.4}", r.mean));
        write_json(&dir.join("accuracy.json"), &r)
    })?;
    read_json(&dir.join("accuracy.json"))
}

/// Resolved protection of the data being purified and of the leakage source.
pub fn protections(cfg: &ExperimentConfig, shape: bridgepure_core::image::Shape) -> (ProtectionSpec, ProtectionSpec) {
    let classes = cfg.dataset.classes();
    let p = cfg.protection.resolve(shape, classes, cfg.seed, "protection");
    let l = cfg.leak_protection.as_ref().map_or_else(|| p.clone(), |lp| lp.resolve(shape, classes, cfg.seed, "protection"));
    (p, l)
}

/// Runs every stage, writes `report.json` and `plots/`, and returns the report.
/// On failure `failure.json` names the failing stage.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path, log: &mut dyn FnMut(&str)) -> Result<Report> {
    fs::create_dir_all(root).at(root)?;
    let _lock = RunLock::acquire(root)?;
    let failure = root.join("failure.json");
    if failure.exists() {
        fs::remove_file(&failure).at(&failure)?;
    }
    write_json(&root.join("config.json"), cfg)?;
    let mut runner = Runner { root: root.to_path_buf(), log, statuses: Vec::new() };
    let result = Plan::new(cfg).and_then(|plan| execute(cfg, &plan, &mut runner));
    let statuses: BTreeMap<&str, &str> = runner
        .statuses
        .iter()
        .map(|(d, s)| (d.as_str(), if *s == StageStatus::Cached { "cached" } else { "computed" }))
        .collect();
    match result {
        Ok(report) => {
            write_json(&root.join("report.json"), &report)?;
            write_plots(&root.join("plots"), &report)?;
            write_json(&root.join("stages.json"), &statuses)?;
            Ok(report)
        }
        Err(e) => {
            let stage = match &e {
                Error::Stage { stage, .. } => Some(stage.clone()),
                _ => None,
            };
            let _ = write_json(
                &failure,
                &json!({ "stage": stage, "error": e.to_string(), "config_hash": cfg.hash(), "completed": statuses }),
            );
            Err(e)
        }
    }
}

fn execute(cfg: &ExperimentConfig, plan: &Plan, runner: &mut Runner<'_>) -> Result<Report> {
    let classes = cfg.dataset.classes();
    let data_dir = runner.run(&plan.data, |dir, log| {
        let sizes = (cfg.splits.protect, cfg.splits.reference, cfg.splits.test);
        let all = match &cfg.dataset {
            DatasetSpec::Synthetic { size, classes, noise, contrast, clutter } => {
                let sc = SynthConfig {
                    size: *size,
                    classes: *classes,
                    noise: *noise,
                    contrast: *contrast,
                    clutter: *clutter,
                    seed: cfg.stage_seed("data"),
                };
                log(&format!("  generating {} synthetic images", sizes.0 + sizes.1 + sizes.2));
                synth::generate(&sc, sizes.0 + sizes.1 + sizes.2)?
            }
            DatasetSpec::Folder { path, .. } => imageio::read_folder(path)?,
        };
        if let Some(s) = all.iter().find(|s| s.label >= classes) {
            return Err(bridgepure_core::Error::LabelOutOfRange { label: s.label, class_count: classes }.into());
        }
        let split = pairing::make_splits(&all, sizes, cfg.stage_seed("split"))?;
        imageio::write_folder(&dir.join("protect"), &split.protect_set)?;
        imageio::write_folder(&dir.join("reference"), &split.reference_set)?;
        imageio::write_folder(&dir.join("test"), &split.test_set)
    })?;
    let (protect_set, reference, test) = load_splits(&data_dir)?;
    let shape = protect_set.shape().ok_or_else(|| Error::Config("empty protect split".into()))?;
    let (spec, leak_spec) = protections(cfg, shape);
    let leaked = cfg.leakage.class_filter.as_deref();

    let protect_dir = runner.run(&plan.protect, |dir, log| {
        log(&format!("  {}", spec.describe()));
        let protected = Protector::new(&spec, shape)?.protect_dataset(&protect_set)?;
        write_json(&dir.join("spec.json"), &spec)?;
        imageio::write_folder(&dir.join("protected"), &protected)
    })?;
    let protected = imageio::read_folder(&protect_dir.join("protected"))?;

    let clean_acc = evaluate_stage(runner, &plan.eval_clean, || Ok(protect_set.clone()), &test, classes, cfg)?;
    let prot_acc = evaluate_stage(runner, &plan.eval_protected, || Ok(protected.clone()), &test, classes, cfg)?;
    let (l, nl) = leaked_split(&clean_acc, leaked, classes);
    let clean = Condition { accuracy: clean_acc, fidelity: None, leaked_accuracy: l, non_leaked_accuracy: nl };
    let (l, nl) = leaked_split(&prot_acc, leaked, classes);
    let protected_cond = Condition {
        fidelity: Some(eval::image_fidelity(&protect_set, &protected)?),
        accuracy: prot_acc,
        leaked_accuracy: l,
        non_leaked_accuracy: nl,
    };

    let schedule = cfg.bridge.schedule();
    let mut cells = Vec::new();
    let mut dilution = Vec::new();
    for (li, leak) in plan.leaks.iter().enumerate() {
        let harvest_dir = runner.run(&plan.harvest[li], |dir, log| {
            let protector = Protector::new(&leak_spec, shape)?;
            let a = pairing::harvest_leakage(&protector, &reference, &leak.request, cfg.stage_seed("harvest"))?;
            log(&format!("  {} pairs from {}", a.len(), leak_spec.id()));
            archive::write_archive(&dir.join("pairs"), &a).map(|_| ())
        })?;
        let pairs: PairArchive = archive::read_archive(&harvest_dir.join("pairs"))?;

        if let Some(st) = &plan.dilution[li] {
            let acc = evaluate_stage(
                runner,
                st,
                || Ok(pairing::dilute(&protected, &pairs.clean_dataset())?.dataset),
                &test,
                classes,
                cfg,
            )?;
            let (l, nl) = leaked_split(&acc, leaked, classes);
            dilution.push(DilutionRow {
                leakage: leak.label.clone(),
                pairs: pairs.len(),
                diluted: Condition { accuracy: acc, fidelity: None, leaked_accuracy: l, non_leaked_accuracy: nl },
            });
        }

        for (bi, beta) in cfg.grid_beta().into_iter().enumerate() {
            let train_st = &plan.train[li][bi];
            let pre = Preprocess { beta, seed: cfg.stage_seed("preprocess") };
            let train_dir = runner.run(train_st, |dir, log| {
                let x_end = pre.apply_dataset(&pairs.protected_dataset());
                let mut set = PairSet::new(shape.len());
                for (r, e) in pairs.records.iter().zip(x_end.iter()) {
                    set.push(&r.clean.data, &e.image.data)?;
                }
                let tc = cfg.bridge.train(cfg.stage_seed("train"));
                let mc = cfg.bridge.model(shape, cfg.stage_seed("init"));
                log(&format!("  {} steps on {} pairs", tc.steps, set.len()));
                let mut obs = LogObserver { log, total: tc.steps, window: Vec::new(), curve: Vec::new() };
                let model = score_model::fit(schedule, mc, &set, &tc, &mut obs)?;
                write_json(&dir.join("loss.json"), &obs.curve)?;
                checkpoint::save(&dir.join("model.bpck"), &model, Some(&train_st.key), Some(tc.seed))
            })?;
            let mut model: Option<ScoreModel> = None;

            for cell in plan.cells.iter().filter(|c| c.leak == li && c.beta == beta) {
                let sc = cfg.sampler.resolve(&schedule, cell.s, cfg.stage_seed("purify"));
                let purify_dir = runner.run(&cell.purify, |dir, log| {
                    if model.is_none() {
                        model = Some(checkpoint::load(&train_dir.join("model.bpck"))?.0);
                    }
                    let m = model.as_ref().expect("model loaded");
                    let input = pre.apply_dataset(&protected);
                    let out = sampler::purify_dataset(m, &input, &sc, cfg.sampler.batch_size, |p| {
                        if p.batch + 1 == p.batches || (p.batch + 1) % 5 == 0 {
                            log(&format!("  purified {}/{}", p.done, p.total));
                        }
                    })?;
                    let mut purified = out.dataset;
                    for s in &mut purified.samples {
                        s.image.quantize();
                    }
                    let faults: Vec<_> = out.faults.iter().map(|(id, e)| json!({ "id": id, "error": e.to_string() })).collect();
                    write_json(&dir.join("faults.json"), &faults)?;
                    imageio::write_folder(&dir.join("purified"), &purified)
                })?;
                let purified = imageio::read_folder(&purify_dir.join("purified"))?;
                let faults: Vec<serde_json::Value> = read_json(&purify_dir.join("faults.json"))?;
                let acc = evaluate_stage(runner, &cell.eval, || Ok(purified.clone()), &test, classes, cfg)?;
                let (l, nl) = leaked_split(&acc, leaked, classes);
                cells.push(Cell {
                    leakage: leak.label.clone(),
                    pairs: leak.pairs,
                    beta,
                    s: cell.s,
                    faults: faults.len(),
                    purified: Condition {
                        fidelity: Some(eval::image_fidelity(&aligned(&protect_set, &purified), &purified)?),
                        accuracy: acc,
                        leaked_accuracy: l,
                        non_leaked_accuracy: nl,
                    },
                });
            }
        }
    }

    let best = cells
        .iter()
        .fold(None::<&Cell>, |b, c| match b {
            Some(b) if b.purified.accuracy.mean >= c.purified.accuracy.mean => Some(b),
            _ => Some(c),
        })
        .map(|c| Best { leakage: c.leakage.clone(), beta: c.beta, s: c.s, accuracy: c.purified.accuracy.mean });
    Ok(Report {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        classes,
        protection: ProtectionInfo { id: spec.id(), description: spec.describe() },
        leak_protection: ProtectionInfo { id: leak_spec.id(), description: leak_spec.describe() },
        leaked_classes: cfg.leakage.class_filter.clone(),
        clean,
        protected: protected_cond,
        purified: cells,
        best,
        dilution,
        stages: plan.stages().into_iter().map(|s| (s.dir.clone(), s.key.clone())).collect(),
    })
}

fn cell_label(c: &Cell) -> String {
    format!("{} b={} s={}", c.leakage, c.beta, c.s)
}

/// Renders `accuracy.svg`, `ablation.svg` (more than one grid cell) and
/// `per_class.svg` (partial-leakage runs).
pub fn write_plots(dir: &Path, report: &Report) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let bar = |label: &str, v: f64| Group { label: label.into(), bars: vec![("accuracy".into(), v)] };
    let mut groups = vec![bar("clean", report.clean.accuracy.mean), bar("protected", report.protected.accuracy.mean)];
    if let Some(b) = &report.best {
        groups.push(bar("purified (best)", b.accuracy));
    }
    for d in &report.dilution {
        groups.push(bar(&format!("dilution {}", d.leakage), d.diluted.accuracy.mean));
    }
    let p = dir.join("accuracy.svg");
    fs::write(&p, plots::bar_chart(&format!("{}: test accuracy", report.name), "accuracy", &groups)).at(&p)?;

    if report.purified.len() > 1 {
        let groups: Vec<Group> = report
            .purified
            .iter()
            .map(|c| Group {
                label: cell_label(c),
                bars: vec![
                    ("accuracy".into(), c.purified.accuracy.mean),
                    ("SSIM".into(), c.purified.fidelity.as_ref().map_or(0.0, |f| f.ssim.mean)),
                ],
            })
            .collect();
        let p = dir.join("ablation.svg");
        fs::write(&p, plots::bar_chart("grid over leakage, beta and s", "value", &groups)).at(&p)?;
    }

    if let (Some(leaked), Some(best)) = (&report.leaked_classes, &report.best) {
        let cell = report.cell(&best.leakage, best.beta, best.s).expect("best cell exists");
        let groups: Vec<Group> = (0..report.classes)
            .map(|c| {
                let tag = if leaked.contains(&c) { " (leaked)" } else { "" };
                let get = |r: &AccuracyReport| r.per_class.get(c).copied().flatten().unwrap_or(0.0);
                Group {
                    label: format!("class {c}{tag}"),
                    bars: vec![
                        ("protected".into(), get(&report.protected.accuracy)),
                        ("purified".into(), get(&cell.purified.accuracy)),
                        ("clean".into(), get(&report.clean.accuracy)),
                    ],
                }
            })
            .collect();
        let p = dir.join("per_class.svg");
        fs::write(&p, plots::bar_chart("per-class accuracy", "accuracy", &groups)).at(&p)?;
    }
    Ok(())
}

/// Human-readable summary of a report.
pub fn summarize(report: &Report) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let acc = |r: &AccuracyReport| match r.std {
        Some(sd) => format!("{:.4} ± {:.4}", r.mean, sd),
        None => format!("{:.4}", r.mean),
    };
    let _ = writeln!(out, "{} ({})", report.name, &report.config_hash[..12]);
    let _ = writeln!(out, "protection: {}", report.protection.description);
    if report.leak_protection.id != report.protection.id {
        let _ = writeln!(out, "leakage from: {}", report.leak_protection.description);
    }
    let _ = writeln!(out, "clean      {}", acc(&report.clean.accuracy));
    let fid = |f: &Option<Fidelity>| {
        f.as_ref().map_or(String::new(), |f| format!("  PSNR {:.2} dB  SSIM {:.4}", f.psnr.mean, f.ssim.mean))
    };
    let _ = writeln!(out, "protected  {}{}", acc(&report.protected.accuracy), fid(&report.protected.fidelity));
    for c in &report.purified {
        let _ = writeln!(out, "purified {}  {}{}", cell_label(c), acc(&c.purified.accuracy), fid(&c.purified.fidelity));
        if let (Some(l), Some(n)) = (c.purified.leaked_accuracy, c.purified.non_leaked_accuracy) {
            let _ = writeln!(out, "  leaked classes {l:.4}  non-leaked {n:.4}");
        }
    }
    for d in &report.dilution {
        let _ = writeln!(out, "dilution {}  {}", d.leakage, acc(&d.diluted.accuracy));
    }
    if let Some(b) = &report.best {
        let _ = writeln!(out, "best over grid: {} b={} s={}  {:.4}", b.leakage, b.beta, b.s, b.accuracy);
    }
    out
}

pub fn read_report(run: &Path) -> Result<Report> {
    read_json(&run.join("report.json"))
}
