//! Availability and fidelity measurements.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::classifier::{Accuracy, Classifier, ClassifierTrainConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, Summary};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub classifier: ClassifierTrainConfig,
    pub trials: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { classifier: ClassifierTrainConfig::default(), trials: 5, seed: 0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("at least one evaluation trial is required".into()));
        }
        self.classifier.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    /// `None` when training diverged; the trial is then excluded.
    pub accuracy: Option<Accuracy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<alloc::string::String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Mean over successful trials.
    pub mean: f64,
    /// Standard deviation over successful trials; `None` with fewer than two.
    pub std: Option<f64>,
    /// Per-class accuracy averaged over successful trials.
    pub per_class: Vec<Option<f64>>,
    pub trials: Vec<TrialResult>,
}

impl AccuracyReport {
    pub fn failed_trials(&self) -> usize {
        self.trials.iter().filter(|t| t.accuracy.is_none()).count()
    }

    /// Mean over trials of the accuracy restricted to `classes`.
    pub fn over_classes(&self, classes: &[usize]) -> Option<f64> {
        let vals: Vec<f64> =
            self.per_class.iter().enumerate().filter(|(c, _)| classes.contains(c)).filter_map(|(_, a)| *a).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Trains `cfg.trials` independent classifiers on `train` and scores them on
/// `test`. Diverged trials are recorded and excluded; if every trial
/// diverges the last fault is returned.
pub fn train_and_score(train: &Dataset, test: &Dataset, classes: usize, cfg: &EvalConfig) -> Result<AccuracyReport> {
    cfg.validate()?;
    if let Some(s) = train.iter().chain(test.iter()).find(|s| s.label >= classes) {
        return Err(Error::LabelOutOfRange { label: s.label, class_count: classes });
    }
    let mut trials = Vec::with_capacity(cfg.trials);
    let mut last_fault = None;
    for k in 0..cfg.trials {
        let seed = rng::derive_seed_index(cfg.seed, k as u64);
        match Classifier::fit(train, classes, &cfg.classifier, seed) {
            Ok(model) => trials.push(TrialResult { seed, accuracy: Some(model.evaluate(test)), failure: None }),
            Err(e @ Error::TrainingFault { .. }) => {
                trials.push(TrialResult { seed, accuracy: None, failure: Some(format!("{e}")) });
                last_fault = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    let ok: Vec<&Accuracy> = trials.iter().filter_map(|t| t.accuracy.as_ref()).collect();
    if ok.is_empty() {
        return Err(last_fault.expect("all trials failed"));
    }
    let overall: Vec<f64> = ok.iter().map(|a| a.overall).collect();
    let s = Summary::of(&overall);
    let per_class = (0..classes)
        .map(|c| {
            let v: Vec<f64> = ok.iter().filter_map(|a| a.per_class[c]).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    Ok(AccuracyReport { mean: s.mean, std: (ok.len() >= 2).then_some(s.std), per_class, trials })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub psnr: Summary,
    pub ssim: Summary,
}

/// Per-image PSNR and SSIM of `candidate` against `reference`, matched by id.
pub fn image_fidelity(reference: &Dataset, candidate: &Dataset) -> Result<Fidelity> {
    if reference.len() != candidate.len() {
        return Err(Error::Config(format!(
            "fidelity needs aligned sets, got {} and {} images",
            reference.len(),
            candidate.len()
        )));
    }
    let by_id: BTreeMap<&str, &crate::image::Image> = candidate.iter().map(|s| (s.id.as_str(), &s.image)).collect();
    let mut psnr = Vec::with_capacity(reference.len());
    let mut ssim = Vec::with_capacity(reference.len());
    for s in reference.iter() {
        let c = by_id.get(s.id.as_str()).ok_or_else(|| Error::Config(format!("id {} missing from candidate set", s.id)))?;
        psnr.push(metrics::psnr(&s.image, c)?);
        ssim.push(metrics::ssim(&s.image, c)?);
    }
    Ok(Fidelity { psnr: Summary::of(&psnr), ssim: Summary::of(&ssim) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierArch;
    use crate::dataset::Sample;
    use crate::image::{Image, Shape};

    fn set(labels: &[usize]) -> Dataset {
        let shape = Shape { channels: 1, height: 12, width: 12 };
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let v = 0.3 + 0.05 * (i % 3) as f32;
                Sample { id: format!("{i}"), label: l, image: Image::new(shape, alloc::vec![v; 144]).unwrap() }
            })
            .collect()
    }

    #[test]
    fn single_class_training_scores_that_class_frequency() {
        let train = set(&[0; 20]);
        let test = set(&[0, 1, 0, 1, 1, 0, 0, 1]);
        let cfg = EvalConfig {
            classifier: ClassifierTrainConfig { arch: ClassifierArch::Linear, epochs: 2, batch_size: 8, ..Default::default() },
            trials: 2,
            seed: 1,
        };
        let r = train_and_score(&train, &test, 2, &cfg).unwrap();
        assert_eq!(r.mean, 0.5);
        assert_eq!(r.std, Some(0.0));
        assert_eq!(r.per_class, alloc::vec![Some(1.0), Some(0.0)]);
        let one = train_and_score(&train, &test, 2, &EvalConfig { trials: 1, ..cfg }).unwrap();
        assert_eq!(one.std, None);
    }

    #[test]
    fn fidelity_of_identical_sets() {
        let a = set(&[0, 1, 2]);
        let f = image_fidelity(&a, &a).unwrap();
        assert_eq!(f.psnr.mean, metrics::PSNR_CAP_DB);
        assert!((f.ssim.mean - 1.0).abs() < 1e-12);
        let b = set(&[0, 1]);
        assert!(image_fidelity(&a, &b).is_err());
    }
}
