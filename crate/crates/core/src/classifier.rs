//! Image classifiers used to measure availability: a compact residual
//! convolutional net (no normalization layers; residual branches start at
//! zero), a one-hidden-layer MLP and a linear probe. Trained with SGD,
//! momentum, weight decay and a step learning-rate schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::image::Shape;
use crate::nn::{self, Conv2d, Grads, Init, Linear, ParamStore, Sgd};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierArch {
    ResidualCnn { width: usize },
    Mlp { hidden: usize },
    Linear,
}

impl Default for ClassifierArch {
    fn default() -> Self {
        Self::ResidualCnn { width: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub arch: ClassifierArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch fractions at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<f64>,
    pub lr_decay: f64,
    /// Epochs of linear learning-rate warm-up.
    pub warmup_epochs: f64,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            arch: ClassifierArch::default(),
            epochs: 120,
            batch_size: 128,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![80.0 / 120.0, 100.0 / 120.0],
            lr_decay: 0.1,
            warmup_epochs: 1.0,
            clip_norm: Some(5.0),
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("classifier epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }

    /// Learning rate at a (fractional) epoch position.
    pub fn learning_rate_at(&self, epoch: f64) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| libm::floor(epoch) >= m * self.epochs as f64).count();
        let warm = if self.warmup_epochs > 0.0 { ((epoch + 1e-9) / self.warmup_epochs).min(1.0) } else { 1.0 };
        self.learning_rate * warm * libm::pow(self.lr_decay, passed as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Net {
    Cnn(Cnn),
    Mlp { hidden: Linear, out: Linear },
    Linear(Linear),
}

#[derive(Debug, Clone, PartialEq)]
struct Cnn {
    stem: Conv2d,
    b1a: Conv2d,
    b1b: Conv2d,
    widen: Conv2d,
    b2a: Conv2d,
    b2b: Conv2d,
    head: Linear,
    width: usize,
}

/// Activations kept for the backward pass.
#[derive(Default)]
struct Cache {
    input: Vec<f32>,
    cols: Vec<Vec<f32>>,
    acts: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub shape: Shape,
    pub classes: usize,
    pub arch: ClassifierArch,
    pub params: ParamStore,
    net: Net,
}

fn add(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

impl Classifier {
    pub fn new(shape: Shape, classes: usize, arch: ClassifierArch, seed: u64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let mut rng = rng::rng_from_seed(seed);
        let mut p = ParamStore::new();
        let d = shape.len();
        let net = match arch {
            ClassifierArch::Linear => Net::Linear(Linear::new(&mut p, "linear", d, classes, Init::Zero, &mut rng)),
            ClassifierArch::Mlp { hidden } => Net::Mlp {
                hidden: Linear::new(&mut p, "hidden", d, hidden, Init::He, &mut rng),
                out: Linear::new(&mut p, "out", hidden, classes, Init::Zero, &mut rng),
            },
            ClassifierArch::ResidualCnn { width: w } => {
                if shape.height % 4 != 0 || shape.width % 4 != 0 {
                    return Err(Error::Shape(format!("residual net needs sides divisible by 4, got {shape}")));
                }
                let (h, wd) = (shape.height, shape.width);
                let (h2, w2) = (h / 2, wd / 2);
                let mut conv = |name: &str, cin, cout, hh, ww, init, rng: &mut Rng| {
                    Conv2d::new(&mut p, name, cin, cout, 3, hh, ww, init, rng)
                };
                let stem = conv("stem", shape.channels, w, h, wd, Init::He, &mut rng);
                let b1a = conv("block1.a", w, w, h, wd, Init::He, &mut rng);
                let b1b = conv("block1.b", w, w, h, wd, Init::Zero, &mut rng);
                let widen = conv("widen", w, 2 * w, h2, w2, Init::He, &mut rng);
                let b2a = conv("block2.a", 2 * w, 2 * w, h2, w2, Init::He, &mut rng);
                let b2b = conv("block2.b", 2 * w, 2 * w, h2, w2, Init::Zero, &mut rng);
                let head = Linear::new(&mut p, "head", 2 * w * (h / 4) * (wd / 4), classes, Init::Zero, &mut rng);
                Net::Cnn(Cnn { stem, b1a, b1b, widen, b2a, b2b, head, width: w })
            }
        };
        Ok(Self { shape, classes, arch, params: p, net })
    }

    fn forward(&self, x: &[f32], n: usize, keep: bool) -> (Vec<f32>, Cache) {
        let p = &self.params;
        let input: Vec<f32> = x.iter().map(|v| v - 0.5).collect();
        let mut cache = Cache::default();
        let logits = match &self.net {
            Net::Linear(l) => l.forward(p, &input, n),
            Net::Mlp { hidden, out } => {
                let h = nn::relu(&hidden.forward(p, &input, n));
                let y = out.forward(p, &h, n);
                cache.acts.push(h);
                y
            }
            Net::Cnn(c) => {
                let (h, w) = (self.shape.height, self.shape.width);
                let (s, cs) = c.stem.forward(p, &input, n);
                let a0 = nn::relu(&s);
                let (t, c1) = c.b1a.forward(p, &a0, n);
                let t = nn::relu(&t);
                let (u, c2) = c.b1b.forward(p, &t, n);
                let a1 = nn::relu(&add(&a0, &u));
                let pooled = nn::avg_pool2(&a1, n * c.width, h, w);
                let (v, c3) = c.widen.forward(p, &pooled, n);
                let a2 = nn::relu(&v);
                let (q, c4) = c.b2a.forward(p, &a2, n);
                let q = nn::relu(&q);
                let (r, c5) = c.b2b.forward(p, &q, n);
                let a3 = nn::relu(&add(&a2, &r));
                let feat = nn::avg_pool2(&a3, n * 2 * c.width, h / 2, w / 2);
                let y = c.head.forward(p, &feat, n);
                if keep {
                    cache.cols = vec![cs, c1, c2, c3, c4, c5];
                    cache.acts = vec![a0, t, a1, a2, q, a3, feat];
                }
                y
            }
        };
        if keep {
            cache.input = input;
        }
        (logits, cache)
    }

    fn backward(&self, cache: &Cache, dlogits: &[f32], n: usize) -> Grads {
        let p = &self.params;
        let mut g = p.zero_grads();
        match &self.net {
            Net::Linear(l) => {
                l.backward(p, &cache.input, dlogits, n, &mut g, false);
            }
            Net::Mlp { hidden, out } => {
                let h = &cache.acts[0];
                let dh = out.backward(p, h, dlogits, n, &mut g, true).expect("dx");
                let dh = nn::relu_backward(h, &dh);
                hidden.backward(p, &cache.input, &dh, n, &mut g, false);
            }
            Net::Cnn(c) => {
                let (h, w) = (self.shape.height, self.shape.width);
                let [cs, c1, c2, c3, c4, c5] = &cache.cols[..] else { unreachable!() };
                let [a0, t, a1, a2, q, a3, feat] = &cache.acts[..] else { unreachable!() };
                let dfeat = c.head.backward(p, feat, dlogits, n, &mut g, true).expect("dx");
                let da3 = nn::relu_backward(a3, &nn::avg_pool2_backward(&dfeat, n * 2 * c.width, h / 2, w / 2));
                let dq = c.b2b.backward(p, c5, &da3, n, &mut g, true).expect("dx");
                let dq = nn::relu_backward(q, &dq);
                let da2_branch = c.b2a.backward(p, c4, &dq, n, &mut g, true).expect("dx");
                let da2 = nn::relu_backward(a2, &add(&da3, &da2_branch));
                let dpooled = c.widen.backward(p, c3, &da2, n, &mut g, true).expect("dx");
                let da1 = nn::relu_backward(a1, &nn::avg_pool2_backward(&dpooled, n * c.width, h, w));
                let dt = c.b1b.backward(p, c2, &da1, n, &mut g, true).expect("dx");
                let dt = nn::relu_backward(t, &dt);
                let da0_branch = c.b1a.backward(p, c1, &dt, n, &mut g, true).expect("dx");
                let da0 = nn::relu_backward(a0, &add(&da1, &da0_branch));
                c.stem.backward(p, cs, &da0, n, &mut g, false);
            }
        }
        g
    }

    /// Logits for `n` images stored back to back.
    pub fn logits(&self, x: &[f32], n: usize) -> Vec<f32> {
        self.forward(x, n, false).0
    }

    /// Mean cross-entropy and gradients on one batch.
    pub fn loss_and_grad(&self, x: &[f32], labels: &[usize]) -> (f64, Grads) {
        let n = labels.len();
        let (logits, cache) = self.forward(x, n, true);
        let (loss, dlogits) = nn::softmax_cross_entropy(&logits, labels, self.classes);
        (loss, self.backward(&cache, &dlogits, n))
    }

    pub fn predict(&self, dataset: &Dataset) -> Vec<usize> {
        let mut out = Vec::with_capacity(dataset.len());
        for chunk in dataset.samples.chunks(256) {
            let x: Vec<f32> = chunk.iter().flat_map(|s| s.image.data.iter().copied()).collect();
            let logits = self.logits(&x, chunk.len());
            out.extend(logits.chunks_exact(self.classes).map(nn::argmax));
        }
        out
    }

    pub fn evaluate(&self, dataset: &Dataset) -> Accuracy {
        Accuracy::from_predictions(&self.predict(dataset), &dataset.labels(), self.classes)
    }

    /// Trains a fresh classifier on `train`. A non-finite loss aborts with
    /// [`Error::TrainingFault`].
    pub fn fit(train: &Dataset, classes: usize, cfg: &ClassifierTrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let shape = train.shape().ok_or_else(|| Error::Config("empty training set".into()))?;
        for s in train.iter() {
            if s.label >= classes {
                return Err(Error::LabelOutOfRange { label: s.label, class_count: classes });
            }
            if s.image.shape != shape {
                return Err(Error::Shape(format!("mixed image shapes {} and {}", shape, s.image.shape)));
            }
        }
        let mut model = Self::new(shape, classes, cfg.arch, rng::derive_seed(seed, "init"))?;
        let mut opt = Sgd::new(&model.params, cfg.momentum as f32, cfg.weight_decay as f32);
        let mut rng = rng::rng_from_seed(rng::derive_seed(seed, "order"));
        let mut order: Vec<usize> = (0..train.len()).collect();
        let d = shape.len();
        let mut step = 0u64;
        let batches = train.len().div_ceil(cfg.batch_size);
        for epoch in 0..cfg.epochs {
            rng::shuffle(&mut rng, &mut order);
            for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
                let lr = cfg.learning_rate_at(epoch as f64 + (b + 1) as f64 / batches as f64 - 1e-9) as f32;
                let mut x = Vec::with_capacity(idx.len() * d);
                let mut labels = Vec::with_capacity(idx.len());
                for &i in idx {
                    x.extend_from_slice(&train.samples[i].image.data);
                    labels.push(train.samples[i].label);
                }
                let (loss, mut grads) = model.loss_and_grad(&x, &labels);
                if !loss.is_finite() || !grads.is_finite() {
                    return Err(Error::TrainingFault { step, batch: b as u64, t: epoch as f64, loss });
                }
                if let Some(clip) = cfg.clip_norm {
                    let norm = grads.global_norm();
                    if norm > clip {
                        grads.scale((clip / norm) as f32);
                    }
                }
                opt.update(&mut model.params, &grads, lr);
                step += 1;
            }
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub overall: f64,
    /// `None` for classes absent from the evaluation set.
    pub per_class: Vec<Option<f64>>,
}

impl Accuracy {
    pub fn from_predictions(pred: &[usize], labels: &[usize], classes: usize) -> Self {
        let mut hit = vec![0usize; classes];
        let mut total = vec![0usize; classes];
        for (&p, &l) in pred.iter().zip(labels) {
            if l < classes {
                total[l] += 1;
                hit[l] += usize::from(p == l);
            }
        }
        let n: usize = total.iter().sum();
        let overall = if n == 0 { 0.0 } else { hit.iter().sum::<usize>() as f64 / n as f64 };
        let per_class = hit.iter().zip(&total).map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64)).collect();
        Self { overall, per_class }
    }

    /// Accuracy restricted to `classes`, weighted by their test counts.
    pub fn over_classes(pred: &[usize], labels: &[usize], classes: &[usize]) -> Option<f64> {
        let (mut hit, mut n) = (0usize, 0usize);
        for (&p, &l) in pred.iter().zip(labels) {
            if classes.contains(&l) {
                n += 1;
                hit += usize::from(p == l);
            }
        }
        (n > 0).then(|| hit as f64 / n as f64)
    }
}
