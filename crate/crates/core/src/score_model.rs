//! Endpoint-conditioned denoiser `x̂_0(x_t, x_end, t)` and the bridge
//! denoising score-matching loop.
//!
//! The network predicts the clean endpoint; the score is recovered
//! analytically by plugging `x̂_0` into the bridge marginal:
//! `s(x_t) = (c0 x̂_0 + c1 x_end − x_t) / var`. Because the marginal mean is
//! affine in `x_0`, the score error equals `c0/var` times the `x̂_0` error, so
//! the weighted score loss is a weighted `x̂_0` regression.

use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

use crate::bridge_math::{BridgeKernel, BridgeMarginal, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::Shape;
use crate::nn::{
    add_channel_bias, add_channel_bias_backward, avg_pool2, avg_pool2_backward, concat_rows, silu, silu_backward, split_rows,
    upsample2, upsample2_backward, Adam, Conv2d, Ema, Grads, Init, Linear, ParamStore,
};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Perceptron over `[u, x_end, time features]` with `depth` hidden layers.
    Mlp { hidden: usize, depth: usize },
    /// Two-level convolutional U-net with one skip connection.
    UNet { base_channels: usize },
}

/// How the raw network output `F` becomes `x̂_0`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Preconditioning {
    /// `x̂_0 = F`.
    None,
    /// `x̂_0 = x_end + F`.
    EndpointSkip,
    /// With `y = (x_t − c1 x_end) / c0` (an unbiased noisy view of `x_0` with
    /// std `sd`), `x̂_0 = x_end + c_skip (y − x_end) + c_out F` where
    /// `c_skip = δ² / (δ² + sd²)` and `c_out = δ sd / sqrt(δ² + sd²)`; `δ` is
    /// the typical size of `x_0 − x_end`.
    Bridge { sigma_delta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub shape: Shape,
    pub architecture: Architecture,
    /// Number of sinusoidal time features (even).
    pub time_features: usize,
    pub preconditioning: Preconditioning,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Small perceptron used for scalar oracle tasks.
    pub fn scalar(sigma_delta: f64) -> Self {
        Self {
            shape: Shape::new(1, 1, 1),
            architecture: Architecture::Mlp { hidden: 64, depth: 2 },
            time_features: 16,
            preconditioning: Preconditioning::Bridge { sigma_delta },
            init_seed: 0,
        }
    }

    pub fn image_mlp(shape: Shape, hidden: usize) -> Self {
        Self {
            shape,
            architecture: Architecture::Mlp { hidden, depth: 2 },
            time_features: 16,
            preconditioning: Preconditioning::Bridge { sigma_delta: 0.1 },
            init_seed: 0,
        }
    }

    pub fn image_unet(shape: Shape, base_channels: usize) -> Self {
        Self {
            shape,
            architecture: Architecture::UNet { base_channels },
            time_features: 16,
            preconditioning: Preconditioning::Bridge { sigma_delta: 0.1 },
            init_seed: 0,
        }
    }

    fn embed_dim(&self) -> usize {
        self.time_features + 2
    }
}

/// Weighting `λ(t)` of the score-matching loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `λ(t) = (var / c0)²`, which turns the loss into plain `x̂_0` MSE.
    X0Mse,
    /// `λ(t) = 1`: raw score MSE (very large near the endpoints).
    Score,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weighting: Weighting,
    /// `t` is drawn uniformly from `[t_min, T − t_pad]`, `t_pad = t_pad_fraction · T`.
    pub t_pad_fraction: f64,
    pub ema_decay: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            batch_size: 256,
            learning_rate: 2e-4,
            weighting: Weighting::X0Mse,
            t_pad_fraction: 1e-3,
            ema_decay: 0.999,
            checkpoint_every: 10_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be at least 1".into()));
        }
        if !(self.t_pad_fraction > 0.0 && self.t_pad_fraction < 0.5) {
            return Err(Error::Config("t_pad_fraction must lie in (0, 0.5)".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config("ema_decay must lie in (0, 1)".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Aligned `(x_0, x_end)` training pairs stored as flat rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairSet {
    pub dim: usize,
    pub x0: Vec<f32>,
    pub x_end: Vec<f32>,
}

impl PairSet {
    pub fn new(dim: usize) -> Self {
        Self { dim, x0: Vec::new(), x_end: Vec::new() }
    }

    pub fn push(&mut self, x0: &[f32], x_end: &[f32]) -> Result<()> {
        if x0.len() != self.dim || x_end.len() != self.dim {
            return Err(Error::Shape(alloc::format!("pair of lengths {}/{} for dimension {}", x0.len(), x_end.len(), self.dim)));
        }
        self.x0.extend_from_slice(x0);
        self.x_end.extend_from_slice(x_end);
        Ok(())
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.x0.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x0(&self, i: usize) -> &[f32] {
        &self.x0[i * self.dim..(i + 1) * self.dim]
    }

    pub fn x_end(&self, i: usize) -> &[f32] {
        &self.x_end[i * self.dim..(i + 1) * self.dim]
    }
}

/// One sampled training minibatch: times, noise draws and bridge states.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub n: usize,
    pub x0: Vec<f32>,
    pub x_end: Vec<f32>,
    pub x_t: Vec<f32>,
    pub t: Vec<f64>,
    /// Per-sample factor multiplying the mean squared `x̂_0` error.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Mlp {
    layers: Vec<Linear>,
}

#[derive(Debug, Clone, PartialEq)]
struct UNet {
    channels: usize,
    c1: usize,
    c2: usize,
    h: usize,
    w: usize,
    conv_in: Conv2d,
    temb1: Linear,
    conv_e2: Conv2d,
    conv_m1: Conv2d,
    temb2: Linear,
    conv_m2: Conv2d,
    conv_d1: Conv2d,
    conv_out: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
enum Network {
    Mlp(Mlp),
    UNet(UNet),
}

enum Cache {
    Mlp {
        /// Input of each layer; entry `i > 0` is `silu(pre[i - 1])`.
        inputs: Vec<Vec<f32>>,
        pre: Vec<Vec<f32>>,
    },
    UNet(UNetCache),
}

struct UNetCache {
    emb: Vec<f32>,
    cols: [Vec<f32>; 6],
    a: [Vec<f32>; 5],
}

impl Mlp {
    fn new(store: &mut ParamStore, inputs: usize, hidden: usize, depth: usize, outputs: usize, rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut width = inputs;
        for i in 0..depth {
            layers.push(Linear::new(store, &alloc::format!("mlp.{i}"), width, hidden, Init::He, rng));
            width = hidden;
        }
        layers.push(Linear::new(store, "mlp.out", width, outputs, Init::Zero, rng));
        Self { layers }
    }

    fn forward(&self, p: &ParamStore, x: Vec<f32>, n: usize, keep: bool) -> (Vec<f32>, Option<Cache>) {
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let a = layer.forward(p, &h, n);
            if i == last {
                if keep {
                    inputs.push(h);
                }
                return (a, keep.then_some(Cache::Mlp { inputs, pre }));
            }
            let next = silu(&a);
            if keep {
                inputs.push(core::mem::replace(&mut h, next));
                pre.push(a);
            } else {
                h = next;
            }
        }
        unreachable!("mlp has an output layer")
    }

    fn backward(&self, p: &ParamStore, inputs: &[Vec<f32>], pre: &[Vec<f32>], d_out: &[f32], n: usize, grads: &mut Grads) {
        let mut d = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let need = i > 0;
            let dx = self.layers[i].backward(p, &inputs[i], &d, n, grads, need);
            if let Some(dx) = dx {
                d = silu_backward(&pre[i - 1], &dx);
            }
        }
    }
}

impl UNet {
    fn new(store: &mut ParamStore, shape: Shape, base: usize, emb: usize, rng: &mut Rng) -> Result<Self> {
        if shape.height % 2 != 0 || shape.width % 2 != 0 || shape.height < 2 {
            return Err(Error::Config(alloc::format!("U-net needs even spatial size, got {shape}")));
        }
        let (c, h, w) = (shape.channels, shape.height, shape.width);
        let (c1, c2) = (base, 2 * base);
        let (h2, w2) = (h / 2, w / 2);
        Ok(Self {
            channels: c,
            c1,
            c2,
            h,
            w,
            conv_in: Conv2d::new(store, "unet.in", 2 * c, c1, 3, h, w, Init::He, rng),
            temb1: Linear::new(store, "unet.temb1", emb, c1, Init::He, rng),
            conv_e2: Conv2d::new(store, "unet.enc", c1, c1, 3, h, w, Init::He, rng),
            conv_m1: Conv2d::new(store, "unet.mid1", c1, c2, 3, h2, w2, Init::He, rng),
            temb2: Linear::new(store, "unet.temb2", emb, c2, Init::He, rng),
            conv_m2: Conv2d::new(store, "unet.mid2", c2, c2, 3, h2, w2, Init::He, rng),
            conv_d1: Conv2d::new(store, "unet.dec", c1 + c2, c1, 3, h, w, Init::He, rng),
            conv_out: Conv2d::new(store, "unet.out", c1, c, 3, h, w, Init::Zero, rng),
        })
    }

    fn forward(&self, p: &ParamStore, x: &[f32], emb: &[f32], n: usize, keep: bool) -> (Vec<f32>, Option<Cache>) {
        let hw = self.h * self.w;
        let hw2 = hw / 4;
        let (mut a1, col0) = self.conv_in.forward(p, x, n);
        add_channel_bias(&mut a1, &self.temb1.forward(p, emb, n), hw);
        let h1 = silu(&a1);
        let (a2, col1) = self.conv_e2.forward(p, &h1, n);
        let h2 = silu(&a2);
        let pooled = avg_pool2(&h2, n * self.c1, self.h, self.w);
        let (mut a3, col2) = self.conv_m1.forward(p, &pooled, n);
        add_channel_bias(&mut a3, &self.temb2.forward(p, emb, n), hw2);
        let h3 = silu(&a3);
        let (a4, col3) = self.conv_m2.forward(p, &h3, n);
        let h4 = silu(&a4);
        let up = upsample2(&h4, n * self.c2, self.h / 2, self.w / 2);
        let cat = concat_rows(&up, self.c2 * hw, &h2, self.c1 * hw, n);
        let (a5, col4) = self.conv_d1.forward(p, &cat, n);
        let h5 = silu(&a5);
        let (out, col5) = self.conv_out.forward(p, &h5, n);
        let cache = keep.then(|| {
            Cache::UNet(UNetCache { emb: emb.to_vec(), cols: [col0, col1, col2, col3, col4, col5], a: [a1, a2, a3, a4, a5] })
        });
        (out, cache)
    }

    fn backward(&self, p: &ParamStore, c: &UNetCache, d_out: &[f32], n: usize, g: &mut Grads) {
        let hw = self.h * self.w;
        let hw2 = hw / 4;
        let dh5 = self.conv_out.backward(p, &c.cols[5], d_out, n, g, true).unwrap();
        let da5 = silu_backward(&c.a[4], &dh5);
        let dcat = self.conv_d1.backward(p, &c.cols[4], &da5, n, g, true).unwrap();
        let (dup, dh2_skip) = split_rows(&dcat, self.c2 * hw, self.c1 * hw, n);
        let dh4 = upsample2_backward(&dup, n * self.c2, self.h / 2, self.w / 2);
        let da4 = silu_backward(&c.a[3], &dh4);
        let dh3 = self.conv_m2.backward(p, &c.cols[3], &da4, n, g, true).unwrap();
        let da3 = silu_backward(&c.a[2], &dh3);
        self.temb2.backward(p, &c.emb, &add_channel_bias_backward(&da3, hw2), n, g, false);
        let dpool = self.conv_m1.backward(p, &c.cols[2], &da3, n, g, true).unwrap();
        let mut dh2 = avg_pool2_backward(&dpool, n * self.c1, self.h, self.w);
        for (a, b) in dh2.iter_mut().zip(&dh2_skip) {
            *a += b;
        }
        let da2 = silu_backward(&c.a[1], &dh2);
        let dh1 = self.conv_e2.backward(p, &c.cols[1], &da2, n, g, true).unwrap();
        let da1 = silu_backward(&c.a[0], &dh1);
        self.temb1.backward(p, &c.emb, &add_channel_bias_backward(&da1, hw), n, g, false);
        self.conv_in.backward(p, &c.cols[0], &da1, n, g, false);
    }
}

/// Per-sample preconditioning coefficients.
#[derive(Debug, Clone, Copy)]
struct Precond {
    marginal: BridgeMarginal,
    /// Weight of `x_end` in the skip path (the remainder multiplies `y`).
    skip_end: f64,
    /// Weight of `x_t` in the skip path.
    skip_state: f64,
    out: f64,
    /// Scale applied to `x_t − c1 x_end` before it enters the network.
    input: f64,
}

/// Endpoint-conditioned score model with EMA weights and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    pub schedule: NoiseSchedule,
    pub config: ModelConfig,
    network: Network,
    pub params: ParamStore,
    pub ema_params: ParamStore,
    pub ema_decay: f32,
    pub optimizer: Adam,
    pub step: u64,
}

impl ScoreModel {
    pub fn new(schedule: NoiseSchedule, config: ModelConfig) -> Result<Self> {
        if config.time_features % 2 != 0 || config.shape.is_empty() {
            return Err(Error::Config("time_features must be even and the shape non-empty".into()));
        }
        let mut rng = rng::rng_from_seed(config.init_seed);
        let mut params = ParamStore::new();
        let d = config.shape.len();
        let emb = config.embed_dim();
        let network = match config.architecture {
            Architecture::Mlp { hidden, depth } => {
                if hidden == 0 {
                    return Err(Error::Config("mlp hidden width must be positive".into()));
                }
                Network::Mlp(Mlp::new(&mut params, 2 * d + emb, hidden, depth, d, &mut rng))
            }
            Architecture::UNet { base_channels } => {
                if base_channels == 0 {
                    return Err(Error::Config("U-net base width must be positive".into()));
                }
                Network::UNet(UNet::new(&mut params, config.shape, base_channels, emb, &mut rng)?)
            }
        };
        let optimizer = Adam::new(&params);
        Ok(Self { schedule, config, network, ema_params: params.clone(), params, ema_decay: 0.999, optimizer, step: 0 })
    }

    pub fn dim(&self) -> usize {
        self.config.shape.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn kernel(&self) -> BridgeKernel {
        self.schedule.kernel()
    }

    fn precond(&self, t: f64) -> Result<Precond> {
        if !(t > 0.0 && t < self.schedule.t_max) {
            return Err(Error::Singular { t, what: "denoiser is defined on the open interval (0, T)" });
        }
        let m = self.kernel().marginal(t)?;
        let c0 = m.mean_coeff_x0;
        let (skip_end, skip_state, out, input) = match self.config.preconditioning {
            Preconditioning::None => (0.0, 0.0, 1.0, 1.0),
            Preconditioning::EndpointSkip => (1.0, 0.0, 1.0, 1.0),
            Preconditioning::Bridge { sigma_delta } => {
                let d2 = sigma_delta * sigma_delta;
                // Noisy view y = (x_t − c1 x_end) / c0 has variance var / c0².
                let sd2 = if c0 > 0.0 { m.variance / (c0 * c0) } else { f64::INFINITY };
                let (c_skip, c_out) =
                    if sd2.is_finite() { (d2 / (d2 + sd2), (d2 * sd2 / (d2 + sd2)).sqrt()) } else { (0.0, sigma_delta) };
                // x_end + c_skip (y − x_end) = (1 − c_skip − c_skip c1/c0) x_end + (c_skip/c0) x_t
                let ratio = if c0 > 0.0 { c_skip / c0 } else { 0.0 };
                let skip_end = 1.0 - c_skip - ratio * m.mean_coeff_xend;
                let input = 1.0 / (c0 * c0 * d2 + m.variance).sqrt();
                (skip_end, ratio, c_out, input)
            }
        };
        Ok(Precond { marginal: m, skip_end, skip_state, out, input })
    }

    fn time_embedding(&self, t: f64, pc: &Precond, out: &mut Vec<f32>) {
        let tau = t / self.schedule.t_max;
        let half = self.config.time_features / 2;
        for k in 0..half {
            let freq = if half > 1 { libm::pow(64.0, k as f64 / (half - 1) as f64) } else { 1.0 };
            let arg = core::f64::consts::PI * freq * tau;
            out.push(libm::sin(arg) as f32);
            out.push(libm::cos(arg) as f32);
        }
        let c_skip = match self.config.preconditioning {
            Preconditioning::Bridge { .. } => pc.skip_state * pc.marginal.mean_coeff_x0,
            _ => 0.0,
        };
        out.push(c_skip as f32);
        out.push(pc.marginal.mean_coeff_xend as f32);
    }

    fn check_batch(&self, x_t: &[f32], x_end: &[f32], n: usize) -> Result<()> {
        let d = self.dim();
        if x_t.len() != n * d || x_end.len() != n * d {
            return Err(Error::Shape(alloc::format!(
                "expected {n} rows of {} ({}), got {} and {} values",
                d,
                self.config.shape,
                x_t.len(),
                x_end.len()
            )));
        }
        Ok(())
    }

    /// Network input rows and the per-sample preconditioning.
    fn build_inputs(&self, x_t: &[f32], x_end: &[f32], t: &[f64]) -> Result<(Vec<f32>, Vec<f32>, Vec<Precond>)> {
        let n = t.len();
        self.check_batch(x_t, x_end, n)?;
        let d = self.dim();
        let e = self.config.embed_dim();
        let mut emb = Vec::with_capacity(n * e);
        let mut pcs = Vec::with_capacity(n);
        let mut u = vec![0.0f32; n * d];
        for i in 0..n {
            let pc = self.precond(t[i])?;
            self.time_embedding(t[i], &pc, &mut emb);
            let (c1, s) = (pc.marginal.mean_coeff_xend as f32, pc.input as f32);
            for j in 0..d {
                u[i * d + j] = s * (x_t[i * d + j] - c1 * x_end[i * d + j]);
            }
            pcs.push(pc);
        }
        Ok((u, emb, pcs))
    }

    fn run_network(
        &self,
        p: &ParamStore,
        u: &[f32],
        x_end: &[f32],
        emb: &[f32],
        n: usize,
        keep: bool,
    ) -> (Vec<f32>, Option<Cache>) {
        let d = self.dim();
        let e = self.config.embed_dim();
        match &self.network {
            Network::Mlp(mlp) => {
                let mut rows = Vec::with_capacity(n * (2 * d + e));
                for i in 0..n {
                    rows.extend_from_slice(&u[i * d..(i + 1) * d]);
                    rows.extend_from_slice(&x_end[i * d..(i + 1) * d]);
                    rows.extend_from_slice(&emb[i * e..(i + 1) * e]);
                }
                mlp.forward(p, rows, n, keep)
            }
            Network::UNet(net) => {
                let x = concat_rows(u, d, x_end, d, n);
                net.forward(p, &x, emb, n, keep)
            }
        }
    }

    fn combine(&self, raw: &[f32], x_t: &[f32], x_end: &[f32], pcs: &[Precond]) -> Vec<f32> {
        let d = self.dim();
        let mut out = vec![0.0f32; raw.len()];
        for (i, pc) in pcs.iter().enumerate() {
            let (se, ss, so) = (pc.skip_end as f32, pc.skip_state as f32, pc.out as f32);
            for j in i * d..(i + 1) * d {
                out[j] = se * x_end[j] + ss * x_t[j] + so * raw[j];
            }
        }
        out
    }

    /// Batched `x̂_0` prediction with the given parameter set.
    pub fn predict_x0_with(&self, params: &ParamStore, x_t: &[f32], x_end: &[f32], t: &[f64]) -> Result<Vec<f32>> {
        let (u, emb, pcs) = self.build_inputs(x_t, x_end, t)?;
        let (raw, _) = self.run_network(params, &u, x_end, &emb, t.len(), false);
        Ok(self.combine(&raw, x_t, x_end, &pcs))
    }

    /// Batched `x̂_0` prediction with the EMA weights.
    pub fn predict_x0(&self, x_t: &[f32], x_end: &[f32], t: &[f64]) -> Result<Vec<f32>> {
        self.predict_x0_with(&self.ema_params, x_t, x_end, t)
    }

    /// Learned score `s_θ(x_t, x_end, t)` for one sample.
    pub fn predict_score(&self, x_t: &[f32], x_end: &[f32], t: f64) -> Result<Vec<f32>> {
        let x0 = self.predict_x0(x_t, x_end, &[t])?;
        self.kernel().analytic_bridge_score(x_t, t, &x0, x_end)
    }

    /// Draws times, noise and bridge states for the given pair indices.
    pub fn prepare_batch(&self, pairs: &PairSet, indices: &[usize], cfg: &TrainConfig, rng: &mut Rng) -> Result<TrainingBatch> {
        if indices.is_empty() {
            return Err(Error::Config("empty training batch".into()));
        }
        if pairs.dim != self.dim() {
            return Err(Error::Shape(alloc::format!("pairs have dimension {}, model expects {}", pairs.dim, self.dim())));
        }
        let d = self.dim();
        let n = indices.len();
        let (lo, hi) = (self.schedule.t_min, self.schedule.t_max * (1.0 - cfg.t_pad_fraction));
        let kernel = self.kernel();
        let mut batch = TrainingBatch {
            n,
            x0: Vec::with_capacity(n * d),
            x_end: Vec::with_capacity(n * d),
            x_t: Vec::with_capacity(n * d),
            t: Vec::with_capacity(n),
            weights: Vec::with_capacity(n),
        };
        for &i in indices {
            let t = lo + (hi - lo) * rng::uniform(rng);
            let m = kernel.marginal(t)?;
            let sd = m.variance.sqrt();
            let (x0, xe) = (pairs.x0(i), pairs.x_end(i));
            for j in 0..d {
                let z = rng::normal(rng);
                let v = m.mean_coeff_x0 * f64::from(x0[j]) + m.mean_coeff_xend * f64::from(xe[j]) + sd * z;
                batch.x_t.push(v as f32);
            }
            batch.x0.extend_from_slice(x0);
            batch.x_end.extend_from_slice(xe);
            batch.t.push(t);
            batch.weights.push(match cfg.weighting {
                Weighting::X0Mse => 1.0,
                Weighting::Score => {
                    let r = m.mean_coeff_x0 / m.variance;
                    r * r
                }
            });
        }
        Ok(batch)
    }

    /// Weighted loss `mean_i w_i · mean_j (x̂_0 − x_0)²`.
    pub fn loss(&self, params: &ParamStore, batch: &TrainingBatch) -> Result<f64> {
        let pred = self.predict_x0_with(params, &batch.x_t, &batch.x_end, &batch.t)?;
        Ok(self.weighted_error(&pred, batch).0)
    }

    fn weighted_error(&self, pred: &[f32], batch: &TrainingBatch) -> (f64, Vec<f64>) {
        let d = self.dim();
        let mut per_sample = Vec::with_capacity(batch.n);
        let mut total = 0.0;
        for i in 0..batch.n {
            let mut s = 0.0f64;
            for j in i * d..(i + 1) * d {
                let e = f64::from(pred[j]) - f64::from(batch.x0[j]);
                s += e * e;
            }
            let l = batch.weights[i] * s / d as f64;
            per_sample.push(l);
            total += l;
        }
        (total / batch.n as f64, per_sample)
    }

    pub fn loss_and_grad(&self, params: &ParamStore, batch: &TrainingBatch) -> Result<(f64, Grads)> {
        let n = batch.n;
        let d = self.dim();
        let (u, emb, pcs) = self.build_inputs(&batch.x_t, &batch.x_end, &batch.t)?;
        let (raw, cache) = self.run_network(params, &u, &batch.x_end, &emb, n, true);
        let pred = self.combine(&raw, &batch.x_t, &batch.x_end, &pcs);
        let (loss, _) = self.weighted_error(&pred, batch);
        let mut d_raw = vec![0.0f32; n * d];
        for i in 0..n {
            let k = 2.0 * batch.weights[i] / (n * d) as f64 * pcs[i].out;
            for j in i * d..(i + 1) * d {
                d_raw[j] = (k * (f64::from(pred[j]) - f64::from(batch.x0[j]))) as f32;
            }
        }
        let mut grads = params.zero_grads();
        match (&self.network, cache.expect("cache requested")) {
            (Network::Mlp(mlp), Cache::Mlp { inputs, pre }) => mlp.backward(params, &inputs, &pre, &d_raw, n, &mut grads),
            (Network::UNet(net), Cache::UNet(c)) => net.backward(params, &c, &d_raw, n, &mut grads),
            _ => unreachable!("cache matches network"),
        }
        Ok((loss, grads))
    }

    /// One optimizer step on the given pairs; returns the batch loss.
    pub fn training_step(&mut self, pairs: &PairSet, indices: &[usize], cfg: &TrainConfig, rng: &mut Rng) -> Result<f64> {
        let batch = self.prepare_batch(pairs, indices, cfg, rng)?;
        let (loss, grads) = self.loss_and_grad(&self.params, &batch)?;
        if !loss.is_finite() || !grads.is_finite() {
            let t = batch.t.iter().copied().fold(f64::NAN, |a, b| if a.is_nan() || b > a { b } else { a });
            return Err(Error::TrainingFault { step: self.step, batch: self.step, t, loss });
        }
        self.optimizer.update(&mut self.params, &grads, cfg.learning_rate as f32);
        self.step += 1;
        Ema { decay: self.ema_decay }.update(&mut self.ema_params, &self.params, self.step);
        Ok(loss)
    }

    /// Runs `cfg.steps` further optimizer steps over shuffled epochs of `pairs`.
    pub fn train<O: TrainObserver>(&mut self, pairs: &PairSet, cfg: &TrainConfig, observer: &mut O) -> Result<()> {
        cfg.validate()?;
        if pairs.is_empty() {
            return Err(Error::Config("no training pairs".into()));
        }
        self.ema_decay = cfg.ema_decay as f32;
        let mut rng = rng::rng_from_seed(rng::derive_seed(cfg.seed, "bridge-train"));
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut cursor = order.len();
        let bs = cfg.batch_size.min(pairs.len()).max(1);
        let mut idx = Vec::with_capacity(bs);
        for _ in 0..cfg.steps {
            idx.clear();
            while idx.len() < bs {
                if cursor == order.len() {
                    rng::shuffle(&mut rng, &mut order);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let loss = self.training_step(pairs, &idx, cfg, &mut rng)?;
            observer.on_step(self.step, loss);
            if cfg.checkpoint_every > 0 && self.step % cfg.checkpoint_every == 0 {
                observer.on_checkpoint(self)?;
            }
        }
        observer.on_checkpoint(self)
    }
}

/// Hooks invoked by [`ScoreModel::train`] and [`fit`].
pub trait TrainObserver {
    fn on_step(&mut self, _step: u64, _loss: f64) {}
    fn on_checkpoint(&mut self, _model: &ScoreModel) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Records every step's loss.
#[derive(Debug, Default, Clone)]
pub struct LossCurve(pub Vec<f64>);

impl TrainObserver for LossCurve {
    fn on_step(&mut self, _step: u64, loss: f64) {
        self.0.push(loss);
    }
}

/// Trains a fresh model on `pairs`.
pub fn fit<O: TrainObserver>(
    schedule: NoiseSchedule,
    config: ModelConfig,
    pairs: &PairSet,
    cfg: &TrainConfig,
    observer: &mut O,
) -> Result<ScoreModel> {
    if pairs.is_empty() {
        return Err(Error::Config("fit needs at least one pair".into()));
    }
    if pairs.dim != config.shape.len() {
        return Err(Error::Shape(alloc::format!(
            "pairs have dimension {}, model shape {} has {}",
            pairs.dim,
            config.shape,
            config.shape.len()
        )));
    }
    let mut model = ScoreModel::new(schedule, config)?;
    model.train(pairs, cfg, observer)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_schedule() -> NoiseSchedule {
        NoiseSchedule::ve(0.05, 2.0, 1.0).unwrap()
    }

    #[test]
    fn zero_head_without_skip_predicts_zero() {
        let mut cfg = ModelConfig::image_mlp(Shape::new(1, 2, 2), 8);
        cfg.preconditioning = Preconditioning::None;
        let model = ScoreModel::new(small_schedule(), cfg).unwrap();
        let x_end = [0.2f32, 0.4, 0.6, 0.8];
        let t = 0.5;
        let (mean, _) = model.kernel().bridge_marginal(&[0.0f32; 4], &x_end, t).unwrap();
        let s = model.predict_score(&mean, &x_end, t).unwrap();
        let want = model.kernel().analytic_bridge_score(&mean, t, &[0.0f32; 4], &x_end).unwrap();
        assert_eq!(s, want);
        assert!(s.iter().all(|v| v.abs() < 1e-6));
        assert_eq!(s, model.predict_score(&mean, &x_end, t).unwrap());
    }

    #[test]
    fn endpoint_skip_identity_gives_zero_loss() {
        let mut cfg = ModelConfig::image_mlp(Shape::new(3, 2, 2), 8);
        cfg.preconditioning = Preconditioning::EndpointSkip;
        let model = ScoreModel::new(small_schedule(), cfg).unwrap();
        let mut pairs = PairSet::new(12);
        let x: Vec<f32> = (0..12).map(|i| i as f32 / 12.0).collect();
        for _ in 0..4 {
            pairs.push(&x, &x).unwrap();
        }
        let mut rng = rng::rng_from_seed(0);
        let batch = model.prepare_batch(&pairs, &[0, 1, 2, 3], &TrainConfig::default(), &mut rng).unwrap();
        assert_eq!(model.loss(&model.params, &batch).unwrap(), 0.0);
    }

    #[test]
    fn unet_preserves_shape_and_rejects_odd_sizes() {
        let model = ScoreModel::new(small_schedule(), ModelConfig::image_unet(Shape::new(3, 4, 6), 4)).unwrap();
        let x = vec![0.5f32; 2 * 72];
        let out = model.predict_x0(&x, &x, &[0.3, 0.7]).unwrap();
        assert_eq!(out.len(), 144);
        assert!(ScoreModel::new(small_schedule(), ModelConfig::image_unet(Shape::new(3, 5, 6), 4)).is_err());
        assert!(model.predict_x0(&x[..70], &x, &[0.3, 0.7]).is_err());
    }

    #[test]
    fn endpoints_are_rejected() {
        let model = ScoreModel::new(small_schedule(), ModelConfig::scalar(0.5)).unwrap();
        assert!(matches!(model.predict_score(&[0.0], &[1.0], 0.0), Err(Error::Singular { .. })));
        assert!(matches!(model.predict_score(&[0.0], &[1.0], 1.0), Err(Error::Singular { .. })));
    }

    fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
        let mut rng = rng::rng_from_seed(seed);
        for p in &mut store.params {
            for v in &mut p.value {
                *v += (scale * rng::normal(&mut rng)) as f32;
            }
        }
    }

    fn fd_gradient_check(config: ModelConfig, weighting: Weighting) {
        let model = ScoreModel::new(small_schedule(), config).unwrap();
        assert!(model.param_count() <= 1000, "{} params", model.param_count());
        let mut params = model.params.clone();
        randomize(&mut params, 5, 0.3);
        let d = model.dim();
        let mut pairs = PairSet::new(d);
        let mut rng = rng::rng_from_seed(11);
        for _ in 0..3 {
            let x0: Vec<f32> = (0..d).map(|_| rng::uniform(&mut rng) as f32).collect();
            let xe: Vec<f32> = x0.iter().map(|v| v + 0.1 * rng::normal(&mut rng) as f32).collect();
            pairs.push(&x0, &xe).unwrap();
        }
        let cfg = TrainConfig { weighting, ..TrainConfig::default() };
        let batch = model.prepare_batch(&pairs, &[0, 1, 2], &cfg, &mut rng).unwrap();
        let (_, grads) = model.loss_and_grad(&params, &batch).unwrap();
        // Directional derivatives along random unit directions within one
        // parameter tensor; f32 forward passes make per-entry differences noisy.
        let mut pick = rng::rng_from_seed(99);
        for _ in 0..10 {
            let pi = rng::below(&mut pick, params.len());
            let len = params.params[pi].value.len();
            let mut dir: Vec<f64> = (0..len).map(|_| rng::normal(&mut pick)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|v| *v /= norm);
            let analytic: f64 = dir.iter().zip(&grads.values[pi]).map(|(a, &g)| a * f64::from(g)).sum();
            let orig = params.params[pi].value.clone();
            let central = |h: f64, params: &mut ParamStore| {
                let mut at = |sign: f64| {
                    for ((v, &o), &dv) in params.params[pi].value.iter_mut().zip(&orig).zip(&dir) {
                        *v = (f64::from(o) + sign * h * dv) as f32;
                    }
                    model.loss(params, &batch).unwrap()
                };
                let (lp, lm) = (at(1.0), at(-1.0));
                (lp - lm) / (2.0 * h)
            };
            // Richardson extrapolation cancels the O(h²) truncation term.
            let (d1, d2) = (central(4e-2, &mut params), central(2e-2, &mut params));
            params.params[pi].value.copy_from_slice(&orig);
            let fd = (4.0 * d2 - d1) / 3.0;
            let rel = (fd - analytic).abs() / analytic.abs().max(fd.abs()).max(1e-12);
            assert!(rel < 1e-3, "{}: fd {fd} vs analytic {analytic} (rel {rel})", params.params[pi].name);
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut cfg = ModelConfig::image_mlp(Shape::new(1, 2, 2), 12);
        cfg.time_features = 4;
        fd_gradient_check(cfg, Weighting::X0Mse);
    }

    #[test]
    fn unet_gradient_matches_finite_differences() {
        let mut cfg = ModelConfig::image_unet(Shape::new(1, 4, 4), 2);
        cfg.time_features = 4;
        fd_gradient_check(cfg, Weighting::Score);
    }

    #[test]
    fn train_config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.steps = 0;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
