//! Purification: integrate the reverse bridge from the protected image at
//! `t ≈ T` down to `t_min`.
//!
//! Stochastic steps follow the reverse SDE with drift `f − g² (s − h)`.
//! Deterministic steps follow the probability-flow ODE, written as
//! `f − ½ g² ((s − h) − w · h)` so the guidance `w` scales only the pull
//! towards the endpoint; `w = 1` is the exact ODE `f − g² (½ s − h)`. The first `round(s · steps)` steps are
//! Euler–Maruyama steps of the SDE; the remaining ones are Heun steps of the
//! ODE. With `s = 0` the whole map is deterministic.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::bridge_math::NoiseSchedule;
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, Rng};
use crate::score_model::ScoreModel;

/// Anything that predicts the clean endpoint of a bridge.
pub trait Denoiser {
    fn schedule(&self) -> &NoiseSchedule;

    fn dim(&self) -> usize;

    /// `x̂_0` for `n` rows sharing the time `t`.
    fn denoise(&self, x_t: &[f32], x_end: &[f32], t: f64) -> Result<Vec<f32>>;
}

impl Denoiser for ScoreModel {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn dim(&self) -> usize {
        ScoreModel::dim(self)
    }

    fn denoise(&self, x_t: &[f32], x_end: &[f32], t: f64) -> Result<Vec<f32>> {
        let n = x_t.len() / self.dim().max(1);
        self.predict_x0(x_t, x_end, &vec![t; n])
    }
}

/// Exact denoiser of a bridge whose data distribution is a point mass at
/// `x0`: every row is predicted as `x0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMassDenoiser {
    pub schedule: NoiseSchedule,
    pub x0: Vec<f32>,
}

impl Denoiser for PointMassDenoiser {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn dim(&self) -> usize {
        self.x0.len()
    }

    fn denoise(&self, x_t: &[f32], _x_end: &[f32], _t: f64) -> Result<Vec<f32>> {
        let n = x_t.len() / self.x0.len();
        Ok(self.x0.repeat(n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Fraction of steps taken stochastically, in `[0, 1]`.
    pub s: f64,
    /// Multiplier on the learned score term.
    pub guidance: f64,
    /// Exponent of the time warp; larger values crowd steps toward `t_min`.
    pub warp: f64,
    /// Clamp the final state to `[0, 1]`.
    pub clamp: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 40, s: 0.0, guidance: 0.5, warp: 2.0, clamp: true, seed: 0 }
    }
}

impl SamplerConfig {
    /// Defaults with the guidance recommended for the schedule's mode.
    pub fn for_schedule(schedule: &NoiseSchedule) -> Self {
        let guidance = match schedule.mode {
            crate::bridge_math::ScheduleMode::Ve => 0.5,
            crate::bridge_math::ScheduleMode::Vp => 1.0,
        };
        Self { guidance, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(0.0..=1.0).contains(&self.s) {
            return Err(Error::Config(alloc::format!("randomness s = {} outside [0, 1]", self.s)));
        }
        if !(self.warp > 0.0 && self.guidance.is_finite()) {
            return Err(Error::Config("warp must be positive and guidance finite".into()));
        }
        Ok(())
    }

    /// Number of leading Euler–Maruyama steps.
    pub fn stochastic_steps(&self) -> usize {
        libm::round(self.s * self.steps as f64) as usize
    }
}

/// Strictly decreasing grid from `T − t_pad` to `t_min` with `steps + 1`
/// points, uniform in a warped coordinate.
pub fn time_grid(schedule: &NoiseSchedule, steps: usize, warp: f64) -> Vec<f64> {
    let start = schedule.t_max - schedule.t_pad();
    let end = schedule.t_min;
    (0..=steps)
        .map(|i| {
            let frac = 1.0 - i as f64 / steps as f64;
            end + (start - end) * libm::pow(frac, warp)
        })
        .collect()
}

/// Reverse-time drift for a batch of rows at time `t`.
///
/// `stochasticity` interpolates between the probability-flow ODE (`0`) and
/// the reverse SDE (`1`); `guidance` only acts on the ODE part.
pub fn reverse_drift<D: Denoiser + ?Sized>(
    model: &D,
    x_t: &[f32],
    x_end: &[f32],
    t: f64,
    guidance: f64,
    stochasticity: f64,
) -> Result<Vec<f32>> {
    let schedule = *model.schedule();
    if !(t > 0.0 && t < schedule.t_max) {
        return Err(Error::Singular { t, what: "reverse drift needs 0 < t < T" });
    }
    if x_t.len() != x_end.len() || x_t.len() % model.dim().max(1) != 0 {
        return Err(Error::Shape(alloc::format!("state of {} vs endpoint of {}", x_t.len(), x_end.len())));
    }
    let kernel = schedule.kernel();
    let m = kernel.marginal(t)?;
    let hc = kernel.h_coefficients(t)?;
    let g2 = schedule.g_sq(t);
    let f = schedule.drift_coeff(t);
    let a = 0.5 * (1.0 + stochasticity);
    let b = a + 0.5 * (1.0 - stochasticity) * guidance;
    let score_active = a != 0.0;
    let x0 = if score_active { model.denoise(x_t, x_end, t)? } else { Vec::new() };
    let inv_var = 1.0 / m.variance;
    let mut out = vec![0.0f32; x_t.len()];
    for j in 0..x_t.len() {
        let (x, e) = (f64::from(x_t[j]), f64::from(x_end[j]));
        let h = hc.c_end * e - hc.c_state * x;
        let score = if score_active { (m.mean_coeff_x0 * f64::from(x0[j]) + m.mean_coeff_xend * e - x) * inv_var } else { 0.0 };
        out[j] = (f * x - g2 * (a * score - b * h)) as f32;
    }
    Ok(out)
}

/// Integrates a batch of rows; row `r` uses its own generator `rngs[r]`.
/// Returns one result per row.
pub fn purify_rows<D: Denoiser + ?Sized>(
    model: &D,
    x_end: &[f32],
    cfg: &SamplerConfig,
    rngs: &mut [Rng],
) -> Result<Vec<Result<Vec<f32>>>> {
    cfg.validate()?;
    let d = model.dim();
    let n = rngs.len();
    if x_end.len() != n * d {
        return Err(Error::Shape(alloc::format!("{} values for {n} rows of {d}", x_end.len())));
    }
    let schedule = *model.schedule();
    let grid = time_grid(&schedule, cfg.steps, cfg.warp);
    let n_stoch = cfg.stochastic_steps();
    let mut alive: Vec<usize> = (0..n).collect();
    let mut faults: Vec<Option<Error>> = vec![None; n];
    let mut x = x_end.to_vec();
    let mut ends = x_end.to_vec();
    for i in 0..cfg.steps {
        if alive.is_empty() {
            break;
        }
        let (t, t_next) = (grid[i], grid[i + 1]);
        let dt = t_next - t;
        if i < n_stoch {
            let d1 = reverse_drift(model, &x, &ends, t, cfg.guidance, 1.0)?;
            let noise = libm::sqrt(schedule.g_sq(t) * -dt);
            for (r, &row) in alive.iter().enumerate() {
                let rng = &mut rngs[row];
                for j in r * d..(r + 1) * d {
                    x[j] += (f64::from(d1[j]) * dt + noise * rng::normal(rng)) as f32;
                }
            }
        } else {
            let d1 = reverse_drift(model, &x, &ends, t, cfg.guidance, 0.0)?;
            let euler: Vec<f32> = x.iter().zip(&d1).map(|(&v, &k)| (f64::from(v) + f64::from(k) * dt) as f32).collect();
            let d2 = reverse_drift(model, &euler, &ends, t_next, cfg.guidance, 0.0)?;
            for j in 0..x.len() {
                x[j] = (f64::from(x[j]) + 0.5 * dt * (f64::from(d1[j]) + f64::from(d2[j]))) as f32;
            }
        }
        // Drop rows that went non-finite so they cannot stall the rest.
        let mut keep = Vec::with_capacity(alive.len());
        for (r, &row) in alive.iter().enumerate() {
            if x[r * d..(r + 1) * d].iter().all(|v| v.is_finite()) {
                keep.push(r);
            } else {
                faults[row] = Some(Error::SamplingFault { step: i });
            }
        }
        if keep.len() != alive.len() {
            let compact = |buf: &[f32]| keep.iter().flat_map(|&r| buf[r * d..(r + 1) * d].iter().copied()).collect::<Vec<_>>();
            x = compact(&x);
            ends = compact(&ends);
            alive = keep.iter().map(|&r| alive[r]).collect();
        }
    }
    let mut results: Vec<Result<Vec<f32>>> =
        faults.into_iter().map(|f| Err(f.unwrap_or(Error::SamplingFault { step: 0 }))).collect();
    for (r, &row) in alive.iter().enumerate() {
        let mut v = x[r * d..(r + 1) * d].to_vec();
        if cfg.clamp {
            for p in &mut v {
                *p = p.clamp(0.0, 1.0);
            }
        }
        results[row] = Ok(v);
    }
    Ok(results)
}

/// Purifies one protected input using `cfg.seed` for the stochastic steps.
pub fn purify<D: Denoiser + ?Sized>(model: &D, x_protected: &[f32], cfg: &SamplerConfig) -> Result<Vec<f32>> {
    let mut rngs = [rng::rng_from_seed(cfg.seed)];
    purify_rows(model, x_protected, cfg, &mut rngs)?.pop().expect("one row")
}

/// Seed used for a dataset element: independent of batching and order.
pub fn element_seed(cfg: &SamplerConfig, id: &str) -> u64 {
    rng::derive_seed(cfg.seed, id)
}

/// Progress report after each batch of [`purify_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchProgress {
    pub batch: usize,
    pub batches: usize,
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PurifyOutput {
    /// Purified samples in input order (failed ones omitted).
    pub dataset: Dataset,
    /// `(id, error)` for every element that could not be purified.
    pub faults: Vec<(String, Error)>,
}

/// Purifies every element of `dataset`, preserving ids, labels and order.
pub fn purify_dataset<D: Denoiser + ?Sized>(
    model: &D,
    dataset: &Dataset,
    cfg: &SamplerConfig,
    batch_size: usize,
    mut progress: impl FnMut(BatchProgress),
) -> Result<PurifyOutput> {
    if dataset.is_empty() {
        return Err(Error::Config("nothing to purify".into()));
    }
    let bs = batch_size.max(1);
    let d = model.dim();
    let batches = dataset.len().div_ceil(bs);
    let mut out = PurifyOutput { dataset: Dataset::default(), faults: Vec::new() };
    for (b, chunk) in dataset.samples.chunks(bs).enumerate() {
        let mut ends = Vec::with_capacity(chunk.len() * d);
        for s in chunk {
            if s.image.data.len() != d {
                return Err(Error::Shape(alloc::format!("image {} has {} values, model expects {d}", s.id, s.image.data.len())));
            }
            ends.extend_from_slice(&s.image.data);
        }
        let mut rngs: Vec<Rng> = chunk.iter().map(|s| rng::rng_from_seed(element_seed(cfg, &s.id))).collect();
        let rows = purify_rows(model, &ends, cfg, &mut rngs)?;
        for (s, row) in chunk.iter().zip(rows) {
            match row {
                Ok(v) => out.dataset.samples.push(Sample {
                    id: s.id.clone(),
                    label: s.label,
                    image: Image { shape: s.image.shape, data: v },
                }),
                Err(e) => out.faults.push((s.id.clone(), e)),
            }
        }
        progress(BatchProgress { batch: b + 1, batches, done: (b * bs + chunk.len()).min(dataset.len()), total: dataset.len() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::default_ve()
    }

    #[test]
    fn grid_is_strictly_decreasing_from_below_t() {
        let s = schedule();
        let g = time_grid(&s, 40, 2.0);
        assert_eq!(g.len(), 41);
        assert!(g[0] < s.t_max && (g[40] - s.t_min).abs() < 1e-15);
        assert!(g.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn stochastic_step_count() {
        let cfg = SamplerConfig { s: 0.33, ..SamplerConfig::default() };
        assert_eq!(cfg.stochastic_steps(), 13);
        assert_eq!(SamplerConfig::default().stochastic_steps(), 0);
        assert!(SamplerConfig { s: 1.5, ..SamplerConfig::default() }.validate().is_err());
        assert!(SamplerConfig { steps: 0, ..SamplerConfig::default() }.validate().is_err());
    }

    #[test]
    fn guidance_scales_only_the_endpoint_pull() {
        let s = NoiseSchedule::default_vp();
        let den = PointMassDenoiser { schedule: s, x0: vec![0.3, 0.6] };
        let (x, e, t) = ([0.5f32, 0.1], [0.4f32, 0.2], 0.6);
        let h = s.kernel().h_function(&x, t, &e).unwrap();
        let score = s.kernel().analytic_bridge_score(&x, t, &[0.3f32, 0.6], &e).unwrap();
        for w in [0.0, 0.5, 1.0] {
            let drift = reverse_drift(&den, &x, &e, t, w, 0.0).unwrap();
            for j in 0..2 {
                let want = s.drift_coeff(t) * f64::from(x[j])
                    - s.g_sq(t) * (0.5 * f64::from(score[j]) - 0.5 * (1.0 + w) * f64::from(h[j]));
                assert!((f64::from(drift[j]) - want).abs() < 1e-4 * want.abs().max(1.0), "w={w}");
            }
            let sde = reverse_drift(&den, &x, &e, t, w, 1.0).unwrap();
            assert_eq!(sde, reverse_drift(&den, &x, &e, t, 1.0, 1.0).unwrap());
        }
    }

    #[test]
    fn h_vanishes_at_the_endpoint() {
        let s = schedule();
        let den = PointMassDenoiser { schedule: s, x0: vec![0.3] };
        let t = 0.999;
        let with = reverse_drift(&den, &[0.7], &[0.7], t, 1.0, 0.0).unwrap()[0];
        let h = s.kernel().h_function(&[0.7f32], t, &[0.7]).unwrap()[0];
        assert_eq!(h, 0.0);
        let score = s.kernel().analytic_bridge_score(&[0.7f32], t, &[0.3], &[0.7]).unwrap()[0];
        let want = -s.g_sq(t) * 0.5 * f64::from(score);
        assert!((f64::from(with) - want).abs() < 1e-4 * want.abs());
    }

    #[test]
    fn point_mass_drift_matches_the_exact_pinned_reverse_drift() {
        for s in [NoiseSchedule::default_ve(), NoiseSchedule::default_vp()] {
            let den = PointMassDenoiser { schedule: s, x0: vec![0.25] };
            for &t in &[0.2, 0.5, 0.8] {
                let (x, e) = (0.4f64, 0.9f64);
                let k = s.kernel();
                let m = k.marginal(t).unwrap();
                let score = (m.mean_coeff_x0 * 0.25 + m.mean_coeff_xend * e - x) / m.variance;
                let hc = k.h_coefficients(t).unwrap();
                let h = hc.c_end * e - hc.c_state * x;
                let want = s.drift_coeff(t) * x - s.g_sq(t) * (score - h);
                let got = reverse_drift(&den, &[x as f32], &[e as f32], t, 1.0, 1.0).unwrap()[0];
                assert!((f64::from(got) - want).abs() < 1e-4 * want.abs().max(1.0), "t={t}");
            }
        }
    }

    #[test]
    fn deterministic_at_s_zero_seeded_otherwise() {
        let den = PointMassDenoiser { schedule: schedule(), x0: vec![0.2, 0.8, 0.5] };
        let end = [0.9f32, 0.1, 0.5];
        let cfg = SamplerConfig { steps: 10, ..SamplerConfig::default() };
        let a = purify(&den, &end, &cfg).unwrap();
        assert_eq!(a, purify(&den, &end, &SamplerConfig { seed: 77, ..cfg }).unwrap());
        let noisy = SamplerConfig { s: 0.5, clamp: false, ..cfg };
        let b = purify(&den, &end, &noisy).unwrap();
        assert_eq!(b, purify(&den, &end, &noisy).unwrap());
        assert_ne!(b, purify(&den, &end, &SamplerConfig { seed: 77, ..noisy }).unwrap());
    }

    #[test]
    fn point_mass_recovery_improves_with_steps() {
        let x0 = vec![0.1f32, 0.5, 0.9, 0.3];
        for s in [NoiseSchedule::default_ve(), NoiseSchedule::default_vp()] {
            let den = PointMassDenoiser { schedule: s, x0: x0.clone() };
            let end = [0.9f32, 0.0, 0.2, 0.35];
            let rmse = |steps| {
                let cfg = SamplerConfig { steps, guidance: 1.0, clamp: false, ..SamplerConfig::default() };
                let out = purify(&den, &end, &cfg).unwrap();
                let mse: f64 = out.iter().zip(&x0).map(|(a, b)| f64::from(a - b).powi(2)).sum::<f64>() / 4.0;
                mse.sqrt()
            };
            let (r40, r80) = (rmse(40), rmse(80));
            assert!(r40 < 1e-2, "{:?}: rmse40 {r40}", s.mode);
            assert!(r80 < r40, "{:?}: rmse80 {r80} vs rmse40 {r40}", s.mode);
        }
    }
}
