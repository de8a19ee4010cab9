//! Closed-form mathematics of pinned linear diffusions.
//!
//! The forward process is the linear SDE `dx = f(t) x dt + g(t) dW`. Writing
//! `alpha(t) = exp(∫₀ᵗ f)` and the scaled accumulated variance
//! `sigma²(t) = ∫₀ᵗ g²/alpha²`, the state satisfies `x_t / alpha(t) = x_0 +
//! sigma(t) z`, which gives every kernel below in closed form:
//!
//! - transition `p(x_T | x_t) = N(a x_t, b²)` with `a = alpha(T)/alpha(t)` and
//!   `b² = alpha(T)² (sigma²(T) − sigma²(t))`;
//! - Doob h-function `h = ∇ log p(x_T | x_t) = a (x_T − a x_t) / b²`;
//! - bridge marginal `q(x_t | x_0, x_T)`: in the scaled coordinate the process
//!   is a Brownian bridge on the clock `sigma²`, so with `r = sigma²(t)/sigma²(T)`
//!   the mean is `alpha(t) [(1 − r) x_0 + r x_T / alpha(T)]` and the variance is
//!   `alpha(t)² sigma²(t) (sigma²(T) − sigma²(t)) / sigma²(T)`.
//!
//! VE schedules have `alpha ≡ 1`; VP schedules use a linear drift rate.

use alloc::vec::Vec;
use num_traits::Float;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    /// Variance exploding: zero drift, geometric noise level.
    Ve,
    /// Variance preserving: drift `−½ beta(t) x` with linear `beta(t)`.
    Vp,
}

/// Drift/diffusion pair `(f, g)` of the forward linear SDE.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSchedule {
    pub mode: ScheduleMode,
    pub t_min: f64,
    pub t_max: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub beta_min_rate: f64,
    pub beta_max_rate: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::ve(0.02, 80.0, 1.0).expect("default VE schedule is valid")
    }
}

impl NoiseSchedule {
    /// VE schedule with `sigma²(t) = sigma_min² ((sigma_max/sigma_min)^(2t/T) − 1)`,
    /// i.e. a geometric noise level shifted so that `sigma(0) = 0`.
    pub fn ve(sigma_min: f64, sigma_max: f64, t_max: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
            return Err(Error::Config(alloc::format!(
                "VE schedule needs 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
            )));
        }
        Self::checked(Self {
            mode: ScheduleMode::Ve,
            t_min: 1e-3 * t_max,
            t_max,
            sigma_min,
            sigma_max,
            beta_min_rate: 0.0,
            beta_max_rate: 0.0,
        })
    }

    /// VP schedule with `beta(t) = beta_min + (beta_max − beta_min) t / T`.
    pub fn vp(beta_min_rate: f64, beta_max_rate: f64, t_max: f64) -> Result<Self> {
        if !(beta_min_rate > 0.0 && beta_max_rate >= beta_min_rate && beta_max_rate.is_finite()) {
            return Err(Error::Config(alloc::format!(
                "VP schedule needs 0 < beta_min <= beta_max, got {beta_min_rate}, {beta_max_rate}"
            )));
        }
        Self::checked(Self {
            mode: ScheduleMode::Vp,
            t_min: 1e-3 * t_max,
            t_max,
            sigma_min: 0.0,
            sigma_max: 0.0,
            beta_min_rate,
            beta_max_rate,
        })
    }

    pub fn default_ve() -> Self {
        Self::default()
    }

    pub fn default_vp() -> Self {
        Self::vp(0.1, 2.0, 1.0).expect("default VP schedule is valid")
    }

    pub fn with_t_min(mut self, t_min: f64) -> Result<Self> {
        self.t_min = t_min;
        Self::checked(self)
    }

    fn checked(self) -> Result<Self> {
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(Error::Config(alloc::format!("t_max must be positive, got {}", self.t_max)));
        }
        if !(self.t_min > 0.0 && self.t_min < self.t_max) {
            return Err(Error::Config(alloc::format!("t_min must lie in (0, {}), got {}", self.t_max, self.t_min)));
        }
        Ok(self)
    }

    /// Padding kept away from `T` in training and sampling.
    pub fn t_pad(&self) -> f64 {
        1e-3 * self.t_max
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if t.is_finite() && (0.0..=self.t_max).contains(&t) {
            Ok(())
        } else {
            Err(Error::TimeDomain { t, t_max: self.t_max })
        }
    }

    fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    /// ∫₀ᵗ beta(s) ds for VP.
    fn integrated_beta(&self, t: f64) -> f64 {
        let k = self.beta_max_rate - self.beta_min_rate;
        self.beta_min_rate * t + 0.5 * k * t * t / self.t_max
    }

    /// VP drift rate `beta(t)`; zero for VE.
    pub fn beta_rate(&self, t: f64) -> f64 {
        match self.mode {
            ScheduleMode::Ve => 0.0,
            ScheduleMode::Vp => self.beta_min_rate + (self.beta_max_rate - self.beta_min_rate) * t / self.t_max,
        }
    }

    /// Signal scale `alpha(t) = exp(∫₀ᵗ f)`.
    pub fn alpha(&self, t: f64) -> f64 {
        match self.mode {
            ScheduleMode::Ve => 1.0,
            ScheduleMode::Vp => (-0.5 * self.integrated_beta(t)).exp(),
        }
    }

    /// Scaled accumulated variance `sigma²(t)`.
    pub fn sigma_sq(&self, t: f64) -> f64 {
        match self.mode {
            ScheduleMode::Ve => self.sigma_min * self.sigma_min * (2.0 * self.log_ratio() * t / self.t_max).exp_m1(),
            ScheduleMode::Vp => self.integrated_beta(t).exp_m1(),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma_sq(t).sqrt()
    }

    /// Squared diffusion coefficient `g²(t)`.
    pub fn g_sq(&self, t: f64) -> f64 {
        match self.mode {
            ScheduleMode::Ve => {
                let lr = self.log_ratio();
                self.sigma_min * self.sigma_min * (2.0 * lr / self.t_max) * (2.0 * lr * t / self.t_max).exp()
            }
            ScheduleMode::Vp => self.beta_rate(t),
        }
    }

    /// Linear drift coefficient: `f(x, t) = drift_coeff(t) · x`.
    pub fn drift_coeff(&self, t: f64) -> f64 {
        -0.5 * self.beta_rate(t)
    }

    /// Forward drift `f(x, t)`.
    pub fn drift<T: Float>(&self, x: &[T], t: f64) -> Result<Vec<T>> {
        self.check_time(t)?;
        let c = cast::<T>(self.drift_coeff(t));
        Ok(x.iter().map(|&v| c * v).collect())
    }

    /// Inverse of [`sigma_sq`](Self::sigma_sq): the time at which the scaled
    /// variance reaches `v`.
    pub fn time_at_sigma_sq(&self, v: f64) -> Result<f64> {
        if !(v >= 0.0 && v <= self.sigma_sq(self.t_max)) {
            return Err(Error::Config(alloc::format!("variance {v} not reached on [0, T]")));
        }
        let t = match self.mode {
            ScheduleMode::Ve => self.t_max * (v / (self.sigma_min * self.sigma_min)).ln_1p() / (2.0 * self.log_ratio()),
            ScheduleMode::Vp => {
                let target = v.ln_1p();
                let k = (self.beta_max_rate - self.beta_min_rate) / self.t_max;
                if k == 0.0 {
                    target / self.beta_min_rate
                } else {
                    let b = self.beta_min_rate;
                    (-b + (b * b + 2.0 * k * target).sqrt()) / k
                }
            }
        };
        Ok(t.clamp(0.0, self.t_max))
    }

    pub fn kernel(&self) -> BridgeKernel {
        BridgeKernel { schedule: *self }
    }
}

#[inline]
fn cast<T: Float>(v: f64) -> T {
    T::from(v).expect("f64 is representable")
}

/// Gaussian parameters of `q(x_t | x_0, x_T)` at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeMarginal {
    pub mean_coeff_x0: f64,
    pub mean_coeff_xend: f64,
    pub variance: f64,
}

impl BridgeMarginal {
    pub fn mean<T: Float>(&self, x0: &[T], x_end: &[T]) -> Vec<T> {
        let (c0, c1) = (cast::<T>(self.mean_coeff_x0), cast::<T>(self.mean_coeff_xend));
        x0.iter().zip(x_end).map(|(&a, &b)| c0 * a + c1 * b).collect()
    }
}

/// Coefficients of the h-function: `h = c_end · x_end − c_state · x_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HCoefficients {
    pub c_end: f64,
    pub c_state: f64,
}

/// Transition kernel `p(x_T | x_t)` of a [`NoiseSchedule`] and the bridge
/// quantities derived from it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeKernel {
    pub schedule: NoiseSchedule,
}

impl BridgeKernel {
    pub fn new(schedule: NoiseSchedule) -> Self {
        Self { schedule }
    }

    fn t_max(&self) -> f64 {
        self.schedule.t_max
    }

    /// Scaling `a(t→T)` of the transition mean.
    pub fn scale_to_end(&self, t: f64) -> Result<f64> {
        self.schedule.check_time(t)?;
        Ok(self.schedule.alpha(self.t_max()) / self.schedule.alpha(t))
    }

    /// Variance `b²(t→T)` of the transition kernel; zero at `t = T`.
    pub fn variance_to_end(&self, t: f64) -> Result<f64> {
        self.schedule.check_time(t)?;
        let s = &self.schedule;
        let at = s.alpha(self.t_max());
        Ok(at * at * (s.sigma_sq(self.t_max()) - s.sigma_sq(t)).max(0.0))
    }

    pub fn h_coefficients(&self, t: f64) -> Result<HCoefficients> {
        self.schedule.check_time(t)?;
        let s = &self.schedule;
        let remaining = s.sigma_sq(self.t_max()) - s.sigma_sq(t);
        if t >= self.t_max() || !(remaining > 0.0) {
            return Err(Error::Singular { t, what: "transition variance to T is zero" });
        }
        let (alpha_t, alpha_end) = (s.alpha(t), s.alpha(self.t_max()));
        Ok(HCoefficients { c_end: 1.0 / (alpha_end * alpha_t * remaining), c_state: 1.0 / (alpha_t * alpha_t * remaining) })
    }

    /// Doob h-function `∇_{x_t} log p(x_T = x_end | x_t)`.
    pub fn h_function<T: Float>(&self, x_t: &[T], t: f64, x_end: &[T]) -> Result<Vec<T>> {
        check_len(x_t.len(), x_end.len())?;
        let c = self.h_coefficients(t)?;
        let (ce, cs) = (cast::<T>(c.c_end), cast::<T>(c.c_state));
        Ok(x_t.iter().zip(x_end).map(|(&x, &e)| ce * e - cs * x).collect())
    }

    pub fn marginal(&self, t: f64) -> Result<BridgeMarginal> {
        self.schedule.check_time(t)?;
        let s = &self.schedule;
        let total = s.sigma_sq(self.t_max());
        let acc = s.sigma_sq(t).min(total);
        let r = acc / total;
        let (alpha_t, alpha_end) = (s.alpha(t), s.alpha(self.t_max()));
        if t >= self.t_max() {
            return Ok(BridgeMarginal { mean_coeff_x0: 0.0, mean_coeff_xend: 1.0, variance: 0.0 });
        }
        Ok(BridgeMarginal {
            mean_coeff_x0: alpha_t * (1.0 - r),
            mean_coeff_xend: alpha_t * r / alpha_end,
            variance: alpha_t * alpha_t * acc * (total - acc) / total,
        })
    }

    /// Mean and variance of `q(x_t | x_0, x_T = x_end)`.
    pub fn bridge_marginal<T: Float>(&self, x0: &[T], x_end: &[T], t: f64) -> Result<(Vec<T>, f64)> {
        check_len(x0.len(), x_end.len())?;
        let m = self.marginal(t)?;
        Ok((m.mean(x0, x_end), m.variance))
    }

    /// One draw `x_t ~ q(x_t | x_0, x_end)`.
    pub fn sample_bridge_state<T: Float>(&self, x0: &[T], x_end: &[T], t: f64, rng: &mut Rng) -> Result<Vec<T>> {
        let (mut mean, var) = self.bridge_marginal(x0, x_end, t)?;
        if var > 0.0 {
            let sd = var.sqrt();
            for v in &mut mean {
                *v = *v + cast::<T>(sd * rng::normal(rng));
            }
        }
        Ok(mean)
    }

    /// `∇_{x_t} log q(x_t | x_0, x_end) = (mean − x_t) / variance`.
    pub fn analytic_bridge_score<T: Float>(&self, x_t: &[T], t: f64, x0: &[T], x_end: &[T]) -> Result<Vec<T>> {
        check_len(x_t.len(), x0.len())?;
        check_len(x_t.len(), x_end.len())?;
        self.schedule.check_time(t)?;
        if t <= 0.0 || t >= self.t_max() {
            return Err(Error::Singular { t, what: "bridge marginal variance is zero at the endpoints" });
        }
        let m = self.marginal(t)?;
        if !(m.variance > 0.0) {
            return Err(Error::Singular { t, what: "bridge marginal variance underflowed" });
        }
        let inv = cast::<T>(1.0 / m.variance);
        let (c0, c1) = (cast::<T>(m.mean_coeff_x0), cast::<T>(m.mean_coeff_xend));
        Ok(x_t.iter().zip(x0.iter().zip(x_end)).map(|(&x, (&a, &b))| (c0 * a + c1 * b - x) * inv).collect())
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(alloc::format!("tensor lengths differ: {a} vs {b}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
        -0.5 * (x - mean) * (x - mean) / var - 0.5 * (2.0 * core::f64::consts::PI * var).ln()
    }

    /// VE schedule with sigma²(T) = 2, so that sigma²(t) = 1 is reachable.
    fn ve_two() -> NoiseSchedule {
        NoiseSchedule::ve(0.5, 1.5, 1.0).unwrap()
    }

    #[test]
    fn ve_drift_is_zero_and_vp_drift_is_linear() {
        let ve = NoiseSchedule::default_ve();
        assert_eq!(ve.drift(&[1.0f64, -3.0], 0.5).unwrap(), vec![0.0, 0.0]);
        let vp = NoiseSchedule::vp(0.2, 0.2, 1.0).unwrap();
        let d = vp.drift(&[1.0f64, 0.0], 0.3).unwrap();
        assert!((d[0] + 0.1).abs() < 1e-15);
        assert_eq!(d[1], 0.0);
        assert!(matches!(ve.drift(&[1.0f64], 1.5), Err(Error::TimeDomain { .. })));
        assert!(matches!(ve.drift(&[1.0f64], -0.1), Err(Error::TimeDomain { .. })));
    }

    #[test]
    fn schedule_invariants() {
        for s in [NoiseSchedule::default_ve(), NoiseSchedule::default_vp(), ve_two()] {
            assert!(s.t_min > 0.0 && s.t_min < s.t_max);
            assert_eq!(s.sigma_sq(0.0), 0.0);
            assert_eq!(s.alpha(0.0), 1.0);
            let mut prev_sig = -1.0;
            let mut prev_alpha = f64::INFINITY;
            for i in 0..=100 {
                let t = i as f64 / 100.0;
                let (sig, a) = (s.sigma(t), s.alpha(t));
                assert!(sig > prev_sig && sig.is_finite());
                match s.mode {
                    ScheduleMode::Ve => assert_eq!(a, 1.0),
                    ScheduleMode::Vp => assert!(a < prev_alpha),
                }
                prev_sig = sig;
                prev_alpha = a;
            }
        }
    }

    #[test]
    fn g_sq_is_derivative_of_scaled_variance() {
        for s in [NoiseSchedule::default_ve(), NoiseSchedule::default_vp()] {
            for &t in &[0.1, 0.4, 0.8] {
                let h = 1e-6;
                let dvar = (s.sigma_sq(t + h) - s.sigma_sq(t - h)) / (2.0 * h);
                let a = s.alpha(t);
                let rel = (dvar * a * a - s.g_sq(t)).abs() / s.g_sq(t);
                assert!(rel < 1e-6, "{:?} t={t} rel={rel}", s.mode);
            }
        }
    }

    #[test]
    fn time_at_sigma_sq_inverts() {
        for s in [NoiseSchedule::default_ve(), NoiseSchedule::default_vp(), ve_two()] {
            for &t in &[0.05, 0.5, 0.93] {
                let back = s.time_at_sigma_sq(s.sigma_sq(t)).unwrap();
                assert!((back - t).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn kernel_endpoint_values() {
        let k = ve_two().kernel();
        assert_eq!(k.variance_to_end(1.0).unwrap(), 0.0);
        assert!(k.variance_to_end(0.99).unwrap() > 0.0);
        assert_eq!(k.scale_to_end(0.3).unwrap(), 1.0);
        let t = ve_two().time_at_sigma_sq(1.0).unwrap();
        assert!((k.variance_to_end(t).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn h_function_example_and_finite_difference() {
        let s = ve_two();
        let k = s.kernel();
        let t = s.time_at_sigma_sq(1.0).unwrap();
        let h = k.h_function(&[0.0f64], t, &[1.0]).unwrap()[0];
        let b2 = k.variance_to_end(t).unwrap();
        let step = 1e-5;
        let fd = (log_normal(1.0, step, b2) - log_normal(1.0, -step, b2)) / (2.0 * step);
        assert!((h - 1.0).abs() < 1e-9);
        assert!((fd - 1.0).abs() < 1e-6);
        assert_eq!(k.h_function(&[0.7f64], t, &[0.7]).unwrap(), vec![0.0]);
        assert!(matches!(k.h_function(&[0.0f64], 1.0, &[1.0]), Err(Error::Singular { .. })));
    }

    #[test]
    fn marginal_pins_endpoints() {
        let k = NoiseSchedule::default_vp().kernel();
        let (m0, v0) = k.bridge_marginal(&[0.3f64, -1.0], &[0.9, 2.0], 0.0).unwrap();
        assert_eq!(m0, vec![0.3, -1.0]);
        assert_eq!(v0, 0.0);
        let (m1, v1) = k.bridge_marginal(&[0.3f64, -1.0], &[0.9, 2.0], 1.0).unwrap();
        assert_eq!(m1, vec![0.9, 2.0]);
        assert_eq!(v1, 0.0);
    }

    #[test]
    fn ve_marginal_example() {
        let s = ve_two();
        let t = s.time_at_sigma_sq(1.0).unwrap();
        let (m, v) = s.kernel().bridge_marginal(&[0.0f64], &[2.0], t).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-12);
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sample_bridge_state_determinism_and_endpoint() {
        let k = NoiseSchedule::default_ve().kernel();
        let x0 = [0.2f32, 0.4, 0.6];
        let xe = [0.3f32, 0.1, 0.9];
        let a = k.sample_bridge_state(&x0, &xe, 0.0, &mut rng::rng_from_seed(1)).unwrap();
        assert_eq!(a, x0.to_vec());
        let b = k.sample_bridge_state(&x0, &xe, 0.4, &mut rng::rng_from_seed(9)).unwrap();
        let c = k.sample_bridge_state(&x0, &xe, 0.4, &mut rng::rng_from_seed(9)).unwrap();
        assert_eq!(b, c);
    }

    #[test]
    fn score_is_zero_at_mean_and_linear() {
        let k = NoiseSchedule::default_ve().kernel();
        let (x0, xe, t) = ([0.1f64, 0.5], [0.4f64, 0.45], 0.3);
        let (mean, _) = k.bridge_marginal(&x0, &xe, t).unwrap();
        let s0 = k.analytic_bridge_score(&mean, t, &x0, &xe).unwrap();
        assert!(s0.iter().all(|v| v.abs() < 1e-12));
        let off1: Vec<f64> = mean.iter().map(|m| m + 0.01).collect();
        let off2: Vec<f64> = mean.iter().map(|m| m + 0.02).collect();
        let s1 = k.analytic_bridge_score(&off1, t, &x0, &xe).unwrap();
        let s2 = k.analytic_bridge_score(&off2, t, &x0, &xe).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert!((2.0 * a - b).abs() < 1e-9 * b.abs());
        }
        assert!(k.analytic_bridge_score(&mean, 0.0, &x0, &xe).is_err());
        assert!(k.analytic_bridge_score(&mean, 1.0, &x0, &xe).is_err());
    }

    #[test]
    fn vp_with_vanishing_rates_matches_ve_closed_forms() {
        let vp = NoiseSchedule::vp(1e-9, 1e-9, 1.0).unwrap();
        let k = vp.kernel();
        let total = vp.sigma_sq(1.0);
        for &t in &[0.1, 0.5, 0.9] {
            let acc = vp.sigma_sq(t);
            let m = k.marginal(t).unwrap();
            let r = acc / total;
            assert!((m.mean_coeff_x0 - (1.0 - r)).abs() < 1e-6);
            assert!((m.mean_coeff_xend - r).abs() < 1e-6);
            let ve_var = acc * (total - acc) / total;
            assert!((m.variance - ve_var).abs() <= 1e-6 * ve_var);
            let h = k.h_function(&[0.2f64], t, &[0.7]).unwrap()[0];
            let ve_h = (0.7 - 0.2) / (total - acc);
            assert!((h - ve_h).abs() <= 1e-6 * ve_h.abs());
            assert!((k.scale_to_end(t).unwrap() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(NoiseSchedule::ve(0.0, 1.0, 1.0).is_err());
        assert!(NoiseSchedule::ve(2.0, 1.0, 1.0).is_err());
        assert!(NoiseSchedule::vp(0.0, 1.0, 1.0).is_err());
        assert!(NoiseSchedule::default_ve().with_t_min(1.0).is_err());
        assert!(NoiseSchedule::default_ve().with_t_min(0.0).is_err());
    }
}
