//! Network-free diffusion mathematics: variance schedule, forward corruption,
//! posterior parameters, the ε-prediction objective and the reverse update.
//!
//! Tensors are flat `f64` slices; every operation is elementwise so the
//! spatial layout is irrelevant here.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Above this many steps the cumulative product is accumulated in log space.
const LOG_DOMAIN_STEPS: usize = 10_000;

/// Parameters from which a [`NoiseSchedule`] is rebuilt.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-6, beta_end: 1e-2 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Fixed variance schedule.
///
/// All arrays are indexed by the step `t` directly and have length `T + 1`;
/// index 0 holds the boundary convention `ᾱ_0 = 1` (`β_0 = 0`, `α_0 = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear ramp `β_t = β_start + (t-1)/(T-1)·(β_end - β_start)`.
    ///
    /// With `T = 1` the single variance is `beta_start`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(domain("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(domain(format!(
                "variance range must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        if steps > 1 && beta_start == beta_end {
            return Err(domain("variances must be strictly increasing; beta_start equals beta_end"));
        }
        let mut betas = Vec::with_capacity(steps + 1);
        betas.push(0.0);
        for t in 1..=steps {
            let frac = if steps == 1 { 0.0 } else { (t - 1) as f64 / (steps - 1) as f64 };
            betas.push(beta_start + frac * (beta_end - beta_start));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = vec![1.0; steps + 1];
        if steps >= LOG_DOMAIN_STEPS {
            let mut log_sum = 0.0;
            for t in 1..=steps {
                log_sum += (-betas[t]).ln_1p();
                alpha_bars[t] = log_sum.exp();
            }
        } else {
            for t in 1..=steps {
                alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
            }
        }
        let mut posterior_vars = vec![0.0; steps + 1];
        for t in 1..=steps {
            posterior_vars[t] = (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * betas[t];
        }
        Ok(Self {
            config: ScheduleConfig { steps, beta_start, beta_end },
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_vars
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(domain(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

fn check_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(domain(format!("{what}: length mismatch ({} vs {})", a.len(), b.len())));
    }
    Ok(())
}

/// Closed-form corruption `√ᾱ_t·g0 + √(1-ᾱ_t)·ε`.
pub fn q_sample(g0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_len(g0, eps, "q_sample")?;
    let (s, n) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
    Ok(g0.iter().zip(eps).map(|(g, e)| s * g + n * e).collect())
}

/// One forward transition `√α_t·g_{t-1} + √β_t·ε`.
pub fn q_step(prev: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_len(prev, eps, "q_step")?;
    let (s, n) = (sched.alpha(t).sqrt(), sched.beta(t).sqrt());
    Ok(prev.iter().zip(eps).map(|(g, e)| s * g + n * e).collect())
}

/// Mean and variance of `q(g_{t-1} | g_t, g0)`.
pub fn posterior_params(g_t: &[f64], g0: &[f64], t: usize, sched: &NoiseSchedule) -> Result<(Vec<f64>, f64)> {
    sched.check_step(t)?;
    check_len(g_t, g0, "posterior_params")?;
    let (a, ab, ab_prev) = (sched.alpha(t), sched.alpha_bar(t), sched.alpha_bar(t - 1));
    let ct = a.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let c0 = ab_prev.sqrt() * (1.0 - a) / (1.0 - ab);
    let mean = g_t.iter().zip(g0).map(|(x, x0)| ct * x + c0 * x0).collect();
    Ok((mean, sched.posterior_var(t)))
}

/// Posterior mean written in terms of the noise linking `g0` and `g_t`.
pub fn posterior_mean_from_eps(g_t: &[f64], eps: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_len(g_t, eps, "posterior_mean_from_eps")?;
    let k = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    Ok(g_t.iter().zip(eps).map(|(x, e)| inv * (x - k * e)).collect())
}

/// Estimate of the clean map from a noise prediction.
pub fn predict_x0(g_t: &[f64], eps_hat: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_len(g_t, eps_hat, "predict_x0")?;
    let (s, n) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
    Ok(g_t.iter().zip(eps_hat).map(|(x, e)| (x - n * e) / s).collect())
}

/// One refinement step of the reverse chain.
///
/// `noise` must be all zeros at `t = 1`.
pub fn reverse_step(g_t: &[f64], eps_hat: &[f64], t: usize, noise: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_len(g_t, eps_hat, "reverse_step")?;
    check_len(g_t, noise, "reverse_step")?;
    if t == 1 && noise.iter().any(|&v| v != 0.0) {
        return Err(domain("no noise may be injected at the final step t = 1"));
    }
    let a = sched.alpha(t);
    let k = (1.0 - a) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / a.sqrt();
    let sd = sched.posterior_var(t).sqrt();
    Ok(g_t.iter().zip(eps_hat).zip(noise).map(|((x, e), z)| inv * (x - k * e) + sd * z).collect())
}

/// How per-step noise-prediction errors are weighted in the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// Plain mean squared error on the noise.
    #[default]
    Simple,
    /// Per-step weight from the variational bound.
    Bound,
}

/// Weight of step `t` under the variational bound:
/// `(1-α_t)² / (2σ_t² α_t (1-ᾱ_t))` with `σ_t² = β̃_t`, falling back to `β_1` at `t = 1`
/// where the posterior variance vanishes.
pub fn bound_weight(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    sched.check_step(t)?;
    let a = sched.alpha(t);
    let var = if t == 1 { sched.beta(1) } else { sched.posterior_var(t) };
    Ok((1.0 - a).powi(2) / (2.0 * var * a * (1.0 - sched.alpha_bar(t))))
}

/// Mean squared error between the true and predicted noise over all elements.
pub fn training_loss(eps_true: &[f64], eps_hat: &[f64]) -> Result<f64> {
    check_len(eps_true, eps_hat, "training_loss")?;
    if eps_true.is_empty() {
        return Err(domain("training_loss of empty tensors"));
    }
    let sum: f64 = eps_true.iter().zip(eps_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / eps_true.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn paper() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-6, 1e-2).unwrap()
    }

    #[test]
    fn three_step_midpoint() {
        let s = NoiseSchedule::linear(3, 1e-6, 1e-2).unwrap();
        assert!((s.beta(2) - 5.0005e-3).abs() < 1e-15);
        assert_eq!(s.beta(1), 1e-6);
        assert_eq!(s.beta(3), 1e-2);
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert_eq!(s.steps(), 1);
        assert_eq!(s.beta(1), 0.1);
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(4, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(4, 0.1, 0.1).is_err());
    }

    #[test]
    fn recursion_is_exact_and_monotone() {
        let s = paper();
        for t in 1..=s.steps() {
            assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
            assert!(s.beta(t) > s.beta(t - 1) || t == 1);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert_eq!(s.posterior_var(1), 0.0);
        for t in 2..=s.steps() {
            assert!(s.posterior_var(t) < s.beta(t));
        }
    }

    #[test]
    fn final_alpha_bar_matches_log_sum() {
        let s = paper();
        let log: f64 = (1..=1000).map(|t| (1.0 - s.beta(t)).ln()).sum();
        let rel = (s.alpha_bar(1000) - log.exp()).abs() / log.exp();
        assert!(rel < 1e-10, "{rel}");
    }

    #[test]
    fn long_schedule_uses_log_domain_without_underflow() {
        let s = NoiseSchedule::linear(20_000, 1e-4, 0.05).unwrap();
        let log: f64 = (1..=20_000).map(|t| (1.0 - s.beta(t)).ln()).sum();
        assert!(s.alpha_bar(20_000) >= 0.0);
        assert!((s.alpha_bar(20_000) - log.exp()).abs() <= 1e-10 * log.exp().max(f64::MIN_POSITIVE));
    }

    #[test]
    fn paper_schedule_ends_near_noise() {
        let s = paper();
        assert!(s.alpha_bar(1000).sqrt() < 0.1, "{}", s.alpha_bar(1000).sqrt());
    }

    #[test]
    fn q_sample_edge_cases() {
        let s = paper();
        let g0 = [0.3, -0.7];
        let zero = [0.0, 0.0];
        let out = q_sample(&g0, 500, &zero, &s).unwrap();
        for (o, g) in out.iter().zip(g0) {
            assert_eq!(*o, s.alpha_bar(500).sqrt() * g);
        }
        let eps = [1.5, -2.0];
        let out = q_sample(&zero, 500, &eps, &s).unwrap();
        for (o, e) in out.iter().zip(eps) {
            assert_eq!(*o, (1.0 - s.alpha_bar(500)).sqrt() * e);
        }
        assert!(q_sample(&g0, 1, &[0.0], &s).is_err());
        assert!(q_sample(&g0, 0, &zero, &s).is_err());
    }

    #[test]
    fn final_step_is_deterministic_and_exact() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.05).unwrap();
        let g0 = [0.25, 0.75, -0.1];
        let eps = [0.3, -1.1, 2.0];
        let g1 = q_sample(&g0, 1, &eps, &s).unwrap();
        let out = reverse_step(&g1, &eps, 1, &[0.0; 3], &s).unwrap();
        for (o, g) in out.iter().zip(g0) {
            assert!((o - g).abs() < 1e-12);
        }
        assert!(reverse_step(&g1, &eps, 1, &[0.0, 1.0, 0.0], &s).is_err());
        let (mean, var) = posterior_params(&g1, &g0, 1, &s).unwrap();
        assert_eq!(var, 0.0);
        for (m, g) in mean.iter().zip(g0) {
            assert!((m - g).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(training_loss(&[0.5, -1.0], &[0.5, -1.0]).unwrap(), 0.0);
        assert_eq!(training_loss(&[0.0; 7], &[1.0; 7]).unwrap(), 1.0);
    }

    #[test]
    fn bound_weights_are_positive() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.1).unwrap();
        for t in 1..=100 {
            let w = bound_weight(t, &s).unwrap();
            assert!(w.is_finite() && w > 0.0);
        }
    }

    proptest! {
        #[test]
        fn predict_x0_inverts_corruption(
            g0 in proptest::collection::vec(-1.0f64..1.0, 8),
            eps in proptest::collection::vec(-3.0f64..3.0, 8),
            t in 1usize..=1000,
        ) {
            let s = paper();
            let gt = q_sample(&g0, t, &eps, &s).unwrap();
            let back = predict_x0(&gt, &eps, t, &s).unwrap();
            for (b, g) in back.iter().zip(&g0) {
                prop_assert!((b - g).abs() <= 1e-5);
            }
        }

        #[test]
        fn mean_forms_agree(
            g0 in proptest::collection::vec(-1.0f64..1.0, 6),
            eps in proptest::collection::vec(-3.0f64..3.0, 6),
            t in 1usize..=1000,
        ) {
            let s = paper();
            let gt = q_sample(&g0, t, &eps, &s).unwrap();
            let (m1, _) = posterior_params(&gt, &g0, t, &s).unwrap();
            let m2 = posterior_mean_from_eps(&gt, &eps, t, &s).unwrap();
            let m3 = reverse_step(&gt, &eps, t, &[0.0; 6], &s).unwrap();
            for ((a, b), c) in m1.iter().zip(&m2).zip(&m3) {
                prop_assert!((a - b).abs() <= 1e-9);
                prop_assert!((b - c).abs() <= 1e-12);
            }
        }

        #[test]
        fn predict_x0_is_affine_in_noise(
            g in proptest::collection::vec(-1.0f64..1.0, 4),
            a in proptest::collection::vec(-2.0f64..2.0, 4),
            b in proptest::collection::vec(-2.0f64..2.0, 4),
            t in 1usize..=1000,
        ) {
            let s = paper();
            let pa = predict_x0(&g, &a, t, &s).unwrap();
            let pb = predict_x0(&g, &b, t, &s).unwrap();
            let k = (1.0 - s.alpha_bar(t)).sqrt() / s.alpha_bar(t).sqrt();
            for i in 0..4 {
                let expect = k * (b[i] - a[i]);
                prop_assert!((pa[i] - pb[i] - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
            }
        }

        #[test]
        fn reverse_step_preserves_shape(n in 1usize..40, t in 2usize..=50) {
            let s = NoiseSchedule::linear(50, 1e-4, 0.05).unwrap();
            let v = vec![0.1; n];
            prop_assert_eq!(reverse_step(&v, &v, t, &v, &s).unwrap().len(), n);
        }
    }
}
