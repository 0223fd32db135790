use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// What a checkpoint stores about its schedule. The per-step tables are
/// always re-derived from these four values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleMeta {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleMeta {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.beta_start, self.beta_end, self.kind)
    }
}

/// Per-step noise tables. Public accessors use 1-based timesteps `t ∈ [1, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    meta: ScheduleMeta,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("steps", "must be at least 1"));
        }
        if !(beta_start > 0.0) {
            return Err(Error::param("beta_start", format!("{beta_start} is not > 0")));
        }
        if !(beta_end < 1.0) {
            return Err(Error::param("beta_end", format!("{beta_end} is not < 1")));
        }
        if beta_start > beta_end {
            return Err(Error::param(
                "beta_start",
                format!("{beta_start} exceeds beta_end {beta_end}"),
            ));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear if steps == 1 => vec![beta_start],
            ScheduleKind::Linear => (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect(),
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        if alpha_bars.windows(2).any(|w| !(w[1] < w[0])) || !(alpha_bars[steps - 1] > 0.0) {
            return Err(Error::param(
                "steps",
                "cumulative signal level underflows; shorten the schedule or lower beta_end",
            ));
        }
        Ok(Self {
            meta: ScheduleMeta {
                kind,
                steps,
                beta_start,
                beta_end,
            },
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Linear 1e-4 → 0.02 over `steps`.
    pub fn linear_default(steps: usize) -> Result<Self> {
        Self::new(steps, 1e-4, 0.02, ScheduleKind::Linear)
    }

    pub fn meta(&self) -> ScheduleMeta {
        self.meta
    }

    pub fn steps(&self) -> usize {
        self.meta.steps
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

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alphas[t - 1])
    }

    /// `ᾱ_t`; `t = 0` is accepted here and returns 1 (the clean signal).
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// One forward noising step: `√(1−β_t)·x_{t−1} + √β_t·ε`.
    pub fn forward_step(&self, x_prev: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        let b = self.beta(t)?;
        x_prev.lin_comb((1.0 - b).sqrt(), eps, b.sqrt())
    }

    /// Closed-form marginal: `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let ab = self.alpha_bars[t - 1];
        x0.lin_comb(ab.sqrt(), eps, (1.0 - ab).sqrt())
    }

    /// Posterior mean from a noise prediction plus `σ_t·z`, with `σ_t² = β_t`.
    /// `z` must be all zeros at `t = 1`.
    pub fn reverse_step(&self, x_t: &Tensor, t: usize, eps_pred: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        x_t.ensure_same_shape(eps_pred)?;
        x_t.ensure_same_shape(z)?;
        if t == 1 && !z.is_all_zero() {
            return Err(Error::Contract("reverse step at t = 1 must not add noise".into()));
        }
        let (a, b, ab) = (self.alphas[t - 1], self.betas[t - 1], self.alpha_bars[t - 1]);
        posterior_step(x_t, eps_pred, a, b, ab, if t == 1 { None } else { Some(z) })
    }
}

/// `(1/√α)·(x − β/√(1−ᾱ_t)·ε) + √β·z`, shared by the full and strided samplers.
pub(crate) fn posterior_step(
    x_t: &Tensor,
    eps_pred: &Tensor,
    alpha: f64,
    beta: f64,
    alpha_bar_t: f64,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    let inv = 1.0 / alpha.sqrt();
    let coef = beta / (1.0 - alpha_bar_t).sqrt();
    let mean = x_t.lin_comb(inv, eps_pred, -inv * coef)?;
    match z {
        Some(z) => mean.lin_comb(1.0, z, beta.sqrt()),
        None => Ok(mean),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn paper_scale_schedule_tail() {
        let sch = NoiseSchedule::linear_default(1000).unwrap();
        // independent cumulative product
        let mut prod = 1.0;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert_eq!(sch.alpha_bar(1000).unwrap(), prod);
        assert!(prod > 3.5e-5 && prod < 4.5e-5, "{prod}");
        assert!(sch.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn single_step_and_two_step_cases() {
        let one = NoiseSchedule::new(1, 0.3, 0.3, ScheduleKind::Linear).unwrap();
        assert_eq!(one.betas(), &[0.3]);
        assert_eq!(one.alpha_bars(), &[1.0 - 0.3]);
        let two = NoiseSchedule::new(2, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        assert_eq!(two.alpha_bars(), &[0.5, 0.25]);
    }

    #[test]
    fn rejects_bad_bounds_by_name() {
        let e = NoiseSchedule::new(10, 0.0, 0.1, ScheduleKind::Linear).unwrap_err();
        assert!(matches!(e, Error::Parameter { name: "beta_start", .. }));
        let e = NoiseSchedule::new(10, 0.1, 1.0, ScheduleKind::Linear).unwrap_err();
        assert!(matches!(e, Error::Parameter { name: "beta_end", .. }));
        let e = NoiseSchedule::new(10, 0.2, 0.1, ScheduleKind::Linear).unwrap_err();
        assert!(matches!(e, Error::Parameter { name: "beta_start", .. }));
        let e = NoiseSchedule::new(0, 0.1, 0.1, ScheduleKind::Linear).unwrap_err();
        assert!(matches!(e, Error::Parameter { name: "steps", .. }));
    }

    #[test]
    fn forward_step_cases() {
        let sch = NoiseSchedule::new(2, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let zero = Tensor::zeros(&[3]);
        assert_eq!(sch.forward_step(&x, 1, &zero).unwrap(), x.scale(0.5f64.sqrt()));
        assert_eq!(sch.forward_step(&zero, 1, &x).unwrap(), x.scale(0.5f64.sqrt()));
        let v = sch.forward_step(&s(1.0), 1, &s(1.0)).unwrap().data()[0];
        assert!((v - 1.41421).abs() < 1e-5);
        assert!(matches!(
            sch.forward_step(&x, 1, &Tensor::zeros(&[2])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn q_sample_cases() {
        let sch = NoiseSchedule::new(2, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        let v = sch.q_sample(&s(1.0), 2, &s(1.0)).unwrap().data()[0];
        assert!((v - (0.5 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((v - 1.36603).abs() < 1e-5);
        let x = s(3.0);
        assert_eq!(sch.q_sample(&x, 2, &s(0.0)).unwrap(), s(0.5 * 3.0));
        assert!(matches!(sch.q_sample(&x, 3, &s(0.0)), Err(Error::Index { t: 3, .. })));
        assert!(matches!(sch.q_sample(&x, 0, &s(0.0)), Err(Error::Index { .. })));
    }

    #[test]
    fn iterated_forward_matches_marginal_in_distribution() {
        let sch = NoiseSchedule::new(10, 0.05, 0.3, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = 0.7;
        let t = 7;
        let n = 20_000;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let mut x = s(x0);
            for step in 1..=t {
                let e: f64 = StandardNormal.sample(&mut rng);
                x = sch.forward_step(&x, step, &s(e)).unwrap();
            }
            samples.push(x.data()[0]);
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = sch.alpha_bar(t).unwrap();
        let want_mean = ab.sqrt() * x0;
        let want_var = 1.0 - ab;
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - want_mean).abs() < 3.0 * se_mean, "{mean} vs {want_mean}");
        assert!((var - want_var).abs() < 3.0 * se_var, "{var} vs {want_var}");
    }

    #[test]
    fn q_sample_variance_matches() {
        let sch = NoiseSchedule::linear_default(200).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let t = 120;
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                sch.q_sample(&s(-1.3), t, &s(e)).unwrap().data()[0]
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want = 1.0 - sch.alpha_bar(t).unwrap();
        assert!((var - want).abs() < 3.0 * want * (2.0 / (n - 1) as f64).sqrt());
    }

    #[test]
    fn reverse_step_inverts_q_sample_at_t1() {
        let sch = NoiseSchedule::linear_default(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::randn(&[2, 3], &mut rng);
        let eps = Tensor::randn(&[2, 3], &mut rng);
        let xt = sch.q_sample(&x0, 1, &eps).unwrap();
        let back = sch.reverse_step(&xt, 1, &eps, &Tensor::zeros(&[2, 3])).unwrap();
        assert!(back.l2_distance(&x0).unwrap() < 1e-5);
    }

    #[test]
    fn reverse_step_contracts() {
        let sch = NoiseSchedule::linear_default(50).unwrap();
        let x = Tensor::full(&[4], 2.0);
        let zero = Tensor::zeros(&[4]);
        let out = sch.reverse_step(&x, 10, &zero, &zero).unwrap();
        assert_eq!(out, x.scale(1.0 / sch.alpha(10).unwrap().sqrt()));
        assert!(matches!(sch.reverse_step(&x, 0, &zero, &zero), Err(Error::Index { .. })));
        assert!(matches!(
            sch.reverse_step(&x, 1, &zero, &Tensor::full(&[4], 0.1)),
            Err(Error::Contract(_))
        ));
    }

    proptest! {
        #[test]
        fn valid_schedules_are_monotone(steps in 1usize..400, a in 1e-5f64..0.05, span in 0.0f64..0.2) {
            let b = (a + span).min(0.5);
            let sch = NoiseSchedule::new(steps, a, b, ScheduleKind::Linear).unwrap();
            prop_assert_eq!(sch.betas().len(), steps);
            prop_assert_eq!(sch.alphas().len(), steps);
            prop_assert_eq!(sch.alpha_bars().len(), steps);
            let mut acc = 1.0;
            for (i, ab) in sch.alpha_bars().iter().enumerate() {
                acc *= sch.alphas()[i];
                prop_assert_eq!(*ab, acc);
                prop_assert!(*ab > 0.0 && *ab < 1.0);
                prop_assert!(sch.betas()[i] > 0.0 && sch.betas()[i] < 1.0);
            }
            prop_assert!(sch.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        }

        #[test]
        fn schedule_ops_are_pure(t in 1usize..100, seed in 0u64..1000) {
            let sch = NoiseSchedule::linear_default(100).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[5], &mut rng);
            let e = Tensor::randn(&[5], &mut rng);
            prop_assert_eq!(sch.q_sample(&x, t, &e).unwrap(), sch.q_sample(&x, t, &e).unwrap());
            prop_assert_eq!(sch.forward_step(&x, t, &e).unwrap(), sch.forward_step(&x, t, &e).unwrap());
        }
    }
}
