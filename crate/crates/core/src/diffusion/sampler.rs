//! Reverse-process samplers.
//!
//! [`ddpm_sample`] walks every timestep from `T` to 1. [`fast_sample`] visits
//! an evenly strided subsequence and lets the caller pick the update rule; the
//! default is a second-order multistep solver in data-prediction form.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{posterior_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anything that predicts the noise component of `x_t`.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self(x_t, t)
    }
}

fn checked_predict(model: &dyn NoisePredictor, x: &Tensor, t: usize) -> Result<Tensor> {
    let eps = model.predict_noise(x, t)?;
    x.ensure_same_shape(&eps)?;
    if !eps.all_finite() {
        return Err(Error::Numeric {
            message: "noise prediction contains non-finite values".into(),
            timestep: Some(t),
        });
    }
    Ok(eps)
}

/// Full ancestral sampling from `x_T ~ N(0, I)` seeded by `seed`.
pub fn ddpm_sample(
    model: &dyn NoisePredictor,
    shape: &[usize],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn(shape, &mut rng);
    for t in (1..=schedule.steps()).rev() {
        let eps = checked_predict(model, &x, t)?;
        let z = if t > 1 {
            Tensor::randn(shape, &mut rng)
        } else {
            Tensor::zeros(shape)
        };
        x = schedule.reverse_step(&x, t, &eps, &z)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FastSolver {
    /// Second-order multistep solver on the probability-flow ODE, predicting
    /// the clean signal at each visited step.
    #[default]
    Multistep2,
    /// Deterministic strided update through the predicted clean signal.
    Ddim,
    /// Strided ancestral update with variance `1 − ᾱ_t/ᾱ_s`. At stride 1 this
    /// is exactly the full reverse pass.
    Ancestral,
}

impl std::str::FromStr for FastSolver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multistep2" => Ok(Self::Multistep2),
            "ddim" => Ok(Self::Ddim),
            "ancestral" => Ok(Self::Ancestral),
            _ => Err(Error::config(format!("unknown solver `{s}` (multistep2, ddim, ancestral)"))),
        }
    }
}

/// Evenly spaced, strictly decreasing timesteps from `T` to 1.
pub fn strided_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::param("steps", "must be at least 1"));
    }
    if steps > total {
        return Err(Error::param("steps", format!("{steps} exceeds schedule length {total}")));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    Ok((0..steps)
        .map(|i| 1 + (steps - 1 - i) * (total - 1) / (steps - 1))
        .collect())
}

/// Few-step sampling over [`strided_timesteps`].
pub fn fast_sample(
    model: &dyn NoisePredictor,
    shape: &[usize],
    steps: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    solver: FastSolver,
) -> Result<Tensor> {
    let ts = strided_timesteps(schedule.steps(), steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn(shape, &mut rng);
    // previous clean-signal prediction and log-SNR step, for the multistep rule
    let mut history: Option<(Tensor, f64)> = None;
    for (i, &t) in ts.iter().enumerate() {
        let s = ts.get(i + 1).copied().unwrap_or(0);
        let eps = checked_predict(model, &x, t)?;
        let ab_t = schedule.alpha_bar(t)?;
        let ab_s = schedule.alpha_bar(s)?;
        x = match solver {
            FastSolver::Ancestral => {
                let (alpha, beta) = if s + 1 == t {
                    (schedule.alpha(t)?, schedule.beta(t)?)
                } else {
                    let a = ab_t / ab_s;
                    (a, 1.0 - a)
                };
                let z = if s > 0 { Some(Tensor::randn(shape, &mut rng)) } else { None };
                posterior_step(&x, &eps, alpha, beta, ab_t, z.as_ref())?
            }
            FastSolver::Ddim => {
                let x0 = predict_x0(&x, &eps, ab_t)?;
                x0.lin_comb(ab_s.sqrt(), &eps, (1.0 - ab_s).sqrt())?
            }
            FastSolver::Multistep2 => {
                let x0 = predict_x0(&x, &eps, ab_t)?;
                if s == 0 {
                    x0
                } else {
                    let (a_t, sig_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
                    let (a_s, sig_s) = (ab_s.sqrt(), (1.0 - ab_s).sqrt());
                    let h = (a_s / sig_s).ln() - (a_t / sig_t).ln();
                    let d = match &history {
                        Some((prev_x0, h_prev)) => {
                            let r = h_prev / h;
                            x0.lin_comb(1.0 + 0.5 / r, prev_x0, -0.5 / r)?
                        }
                        None => x0.clone(),
                    };
                    let next = x.lin_comb(sig_s / sig_t, &d, -a_s * ((-h).exp() - 1.0))?;
                    history = Some((x0, h));
                    next
                }
            }
        };
    }
    Ok(x)
}

fn predict_x0(x: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let inv = 1.0 / alpha_bar.sqrt();
    x.lin_comb(inv, eps, -(1.0 - alpha_bar).sqrt() * inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exact noise for a dataset that is a single point.
    fn point_oracle<'a>(x0: &'a Tensor, sch: &'a NoiseSchedule) -> impl Fn(&Tensor, usize) -> Result<Tensor> + 'a {
        move |x: &Tensor, t: usize| {
            let ab = sch.alpha_bar(t)?;
            x.lin_comb(1.0 / (1.0 - ab).sqrt(), x0, -ab.sqrt() / (1.0 - ab).sqrt())
        }
    }

    #[test]
    fn stride_shapes() {
        assert_eq!(strided_timesteps(10, 10).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        assert_eq!(strided_timesteps(10, 1).unwrap(), vec![10]);
        assert_eq!(strided_timesteps(1000, 50).unwrap().len(), 50);
        assert_eq!(strided_timesteps(1000, 50).unwrap()[0], 1000);
        assert_eq!(*strided_timesteps(1000, 50).unwrap().last().unwrap(), 1);
        assert!(strided_timesteps(1000, 50).unwrap().windows(2).all(|w| w[1] < w[0]));
        assert!(matches!(strided_timesteps(10, 11), Err(Error::Parameter { name: "steps", .. })));
    }

    #[test]
    fn ddpm_is_seed_deterministic() {
        let sch = NoiseSchedule::linear_default(30).unwrap();
        let x0 = Tensor::full(&[1, 1, 2, 2], 0.3);
        let m = point_oracle(&x0, &sch);
        let weak = |x: &Tensor, t: usize| m(x, t).map(|e| e.scale(0.5));
        let a = ddpm_sample(&weak, &[1, 1, 2, 2], &sch, 7).unwrap();
        let b = ddpm_sample(&weak, &[1, 1, 2, 2], &sch, 7).unwrap();
        let c = ddpm_sample(&weak, &[1, 1, 2, 2], &sch, 8).unwrap();
        assert_eq!(a, b);
        assert!(a.l2_distance(&c).unwrap() > 0.0);
    }

    #[test]
    fn oracle_recovers_point() {
        let sch = NoiseSchedule::linear_default(200).unwrap();
        let x0 = Tensor::new(&[4], vec![0.5, -0.25, 1.0, 0.0]).unwrap();
        let m = point_oracle(&x0, &sch);
        let out = ddpm_sample(&m, &[4], &sch, 1).unwrap();
        assert!(out.l2_distance(&x0).unwrap() < 1e-2);
        for solver in [FastSolver::Multistep2, FastSolver::Ddim, FastSolver::Ancestral] {
            let f = fast_sample(&m, &[4], 50, &sch, 1, solver).unwrap();
            assert!(f.l2_distance(&out).unwrap() < 5e-2, "{solver:?}");
        }
    }

    #[test]
    fn ancestral_full_stride_is_the_full_reverse_pass() {
        let sch = NoiseSchedule::linear_default(40).unwrap();
        let x0 = Tensor::full(&[3], 0.2);
        let m = point_oracle(&x0, &sch);
        let weak = |x: &Tensor, t: usize| m(x, t).map(|e| e.scale(0.7));
        let full = ddpm_sample(&weak, &[3], &sch, 3).unwrap();
        let fast = fast_sample(&weak, &[3], 40, &sch, 3, FastSolver::Ancestral).unwrap();
        assert_eq!(full, fast);
    }

    #[test]
    fn nan_prediction_reports_timestep() {
        let sch = NoiseSchedule::linear_default(5).unwrap();
        let bad = |x: &Tensor, _t: usize| Ok(x.map(|_| f64::NAN));
        let e = ddpm_sample(&bad, &[2], &sch, 0).unwrap_err();
        assert!(matches!(e, Error::Numeric { timestep: Some(5), .. }));
    }
}
