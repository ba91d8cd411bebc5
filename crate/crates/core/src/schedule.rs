//! Noise schedule and the forward / reverse diffusion kernels.
//!
//! Steps are 1-based: `n` ranges over `1..=N` and `alpha_bar(0)` is 1, which
//! makes the last DDIM step land exactly on the clean sample.

use candle_core::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub offset: f64,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

fn cosine_curve(n: f64, steps: f64, s: f64) -> f64 {
    (((n / steps + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2).cos().powi(2)
}

/// Cosine schedule: `alpha_bar` follows `f(n) / f(0)` with
/// `f(n) = cos^2(((n/N + s) / (1 + s)) * pi/2)`; betas are the consecutive
/// ratios clipped at 0.999 and `alpha_bar` is the running product of the
/// clipped alphas.
pub fn cosine_schedule(steps: usize, offset: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::config(format!("schedule too short: {steps} steps")));
    }
    if !(offset > 0.0) {
        return Err(Error::config("cosine offset must be positive"));
    }
    let n = steps as f64;
    let betas = (1..=steps)
        .map(|i| {
            let ratio = cosine_curve(i as f64, n, offset) / cosine_curve(i as f64 - 1.0, n, offset);
            (1.0 - ratio).min(MAX_BETA)
        })
        .collect();
    NoiseSchedule::from_betas(steps, offset, betas)
}

impl NoiseSchedule {
    pub fn from_betas(steps: usize, offset: f64, beta: Vec<f64>) -> Result<Self> {
        if beta.len() != steps {
            return Err(Error::shape(format!("{} betas for {steps} steps", beta.len())));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::config(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            steps,
            offset,
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// `alpha_bar` at step `n`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, n: usize) -> f64 {
        if n == 0 {
            1.0
        } else {
            self.alpha_bar[n - 1]
        }
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.beta[n - 1]
    }

    fn check_step(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.steps {
            return Err(Error::StepOutOfRange { step: n, max: self.steps });
        }
        Ok(())
    }

    /// Descending step indices visited by a strided DDIM loop of `count`
    /// evaluations, always starting at `N`.
    pub fn strided_steps(&self, count: usize) -> Vec<usize> {
        let count = count.clamp(1, self.steps);
        let mut steps: Vec<usize> = (0..count)
            .map(|i| self.steps - (i * self.steps) / count)
            .collect();
        steps.dedup();
        steps
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `sqrt(ab_n) * x0 + sqrt(1 - ab_n) * eps`.
pub fn forward_diffuse(x0: &Tensor, n: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(n)?;
    same_shape(x0, eps, "forward_diffuse")?;
    let ab = sched.alpha_bar(n);
    Ok(((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// Deterministic DDIM move from step `n` to any earlier step `prev < n`.
pub fn ddim_jump(
    xn: &Tensor,
    n: usize,
    prev: usize,
    predicted_noise: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_step(n)?;
    if prev >= n {
        return Err(Error::StepOutOfRange { step: prev, max: n - 1 });
    }
    same_shape(xn, predicted_noise, "ddim_step")?;
    let ab = sched.alpha_bar(n);
    let ab_prev = sched.alpha_bar(prev);
    let x0 = ((xn - (predicted_noise * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
    Ok(((x0 * ab_prev.sqrt())? + (predicted_noise * (1.0 - ab_prev).sqrt())?)?)
}

pub fn ddim_step(xn: &Tensor, n: usize, predicted_noise: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(n)?;
    ddim_jump(xn, n, n - 1, predicted_noise, sched)
}

/// Posterior mean of the ancestral step and its variance `beta_tilde_n`.
pub fn ddpm_mean(
    xn: &Tensor,
    n: usize,
    predicted_noise: &Tensor,
    sched: &NoiseSchedule,
) -> Result<(Tensor, f64)> {
    sched.check_step(n)?;
    same_shape(xn, predicted_noise, "ddpm_step")?;
    let ab = sched.alpha_bar(n);
    let ab_prev = sched.alpha_bar(n - 1);
    let beta = sched.beta(n);
    let x0 = ((xn - (predicted_noise * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
    let c0 = beta * ab_prev.sqrt() / (1.0 - ab);
    let cn = (1.0 - ab_prev) * sched.alpha[n - 1].sqrt() / (1.0 - ab);
    let mean = ((x0 * c0)? + (xn * cn)?)?;
    let var = beta * (1.0 - ab_prev) / (1.0 - ab);
    Ok((mean, var))
}

pub fn ddpm_step<R: Rng>(
    xn: &Tensor,
    n: usize,
    predicted_noise: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let (mean, var) = ddpm_mean(xn, n, predicted_noise, sched)?;
    if var == 0.0 {
        return Ok(mean);
    }
    let z: Vec<f64> = (0..xn.elem_count())
        .map(|_| StandardNormal.sample(&mut *rng))
        .collect();
    let z = Tensor::from_vec(z, xn.shape(), xn.device())?.to_dtype(xn.dtype())?;
    Ok((mean + (z * var.sqrt())?)?)
}

/// Noise implied by a clean-sample prediction: inverts the forward process.
pub fn implied_noise(xn: &Tensor, x0_prediction: &Tensor, n: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::config("implied noise undefined at step 0 (alpha_bar = 1)"));
    }
    sched.check_step(n)?;
    same_shape(xn, x0_prediction, "implied_noise")?;
    let ab = sched.alpha_bar(n);
    Ok(((xn - (x0_prediction * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn v(t: &Tensor) -> Vec<f64> {
        t.to_vec1::<f64>().unwrap()
    }

    /// A one-step schedule stand-in with a chosen alpha_bar.
    fn with_alpha_bar(ab: f64) -> NoiseSchedule {
        NoiseSchedule::from_betas(2, DEFAULT_OFFSET, vec![1.0 - ab, 0.5]).unwrap()
    }

    #[test]
    fn curve_normalization_and_monotone() {
        let s = cosine_schedule(50, DEFAULT_OFFSET).unwrap();
        assert_eq!(cosine_curve(0.0, 50.0, 0.008) / cosine_curve(0.0, 50.0, 0.008), 1.0);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar[0] < 1.0);
        assert!(s.alpha_bar[49] < 1e-2);
        // the terminal ratio is 0 and gets clipped
        assert_eq!(s.beta[49], MAX_BETA);
        assert!(s.beta.iter().all(|&b| b > 0.0 && b <= MAX_BETA));
        for n in 1..=50 {
            assert_eq!(s.alpha[n - 1], 1.0 - s.beta[n - 1]);
            let recomputed = s.alpha_bar(n - 1) * s.alpha[n - 1];
            assert!((recomputed - s.alpha_bar(n)).abs() <= 1e-12);
        }
        assert!(matches!(cosine_schedule(1, 0.008), Err(Error::Config(_))));
    }

    #[test]
    fn forward_examples() {
        let s = with_alpha_bar(0.25);
        let out = forward_diffuse(&t(&[1.0, 0.0]), 1, &t(&[0.0, 1.0]), &s).unwrap();
        let out = v(&out);
        assert!((out[0] - 0.5).abs() < 1e-4 && (out[1] - 0.8660).abs() < 1e-4);

        let zero = forward_diffuse(&t(&[2.0, -4.0]), 1, &t(&[0.0, 0.0]), &s).unwrap();
        assert_eq!(v(&zero), vec![1.0, -2.0]);
        assert!(forward_diffuse(&t(&[1.0]), 1, &t(&[1.0, 2.0]), &s).is_err());
    }

    #[test]
    fn terminal_step_is_mostly_noise() {
        let s = cosine_schedule(50, DEFAULT_OFFSET).unwrap();
        let x0 = t(&[3.0, -1.0, 2.0]);
        let eps = t(&[0.1, 0.7, -0.2]);
        let out = v(&forward_diffuse(&x0, 50, &eps, &s).unwrap());
        let bound = s.alpha_bar(50).sqrt() * 14f64.sqrt() + 1e-12;
        for (o, e) in out.iter().zip(v(&eps)) {
            assert!((o - e).abs() <= bound);
        }
    }

    #[test]
    fn ddim_follows_forward_trajectory() {
        let s = cosine_schedule(50, DEFAULT_OFFSET).unwrap();
        let x0 = t(&[0.3, -1.2, 2.0]);
        let eps = t(&[1.0, 0.5, -0.7]);
        for n in [1, 7, 30, 50] {
            let xn = forward_diffuse(&x0, n, &eps, &s).unwrap();
            let prev = ddim_step(&xn, n, &eps, &s).unwrap();
            let want = if n == 1 { x0.clone() } else { forward_diffuse(&x0, n - 1, &eps, &s).unwrap() };
            for (a, b) in v(&prev).iter().zip(v(&want)) {
                assert!((a - b).abs() < 1e-9, "n={n}");
            }
            assert_eq!(v(&prev), v(&ddim_step(&xn, n, &eps, &s).unwrap()));
        }
        assert!(matches!(ddim_step(&x0, 0, &eps, &s), Err(Error::StepOutOfRange { .. })));
        assert!(matches!(ddim_step(&x0, 51, &eps, &s), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn ddpm_last_step_and_seed() {
        let s = cosine_schedule(50, DEFAULT_OFFSET).unwrap();
        let xn = t(&[0.4, -0.3]);
        let f = t(&[0.2, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, var) = ddpm_mean(&xn, 1, &f, &s).unwrap();
        assert_eq!(var, 0.0);
        let a = v(&ddpm_step(&xn, 1, &f, &s, &mut rng).unwrap());
        let b = v(&ddim_step(&xn, 1, &f, &s).unwrap());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }

        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = xn.clone();
            for n in (1..=50).rev() {
                x = ddpm_step(&x, n, &f, &s, &mut rng).unwrap();
            }
            v(&x)
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn ddpm_monte_carlo_mean() {
        let s = cosine_schedule(50, DEFAULT_OFFSET).unwrap();
        let xn = t(&[0.5]);
        let f = t(&[-0.3]);
        let n = 25;
        let (mean, var) = ddpm_mean(&xn, n, &f, &s).unwrap();
        let mean = v(&mean)[0];
        let k = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let avg = (0..k)
            .map(|_| v(&ddpm_step(&xn, n, &f, &s, &mut rng).unwrap())[0])
            .sum::<f64>()
            / k as f64;
        assert!((avg - mean).abs() <= 3.0 * var.sqrt() / (k as f64).sqrt());
    }

    #[test]
    fn implied_noise_inverts_forward() {
        let s = cosine_schedule(50, DEFAULT_OFFSET).unwrap();
        let x0 = t(&[0.3, -1.2]);
        let eps = t(&[1.0, 0.5]);
        let xn = forward_diffuse(&x0, 17, &eps, &s).unwrap();
        let back = v(&implied_noise(&xn, &x0, 17, &s).unwrap());
        for (a, b) in back.iter().zip(v(&eps)) {
            assert!((a - b).abs() < 1e-12);
        }

        // x0 prediction equal to xn at alpha_bar = 0.25
        let q = with_alpha_bar(0.25);
        let xn = t(&[2.0, -1.0]);
        let got = v(&implied_noise(&xn, &xn, 1, &q).unwrap());
        let k = 0.5 / 0.75f64.sqrt();
        assert!((got[0] - 2.0 * k).abs() < 1e-12 && (got[1] + k).abs() < 1e-12);
        assert!(implied_noise(&xn, &xn, 0, &q).is_err());
    }

    #[test]
    fn strided_visits() {
        let s = cosine_schedule(50, DEFAULT_OFFSET).unwrap();
        assert_eq!(s.strided_steps(50), (1..=50).rev().collect::<Vec<_>>());
        let ten = s.strided_steps(10);
        assert_eq!(ten, vec![50, 45, 40, 35, 30, 25, 20, 15, 10, 5]);
    }
}
