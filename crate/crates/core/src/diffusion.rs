//! Diffusion algebra: noise schedule, closed-form forward corruption, the
//! reverse posterior, and the stochastic / deterministic sampling steps.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

/// Per-step diffusion constants. `beta`, `alpha` and `sigma2` are indexed by
/// step k = 1..=K (stored at k-1); `alpha_bar` additionally carries the
/// convention ᾱ_0 = 1 at index 0, so `alpha_bar[k]` is ᾱ_k directly.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub k_steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl NoiseSchedule {
    fn check_k(&self, k: usize) -> Result<()> {
        if k < 1 || k > self.k_steps {
            return Err(Error::StepOutOfRange {
                k,
                max: self.k_steps,
            });
        }
        Ok(())
    }
}

/// Builds a linear β schedule from `beta_start` to `beta_end` over K steps
/// and derives α_k = 1−β_k, ᾱ_k = Πα_s (ᾱ_0 = 1) and the posterior
/// variances σ_k² = (1−ᾱ_{k−1})β_k/(1−ᾱ_k), with σ_1² = 0.
pub fn make_schedule(k_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if k_steps < 1 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta range must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..k_steps)
        .map(|i| {
            if k_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (k_steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(k_steps + 1);
    alpha_bar.push(1.0);
    for a in &alpha {
        alpha_bar.push(alpha_bar.last().unwrap() * a);
    }
    let sigma2: Vec<f64> = (1..=k_steps)
        .map(|k| (1.0 - alpha_bar[k - 1]) * beta[k - 1] / (1.0 - alpha_bar[k]))
        .collect();
    Ok(NoiseSchedule {
        k_steps,
        beta,
        alpha,
        alpha_bar,
        sigma2,
    })
}

/// Closed-form forward corruption: y_k = √ᾱ_k·y0 + √(1−ᾱ_k)·ε.
pub fn q_sample(y0: &Tensor, k: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_k(k)?;
    if y0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!(
            "q_sample: y0 {:?} vs eps {:?}",
            y0.shape(),
            eps.shape()
        )));
    }
    let a = sched.alpha_bar[k].sqrt();
    let b = (1.0 - sched.alpha_bar[k]).sqrt();
    let data = y0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(y, e)| a * y + b * e)
        .collect();
    Ok(Tensor::raw(y0.shape().to_vec(), data))
}

/// Reverse-posterior mean with the clean signal replaced by its prediction:
/// μ = (√α_k(1−ᾱ_{k−1})/(1−ᾱ_k))·y_k + (√ᾱ_{k−1}β_k/(1−ᾱ_k))·ŷ_0.
pub fn posterior_mean(
    y_k: &Tensor,
    y0_hat: &Tensor,
    k: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_k(k)?;
    if y_k.shape() != y0_hat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "posterior_mean: y_k {:?} vs y0_hat {:?}",
            y_k.shape(),
            y0_hat.shape()
        )));
    }
    if k == 1 {
        // ᾱ_0 = 1 zeroes the y_k coefficient and makes the ŷ_0 coefficient
        // β_1/(1−ᾱ_1) = 1 exactly; commit without rounding noise.
        return Ok(y0_hat.clone());
    }
    let denom = 1.0 - sched.alpha_bar[k];
    let coef_k = sched.alpha[k - 1].sqrt() * (1.0 - sched.alpha_bar[k - 1]) / denom;
    let coef_0 = sched.alpha_bar[k - 1].sqrt() * sched.beta[k - 1] / denom;
    let data = y_k
        .data()
        .iter()
        .zip(y0_hat.data())
        .map(|(yk, y0)| coef_k * yk + coef_0 * y0)
        .collect();
    Ok(Tensor::raw(y_k.shape().to_vec(), data))
}

/// One stochastic reverse step: μ + σ_k·ξ, with ξ omitted at k = 1 where
/// σ_1 = 0.
pub fn ddpm_step<R: Rng>(
    y_k: &Tensor,
    y0_hat: &Tensor,
    k: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let mut mu = posterior_mean(y_k, y0_hat, k, sched)?;
    if k > 1 {
        let sigma = sched.sigma2[k - 1].sqrt();
        for v in mu.data_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(mu)
}

/// One deterministic (η = 0) reverse step from k to k_prev: recover the
/// implied noise ε̂ = (y_k − √ᾱ_k·ŷ_0)/√(1−ᾱ_k) and re-corrupt the
/// prediction to level k_prev. With ᾱ_0 = 1 the final step returns ŷ_0.
pub fn ddim_step(
    y_k: &Tensor,
    y0_hat: &Tensor,
    k: usize,
    k_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_k(k)?;
    if k_prev >= k {
        return Err(Error::Config(format!(
            "ddim_step requires k_prev < k, got {k_prev} >= {k}"
        )));
    }
    if y_k.shape() != y0_hat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "ddim_step: y_k {:?} vs y0_hat {:?}",
            y_k.shape(),
            y0_hat.shape()
        )));
    }
    let ab_k = sched.alpha_bar[k];
    let ab_p = sched.alpha_bar[k_prev];
    let inv = 1.0 / (1.0 - ab_k).sqrt();
    let (sa_k, sa_p, sb_p) = (ab_k.sqrt(), ab_p.sqrt(), (1.0 - ab_p).sqrt());
    let data = y_k
        .data()
        .iter()
        .zip(y0_hat.data())
        .map(|(yk, y0)| {
            let eps_hat = (yk - sa_k * y0) * inv;
            sa_p * y0 + sb_p * eps_hat
        })
        .collect();
    Ok(Tensor::raw(y_k.shape().to_vec(), data))
}

/// The evenly spaced descending step subsequence used by [`sample`]:
/// `num_steps + 1` indices from K down to 0 inclusive.
pub fn sample_steps(k_steps: usize, num_steps: usize) -> Vec<usize> {
    (0..=num_steps)
        .map(|i| {
            let frac = (num_steps - i) as f64 / num_steps as f64;
            (k_steps as f64 * frac).round() as usize
        })
        .collect()
}

/// Full deterministic sampler: draw Y_K ~ N(0, I), then iterate
/// [`ddim_step`] over an evenly spaced descending subsequence of
/// `num_steps` steps ending at 0. `predict` maps the current noisy state
/// and step index to a clean-signal estimate; conditioning inputs are
/// captured by the closure.
pub fn sample<R, F>(
    mut predict: F,
    t: usize,
    sched: &NoiseSchedule,
    num_steps: usize,
    rng: &mut R,
) -> Result<Tensor>
where
    R: Rng,
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    if num_steps == 0 || num_steps > sched.k_steps {
        return Err(Error::Config(format!(
            "num_steps must be in 1..={}, got {num_steps}",
            sched.k_steps
        )));
    }
    let mut y = Tensor::raw(
        vec![t],
        (0..t)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
    );
    let steps = sample_steps(sched.k_steps, num_steps);
    for w in steps.windows(2) {
        let (k, k_prev) = (w[0], w[1]);
        let y0_hat = predict(&y, k)?;
        y = ddim_step(&y, &y0_hat, k, k_prev, sched)?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_schedule() -> NoiseSchedule {
        make_schedule(10, 1e-4, 0.02).unwrap()
    }

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::raw(
            vec![n],
            (0..n)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.02, 0.02).unwrap();
        assert_eq!(s.beta, vec![0.02]);
        assert!((s.alpha_bar[1] - 0.98).abs() < 1e-15);
        assert_eq!(s.sigma2[0], 0.0);
    }

    #[test]
    fn paper_scale_schedule_endpoints() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar[1] - 0.9999).abs() < 1e-12);
        assert!(
            s.alpha_bar[1000] < 1e-4,
            "terminal retention {} should be negligible",
            s.alpha_bar[1000]
        );
    }

    #[test]
    fn schedule_identities_hold_exactly() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar[0], 1.0);
        for k in 1..=50 {
            assert_eq!(s.alpha[k - 1], 1.0 - s.beta[k - 1]);
            assert_eq!(s.alpha_bar[k], s.alpha_bar[k - 1] * s.alpha[k - 1]);
            assert_eq!(
                s.sigma2[k - 1],
                (1.0 - s.alpha_bar[k - 1]) * s.beta[k - 1] / (1.0 - s.alpha_bar[k])
            );
            assert!(s.alpha_bar[k] < s.alpha_bar[k - 1]);
            assert!(s.sigma2[k - 1] <= s.beta[k - 1]);
        }
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn q_sample_deterministic_branches() {
        let s = toy_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y0 = randn(&mut rng, 8);
        let zero = Tensor::zeros(&[8]);
        let k = 5;
        let out = q_sample(&y0, k, &zero, &s).unwrap();
        let a = s.alpha_bar[k].sqrt();
        for (o, y) in out.data().iter().zip(y0.data()) {
            assert!((o - a * y).abs() < 1e-15);
        }
        let eps = randn(&mut rng, 8);
        let out = q_sample(&zero, k, &eps, &s).unwrap();
        let b = (1.0 - s.alpha_bar[k]).sqrt();
        for (o, e) in out.data().iter().zip(eps.data()) {
            assert!((o - b * e).abs() < 1e-15);
        }
        assert!(q_sample(&y0, 0, &eps, &s).is_err());
        assert!(q_sample(&y0, 11, &eps, &s).is_err());
    }

    #[test]
    fn q_sample_variance_matches_closed_form() {
        let s = toy_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y0 = Tensor::zeros(&[1]);
        for k in [1, 5, 10] {
            let n = 100_000;
            let mut sum = 0.0;
            let mut sum2 = 0.0;
            for _ in 0..n {
                let eps = randn(&mut rng, 1);
                let v = q_sample(&y0, k, &eps, &s).unwrap().data()[0];
                sum += v;
                sum2 += v * v;
            }
            let var = sum2 / n as f64 - (sum / n as f64).powi(2);
            let expect = 1.0 - s.alpha_bar[k];
            assert!(
                (var - expect).abs() / expect < 0.03,
                "k={k}: var {var} vs {expect}"
            );
        }
    }

    #[test]
    fn recursive_chain_matches_closed_form() {
        // Iterate y_k = √α_k · y_{k-1} + √β_k · ε_k with fresh noise and
        // compare the empirical mean and variance of y_K against the
        // closed form √ᾱ_K·y0 and 1−ᾱ_K.
        let s = toy_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y0 = 1.7;
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let mut y = y0;
            for k in 1..=s.k_steps {
                let e: f64 = rng.sample(StandardNormal);
                y = s.alpha[k - 1].sqrt() * y + s.beta[k - 1].sqrt() * e;
            }
            sum += y;
            sum2 += y * y;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let expect_mean = s.alpha_bar[s.k_steps].sqrt() * y0;
        let expect_var = 1.0 - s.alpha_bar[s.k_steps];
        assert!((mean - expect_mean).abs() / expect_mean.abs() < 0.01);
        assert!((var - expect_var).abs() / expect_var < 0.03);
    }

    #[test]
    fn posterior_mean_commits_at_final_step() {
        let s = toy_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y_k = randn(&mut rng, 8);
        let y0_hat = randn(&mut rng, 8);
        let mu = posterior_mean(&y_k, &y0_hat, 1, &s).unwrap();
        for (m, y) in mu.data().iter().zip(y0_hat.data()) {
            assert!((m - y).abs() < 1e-15);
        }
    }

    #[test]
    fn posterior_coefficients_match_schedule_oracle() {
        let s = toy_schedule();
        let c = 2.5;
        let constant = Tensor::raw(vec![4], vec![c; 4]);
        for k in 1..=s.k_steps {
            let mu = posterior_mean(&constant, &constant, k, &s).unwrap();
            let denom = 1.0 - s.alpha_bar[k];
            let coef_sum = (s.alpha[k - 1].sqrt() * (1.0 - s.alpha_bar[k - 1])
                + s.alpha_bar[k - 1].sqrt() * s.beta[k - 1])
                / denom;
            for m in mu.data() {
                assert!((m - c * coef_sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn posterior_mean_expectation_over_forward_draws() {
        // E_ε[μ(q_sample(y0, k, ε), y0, k)] should equal √ᾱ_{k−1}·y0.
        let s = toy_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y0 = Tensor::raw(vec![1], vec![1.3]);
        let k = 6;
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let eps = randn(&mut rng, 1);
            let y_k = q_sample(&y0, k, &eps, &s).unwrap();
            sum += posterior_mean(&y_k, &y0, k, &s).unwrap().data()[0];
        }
        let mean = sum / n as f64;
        let expect = s.alpha_bar[k - 1].sqrt() * y0.data()[0];
        assert!((mean - expect).abs() / expect.abs() < 0.03);
    }

    #[test]
    fn ddpm_step_final_step_is_exact_and_deterministic() {
        let s = toy_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y_k = randn(&mut rng, 8);
        let y0_hat = randn(&mut rng, 8);
        let out = ddpm_step(&y_k, &y0_hat, 1, &s, &mut rng).unwrap();
        assert_eq!(out.data(), y0_hat.data());
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = ddpm_step(&y_k, &y0_hat, 5, &s, &mut r1).unwrap();
        let b = ddpm_step(&y_k, &y0_hat, 5, &s, &mut r2).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn ddpm_step_noise_std_matches_sigma() {
        let s = toy_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y_k = Tensor::raw(vec![1], vec![0.4]);
        let y0_hat = Tensor::raw(vec![1], vec![-0.2]);
        let k = 7;
        let mu = posterior_mean(&y_k, &y0_hat, k, &s).unwrap().data()[0];
        let n = 100_000;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let v = ddpm_step(&y_k, &y0_hat, k, &s, &mut rng).unwrap().data()[0];
            sum2 += (v - mu) * (v - mu);
        }
        let std = (sum2 / n as f64).sqrt();
        let expect = s.sigma2[k - 1].sqrt();
        assert!((std - expect).abs() / expect < 0.03, "{std} vs {expect}");
    }

    #[test]
    fn ddim_recovers_noise_and_final_step_commits() {
        let s = toy_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y0 = randn(&mut rng, 16);
        let eps = randn(&mut rng, 16);
        let k = 8;
        let y_k = q_sample(&y0, k, &eps, &s).unwrap();
        // Stepping to k_prev=0 with a perfect prediction returns y0.
        let out = ddim_step(&y_k, &y0, k, 0, &s).unwrap();
        for (o, y) in out.data().iter().zip(y0.data()) {
            assert!((o - y).abs() < 1e-10);
        }
        // Implied noise inversion: step to k_prev and compare with the
        // closed form √ᾱ_p·y0 + √(1−ᾱ_p)·eps.
        let k_prev = 3;
        let out = ddim_step(&y_k, &y0, k, k_prev, &s).unwrap();
        let expect = q_sample(&y0, k_prev, &eps, &s).unwrap();
        for (o, e) in out.data().iter().zip(expect.data()) {
            assert!((o - e).abs() < 1e-10);
        }
        assert!(ddim_step(&y_k, &y0, 3, 3, &s).is_err());
    }

    #[test]
    fn sample_steps_are_even_descending_and_terminal() {
        let steps = sample_steps(50, 10);
        assert_eq!(steps.len(), 11);
        assert_eq!(steps[0], 50);
        assert_eq!(*steps.last().unwrap(), 0);
        for w in steps.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert_eq!(sample_steps(10, 10), (0..=10).rev().collect::<Vec<_>>());
    }

    #[test]
    fn sampler_with_constant_predictor_returns_prediction() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let target = randn(&mut rng, 12);
        let out = sample(|_, _| Ok(target.clone()), 12, &s, 10, &mut rng).unwrap();
        for (o, t) in out.data().iter().zip(target.data()) {
            assert!((o - t).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_sampling_equals_one_ddim_step() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let target = Tensor::raw(vec![4], vec![0.1, -0.3, 0.7, 0.2]);
        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let out = sample(|_, _| Ok(target.clone()), 4, &s, 1, &mut r1).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let y_k = Tensor::raw(
            vec![4],
            (0..4).map(|_| r2.sample::<f64, _>(StandardNormal)).collect(),
        );
        let expect = ddim_step(&y_k, &target, 50, 0, &s).unwrap();
        assert_eq!(out.data(), expect.data());
    }
}
