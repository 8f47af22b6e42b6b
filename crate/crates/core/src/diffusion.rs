//! DDPM schedule, forward noising, ancestral sampling and repaint conditioning.
//!
//! States are flat `f64` buffers; callers own the shape.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config_err, validation_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// `alpha_bars[0] = 1`, `alpha_bars[t]` for `t = 1..=T`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    /// Cumulative product through step `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return validation_err(format!("timestep {t} outside 1..={}", self.steps()));
        }
        Ok(())
    }

    /// Posterior variance `β̃_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

/// Linear beta schedule.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return config_err("schedule needs at least one step");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return config_err(format!(
            "beta bounds must satisfy 0 < {beta_start} <= {beta_end} < 1"
        ));
    }
    let mut betas = vec![0.0];
    let mut alphas = vec![1.0];
    let mut alpha_bars = vec![1.0];
    for i in 0..steps {
        let frac = if steps == 1 {
            0.0
        } else {
            i as f64 / (steps - 1) as f64
        };
        let beta = beta_start + (beta_end - beta_start) * frac;
        let alpha = 1.0 - beta;
        betas.push(beta);
        alphas.push(alpha);
        alpha_bars.push(alpha_bars[i] * alpha);
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

/// The 1000-step schedule with its betas rescaled by `1000 / steps`, keeping the
/// terminal signal level comparable at short step counts.
pub fn scaled_schedule(steps: usize) -> Result<NoiseSchedule> {
    let s = 1000.0 / steps.max(1) as f64;
    make_schedule(steps, (1e-4 * s).min(0.5), (0.02 * s).min(0.999))
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn forward_sample(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return validation_err(format!(
            "noise has {} entries, data has {}",
            eps.len(),
            x0.len()
        ));
    }
    sched.check_step(t)?;
    let a = sched.alpha_bar(t).sqrt();
    let s = (1.0 - sched.alpha_bar(t)).sqrt();
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// Posterior mean of `x_{t-1}` given `x_t` and a noise estimate.
pub fn reverse_mean(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if x_t.len() != eps_hat.len() {
        return validation_err(format!(
            "noise estimate has {} entries, state has {}",
            eps_hat.len(),
            x_t.len()
        ));
    }
    sched.check_step(t)?;
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| (x - coef * e) * inv)
        .collect())
}

pub fn reverse_step<R: Rng + ?Sized>(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut mean = reverse_mean(x_t, eps_hat, t, sched)?;
    if t > 1 {
        let sigma = sched.posterior_variance(t).sqrt();
        for m in &mut mean {
            let z: f64 = StandardNormal.sample(rng);
            *m += sigma * z;
        }
    }
    Ok(mean)
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`.
pub fn sample_loop<R, F>(
    len: usize,
    mut denoiser: F,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    let mut x = standard_normal(rng, len);
    for t in (1..=sched.steps()).rev() {
        let eps_hat = checked_call(&mut denoiser, &x, t)?;
        x = reverse_step(&x, &eps_hat, t, sched, rng)?;
    }
    Ok(x)
}

fn checked_call<F>(denoiser: &mut F, x: &[f64], t: usize) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    let eps_hat = denoiser(x, t)?;
    if eps_hat.len() != x.len() {
        return validation_err(format!(
            "denoiser returned {} entries for a {}-entry state",
            eps_hat.len(),
            x.len()
        ));
    }
    Ok(eps_hat)
}

fn check_mask(mask: &[f64], len: usize) -> Result<()> {
    if mask.len() != len {
        return validation_err(format!("mask has {} entries, state has {len}", mask.len()));
    }
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return validation_err("mask must be binary");
    }
    Ok(())
}

/// Merges a free reverse sample at `t-1` with the known data noised to `t-1`.
pub fn repaint_step<R: Rng + ?Sized>(
    x_free: &[f64],
    x0_known: &[f64],
    known_mask: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if x_free.len() != x0_known.len() {
        return validation_err("known data and state differ in size");
    }
    check_mask(known_mask, x_free.len())?;
    sched.check_step(t)?;
    let known_t = if t - 1 == 0 {
        x0_known.to_vec()
    } else {
        let eps = standard_normal(rng, x0_known.len());
        forward_sample(x0_known, t - 1, &eps, sched)?
    };
    Ok(x_free
        .iter()
        .zip(&known_t)
        .zip(known_mask)
        .map(|((&f, &k), &m)| if m == 1.0 { k } else { f })
        .collect())
}

/// Sampling loop with known entries re-imposed after every reverse step.
pub fn repaint_loop<R, F>(
    x0_known: &[f64],
    known_mask: &[f64],
    mut denoiser: F,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    check_mask(known_mask, x0_known.len())?;
    let mut x = standard_normal(rng, x0_known.len());
    for t in (1..=sched.steps()).rev() {
        let eps_hat = checked_call(&mut denoiser, &x, t)?;
        let free = reverse_step(&x, &eps_hat, t, sched, rng)?;
        x = repaint_step(&free, x0_known, known_mask, t, sched, rng)?;
    }
    Ok(x)
}
