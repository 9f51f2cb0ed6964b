//! Noise schedule, forward noising, reverse-kernel mean and the masked
//! noise-prediction loss.
//!
//! Diffusion steps are 1-based throughout: `t` ranges over `1..=T`.

use serde::{Deserialize, Serialize};

use crate::config::ScheduleConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Matrix;

/// Per-step `beta_t`, cumulative `alpha_bar_t = prod(1 - beta_i)` and the
/// posterior variances `sigma_t^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma2: Vec<f64>,
}

impl NoiseSchedule {
    /// Quadratic schedule
    /// `beta_t = ((T - t)/(T + t) * sqrt(beta_min) + (t - 1)/(T - 1) * sqrt(beta_max))^2`.
    pub fn quadratic(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "quadratic schedule needs at least 2 steps, got {steps}"
            )));
        }
        if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}"
            )));
        }
        let tf = steps as f64;
        let (lo, hi) = (beta_min.sqrt(), beta_max.sqrt());
        let mut beta: Vec<f64> = (1..=steps)
            .map(|t| {
                let t = t as f64;
                ((tf - t) / (tf + t) * lo + (t - 1.0) / (tf - 1.0) * hi).powi(2)
            })
            .collect();
        // the first term vanishes at t = T; avoid the sqrt-square round trip
        beta[steps - 1] = beta_max;
        Self::from_betas(beta)
    }

    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        Self::quadratic(c.steps, c.beta_min, c.beta_max)
    }

    /// Schedule from explicit betas, each in `(0, 1)`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument(
                "betas must be non-empty and in (0, 1)".into(),
            ));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let sigma2 = (0..beta.len())
            .map(|i| {
                if i == 0 {
                    beta[0]
                } else {
                    beta[i] * (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i])
                }
            })
            .collect();
        Ok(Self {
            beta,
            alpha_bar,
            sigma2,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    /// Panics if `t` is outside `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_sample(x0: &Matrix, t: usize, eps: &Matrix, sched: &NoiseSchedule) -> Result<Matrix> {
    sched.check_step(t)?;
    same_shape(x0, eps, "forward_sample")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

/// Reverse-kernel mean
/// `(1 - beta_t)^(-1/2) * (x_t - beta_t * (1 - alpha_bar_t)^(-1/2) * eps_hat)`.
pub fn reverse_mean(x_t: &Matrix, t: usize, eps_hat: &Matrix, sched: &NoiseSchedule) -> Result<Matrix> {
    sched.check_step(t)?;
    same_shape(x_t, eps_hat, "reverse_mean")?;
    let beta = sched.beta(t);
    let c = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    let s = 1.0 / (1.0 - beta).sqrt();
    Ok(x_t.zip_map(eps_hat, |x, e| s * (x - c * e)))
}

/// Target mask `m - m_iif`.
pub fn target_mask(m: &Matrix, m_cond: &Matrix) -> Matrix {
    m.zip_map(m_cond, |a, b| a - b)
}

/// `||(eps - eps_hat) * (m - m_iif)||^2`, summed over all cells.
pub fn masked_loss(eps: &Matrix, eps_hat: &Matrix, m: &Matrix, m_iif: &Matrix) -> Result<f64> {
    same_shape(eps, eps_hat, "masked_loss")?;
    same_shape(m, m_iif, "masked_loss")?;
    same_shape(eps, m, "masked_loss")?;
    Ok(eps
        .as_slice()
        .iter()
        .zip(eps_hat.as_slice())
        .zip(m.as_slice().iter().zip(m_iif.as_slice()))
        .map(|((e, h), (a, b))| ((e - h) * (a - b)).powi(2))
        .sum())
}

/// Tape version of [`masked_loss`]; gradients flow into `eps_hat` only.
pub(crate) fn masked_loss_var(g: &mut Graph<'_>, eps: &Matrix, eps_hat: Var, target: &Matrix) -> Var {
    let e = g.constant(eps.clone());
    let d = g.sub(e, eps_hat);
    let w = g.constant(target.clone());
    let r = g.mul(d, w);
    g.sum_squares(r)
}

fn same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
