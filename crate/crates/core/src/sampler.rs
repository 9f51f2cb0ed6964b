//! Reverse-diffusion sampling of missing and future values.
//!
//! The conditioning embedding is computed once per input; each sample then
//! runs `T` denoiser calls from its own noise draw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::reverse_mean;
use crate::embedder::Embedding;
use crate::error::{Error, Result};
use crate::metrics::quantile_sorted;
use crate::model::Model;
use crate::params::normal_init;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub samples: usize,
    pub seed: u64,
    /// Also add posterior noise at the final step `t = 1`.
    pub terminal_noise: bool,
    /// Generate samples sequentially instead of across threads.
    pub deterministic: bool,
}

impl SamplerConfig {
    pub fn new(samples: usize, seed: u64) -> Self {
        Self {
            samples,
            seed,
            terminal_noise: false,
            deterministic: false,
        }
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::new(100, 1)
    }
}

/// Generated completions of one `[K, L]` input.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Matrix>,
    pub median: Matrix,
    pub q05: Matrix,
    pub q95: Matrix,
    /// 1 where values were generated.
    pub target_mask: Matrix,
}

impl SampleSet {
    pub fn from_samples(samples: Vec<Matrix>, target_mask: Matrix) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("at least one sample is required".into()))?;
        let (k, l) = first.shape();
        if samples.iter().any(|s| s.shape() != (k, l)) || target_mask.shape() != (k, l) {
            return Err(Error::Shape("samples and mask must share a shape".into()));
        }
        let mut median = Matrix::zeros(k, l);
        let mut q05 = Matrix::zeros(k, l);
        let mut q95 = Matrix::zeros(k, l);
        let mut cell = Vec::with_capacity(samples.len());
        for r in 0..k {
            for c in 0..l {
                cell.clear();
                cell.extend(samples.iter().map(|s| s.get(r, c)));
                cell.sort_by(f64::total_cmp);
                median.set(r, c, quantile_sorted(&cell, 0.5));
                q05.set(r, c, quantile_sorted(&cell, 0.05));
                q95.set(r, c, quantile_sorted(&cell, 0.95));
            }
        }
        Ok(Self {
            samples,
            median,
            q05,
            q95,
            target_mask,
        })
    }
}

/// One reverse chain from `x_T = (1 - m) * eps`.
fn reverse_chain(
    model: &Model,
    z: &Embedding,
    target: &Matrix,
    terminal_noise: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Matrix> {
    let (k, l) = target.shape();
    let sched = &model.schedule;
    let mut x = normal_init(k, l, 1.0, rng).zip_map(target, |e, m| e * m);
    for t in (1..=sched.steps()).rev() {
        let eps_hat = model.predict_noise(&x, t, z)?;
        let mut next = reverse_mean(&x, t, &eps_hat, sched)?;
        if t > 1 || terminal_noise {
            let sigma = sched.sigma2(t).sqrt();
            let noise = normal_init(k, l, 1.0, rng);
            next = next.zip_map(&noise, |a, n| a + sigma * n);
        }
        x = next;
    }
    Ok(x)
}

/// Draws `cfg.samples` completions of `x0` where `m == 0`.
pub fn generate(
    model: &Model,
    x0: &Matrix,
    m: &Matrix,
    feature_ids: &[usize],
    cfg: &SamplerConfig,
) -> Result<SampleSet> {
    if cfg.samples == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    if !model.params.iter().all(|(_, _, p)| p.is_finite()) {
        return Err(Error::NonFinite("model parameters contain NaN or infinity".into()));
    }
    let x_obs = x0.zip_map(m, |x, v| x * v);
    if !x_obs.is_finite() {
        return Err(Error::NonFinite("observed values contain NaN or infinity".into()));
    }
    let z = model.embed(&x_obs, m, feature_ids)?;
    let target = m.map(|v| 1.0 - v);
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds: Vec<u64> = (0..cfg.samples).map(|_| master.random()).collect();
    let run = |&seed: &u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = reverse_chain(model, &z, &target, cfg.terminal_noise, &mut rng)?;
        if !gen.is_finite() {
            return Err(Error::NonFinite("reverse diffusion produced NaN or infinity".into()));
        }
        Ok(Matrix::from_fn(x0.rows(), x0.cols(), |r, c| {
            if m.get(r, c) != 0.0 {
                x0.get(r, c)
            } else {
                gen.get(r, c)
            }
        }))
    };
    let samples: Result<Vec<Matrix>> = if cfg.deterministic {
        seeds.iter().map(run).collect()
    } else {
        seeds.par_iter().map(run).collect()
    };
    SampleSet::from_samples(samples?, target)
}

/// Fills cells missing from `m`.
pub fn impute(model: &Model, x0: &Matrix, m: &Matrix, feature_ids: &[usize], cfg: &SamplerConfig) -> Result<SampleSet> {
    generate(model, x0, m, feature_ids, cfg)
}

/// Fills whole missing timestamps; the columns to fill come from `m`.
pub fn interpolate(
    model: &Model,
    x0: &Matrix,
    m: &Matrix,
    feature_ids: &[usize],
    cfg: &SamplerConfig,
) -> Result<SampleSet> {
    generate(model, x0, m, feature_ids, cfg)
}

/// Predicts the last `horizon` columns of a `[K, L1 + L2]` window together
/// with any cells missing from the history.
pub fn forecast(
    model: &Model,
    x: &Matrix,
    m: &Matrix,
    horizon: usize,
    feature_ids: &[usize],
    cfg: &SamplerConfig,
) -> Result<SampleSet> {
    let l = x.cols();
    if horizon == 0 || horizon >= l {
        return Err(Error::InvalidArgument(format!(
            "forecast horizon {horizon} must be in 1..{l}"
        )));
    }
    let cond = Matrix::from_fn(m.rows(), l, |r, c| if c >= l - horizon { 0.0 } else { m.get(r, c) });
    generate(model, x, &cond, feature_ids, cfg)
}
