//! Self-supervised pretraining and mask-specific finetuning.
//!
//! Each batch draws one seed per instance from the run rng, builds the
//! instance's tape independently (optionally in parallel) and reduces the
//! gradients in instance order, so results do not depend on thread count.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{subsample_series, Series, SeriesBatch};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::Binder;
use crate::masking::{
    forecasting_mask, history_mask, iif_mask, imputation_mask, interpolation_mask, MaskKind, MaskSet,
};
use crate::model::{Model, TrainingExample};
use crate::optim::{step_decay_lr, AdamConfig, AdamW};
use crate::params::{normal_init, Grads};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_points: Vec<f64>,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub mask_kind: MaskKind,
    /// Forecast horizon, required by the forecasting mask.
    pub horizon: Option<usize>,
    /// Features kept per instance; `None` keeps all.
    pub feature_sample: Option<usize>,
    pub seed: u64,
    /// Process instances sequentially instead of across threads.
    pub deterministic: bool,
}

impl TrainConfig {
    pub fn pretrain(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 16,
            lr: 1e-3,
            decay_points: vec![0.75, 0.9],
            decay_factor: 0.1,
            weight_decay: 1e-6,
            mask_kind: MaskKind::Iif,
            horizon: None,
            feature_sample: None,
            seed,
            deterministic: false,
        }
    }

    pub fn finetune(epochs: usize, seed: u64, mask_kind: MaskKind) -> Self {
        Self {
            mask_kind,
            ..Self::pretrain(epochs, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.mask_kind == MaskKind::Forecasting && self.horizon.is_none() {
            return Err(Error::Config("forecasting mask needs a horizon".into()));
        }
        if self.feature_sample == Some(0) {
            return Err(Error::Config("feature_sample must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        step_decay_lr(self.lr, epoch, self.epochs, &self.decay_points, self.decay_factor)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Loss summary of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean per-instance loss.
    pub loss: f64,
    pub lr: f64,
}

/// Training state: model, optimiser, rng and loss history.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub optim: AdamW,
    pub config: TrainConfig,
    /// Epochs completed so far.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochStats>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optim = AdamW::new(&model.params, config.adam());
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            model,
            optim,
            config,
            epoch: 0,
            rng,
            history: Vec::new(),
        })
    }

    /// Builds the mask for one instance according to the configured kind.
    fn masks(&self, s: &Series, pool: Option<&SeriesBatch>, rng: &mut ChaCha8Rng) -> Result<MaskSet> {
        let m = &s.mask;
        Ok(match self.config.mask_kind {
            MaskKind::Iif => iif_mask(m, rng),
            MaskKind::Imputation => imputation_mask(m, rng),
            MaskKind::Interpolation => interpolation_mask(m, rng),
            MaskKind::Forecasting => forecasting_mask(m, self.config.horizon.unwrap_or(0))?,
            MaskKind::History => {
                let pool = pool
                    .filter(|p| !p.is_empty())
                    .ok_or_else(|| Error::InvalidArgument("history mask needs a sample pool".into()))?;
                let other = &pool.series[rng.random_range(0..pool.len())];
                let other_m = aligned_mask(other, &s.feature_ids, s.len())?;
                history_mask(m, &other_m, rng)?
            }
        })
    }

    /// Loss and gradients of one instance.
    fn instance(&self, s: &Series, pool: Option<&SeriesBatch>, seed: u64) -> Result<(f64, Grads)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sub;
        let s = match self.config.feature_sample {
            Some(kf) if kf < s.n_features() => {
                sub = subsample_series(s, kf, &mut rng)?;
                &sub
            }
            _ => s,
        };
        let masks = self.masks(s, pool, &mut rng)?;
        let t = rng.random_range(1..=self.model.schedule.steps());
        let (k, l) = s.values.shape();
        let eps = normal_init(k, l, 1.0, &mut rng);
        let ex = TrainingExample::new(&s.values, &masks, &s.feature_ids, t, eps, &self.model.schedule)?;
        let mut g = Graph::new();
        let mut bind = Binder::trainable(&self.model.params).with_dropout(&mut rng);
        let loss = self.model.loss_var(&mut g, &mut bind, &ex);
        let value = g.value(loss).get(0, 0);
        let grads = g.backward(loss, self.model.params.len());
        Ok((value, grads))
    }

    /// Mean loss and mean gradient over a batch.
    pub fn batch_gradients(
        &self,
        batch: &[&Series],
        pool: Option<&SeriesBatch>,
        seeds: &[u64],
    ) -> Result<(f64, Grads)> {
        let work = |(s, &seed): (&&Series, &u64)| self.instance(s, pool, seed);
        let results: Vec<Result<(f64, Grads)>> = if self.config.deterministic {
            batch.iter().zip(seeds).map(work).collect()
        } else {
            batch.par_iter().zip(seeds.par_iter()).map(work).collect()
        };
        let mut total = Grads::for_store(&self.model.params);
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            total.merge(&g);
        }
        let n = batch.len() as f64;
        total.scale(1.0 / n);
        Ok((loss / n, total))
    }

    /// Runs one epoch over `data`.
    pub fn train_epoch(&mut self, data: &SeriesBatch, pool: Option<&SeriesBatch>) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let epoch = self.epoch + 1;
        let lr = self.config.lr_for_epoch(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&Series> = chunk.iter().map(|&i| &data.series[i]).collect();
            let seeds: Vec<u64> = chunk.iter().map(|_| self.rng.random()).collect();
            let (loss, grads) = self.batch_gradients(&batch, pool, &seeds)?;
            if !loss.is_finite() || !grads.global_norm().is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            self.optim.update(&mut self.model.params, &grads, lr);
            sum += loss * chunk.len() as f64;
        }
        let stats = EpochStats {
            epoch,
            loss: sum / data.len() as f64,
            lr,
        };
        self.epoch = epoch;
        self.history.push(stats);
        Ok(stats)
    }

    /// Trains until `config.epochs` epochs have completed; `on_epoch` sees
    /// every finished epoch.
    pub fn fit(
        &mut self,
        data: &SeriesBatch,
        pool: Option<&SeriesBatch>,
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<()> {
        if self.config.mask_kind == MaskKind::History && pool.is_none_or(SeriesBatch::is_empty) {
            return Err(Error::InvalidArgument("history mask needs a sample pool".into()));
        }
        while self.epoch < self.config.epochs {
            let stats = self.train_epoch(data, pool)?;
            on_epoch(&stats);
        }
        Ok(())
    }
}

/// Mask of `other` restricted to the global features `ids`.
fn aligned_mask(other: &Series, ids: &[usize], len: usize) -> Result<Matrix> {
    if other.len() != len {
        return Err(Error::Shape(format!(
            "pool instance has length {}, expected {len}",
            other.len()
        )));
    }
    let rows = ids
        .iter()
        .map(|id| {
            other
                .feature_ids
                .iter()
                .position(|f| f == id)
                .ok_or_else(|| Error::InvalidArgument(format!("pool instance lacks feature {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Matrix::from_fn(ids.len(), len, |r, c| other.mask.get(rows[r], c)))
}

/// Self-supervised pretraining with the IIF mask.
pub fn pretrain(model: Model, data: &SeriesBatch, config: TrainConfig) -> Result<Trainer> {
    let mut trainer = Trainer::new(model, config)?;
    trainer.fit(data, None, |_| {})?;
    Ok(trainer)
}

/// Continues training all weights with a task mask.
pub fn finetune(
    model: Model,
    data: &SeriesBatch,
    pool: Option<&SeriesBatch>,
    config: TrainConfig,
) -> Result<Trainer> {
    let mut trainer = Trainer::new(model, config)?;
    trainer.fit(data, pool, |_| {})?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::synth_generate;

    #[test]
    fn zero_epochs_is_identity() {
        let model = Model::new(ModelConfig::micro(3), 1).unwrap();
        let before = model.params.clone();
        let data = synth_generate(6, 1).unwrap();
        let t = finetune(model, &data, None, TrainConfig::finetune(0, 1, MaskKind::Imputation)).unwrap();
        assert_eq!(t.model.params, before);
    }

    #[test]
    fn history_without_pool_fails() {
        let model = Model::new(ModelConfig::micro(3), 1).unwrap();
        let data = synth_generate(6, 1).unwrap();
        let r = finetune(model, &data, None, TrainConfig::finetune(1, 1, MaskKind::History));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn empty_target_gives_zero_loss_and_gradient() {
        let model = Model::new(ModelConfig::micro(3), 1).unwrap();
        let data = synth_generate(6, 1).unwrap();
        // forecasting mask over a fully missing series leaves nothing to predict
        let mut s = data.series[0].clone();
        s.mask = Matrix::zeros(3, 6);
        s.values = Matrix::zeros(3, 6);
        let mut cfg = TrainConfig::finetune(1, 1, MaskKind::Forecasting);
        cfg.horizon = Some(2);
        let t = Trainer::new(model, cfg).unwrap();
        let (loss, grads) = t.batch_gradients(&[&s, &s], None, &[1, 2]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.global_norm(), 0.0);
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let data = synth_dataset_small();
        let run = |det: bool| {
            let mut cfg = TrainConfig::pretrain(2, 5);
            cfg.batch_size = 3;
            cfg.deterministic = det;
            let t = pretrain(Model::new(ModelConfig::micro(3), 2).unwrap(), &data, cfg).unwrap();
            (t.model.params, t.history)
        };
        assert_eq!(run(true), run(false));
    }

    fn synth_dataset_small() -> SeriesBatch {
        let mut cfg = crate::data::SynthConfig::new(8, 3);
        cfg.instances = 7;
        cfg.random_phase = true;
        crate::data::synth_dataset(&cfg).unwrap()
    }
}
