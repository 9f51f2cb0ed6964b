//! The full conditional noise-prediction model: embedding function plus
//! denoiser over one shared parameter store.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::denoiser::Denoiser;
use crate::diffusion::{forward_sample, masked_loss_var, target_mask, NoiseSchedule};
use crate::embedder::{Embedder, Embedding};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Binder;
use crate::masking::MaskSet;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

pub struct Model {
    pub config: ModelConfig,
    pub schedule: NoiseSchedule,
    pub params: ParamStore,
    pub embedder: Embedder,
    pub denoiser: Denoiser,
    embed_calls: AtomicUsize,
    predict_calls: AtomicUsize,
}

impl Clone for Model {
    /// Clones parameters; call counters start at zero.
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            params: self.params.clone(),
            embedder: self.embedder.clone(),
            denoiser: self.denoiser.clone(),
            embed_calls: AtomicUsize::new(0),
            predict_calls: AtomicUsize::new(0),
        }
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("tensors", &self.params.len())
            .field("scalars", &self.params.num_scalars())
            .finish()
    }
}

/// One self-supervised training example with its noise draw fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub x_obs: Matrix,
    pub m_cond: Matrix,
    pub feature_ids: Vec<usize>,
    pub t: usize,
    pub eps: Matrix,
    pub x_t: Matrix,
    pub target: Matrix,
}

impl TrainingExample {
    pub fn new(
        x0: &Matrix,
        masks: &MaskSet,
        feature_ids: &[usize],
        t: usize,
        eps: Matrix,
        schedule: &NoiseSchedule,
    ) -> Result<Self> {
        if x0.shape() != masks.m.shape() || x0.shape() != eps.shape() {
            return Err(Error::Shape(format!(
                "values {:?}, mask {:?}, noise {:?}",
                x0.shape(),
                masks.m.shape(),
                eps.shape()
            )));
        }
        let target = target_mask(&masks.m, &masks.m_iif);
        let x_obs = x0.zip_map(&masks.m_iif, |x, m| x * m);
        let x_msk = x0.zip_map(&target, |x, m| x * m);
        let x_t = forward_sample(&x_msk, t, &eps, schedule)?;
        Ok(Self {
            x_obs,
            m_cond: masks.m_iif.clone(),
            feature_ids: feature_ids.to_vec(),
            t,
            eps,
            x_t,
            target,
        })
    }
}

fn column(m: &Matrix) -> Matrix {
    m.clone().reshape(m.len(), 1).expect("same size")
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::from_config(&config.schedule)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let embedder = Embedder::init(&mut params, &config, &mut rng);
        let denoiser = Denoiser::init(&mut params, &config, &mut rng);
        Ok(Self {
            config,
            schedule,
            params,
            embedder,
            denoiser,
            embed_calls: AtomicUsize::new(0),
            predict_calls: AtomicUsize::new(0),
        })
    }

    /// Rebuilds a model around stored parameters; every tensor must be present.
    pub fn from_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let n = model.params.load_matching(params)?;
        if n != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} model tensors, found {n}",
                model.params.len()
            )));
        }
        Ok(model)
    }

    pub fn embedder_ids(&self) -> Vec<ParamId> {
        self.embedder.ids()
    }

    pub fn denoiser_ids(&self) -> Vec<ParamId> {
        self.denoiser.ids()
    }

    pub fn embed_calls(&self) -> usize {
        self.embed_calls.load(Ordering::Relaxed)
    }

    pub fn predict_calls(&self) -> usize {
        self.predict_calls.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.embed_calls.store(0, Ordering::Relaxed);
        self.predict_calls.store(0, Ordering::Relaxed);
    }

    fn check_inputs(&self, x: &Matrix, m: &Matrix, feature_ids: &[usize]) -> Result<()> {
        let (k, l) = x.shape();
        if k == 0 || l == 0 {
            return Err(Error::Shape("series must have K, L >= 1".into()));
        }
        if m.shape() != (k, l) {
            return Err(Error::Shape(format!("mask {:?} vs values {:?}", m.shape(), (k, l))));
        }
        if feature_ids.len() != k {
            return Err(Error::Shape(format!("{} feature ids for K = {k}", feature_ids.len())));
        }
        if let Some(&bad) = feature_ids.iter().find(|&&f| f >= self.config.n_features) {
            return Err(Error::InvalidArgument(format!(
                "feature id {bad} out of range {}",
                self.config.n_features
            )));
        }
        if m.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument("mask must be binary".into()));
        }
        Ok(())
    }

    /// Tape form of the embedding; `[K*L, C]`.
    pub fn embed_var<'a>(
        &self,
        g: &mut Graph<'a>,
        bind: &mut Binder<'a, '_>,
        x_obs: &Matrix,
        m_cond: &Matrix,
        feature_ids: &[usize],
    ) -> Var {
        self.embedder.forward(g, bind, x_obs, m_cond, feature_ids)
    }

    /// Tape form of the noise prediction; `[K*L, 1]`.
    pub fn predict_var<'a>(&self, g: &mut Graph<'a>, bind: &Binder<'a, '_>, x_t: &Matrix, t: usize, z: Var) -> Var {
        self.denoiser.forward(g, bind, x_t, t, z)
    }

    /// Masked noise-prediction loss through the denoiser and embedder.
    pub fn loss_var<'a>(&self, g: &mut Graph<'a>, bind: &mut Binder<'a, '_>, ex: &TrainingExample) -> Var {
        let z = self.embed_var(g, bind, &ex.x_obs, &ex.m_cond, &ex.feature_ids);
        let eps_hat = self.predict_var(g, bind, &ex.x_t, ex.t, z);
        masked_loss_var(g, &column(&ex.eps), eps_hat, &column(&ex.target))
    }

    /// Loss value with frozen parameters.
    pub fn loss(&self, ex: &TrainingExample) -> Result<f64> {
        self.check_inputs(&ex.x_obs, &ex.m_cond, &ex.feature_ids)?;
        self.schedule.check_step(ex.t)?;
        let mut g = Graph::new();
        let mut bind = Binder::frozen(&self.params);
        let v = self.loss_var(&mut g, &mut bind, ex);
        Ok(g.value(v).get(0, 0))
    }

    /// Conditioning embedding of an observed segment; dropout is off.
    pub fn embed(&self, x_obs: &Matrix, m_cond: &Matrix, feature_ids: &[usize]) -> Result<Embedding> {
        self.check_inputs(x_obs, m_cond, feature_ids)?;
        self.embed_calls.fetch_add(1, Ordering::Relaxed);
        let mut g = Graph::new();
        let mut bind = Binder::frozen(&self.params);
        let z = self.embed_var(&mut g, &mut bind, x_obs, m_cond, feature_ids);
        let (k, l) = x_obs.shape();
        Ok(Embedding {
            z: g.value(z).clone(),
            n_features: k,
            len: l,
        })
    }

    /// Predicted noise `[K, L]` for a noisy target segment at step `t`.
    pub fn predict_noise(&self, x_t: &Matrix, t: usize, z: &Embedding) -> Result<Matrix> {
        self.schedule.check_step(t)?;
        let (k, l) = x_t.shape();
        let want = (k, l, self.config.embedding_channels());
        if z.shape() != want {
            return Err(Error::Shape(format!("embedding {:?}, expected {want:?}", z.shape())));
        }
        self.predict_calls.fetch_add(1, Ordering::Relaxed);
        let mut g = Graph::new();
        let bind = Binder::frozen(&self.params);
        let zv = g.constant_ref(&z.z);
        let out = self.predict_var(&mut g, &bind, x_t, t, zv);
        let out = g.value(out).clone().reshape(k, l).expect("same size");
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untrained_model_predicts_zero_noise() {
        let m = Model::new(ModelConfig::micro(3), 7).unwrap();
        let x = Matrix::from_fn(3, 4, |r, c| (r as f64 - c as f64) * 0.3);
        let mask = Matrix::filled(3, 4, 1.0);
        let z = m.embed(&x, &mask, &[0, 1, 2]).unwrap();
        assert_eq!(z.shape(), (3, 4, 9));
        let eps = m.predict_noise(&x, 3, &z).unwrap();
        assert!(eps.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!((m.embed_calls(), m.predict_calls()), (1, 1));
        assert!(m.predict_noise(&x, 0, &z).is_err());
        assert!(m.embed(&x, &mask, &[0, 1, 3]).is_err());
    }
}
