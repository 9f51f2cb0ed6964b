//! Noise predictor: a stack of gated residual layers built only from
//! position-wise dense maps, conditioned on the embedding and the diffusion
//! step.

use std::f64::consts::FRAC_1_SQRT_2;

use rand::Rng;

use crate::config::ModelConfig;
use crate::embedder::step_embedding;
use crate::graph::{Graph, Var};
use crate::layers::{Binder, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidualLayer {
    pub diff_proj: Linear,
    pub cond_proj: Linear,
    pub mid_proj: Linear,
    pub res_skip: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub x_proj: Linear,
    pub layers: Vec<ResidualLayer>,
    pub head1: Linear,
    /// Zero-initialised so the untrained network predicts no noise.
    pub head2: Linear,
    channels: usize,
    step_dim: usize,
}

impl Denoiser {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let c = cfg.residual_channels;
        let z = cfg.embedding_channels();
        let x_proj = Linear::init(store, "denoise.x_proj", 1, c, rng);
        let layers = (0..cfg.residual_layers)
            .map(|i| {
                let p = format!("denoise.layer{i}");
                ResidualLayer {
                    diff_proj: Linear::init(store, &format!("{p}.diff_proj"), cfg.step_dim, c, rng),
                    cond_proj: Linear::init(store, &format!("{p}.cond_proj"), z, 2 * c, rng),
                    mid_proj: Linear::init(store, &format!("{p}.mid_proj"), c, 2 * c, rng),
                    res_skip: Linear::init(store, &format!("{p}.res_skip"), c, 2 * c, rng),
                }
            })
            .collect();
        Self {
            x_proj,
            layers,
            head1: Linear::init(store, "denoise.head1", c, c, rng),
            head2: Linear::zeros(store, "denoise.head2", c, 1),
            channels: c,
            step_dim: cfg.step_dim,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.x_proj.ids().to_vec();
        for l in &self.layers {
            ids.extend(l.diff_proj.ids());
            ids.extend(l.cond_proj.ids());
            ids.extend(l.mid_proj.ids());
            ids.extend(l.res_skip.ids());
        }
        ids.extend(self.head1.ids());
        ids.extend(self.head2.ids());
        ids
    }

    /// `x_t` is `[K, L]`, `z` is `[K*L, C]`; returns `[K*L, 1]`.
    pub fn forward<'a>(&self, g: &mut Graph<'a>, bind: &Binder<'a, '_>, x_t: &Matrix, t: usize, z: Var) -> Var {
        let (k, l) = x_t.shape();
        let c = self.channels;
        let x = g.constant(x_t.clone().reshape(k * l, 1).expect("same size"));
        let x = self.x_proj.apply(g, bind, x);
        let mut y = g.relu(x);
        let step = g.constant(step_embedding(t, self.step_dim));
        let mut skips = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let d = layer.diff_proj.apply(g, bind, step);
            let h = g.add_row(y, d);
            let h = layer.mid_proj.apply(g, bind, h);
            let cond = layer.cond_proj.apply(g, bind, z);
            let u = g.add(h, cond);
            let filt = g.slice_cols(u, 0, c);
            let filt = g.tanh(filt);
            let gate = g.slice_cols(u, c, 2 * c);
            let gate = g.sigmoid(gate);
            let act = g.mul(filt, gate);
            let rs = layer.res_skip.apply(g, bind, act);
            let r = g.slice_cols(rs, 0, c);
            let s = g.slice_cols(rs, c, 2 * c);
            let sum = g.add(y, r);
            y = g.scale(sum, FRAC_1_SQRT_2);
            skips.push(s);
        }
        let mut acc = skips[0];
        for &s in &skips[1..] {
            acc = g.add(acc, s);
        }
        let acc = g.scale(acc, 1.0 / (self.layers.len() as f64).sqrt());
        let h = self.head1.apply(g, bind, acc);
        let h = g.relu(h);
        self.head2.apply(g, bind, h)
    }
}
