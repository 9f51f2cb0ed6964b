//! The embedding function: side information, value projection, the temporal
//! and feature attention encoders applied in both orders, and the SiLU
//! output over the concatenated branches and mask.
//!
//! Tensors shaped `[K, L, C]` are stored as `K * L` rows by `C` columns with
//! row index `k * L + l`.

use rand::Rng;

use crate::config::ModelConfig;
use crate::graph::{Graph, Var};
use crate::layers::{Binder, EncoderLayer, Linear};
use crate::params::{normal_init, ParamId, ParamStore};
use crate::tensor::Matrix;

const TIME_BASE: f64 = 10_000.0;

/// Sinusoidal timestamp table `[L, dim]`; row `l - 1` encodes timestamp `l`.
pub fn time_embedding(len: usize, dim: usize) -> Matrix {
    let half = dim / 2;
    Matrix::from_fn(len, dim, |r, j| {
        let l = (r + 1) as f64;
        let (j, use_cos) = if j < half { (j, false) } else { (j - half, true) };
        let arg = l / TIME_BASE.powf(j as f64 / half as f64);
        if use_cos {
            arg.cos()
        } else {
            arg.sin()
        }
    })
}

/// Diffusion-step embedding `[1, dim]` with frequencies `10^(4j / (dim/2 - 1))`.
pub fn step_embedding(t: usize, dim: usize) -> Matrix {
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    Matrix::from_fn(1, dim, |_, j| {
        let (j, use_cos) = if j < half { (j, false) } else { (j - half, true) };
        let arg = 10f64.powf(4.0 * j as f64 / denom) * t as f64;
        if use_cos {
            arg.cos()
        } else {
            arg.sin()
        }
    })
}

/// Full step table `[T, dim]`; row `t - 1` encodes step `t`.
pub fn step_table(steps: usize, dim: usize) -> Matrix {
    let mut out = Matrix::zeros(steps, dim);
    for t in 1..=steps {
        out.row_mut(t - 1).copy_from_slice(step_embedding(t, dim).row(0));
    }
    out
}

/// Conditioning embedding `z` of shape `[K, L, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub z: Matrix,
    pub n_features: usize,
    pub len: usize,
}

impl Embedding {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_features, self.len, self.z.cols())
    }

    pub fn get(&self, k: usize, l: usize, c: usize) -> f64 {
        self.z.get(k * self.len + l, c)
    }

    /// Channel `c` as a `[K, L]` matrix.
    pub fn channel(&self, c: usize) -> Matrix {
        Matrix::from_fn(self.n_features, self.len, |k, l| self.get(k, l, c))
    }
}

/// Row permutation taking `(k, l)` order to `(l, k)` order.
fn transpose_index(k: usize, l: usize) -> Vec<usize> {
    (0..k * l).map(|i| (i % k) * l + i / k).collect()
}

/// Parameter handles of the embedding function.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    pub in_proj: Linear,
    pub feature_table: ParamId,
    pub temporal: EncoderLayer,
    pub feature: EncoderLayer,
    pub out_a: Linear,
    pub out_b: Linear,
    time_dim: usize,
}

impl Embedder {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let width = cfg.model_width();
        let enc = |store: &mut ParamStore, name: &str, rng: &mut R| {
            EncoderLayer::init(store, name, width, cfg.heads, cfg.ff_dim, cfg.dropout, rng)
        };
        Self {
            in_proj: Linear::init(store, "embed.in_proj", 1, cfg.input_channels, rng),
            feature_table: store.insert(
                "embed.feature_table",
                normal_init(cfg.n_features, cfg.feature_dim, 1.0, rng),
            ),
            temporal: enc(store, "embed.temporal", rng),
            feature: enc(store, "embed.feature", rng),
            out_a: Linear::init(store, "embed.out_a", width, cfg.embed_channels, rng),
            out_b: Linear::init(store, "embed.out_b", width, cfg.embed_channels, rng),
            time_dim: cfg.time_dim,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.in_proj.ids().to_vec();
        ids.push(self.feature_table);
        ids.extend(self.temporal.ids());
        ids.extend(self.feature.ids());
        ids.extend(self.out_a.ids());
        ids.extend(self.out_b.ids());
        ids
    }

    /// Builds `[K*L, C]` encoder input: projected values, timestamp
    /// embedding and feature embedding.
    pub fn input_transform<'a>(
        &self,
        g: &mut Graph<'a>,
        bind: &Binder<'a, '_>,
        x_obs: &Matrix,
        feature_ids: &[usize],
    ) -> Var {
        let (k, l) = x_obs.shape();
        let x = g.constant(x_obs.clone().reshape(k * l, 1).expect("same size"));
        let v = self.in_proj.apply(g, bind, x);
        let v = g.relu(v);
        let table = time_embedding(l, self.time_dim);
        let times = Matrix::from_fn(k * l, self.time_dim, |r, c| table.get(r % l, c));
        let times = g.constant(times);
        let feat = bind.leaf(g, self.feature_table);
        let feat = g.gather_rows(feat, (0..k * l).map(|r| feature_ids[r / l]).collect());
        g.concat(&[v, times, feat])
    }

    /// Temporal encoder over each feature's length-`L` sequence.
    pub fn encode_temporal<'a>(&self, g: &mut Graph<'a>, bind: &mut Binder<'a, '_>, x: Var, len: usize) -> Var {
        self.temporal.apply(g, bind, x, len)
    }

    /// Feature encoder over each timestamp's length-`K` sequence.
    pub fn encode_feature<'a>(
        &self,
        g: &mut Graph<'a>,
        bind: &mut Binder<'a, '_>,
        x: Var,
        k: usize,
        len: usize,
    ) -> Var {
        let to_lk = transpose_index(k, len);
        let xt = g.gather_rows(x, to_lk);
        let y = self.feature.apply(g, bind, xt, k);
        g.gather_rows(y, transpose_index(len, k))
    }

    /// `SiLU(concat(out_a(g(h(x))), out_b(h(g(x))), m_cond))` as `[K*L, 2E+1]`.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        bind: &mut Binder<'a, '_>,
        x_obs: &Matrix,
        m_cond: &Matrix,
        feature_ids: &[usize],
    ) -> Var {
        let (k, l) = x_obs.shape();
        let x = self.input_transform(g, bind, x_obs, feature_ids);

        let h = self.encode_feature(g, bind, x, k, l);
        let gh = self.encode_temporal(g, bind, h, l);
        let a = self.out_a.apply(g, bind, gh);

        let t = self.encode_temporal(g, bind, x, l);
        let hg = self.encode_feature(g, bind, t, k, l);
        let b = self.out_b.apply(g, bind, hg);

        let m = g.constant(m_cond.clone().reshape(k * l, 1).expect("same size"));
        let cat = g.concat(&[a, b, m]);
        g.silu(cat)
    }
}
