//! Parameterised building blocks shared by the embedder, denoiser and heads.

use rand::{Rng, RngCore};

use crate::graph::{Graph, Var};
use crate::params::{uniform_init, ParamId, ParamStore};
use crate::tensor::Matrix;

/// How parameter leaves enter a tape, plus the optional dropout stream.
pub struct Binder<'a, 'r> {
    pub store: &'a ParamStore,
    pub trainable: bool,
    /// Dropout is active only when an rng is supplied.
    pub rng: Option<&'r mut dyn RngCore>,
}

impl<'a, 'r> Binder<'a, 'r> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: true,
            rng: None,
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: false,
            rng: None,
        }
    }

    pub fn with_dropout(mut self, rng: &'r mut dyn RngCore) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn leaf(&self, g: &mut Graph<'a>, id: ParamId) -> Var {
        if self.trainable {
            g.param(self.store, id)
        } else {
            g.frozen(self.store, id)
        }
    }

    /// Inverted dropout; identity when `rate == 0` or no rng is bound.
    pub fn dropout(&mut self, g: &mut Graph<'a>, x: Var, rate: f64) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let (r, c) = g.shape(x);
        let keep = 1.0 / (1.0 - rate);
        let mask = Matrix::from_fn(r, c, |_, _| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        });
        let m = g.constant(mask);
        g.mul(x, m)
    }
}

/// Dense map applied to every row (a 1x1 convolution over positions).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.insert(format!("{name}.w"), uniform_init(fan_in, fan_out, fan_in, rng));
        let b = store.insert(format!("{name}.b"), uniform_init(1, fan_out, fan_in, rng));
        Self { w, b }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.insert(format!("{name}.w"), Matrix::zeros(fan_in, fan_out));
        let b = store.insert(format!("{name}.b"), Matrix::zeros(1, fan_out));
        Self { w, b }
    }

    pub fn apply<'a>(&self, g: &mut Graph<'a>, bind: &Binder<'a, '_>, x: Var) -> Var {
        let w = bind.leaf(g, self.w);
        let b = bind.leaf(g, self.b);
        g.linear(x, w, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.insert(format!("{name}.gamma"), Matrix::filled(1, width, 1.0));
        let beta = store.insert(format!("{name}.beta"), Matrix::zeros(1, width));
        Self { gamma, beta }
    }

    pub fn apply<'a>(&self, g: &mut Graph<'a>, bind: &Binder<'a, '_>, x: Var) -> Var {
        let gamma = bind.leaf(g, self.gamma);
        let beta = bind.leaf(g, self.beta);
        g.layer_norm(x, gamma, beta)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}

/// One post-norm transformer encoder layer with a GELU feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub qkv: Linear,
    pub out: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
    pub heads: usize,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ff_dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            qkv: Linear::init(store, &format!("{name}.qkv"), width, 3 * width, rng),
            out: Linear::init(store, &format!("{name}.attn_out"), width, width, rng),
            norm1: LayerNorm::init(store, &format!("{name}.norm1"), width),
            ff1: Linear::init(store, &format!("{name}.ff1"), width, ff_dim, rng),
            ff2: Linear::init(store, &format!("{name}.ff2"), ff_dim, width, rng),
            norm2: LayerNorm::init(store, &format!("{name}.norm2"), width),
            heads,
            dropout,
        }
    }

    /// Attends within consecutive blocks of `group` rows.
    pub fn apply<'a>(&self, g: &mut Graph<'a>, bind: &mut Binder<'a, '_>, x: Var, group: usize) -> Var {
        let width = g.shape(x).1;
        let qkv = self.qkv.apply(g, bind, x);
        let q = g.slice_cols(qkv, 0, width);
        let k = g.slice_cols(qkv, width, 2 * width);
        let v = g.slice_cols(qkv, 2 * width, 3 * width);
        let a = g.attention(q, k, v, group, self.heads);
        let a = self.out.apply(g, bind, a);
        let a = bind.dropout(g, a, self.dropout);
        let x1 = g.add(x, a);
        let x1 = self.norm1.apply(g, bind, x1);
        let f = self.ff1.apply(g, bind, x1);
        let f = g.gelu(f);
        let f = bind.dropout(g, f, self.dropout);
        let f = self.ff2.apply(g, bind, f);
        let f = bind.dropout(g, f, self.dropout);
        let x2 = g.add(x1, f);
        self.norm2.apply(g, bind, x2)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [
            self.qkv.ids(),
            self.out.ids(),
            self.norm1.ids(),
            self.ff1.ids(),
            self.ff2.ids(),
            self.norm2.ids(),
        ]
        .concat()
    }
}
