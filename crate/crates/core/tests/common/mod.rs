//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsdiff_core::graph::Graph;
use tsdiff_core::layers::Binder;
use tsdiff_core::masking::{iif_mask_with, MaskSet};
use tsdiff_core::model::{Model, TrainingExample};
use tsdiff_core::params::{normal_init, ParamId, ParamStore};
use tsdiff_core::{Matrix, ModelConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    normal_init(rows, cols, 1.0, rng)
}

/// Micro model with a non-zero output head so every tensor receives gradient.
pub fn micro_model(k: usize, seed: u64) -> Model {
    let mut model = Model::new(ModelConfig::micro(k), seed).unwrap();
    let mut r = rng(seed + 1000);
    for id in model.denoiser.head2.ids() {
        let (rows, cols) = model.params.get(id).shape();
        *model.params.get_mut(id) = normal_init(rows, cols, 0.3, &mut r);
    }
    model
}

/// Training example with a fixed imputation-style mask.
pub fn example(model: &Model, k: usize, l: usize, t: usize, seed: u64) -> TrainingExample {
    let mut r = rng(seed);
    let x0 = gaussian(k, l, &mut r);
    let m = Matrix::filled(k, l, 1.0);
    let masks: MaskSet = iif_mask_with(&m, 0.5, 0.0, &mut r);
    let eps = gaussian(k, l, &mut r);
    let ids: Vec<usize> = (0..k).collect();
    TrainingExample::new(&x0, &masks, &ids, t, eps, &model.schedule).unwrap()
}

/// Per-tensor relative error `|a - n| / max(|a|, |n|)` between tape and
/// central-difference gradients of `f` over the tensors in `ids`.
pub fn gradient_errors(
    store: &mut ParamStore,
    ids: &[ParamId],
    f: impl for<'s> Fn(&mut Graph<'s>, &'s ParamStore) -> tsdiff_core::graph::Var,
    h: f64,
) -> Vec<(String, f64)> {
    let grads = {
        let mut g = Graph::new();
        let loss = f(&mut g, store);
        g.backward(loss, store.len())
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let v = f(&mut g, s);
        g.value(v).get(0, 0)
    };
    ids.iter()
        .map(|&id| {
            let (rows, cols) = store.get(id).shape();
            let analytic = grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(rows, cols));
            let mut numeric = Matrix::zeros(rows, cols);
            for i in 0..rows * cols {
                let orig = store.get(id).as_slice()[i];
                store.get_mut(id).as_mut_slice()[i] = orig + h;
                let up = eval(store);
                store.get_mut(id).as_mut_slice()[i] = orig - h;
                let down = eval(store);
                store.get_mut(id).as_mut_slice()[i] = orig;
                numeric.as_mut_slice()[i] = (up - down) / (2.0 * h);
            }
            let diff = analytic.zip_map(&numeric, |a, b| a - b).sum_squares().sqrt();
            let scale = analytic.sum_squares().sqrt().max(numeric.sum_squares().sqrt());
            let rel = if scale < 1e-12 { diff } else { diff / scale };
            (store.name(id).to_string(), rel)
        })
        .collect()
}

/// Gradient errors of the full training loss over every model tensor.
pub fn full_step_errors(model: &mut Model, ex: &TrainingExample, h: f64) -> Vec<(String, f64)> {
    let shell = model.clone();
    let ids: Vec<ParamId> = model.params.ids().collect();
    gradient_errors(
        &mut model.params,
        &ids,
        |g, s| {
            let mut bind = Binder::trainable(s);
            shell.loss_var(g, &mut bind, ex)
        },
        h,
    )
}

pub fn binary(rows: usize, cols: usize, p: f64, rng: &mut ChaCha8Rng) -> Matrix {
    use rand::Rng;
    Matrix::from_fn(rows, cols, |_, _| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
}
