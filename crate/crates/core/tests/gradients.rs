//! Tape gradients against central finite differences.

mod common;

use tsdiff_core::graph::Graph;
use tsdiff_core::layers::Binder;
use tsdiff_core::masking::iif_mask_with;
use tsdiff_core::params::ParamId;
use tsdiff_core::Matrix;

use common::*;

#[test]
fn embedding_gradients_match_finite_differences() {
    let mut model = micro_model(2, 3);
    let mut r = rng(9);
    let x = gaussian(2, 3, &mut r);
    let m = binary(2, 3, 0.6, &mut r);
    let x = x.zip_map(&m, |a, b| a * b);
    // random projection of z so the scalar depends on every channel unevenly
    let proj = gaussian(6, model.config.embedding_channels(), &mut r);
    let shell = model.clone();
    let ids = model.embedder_ids();
    let errs = gradient_errors(
        &mut model.params,
        &ids,
        |g, s| {
            let mut bind = Binder::trainable(s);
            let z = shell.embed_var(g, &mut bind, &x, &m, &[0, 1]);
            let w = g.constant(proj.clone());
            let p = g.mul(z, w);
            g.sum(p)
        },
        1e-6,
    );
    for (name, e) in &errs {
        assert!(*e < 1e-4, "{name}: relative error {e:e}");
    }
}

#[test]
fn denoiser_gradients_match_finite_differences() {
    let mut model = micro_model(2, 4);
    let ex = example(&model, 2, 3, 5, 11);
    let z = model
        .embed(&ex.x_obs, &ex.m_cond, &ex.feature_ids)
        .unwrap()
        .z;
    let shell = model.clone();
    let ids: Vec<ParamId> = model.denoiser_ids();
    let col = |m: &Matrix| m.clone().reshape(m.len(), 1).unwrap();
    let (eps, target) = (col(&ex.eps), col(&ex.target));
    let errs = gradient_errors(
        &mut model.params,
        &ids,
        |g: &mut Graph<'_>, s| {
            let bind = Binder::trainable(s);
            let zv = g.constant(z.clone());
            let out = shell.predict_var(g, &bind, &ex.x_t, ex.t, zv);
            let e = g.constant(eps.clone());
            let d = g.sub(e, out);
            let w = g.constant(target.clone());
            let d = g.mul(d, w);
            g.sum_squares(d)
        },
        1e-6,
    );
    for (name, e) in &errs {
        assert!(*e < 1e-4, "{name}: relative error {e:e}");
    }
}

#[test]
fn loss_at_init_is_masked_noise_energy() {
    let model = tsdiff_core::model::Model::new(tsdiff_core::ModelConfig::micro(3), 1).unwrap();
    let mut r = rng(2);
    let x0 = gaussian(3, 5, &mut r);
    let m = Matrix::filled(3, 5, 1.0);
    let masks = iif_mask_with(&m, 0.4, 0.9, &mut r);
    let eps = gaussian(3, 5, &mut r);
    let ex = tsdiff_core::model::TrainingExample::new(&x0, &masks, &[0, 1, 2], 2, eps.clone(), &model.schedule).unwrap();
    let expect: f64 = eps
        .as_slice()
        .iter()
        .zip(masks.target().as_slice())
        .map(|(e, t)| (e * t).powi(2))
        .sum();
    assert_eq!(model.loss(&ex).unwrap(), expect);
}
