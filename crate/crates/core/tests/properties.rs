mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsdiff_core::data::{window, Normalizer, RawSeries};
use tsdiff_core::diffusion::masked_loss;
use tsdiff_core::masking::{
    forecasting_mask, history_mask, iif_mask, iif_mask_with, imputation_mask, interpolation_mask, split, MaskSet,
};
use tsdiff_core::metrics::{adjust_predictions, crps, point_metrics};
use tsdiff_core::Matrix;

fn binary_matrix(max_k: usize, max_l: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_k, 1..=max_l).prop_flat_map(|(k, l)| {
        prop::collection::vec(prop::bool::weighted(0.8), k * l)
            .prop_map(move |v| Matrix::from_vec(k, l, v.into_iter().map(|b| b as u8 as f64).collect()).unwrap())
    })
}

fn subset_of_m(ms: &MaskSet) -> bool {
    ms.m_iif.as_slice().iter().zip(ms.m.as_slice()).all(|(&a, &m)| a <= m)
        && ms.m_iif.as_slice().iter().all(|&v| v == 0.0 || v == 1.0)
}

fn disjoint(ms: &MaskSet) -> bool {
    ms.m_iif.as_slice().iter().zip(ms.target().as_slice()).all(|(a, t)| a * t == 0.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn generators_never_observe_missing_cells(m in binary_matrix(6, 24), other in binary_matrix(6, 24), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let other = Matrix::from_fn(m.rows(), m.cols(), |r, c| other.get(r % other.rows(), c % other.cols()));
        let sets = [
            iif_mask(&m, &mut rng),
            imputation_mask(&m, &mut rng),
            interpolation_mask(&m, &mut rng),
            history_mask(&m, &other, &mut rng).unwrap(),
            forecasting_mask(&m, 1 + seed as usize % m.cols()).unwrap(),
        ];
        for ms in &sets {
            prop_assert!(subset_of_m(ms));
            prop_assert!(disjoint(ms));
        }
    }

    #[test]
    fn imputation_branch_drops_rounded_count(m in binary_matrix(5, 30), ratio in 0.1f64..=0.9, p in 0.0f64..=(1.0 / 3.0), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ms = iif_mask_with(&m, ratio, p, &mut rng);
        let n = m.sum();
        let dropped = ms.target().sum();
        prop_assert_eq!(dropped, (n * ratio + 0.5).floor());
    }

    #[test]
    fn generators_are_seed_deterministic(m in binary_matrix(4, 16), seed: u64) {
        let a = iif_mask(&m, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = iif_mask(&m, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn split_recovers_the_observed_values(m in binary_matrix(4, 12), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::gaussian(m.rows(), m.cols(), &mut rng);
        let ms = iif_mask(&m, &mut rng);
        let (obs, msk) = split(&x, &ms).unwrap();
        let xm = x.zip_map(&m, |v, w| v * w);
        prop_assert_eq!(obs.zip_map(&msk, |a, b| a + b), xm);
    }

    #[test]
    fn normalizer_standardises_its_fit_data(m in binary_matrix(4, 40), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::gaussian(m.rows(), m.cols(), &mut rng).map(|v| 3.0 * v + 7.0);
        let norm = Normalizer::fit(&x, &m);
        let ids: Vec<usize> = (0..m.rows()).collect();
        let z = norm.normalize(&x, &m, &ids);
        for k in 0..m.rows() {
            let obs: Vec<f64> = (0..m.cols()).filter(|&c| m.get(k, c) != 0.0).map(|c| z.get(k, c)).collect();
            if obs.len() < 2 {
                continue;
            }
            let n = obs.len() as f64;
            let mu = obs.iter().sum::<f64>() / n;
            let sd = (obs.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mu.abs() < 1e-6);
            prop_assert!((sd - 1.0).abs() < 1e-6);
        }
        let back = norm.denormalize(&z, &ids);
        for i in 0..x.len() {
            if m.as_slice()[i] != 0.0 {
                prop_assert!((back.as_slice()[i] - x.as_slice()[i]).abs() < 1e-9);
            } else {
                prop_assert_eq!(z.as_slice()[i], 0.0);
            }
        }
    }

    #[test]
    fn windows_with_stride_len_partition_the_prefix(k in 1usize..4, total in 1usize..80, len in 1usize..20) {
        prop_assume!(len <= total);
        let values = Matrix::from_fn(k, total, |r, c| (r * 1000 + c) as f64);
        let raw = RawSeries { names: (0..k).map(|i| format!("f{i}")).collect(), values, mask: Matrix::filled(k, total, 1.0) };
        let ws = window(&raw, len, len).unwrap();
        prop_assert_eq!(ws.len(), total / len);
        let starts: Vec<f64> = ws.iter().map(|w| w.values.get(0, 0)).collect();
        for (i, s) in starts.iter().enumerate() {
            prop_assert_eq!(*s, (i * len) as f64);
        }
    }

    #[test]
    fn adjustment_is_idempotent_and_monotone(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 0..60)) {
        let (pred, gt): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let once = adjust_predictions(&pred, &gt).unwrap();
        let twice = adjust_predictions(&once, &gt).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert!(pred.iter().zip(&once).all(|(&p, &a)| !p || a));
    }

    #[test]
    fn point_metrics_ignore_cells_outside_eval(eval in binary_matrix(3, 10), seed: u64, junk in -1e6f64..1e6) {
        prop_assume!(eval.sum() > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = common::gaussian(eval.rows(), eval.cols(), &mut rng);
        let pred = common::gaussian(eval.rows(), eval.cols(), &mut rng);
        let perturbed = pred.zip_map(&eval, |p, e| if e == 0.0 { junk } else { p });
        let a = point_metrics(&[pred], &[truth.clone()], &[eval.clone()]).unwrap();
        let b = point_metrics(&[perturbed.clone()], &[truth.clone()], &[eval.clone()]).unwrap();
        prop_assert_eq!(a, b);
        let c1 = crps(&[vec![perturbed.clone(), perturbed.map(|v| v + 1.0)]], &[truth.clone()], &[eval.clone()], 0.05).unwrap();
        let shifted = perturbed.zip_map(&eval, |p, e| if e == 0.0 { p - junk } else { p });
        let c2 = crps(&[vec![shifted.clone(), shifted.map(|v| v + 1.0)]], &[truth], &[eval], 0.05).unwrap();
        prop_assert_eq!(c1, c2);
    }

    #[test]
    fn masked_loss_ignores_predictions_off_target(m in binary_matrix(3, 10), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ms = iif_mask(&m, &mut rng);
        let eps = common::gaussian(m.rows(), m.cols(), &mut rng);
        let hat = common::gaussian(m.rows(), m.cols(), &mut rng);
        let noise = common::gaussian(m.rows(), m.cols(), &mut rng);
        let target = ms.target();
        let moved = Matrix::from_fn(m.rows(), m.cols(), |r, c| {
            if target.get(r, c) == 0.0 { hat.get(r, c) + 100.0 * noise.get(r, c) } else { hat.get(r, c) }
        });
        let a = masked_loss(&eps, &hat, &ms.m, &ms.m_iif).unwrap();
        let b = masked_loss(&eps, &moved, &ms.m, &ms.m_iif).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Reordering features together with their ids reorders the embedding rows.
    #[test]
    fn embedding_follows_feature_permutation(k in 2usize..5, l in 1usize..6, seed: u64) {
        let model = common::micro_model(k, seed % 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::gaussian(k, l, &mut rng);
        let m = common::binary(k, l, 0.7, &mut rng);
        let x = x.zip_map(&m, |v, w| v * w);
        let ids: Vec<usize> = (0..k).collect();
        let perm: Vec<usize> = (0..k).rev().collect();
        let px = Matrix::from_fn(k, l, |r, c| x.get(perm[r], c));
        let pm = Matrix::from_fn(k, l, |r, c| m.get(perm[r], c));
        let a = model.embed(&x, &m, &ids).unwrap();
        let b = model.embed(&px, &pm, &perm).unwrap();
        let (_, _, ch) = a.shape();
        for r in 0..k {
            for t in 0..l {
                for c in 0..ch {
                    prop_assert!((b.get(r, t, c) - a.get(perm[r], t, c)).abs() < 1e-10);
                }
            }
        }
    }
}
