//! Pseudo-observation mask generators.
//!
//! Every generator takes the availability mask `m` (1 = value present) and
//! returns a [`MaskSet`] whose `m_iif` is a subset of `m`. Cells in
//! `m - m_iif` are the self-supervised targets. Generators with a random
//! component also expose a `*_with` form that takes the draws explicitly.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Iif,
    Imputation,
    History,
    Interpolation,
    Forecasting,
}

impl std::str::FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "iif" => MaskKind::Iif,
            "imputation" => MaskKind::Imputation,
            "history" => MaskKind::History,
            "interpolation" => MaskKind::Interpolation,
            "forecasting" => MaskKind::Forecasting,
            other => {
                return Err(Error::InvalidArgument(format!("unknown mask kind {other}")));
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    /// Available values.
    pub m: Matrix,
    /// Pseudo-observed subset of `m`.
    pub m_iif: Matrix,
    pub kind: MaskKind,
}

impl MaskSet {
    /// `m - m_iif`: the cells to be predicted.
    pub fn target(&self) -> Matrix {
        self.m.zip_map(&self.m_iif, |a, b| a - b)
    }
}

/// `round(x)` with halves rounded up.
fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Zeroes `round(N * ratio)` of the `N` ones of `m`, chosen uniformly without
/// replacement.
fn drop_ratio<R: Rng + ?Sized>(m: &Matrix, ratio: f64, rng: &mut R) -> Matrix {
    let mut out = m.clone();
    let mut observed: Vec<usize> = m
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, _)| i)
        .collect();
    let n_drop = round_half_up(observed.len() as f64 * ratio).min(observed.len());
    let (picked, _) = observed.partial_shuffle(rng, n_drop);
    for &i in picked.iter() {
        out.as_mut_slice()[i] = 0.0;
    }
    out
}

fn zero_column(m: &mut Matrix, col: usize) {
    for r in 0..m.rows() {
        m.set(r, col, 0.0);
    }
}

fn zero_tail(m: &mut Matrix, width: usize) {
    let l = m.cols();
    for r in 0..m.rows() {
        for c in l - width..l {
            m.set(r, c, 0.0);
        }
    }
}

/// Mixed imputation / interpolation / forecasting mask.
pub fn iif_mask<R: Rng + ?Sized>(m: &Matrix, rng: &mut R) -> MaskSet {
    let ratio = rng.random_range(0.1..=0.9);
    let p = rng.random_range(0.0..=1.0);
    iif_mask_with(m, ratio, p, rng)
}

/// [`iif_mask`] with the imputation ratio `ratio` and the branch draw `p`
/// supplied by the caller.
///
/// `1/3 < p < 2/3` additionally zeroes one random column; `p >= 2/3` zeroes
/// the last `l'` columns with `l'` uniform in `1..=round(L/3)` (at least 1).
pub fn iif_mask_with<R: Rng + ?Sized>(m: &Matrix, ratio: f64, p: f64, rng: &mut R) -> MaskSet {
    let mut m_iif = drop_ratio(m, ratio, rng);
    let l = m.cols();
    if l > 0 {
        if 1.0 / 3.0 < p && p < 2.0 / 3.0 {
            let col = rng.random_range(0..l);
            zero_column(&mut m_iif, col);
        } else if p >= 2.0 / 3.0 {
            let max_width = round_half_up(l as f64 / 3.0).clamp(1, l);
            let width = rng.random_range(1..=max_width);
            zero_tail(&mut m_iif, width);
        }
    }
    MaskSet {
        m: m.clone(),
        m_iif,
        kind: MaskKind::Iif,
    }
}

pub fn imputation_mask<R: Rng + ?Sized>(m: &Matrix, rng: &mut R) -> MaskSet {
    let ratio = rng.random_range(0.1..=0.9);
    imputation_mask_with(m, ratio, rng)
}

pub fn imputation_mask_with<R: Rng + ?Sized>(m: &Matrix, ratio: f64, rng: &mut R) -> MaskSet {
    MaskSet {
        m: m.clone(),
        m_iif: drop_ratio(m, ratio, rng),
        kind: MaskKind::Imputation,
    }
}

/// Intersects `m` with the availability mask of another sample, or with
/// probability one half falls back to an imputation mask.
pub fn history_mask<R: Rng + ?Sized>(m: &Matrix, other_m: &Matrix, rng: &mut R) -> Result<MaskSet> {
    let p = rng.random_range(0.0..=1.0);
    history_mask_with(m, other_m, p, rng)
}

pub fn history_mask_with<R: Rng + ?Sized>(
    m: &Matrix,
    other_m: &Matrix,
    p: f64,
    rng: &mut R,
) -> Result<MaskSet> {
    if m.shape() != other_m.shape() {
        return Err(Error::Shape(format!(
            "history mask: {:?} vs {:?}",
            m.shape(),
            other_m.shape()
        )));
    }
    let m_iif = if p > 0.5 {
        imputation_mask(m, rng).m_iif
    } else {
        m.zip_map(other_m, |a, b| a * b)
    };
    Ok(MaskSet {
        m: m.clone(),
        m_iif,
        kind: MaskKind::History,
    })
}

pub fn interpolation_mask<R: Rng + ?Sized>(m: &Matrix, rng: &mut R) -> MaskSet {
    let col = if m.cols() == 0 {
        0
    } else {
        rng.random_range(0..m.cols())
    };
    interpolation_mask_at(m, col)
}

/// Zeroes column `col` (0-based) of a copy of `m`.
pub fn interpolation_mask_at(m: &Matrix, col: usize) -> MaskSet {
    let mut m_iif = m.clone();
    if col < m.cols() {
        zero_column(&mut m_iif, col);
    }
    MaskSet {
        m: m.clone(),
        m_iif,
        kind: MaskKind::Interpolation,
    }
}

/// Hides the last `horizon` columns.
pub fn forecasting_mask(m: &Matrix, horizon: usize) -> Result<MaskSet> {
    if horizon == 0 || horizon > m.cols() {
        return Err(Error::InvalidArgument(format!(
            "forecast horizon {horizon} outside 1..={}",
            m.cols()
        )));
    }
    let mut m_iif = m.clone();
    zero_tail(&mut m_iif, horizon);
    Ok(MaskSet {
        m: m.clone(),
        m_iif,
        kind: MaskKind::Forecasting,
    })
}

/// Splits `x` into the observed part `x * m_iif` and the masked part
/// `x * (m - m_iif)`.
pub fn split(x: &Matrix, ms: &MaskSet) -> Result<(Matrix, Matrix)> {
    if x.shape() != ms.m.shape() || ms.m.shape() != ms.m_iif.shape() {
        return Err(Error::Shape(format!(
            "split: x {:?}, mask {:?}",
            x.shape(),
            ms.m.shape()
        )));
    }
    let obs = x.zip_map(&ms.m_iif, |v, w| v * w);
    let msk = x.zip_map(&ms.target(), |v, w| v * w);
    Ok((obs, msk))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeros_introduced(ms: &MaskSet) -> usize {
        ms.target().as_slice().iter().filter(|&&v| v != 0.0).count()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn iif_imputation_branch_exact_count() {
        let m = Matrix::filled(4, 10, 1.0);
        let ms = iif_mask_with(&m, 0.5, 0.1, &mut rng());
        assert_eq!(zeros_introduced(&ms), 20);
    }

    #[test]
    fn iif_interpolation_branch_zeroes_a_column() {
        let m = Matrix::filled(4, 10, 1.0);
        let ms = iif_mask_with(&m, 0.1, 0.5, &mut rng());
        let has_zero_col = (0..10).any(|c| (0..4).all(|r| ms.m_iif.get(r, c) == 0.0));
        assert!(has_zero_col);
    }

    #[test]
    fn iif_forecast_branch_zeroes_tail() {
        let m = Matrix::filled(3, 9, 1.0);
        for seed in 0..50 {
            let ms = iif_mask_with(&m, 0.1, 0.9, &mut ChaCha8Rng::seed_from_u64(seed));
            assert!((0..3).all(|r| ms.m_iif.get(r, 8) == 0.0));
        }
    }

    #[test]
    fn iif_branch_boundaries() {
        // p = 1/3 exactly stays imputation-only; p = 2/3 is the forecasting branch
        let m = Matrix::filled(2, 12, 1.0);
        let ms = iif_mask_with(&m, 0.1, 1.0 / 3.0, &mut rng());
        assert_eq!(zeros_introduced(&ms), 2);
        let ms = iif_mask_with(&m, 0.1, 2.0 / 3.0, &mut rng());
        assert!((0..2).all(|r| ms.m_iif.get(r, 11) == 0.0));
    }

    #[test]
    fn all_zero_mask_stays_zero() {
        let m = Matrix::zeros(3, 5);
        assert_eq!(iif_mask(&m, &mut rng()).m_iif, m);
        assert_eq!(imputation_mask(&m, &mut rng()).m_iif, m);
        assert_eq!(interpolation_mask(&m, &mut rng()).m_iif, m);
    }

    #[test]
    fn imputation_counts() {
        let m = Matrix::filled(10, 10, 1.0);
        assert_eq!(zeros_introduced(&imputation_mask_with(&m, 0.1, &mut rng())), 10);
        let m = Matrix::filled(2, 5, 1.0);
        assert_eq!(zeros_introduced(&imputation_mask_with(&m, 0.9, &mut rng())), 9);
    }

    #[test]
    fn history_branches() {
        let m = Matrix::from_fn(3, 4, |r, c| ((r + c) % 2) as f64);
        let ms = history_mask_with(&m, &m, 0.2, &mut rng()).unwrap();
        assert_eq!(ms.m_iif, m);
        let ms = history_mask_with(&m, &Matrix::zeros(3, 4), 0.2, &mut rng()).unwrap();
        assert_eq!(ms.m_iif, Matrix::zeros(3, 4));

        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let hist = history_mask_with(&m, &Matrix::zeros(3, 4), 0.9, &mut a).unwrap();
        let imp = imputation_mask(&m, &mut b);
        assert_eq!(hist.m_iif, imp.m_iif);
        assert!(history_mask_with(&m, &Matrix::zeros(2, 4), 0.2, &mut a).is_err());
    }

    #[test]
    fn interpolation_cases() {
        let m = Matrix::filled(3, 5, 1.0);
        let ms = interpolation_mask(&m, &mut rng());
        assert_eq!(zeros_introduced(&ms), 3);
        let col = (0..5).find(|&c| ms.m_iif.get(0, c) == 0.0).unwrap();
        assert!((0..3).all(|r| ms.m_iif.get(r, col) == 0.0));
        let single = Matrix::filled(2, 1, 1.0);
        assert_eq!(interpolation_mask(&single, &mut rng()).m_iif, Matrix::zeros(2, 1));
    }

    #[test]
    fn forecasting_cases() {
        let m = Matrix::filled(2, 192, 1.0);
        let ms = forecasting_mask(&m, 24).unwrap();
        for c in 0..192 {
            let expect = if c >= 168 { 0.0 } else { 1.0 };
            assert!((0..2).all(|r| ms.m_iif.get(r, c) == expect));
        }
        assert_eq!(forecasting_mask(&m, 192).unwrap().m_iif, Matrix::zeros(2, 192));
        assert!(forecasting_mask(&m, 0).is_err());
        assert!(forecasting_mask(&m, 193).is_err());
    }

    #[test]
    fn split_cases() {
        let ones = Matrix::filled(2, 3, 1.0);
        let full = MaskSet {
            m: ones.clone(),
            m_iif: ones.clone(),
            kind: MaskKind::Imputation,
        };
        let (obs, msk) = split(&ones, &full).unwrap();
        assert_eq!(obs, ones);
        assert_eq!(msk, Matrix::zeros(2, 3));

        let x = Matrix::from_fn(2, 3, |r, c| r as f64 - c as f64 + 0.5);
        let m = Matrix::from_fn(2, 3, |r, c| ((r + c) % 2) as f64);
        let none = MaskSet {
            m: m.clone(),
            m_iif: Matrix::zeros(2, 3),
            kind: MaskKind::Imputation,
        };
        let (obs, msk) = split(&x, &none).unwrap();
        assert_eq!(obs, Matrix::zeros(2, 3));
        assert_eq!(msk, x.zip_map(&m, |a, b| a * b));
    }

    #[test]
    fn mask_kind_parses() {
        assert_eq!("IIF".parse::<MaskKind>().unwrap(), MaskKind::Iif);
        assert_eq!("forecasting".parse::<MaskKind>().unwrap(), MaskKind::Forecasting);
        assert!("nope".parse::<MaskKind>().is_err());
    }
}
