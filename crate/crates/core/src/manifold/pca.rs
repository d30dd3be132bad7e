//! Principal component analysis on 0–100 % scaled data.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `n_v × n_v`, one orthonormal component per column, descending variance.
    #[serde(with = "super::serde_matrix")]
    pub components: DMatrix<f64>,
    /// Variance of each component (population normalization).
    pub eigenvalues: Vec<f64>,
    /// Percent of total variance per component.
    pub variance_explained: Vec<f64>,
    pub p: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Encode,
    Decode,
}

/// Eigendecomposition of the population covariance of `x`, keeping `p`
/// components for projection.
pub fn fit_pca(x: &DMatrix<f64>, p: usize) -> Result<PcaModel> {
    let (n_s, n_v) = x.shape();
    if n_v == 0 || n_s <= n_v {
        return Err(Error::Dimension(format!(
            "PCA needs more samples than variables, got {n_s}×{n_v}"
        )));
    }
    if p == 0 || p > n_v {
        return Err(Error::Config(format!("latent dimension {p} outside 1..={n_v}")));
    }
    let mean: Vec<f64> = (0..n_v).map(|j| x.column(j).mean()).collect();
    let mut centered = x.clone();
    for j in 0..n_v {
        centered.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let cov = centered.tr_mul(&centered) / n_s as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n_v).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let mut components = DMatrix::zeros(n_v, n_v);
    for (dst, &src) in order.iter().enumerate() {
        let mut col: DVector<f64> = eig.eigenvectors.column(src).into_owned();
        // Sign convention: largest-magnitude entry positive.
        let pivot = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            col.neg_mut();
        }
        components.set_column(dst, &col);
    }
    let total: f64 = eigenvalues.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateSignal("PCA input has zero total variance".into()));
    }
    let variance_explained = eigenvalues.iter().map(|l| 100.0 * l / total).collect();
    Ok(PcaModel {
        mean,
        components,
        eigenvalues,
        variance_explained,
        p,
    })
}

impl PcaModel {
    pub fn n_in(&self) -> usize {
        self.mean.len()
    }

    /// Same decomposition with a different retained count.
    pub fn with_p(&self, p: usize) -> Result<Self> {
        if p == 0 || p > self.n_in() {
            return Err(Error::Config(format!("latent dimension {p} outside 1..={}", self.n_in())));
        }
        Ok(Self { p, ..self.clone() })
    }

    fn retained(&self) -> DMatrix<f64> {
        self.components.columns(0, self.p).into_owned()
    }

    pub fn encode(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        pca_transform(self, x, Direction::Encode)
    }

    pub fn decode(&self, phi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        pca_transform(self, phi, Direction::Decode)
    }

    /// Total variance not captured by the retained components.
    pub fn discarded_variance(&self) -> f64 {
        self.eigenvalues[self.p..].iter().sum()
    }
}

/// Projection onto (`Encode`) or reconstruction from (`Decode`) the retained
/// components.
pub fn pca_transform(model: &PcaModel, x: &DMatrix<f64>, direction: Direction) -> Result<DMatrix<f64>> {
    let v = model.retained();
    match direction {
        Direction::Encode => {
            if x.ncols() != model.n_in() {
                return Err(Error::Dimension(format!(
                    "PCA encode expects {} columns, got {}",
                    model.n_in(),
                    x.ncols()
                )));
            }
            let mut centered = x.clone();
            for j in 0..model.n_in() {
                centered.column_mut(j).add_scalar_mut(-model.mean[j]);
            }
            Ok(centered * v)
        }
        Direction::Decode => {
            if x.ncols() != model.p {
                return Err(Error::Dimension(format!(
                    "PCA decode expects {} columns, got {}",
                    model.p,
                    x.ncols()
                )));
            }
            let mut out = x * v.transpose();
            for j in 0..model.n_in() {
                out.column_mut(j).add_scalar_mut(model.mean[j]);
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::compute_mse;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn points_on_a_line_have_one_component() {
        let x = DMatrix::from_fn(50, 2, |i, j| i as f64 * if j == 0 { 1.0 } else { 2.0 } + 3.0);
        let m = fit_pca(&x, 1).unwrap();
        assert!((m.variance_explained[0] - 100.0).abs() < 1e-9);
        assert!(m.variance_explained[1].abs() < 1e-9);
    }

    #[test]
    fn full_rank_round_trip_is_identity() {
        let x = gaussian(200, 5, 1) * 10.0;
        let m = fit_pca(&x, 5).unwrap();
        let back = m.decode(&m.encode(&x).unwrap()).unwrap();
        assert!((back - &x).abs().max() < 1e-10);
    }

    #[test]
    fn isotropic_sample_splits_variance_evenly() {
        let m = fit_pca(&gaussian(10_000, 3, 2), 3).unwrap();
        for v in &m.variance_explained {
            assert!((v - 100.0 / 3.0).abs() < 2.0, "{:?}", m.variance_explained);
        }
    }

    #[test]
    fn encode_mean_is_zero() {
        let x = gaussian(100, 4, 3);
        let m = fit_pca(&x, 2).unwrap();
        let mean = DMatrix::from_row_slice(1, 4, &m.mean);
        assert!(m.encode(&mean).unwrap().abs().max() < 1e-12);
    }

    #[test]
    fn reconstruction_error_equals_discarded_variance() {
        let mix = DMatrix::from_fn(6, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + if i == j { 3.0 } else { 0.0 });
        let x = gaussian(2000, 6, 4) * mix;
        for p in 1..=6 {
            let m = fit_pca(&x, p).unwrap();
            let rec = m.decode(&m.encode(&x).unwrap()).unwrap();
            let mse = compute_mse(&x, &rec).unwrap();
            let total: f64 = m.eigenvalues.iter().sum();
            let discarded: f64 = m.variance_explained[p..].iter().sum::<f64>() * total / 100.0;
            assert!((mse - discarded / 6.0).abs() < 1e-8, "p={p}: {mse} vs {}", discarded / 6.0);
        }
    }

    #[test]
    fn components_orthonormal_and_ordered() {
        let x = gaussian(500, 7, 5) * DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 1.0, 3.0, 0.5, 2.0, 4.0, 0.1]));
        let m = fit_pca(&x, 3).unwrap();
        let gram = m.components.tr_mul(&m.components);
        assert!((gram - DMatrix::identity(7, 7)).abs().max() < 1e-10);
        assert!(m.variance_explained.windows(2).all(|w| w[0] >= w[1]));
        assert!((m.variance_explained.iter().sum::<f64>() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn rank_deficient_input_puts_zero_variance_last() {
        let base = gaussian(300, 2, 6);
        let x = DMatrix::from_fn(300, 3, |i, j| if j < 2 { base[(i, j)] } else { base[(i, 0)] + base[(i, 1)] });
        let m = fit_pca(&x, 2).unwrap();
        assert!(m.variance_explained[2].abs() < 1e-9);
    }

    #[test]
    fn dimension_errors() {
        let x = gaussian(20, 3, 7);
        let m = fit_pca(&x, 2).unwrap();
        assert!(matches!(m.encode(&gaussian(2, 4, 8)), Err(Error::Dimension(_))));
        assert!(matches!(m.decode(&gaussian(2, 3, 8)), Err(Error::Dimension(_))));
        assert!(fit_pca(&gaussian(3, 3, 9), 1).is_err());
    }
}
