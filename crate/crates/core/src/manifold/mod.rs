//! Latent manifold learning: PCA and undercomplete autoencoders.
//!
//! A [`ManifoldModel`] bundles a fitted mapping with the channel order and
//! the percent scaling it was trained under, so callers can move between
//! native units and latent coordinates.

pub mod autoencoder;
pub mod pca;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use autoencoder::{train_autoencoder, Architecture, AutoencoderModel, AutoencoderSpec, TrainingHyper};
pub use pca::{fit_pca, pca_transform, Direction, PcaModel};

use crate::data::{compute_mse, kfold_partition, select_rows, ScalingSpec, TimeSeriesDataset};
use crate::error::{Error, Result};

pub(crate) mod serde_matrix {
    //! Row-major nested-array encoding for dense matrices.
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(serde::de::Error::custom("ragged matrix"));
        }
        Ok(DMatrix::from_row_iterator(n, m, rows.into_iter().flatten()))
    }
}

/// How to learn the mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Method {
    Pca { p: usize },
    Autoencoder { arch: Architecture, p: usize },
}

impl Method {
    pub fn p(&self) -> usize {
        match *self {
            Method::Pca { p } | Method::Autoencoder { p, .. } => p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Mapping {
    Pca(PcaModel),
    Autoencoder(AutoencoderModel),
}

impl Mapping {
    pub fn p(&self) -> usize {
        match self {
            Mapping::Pca(m) => m.p,
            Mapping::Autoencoder(m) => m.spec.p,
        }
    }

    pub fn n_in(&self) -> usize {
        match self {
            Mapping::Pca(m) => m.n_in(),
            Mapping::Autoencoder(m) => m.spec.n_in,
        }
    }

    /// Fits on 0–100 % scaled rows.
    pub fn fit(x: &DMatrix<f64>, method: Method, hyper: &TrainingHyper) -> Result<Self> {
        match method {
            Method::Pca { p } => Ok(Mapping::Pca(fit_pca(x, p)?)),
            Method::Autoencoder { arch, p } => {
                let spec = AutoencoderSpec::new(arch, x.ncols(), p)?;
                Ok(Mapping::Autoencoder(train_autoencoder(x, &spec, hyper)?))
            }
        }
    }

    pub fn encode(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Mapping::Pca(m) => m.encode(x),
            Mapping::Autoencoder(m) => m.encode(x),
        }
    }

    pub fn decode(&self, phi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Mapping::Pca(m) => m.decode(phi),
            Mapping::Autoencoder(m) => m.decode(phi),
        }
    }

    pub fn encode_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Mapping::Pca(m) => Ok(m.encode(&DMatrix::from_row_slice(1, x.len(), x))?.iter().copied().collect()),
            Mapping::Autoencoder(m) => m.encode_row(x),
        }
    }

    pub fn decode_row(&self, phi: &[f64]) -> Result<Vec<f64>> {
        match self {
            Mapping::Pca(m) => Ok(m.decode(&DMatrix::from_row_slice(1, phi.len(), phi))?.iter().copied().collect()),
            Mapping::Autoencoder(m) => m.decode_row(phi),
        }
    }

    /// Reconstruction MSE of `x` (squared percent).
    pub fn reconstruction_mse(&self, x: &DMatrix<f64>) -> Result<f64> {
        compute_mse(x, &self.decode(&self.encode(x)?)?)
    }
}

/// Fitted mapping plus the channel order and scaling it expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldModel {
    pub channels: Vec<String>,
    pub scaling: ScalingSpec,
    pub mapping: Mapping,
    /// Reconstruction MSE on the training data, squared percent.
    pub training_mse: f64,
    /// Hash of the dataset the model was trained on.
    pub source_hash: String,
}

impl ManifoldModel {
    /// Freezes min/max scaling from `data` and fits `method` on the listed
    /// channels.
    pub fn fit(
        data: &TimeSeriesDataset,
        channels: &[String],
        method: Method,
        hyper: &TrainingHyper,
        source_hash: String,
    ) -> Result<Self> {
        let mut scaling = ScalingSpec::default();
        let full = ScalingSpec::from_data(data);
        for c in channels {
            scaling.channels.insert(c.clone(), full.range(c)?);
        }
        let x = scaled_matrix(data, channels, &scaling)?;
        let mapping = Mapping::fit(&x, method, hyper)?;
        let training_mse = mapping.reconstruction_mse(&x)?;
        Ok(Self {
            channels: channels.to_vec(),
            scaling,
            mapping,
            training_mse,
            source_hash,
        })
    }

    pub fn p(&self) -> usize {
        self.mapping.p()
    }

    pub fn channel_index(&self, name: &str) -> Result<usize> {
        self.channels
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Config(format!("manifold has no channel {name}")))
    }

    /// Native-unit row → latent coordinates.
    pub fn encode_native(&self, x: &[f64]) -> Result<Vec<f64>> {
        let scaled = self
            .channels
            .iter()
            .zip(x)
            .map(|(c, v)| self.scaling.scale_value(c, *v))
            .collect::<Result<Vec<_>>>()?;
        self.mapping.encode_row(&scaled)
    }

    /// Latent coordinates → native-unit row.
    pub fn decode_native(&self, phi: &[f64]) -> Result<Vec<f64>> {
        let scaled = self.mapping.decode_row(phi)?;
        self.channels
            .iter()
            .zip(scaled)
            .map(|(c, v)| self.scaling.unscale_value(c, v))
            .collect()
    }

    /// Latent trajectory of a dataset (`N × p`).
    pub fn encode_dataset(&self, data: &TimeSeriesDataset) -> Result<DMatrix<f64>> {
        self.mapping.encode(&scaled_matrix(data, &self.channels, &self.scaling)?)
    }
}

/// `N × n` matrix of the listed channels on the 0–100 % scale.
pub fn scaled_matrix(data: &TimeSeriesDataset, channels: &[String], scaling: &ScalingSpec) -> Result<DMatrix<f64>> {
    let mut x = data.to_matrix(channels)?;
    for (j, c) in channels.iter().enumerate() {
        let r = scaling.range(c)?;
        x.column_mut(j)
            .apply(|v| *v = 100.0 * (*v - r.min) / (r.max - r.min));
    }
    Ok(x)
}

/// Mean and sample standard deviation of held-out reconstruction MSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub mean_mse: f64,
    pub std_mse: f64,
    pub fold_mse: Vec<f64>,
    /// Reconstruction MSE on each fold's own training rows.
    pub fold_train_mse: Vec<f64>,
}

/// k-fold cross-validated reconstruction MSE.
///
/// Autoencoders are trained once per seed per fold; the run with the lowest
/// internal validation loss represents the fold.
pub fn cross_validated_mse(
    method: Method,
    x: &DMatrix<f64>,
    k: usize,
    fold_seed: u64,
    seeds: &[u64],
    hyper: &TrainingHyper,
) -> Result<CvResult> {
    let plan = kfold_partition(x.nrows(), k, fold_seed)?;
    if matches!(method, Method::Autoencoder { .. }) && seeds.is_empty() {
        return Err(Error::Config("autoencoder cross-validation needs at least one seed".into()));
    }
    let folds: Vec<(f64, f64)> = (0..k)
        .into_par_iter()
        .map(|f| {
            let train = select_rows(x, &plan.training_indices(f));
            let test = select_rows(x, &plan.assignments[f]);
            let mapping = match method {
                Method::Pca { .. } => Mapping::fit(&train, method, hyper)?,
                Method::Autoencoder { .. } => {
                    let runs = seeds
                        .par_iter()
                        .map(|&s| Mapping::fit(&train, method, &TrainingHyper { seed: s, ..hyper.clone() }))
                        .collect::<Result<Vec<_>>>()?;
                    runs.into_iter()
                        .min_by(|a, b| validation_of(a).total_cmp(&validation_of(b)))
                        .expect("at least one seed")
                }
            };
            Ok((mapping.reconstruction_mse(&test)?, mapping.reconstruction_mse(&train)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let fold_mse: Vec<f64> = folds.iter().map(|f| f.0).collect();
    let mean = fold_mse.iter().sum::<f64>() / k as f64;
    let var = fold_mse.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    Ok(CvResult {
        mean_mse: mean,
        std_mse: var.sqrt(),
        fold_mse,
        fold_train_mse: folds.iter().map(|f| f.1).collect(),
    })
}

fn validation_of(m: &Mapping) -> f64 {
    match m {
        Mapping::Autoencoder(a) => a.best_validation_mse,
        Mapping::Pca(_) => 0.0,
    }
}

/// Adds seeded `Normal(0, sigma_pct²)` noise to every entry.
pub fn corrupt_with_noise(x: &DMatrix<f64>, sigma_pct: f64, seed: u64) -> Result<DMatrix<f64>> {
    if sigma_pct == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, sigma_pct)
        .map_err(|e| Error::Config(format!("invalid noise level {sigma_pct}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Row-major draw order so the noise does not depend on storage layout.
    let mut out = x.clone();
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            out[(i, j)] += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn data(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, 5, |i, j| 50.0 + 20.0 * ((i as f64) * 0.01 * (j + 1) as f64).sin() + rng.random_range(-5.0..5.0))
    }

    #[test]
    fn noise_examples() {
        let x = DMatrix::from_element(200, 50, 40.0);
        assert_eq!(corrupt_with_noise(&x, 0.0, 1).unwrap(), x);
        let noisy = corrupt_with_noise(&x, 5.0, 1).unwrap();
        assert_eq!(noisy, corrupt_with_noise(&x, 5.0, 1).unwrap());
        let diff = &noisy - &x;
        let n = diff.len() as f64;
        let mean = diff.sum() / n;
        let var = diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((23.0..=27.0).contains(&var), "{var}");
    }

    #[test]
    fn pca_cv_full_rank_is_exact_and_monotone() {
        let x = data(300, 1);
        let hyper = TrainingHyper::default();
        let full = cross_validated_mse(Method::Pca { p: 5 }, &x, 5, 0, &[], &hyper).unwrap();
        assert!(full.mean_mse <= 1e-8);
        let mut last = f64::INFINITY;
        for p in 1..=5 {
            let cv = cross_validated_mse(Method::Pca { p }, &x, 5, 0, &[], &hyper).unwrap();
            assert!(cv.mean_mse <= last + 1e-12);
            last = cv.mean_mse;
        }
    }

    #[test]
    fn cv_is_deterministic() {
        let x = data(200, 2);
        let hyper = TrainingHyper { max_epochs: 20, ..Default::default() };
        let m = Method::Autoencoder { arch: Architecture::Tanh2x, p: 2 };
        let a = cross_validated_mse(m, &x, 3, 4, &[1, 2], &hyper).unwrap();
        let b = cross_validated_mse(m, &x, 3, 4, &[1, 2], &hyper).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn manifold_model_round_trips_native_units() {
        let x = data(300, 3);
        let names: Vec<String> = (0..5).map(|j| format!("c{j}")).collect();
        let ds = TimeSeriesDataset::new(
            (0..300).map(|k| (k + 1) as f64 * 0.1).collect(),
            names.clone(),
            (0..5).map(|j| x.column(j).iter().map(|v| v * 0.3 + 7.0).collect()).collect(),
            crate::data::DatasetMeta { dt: 0.1, episode_starts: vec![0], seed: 0 },
        )
        .unwrap();
        let m = ManifoldModel::fit(&ds, &names, Method::Pca { p: 5 }, &TrainingHyper::default(), String::new()).unwrap();
        let row: Vec<f64> = names.iter().map(|c| ds.column(c).unwrap()[10]).collect();
        let back = m.decode_native(&m.encode_native(&row).unwrap()).unwrap();
        for (a, b) in row.iter().zip(back) {
            assert!((a - b).abs() < 1e-9);
        }
        let json = serde_json::to_string(&m).unwrap();
        let again: ManifoldModel = serde_json::from_str(&json).unwrap();
        assert_eq!(again.channels, m.channels);
        assert!((again.training_mse - m.training_mse).abs() < 1e-15);
    }
}
