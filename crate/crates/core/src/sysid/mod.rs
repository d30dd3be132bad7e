//! Hammerstein–Wiener identification of latent-variable dynamics.
//!
//! Each model is a static input map `H`, a discrete linear state-space core
//! `(A, B, C)` and a static output map `W`:
//!
//! ```text
//! h_k = H(u_k),   r_{k+1} = A r_k + B h_k,   w_k = C r_k,   y_k = W(w_k)
//! ```
//!
//! Models are fitted on simulation error, so they can be rolled out over long
//! horizons inside the scheduling optimizer.

pub mod blocks;
mod fit;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use blocks::{BlockKind, StaticBlock};
pub use fit::{fit_hw, search_structure, FitOptions, NaicRow, SearchGrid, SearchMode, Structure};

use crate::data::{compute_nmse, DatasetMeta};
use crate::error::{Error, Result};
use crate::manifold::serde_matrix;

/// Discrete-time linear core at a fixed sample interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSsCore {
    #[serde(with = "serde_matrix")]
    pub a: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub b: DMatrix<f64>,
    /// Output row `C` (length `n_d`).
    pub c: Vec<f64>,
    /// Sample interval, hours.
    pub dt: f64,
}

impl LinearSsCore {
    /// Controllable canonical form of `(c_1 + … + c_n q^{-(n-1)}) / (1 + a_1 q^{-1} + … + a_n q^{-n})`
    /// with a single input.
    pub fn companion(den: &[f64], num: &[f64], dt: f64) -> Self {
        let n = den.len();
        let mut a = DMatrix::zeros(n, n);
        for (j, v) in den.iter().enumerate() {
            a[(0, j)] = -v;
        }
        for i in 1..n {
            a[(i, i - 1)] = 1.0;
        }
        let mut b = DMatrix::zeros(n, 1);
        b[(0, 0)] = 1.0;
        Self {
            a,
            b,
            c: num.to_vec(),
            dt,
        }
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.a)
    }

    /// State satisfying `r = A r + B h`.
    pub fn steady_state(&self, h: &[f64]) -> Result<DVector<f64>> {
        let n = self.order();
        let lhs = DMatrix::identity(n, n) - &self.a;
        let rhs = &self.b * DVector::from_column_slice(h);
        lhs.lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Config("linear core has a pole at z = 1".into()))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.order();
        if self.a.ncols() != n || self.b.nrows() != n || self.c.len() != n {
            return Err(Error::Dimension("inconsistent A/B/C shapes".into()));
        }
        Ok(())
    }
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// One Hammerstein–Wiener model (one output, any number of inputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HwModel {
    pub input_channels: Vec<String>,
    pub output_channel: String,
    pub input_blocks: Vec<StaticBlock>,
    pub core: LinearSsCore,
    pub output_block: StaticBlock,
    pub structure: Structure,
    pub training_nmse: f64,
    /// False when refinement could not improve on the least-squares start.
    pub refined: bool,
    /// Times the stability projection fired during fitting.
    pub projections: usize,
}

impl HwModel {
    pub fn n_params(&self) -> usize {
        self.structure.n_params()
    }

    fn inputs_to_h(&self, u: &[f64]) -> Vec<f64> {
        self.input_blocks.iter().zip(u).map(|(b, v)| b.eval(*v)).collect()
    }

    /// Core state at rest under constant inputs `u`.
    pub fn rest_state(&self, u: &[f64]) -> Result<DVector<f64>> {
        self.core.steady_state(&self.inputs_to_h(u))
    }

    /// Output at rest under constant inputs `u`.
    pub fn rest_output(&self, u: &[f64]) -> Result<f64> {
        let r = self.rest_state(u)?;
        Ok(self.output_block.eval(dot(&self.core.c, r.as_slice())))
    }

    /// Rolls the model forward from rest at `u_init`, reporting the output
    /// after each input sample is applied.
    pub fn rollout_from_rest(&self, u: &[Vec<f64>], u_init: &[f64]) -> Result<Vec<f64>> {
        let n = self.core.order();
        let (a, b) = (&self.core.a, &self.core.b);
        let mut r = self.rest_state(u_init)?.as_slice().to_vec();
        let mut next = vec![0.0; n];
        let mut out = Vec::with_capacity(u.len());
        for (k, uk) in u.iter().enumerate() {
            let h = self.inputs_to_h(uk);
            for (i, slot) in next.iter_mut().enumerate() {
                let mut v = 0.0;
                for j in 0..n {
                    v += a[(i, j)] * r[j];
                }
                for (j, hj) in h.iter().enumerate() {
                    v += b[(i, j)] * hj;
                }
                *slot = v;
            }
            std::mem::swap(&mut r, &mut next);
            let y = self.output_block.eval(dot(&self.core.c, &r));
            if !y.is_finite() {
                return Err(Error::SimulationDiverged { step: k });
            }
            out.push(y);
        }
        Ok(out)
    }

    /// Single-input convenience wrapper over [`Self::rollout_from_rest`].
    pub fn rollout_siso(&self, u: &[f64], u_init: f64) -> Result<Vec<f64>> {
        let rows: Vec<Vec<f64>> = u.iter().map(|v| vec![*v]).collect();
        self.rollout_from_rest(&rows, &[u_init])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Plain simulation from core state `r0`: `y_k = W(C r_k)` with
/// `r_{k+1} = A r_k + B H(u_k)`; output length equals input length.
pub fn simulate_hw(model: &HwModel, u: &[Vec<f64>], r0: &[f64]) -> Result<Vec<f64>> {
    if r0.len() != model.core.order() {
        return Err(Error::Dimension(format!(
            "initial state has {} entries, core order is {}",
            r0.len(),
            model.core.order()
        )));
    }
    let mut r = DVector::from_column_slice(r0);
    let mut out = Vec::with_capacity(u.len());
    for (k, uk) in u.iter().enumerate() {
        if uk.len() != model.input_blocks.len() {
            return Err(Error::Dimension(format!(
                "input sample {k} has {} channels, model expects {}",
                uk.len(),
                model.input_blocks.len()
            )));
        }
        let y = model.output_block.eval(dot(&model.core.c, r.as_slice()));
        if !y.is_finite() {
            return Err(Error::SimulationDiverged { step: k });
        }
        out.push(y);
        let h = DVector::from_vec(model.inputs_to_h(uk));
        r = &model.core.a * &r + &model.core.b * h;
    }
    Ok(out)
}

/// Normalized Akaike criterion `ln(mse) + 2·n_params / n_samples`.
pub fn compute_naic(mse_sim: f64, n_params: usize, n_samples: usize) -> Result<f64> {
    if !(mse_sim > 0.0) {
        return Err(Error::Config(format!("nAIC needs a positive MSE, got {mse_sim}")));
    }
    if n_samples == 0 {
        return Err(Error::Config("nAIC needs at least one sample".into()));
    }
    Ok(mse_sim.ln() + 2.0 * n_params as f64 / n_samples as f64)
}

/// Input/output record that starts from rest at `u_init`.
///
/// `y[k]` is the output observed after `u[k]` has been applied for one
/// sample interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub u_init: f64,
}

/// Splits aligned series into per-episode segments restricted to `[start, end)`.
pub fn segments_from_episodes(
    u: &[f64],
    y: &[f64],
    episodes: &[(usize, usize)],
    start: usize,
    end: usize,
    u_init: f64,
) -> Vec<Segment> {
    episodes
        .iter()
        .filter_map(|&(a, b)| {
            let (a, b) = (a.max(start), b.min(end));
            (b > a).then(|| Segment {
                u: u[a..b].to_vec(),
                y: y[a..b].to_vec(),
                u_init,
            })
        })
        .collect()
}

/// Train/test fit quality for one latent channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmseRow {
    pub channel: String,
    pub structure: String,
    pub train_nmse: f64,
    pub test_nmse: f64,
}

/// One Hammerstein–Wiener model per latent variable, all driven by the
/// production setpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbmBundle {
    pub models: Vec<HwModel>,
    pub p: usize,
    pub input_channel: String,
    pub dt: f64,
    /// Setpoint at which every episode starts from rest.
    pub nominal_input: f64,
    /// First sample index of the held-out span.
    pub split_index: usize,
    /// SHA-256 of the training slice (latents and input) that was used.
    pub training_checksum: String,
    pub nmse: Vec<NmseRow>,
    pub avg_train_nmse: f64,
    pub avg_test_nmse: f64,
    pub manifold_hash: String,
    pub search_tables: Vec<Vec<NaicRow>>,
}

impl SbmBundle {
    /// Differential states carried by a shooting rollout.
    pub fn state_count(&self) -> usize {
        self.models.iter().map(|m| m.core.order()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SysidOptions {
    pub grid: SearchGrid,
    pub fit: FitOptions,
    /// Chronological training fraction.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SysidOptions {
    fn default() -> Self {
        Self {
            grid: SearchGrid::default(),
            fit: FitOptions::default(),
            train_fraction: 0.9,
            seed: 0,
        }
    }
}

fn training_checksum(latents: &DMatrix<f64>, u: &[f64], split: usize) -> String {
    let mut bytes = Vec::with_capacity(split * (latents.ncols() + 1) * 8);
    for k in 0..split {
        bytes.extend_from_slice(&u[k].to_le_bytes());
        for j in 0..latents.ncols() {
            bytes.extend_from_slice(&latents[(k, j)].to_le_bytes());
        }
    }
    crate::io::sha256_hex(&bytes)
}

/// Identifies one model per latent column on the chronological training
/// span and scores it on both spans.
///
/// The split index is snapped down to the nearest episode start so no
/// episode straddles the two spans.
pub fn identify_latent_sbm(
    latents: &DMatrix<f64>,
    y_sp: &[f64],
    meta: &DatasetMeta,
    nominal_input: f64,
    input_channel: &str,
    manifold_hash: &str,
    opts: &SysidOptions,
) -> Result<SbmBundle> {
    let n = latents.nrows();
    if y_sp.len() != n {
        return Err(Error::Dimension(format!("{} latent rows vs {} setpoints", n, y_sp.len())));
    }
    if !(opts.train_fraction > 0.0 && opts.train_fraction < 1.0) {
        return Err(Error::Config("train fraction must lie in (0, 1)".into()));
    }
    let probe = crate::data::TimeSeriesDataset::new(
        (0..n).map(|k| (k + 1) as f64 * meta.dt).collect(),
        vec![],
        vec![],
        meta.clone(),
    )?;
    let episodes = probe.episode_ranges();
    let target = (opts.train_fraction * n as f64).round() as usize;
    let split = episodes
        .iter()
        .map(|e| e.0)
        .filter(|&s| s <= target && s > 0)
        .max()
        .unwrap_or(target);
    let p = latents.ncols();
    let names: Vec<String> = (0..p).map(|i| format!("phi{}", i + 1)).collect();

    let fitted = (0..p)
        .into_par_iter()
        .map(|i| {
            let y: Vec<f64> = latents.column(i).iter().copied().collect();
            let train = segments_from_episodes(y_sp, &y, &episodes, 0, split, nominal_input);
            let test = segments_from_episodes(y_sp, &y, &episodes, split, n, nominal_input);
            let seed = opts.seed.wrapping_add(i as u64 * 7919);
            let (best, table) = search_structure(&train, &opts.grid, seed, &opts.fit)?;
            let mut model = fit_hw(&train, &best, seed, &opts.fit)?;
            model.input_channels = vec![input_channel.to_string()];
            model.output_channel = names[i].clone();
            let test_nmse = segments_nmse(&model, &test)?;
            Ok((model, table, test_nmse))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut models = Vec::with_capacity(p);
    let mut tables = Vec::with_capacity(p);
    let mut rows = Vec::with_capacity(p);
    for (i, (model, table, test_nmse)) in fitted.into_iter().enumerate() {
        rows.push(NmseRow {
            channel: names[i].clone(),
            structure: model.structure.label(),
            train_nmse: model.training_nmse,
            test_nmse,
        });
        models.push(model);
        tables.push(table);
    }
    let avg = |f: fn(&NmseRow) -> f64| rows.iter().map(f).sum::<f64>() / p as f64;
    Ok(SbmBundle {
        p,
        input_channel: input_channel.to_string(),
        dt: meta.dt,
        nominal_input,
        split_index: split,
        training_checksum: training_checksum(latents, y_sp, split),
        avg_train_nmse: avg(|r| r.train_nmse),
        avg_test_nmse: avg(|r| r.test_nmse),
        nmse: rows,
        manifold_hash: manifold_hash.to_string(),
        search_tables: tables,
        models,
    })
}

/// NMSE of the concatenated segment rollouts against the recorded outputs.
pub fn segments_nmse(model: &HwModel, segments: &[Segment]) -> Result<f64> {
    let mut reference = Vec::new();
    let mut estimate = Vec::new();
    for s in segments {
        reference.extend_from_slice(&s.y);
        estimate.extend(model.rollout_siso(&s.u, s.u_init)?);
    }
    compute_nmse(&reference, &estimate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_model(a: f64, b: f64, c: f64) -> HwModel {
        let mut core = LinearSsCore::companion(&[-a], &[c], 0.1);
        core.b[(0, 0)] = b;
        HwModel {
            input_channels: vec!["u".into()],
            output_channel: "y".into(),
            input_blocks: vec![StaticBlock::Identity],
            core,
            output_block: StaticBlock::Identity,
            structure: Structure {
                input: BlockKind::Identity,
                order: 1,
                output: BlockKind::Identity,
            },
            training_nmse: 1.0,
            refined: true,
            projections: 0,
        }
    }

    #[test]
    fn first_order_geometric_response() {
        let m = linear_model(0.5, 1.0, 1.0);
        let u = vec![vec![1.0]; 12];
        let y = simulate_hw(&m, &u, &[0.0]).unwrap();
        for (k, v) in y.iter().enumerate() {
            let expect = 2.0 * (1.0 - 0.5f64.powi(k as i32));
            assert!((v - expect).abs() < 1e-12, "k={k}: {v} vs {expect}");
        }
        assert_eq!(&y[..4], &[0.0, 1.0, 1.5, 1.75]);
    }

    #[test]
    fn zero_input_zero_output() {
        let mut m = linear_model(0.8, 1.0, 2.0);
        m.input_blocks = vec![StaticBlock::Poly { coeffs: vec![0.0, 1.0, 0.3] }];
        m.output_block = StaticBlock::Pwl { lo: -1.0, hi: 1.0, values: vec![-2.0, 0.0, 1.0] };
        let y = simulate_hw(&m, &vec![vec![0.0]; 20], &[0.0]).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unused_zero_inputs_do_not_change_output() {
        let m = linear_model(0.7, 1.0, 0.5);
        let mut wide = m.clone();
        wide.core.b = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        wide.input_blocks.push(StaticBlock::Identity);
        let u: Vec<Vec<f64>> = (0..15).map(|k| vec![(k as f64 * 0.4).sin()]).collect();
        let u2: Vec<Vec<f64>> = u.iter().map(|r| vec![r[0], 0.0]).collect();
        assert_eq!(simulate_hw(&m, &u, &[0.2]).unwrap(), simulate_hw(&wide, &u2, &[0.2]).unwrap());
    }

    #[test]
    fn identity_blocks_reduce_to_linear_state_space() {
        let core = LinearSsCore::companion(&[-1.2, 0.5, -0.08], &[0.3, -0.1, 0.05], 0.1);
        let mut m = linear_model(0.0, 1.0, 1.0);
        m.core = core.clone();
        let u: Vec<Vec<f64>> = (0..50).map(|k| vec![((k * 7) % 5) as f64 - 2.0]).collect();
        let y = simulate_hw(&m, &u, &[0.1, -0.2, 0.3]).unwrap();
        let mut r = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        for (k, uk) in u.iter().enumerate() {
            let lin = core.c.iter().zip(r.iter()).map(|(a, b)| a * b).sum::<f64>();
            assert!((y[k] - lin).abs() < 1e-12);
            r = &core.a * &r + &core.b * DVector::from_vec(uk.clone());
        }
    }

    #[test]
    fn naic_examples() {
        assert_eq!(compute_naic(1.0, 0, 100).unwrap(), 0.0);
        assert!((compute_naic(std::f64::consts::E, 0, 7).unwrap() - 1.0).abs() < 1e-15);
        assert!(compute_naic(0.5, 4, 100).unwrap() > compute_naic(0.5, 3, 100).unwrap());
        assert!(compute_naic(0.0, 1, 10).is_err());
    }

    #[test]
    fn rollout_from_rest_holds_steady_state() {
        let core = LinearSsCore::companion(&[-0.9, 0.2], &[0.4, 0.1], 0.1);
        let mut m = linear_model(0.0, 1.0, 1.0);
        m.core = core;
        m.input_blocks = vec![StaticBlock::Pwl { lo: 0.0, hi: 2.0, values: vec![0.0, 1.0, 3.0] }];
        let rest = m.rest_output(&[1.5]).unwrap();
        let y = m.rollout_siso(&[1.5; 30], 1.5).unwrap();
        assert!(y.iter().all(|v| (v - rest).abs() < 1e-12));
    }

    #[test]
    fn spectral_radius_of_companion() {
        // Roots 0.5 and 0.8.
        let core = LinearSsCore::companion(&[-1.3, 0.4], &[1.0, 0.0], 0.1);
        assert!((core.spectral_radius() - 0.8).abs() < 1e-12);
    }
}
