//! Shared time-series data model, percent scaling, fit metrics and k-fold
//! partitioning.
//!
//! Every stage of the pipeline exchanges [`TimeSeriesDataset`]s. Channels are
//! stored column-wise in insertion order; models that need a dense matrix call
//! [`TimeSeriesDataset::to_matrix`].

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DT_TOLERANCE: f64 = 1e-12;

/// Side information carried with a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Sample interval in hours.
    pub dt: f64,
    /// Start index of every episode (the first entry is always 0).
    pub episode_starts: Vec<usize>,
    pub seed: u64,
}

/// Uniformly sampled multichannel time series.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    pub t: Vec<f64>,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    pub meta: DatasetMeta,
}

impl TimeSeriesDataset {
    /// Builds a dataset and checks the column/time invariants.
    ///
    /// Episode boundaries restart the clock, so the uniform-step check is
    /// applied within episodes only.
    pub fn new(
        t: Vec<f64>,
        names: Vec<String>,
        columns: Vec<Vec<f64>>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::Dimension(format!(
                "{} channel names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        for (name, col) in names.iter().zip(&columns) {
            if col.len() != t.len() {
                return Err(Error::Dimension(format!(
                    "channel {name} has {} samples, time axis has {}",
                    col.len(),
                    t.len()
                )));
            }
        }
        if !(meta.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", meta.dt)));
        }
        if meta.episode_starts.windows(2).any(|w| w[0] >= w[1])
            || meta.episode_starts.iter().any(|&s| s >= t.len().max(1))
        {
            return Err(Error::Config("episode boundaries must be sorted and in range".into()));
        }
        let ds = Self {
            t,
            names,
            columns,
            meta,
        };
        for (a, b) in ds.episode_ranges() {
            for k in a + 1..b {
                let step = ds.t[k] - ds.t[k - 1];
                if (step - ds.meta.dt).abs() > DT_TOLERANCE * ds.t[k].abs().max(1.0) {
                    return Err(Error::Config(format!(
                        "non-uniform sampling at index {k}: step {step} vs dt {}",
                        ds.meta.dt
                    )));
                }
            }
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
    }

    pub fn columns(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.columns.iter().map(Vec::as_slice))
    }

    /// Half-open `[start, end)` sample ranges, one per episode.
    pub fn episode_ranges(&self) -> Vec<(usize, usize)> {
        let mut starts = self.meta.episode_starts.clone();
        if starts.first() != Some(&0) {
            starts.insert(0, 0);
        }
        let mut out = Vec::with_capacity(starts.len());
        for (i, &s) in starts.iter().enumerate() {
            let e = starts.get(i + 1).copied().unwrap_or(self.len());
            out.push((s, e));
        }
        out
    }

    /// Dense `N_s × n` matrix of the named channels, in the given order.
    pub fn to_matrix(&self, channels: &[String]) -> Result<DMatrix<f64>> {
        let cols = channels
            .iter()
            .map(|c| {
                self.column(c)
                    .ok_or_else(|| Error::Config(format!("dataset has no channel {c}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_fn(self.len(), cols.len(), |i, j| cols[j][i]))
    }

    /// Contiguous sample slice `[start, end)` with episode boundaries rebased.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::Config(format!(
                "invalid slice {start}..{end} of {} samples",
                self.len()
            )));
        }
        let mut starts: Vec<usize> = self
            .episode_ranges()
            .into_iter()
            .filter(|&(a, b)| b > start && a < end)
            .map(|(a, _)| a.max(start) - start)
            .collect();
        starts.dedup();
        Self::new(
            self.t[start..end].to_vec(),
            self.names.clone(),
            self.columns.iter().map(|c| c[start..end].to_vec()).collect(),
            DatasetMeta {
                dt: self.meta.dt,
                episode_starts: starts,
                seed: self.meta.seed,
            },
        )
    }

    /// Returns a copy whose listed channels are replaced by `f(name, value)`.
    fn map_channels(&self, mut f: impl FnMut(&str, f64) -> Result<f64>) -> Result<Self> {
        let mut columns = Vec::with_capacity(self.columns.len());
        for (name, col) in self.names.iter().zip(&self.columns) {
            columns.push(col.iter().map(|&v| f(name, v)).collect::<Result<Vec<_>>>()?);
        }
        Ok(Self {
            t: self.t.clone(),
            names: self.names.clone(),
            columns,
            meta: self.meta.clone(),
        })
    }

    /// Writes `t_hours,<channel>,...` CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t_hours".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        let mut row = Vec::with_capacity(header.len());
        for k in 0..self.len() {
            row.clear();
            row.push(fmt_f64(self.t[k]));
            row.extend(self.columns.iter().map(|c| fmt_f64(c[k])));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Reads the CSV layout written by [`Self::write_csv`].
    ///
    /// `meta` supplies the episode boundaries and seed; when `None`, a single
    /// episode is assumed and `dt` is taken from the first two samples.
    pub fn read_csv<R: Read>(reader: R, meta: Option<DatasetMeta>) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.get(0) != Some("t_hours") {
            return Err(Error::Config("CSV header must start with t_hours".into()));
        }
        let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut t = Vec::new();
        let mut columns = vec![Vec::new(); names.len()];
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad number {s:?} in CSV")))
            };
            t.push(parse(&rec[0])?);
            for (j, col) in columns.iter_mut().enumerate() {
                col.push(parse(&rec[j + 1])?);
            }
        }
        let meta = match meta {
            Some(m) => m,
            None => DatasetMeta {
                dt: if t.len() >= 2 { t[1] - t[0] } else { 1.0 },
                episode_starts: vec![0],
                seed: 0,
            },
        };
        Self::new(t, names, columns, meta)
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn read_csv_file(path: &Path, meta: Option<DatasetMeta>) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(f, meta)
    }
}

/// Shortest round-trip decimal representation.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Native-unit range that maps onto 0–100 %.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelRange {
    pub min: f64,
    pub max: f64,
}

/// Per-channel percent scaling, frozen at training time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScalingSpec {
    pub channels: BTreeMap<String, ChannelRange>,
}

impl ScalingSpec {
    pub fn insert(&mut self, name: impl Into<String>, min: f64, max: f64) -> Result<()> {
        let name = name.into();
        if !(max > min) {
            return Err(Error::Config(format!(
                "channel {name}: max {max} must exceed min {min}"
            )));
        }
        self.channels.insert(name, ChannelRange { min, max });
        Ok(())
    }

    /// Empirical min/max of every channel in `data`. Constant channels get a
    /// unit-wide range centred on their value.
    pub fn from_data(data: &TimeSeriesDataset) -> Self {
        let mut spec = Self::default();
        for (name, col) in data.columns() {
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (lo, hi) = if hi - lo > 1e-12 * lo.abs().max(1.0) {
                (lo, hi)
            } else {
                (lo - 0.5, lo + 0.5)
            };
            spec.channels
                .insert(name.to_string(), ChannelRange { min: lo, max: hi });
        }
        spec
    }

    pub fn range(&self, name: &str) -> Result<ChannelRange> {
        self.channels
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("scaling spec has no entry for channel {name}")))
    }

    pub fn scale_value(&self, name: &str, v: f64) -> Result<f64> {
        let r = self.range(name)?;
        Ok(100.0 * (v - r.min) / (r.max - r.min))
    }

    pub fn unscale_value(&self, name: &str, v: f64) -> Result<f64> {
        let r = self.range(name)?;
        Ok(r.min + v / 100.0 * (r.max - r.min))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in &self.channels {
            if !(r.max > r.min) {
                return Err(Error::Config(format!(
                    "channel {name}: max {} must exceed min {}",
                    r.max, r.min
                )));
            }
        }
        Ok(())
    }
}

/// Maps every channel onto 0–100 % without clipping.
pub fn scale_to_percent(series: &TimeSeriesDataset, spec: &ScalingSpec) -> Result<TimeSeriesDataset> {
    series.map_channels(|name, v| spec.scale_value(name, v))
}

/// Inverse of [`scale_to_percent`].
pub fn unscale_from_percent(
    series: &TimeSeriesDataset,
    spec: &ScalingSpec,
) -> Result<TimeSeriesDataset> {
    series.map_channels(|name, v| spec.unscale_value(name, v))
}

/// Mean squared error averaged over samples and channels.
pub fn compute_mse(reference: &DMatrix<f64>, estimate: &DMatrix<f64>) -> Result<f64> {
    if reference.shape() != estimate.shape() {
        return Err(Error::Dimension(format!(
            "reference {:?} vs estimate {:?}",
            reference.shape(),
            estimate.shape()
        )));
    }
    if reference.is_empty() {
        return Err(Error::Dimension("MSE needs at least one sample".into()));
    }
    let sum: f64 = reference
        .iter()
        .zip(estimate.iter())
        .map(|(r, e)| (r - e) * (r - e))
        .sum();
    Ok(sum / reference.len() as f64)
}

/// Normalized fit `1 − ‖ref − est‖² / ‖ref − mean(ref)‖²`.
pub fn compute_nmse(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::Dimension(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.len() < 2 {
        return Err(Error::Dimension("NMSE needs at least two samples".into()));
    }
    let mean = reference.iter().sum::<f64>() / reference.len() as f64;
    let denom: f64 = reference.iter().map(|r| (r - mean) * (r - mean)).sum();
    let scale = reference.iter().map(|r| r.abs()).fold(0.0, f64::max).max(1.0);
    if denom <= (1e-14 * scale).powi(2) * reference.len() as f64 {
        return Err(Error::DegenerateSignal(
            "reference signal is constant, NMSE undefined".into(),
        ));
    }
    let num: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(r, e)| (r - e) * (r - e))
        .sum();
    Ok(1.0 - num / denom)
}

/// Random partition of sample indices into `k` folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<Vec<usize>>,
    pub seed: u64,
}

impl FoldPlan {
    /// Indices outside fold `i`, ascending.
    pub fn training_indices(&self, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .assignments
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Shuffles `0..n_samples` with a seeded stream and deals it into `k` folds
/// whose sizes differ by at most one (larger folds first).
pub fn kfold_partition(n_samples: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || k > n_samples {
        return Err(Error::Config(format!(
            "fold count k = {k} must satisfy 2 <= k <= n_samples = {n_samples}"
        )));
    }
    let mut idx: Vec<usize> = (0..n_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let base = n_samples / k;
    let extra = n_samples % k;
    let mut assignments = Vec::with_capacity(k);
    let mut pos = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut fold = idx[pos..pos + size].to_vec();
        fold.sort_unstable();
        assignments.push(fold);
        pos += size;
    }
    Ok(FoldPlan {
        k,
        assignments,
        seed,
    })
}

/// Selects rows of `x` by index.
pub fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(values: Vec<f64>) -> TimeSeriesDataset {
        let n = values.len();
        TimeSeriesDataset::new(
            (0..n).map(|k| k as f64 * 0.1).collect(),
            vec!["prod".into()],
            vec![values],
            DatasetMeta {
                dt: 0.1,
                episode_starts: vec![0],
                seed: 0,
            },
        )
        .unwrap()
    }

    fn spec() -> ScalingSpec {
        let mut s = ScalingSpec::default();
        s.insert("prod", 16.0, 24.0).unwrap();
        s
    }

    #[test]
    fn scale_maps_range_endpoints_and_midpoint() {
        let scaled = scale_to_percent(&ds(vec![16.0, 24.0, 20.0, 28.0]), &spec()).unwrap();
        assert_eq!(scaled.column("prod").unwrap(), &[0.0, 100.0, 50.0, 150.0]);
    }

    #[test]
    fn unscale_maps_percent_back() {
        let back = unscale_from_percent(&ds(vec![0.0, 100.0]), &spec()).unwrap();
        assert_eq!(back.column("prod").unwrap(), &[16.0, 24.0]);
    }

    #[test]
    fn missing_channel_is_named() {
        let err = scale_to_percent(&ds(vec![1.0]), &ScalingSpec::default()).unwrap_err();
        assert!(err.to_string().contains("prod"), "{err}");
    }

    #[test]
    fn scaling_spec_rejects_inverted_range() {
        let mut s = ScalingSpec::default();
        assert!(s.insert("a", 2.0, 2.0).is_err());
    }

    #[test]
    fn mse_examples() {
        let z = DMatrix::<f64>::zeros(3, 4);
        let o = DMatrix::<f64>::from_element(3, 4, 1.0);
        assert_eq!(compute_mse(&z, &z).unwrap(), 0.0);
        assert_eq!(compute_mse(&z, &o).unwrap(), 1.0);
        let r = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 0.0]);
        let e = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(compute_mse(&r, &e).unwrap(), 1.25);
        assert!(matches!(
            compute_mse(&z, &DMatrix::zeros(2, 4)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn nmse_examples() {
        let r = [1.0, 3.0, 2.0, 5.0];
        assert_eq!(compute_nmse(&r, &r).unwrap(), 1.0);
        let mean = [2.75; 4];
        assert!(compute_nmse(&r, &mean).unwrap().abs() < 1e-15);
        assert_eq!(compute_nmse(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), -3.0);
        assert!(matches!(
            compute_nmse(&[4.0, 4.0, 4.0], &[1.0, 2.0, 3.0]),
            Err(Error::DegenerateSignal(_))
        ));
    }

    #[test]
    fn kfold_examples() {
        let p = kfold_partition(10, 5, 3).unwrap();
        assert!(p.assignments.iter().all(|f| f.len() == 2));
        let p = kfold_partition(7, 5, 3).unwrap();
        let sizes: Vec<usize> = p.assignments.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 2, 1, 1, 1]);
        assert_eq!(kfold_partition(7, 5, 3).unwrap(), p);
        assert!(kfold_partition(4, 1, 0).is_err());
        assert!(kfold_partition(4, 5, 0).is_err());
    }

    #[test]
    fn csv_round_trip_preserves_values() {
        let d = ds(vec![16.25, 1.0 / 3.0, -2e-17]);
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t_hours,prod\n"));
        let back = TimeSeriesDataset::read_csv(buf.as_slice(), Some(d.meta.clone())).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn scaling_spec_json_layout() {
        let json = serde_json::to_string(&spec()).unwrap();
        assert_eq!(json, r#"{"prod":{"min":16.0,"max":24.0}}"#);
    }

    #[test]
    fn slice_rebases_episodes() {
        let mut d = ds((0..10).map(f64::from).collect());
        d.meta.episode_starts = vec![0, 5];
        d.t = (0..10).map(|k| (k % 5) as f64 * 0.1).collect();
        let s = d.slice(3, 8).unwrap();
        assert_eq!(s.meta.episode_starts, vec![0, 2]);
        assert_eq!(s.column("prod").unwrap(), &[3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn scale_unscale_round_trip(v in -1e6f64..1e6, lo in -1e3f64..1e3, w in 1e-3f64..1e4) {
                let mut s = ScalingSpec::default();
                s.insert("c", lo, lo + w).unwrap();
                let back = s.unscale_value("c", s.scale_value("c", v).unwrap()).unwrap();
                prop_assert!((back - v).abs() <= 1e-10 * v.abs().max(lo.abs() + w));
            }

            #[test]
            fn nmse_affine_invariant(
                r in proptest::collection::vec(-10f64..10.0, 5..40),
                noise in proptest::collection::vec(-1f64..1.0, 40),
                a in 0.01f64..100.0,
                b in -50f64..50.0,
            ) {
                let e: Vec<f64> = r.iter().zip(&noise).map(|(x, n)| x + n).collect();
                prop_assume!(compute_nmse(&r, &e).is_ok());
                let base = compute_nmse(&r, &e).unwrap();
                let r2: Vec<f64> = r.iter().map(|x| a * x + b).collect();
                let e2: Vec<f64> = e.iter().map(|x| a * x + b).collect();
                let moved = compute_nmse(&r2, &e2).unwrap();
                prop_assert!((base - moved).abs() <= 1e-8 * base.abs().max(1.0));
            }

            #[test]
            fn mse_nonnegative_zero_iff_equal(
                a in proptest::collection::vec(-5f64..5.0, 12),
                b in proptest::collection::vec(-5f64..5.0, 12),
            ) {
                let ra = DMatrix::from_vec(3, 4, a.clone());
                let rb = DMatrix::from_vec(3, 4, b.clone());
                let m = compute_mse(&ra, &rb).unwrap();
                prop_assert!(m >= 0.0);
                prop_assert_eq!(m == 0.0, a == b);
            }

            #[test]
            fn folds_partition_samples(n in 2usize..300, k in 2usize..12, seed in 0u64..1000) {
                prop_assume!(k <= n);
                let p = kfold_partition(n, k, seed).unwrap();
                let mut all: Vec<usize> = p.assignments.iter().flatten().copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                let sizes: Vec<usize> = p.assignments.iter().map(Vec::len).collect();
                prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            }
        }
    }
}
