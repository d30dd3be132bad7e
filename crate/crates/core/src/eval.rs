//! Plant replay of schedules, decoded-channel accuracy and report bundles.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{compute_nmse, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::io::{write_atomic, write_json};
use crate::manifold::ManifoldModel;
use crate::plant::{AugmentedRecord, ClosedLoop, PlantParams, AUGMENTED_CHANNELS, DELTA_T, FLOODING, IMPURITY, STORAGE};
use crate::schedopt::{cost_from_power, ScheduleProblem, ScheduleSolution, SolverLog};
use crate::sysid::{segments_from_episodes, SbmBundle};

/// Limits a replay is checked against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub impurity_max: f64,
    pub delta_t_min: f64,
    pub flooding_max: f64,
    pub storage_min: f64,
    pub storage_max: f64,
    /// Minimum final storage.
    pub endpoint_min: f64,
}

impl Limits {
    /// Hard process limits.
    pub fn physical(problem: &ScheduleProblem) -> Self {
        Self {
            impurity_max: 2000.0,
            delta_t_min: 1.9,
            flooding_max: 100.0,
            storage_min: 0.0,
            storage_max: problem.storage_capacity,
            endpoint_min: problem.initial_storage,
        }
    }

    /// The tightened limits the optimizer worked with.
    pub fn backed_off(problem: &ScheduleProblem) -> Self {
        Self {
            impurity_max: problem.impurity_max,
            delta_t_min: problem.delta_t_min,
            flooding_max: problem.flooding_max,
            storage_min: 0.0,
            storage_max: problem.storage_capacity,
            endpoint_min: problem.initial_storage + problem.endpoint_margin,
        }
    }
}

/// One contiguous excursion of a channel beyond a limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub channel: String,
    /// `upper`, `lower` or `endpoint`.
    pub kind: String,
    pub bound: f64,
    pub t_start: f64,
    pub t_end: f64,
    /// Time of the worst sample.
    pub t_worst: f64,
    /// Largest distance beyond the bound, native units.
    pub magnitude: f64,
}

/// Realized trajectory: the initial record followed by every post-step sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replay {
    pub t: Vec<f64>,
    /// Rows in [`AUGMENTED_CHANNELS`] order.
    pub x: Vec<[f64; 10]>,
}

impl Replay {
    fn from_records(initial: &AugmentedRecord, records: &[AugmentedRecord]) -> Self {
        let all = std::iter::once(initial).chain(records);
        Self {
            t: all.clone().map(|r| r.t).collect(),
            x: all.map(|r| r.augmented()).collect(),
        }
    }

    pub fn channel(&self, name: &str) -> Result<Vec<f64>> {
        let j = AUGMENTED_CHANNELS
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Config(format!("unknown channel {name}")))?;
        Ok(self.x.iter().map(|r| r[j]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub setpoints: Vec<f64>,
    pub prices: Vec<f64>,
    pub replay: Replay,
    pub baseline_replay: Replay,
    pub realized_cost: f64,
    pub baseline_realized_cost: f64,
    /// `100·(baseline − realized)/baseline`.
    pub savings_percent: f64,
    pub predicted_cost: f64,
    /// `|predicted − realized| / realized`.
    pub prediction_error: f64,
    pub physical_limits: Limits,
    pub backoff_limits: Limits,
    pub violations: Vec<Violation>,
    pub backoff_violations: Vec<Violation>,
    pub params_hash: String,
}

impl ValidationReport {
    pub fn physically_feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Contiguous excursions of `values` beyond `bound` (`upper` when `upper`).
fn excursions(channel: &str, t: &[f64], values: &[f64], bound: f64, upper: bool) -> Vec<Violation> {
    let beyond = |v: f64| if upper { v - bound } else { bound - v };
    let mut out = Vec::new();
    let mut open: Option<Violation> = None;
    for (&tk, &v) in t.iter().zip(values) {
        let d = beyond(v);
        if d > 0.0 {
            let e = open.get_or_insert_with(|| Violation {
                channel: channel.into(),
                kind: if upper { "upper" } else { "lower" }.into(),
                bound,
                t_start: tk,
                t_end: tk,
                t_worst: tk,
                magnitude: d,
            });
            e.t_end = tk;
            if d > e.magnitude {
                e.magnitude = d;
                e.t_worst = tk;
            }
        } else if let Some(e) = open.take() {
            out.push(e);
        }
    }
    out.extend(open);
    out
}

/// Exhaustive excursion ledger of a replay against `limits`.
pub fn violation_ledger(replay: &Replay, limits: &Limits) -> Result<Vec<Violation>> {
    let t = &replay.t;
    let m = replay.channel(STORAGE)?;
    let mut out = Vec::new();
    out.extend(excursions(IMPURITY, t, &replay.channel(IMPURITY)?, limits.impurity_max, true));
    out.extend(excursions(DELTA_T, t, &replay.channel(DELTA_T)?, limits.delta_t_min, false));
    out.extend(excursions(FLOODING, t, &replay.channel(FLOODING)?, limits.flooding_max, true));
    out.extend(excursions(STORAGE, t, &m, limits.storage_min, false));
    out.extend(excursions(STORAGE, t, &m, limits.storage_max, true));
    let (tf, mf) = (*t.last().unwrap(), *m.last().unwrap());
    if mf < limits.endpoint_min {
        out.push(Violation {
            channel: STORAGE.into(),
            kind: "endpoint".into(),
            bound: limits.endpoint_min,
            t_start: tf,
            t_end: tf,
            t_worst: tf,
            magnitude: limits.endpoint_min - mf,
        });
    }
    Ok(out)
}

fn replay(params: &PlantParams, setpoints: &[f64], prices: &[f64]) -> Result<(Replay, f64)> {
    let mut plant = ClosedLoop::nominal(params);
    let initial = plant.current_record(params.nominal_setpoint, prices.first().copied().unwrap_or(0.0));
    let records = plant.run_hourly(setpoints, prices)?;
    let power: Vec<f64> = records.iter().map(|r| r.power).collect();
    let cost = cost_from_power(&power, prices, params.dt)?;
    Ok((Replay::from_records(&initial, &records), cost))
}

/// Replays `solution` on the plant from its nominal state and prices it
/// against the constant nominal schedule. `params_hash` is the plant hash
/// recorded by the campaign the models were trained on.
pub fn validate_on_plant(
    solution: &ScheduleSolution,
    problem: &ScheduleProblem,
    params: &PlantParams,
    params_hash: &str,
) -> Result<ValidationReport> {
    let actual = params.hash();
    if actual != params_hash {
        return Err(Error::Provenance(format!(
            "plant parameters hash {actual} differs from campaign hash {params_hash}"
        )));
    }
    problem.validate()?;
    let prices = problem.prices[..problem.horizon_hours].to_vec();
    let (run, realized_cost) = replay(params, &solution.setpoints, &prices)?;
    let baseline = vec![params.nominal_setpoint; problem.horizon_hours];
    let (base, baseline_realized_cost) = replay(params, &baseline, &prices)?;
    let physical_limits = Limits::physical(problem);
    let backoff_limits = Limits::backed_off(problem);
    Ok(ValidationReport {
        setpoints: solution.setpoints.clone(),
        violations: violation_ledger(&run, &physical_limits)?,
        backoff_violations: violation_ledger(&run, &backoff_limits)?,
        savings_percent: 100.0 * (baseline_realized_cost - realized_cost) / baseline_realized_cost,
        prediction_error: (solution.cost - realized_cost).abs() / realized_cost.abs(),
        predicted_cost: solution.cost,
        prices,
        replay: run,
        baseline_replay: base,
        realized_cost,
        baseline_realized_cost,
        physical_limits,
        backoff_limits,
        params_hash: actual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelNmse {
    pub channel: String,
    /// Decoded SBM rollout under the recorded setpoints.
    pub sbm: f64,
    /// Decode of the encoded recorded state.
    pub reconstruction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmseTable {
    pub rows: Vec<ChannelNmse>,
    pub average_sbm: f64,
    pub average_reconstruction: f64,
    /// Held-out sample span `[start, end)`.
    pub span: (usize, usize),
}

/// Decoded-channel NMSE on the held-out span of `data`, which must be the
/// campaign the bundle was identified on.
pub fn decoded_channel_nmse(manifold: &ManifoldModel, bundle: &SbmBundle, data: &TimeSeriesDataset) -> Result<NmseTable> {
    let (start, end) = (bundle.split_index, data.len());
    if start == 0 || start >= end {
        return Err(Error::Config(format!("held-out span [{start}, {end}) is empty or overlaps training")));
    }
    if bundle.p != manifold.p() {
        return Err(Error::Dimension(format!("SBM p = {} vs manifold p = {}", bundle.p, manifold.p())));
    }
    let u = data
        .column(&bundle.input_channel)
        .ok_or_else(|| Error::Config(format!("dataset has no input channel {}", bundle.input_channel)))?;
    let recorded = data.to_matrix(&manifold.channels)?;
    let latents = manifold.encode_dataset(data)?;
    let reconstructed = manifold.mapping.decode(&latents)?;

    let episodes = data.episode_ranges();
    let spans: Vec<(usize, usize)> = episodes
        .iter()
        .map(|&(a, b)| (a.max(start), b.min(end)))
        .filter(|(a, b)| b > a)
        .collect();
    let n: usize = spans.iter().map(|(a, b)| b - a).sum();
    let mut phi = DMatrix::zeros(n, bundle.p);
    for (i, model) in bundle.models.iter().enumerate() {
        let y: Vec<f64> = latents.column(i).iter().copied().collect();
        let segs = segments_from_episodes(u, &y, &episodes, start, end, bundle.nominal_input);
        let mut row = 0;
        for s in &segs {
            for v in model.rollout_siso(&s.u, s.u_init)? {
                phi[(row, i)] = v;
                row += 1;
            }
        }
    }
    let predicted = manifold.mapping.decode(&phi)?;

    let mut rows = Vec::with_capacity(manifold.channels.len());
    for (j, c) in manifold.channels.iter().enumerate() {
        let mut reference = Vec::with_capacity(n);
        let mut sbm = Vec::with_capacity(n);
        let mut recon = Vec::with_capacity(n);
        let mut r = 0;
        for &(a, b) in &spans {
            for k in a..b {
                reference.push(recorded[(k, j)]);
                recon.push(manifold.scaling.unscale_value(c, reconstructed[(k, j)])?);
                sbm.push(manifold.scaling.unscale_value(c, predicted[(r, j)])?);
                r += 1;
            }
        }
        rows.push(ChannelNmse {
            channel: c.clone(),
            sbm: compute_nmse(&reference, &sbm)?,
            reconstruction: compute_nmse(&reference, &recon)?,
        });
    }
    let mean = |f: fn(&ChannelNmse) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    Ok(NmseTable {
        average_sbm: mean(|r| r.sbm),
        average_reconstruction: mean(|r| r.reconstruction),
        rows,
        span: (start, end),
    })
}

/// One scheduled and validated scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Run {
    pub label: String,
    pub solution: ScheduleSolution,
    pub validation: ValidationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub setpoints: Vec<f64>,
    pub predicted_cost: f64,
    pub predicted_baseline_cost: f64,
    pub realized_cost: f64,
    pub baseline_realized_cost: f64,
    pub savings_percent: f64,
    pub prediction_error: f64,
    pub feasible_on_sbm: bool,
    pub physically_feasible: bool,
    pub violations: Vec<Violation>,
    pub backoff_violations: Vec<Violation>,
    pub final_storage: f64,
    pub state_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: Vec<RunSummary>,
    pub nmse: Option<NmseTable>,
    /// Artifact hashes, seeds and other provenance.
    pub metadata: BTreeMap<String, String>,
}

impl RunSummary {
    fn from_run(run: &Run) -> Result<Self> {
        let v = &run.validation;
        let m = v.replay.channel(STORAGE)?;
        Ok(Self {
            label: run.label.clone(),
            setpoints: run.solution.setpoints.clone(),
            predicted_cost: run.solution.cost,
            predicted_baseline_cost: run.solution.log.baseline_cost,
            realized_cost: v.realized_cost,
            baseline_realized_cost: v.baseline_realized_cost,
            savings_percent: v.savings_percent,
            prediction_error: v.prediction_error,
            feasible_on_sbm: run.solution.feasible,
            physically_feasible: v.physically_feasible(),
            violations: v.violations.clone(),
            backoff_violations: v.backoff_violations.clone(),
            final_storage: *m.last().unwrap(),
            state_count: run.solution.state_count,
        })
    }
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))
}

fn physical_bound(channel: &str, limits: &Limits) -> Option<f64> {
    match channel {
        IMPURITY => Some(limits.impurity_max),
        DELTA_T => Some(limits.delta_t_min),
        FLOODING => Some(limits.flooding_max),
        _ => None,
    }
}

/// Writes `summary.json`, `nmse.csv`, `violations.csv`, `trajectories.csv`
/// and `solver_log.json` into `dir`. Output depends only on the inputs.
pub fn build_report(
    dir: &Path,
    runs: &[Run],
    nmse: Option<&NmseTable>,
    metadata: &BTreeMap<String, String>,
) -> Result<Summary> {
    if runs.is_empty() {
        return Err(Error::Config("report needs at least one run".into()));
    }
    let summary = Summary {
        runs: runs.iter().map(RunSummary::from_run).collect::<Result<_>>()?,
        nmse: nmse.cloned(),
        metadata: metadata.clone(),
    };
    write_json(&dir.join("summary.json"), &summary)?;

    let nmse_rows: Vec<Vec<String>> = nmse
        .map(|t| {
            t.rows
                .iter()
                .map(|r| vec![r.channel.clone(), r.sbm.to_string(), r.reconstruction.to_string()])
                .chain(std::iter::once(vec![
                    "average".into(),
                    t.average_sbm.to_string(),
                    t.average_reconstruction.to_string(),
                ]))
                .collect()
        })
        .unwrap_or_default();
    write_atomic(&dir.join("nmse.csv"), &csv_bytes(&["channel", "sbm_nmse", "reconstruction_nmse"], nmse_rows)?)?;

    let mut vrows = Vec::new();
    for run in runs {
        for (ledger, v) in [("physical", &run.validation.violations), ("backoff", &run.validation.backoff_violations)] {
            for e in v {
                vrows.push(vec![
                    run.label.clone(),
                    ledger.into(),
                    e.channel.clone(),
                    e.kind.clone(),
                    e.bound.to_string(),
                    e.t_start.to_string(),
                    e.t_end.to_string(),
                    e.t_worst.to_string(),
                    e.magnitude.to_string(),
                ]);
            }
        }
    }
    write_atomic(
        &dir.join("violations.csv"),
        &csv_bytes(
            &["run", "ledger", "channel", "kind", "bound", "t_start", "t_end", "t_worst", "magnitude"],
            vrows,
        )?,
    )?;

    let mut trows = Vec::new();
    for run in runs {
        let traj = &run.solution.trajectory;
        let replay = &run.validation.replay;
        if traj.t.len() != replay.t.len() {
            return Err(Error::Dimension(format!(
                "{} predicted vs {} realized samples",
                traj.t.len(),
                replay.t.len()
            )));
        }
        for (j, c) in AUGMENTED_CHANNELS.iter().enumerate() {
            let predicted = if *c == STORAGE { Some(traj.storage.clone()) } else { traj.channel(c).ok() };
            let bound = physical_bound(c, &run.validation.physical_limits).map(|b| b.to_string()).unwrap_or_default();
            for (k, t) in traj.t.iter().enumerate() {
                trows.push(vec![
                    run.label.clone(),
                    t.to_string(),
                    c.to_string(),
                    predicted.as_ref().map(|p| p[k].to_string()).unwrap_or_default(),
                    replay.x[k][j].to_string(),
                    bound.clone(),
                ]);
            }
        }
    }
    write_atomic(
        &dir.join("trajectories.csv"),
        &csv_bytes(&["run", "t", "channel", "predicted", "actual", "bound"], trows)?,
    )?;

    let logs: BTreeMap<&str, &SolverLog> = runs.iter().map(|r| (r.label.as_str(), &r.solution.log)).collect();
    write_json(&dir.join("solver_log.json"), &logs)?;
    Ok(summary)
}
