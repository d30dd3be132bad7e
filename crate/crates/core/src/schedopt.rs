//! Demand-response scheduling in latent space by single shooting.
//!
//! Hourly production setpoints drive the latent models; the decoder maps the
//! latent trajectory back to process variables, storage is integrated from
//! decoded production, and path and endpoint constraints enter a quadratic
//! penalty with escalating weight.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::ManifoldModel;
use crate::plant::{
    samples_per_hour, ClosedLoop, PlantParams, AUGMENTED_CHANNELS, DELTA_T, FLOODING, IMPURITY, POWER, PRODUCTION,
};
use crate::sysid::SbmBundle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleProblem {
    pub horizon_hours: usize,
    pub setpoint_bounds: (f64, f64),
    /// Hourly electricity price, $/MWh.
    pub prices: Vec<f64>,
    pub demand: f64,
    pub storage_capacity: f64,
    pub initial_storage: f64,
    /// Storage at the horizon end must be at least the initial value plus this.
    pub endpoint_margin: f64,
    pub impurity_max: f64,
    pub delta_t_min: f64,
    pub flooding_max: f64,
    pub dt: f64,
    /// mol/s → kmol/h.
    pub storage_conversion: f64,
    /// Setpoint held by the plant before the horizon starts.
    pub nominal_setpoint: f64,
    /// Native augmented record at the start of the horizon, in
    /// [`AUGMENTED_CHANNELS`] order.
    pub initial_record: Vec<f64>,
}

impl Default for ScheduleProblem {
    fn default() -> Self {
        Self::from_plant(&PlantParams::default(), vec![50.0; 48])
    }
}

impl ScheduleProblem {
    /// Problem with back-off limits, starting from the plant's nominal
    /// steady state.
    pub fn from_plant(params: &PlantParams, prices: Vec<f64>) -> Self {
        let start = ClosedLoop::nominal(params).current_record(params.nominal_setpoint, 0.0);
        Self {
            horizon_hours: 48,
            setpoint_bounds: (16.0, 24.0),
            prices,
            demand: params.demand,
            storage_capacity: 200.0,
            initial_storage: params.initial_storage,
            endpoint_margin: 0.0,
            impurity_max: 1800.0,
            delta_t_min: 1.9,
            flooding_max: 95.0,
            dt: params.dt,
            storage_conversion: params.storage_conversion,
            nominal_setpoint: params.nominal_setpoint,
            initial_record: start.augmented().to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.setpoint_bounds;
        if !(lo < hi) {
            return Err(Error::Config(format!("setpoint bounds [{lo}, {hi}] are empty")));
        }
        if self.horizon_hours == 0 || self.prices.len() < self.horizon_hours {
            return Err(Error::Config(format!(
                "{} prices for a {}-hour horizon",
                self.prices.len(),
                self.horizon_hours
            )));
        }
        if self.prices.iter().any(|p| !p.is_finite()) {
            return Err(Error::Config("prices must be finite".into()));
        }
        if !(self.storage_capacity > 0.0) || !(0.0..=self.storage_capacity).contains(&self.initial_storage) {
            return Err(Error::Config("initial storage outside [0, capacity]".into()));
        }
        samples_per_hour(self.dt)?;
        Ok(())
    }

    pub fn steps(&self) -> Result<usize> {
        Ok(self.horizon_hours * samples_per_hour(self.dt)?)
    }
}

/// 150 $/MWh during hours 10–19 and 34–43, 50 $/MWh otherwise.
pub fn two_tier_prices(hours: usize) -> Vec<f64> {
    (0..hours)
        .map(|h| if (10..20).contains(&h) || (34..44).contains(&h) { 150.0 } else { 50.0 })
        .collect()
}

/// Predicted trajectories at the sampling interval, `t = 0` included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbmTrajectory {
    pub t: Vec<f64>,
    /// Row per sample.
    pub phi: Vec<Vec<f64>>,
    pub channels: Vec<String>,
    /// Decoded native process variables, row per sample.
    pub x: Vec<Vec<f64>>,
    /// Storage integrated from decoded production, kmol.
    pub storage: Vec<f64>,
}

impl SbmTrajectory {
    pub fn channel(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .channels
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Config(format!("trajectory has no channel {name}")))?;
        Ok(self.x.iter().map(|r| r[j]).collect())
    }
}

/// Precomputed pieces of the shooting rollout.
struct Shooter<'a> {
    bundle: &'a SbmBundle,
    manifold: &'a ManifoldModel,
    problem: &'a ScheduleProblem,
    phi0: Vec<f64>,
    /// Added to each model output so the rollout starts exactly at `phi0`.
    latent_bias: Vec<f64>,
    /// Added to decoded rows so that `phi0` decodes to the initial record.
    decode_offset: Vec<f64>,
    prod: usize,
    per_hour: usize,
    steps: usize,
}

impl<'a> Shooter<'a> {
    fn new(bundle: &'a SbmBundle, manifold: &'a ManifoldModel, problem: &'a ScheduleProblem) -> Result<Self> {
        problem.validate()?;
        if bundle.p != manifold.p() || bundle.models.len() != bundle.p {
            return Err(Error::Dimension(format!(
                "SBM has {} latent models, manifold has p = {}",
                bundle.models.len(),
                manifold.p()
            )));
        }
        if problem.initial_record.len() != AUGMENTED_CHANNELS.len() {
            return Err(Error::Dimension("initial record must hold every augmented channel".into()));
        }
        let x0 = manifold
            .channels
            .iter()
            .map(|c| {
                AUGMENTED_CHANNELS
                    .iter()
                    .position(|a| a == c)
                    .map(|i| problem.initial_record[i])
                    .ok_or_else(|| Error::Config(format!("manifold channel {c} is not an augmented channel")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let phi0 = manifold.encode_native(&x0)?;
        let nominal = [bundle.nominal_input];
        let latent_bias = bundle
            .models
            .iter()
            .zip(&phi0)
            .map(|(m, p)| Ok(p - m.rest_output(&nominal)?))
            .collect::<Result<Vec<_>>>()?;
        let decoded0 = manifold.decode_native(&phi0)?;
        let decode_offset = x0.iter().zip(&decoded0).map(|(a, b)| a - b).collect();
        Ok(Self {
            bundle,
            manifold,
            problem,
            phi0,
            latent_bias,
            decode_offset,
            prod: manifold.channel_index(PRODUCTION)?,
            per_hour: samples_per_hour(problem.dt)?,
            steps: problem.steps()?,
        })
    }

    fn simulate(&self, setpoints: &[f64]) -> Result<SbmTrajectory> {
        let p = self.bundle.p;
        if setpoints.len() != self.problem.horizon_hours {
            return Err(Error::Dimension(format!(
                "{} setpoints for a {}-hour horizon",
                setpoints.len(),
                self.problem.horizon_hours
            )));
        }
        let n = self.steps;
        let u: Vec<f64> = (0..n).map(|k| setpoints[k / self.per_hour]).collect();
        let mut phi = DMatrix::zeros(n + 1, p);
        for (i, m) in self.bundle.models.iter().enumerate() {
            phi[(0, i)] = self.phi0[i];
            let y = m.rollout_siso(&u, self.bundle.nominal_input)?;
            for (k, v) in y.into_iter().enumerate() {
                phi[(k + 1, i)] = v + self.latent_bias[i];
            }
        }
        let scaled = self.manifold.mapping.decode(&phi)?;
        let mut x = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let row = self
                .manifold
                .channels
                .iter()
                .enumerate()
                .map(|(j, c)| Ok(self.manifold.scaling.unscale_value(c, scaled[(k, j)])? + self.decode_offset[j]))
                .collect::<Result<Vec<f64>>>()?;
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::SimulationDiverged { step: k });
            }
            x.push(row);
        }
        let mut storage = Vec::with_capacity(n + 1);
        let mut m = self.problem.initial_storage;
        storage.push(m);
        for row in &x[..n] {
            m += self.problem.storage_conversion * (row[self.prod] - self.problem.demand) * self.problem.dt;
            storage.push(m);
        }
        Ok(SbmTrajectory {
            t: (0..=n).map(|k| k as f64 * self.problem.dt).collect(),
            phi: (0..=n).map(|k| phi.row(k).iter().copied().collect()).collect(),
            channels: self.manifold.channels.clone(),
            x,
            storage,
        })
    }
}

/// Zero-order-hold rollout of hourly `setpoints` through the latent models
/// and decoder, starting from the encoded initial record.
pub fn simulate_sbm_schedule(
    bundle: &SbmBundle,
    manifold: &ManifoldModel,
    problem: &ScheduleProblem,
    setpoints: &[f64],
) -> Result<SbmTrajectory> {
    Shooter::new(bundle, manifold, problem)?.simulate(setpoints)
}

/// `Σ price·power·dt` over post-step power samples; `power[k]` closes
/// interval `k`, priced at the hour that interval starts in.
pub fn cost_from_power(power: &[f64], prices: &[f64], dt: f64) -> Result<f64> {
    let per_hour = samples_per_hour(dt)?;
    Ok(power.iter().enumerate().map(|(k, pw)| prices[k / per_hour] * pw * dt).sum())
}

/// Electricity cost in dollars of a predicted trajectory.
pub fn schedule_cost(traj: &SbmTrajectory, prices: &[f64], dt: f64) -> Result<f64> {
    let power = traj.channel(POWER)?;
    cost_from_power(&power[1..], prices, dt)
}

/// Worst-case signed margins; positive is slack, negative is violation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub impurity: f64,
    pub delta_t: f64,
    pub flooding: f64,
    pub storage_min: f64,
    pub storage_max: f64,
    pub endpoint: f64,
}

impl Margins {
    pub fn as_array(&self) -> [f64; 6] {
        [self.impurity, self.delta_t, self.flooding, self.storage_min, self.storage_max, self.endpoint]
    }

    pub const NAMES: [&'static str; 6] = ["impurity", "delta_t", "flooding", "storage_min", "storage_max", "endpoint"];
}

/// Per-sample signed margins of every constraint, in native units.
struct MarginSeries {
    path: [Vec<f64>; 5],
    endpoint: f64,
}

fn margin_series(traj: &SbmTrajectory, problem: &ScheduleProblem) -> Result<MarginSeries> {
    let imp = traj.channel(IMPURITY)?;
    let dtc = traj.channel(DELTA_T)?;
    let fr = traj.channel(FLOODING)?;
    let m0 = traj.storage[0];
    let mf = *traj.storage.last().unwrap();
    Ok(MarginSeries {
        path: [
            imp.iter().map(|v| problem.impurity_max - v).collect(),
            dtc.iter().map(|v| v - problem.delta_t_min).collect(),
            fr.iter().map(|v| problem.flooding_max - v).collect(),
            traj.storage.clone(),
            traj.storage.iter().map(|v| problem.storage_capacity - v).collect(),
        ],
        endpoint: mf - m0 - problem.endpoint_margin,
    })
}

pub fn constraint_violations(traj: &SbmTrajectory, problem: &ScheduleProblem) -> Result<Margins> {
    let s = margin_series(traj, problem)?;
    let worst = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Margins {
        impurity: worst(&s.path[0]),
        delta_t: worst(&s.path[1]),
        flooding: worst(&s.path[2]),
        storage_min: worst(&s.path[3]),
        storage_max: worst(&s.path[4]),
        endpoint: s.endpoint,
    })
}

/// Scale per constraint so margins become fractions of each variable's span.
fn margin_scales(manifold: &ManifoldModel, problem: &ScheduleProblem) -> Result<[f64; 6]> {
    let span = |c: &str| manifold.scaling.range(c).map(|r| r.max - r.min);
    let cap = problem.storage_capacity;
    Ok([span(IMPURITY)?, span(DELTA_T)?, span(FLOODING)?, cap, cap, cap])
}

pub fn scaled_margins(m: &Margins, scales: &[f64; 6]) -> [f64; 6] {
    let a = m.as_array();
    std::array::from_fn(|i| a[i] / scales[i])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub penalty_weights: Vec<f64>,
    /// Forward-difference step, mol/s.
    pub fd_step: f64,
    pub max_inner: usize,
    pub rel_tol: f64,
    /// Scaled margin above which a constraint counts as satisfied.
    pub feasibility_tol: f64,
    /// Extra perturbed starting points (0 disables multi-start).
    pub multistart: usize,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            penalty_weights: vec![1e2, 1e3, 1e4, 1e5, 1e6],
            fd_step: 1e-3,
            max_inner: 200,
            rel_tol: 1e-6,
            feasibility_tol: 1e-3,
            multistart: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub start: usize,
    pub weight: f64,
    pub objective_before: f64,
    pub objective_after: f64,
    pub inner_iterations: usize,
    pub cost: f64,
    pub worst_scaled_margin: f64,
    /// Penalized objective after each accepted inner step.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverLog {
    pub outer: Vec<OuterRecord>,
    pub evaluations: usize,
    pub baseline_cost: f64,
    pub baseline_feasible: bool,
    /// True when the constant baseline beat every optimized candidate.
    pub kept_baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSolution {
    pub setpoints: Vec<f64>,
    pub trajectory: SbmTrajectory,
    pub cost: f64,
    pub margins: Margins,
    pub scaled_margins: [f64; 6],
    pub feasible: bool,
    pub state_count: usize,
    pub log: SolverLog,
}

struct Evaluator<'a> {
    shooter: Shooter<'a>,
    scales: [f64; 6],
}

struct Point {
    cost: f64,
    violation: f64,
    worst: f64,
}

impl Evaluator<'_> {
    fn point(&self, sp: &[f64]) -> Result<Point> {
        let traj = self.shooter.simulate(sp)?;
        let cost = schedule_cost(&traj, &self.shooter.problem.prices, self.shooter.problem.dt)?;
        let s = margin_series(&traj, self.shooter.problem)?;
        let mut violation = 0.0;
        let mut worst = s.endpoint / self.scales[5];
        for (series, scale) in s.path.iter().zip(&self.scales) {
            for m in series {
                let v = m / scale;
                worst = worst.min(v);
                if v < 0.0 {
                    violation += v * v;
                }
            }
        }
        let e = s.endpoint / self.scales[5];
        if e < 0.0 {
            violation += e * e;
        }
        Ok(Point { cost, violation, worst })
    }

    fn objective(&self, sp: &[f64], mu: f64) -> Result<f64> {
        let p = self.point(sp)?;
        Ok(p.cost + mu * p.violation)
    }
}

fn project(x: &mut [f64], (lo, hi): (f64, f64)) {
    for v in x {
        *v = v.clamp(lo, hi);
    }
}

/// Forward differences, stepping backwards at the upper bound.
fn gradient(ev: &Evaluator, x: &[f64], f0: f64, mu: f64, h: f64, evals: &mut usize) -> Result<Vec<f64>> {
    let hi = ev.shooter.problem.setpoint_bounds.1;
    *evals += x.len();
    (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut xp = x.to_vec();
            let step = if x[i] + h <= hi { h } else { -h };
            xp[i] += step;
            Ok((ev.objective(&xp, mu)? - f0) / step)
        })
        .collect()
}

/// Projected BFGS on the box; returns the final point, its objective, the
/// iteration count and the accepted-objective history.
fn inner_solve(
    ev: &Evaluator,
    x0: Vec<f64>,
    mu: f64,
    opts: &SolverOptions,
    evals: &mut usize,
) -> Result<(Vec<f64>, f64, usize, Vec<f64>)> {
    let bounds = ev.shooter.problem.setpoint_bounds;
    let n = x0.len();
    let mut x = x0;
    project(&mut x, bounds);
    let mut f = ev.objective(&x, mu)?;
    *evals += 1;
    let mut g = gradient(ev, &x, f, mu, opts.fd_step, evals)?;
    let mut hinv: Option<DMatrix<f64>> = None;
    let mut history = vec![f];
    let mut iters = 0;
    while iters < opts.max_inner {
        iters += 1;
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= bounds.0 && g[i] > 0.0) || (x[i] >= bounds.1 && g[i] < 0.0)))
            .collect();
        let gmax = (0..n).filter(|&i| free[i]).map(|i| g[i].abs()).fold(0.0f64, f64::max);
        if gmax < 1e-10 {
            break;
        }
        let mut d = vec![0.0; n];
        if let Some(h) = &hinv {
            for i in (0..n).filter(|&i| free[i]) {
                d[i] = -(0..n).filter(|&j| free[j]).map(|j| h[(i, j)] * g[j]).sum::<f64>();
            }
        }
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if hinv.is_none() || slope >= 0.0 {
            // Steepest descent scaled to a 1 mol/s largest move.
            for i in 0..n {
                d[i] = if free[i] { -g[i] / gmax } else { 0.0 };
            }
            hinv = None;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
            project(&mut xn, bounds);
            let decrease: f64 = xn.iter().zip(&x).zip(&g).map(|((a, b), gi)| (a - b) * gi).sum();
            let fn_ = ev.objective(&xn, mu)?;
            *evals += 1;
            if fn_ < f && fn_ <= f + 1e-4 * decrease {
                accepted = Some((xn, fn_));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fn_)) = accepted else {
            if hinv.is_some() {
                hinv = None;
                continue;
            }
            break;
        };
        let gn = gradient(ev, &xn, fn_, mu, opts.fd_step, evals)?;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        if sy > 1e-12 * (ss * yy).sqrt() && sy > 0.0 {
            let h = hinv.take().unwrap_or_else(|| DMatrix::identity(n, n) * (sy / yy));
            let sv = nalgebra::DVector::from_vec(s);
            let yv = nalgebra::DVector::from_vec(y);
            let rho = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            let updated = &h - (&hy * sv.transpose() + &sv * hy.transpose()) * rho
                + &sv * sv.transpose() * (rho * rho * yhy + rho);
            hinv = Some(updated);
        }
        let rel = (f - fn_) / f.abs().max(1e-12);
        x = xn;
        f = fn_;
        g = gn;
        history.push(f);
        if rel < opts.rel_tol {
            break;
        }
    }
    Ok((x, f, iters, history))
}

/// Constant-setpoint schedule at the nominal rate.
pub fn baseline_setpoints(problem: &ScheduleProblem) -> Vec<f64> {
    vec![problem.nominal_setpoint; problem.horizon_hours]
}

/// Predicted cost of holding the nominal setpoint over the horizon.
pub fn baseline_constant_cost(bundle: &SbmBundle, manifold: &ManifoldModel, problem: &ScheduleProblem) -> Result<f64> {
    let traj = simulate_sbm_schedule(bundle, manifold, problem, &baseline_setpoints(problem))?;
    schedule_cost(&traj, &problem.prices, problem.dt)
}

/// Single-shooting solve from `initial` (the nominal constant schedule
/// when `None`). Returns the cheapest SBM-feasible candidate, or the
/// least-violating one flagged infeasible.
pub fn optimize_schedule(
    bundle: &SbmBundle,
    manifold: &ManifoldModel,
    problem: &ScheduleProblem,
    initial: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<ScheduleSolution> {
    let ev = Evaluator {
        shooter: Shooter::new(bundle, manifold, problem)?,
        scales: margin_scales(manifold, problem)?,
    };
    let baseline = baseline_setpoints(problem);
    let x0 = initial.map(<[f64]>::to_vec).unwrap_or_else(|| baseline.clone());
    if x0.len() != problem.horizon_hours {
        return Err(Error::Dimension("initial schedule length differs from horizon".into()));
    }
    let mut evals = 1;
    let base = ev.point(&baseline)?;
    let baseline_feasible = base.worst >= -opts.feasibility_tol;

    let mut starts = vec![x0.clone()];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let jitter = Normal::new(0.0, 1.0).unwrap();
    for _ in 0..opts.multistart {
        let mut x: Vec<f64> = x0.iter().map(|v| v + jitter.sample(&mut rng)).collect();
        project(&mut x, problem.setpoint_bounds);
        starts.push(x);
    }

    // (cost, setpoints) of the best feasible; (violation, cost, setpoints) of the least infeasible.
    let mut best_feasible: Option<(f64, Vec<f64>)> = baseline_feasible.then(|| (base.cost, baseline.clone()));
    let mut least_bad: (f64, f64, Vec<f64>) = (base.violation, base.cost, baseline.clone());
    let mut outer = Vec::new();
    for (si, start) in starts.into_iter().enumerate() {
        let mut x = start;
        for &mu in &opts.penalty_weights {
            let before = ev.objective(&x, mu)?;
            evals += 1;
            let (xn, after, iters, history) = inner_solve(&ev, x, mu, opts, &mut evals)?;
            if after > before {
                return Err(Error::Config("penalized objective increased within an outer iteration".into()));
            }
            let pt = ev.point(&xn)?;
            evals += 1;
            if pt.worst >= -opts.feasibility_tol && best_feasible.as_ref().map_or(true, |b| pt.cost < b.0) {
                best_feasible = Some((pt.cost, xn.clone()));
            }
            if (pt.violation, pt.cost) < (least_bad.0, least_bad.1) {
                least_bad = (pt.violation, pt.cost, xn.clone());
            }
            outer.push(OuterRecord {
                start: si,
                weight: mu,
                objective_before: before,
                objective_after: after,
                inner_iterations: iters,
                cost: pt.cost,
                worst_scaled_margin: pt.worst,
                history,
            });
            x = xn;
        }
    }
    let feasible = best_feasible.is_some();
    let setpoints = match best_feasible {
        Some((_, x)) => x,
        None => least_bad.2,
    };
    let kept_baseline = setpoints == baseline && feasible;
    let trajectory = ev.shooter.simulate(&setpoints)?;
    let cost = schedule_cost(&trajectory, &problem.prices, problem.dt)?;
    let margins = constraint_violations(&trajectory, problem)?;
    Ok(ScheduleSolution {
        scaled_margins: scaled_margins(&margins, &ev.scales),
        setpoints,
        trajectory,
        cost,
        margins,
        feasible,
        state_count: bundle.state_count(),
        log: SolverLog {
            outer,
            evaluations: evals,
            baseline_cost: base.cost,
            baseline_feasible,
            kept_baseline,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_traj(power: f64, prod: f64, n: usize) -> SbmTrajectory {
        let channels: Vec<String> = crate::plant::AUGMENTED_CHANNELS.iter().map(|s| s.to_string()).collect();
        let mut row = vec![0.0; 10];
        row[3] = prod;
        row[9] = power;
        SbmTrajectory {
            t: (0..=n).map(|k| k as f64 * 0.1).collect(),
            phi: vec![vec![]; n + 1],
            channels,
            x: vec![row; n + 1],
            storage: vec![50.0; n + 1],
        }
    }

    #[test]
    fn cost_arithmetic() {
        let t = flat_traj(0.4, 20.0, 480);
        assert!((schedule_cost(&t, &[100.0; 48], 0.1).unwrap() - 1920.0).abs() < 1e-9);
        assert_eq!(schedule_cost(&t, &[0.0; 48], 0.1).unwrap(), 0.0);
        let a = schedule_cost(&t, &two_tier_prices(48), 0.1).unwrap();
        let doubled: Vec<f64> = two_tier_prices(48).iter().map(|p| 2.0 * p).collect();
        assert!((schedule_cost(&t, &doubled, 0.1).unwrap() - 2.0 * a).abs() < 1e-9);
    }

    #[test]
    fn margins_at_bounds_and_beyond() {
        let problem = ScheduleProblem::default();
        let mut t = flat_traj(0.4, 20.0, 480);
        for r in &mut t.x {
            r[4] = 1800.0;
            r[7] = 1.9;
            r[8] = 95.0;
        }
        let m = constraint_violations(&t, &problem).unwrap();
        assert_eq!((m.impurity, m.delta_t, m.flooding, m.endpoint), (0.0, 0.0, 0.0, 0.0));
        t.x[100][4] = 1900.0;
        assert_eq!(constraint_violations(&t, &problem).unwrap().impurity, -100.0);
    }

    #[test]
    fn two_tier_layout() {
        let p = two_tier_prices(48);
        assert_eq!(p.iter().filter(|v| **v == 150.0).count(), 20);
        assert_eq!((p[9], p[10], p[19], p[20], p[34], p[43], p[44]), (50.0, 150.0, 150.0, 50.0, 150.0, 150.0, 50.0));
    }
}
