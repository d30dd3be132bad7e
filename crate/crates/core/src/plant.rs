//! Surrogate closed-loop production plant.
//!
//! Five states: feed lag `x1`, production `x2`, impurity `x3`, thermal load
//! `x4` and product storage `M`. Two PI loops close the plant: production is
//! held at its setpoint by the feed `u1`, impurity at 500 ppm by the recovery
//! `u2`. Integration is fixed-step RK4 at the sampling interval with the
//! inputs held over the step.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetMeta, TimeSeriesDataset};
use crate::error::{Error, Result};

/// Channel names of the augmented record, in storage order.
pub const AUGMENTED_CHANNELS: [&str; 10] = ["u1", "u2", "x1", "x2", "x3", "x4", "M", "dT", "FR", "Pw"];
pub const SETPOINT_CHANNEL: &str = "y_sp";
pub const PRICE_CHANNEL: &str = "price";

pub const PRODUCTION: &str = "x2";
pub const IMPURITY: &str = "x3";
pub const STORAGE: &str = "M";
pub const DELTA_T: &str = "dT";
pub const FLOODING: &str = "FR";
pub const POWER: &str = "Pw";

pub const EPISODE_HOURS: usize = 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiGains {
    pub kc: f64,
    /// Integral time in hours.
    pub tau_i: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantParams {
    /// Lags of x1..x4 in hours.
    pub tau: [f64; 4],
    pub impurity_base: f64,
    pub impurity_gain: f64,
    pub reference_recovery: f64,
    /// Thermal load law `x4 → thermal_feed·x1 + thermal_prod·x2`.
    pub thermal_feed: f64,
    pub thermal_prod: f64,
    pub delta_t_offset: f64,
    pub delta_t_slope: f64,
    /// Feed at which flooding reaches 100 %.
    pub flooding_feed: f64,
    pub power_feed: f64,
    pub power_prod: f64,
    /// mol/s → kmol/h.
    pub storage_conversion: f64,
    pub demand: f64,
    pub u1_bounds: (f64, f64),
    pub u2_bounds: (f64, f64),
    pub production_loop: PiGains,
    pub impurity_loop: PiGains,
    pub impurity_setpoint: f64,
    pub nominal_setpoint: f64,
    pub initial_storage: f64,
    /// Sample interval in hours.
    pub dt: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            tau: [0.25, 0.5, 0.8, 1.0],
            impurity_base: 150.0,
            impurity_gain: 6.0,
            reference_recovery: 0.5,
            thermal_feed: 0.08,
            thermal_prod: 0.5,
            delta_t_offset: 4.2,
            delta_t_slope: 0.155,
            flooding_feed: 36.0,
            power_feed: 0.009,
            power_prod: 0.006,
            storage_conversion: 3.6,
            demand: 20.0,
            u1_bounds: (20.0, 40.0),
            u2_bounds: (0.5, 0.9),
            production_loop: PiGains { kc: 1.0, tau_i: 0.5 },
            // Impurity rises with recovery: a positive gain on (setpoint - impurity)
            // lowers recovery when impurity is high.
            impurity_loop: PiGains { kc: 2e-4, tau_i: 1.0 },
            impurity_setpoint: 500.0,
            nominal_setpoint: 20.0,
            initial_storage: 50.0,
            dt: 0.1,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        if self.tau.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Config("plant time constants must be positive".into()));
        }
        if !(self.u1_bounds.1 > self.u1_bounds.0) || !(self.u2_bounds.1 > self.u2_bounds.0) {
            return Err(Error::Config("plant input bounds are degenerate".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("plant dt must be positive".into()));
        }
        Ok(())
    }

    /// Content hash used to tie downstream artifacts to this configuration.
    pub fn hash(&self) -> String {
        crate::io::hash_json(self).expect("plant params always serialize")
    }

    /// Recovery at which steady-state impurity equals the impurity setpoint.
    pub fn steady_recovery(&self) -> f64 {
        self.reference_recovery + (self.impurity_setpoint / self.impurity_base).ln() / self.impurity_gain
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    pub x4: f64,
    pub m: f64,
}

impl PlantState {
    fn to_array(self) -> [f64; 5] {
        [self.x1, self.x2, self.x3, self.x4, self.m]
    }

    fn from_array(a: [f64; 5]) -> Self {
        Self {
            x1: a[0],
            x2: a[1],
            x3: a[2],
            x4: a[3],
            m: a[4],
        }
    }

    fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Open-loop equilibrium for constant inputs with storage `m`.
    pub fn equilibrium(params: &PlantParams, u1: f64, u2: f64, m: f64) -> Self {
        let x1 = u1;
        let x2 = u2 * x1;
        Self {
            x1,
            x2,
            x3: params.impurity_base
                * (params.impurity_gain * (x2 / x1 - params.reference_recovery)).exp(),
            x4: params.thermal_feed * x1 + params.thermal_prod * x2,
            m,
        }
    }
}

/// Time derivatives `[dx1, dx2, dx3, dx4, dM]` in units per hour.
pub fn plant_derivatives(params: &PlantParams, state: &PlantState, u1: f64, u2: f64) -> Result<[f64; 5]> {
    if !(state.x1 > 0.0) {
        return Err(Error::SingularState(state.x1));
    }
    let [t1, t2, t3, t4] = params.tau;
    let ratio = state.x2 / state.x1;
    let impurity_target =
        params.impurity_base * (params.impurity_gain * (ratio - params.reference_recovery)).exp();
    Ok([
        (u1 - state.x1) / t1,
        (u2 * state.x1 - state.x2) / t2,
        (impurity_target - state.x3) / t3,
        (params.thermal_feed * state.x1 + params.thermal_prod * state.x2 - state.x4) / t4,
        params.storage_conversion * (state.x2 - params.demand),
    ])
}

/// Constrained algebraic outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticOutputs {
    /// Temperature driving force, K.
    pub delta_t: f64,
    /// Flooding ratio, %.
    pub flooding: f64,
    /// Power draw, MW.
    pub power: f64,
}

pub fn static_outputs(params: &PlantParams, state: &PlantState, u1: f64, _u2: f64) -> StaticOutputs {
    StaticOutputs {
        delta_t: params.delta_t_offset - params.delta_t_slope * state.x4,
        flooding: 100.0 * state.x1 / params.flooding_feed,
        power: params.power_feed * u1 + params.power_prod * state.x2,
    }
}

/// One velocity-form PI loop with output clamping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiLoop {
    pub kc: f64,
    pub tau_i: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Last applied (clamped) output.
    pub output: f64,
    pub prev_error: f64,
    /// Integrated error, frozen while the output saturates outward.
    pub accumulator: f64,
    pub clamped: bool,
}

impl PiLoop {
    fn new(gains: &PiGains, bounds: (f64, f64), output: f64) -> Self {
        Self {
            kc: gains.kc,
            tau_i: gains.tau_i,
            u_min: bounds.0,
            u_max: bounds.1,
            output,
            prev_error: 0.0,
            accumulator: 0.0,
            clamped: false,
        }
    }

    fn update(&mut self, error: f64, dt: f64) -> f64 {
        let delta = self.kc * ((error - self.prev_error) + dt / self.tau_i * error);
        let raw = self.output + delta;
        let u = raw.clamp(self.u_min, self.u_max);
        self.clamped = u != raw;
        // Integral contribution that would push further into the bound.
        let push = self.kc * error;
        let outward = (u >= self.u_max && push > 0.0) || (u <= self.u_min && push < 0.0);
        if !outward {
            self.accumulator += error * dt;
        }
        self.output = u;
        self.prev_error = error;
        u
    }
}

/// Production (→ u1) and impurity (→ u2) loops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiControllerState {
    pub production: PiLoop,
    pub impurity: PiLoop,
}

impl PiControllerState {
    /// Controller resting at the given inputs with zero error history.
    pub fn at_rest(params: &PlantParams, u1: f64, u2: f64) -> Self {
        Self {
            production: PiLoop::new(&params.production_loop, params.u1_bounds, u1),
            impurity: PiLoop::new(&params.impurity_loop, params.u2_bounds, u2),
        }
    }

    pub fn inputs(&self) -> (f64, f64) {
        (self.production.output, self.impurity.output)
    }
}

/// Velocity-form PI update of both loops; returns the new inputs and state.
pub fn pi_update(
    params: &PlantParams,
    ctrl: &PiControllerState,
    y_sp_prod: f64,
    y_prod: f64,
    y_imp: f64,
    dt: f64,
) -> (f64, f64, PiControllerState) {
    let mut next = *ctrl;
    let u1 = next.production.update(y_sp_prod - y_prod, dt);
    let u2 = next.impurity.update(params.impurity_setpoint - y_imp, dt);
    (u1, u2, next)
}

/// One sample of the augmented state with its context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentedRecord {
    pub t: f64,
    pub u1: f64,
    pub u2: f64,
    pub state: PlantState,
    pub delta_t: f64,
    pub flooding: f64,
    pub power: f64,
    pub y_sp: f64,
    pub price: f64,
}

impl AugmentedRecord {
    pub fn assemble(params: &PlantParams, t: f64, state: PlantState, u1: f64, u2: f64, y_sp: f64, price: f64) -> Self {
        let s = static_outputs(params, &state, u1, u2);
        Self {
            t,
            u1,
            u2,
            state,
            delta_t: s.delta_t,
            flooding: s.flooding,
            power: s.power,
            y_sp,
            price,
        }
    }

    /// Values in [`AUGMENTED_CHANNELS`] order.
    pub fn augmented(&self) -> [f64; 10] {
        let s = &self.state;
        [self.u1, self.u2, s.x1, s.x2, s.x3, s.x4, s.m, self.delta_t, self.flooding, self.power]
    }
}

fn rk4(params: &PlantParams, state: &PlantState, u1: f64, u2: f64, dt: f64) -> Result<PlantState> {
    let x = state.to_array();
    let add = |a: &[f64; 5], b: &[f64; 5], h: f64| -> PlantState {
        PlantState::from_array(std::array::from_fn(|i| a[i] + h * b[i]))
    };
    let k1 = plant_derivatives(params, state, u1, u2)?;
    let k2 = plant_derivatives(params, &add(&x, &k1, dt / 2.0), u1, u2)?;
    let k3 = plant_derivatives(params, &add(&x, &k2, dt / 2.0), u1, u2)?;
    let k4 = plant_derivatives(params, &add(&x, &k3, dt), u1, u2)?;
    Ok(PlantState::from_array(std::array::from_fn(|i| {
        x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    })))
}

/// Controller update (zero-order hold over `dt`) followed by one RK4 step.
///
/// The returned record carries the applied inputs and the post-step state.
pub fn step_closed_loop(
    params: &PlantParams,
    state: &PlantState,
    ctrl: &PiControllerState,
    y_sp: f64,
    dt: f64,
) -> Result<(PlantState, PiControllerState, AugmentedRecord)> {
    let (u1, u2, ctrl) = pi_update(params, ctrl, y_sp, state.x2, state.x3, dt);
    let next = rk4(params, state, u1, u2, dt)?;
    if !next.is_finite() {
        return Err(Error::SimulationDiverged { step: 0 });
    }
    let rec = AugmentedRecord::assemble(params, 0.0, next, u1, u2, y_sp, 0.0);
    Ok((next, ctrl, rec))
}

/// Stateful wrapper over [`step_closed_loop`] tracking time and step count.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub params: PlantParams,
    pub state: PlantState,
    pub ctrl: PiControllerState,
    pub t: f64,
    steps: usize,
}

impl ClosedLoop {
    /// Closed-loop steady state at `y_sp` with storage `m`.
    pub fn at_steady_state(params: &PlantParams, y_sp: f64, m: f64) -> Self {
        let u2 = params.steady_recovery();
        let u1 = y_sp / u2;
        Self {
            params: params.clone(),
            state: PlantState::equilibrium(params, u1, u2, m),
            ctrl: PiControllerState::at_rest(params, u1, u2),
            t: 0.0,
            steps: 0,
        }
    }

    /// Nominal operating point: nominal setpoint, initial storage.
    pub fn nominal(params: &PlantParams) -> Self {
        Self::at_steady_state(params, params.nominal_setpoint, params.initial_storage)
    }

    /// Record describing the current state under the current inputs.
    pub fn current_record(&self, y_sp: f64, price: f64) -> AugmentedRecord {
        let (u1, u2) = self.ctrl.inputs();
        AugmentedRecord::assemble(&self.params, self.t, self.state, u1, u2, y_sp, price)
    }

    pub fn step(&mut self, y_sp: f64, price: f64) -> Result<AugmentedRecord> {
        let dt = self.params.dt;
        let (state, ctrl, mut rec) = step_closed_loop(&self.params, &self.state, &self.ctrl, y_sp, dt)
            .map_err(|e| match e {
                Error::SimulationDiverged { .. } => Error::SimulationDiverged { step: self.steps },
                other => other,
            })?;
        self.steps += 1;
        self.t = self.steps as f64 * dt;
        self.state = state;
        self.ctrl = ctrl;
        rec.t = self.t;
        rec.price = price;
        Ok(rec)
    }

    /// Runs hourly setpoints through the loop; `samples_per_hour` steps each.
    pub fn run_hourly(&mut self, setpoints: &[f64], prices: &[f64]) -> Result<Vec<AugmentedRecord>> {
        let per_hour = samples_per_hour(self.params.dt)?;
        let mut out = Vec::with_capacity(setpoints.len() * per_hour);
        for (h, &sp) in setpoints.iter().enumerate() {
            let price = prices.get(h).copied().unwrap_or(0.0);
            for _ in 0..per_hour {
                out.push(self.step(sp, price)?);
            }
        }
        Ok(out)
    }
}

pub fn samples_per_hour(dt: f64) -> Result<usize> {
    let n = (1.0 / dt).round();
    if n < 1.0 || (n * dt - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("dt = {dt} h does not divide one hour")));
    }
    Ok(n as usize)
}

/// Linear-interpolation quantile of a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Price-inverse campaign setpoints with a seeded ±0.5 mol/s binary
/// perturbation, clipped to the ±20 % band around nominal.
pub fn setpoint_from_prices(params: &PlantParams, prices: &[f64], seed: u64) -> Result<Vec<f64>> {
    if prices.is_empty() || prices.iter().any(|p| !p.is_finite()) {
        return Err(Error::Config("prices must be finite and non-empty".into()));
    }
    let mut sorted = prices.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = quantile(&sorted, 0.5);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let nominal = params.nominal_setpoint;
    let (lo, hi) = (0.8 * nominal, 1.2 * nominal);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Balanced ±0.5 sequence so the excitation itself does not drift storage.
    let mut kicks: Vec<f64> = (0..prices.len())
        .map(|i| if i < prices.len() / 2 { 0.5 } else { -0.5 })
        .collect();
    if prices.len() % 2 == 1 && rng.random::<bool>() {
        kicks[prices.len() - 1] = 0.5;
    }
    kicks.shuffle(&mut rng);
    Ok(prices
        .iter()
        .zip(kicks)
        .map(|(&p, kick)| {
            let base = if iqr > 0.0 {
                (nominal * (1.0 + 0.2 * (median - p) / iqr)).clamp(lo, hi)
            } else {
                nominal
            };
            (base + kick).clamp(lo, hi)
        })
        .collect())
}

/// Synthetic hourly price: daily sinusoid on a random level with noise of a
/// per-episode volatility, held over random 1 to 6 h blocks so the campaign
/// visits sustained operating points, plus seeded spikes.
pub fn generate_prices(hours: usize, spike_prob: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let level = rng.random_range(35.0..65.0);
    let amplitude = rng.random_range(10.0..30.0);
    let phase = rng.random_range(-2.0..2.0);
    let volatility = rng.random_range(3.0..25.0);
    let mut out = Vec::with_capacity(hours);
    while out.len() < hours {
        let h = out.len() as f64;
        let daily = (2.0 * std::f64::consts::PI * (h - 11.0 - phase) / 24.0).sin();
        let mut p = level + amplitude * daily + rng.random_range(-volatility..volatility);
        if rng.random::<f64>() < spike_prob {
            p += rng.random_range(40.0..150.0);
        }
        let hold = rng.random_range(1..=6usize);
        for _ in 0..hold.min(hours - out.len()) {
            out.push(p.max(5.0));
        }
    }
    out
}

/// Closed-loop operating campaign: one 48 h episode per price vector, each
/// starting from the nominal steady state with initial storage.
pub fn simulate_campaign(params: &PlantParams, price_episodes: &[Vec<f64>], seed: u64) -> Result<TimeSeriesDataset> {
    params.validate()?;
    if price_episodes.is_empty() {
        return Err(Error::Config("campaign needs at least one price episode".into()));
    }
    let per_hour = samples_per_hour(params.dt)?;
    let per_episode = EPISODE_HOURS * per_hour;
    let mut records = Vec::with_capacity(price_episodes.len() * per_episode);
    let mut starts = Vec::with_capacity(price_episodes.len());
    for (e, prices) in price_episodes.iter().enumerate() {
        if prices.len() != EPISODE_HOURS {
            return Err(Error::Config(format!(
                "price episode {e} has {} entries, expected {EPISODE_HOURS}",
                prices.len()
            )));
        }
        let setpoints = setpoint_from_prices(params, prices, seed.wrapping_add(e as u64))?;
        let mut plant = ClosedLoop::nominal(params);
        starts.push(records.len());
        let offset = records.len();
        let recs = plant.run_hourly(&setpoints, prices).map_err(|err| match err {
            Error::SimulationDiverged { step } => Error::SimulationDiverged { step: offset + step },
            other => other,
        })?;
        records.extend(recs);
    }
    records_to_dataset(
        &records,
        DatasetMeta {
            dt: params.dt,
            episode_starts: starts,
            seed,
        },
        true,
    )
}

/// Packs records into a dataset with a global uniform time axis.
pub fn records_to_dataset(records: &[AugmentedRecord], meta: DatasetMeta, with_context: bool) -> Result<TimeSeriesDataset> {
    let dt = meta.dt;
    let t: Vec<f64> = (0..records.len()).map(|k| (k + 1) as f64 * dt).collect();
    let mut names: Vec<String> = AUGMENTED_CHANNELS.iter().map(|s| s.to_string()).collect();
    let mut columns: Vec<Vec<f64>> = (0..AUGMENTED_CHANNELS.len())
        .map(|j| records.iter().map(|r| r.augmented()[j]).collect())
        .collect();
    if with_context {
        names.push(SETPOINT_CHANNEL.into());
        columns.push(records.iter().map(|r| r.y_sp).collect());
        names.push(PRICE_CHANNEL.into());
        columns.push(records.iter().map(|r| r.price).collect());
    }
    TimeSeriesDataset::new(t, names, columns, meta)
}

/// Reads a `hour,price_usd_per_mwh` CSV.
pub fn read_price_csv<R: std::io::Read>(reader: R) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    if headers.get(1) != Some("price_usd_per_mwh") {
        return Err(Error::Config("price CSV header must be hour,price_usd_per_mwh".into()));
    }
    let mut rows: Vec<(usize, f64)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let hour = rec[0]
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("bad hour {:?}", &rec[0])))?;
        let price = rec[1]
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("bad price {:?}", &rec[1])))?;
        rows.push((hour, price));
    }
    rows.sort_by_key(|r| r.0);
    if rows.iter().enumerate().any(|(i, r)| r.0 != i) {
        return Err(Error::Config("price CSV hours must be 0..n without gaps".into()));
    }
    Ok(rows.into_iter().map(|r| r.1).collect())
}

pub fn write_price_csv<W: std::io::Write>(writer: W, prices: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["hour", "price_usd_per_mwh"])?;
    for (h, p) in prices.iter().enumerate() {
        w.write_record([h.to_string(), crate::data::fmt_f64(*p)])?;
    }
    w.flush().map_err(|e| Error::io("<price csv>", e))?;
    Ok(())
}
