//! Python bindings for the `latsched` pipeline.
//!
//! Models cross the boundary as JSON strings or file artifacts so the Python
//! side never depends on Rust struct layout.

use std::collections::BTreeMap;
use std::path::PathBuf;

use latsched::cli::Artifact;
use latsched::manifold::ManifoldModel;
use latsched::plant::{self, ClosedLoop, PlantParams, AUGMENTED_CHANNELS};
use latsched::schedopt::{self, ScheduleProblem, ScheduleSolution, SolverOptions};
use latsched::sysid::SbmBundle;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;

fn err(e: latsched::Error) -> PyErr {
    match e {
        latsched::Error::Config(_) | latsched::Error::Dimension(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Reads either a bare payload or a pipeline artifact envelope.
fn load_payload<T: DeserializeOwned>(path: PathBuf) -> PyResult<T> {
    let bytes = latsched::io::read_bytes(&path).map_err(err)?;
    if let Ok(art) = serde_json::from_slice::<Artifact<T>>(&bytes) {
        return Ok(art.payload);
    }
    serde_json::from_slice(&bytes).map_err(json_err)
}

/// Closed-loop plant with its parameter set.
#[pyclass(name = "Plant", module = "latsched_py")]
struct PyPlant {
    params: PlantParams,
}

#[pymethods]
impl PyPlant {
    /// Builds the plant from a JSON parameter object; nominal when omitted.
    #[new]
    #[pyo3(signature = (params_json = None))]
    fn new(params_json: Option<&str>) -> PyResult<Self> {
        let params = match params_json {
            Some(s) => serde_json::from_str(s).map_err(json_err)?,
            None => PlantParams::default(),
        };
        params.validate().map_err(err)?;
        Ok(Self { params })
    }

    fn params_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.params).map_err(json_err)
    }

    fn params_hash(&self) -> String {
        self.params.hash()
    }

    #[getter]
    fn nominal_setpoint(&self) -> f64 {
        self.params.nominal_setpoint
    }

    /// Replays hourly setpoints from the nominal steady state and returns the
    /// augmented channels plus `t`, including the initial record.
    fn replay(&self, setpoints: Vec<f64>, prices: Vec<f64>) -> PyResult<BTreeMap<String, Vec<f64>>> {
        if setpoints.len() != prices.len() {
            return Err(PyValueError::new_err("setpoints and prices differ in length"));
        }
        let mut cl = ClosedLoop::nominal(&self.params);
        let first = cl.current_record(self.params.nominal_setpoint, prices.first().copied().unwrap_or(0.0));
        let records = cl.run_hourly(&setpoints, &prices).map_err(err)?;
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in std::iter::once(&first).chain(&records) {
            out.entry("t".into()).or_default().push(r.t);
            for (name, v) in AUGMENTED_CHANNELS.iter().zip(r.augmented()) {
                out.entry((*name).into()).or_default().push(v);
            }
        }
        Ok(out)
    }

    /// Simulates an operating campaign, one episode per price vector.
    fn campaign(&self, price_episodes: Vec<Vec<f64>>, seed: u64) -> PyResult<BTreeMap<String, Vec<f64>>> {
        let data = plant::simulate_campaign(&self.params, &price_episodes, seed).map_err(err)?;
        let mut out = BTreeMap::new();
        out.insert("t".to_string(), data.t.clone());
        for name in data.channel_names() {
            out.insert(name.clone(), data.column(name).unwrap_or_default().to_vec());
        }
        Ok(out)
    }
}

/// Encoder/decoder pair over the augmented channels.
#[pyclass(name = "Manifold", module = "latsched_py")]
struct PyManifold {
    model: ManifoldModel,
}

#[pymethods]
impl PyManifold {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { model: load_payload(path)? })
    }

    #[getter]
    fn channels(&self) -> Vec<String> {
        self.model.channels.clone()
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.model.p()
    }

    fn encode(&self, row: Vec<f64>) -> PyResult<Vec<f64>> {
        if row.len() != self.model.channels.len() {
            return Err(PyValueError::new_err("row length differs from channel count"));
        }
        self.model.encode_native(&row).map_err(err)
    }

    fn decode(&self, latent: Vec<f64>) -> PyResult<Vec<f64>> {
        if latent.len() != self.model.p() {
            return Err(PyValueError::new_err("latent length differs from latent dimension"));
        }
        self.model.decode_native(&latent).map_err(err)
    }
}

/// Identified latent dynamic models.
#[pyclass(name = "LatentModel", module = "latsched_py")]
struct PyLatentModel {
    bundle: SbmBundle,
}

#[pymethods]
impl PyLatentModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { bundle: load_payload(path)? })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.bundle).map_err(json_err)
    }
}

/// Optimized schedule and its predicted trajectory.
#[pyclass(name = "Schedule", module = "latsched_py")]
struct PySchedule {
    solution: ScheduleSolution,
}

#[pymethods]
impl PySchedule {
    #[getter]
    fn setpoints(&self) -> Vec<f64> {
        self.solution.setpoints.clone()
    }

    #[getter]
    fn cost(&self) -> f64 {
        self.solution.cost
    }

    #[getter]
    fn feasible(&self) -> bool {
        self.solution.feasible
    }

    #[getter]
    fn state_count(&self) -> usize {
        self.solution.state_count
    }

    #[getter]
    fn baseline_cost(&self) -> f64 {
        self.solution.log.baseline_cost
    }

    /// Predicted storage in kmol, one value per sample.
    #[getter]
    fn storage(&self) -> Vec<f64> {
        self.solution.trajectory.storage.clone()
    }

    /// Predicted native trajectory of one channel.
    fn channel(&self, name: &str) -> PyResult<Vec<f64>> {
        self.solution.trajectory.channel(name).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.solution).map_err(json_err)
    }
}

/// Optimizes hourly setpoints for `prices` over the latent models.
#[pyfunction]
#[pyo3(signature = (model, manifold, prices, plant = None, seed = 0))]
fn optimize(
    py: Python<'_>,
    model: &PyLatentModel,
    manifold: &PyManifold,
    prices: Vec<f64>,
    plant: Option<&PyPlant>,
    seed: u64,
) -> PyResult<PySchedule> {
    let params = plant.map(|p| p.params.clone()).unwrap_or_default();
    let mut problem = ScheduleProblem::from_plant(&params, prices);
    problem.horizon_hours = problem.prices.len();
    let opts = SolverOptions { seed, ..SolverOptions::default() };
    let solution = py
        .detach(|| schedopt::optimize_schedule(&model.bundle, &manifold.model, &problem, None, &opts))
        .map_err(err)?;
    Ok(PySchedule { solution })
}

#[pyfunction]
fn two_tier_prices(hours: usize) -> Vec<f64> {
    schedopt::two_tier_prices(hours)
}

#[pyfunction]
#[pyo3(signature = (hours, spike_prob = 0.05, seed = 0))]
fn generate_prices(hours: usize, spike_prob: f64, seed: u64) -> Vec<f64> {
    plant::generate_prices(hours, spike_prob, seed)
}

/// Runs the command-line interface with `args` (without the program name)
/// and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("latsched".to_string()).chain(args).collect();
    py.detach(|| latsched::cli::run(argv))
}

#[pymodule]
fn latsched_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPlant>()?;
    m.add_class::<PyManifold>()?;
    m.add_class::<PyLatentModel>()?;
    m.add_class::<PySchedule>()?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    m.add_function(wrap_pyfunction!(two_tier_prices, m)?)?;
    m.add_function(wrap_pyfunction!(generate_prices, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("AUGMENTED_CHANNELS", AUGMENTED_CHANNELS.to_vec())?;
    Ok(())
}
