//! Command-line orchestration of the pipeline over file artifacts.
//!
//! Every stage reads and writes JSON/CSV artifacts in the output directory.
//! Each JSON artifact is an [`Artifact`] envelope that records the SHA-256 of
//! every upstream file it was built from, so `report` can verify the whole
//! chain. Each stage prints one JSON provenance line on stdout.
//!
//! Exit codes: 0 success, 2 schedule infeasible on the surrogate, 1 error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{DatasetMeta, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::eval::{build_report, decoded_channel_nmse, validate_on_plant, Run, ValidationReport};
use crate::io::{hash_file, read_bytes, write_atomic, write_json};
use crate::manifold::{Architecture, ManifoldModel, Method, TrainingHyper};
use crate::plant::{
    generate_prices, read_price_csv, simulate_campaign, PlantParams, AUGMENTED_CHANNELS, EPISODE_HOURS,
    SETPOINT_CHANNEL, STORAGE,
};
use crate::schedopt::{optimize_schedule, two_tier_prices, ScheduleProblem, ScheduleSolution, SolverOptions};
use crate::sysid::{identify_latent_sbm, FitOptions, SbmBundle, SearchGrid, SysidOptions};

pub const CAMPAIGN_CSV: &str = "campaign.csv";
pub const CAMPAIGN_JSON: &str = "campaign.json";
pub const PCA_MODEL: &str = "manifold.pcamodel.json";
pub const AE_MODEL: &str = "manifold.aemodel.json";
pub const SBM_MODEL: &str = "latent.sbm.json";
pub const SCHEDULE_JSON: &str = "schedule.json";
pub const SCHEDULE_CSV: &str = "schedule.csv";
pub const VALIDATION_JSON: &str = "validation.json";
pub const REPORT_DIR: &str = "report";

/// Manifold method selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchChoice {
    Linear,
    Tanh2x,
    Tanh3x,
    Pca,
}

impl ArchChoice {
    fn method(self, p: usize) -> Method {
        match self {
            ArchChoice::Pca => Method::Pca { p },
            ArchChoice::Linear => Method::Autoencoder { arch: Architecture::Linear, p },
            ArchChoice::Tanh2x => Method::Autoencoder { arch: Architecture::Tanh2x, p },
            ArchChoice::Tanh3x => Method::Autoencoder { arch: Architecture::Tanh3x, p },
        }
    }

    fn artifact(self) -> &'static str {
        match self {
            ArchChoice::Pca => PCA_MODEL,
            _ => AE_MODEL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub episodes: usize,
    /// Per-hour probability of a price spike in generated episodes.
    pub spike_prob: f64,
    /// Optional 48-row price CSVs used instead of generated episodes.
    pub price_files: Vec<PathBuf>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            episodes: 10,
            spike_prob: 0.05,
            price_files: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifoldConfig {
    pub arch: ArchChoice,
    pub latent_dim: usize,
    /// Augmented channels the manifold is learned on.
    pub channels: Vec<String>,
    pub hyper: TrainingHyper,
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        Self {
            arch: ArchChoice::Linear,
            latent_dim: 5,
            channels: AUGMENTED_CHANNELS
                .iter()
                .filter(|c| **c != STORAGE)
                .map(|c| c.to_string())
                .collect(),
            hyper: TrainingHyper::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SysidConfig {
    pub grid: SearchGrid,
    pub fit: FitOptions,
    pub train_fraction: f64,
}

impl Default for SysidConfig {
    fn default() -> Self {
        let d = SysidOptions::default();
        Self {
            grid: d.grid,
            fit: d.fit,
            train_fraction: d.train_fraction,
        }
    }
}

/// Scheduling problem fields; unset fields keep the plant-derived defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemOverrides {
    pub setpoint_bounds: Option<(f64, f64)>,
    pub demand: Option<f64>,
    pub storage_capacity: Option<f64>,
    pub initial_storage: Option<f64>,
    pub endpoint_margin: Option<f64>,
    pub impurity_max: Option<f64>,
    pub delta_t_min: Option<f64>,
    pub flooding_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// `two-tier`, `flat:<$/MWh>` or a path to an `hour,price_usd_per_mwh` CSV.
    pub price: String,
    pub problem: ProblemOverrides,
    pub solver: SolverOptions,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            price: "two-tier".into(),
            problem: ProblemOverrides::default(),
            solver: SolverOptions::default(),
        }
    }
}

/// Full pipeline configuration, read from a single JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Artifact directory.
    pub out: PathBuf,
    pub plant: PlantParams,
    pub campaign: CampaignConfig,
    pub manifold: ManifoldConfig,
    pub sysid: SysidConfig,
    pub schedule: ScheduleConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out: PathBuf::from("artifacts"),
            plant: PlantParams::default(),
            campaign: CampaignConfig::default(),
            manifold: ManifoldConfig::default(),
            sysid: SysidConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        if self.campaign.episodes == 0 && self.campaign.price_files.is_empty() {
            return Err(Error::Config("campaign needs at least one episode".into()));
        }
        if self.manifold.latent_dim == 0 || self.manifold.latent_dim > self.manifold.channels.len() {
            return Err(Error::Config(format!(
                "latent dimension {} must lie in 1..={}",
                self.manifold.latent_dim,
                self.manifold.channels.len()
            )));
        }
        for c in &self.manifold.channels {
            if !AUGMENTED_CHANNELS.contains(&c.as_str()) {
                return Err(Error::Config(format!("unknown manifold channel {c}")));
            }
        }
        self.manifold.hyper.validate()?;
        self.sysid.grid.normalized()?;
        Ok(())
    }

    fn method(&self) -> Method {
        self.manifold.arch.method(self.manifold.latent_dim)
    }

    /// Setpoint-schedule price vector for the configured scenario.
    pub fn prices(&self) -> Result<Vec<f64>> {
        let spec = self.schedule.price.trim();
        if spec == "two-tier" {
            return Ok(two_tier_prices(EPISODE_HOURS));
        }
        if let Some(v) = spec.strip_prefix("flat:") {
            let v: f64 = v.parse().map_err(|_| Error::Config(format!("bad flat price {v:?}")))?;
            return Ok(vec![v; EPISODE_HOURS]);
        }
        let path = Path::new(spec);
        let file = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
            _ => Error::io(path, e),
        })?;
        read_price_csv(file)
    }

    pub fn problem(&self) -> Result<ScheduleProblem> {
        let mut p = ScheduleProblem::from_plant(&self.plant, self.prices()?);
        let o = &self.schedule.problem;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = o.$f { p.$f = v; } )* };
        }
        set!(setpoint_bounds, demand, storage_capacity, initial_storage, endpoint_margin, impurity_max, delta_t_min, flooding_max);
        p.validate()?;
        Ok(p)
    }
}

/// Envelope around every JSON artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub kind: String,
    pub seed: u64,
    /// Upstream file name → SHA-256 of its bytes when consumed.
    pub upstream: BTreeMap<String, String>,
    pub payload: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignInfo {
    pub meta: DatasetMeta,
    pub params: PlantParams,
    pub params_hash: String,
    pub price_episodes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleArtifact {
    pub problem: ScheduleProblem,
    pub solution: ScheduleSolution,
}

#[derive(Debug, Parser)]
#[command(name = "latsched", version, about = "Latent-variable demand-response scheduling pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Stage,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Pipeline configuration JSON.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub arch: Option<ArchChoice>,
    #[arg(long = "latent-dim", global = true)]
    pub latent_dim: Option<usize>,
    /// Price CSV for the schedule stage.
    #[arg(long, global = true)]
    pub price: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Stage {
    /// Simulate the operating campaign.
    Simulate,
    /// Learn the latent manifold.
    Reduce,
    /// Identify latent Hammerstein-Wiener models.
    Identify,
    /// Optimize the production schedule.
    Schedule,
    /// Replay the schedule on the plant.
    Validate,
    /// Write the report bundle.
    Report,
    /// Run every stage in order.
    Pipeline,
}

/// Stage outcome beyond success.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Ok,
    Infeasible,
}

struct Ctx {
    cfg: PipelineConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Reads an artifact and returns it with the hash of its bytes.
    fn read<T: DeserializeOwned>(&self, name: &str) -> Result<(Artifact<T>, String)> {
        let path = self.path(name);
        let bytes = read_bytes(&path)?;
        let art = serde_json::from_slice(&bytes)?;
        Ok((art, crate::io::sha256_hex(&bytes)))
    }

    fn write<T: Serialize>(&self, name: &str, kind: &str, upstream: BTreeMap<String, String>, payload: T) -> Result<String> {
        let art = Artifact {
            kind: kind.into(),
            seed: self.cfg.seed,
            upstream,
            payload,
        };
        let path = self.path(name);
        write_json(&path, &art)?;
        hash_file(&path)
    }
}

fn upstream(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// Fails unless `art` was built from the file whose current hash is `hash`.
fn check_link<T>(art: &Artifact<T>, name: &str, hash: &str) -> Result<()> {
    match art.upstream.get(name) {
        Some(h) if h == hash => Ok(()),
        Some(h) => Err(Error::Provenance(format!(
            "{} was built from {name} {h}, current file is {hash}",
            art.kind
        ))),
        None => Err(Error::Provenance(format!("{} does not record {name}", art.kind))),
    }
}

fn load_campaign(ctx: &Ctx) -> Result<(TimeSeriesDataset, Artifact<CampaignInfo>, String)> {
    let (info, info_hash) = ctx.read::<CampaignInfo>(CAMPAIGN_JSON)?;
    let csv_path = ctx.path(CAMPAIGN_CSV);
    check_link(&info, CAMPAIGN_CSV, &hash_file(&csv_path)?)?;
    let data = TimeSeriesDataset::read_csv_file(&csv_path, Some(info.payload.meta.clone()))?;
    Ok((data, info, info_hash))
}

fn load_manifold(ctx: &Ctx) -> Result<(Artifact<ManifoldModel>, String, &'static str)> {
    let name = ctx.cfg.manifold.arch.artifact();
    let (art, hash) = ctx.read::<ManifoldModel>(name)?;
    Ok((art, hash, name))
}

fn simulate(ctx: &Ctx) -> Result<(Status, BTreeMap<String, String>, BTreeMap<String, String>)> {
    let cfg = &ctx.cfg;
    let mut inputs = BTreeMap::new();
    let episodes: Vec<Vec<f64>> = if cfg.campaign.price_files.is_empty() {
        (0..cfg.campaign.episodes)
            .map(|e| generate_prices(EPISODE_HOURS, cfg.campaign.spike_prob, cfg.seed.wrapping_mul(1000).wrapping_add(e as u64)))
            .collect()
    } else {
        cfg.campaign
            .price_files
            .iter()
            .map(|p| {
                inputs.insert(p.display().to_string(), hash_file(p)?);
                let f = std::fs::File::open(p).map_err(|e| Error::io(p, e))?;
                read_price_csv(f)
            })
            .collect::<Result<_>>()?
    };
    let data = simulate_campaign(&cfg.plant, &episodes, cfg.seed)?;
    let csv_path = ctx.path(CAMPAIGN_CSV);
    let mut csv = Vec::new();
    data.write_csv(&mut csv)?;
    write_atomic(&csv_path, &csv)?;
    let csv_hash = crate::io::sha256_hex(&csv);
    let info = CampaignInfo {
        meta: data.meta.clone(),
        params: cfg.plant.clone(),
        params_hash: cfg.plant.hash(),
        price_episodes: episodes,
    };
    let json_hash = ctx.write(CAMPAIGN_JSON, "campaign", upstream(&[(CAMPAIGN_CSV, &csv_hash)]), info)?;
    let outputs = upstream(&[(CAMPAIGN_CSV, &csv_hash), (CAMPAIGN_JSON, &json_hash)]);
    Ok((Status::Ok, inputs, outputs))
}

fn reduce(ctx: &Ctx) -> Result<(Status, BTreeMap<String, String>, BTreeMap<String, String>)> {
    let cfg = &ctx.cfg;
    let (data, _, campaign_hash) = load_campaign(ctx)?;
    let hyper = TrainingHyper {
        seed: cfg.seed,
        ..cfg.manifold.hyper.clone()
    };
    let model = ManifoldModel::fit(&data, &cfg.manifold.channels, cfg.method(), &hyper, campaign_hash.clone())?;
    let name = cfg.manifold.arch.artifact();
    let hash = ctx.write(name, "manifold", upstream(&[(CAMPAIGN_JSON, &campaign_hash)]), model)?;
    Ok((Status::Ok, upstream(&[(CAMPAIGN_JSON, &campaign_hash)]), upstream(&[(name, &hash)])))
}

fn identify(ctx: &Ctx) -> Result<(Status, BTreeMap<String, String>, BTreeMap<String, String>)> {
    let cfg = &ctx.cfg;
    let (data, _, campaign_hash) = load_campaign(ctx)?;
    let (manifold, manifold_hash, manifold_name) = load_manifold(ctx)?;
    check_link(&manifold, CAMPAIGN_JSON, &campaign_hash)?;
    let latents = manifold.payload.encode_dataset(&data)?;
    let y_sp = data
        .column(SETPOINT_CHANNEL)
        .ok_or_else(|| Error::Config("campaign has no setpoint channel".into()))?;
    let opts = SysidOptions {
        grid: cfg.sysid.grid.clone(),
        fit: cfg.sysid.fit.clone(),
        train_fraction: cfg.sysid.train_fraction,
        seed: cfg.seed,
    };
    let bundle = identify_latent_sbm(
        &latents,
        y_sp,
        &data.meta,
        cfg.plant.nominal_setpoint,
        SETPOINT_CHANNEL,
        &manifold_hash,
        &opts,
    )?;
    let inputs = upstream(&[(CAMPAIGN_JSON, &campaign_hash), (manifold_name, &manifold_hash)]);
    let hash = ctx.write(SBM_MODEL, "sbm", inputs.clone(), bundle)?;
    Ok((Status::Ok, inputs, upstream(&[(SBM_MODEL, &hash)])))
}

fn schedule(ctx: &Ctx) -> Result<(Status, BTreeMap<String, String>, BTreeMap<String, String>)> {
    let cfg = &ctx.cfg;
    let (manifold, manifold_hash, manifold_name) = load_manifold(ctx)?;
    let (sbm, sbm_hash) = ctx.read::<SbmBundle>(SBM_MODEL)?;
    check_link(&sbm, manifold_name, &manifold_hash)?;
    let problem = cfg.problem()?;
    let solver = SolverOptions {
        seed: cfg.seed,
        ..cfg.schedule.solver.clone()
    };
    let solution = optimize_schedule(&sbm.payload, &manifold.payload, &problem, None, &solver)?;
    let status = if solution.feasible { Status::Ok } else { Status::Infeasible };

    let traj = &solution.trajectory;
    let mut header: Vec<String> = vec!["t".into(), "setpoint".into()];
    header.extend(traj.channels.iter().cloned());
    header.push("storage".into());
    let per_hour = crate::plant::samples_per_hour(problem.dt)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for (k, t) in traj.t.iter().enumerate() {
        let hour = (k / per_hour).min(solution.setpoints.len() - 1);
        let mut row = vec![t.to_string(), solution.setpoints[hour].to_string()];
        row.extend(traj.x[k].iter().map(f64::to_string));
        row.push(traj.storage[k].to_string());
        w.write_record(&row)?;
    }
    let csv = w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
    write_atomic(&ctx.path(SCHEDULE_CSV), &csv)?;

    let inputs = upstream(&[(manifold_name, &manifold_hash), (SBM_MODEL, &sbm_hash)]);
    let hash = ctx.write(SCHEDULE_JSON, "schedule", inputs.clone(), ScheduleArtifact { problem, solution })?;
    let outputs = upstream(&[(SCHEDULE_JSON, &hash), (SCHEDULE_CSV, &crate::io::sha256_hex(&csv))]);
    Ok((status, inputs, outputs))
}

fn validate(ctx: &Ctx) -> Result<(Status, BTreeMap<String, String>, BTreeMap<String, String>)> {
    let (campaign, campaign_hash) = ctx.read::<CampaignInfo>(CAMPAIGN_JSON)?;
    let (sched, sched_hash) = ctx.read::<ScheduleArtifact>(SCHEDULE_JSON)?;
    let report = validate_on_plant(
        &sched.payload.solution,
        &sched.payload.problem,
        &ctx.cfg.plant,
        &campaign.payload.params_hash,
    )?;
    let inputs = upstream(&[(CAMPAIGN_JSON, &campaign_hash), (SCHEDULE_JSON, &sched_hash)]);
    let hash = ctx.write(VALIDATION_JSON, "validation", inputs.clone(), report)?;
    let status = if sched.payload.solution.feasible { Status::Ok } else { Status::Infeasible };
    Ok((status, inputs, upstream(&[(VALIDATION_JSON, &hash)])))
}

fn report(ctx: &Ctx) -> Result<(Status, BTreeMap<String, String>, BTreeMap<String, String>)> {
    let (data, campaign, campaign_hash) = load_campaign(ctx)?;
    let (manifold, manifold_hash, manifold_name) = load_manifold(ctx)?;
    let (sbm, sbm_hash) = ctx.read::<SbmBundle>(SBM_MODEL)?;
    let (sched, sched_hash) = ctx.read::<ScheduleArtifact>(SCHEDULE_JSON)?;
    let (val, val_hash) = ctx.read::<ValidationReport>(VALIDATION_JSON)?;
    check_link(&manifold, CAMPAIGN_JSON, &campaign_hash)?;
    check_link(&sbm, CAMPAIGN_JSON, &campaign_hash)?;
    check_link(&sbm, manifold_name, &manifold_hash)?;
    check_link(&sched, manifold_name, &manifold_hash)?;
    check_link(&sched, SBM_MODEL, &sbm_hash)?;
    check_link(&val, SCHEDULE_JSON, &sched_hash)?;
    check_link(&val, CAMPAIGN_JSON, &campaign_hash)?;

    let nmse = decoded_channel_nmse(&manifold.payload, &sbm.payload, &data)?;
    let inputs = upstream(&[
        (CAMPAIGN_JSON, &campaign_hash),
        (manifold_name, &manifold_hash),
        (SBM_MODEL, &sbm_hash),
        (SCHEDULE_JSON, &sched_hash),
        (VALIDATION_JSON, &val_hash),
    ]);
    let mut metadata = inputs.clone();
    metadata.insert("seed".into(), ctx.cfg.seed.to_string());
    metadata.insert("params_hash".into(), campaign.payload.params_hash.clone());
    metadata.insert("manifold".into(), format!("{}-p{}", serde_json::to_value(ctx.cfg.manifold.arch)?.as_str().unwrap_or_default(), manifold.payload.p()));
    let run = Run {
        label: ctx.cfg.schedule.price.clone(),
        solution: sched.payload.solution,
        validation: val.payload,
    };
    let dir = ctx.path(REPORT_DIR);
    build_report(&dir, &[run], Some(&nmse), &metadata)?;
    let mut outputs = BTreeMap::new();
    for f in ["summary.json", "nmse.csv", "violations.csv", "trajectories.csv", "solver_log.json"] {
        outputs.insert(format!("{REPORT_DIR}/{f}"), hash_file(&dir.join(f))?);
    }
    Ok((Status::Ok, inputs, outputs))
}

fn run_stage(ctx: &Ctx, stage: Stage) -> Result<Status> {
    let start = Instant::now();
    let (status, inputs, outputs) = match stage {
        Stage::Simulate => simulate(ctx)?,
        Stage::Reduce => reduce(ctx)?,
        Stage::Identify => identify(ctx)?,
        Stage::Schedule => schedule(ctx)?,
        Stage::Validate => validate(ctx)?,
        Stage::Report => report(ctx)?,
        Stage::Pipeline => {
            let mut worst = Status::Ok;
            for s in [Stage::Simulate, Stage::Reduce, Stage::Identify, Stage::Schedule, Stage::Validate, Stage::Report] {
                if run_stage(ctx, s)? == Status::Infeasible {
                    worst = Status::Infeasible;
                }
            }
            return Ok(worst);
        }
    };
    let record = json!({
        "stage": format!("{stage:?}").to_lowercase(),
        "inputs": inputs,
        "outputs": outputs,
        "seed": ctx.cfg.seed,
        "status": if status == Status::Ok { "ok" } else { "infeasible" },
        "wall_time_s": start.elapsed().as_secs_f64(),
    });
    println!("{record}");
    Ok(status)
}

fn build_ctx(common: &CommonArgs) -> Result<Ctx> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(a) = common.arch {
        cfg.manifold.arch = a;
    }
    if let Some(p) = common.latent_dim {
        cfg.manifold.latent_dim = p;
    }
    if let Some(p) = &common.price {
        cfg.schedule.price = p.display().to_string();
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(Ctx {
        out: cfg.out.clone(),
        cfg,
    })
}

/// Parses `argv` (program name first), runs the stage and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Some(n) = cli.common.jobs {
        // A pool may already exist when called repeatedly in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let result = build_ctx(&cli.common).and_then(|ctx| run_stage(&ctx, cli.command));
    match result {
        Ok(Status::Ok) => 0,
        Ok(Status::Infeasible) => {
            eprintln!("schedule is infeasible on the surrogate model at every penalty level");
            2
        }
        Err(e) => {
            match &e {
                Error::MissingArtifact(p) => eprintln!("error: missing artifact {p}; run the upstream stage first"),
                other => eprintln!("error: {other}"),
            }
            1
        }
    }
}
