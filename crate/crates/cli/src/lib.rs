//! Experiment runner: efficiency comparisons, optimizer scoring sweeps,
//! orchestrator equivalence checks and single-iteration schedule traces.
//!
//! Every CSV row carries the SHA-256 of the canonical configuration and the
//! run seed in its last two columns. Output is byte-identical for identical
//! inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use pipelearn::cost_model::synthetic::RandomFamily;
use pipelearn::cost_model::{EpochShape, NetworkProfile};
use pipelearn::optimizer::{candidate_n, score_times, select_params, PipelineParams};
use pipelearn::orchestrator::{prepare, run_with_setup, ConfigError, RunConfig};
use pipelearn::sim::{exhaustive_search, simulate, DeviceSetup, ScheduleMode, SimConfig};

/// Built-in configuration used when `--config` is absent.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/efficiency.toml");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Efficiency,
    OptimizerScore,
    Equivalence,
    ScheduleTrace,
}

/// Profile family sampled by the optimizer sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Weak,
    Mixed,
}

impl Family {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "weak" => Some(Family::Weak),
            "mixed" => Some(Family::Mixed),
            _ => None,
        }
    }

    pub fn profiles(self) -> RandomFamily {
        match self {
            Family::Weak => RandomFamily::weak_device(),
            Family::Mixed => RandomFamily::mixed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    /// Overrides the data seed; the optimizer sweep samples profile seeds
    /// `seed..seed + profiles`.
    pub seed: Option<u64>,
    pub preset: Option<String>,
    pub mode: Option<ScheduleMode>,
    pub profiles: usize,
    pub family: Family,
    /// Fail with exit code 3 when the scenario's expectations do not hold.
    pub check: bool,
}

impl ExperimentSpec {
    pub fn new(scenario: Scenario, out: impl Into<PathBuf>) -> Self {
        Self {
            scenario,
            config: None,
            out: out.into(),
            seed: None,
            preset: None,
            mode: None,
            profiles: 100,
            family: Family::Weak,
            check: false,
        }
    }
}

/// Files written and a human-readable summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| CliError::Config(format!("reading {}: {e}", p.display())))?,
        None => DEFAULT_CONFIG.to_string(),
    };
    RunConfig::from_toml(&text).map_err(|e| match path {
        Some(p) => CliError::Config(format!("{}: {e}", p.display())),
        None => e.into(),
    })
}

/// Hex SHA-256 of the canonical TOML form.
pub fn config_hash(config: &RunConfig) -> String {
    format!("{:x}", Sha256::digest(config.to_toml().as_bytes()))
}

fn presets(filter: Option<&str>) -> Result<Vec<NetworkProfile>> {
    match filter {
        Some(name) => Ok(vec![NetworkProfile::preset(name).map_err(|e| CliError::Config(e.to_string()))?]),
        None => Ok(NetworkProfile::presets()),
    }
}

pub fn run(spec: &ExperimentSpec) -> Result<Report> {
    let mut config = load_config(spec.config.as_deref())?;
    if let Some(seed) = spec.seed {
        config.data.seed = seed;
    }
    if matches!(spec.scenario, Scenario::Equivalence | Scenario::ScheduleTrace) {
        if let Some(m) = spec.mode {
            config.training.mode = m;
        }
    }
    if spec.scenario == Scenario::ScheduleTrace {
        if let Some(p) = &spec.preset {
            config.network = NetworkProfile::preset(p).map_err(|e| CliError::Config(e.to_string()))?;
        }
    }
    let seed = config.data.seed;
    let hash = config_hash(&config);
    fs::create_dir_all(&spec.out)
        .map_err(|e| runtime(format!("creating {}: {e}", spec.out.display())))?;
    let stamp = Stamp { hash, seed };
    match spec.scenario {
        Scenario::Efficiency => {
            let modes = match spec.mode {
                Some(m) => vec![m],
                None => vec![
                    ScheduleMode::PipeLearnParallelServer,
                    ScheduleMode::ConventionalSplit,
                    ScheduleMode::FederatedLocal,
                ],
            };
            let mut rows = efficiency(&config, &presets(spec.preset.as_deref())?, &modes)?;
            let file = write_csv(&spec.out, "efficiency.csv", &mut rows, &stamp)?;
            let summary = efficiency_summary(&rows);
            if spec.check {
                check_efficiency(&rows)?;
            }
            Ok(Report {
                files: vec![file],
                summary,
            })
        }
        Scenario::OptimizerScore => {
            let shape = EpochShape::new(config.data.samples_per_device, config.training.batch_size)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let nets = presets(spec.preset.as_deref())?;
            let seeds: Vec<u64> = (0..spec.profiles as u64).map(|i| seed.wrapping_add(i)).collect();
            let (mut rows, mut fixed) = optimizer_scores(spec.family, &seeds, &nets, &shape)?;
            let files = vec![
                write_csv(&spec.out, "opt_score.csv", &mut rows, &stamp)?,
                write_csv(&spec.out, "opt_score_fixed_p.csv", &mut fixed, &stamp)?,
            ];
            let stats = ScoreStats::of(rows.iter().map(|r| r.score));
            let summary = stats.summary();
            if spec.check && !stats.meets_target() {
                return Err(CliError::Check(summary));
            }
            Ok(Report { files, summary })
        }
        Scenario::Equivalence => {
            let mut rows = equivalence(&config)?;
            let file = write_csv(&spec.out, "equivalence.csv", &mut rows, &stamp)?;
            let summary = equivalence_summary(&rows);
            if spec.check {
                if let Some(bad) = rows.iter().find(|r| r.max_param_delta > 1e-6 || r.loss_delta > 1e-6) {
                    return Err(CliError::Check(format!(
                        "epoch {}: parameter delta {:e}, loss delta {:e}",
                        bad.epoch, bad.max_param_delta, bad.loss_delta
                    )));
                }
            }
            Ok(Report {
                files: vec![file],
                summary,
            })
        }
        Scenario::ScheduleTrace => {
            let mut rows = schedule_trace(&config)?;
            let file = write_csv(&spec.out, "trace.csv", &mut rows, &stamp)?;
            let makespan = rows.iter().map(|r| r.end_s).fold(0.0, f64::max);
            Ok(Report {
                files: vec![file],
                summary: format!("{} intervals, iteration makespan {makespan} s\n", rows.len()),
            })
        }
    }
}

struct Stamp {
    hash: String,
    seed: u64,
}

trait Stamped {
    fn stamp(&mut self, stamp: &Stamp);
}

macro_rules! stamped {
    ($($t:ty),*) => {$(
        impl Stamped for $t {
            fn stamp(&mut self, stamp: &Stamp) {
                self.config_sha256 = stamp.hash.clone();
                self.seed = stamp.seed;
            }
        }
    )*};
}

stamped!(EfficiencyRow, ScoreRow, FixedSplitRow, EquivalenceRow, TraceRow);

fn write_csv<T: Serialize + Stamped>(dir: &Path, name: &str, rows: &mut [T], stamp: &Stamp) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    for row in rows.iter_mut() {
        row.stamp(stamp);
        w.serialize(&*row).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    Ok(path)
}

/// One simulated epoch of one mode on one network preset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyRow {
    pub mode: String,
    pub preset: String,
    pub split: usize,
    pub batches: usize,
    pub epoch_time_s: f64,
    pub server_idle_s: f64,
    pub mean_device_idle_s: f64,
    pub transmitted_mb: f64,
    pub throughput_mbps: f64,
    pub config_sha256: String,
    pub seed: u64,
}

/// Simulated epoch of every mode on every preset, all devices sharing the
/// configured profile and dataset size.
pub fn efficiency(config: &RunConfig, nets: &[NetworkProfile], modes: &[ScheduleMode]) -> Result<Vec<EfficiencyRow>> {
    let shape = EpochShape::new(config.data.samples_per_device, config.training.batch_size)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let sim = SimConfig {
        aggregation_secs_per_mparam: config.profile.aggregation_secs_per_mparam,
        ..SimConfig::default()
    };
    let mut rows = Vec::new();
    for net in nets {
        for &mode in modes {
            let mut cfg = config.clone();
            cfg.network = net.clone();
            cfg.training.mode = mode;
            let setup = prepare(&cfg).map_err(runtime)?;
            let devices: Vec<DeviceSetup> = setup
                .params
                .iter()
                .map(|&params| DeviceSetup {
                    params,
                    profiles: setup.profiles.clone(),
                    net: net.clone(),
                    shape,
                })
                .collect();
            let m = simulate(mode, &devices, &sim).map_err(runtime)?;
            rows.push(EfficiencyRow {
                mode: mode.name().to_string(),
                preset: net.name.clone(),
                split: setup.params[0].split,
                batches: setup.params[0].batches,
                epoch_time_s: m.makespan,
                server_idle_s: m.server_idle,
                mean_device_idle_s: m.device_idle.iter().sum::<f64>() / m.device_idle.len() as f64,
                transmitted_mb: m.transmitted_mb,
                throughput_mbps: m.avg_throughput_mbps,
                config_sha256: String::new(),
                seed: 0,
            });
        }
    }
    Ok(rows)
}

fn efficiency_summary(rows: &[EfficiencyRow]) -> String {
    let mut s = format!(
        "{:<14} {:<6} {:>3} {:>4} {:>14} {:>14} {:>14} {:>12}\n",
        "mode", "preset", "P", "N", "epoch_s", "server_idle_s", "device_idle_s", "tput_mbps"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<14} {:<6} {:>3} {:>4} {:>14.3} {:>14.3} {:>14.3} {:>12.3}",
            r.mode,
            r.preset,
            r.split,
            r.batches,
            r.epoch_time_s,
            r.server_idle_s,
            r.mean_device_idle_s,
            r.throughput_mbps
        );
    }
    s
}

fn check_efficiency(rows: &[EfficiencyRow]) -> Result<()> {
    let find = |mode: ScheduleMode, preset: &str| rows.iter().find(|r| r.mode == mode.name() && r.preset == preset);
    for r in rows.iter().filter(|r| r.mode == ScheduleMode::PipeLearnParallelServer.name()) {
        if let Some(fl) = find(ScheduleMode::FederatedLocal, &r.preset) {
            if r.throughput_mbps <= fl.throughput_mbps {
                return Err(CliError::Check(format!(
                    "{}: pipelearn throughput {} not above fl {}",
                    r.preset, r.throughput_mbps, fl.throughput_mbps
                )));
            }
        }
    }
    Ok(())
}

/// Optimizer selection against the exhaustive simulation oracle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub profile_seed: u64,
    pub preset: String,
    pub layers: usize,
    pub selected_split: usize,
    pub selected_batches: usize,
    pub estimated_time_s: f64,
    pub selected_time_s: f64,
    pub oracle_split: usize,
    pub oracle_batches: usize,
    pub oracle_time_s: f64,
    pub score: f64,
    pub config_sha256: String,
    pub seed: u64,
}

/// Formula `N` at a fixed split point against the best `N` at that point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedSplitRow {
    pub profile_seed: u64,
    pub preset: String,
    pub split: usize,
    pub selected_batches: usize,
    pub selected_time_s: f64,
    pub oracle_batches: usize,
    pub oracle_time_s: f64,
    pub score: f64,
    pub config_sha256: String,
    pub seed: u64,
}

fn score_profile(
    family: Family,
    seed: u64,
    nets: &[NetworkProfile],
    shape: &EpochShape,
) -> Result<(Vec<ScoreRow>, Vec<FixedSplitRow>)> {
    let profiles = family.profiles().sample(seed);
    let q = profiles.len();
    let mut rows = Vec::new();
    let mut fixed = Vec::new();
    for net in nets {
        let sel = select_params(&profiles, net, shape).map_err(runtime)?;
        let oracle = exhaustive_search(
            &profiles,
            net,
            shape,
            ScheduleMode::PipeLearnParallelServer,
            1..=q,
            1..=shape.batch_size,
            &SimConfig::default(),
        )
        .map_err(runtime)?;
        let time_of = |p: PipelineParams| {
            oracle
                .table
                .iter()
                .find(|(c, _)| *c == p)
                .map(|(_, t)| *t)
                .expect("grid covers every candidate")
        };
        let selected = time_of(sel.params);
        rows.push(ScoreRow {
            profile_seed: seed,
            preset: net.name.clone(),
            layers: q,
            selected_split: sel.params.split,
            selected_batches: sel.params.batches,
            estimated_time_s: sel.estimated_time,
            selected_time_s: selected,
            oracle_split: oracle.best.split,
            oracle_batches: oracle.best.batches,
            oracle_time_s: oracle.best_time,
            score: score_times(oracle.best_time, selected).map_err(runtime)?,
            config_sha256: String::new(),
            seed: 0,
        });
        for split in 1..=q {
            let n = candidate_n(split, &profiles, net, shape.batch_size).map_err(runtime)?;
            let (best, best_time) = oracle
                .table
                .iter()
                .filter(|(c, _)| c.split == split)
                .fold((PipelineParams::new(split, 1), f64::INFINITY), |acc, &(c, t)| {
                    if t < acc.1 {
                        (c, t)
                    } else {
                        acc
                    }
                });
            let t = time_of(PipelineParams::new(split, n));
            fixed.push(FixedSplitRow {
                profile_seed: seed,
                preset: net.name.clone(),
                split,
                selected_batches: n,
                selected_time_s: t,
                oracle_batches: best.batches,
                oracle_time_s: best_time,
                score: score_times(best_time, t).map_err(runtime)?,
                config_sha256: String::new(),
                seed: 0,
            });
        }
    }
    Ok((rows, fixed))
}

/// Scores every `(profile seed, preset)` pair; profiles are spread over the
/// available cores and results are returned in seed order.
pub fn optimizer_scores(
    family: Family,
    seeds: &[u64],
    nets: &[NetworkProfile],
    shape: &EpochShape,
) -> Result<(Vec<ScoreRow>, Vec<FixedSplitRow>)> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len().max(1));
    let chunk = seeds.len().div_ceil(workers.max(1)).max(1);
    let parts: Vec<Result<(Vec<ScoreRow>, Vec<FixedSplitRow>)>> = thread::scope(|s| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    let mut rows = Vec::new();
                    let mut fixed = Vec::new();
                    for &seed in part {
                        let (r, f) = score_profile(family, seed, nets, shape)?;
                        rows.extend(r);
                        fixed.extend(f);
                    }
                    Ok((rows, fixed))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut rows = Vec::new();
    let mut fixed = Vec::new();
    for part in parts {
        let (r, f) = part?;
        rows.extend(r);
        fixed.extend(f);
    }
    Ok((rows, fixed))
}

/// Distribution of scores against the 0.95 / 0.90 targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreStats {
    pub cases: usize,
    pub at_least_095: usize,
    pub at_least_090: usize,
    pub min: f64,
    pub mean: f64,
}

impl ScoreStats {
    pub fn of(scores: impl IntoIterator<Item = f64>) -> Self {
        let scores: Vec<f64> = scores.into_iter().collect();
        let cases = scores.len();
        Self {
            cases,
            at_least_095: scores.iter().filter(|&&s| s >= 0.95).count(),
            at_least_090: scores.iter().filter(|&&s| s >= 0.90).count(),
            min: scores.iter().copied().fold(f64::INFINITY, f64::min),
            mean: scores.iter().sum::<f64>() / cases.max(1) as f64,
        }
    }

    /// At least 90% of cases score 0.95 or more and none falls below 0.90.
    pub fn meets_target(&self) -> bool {
        self.cases > 0 && self.at_least_095 * 10 >= self.cases * 9 && self.at_least_090 == self.cases
    }

    pub fn summary(&self) -> String {
        format!(
            "{} cases: {} >= 0.95, {} >= 0.90, min {:.4}, mean {:.4}\n",
            self.cases, self.at_least_095, self.at_least_090, self.min, self.mean
        )
    }
}

/// Configured split mode against the federated reference, per epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceRow {
    pub epoch: usize,
    pub max_param_delta: f64,
    pub split_validation_loss: f64,
    pub fl_validation_loss: f64,
    pub loss_delta: f64,
    pub split_train_loss: f64,
    pub fl_train_loss: f64,
    pub config_sha256: String,
    pub seed: u64,
}

pub fn equivalence(config: &RunConfig) -> Result<Vec<EquivalenceRow>> {
    let mode = config.training.mode;
    if !mode.is_split() {
        return Err(CliError::Config(format!("equivalence needs a split mode, got {mode}")));
    }
    let mut cfg = config.clone();
    cfg.training.convergence = None;
    let setup = prepare(&cfg).map_err(runtime)?;
    let split = run_with_setup(&cfg, &setup, mode).map_err(runtime)?;
    let fl = run_with_setup(&cfg, &setup, ScheduleMode::FederatedLocal).map_err(runtime)?;
    Ok(split
        .epochs
        .iter()
        .zip(&fl.epochs)
        .map(|(a, b)| EquivalenceRow {
            epoch: a.epoch,
            max_param_delta: a.global_model.max_param_diff(&b.global_model),
            split_validation_loss: a.validation_loss,
            fl_validation_loss: b.validation_loss,
            loss_delta: (a.validation_loss - b.validation_loss).abs(),
            split_train_loss: a.train_loss,
            fl_train_loss: b.train_loss,
            config_sha256: String::new(),
            seed: 0,
        })
        .collect())
}

fn equivalence_summary(rows: &[EquivalenceRow]) -> String {
    let mut s = format!("{:>5} {:>16} {:>16}\n", "epoch", "max_param_delta", "loss_delta");
    for r in rows {
        let _ = writeln!(s, "{:>5} {:>16.3e} {:>16.3e}", r.epoch, r.max_param_delta, r.loss_delta);
    }
    s
}

/// One occupied interval of a lane.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub lane: String,
    pub device: usize,
    pub batch: usize,
    pub task: String,
    pub start_s: f64,
    pub end_s: f64,
    pub megabits: f64,
    pub config_sha256: String,
    pub seed: u64,
}

/// Lane intervals of a single training iteration of the configured mode.
pub fn schedule_trace(config: &RunConfig) -> Result<Vec<TraceRow>> {
    let setup = prepare(config).map_err(runtime)?;
    let b = config.training.batch_size;
    let shape = EpochShape::new(b, b).map_err(|e| CliError::Config(e.to_string()))?;
    let devices: Vec<DeviceSetup> = setup
        .params
        .iter()
        .map(|&params| DeviceSetup {
            params,
            profiles: setup.profiles.clone(),
            net: config.network.clone(),
            shape,
        })
        .collect();
    let sim = SimConfig {
        include_aggregation: false,
        record_trace: true,
        ..SimConfig::default()
    };
    let m = simulate(config.training.mode, &devices, &sim).map_err(runtime)?;
    let mut trace = m.trace;
    trace.sort_by(|a, b| {
        a.start
            .total_cmp(&b.start)
            .then(a.resource.cmp(&b.resource))
            .then(a.label.cmp(&b.label))
    });
    Ok(trace
        .into_iter()
        .map(|r| TraceRow {
            lane: r.resource.to_string(),
            device: r.label.device,
            batch: r.label.batch,
            task: r.label.kind.name().to_string(),
            start_s: r.start,
            end_s: r.end,
            megabits: r.megabits,
            config_sha256: String::new(),
            seed: 0,
        })
        .collect())
}
