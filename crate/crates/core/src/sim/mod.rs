//! Deterministic discrete-event simulation of devices, a server and
//! bandwidth-limited links.
//!
//! A run builds a task DAG for one training epoch of every device (all
//! iterations, then the end-of-epoch model exchange) and executes it on
//! lanes: one compute lane per device, one uplink and one downlink channel
//! per device, and the server. Device and channel lanes run one task at a
//! time. The server lane depends on the [`ScheduleMode`]:
//!
//! * `PipeLearnParallelServer`: every resident server task progresses at rate
//!   `1/m` with `m` resident tasks (processor sharing), or without any
//!   contention when [`ServerContention::Unlimited`] is selected.
//! * `PipeLearnSequentialServer`: server stages run one at a time in the order
//!   (iteration, device, micro-batch).
//! * `ConventionalSplit`: one micro-batch per iteration, server stages served
//!   first-come first-served.
//! * `FederatedLocal`: devices train the full model; the server only
//!   aggregates.
//!
//! Same-time events are resolved by (device, iteration, micro-batch, stage
//! kind), so identical inputs always give identical traces.

mod engine;
mod metrics;

pub(crate) use metrics::from_records;
pub use metrics::{event_log_csv, LaneUsage, RunMetrics, TraceRecord};

use std::fmt;
use std::ops::RangeInclusive;

use thiserror::Error;

use crate::cost_model::{params_to_mb, CostError, EpochShape, LayerProfiles, NetworkProfile};
use crate::optimizer::PipelineParams;
use crate::stage_graph::{build_iteration_graph, stage_times, GraphError, Resource, StageKind};
use engine::{Engine, LanePolicy, Task, Timeline};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("simulation stalled after {finished} of {total} tasks")]
    Deadlock { finished: usize, total: usize },
    #[error("{0}")]
    Graph(#[from] GraphError),
    #[error("{0}")]
    Cost(#[from] CostError),
    #[error("invalid setup: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScheduleMode {
    PipeLearnParallelServer,
    PipeLearnSequentialServer,
    ConventionalSplit,
    FederatedLocal,
}

impl ScheduleMode {
    pub const ALL: [ScheduleMode; 4] = [
        ScheduleMode::PipeLearnParallelServer,
        ScheduleMode::PipeLearnSequentialServer,
        ScheduleMode::ConventionalSplit,
        ScheduleMode::FederatedLocal,
    ];

    /// Command-line name.
    pub fn name(self) -> &'static str {
        match self {
            ScheduleMode::PipeLearnParallelServer => "pipelearn",
            ScheduleMode::PipeLearnSequentialServer => "pipelearn-seq",
            ScheduleMode::ConventionalSplit => "sfl",
            ScheduleMode::FederatedLocal => "fl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn is_split(self) -> bool {
        self != ScheduleMode::FederatedLocal
    }
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Contention model of the server in `PipeLearnParallelServer` mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerContention {
    ProcessorSharing,
    Unlimited,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub contention: ServerContention,
    /// Every lane admits unlimited concurrent tasks: each task starts when its
    /// predecessors finish.
    pub unlimited_lanes: bool,
    /// Simulate the end-of-epoch model upload, aggregation and download.
    pub include_aggregation: bool,
    /// Server seconds to average one million parameters of one model.
    pub aggregation_secs_per_mparam: f64,
    /// Local epochs between aggregations in `FederatedLocal` mode.
    pub fl_local_epochs: usize,
    pub record_trace: bool,
    /// Simulate every iteration even when a single iteration could be
    /// replayed exactly.
    pub full_replay: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            contention: ServerContention::ProcessorSharing,
            unlimited_lanes: false,
            include_aggregation: true,
            aggregation_secs_per_mparam: 0.01,
            fl_local_epochs: 1,
            record_trace: false,
            full_replay: false,
        }
    }
}

/// What a simulated task does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Stage(StageKind),
    /// Full-model forward pass of local (federated) training.
    LocalForward,
    LocalBackward,
    ModelUpload,
    Aggregate,
    ModelDownload,
    /// Placeholder holding a device for a replayed span of iterations.
    Hold,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Stage(k) => k.symbol(),
            TaskKind::LocalForward => "local_f",
            TaskKind::LocalBackward => "local_b",
            TaskKind::ModelUpload => "model_up",
            TaskKind::Aggregate => "aggregate",
            TaskKind::ModelDownload => "model_down",
            TaskKind::Hold => "hold",
        }
    }
}

/// Identity of a task; its ordering is the simulator's tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskLabel {
    pub device: usize,
    pub iteration: usize,
    pub batch: usize,
    pub kind: TaskKind,
}

/// Everything the simulator needs about one device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSetup {
    pub params: PipelineParams,
    pub profiles: LayerProfiles,
    pub net: NetworkProfile,
    pub shape: EpochShape,
}

struct LaneMap {
    devices: usize,
}

impl LaneMap {
    fn count(&self) -> usize {
        3 * self.devices + 2
    }
    fn lane(&self, r: Resource) -> usize {
        match r {
            Resource::DeviceCompute(k) => k,
            Resource::Uplink(k) => self.devices + k,
            Resource::Downlink(k) => 2 * self.devices + k,
            Resource::ServerCompute => 3 * self.devices,
        }
    }
    fn hidden(&self) -> usize {
        3 * self.devices + 1
    }
    fn resources(&self) -> Vec<Resource> {
        lane_resources(self.devices)
    }
}

/// Lanes of a `devices`-device system in metrics order.
pub(crate) fn lane_resources(devices: usize) -> Vec<Resource> {
    (0..devices)
        .map(Resource::DeviceCompute)
        .chain(std::iter::once(Resource::ServerCompute))
        .chain((0..devices).map(Resource::Uplink))
        .chain((0..devices).map(Resource::Downlink))
        .collect()
}

fn policies(mode: ScheduleMode, map: &LaneMap, config: &SimConfig) -> Vec<LanePolicy> {
    let mut lanes = vec![LanePolicy::Exclusive; map.count()];
    lanes[map.hidden()] = LanePolicy::Unlimited;
    lanes[map.lane(Resource::ServerCompute)] = match mode {
        ScheduleMode::PipeLearnParallelServer => match config.contention {
            ServerContention::ProcessorSharing => LanePolicy::ProcessorSharing,
            ServerContention::Unlimited => LanePolicy::Unlimited,
        },
        ScheduleMode::PipeLearnSequentialServer => LanePolicy::Ordered,
        ScheduleMode::ConventionalSplit | ScheduleMode::FederatedLocal => LanePolicy::Exclusive,
    };
    if config.unlimited_lanes {
        lanes.iter_mut().for_each(|l| *l = LanePolicy::Unlimited);
    }
    lanes
}

fn sequence_key(label: &TaskLabel) -> (usize, usize, usize, usize) {
    let kind = match label.kind {
        TaskKind::Stage(k) => k.index(),
        _ => 6,
    };
    (label.iteration, label.device, label.batch, kind)
}

/// Parallel batch number actually used by `mode`.
fn effective_batches(mode: ScheduleMode, params: PipelineParams) -> usize {
    match mode {
        ScheduleMode::PipeLearnParallelServer | ScheduleMode::PipeLearnSequentialServer => {
            params.batches
        }
        ScheduleMode::ConventionalSplit | ScheduleMode::FederatedLocal => 1,
    }
}

fn validate(mode: ScheduleMode, dev: &DeviceSetup) -> Result<(), SimError> {
    let q = dev.profiles.len();
    if mode.is_split() && (dev.params.split == 0 || dev.params.split > q) {
        return Err(GraphError::SplitOutOfRange {
            point: dev.params.split,
            layers: q,
        }
        .into());
    }
    dev.shape.iterations(effective_batches(mode, dev.params))?;
    Ok(())
}

/// Appends `iterations` training iterations of device `k`; returns the index
/// of the last task, or `None` when no task was added.
fn push_iterations(
    tasks: &mut Vec<Task>,
    mode: ScheduleMode,
    k: usize,
    dev: &DeviceSetup,
    iterations: usize,
    map: &LaneMap,
) -> Result<Option<usize>, SimError> {
    let mut last: Option<usize> = None;
    if mode == ScheduleMode::FederatedLocal {
        let fwd: f64 = dev.profiles.layers().iter().map(|l| l.device_forward).sum();
        let bwd: f64 = dev.profiles.layers().iter().map(|l| l.device_backward).sum();
        let lane = map.lane(Resource::DeviceCompute(k));
        for i in 0..iterations {
            for (kind, duration) in [(TaskKind::LocalForward, fwd), (TaskKind::LocalBackward, bwd)] {
                tasks.push(Task {
                    label: TaskLabel {
                        device: k,
                        iteration: i,
                        batch: 1,
                        kind,
                    },
                    resource: Resource::DeviceCompute(k),
                    lane,
                    duration,
                    megabits: 0.0,
                    hidden: false,
                    preds: last.into_iter().collect(),
                });
                last = Some(tasks.len() - 1);
            }
        }
        return Ok(last);
    }

    let n = effective_batches(mode, dev.params);
    let split = dev.params.split;
    let graph = build_iteration_graph(n, k)?;
    let times = stage_times(split, n, &dev.profiles, &dev.net)?;
    let cut = &dev.profiles.layers()[split - 1];
    let up_mb = cut.forward_volume_mb / n as f64;
    let down_mb = cut.backward_volume_mb / n as f64;
    let source = graph.index_of(graph.source()).expect("source");
    let sink = graph.index_of(graph.sink()).expect("sink");
    for i in 0..iterations {
        let base = tasks.len();
        for idx in 0..graph.len() {
            let stage = graph.stage(idx);
            let mut preds: Vec<usize> = graph.prev_indices(idx).iter().map(|&p| base + p).collect();
            if idx == source {
                preds.extend(last);
            }
            let megabits = match stage.kind {
                StageKind::Upload => up_mb,
                StageKind::Download => down_mb,
                _ => 0.0,
            };
            let resource = stage.kind.resource(k);
            tasks.push(Task {
                label: TaskLabel {
                    device: k,
                    iteration: i,
                    batch: stage.batch,
                    kind: TaskKind::Stage(stage.kind),
                },
                resource,
                lane: map.lane(resource),
                duration: times.get(stage.kind, stage.batch),
                megabits,
                hidden: false,
                preds,
            });
        }
        last = Some(base + sink);
    }
    Ok(last)
}

fn model_exchange_mb(mode: ScheduleMode, dev: &DeviceSetup) -> f64 {
    if mode.is_split() {
        params_to_mb(dev.profiles.device_params(dev.params.split))
    } else {
        params_to_mb(dev.profiles.total_params())
    }
}

/// Appends upload → aggregate → download after each device's `tails`.
fn push_aggregation(
    tasks: &mut Vec<Task>,
    mode: ScheduleMode,
    devices: &[DeviceSetup],
    tails: &[Option<usize>],
    config: &SimConfig,
    map: &LaneMap,
    after_iteration: usize,
) {
    let mut uploads = Vec::with_capacity(devices.len());
    for (k, dev) in devices.iter().enumerate() {
        let mb = model_exchange_mb(mode, dev);
        tasks.push(Task {
            label: TaskLabel {
                device: k,
                iteration: after_iteration,
                batch: 0,
                kind: TaskKind::ModelUpload,
            },
            resource: Resource::Uplink(k),
            lane: map.lane(Resource::Uplink(k)),
            duration: mb / dev.net.uplink_mbps,
            megabits: mb,
            hidden: false,
            preds: tails[k].into_iter().collect(),
        });
        uploads.push(tasks.len() - 1);
    }
    let mparams: f64 = devices
        .iter()
        .map(|d| d.profiles.total_params() as f64 / 1e6)
        .sum();
    tasks.push(Task {
        label: TaskLabel {
            device: 0,
            iteration: after_iteration,
            batch: 0,
            kind: TaskKind::Aggregate,
        },
        resource: Resource::ServerCompute,
        lane: map.lane(Resource::ServerCompute),
        duration: config.aggregation_secs_per_mparam * mparams,
        megabits: 0.0,
        hidden: false,
        preds: uploads,
    });
    let aggregate = tasks.len() - 1;
    for (k, dev) in devices.iter().enumerate() {
        let mb = model_exchange_mb(mode, dev);
        tasks.push(Task {
            label: TaskLabel {
                device: k,
                iteration: after_iteration,
                batch: 0,
                kind: TaskKind::ModelDownload,
            },
            resource: Resource::Downlink(k),
            lane: map.lane(Resource::Downlink(k)),
            duration: mb / dev.net.downlink_mbps,
            megabits: mb,
            hidden: false,
            preds: vec![aggregate],
        });
    }
}

fn iterations_of(mode: ScheduleMode, dev: &DeviceSetup, config: &SimConfig) -> Result<usize, SimError> {
    let base = dev.shape.iterations(effective_batches(mode, dev.params))?;
    Ok(if mode == ScheduleMode::FederatedLocal {
        base * config.fl_local_epochs.max(1)
    } else {
        base
    })
}

/// Simulates one epoch of `mode` for the given devices.
pub fn simulate(
    mode: ScheduleMode,
    devices: &[DeviceSetup],
    config: &SimConfig,
) -> Result<RunMetrics, SimError> {
    if devices.is_empty() {
        return Err(SimError::Setup("at least one device is required".into()));
    }
    if !(config.aggregation_secs_per_mparam >= 0.0) {
        return Err(SimError::Setup("aggregation cost must be non-negative".into()));
    }
    for dev in devices {
        validate(mode, dev)?;
    }
    let map = LaneMap {
        devices: devices.len(),
    };
    let lanes = policies(mode, &map, config);
    // Iteration boundaries are quiescent: the final device backward stage
    // depends on every other stage of its iteration. Devices that never
    // share a lane before the model exchange can therefore replay one
    // simulated iteration.
    let independent = devices.len() == 1 || mode == ScheduleMode::FederatedLocal || config.unlimited_lanes;
    if independent && !config.full_replay {
        replay(mode, devices, config, &map, &lanes)
    } else {
        full(mode, devices, config, &map, &lanes)
    }
}

fn full(
    mode: ScheduleMode,
    devices: &[DeviceSetup],
    config: &SimConfig,
    map: &LaneMap,
    lanes: &[LanePolicy],
) -> Result<RunMetrics, SimError> {
    let mut tasks = Vec::new();
    let mut tails = Vec::with_capacity(devices.len());
    let mut iterations = Vec::with_capacity(devices.len());
    for (k, dev) in devices.iter().enumerate() {
        let its = iterations_of(mode, dev, config)?;
        iterations.push(its);
        tails.push(push_iterations(&mut tasks, mode, k, dev, its, map)?);
    }
    if config.include_aggregation {
        let after = iterations.iter().copied().max().unwrap_or(0);
        push_aggregation(&mut tasks, mode, devices, &tails, config, map, after);
    }
    let timeline = Engine::new(tasks, lanes, sequence_key).run()?;
    let mut acc = metrics::Accumulator::new(map.resources(), config.record_trace);
    acc.add_timeline(&timeline);
    Ok(acc.finish(mode, iterations))
}

fn replay(
    mode: ScheduleMode,
    devices: &[DeviceSetup],
    config: &SimConfig,
    map: &LaneMap,
    lanes: &[LanePolicy],
) -> Result<RunMetrics, SimError> {
    let mut acc = metrics::Accumulator::new(map.resources(), config.record_trace);
    let mut tail_tasks = Vec::new();
    let mut holds = Vec::with_capacity(devices.len());
    let mut iterations = Vec::with_capacity(devices.len());
    for (k, dev) in devices.iter().enumerate() {
        let its = iterations_of(mode, dev, config)?;
        iterations.push(its);
        let mut tasks = Vec::new();
        push_iterations(&mut tasks, mode, k, dev, 1, map)?;
        let one: Timeline = Engine::new(tasks, lanes, sequence_key).run()?;
        let span = one.finish.iter().copied().fold(0.0, f64::max);
        acc.add_periodic(&one, span, its);
        tail_tasks.push(Task {
            label: TaskLabel {
                device: k,
                iteration: its,
                batch: 0,
                kind: TaskKind::Hold,
            },
            resource: Resource::DeviceCompute(k),
            lane: map.hidden(),
            duration: span * its as f64,
            megabits: 0.0,
            hidden: true,
            preds: Vec::new(),
        });
        holds.push(Some(tail_tasks.len() - 1));
    }
    if config.include_aggregation {
        let after = iterations.iter().copied().max().unwrap_or(0);
        push_aggregation(&mut tail_tasks, mode, devices, &holds, config, map, after);
    }
    let tail = Engine::new(tail_tasks, lanes, sequence_key).run()?;
    acc.add_timeline(&tail);
    Ok(acc.finish(mode, iterations))
}

/// Classic federated learning: `devices` identical devices train the full
/// model for `epochs_per_round` local epochs, then exchange models.
pub fn simulate_fl(
    profiles: &LayerProfiles,
    net: &NetworkProfile,
    shape: &EpochShape,
    devices: usize,
    epochs_per_round: usize,
    config: &SimConfig,
) -> Result<RunMetrics, SimError> {
    let setup = DeviceSetup {
        params: PipelineParams {
            split: profiles.len(),
            batches: 1,
        },
        profiles: profiles.clone(),
        net: net.clone(),
        shape: *shape,
    };
    let cfg = SimConfig {
        fl_local_epochs: epochs_per_round,
        ..config.clone()
    };
    simulate(ScheduleMode::FederatedLocal, &vec![setup; devices], &cfg)
}

/// Every simulated grid point of an exhaustive search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best: PipelineParams,
    pub best_time: f64,
    pub table: Vec<(PipelineParams, f64)>,
}

/// Simulates a single device for every `(P, N)` in the grid and returns the
/// fastest, preferring smaller `P`, then smaller `N`, on ties.
pub fn exhaustive_search(
    profiles: &LayerProfiles,
    net: &NetworkProfile,
    shape: &EpochShape,
    mode: ScheduleMode,
    splits: RangeInclusive<usize>,
    batches: RangeInclusive<usize>,
    config: &SimConfig,
) -> Result<SearchResult, SimError> {
    if splits.is_empty() || batches.is_empty() {
        return Err(SimError::Setup("empty search range".into()));
    }
    let mut table = Vec::new();
    let mut best: Option<(PipelineParams, f64)> = None;
    for split in splits {
        for n in batches.clone() {
            let params = PipelineParams { split, batches: n };
            let setup = DeviceSetup {
                params,
                profiles: profiles.clone(),
                net: net.clone(),
                shape: *shape,
            };
            let t = simulate(mode, std::slice::from_ref(&setup), config)?.makespan;
            if best.is_none_or(|(_, bt)| t < bt) {
                best = Some((params, t));
            }
            table.push((params, t));
        }
    }
    let (best, best_time) = best.expect("non-empty grid");
    Ok(SearchResult {
        best,
        best_time,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_model::synthetic::RandomFamily;
    use crate::stage_graph::estimate_makespan;

    fn setup(profiles: &LayerProfiles, split: usize, batches: usize, dataset: usize) -> DeviceSetup {
        DeviceSetup {
            params: PipelineParams { split, batches },
            profiles: profiles.clone(),
            net: NetworkProfile::preset("4g").unwrap(),
            shape: EpochShape::new(dataset, 100).unwrap(),
        }
    }

    fn no_aggregation() -> SimConfig {
        SimConfig {
            include_aggregation: false,
            ..SimConfig::default()
        }
    }

    #[test]
    fn single_device_matches_estimate() {
        let family = RandomFamily::mixed();
        for seed in 0..40 {
            let p = family.sample(seed);
            let split = 1 + seed as usize % p.len();
            let n = 1 + seed as usize % 9;
            let dev = setup(&p, split, n, 100);
            let m = simulate(ScheduleMode::PipeLearnParallelServer, std::slice::from_ref(&dev), &no_aggregation()).unwrap();
            let graph = build_iteration_graph(n, 0).unwrap();
            let times = stage_times(split, n, &p, &dev.net).unwrap();
            let dp = estimate_makespan(&graph, &times).unwrap();
            assert!((m.makespan - dp).abs() < 1e-9, "seed {seed}: {} vs {dp}", m.makespan);
        }
    }

    #[test]
    fn replay_equals_full_simulation() {
        let family = RandomFamily::mixed();
        for seed in 0..10 {
            let p = family.sample(seed);
            let dev = setup(&p, 1, 4, 1000);
            for mode in ScheduleMode::ALL {
                let fast = simulate(mode, std::slice::from_ref(&dev), &SimConfig::default()).unwrap();
                let full_cfg = SimConfig {
                    full_replay: true,
                    ..SimConfig::default()
                };
                let full = simulate(mode, std::slice::from_ref(&dev), &full_cfg).unwrap();
                assert!((fast.makespan - full.makespan).abs() < 1e-9 * full.makespan);
                assert!((fast.server_busy - full.server_busy).abs() < 1e-9 * full.makespan);
                assert!((fast.transmitted_mb - full.transmitted_mb).abs() < 1e-9 * full.transmitted_mb);
            }
        }
    }

    #[test]
    fn traced_replay_equals_full_trace() {
        let p = RandomFamily::mixed().sample(3);
        let dev = setup(&p, 1, 3, 300);
        let fast_cfg = SimConfig {
            record_trace: true,
            ..SimConfig::default()
        };
        let full_cfg = SimConfig {
            full_replay: true,
            ..fast_cfg.clone()
        };
        let fast = simulate(ScheduleMode::PipeLearnParallelServer, std::slice::from_ref(&dev), &fast_cfg).unwrap();
        let full = simulate(ScheduleMode::PipeLearnParallelServer, &[dev], &full_cfg).unwrap();
        assert_eq!(fast.trace.len(), full.trace.len());
        for (a, b) in fast.trace.iter().zip(&full.trace) {
            assert_eq!(a.label, b.label);
            assert!((a.start - b.start).abs() < 1e-9 && (a.end - b.end).abs() < 1e-9);
        }
    }

    #[test]
    fn sequential_server_delays_second_device() {
        let p = RandomFamily::weak_device().sample(11);
        let devs = vec![setup(&p, 1, 4, 100), setup(&p, 1, 4, 100)];
        let cfg = SimConfig {
            record_trace: true,
            include_aggregation: false,
            contention: ServerContention::Unlimited,
            ..SimConfig::default()
        };
        let par = simulate(ScheduleMode::PipeLearnParallelServer, &devs, &cfg).unwrap();
        let seq = simulate(ScheduleMode::PipeLearnSequentialServer, &devs, &cfg).unwrap();
        let bc_starts = |m: &RunMetrics| -> Vec<f64> {
            m.lane_trace(Resource::DeviceCompute(1))
                .into_iter()
                .filter(|r| r.label.kind == TaskKind::Stage(StageKind::DeviceBackward))
                .map(|r| r.start)
                .collect()
        };
        for (s, p) in bc_starts(&seq).iter().zip(bc_starts(&par)) {
            assert!(*s > p, "{s} <= {p}");
        }
    }

    #[test]
    fn lanes_are_exclusive_and_conserve_time() {
        let p = RandomFamily::mixed().sample(5);
        let devs = vec![setup(&p, 2.min(p.len()), 3, 300), setup(&p, 1, 5, 300)];
        let cfg = SimConfig {
            record_trace: true,
            ..SimConfig::default()
        };
        for mode in ScheduleMode::ALL {
            let m = simulate(mode, &devs, &cfg).unwrap();
            for lane in &m.lanes {
                assert!((lane.busy + lane.idle - m.makespan).abs() < 1e-9, "{mode} {:?}", lane);
                let shared = mode == ScheduleMode::PipeLearnParallelServer && lane.resource == Resource::ServerCompute;
                if !shared {
                    let t = m.lane_trace(lane.resource);
                    for w in t.windows(2) {
                        assert!(w[1].start >= w[0].end - 1e-12, "{mode} overlap on {}", lane.resource);
                    }
                }
            }
            assert_eq!(m.avg_throughput_mbps, m.transmitted_mb / m.makespan);
        }
    }

    #[test]
    fn processor_sharing_stretches_concurrent_server_work() {
        let p = RandomFamily::weak_device().sample(2);
        let devs = vec![setup(&p, 1, 2, 100), setup(&p, 1, 2, 100)];
        let ps = simulate(ScheduleMode::PipeLearnParallelServer, &devs, &no_aggregation()).unwrap();
        let free_cfg = SimConfig {
            contention: ServerContention::Unlimited,
            ..no_aggregation()
        };
        let free = simulate(ScheduleMode::PipeLearnParallelServer, &devs, &free_cfg).unwrap();
        assert!(ps.makespan >= free.makespan);
        assert!(ps.makespan > free.makespan);
    }

    #[test]
    fn fl_server_only_aggregates() {
        let p = RandomFamily::mixed().sample(9);
        let shape = EpochShape::new(1000, 100).unwrap();
        let net = NetworkProfile::preset("wifi").unwrap();
        let cfg = SimConfig::default();
        let m = simulate_fl(&p, &net, &shape, 3, 1, &cfg).unwrap();
        let agg = cfg.aggregation_secs_per_mparam * 3.0 * p.total_params() as f64 / 1e6;
        assert!((m.server_busy - agg).abs() < 1e-12);
        let exchange = 2.0 * params_to_mb(p.total_params()) / 50.0;
        let device_idle = m.device_idle[0];
        assert!((device_idle - (exchange + agg)).abs() < 1e-9, "{device_idle}");
        assert_eq!(m.iterations, vec![10; 3]);
    }

    #[test]
    fn deterministic_traces() {
        let p = RandomFamily::mixed().sample(21);
        let devs = vec![setup(&p, 1, 3, 300), setup(&p, 1, 3, 300)];
        let cfg = SimConfig {
            record_trace: true,
            ..SimConfig::default()
        };
        let a = simulate(ScheduleMode::PipeLearnParallelServer, &devs, &cfg).unwrap();
        let b = simulate(ScheduleMode::PipeLearnParallelServer, &devs, &cfg).unwrap();
        assert_eq!(event_log_csv(&a), event_log_csv(&b));
        assert!(event_log_csv(&a).starts_with("time_s,event,lane"));
    }

    #[test]
    fn exhaustive_search_grid() {
        let p = RandomFamily::mixed().sample(1);
        let shape = EpochShape::new(1000, 100).unwrap();
        let net = NetworkProfile::preset("4g").unwrap();
        let mode = ScheduleMode::PipeLearnParallelServer;
        let cfg = SimConfig::default();
        let one = exhaustive_search(&p, &net, &shape, mode, 1..=1, 2..=2, &cfg).unwrap();
        assert_eq!(one.best, PipelineParams { split: 1, batches: 2 });
        let all = exhaustive_search(&p, &net, &shape, mode, 1..=p.len(), 1..=6, &cfg).unwrap();
        assert_eq!(all.table.len(), p.len() * 6);
        assert!(all.table.iter().all(|(_, t)| *t >= all.best_time));
        #[allow(clippy::reversed_empty_ranges)]
        let empty = exhaustive_search(&p, &net, &shape, mode, 2..=1, 1..=1, &cfg);
        assert!(empty.is_err());
    }

    #[test]
    fn rejects_bad_setups() {
        let p = RandomFamily::mixed().sample(1);
        let cfg = SimConfig::default();
        assert!(simulate(ScheduleMode::PipeLearnParallelServer, &[], &cfg).is_err());
        let bad = setup(&p, p.len() + 1, 1, 100);
        assert!(simulate(ScheduleMode::PipeLearnParallelServer, &[bad], &cfg).is_err());
        let big_n = setup(&p, 1, 101, 100);
        assert!(simulate(ScheduleMode::PipeLearnParallelServer, &[big_n], &cfg).is_err());
        assert_eq!(ScheduleMode::parse("sfl"), Some(ScheduleMode::ConventionalSplit));
        assert_eq!(ScheduleMode::parse("x"), None);
    }
}
