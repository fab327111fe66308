//! End-to-end device/server training over in-process channels.
//!
//! Each device session owns the device-side model and its data; the server
//! keeps one server-side model per device. Per iteration a device runs the
//! forward pass of all `N` micro-batches, sends each activation batch with
//! its labels, and after all forward passes consumes the returned activation
//! gradients in order. Both sides then step with `eta / N` times the summed
//! micro-batch gradients. At the end of an epoch every device uploads its
//! model, the server joins it with the matching server-side model, averages
//! the complete models weighted by the number of samples it received from
//! each device, and sends back the device-side part of the result.
//!
//! Time is charged to a virtual clock from the cost profile (or from measured
//! wall time of the numeric work in [`Clock::Wall`] mode). Sessions are
//! advanced in lock step, one iteration at a time; server work is ordered per
//! [`ScheduleMode`] as in the simulator. The parallel server mode gives every
//! device an independent server session (no contention). Epochs start
//! together on all devices, and all reported times are relative to the start
//! of their epoch.

pub mod config;
pub mod data;
pub mod protocol;

pub use config::{
    Clock, ConfigError, Convergence, DataConfig, ModelConfig, ParamsChoice, ProfileConfig,
    ProfileSource, RunConfig, TrainingConfig,
};
pub use data::{accuracy, BlobTask, Dataset};
pub use protocol::{Channel, Envelope, Message, MessageRecord, Tag};

use std::time::Instant;

use thiserror::Error;

use crate::cost_model::format::parse_profile;
use crate::cost_model::synthetic::dense_profile;
use crate::cost_model::{params_to_mb, CostError, EpochShape, LayerProfiles};
use crate::nn::{
    backward, backward_from_output_grad, backward_with_loss, forward, loss_value, sgd_step,
    ForwardCache, Gradients, LossKind, Matrix, NnError, SequentialModel,
};
use crate::optimizer::{select_params, OptError, PipelineParams};
use crate::partition::{fedavg, join_models, split_model, ModelPair, PartitionError};
use crate::sim::{
    exhaustive_search, from_records, lane_resources, RunMetrics, ScheduleMode, SimConfig,
    SimError, TaskKind, TaskLabel, TraceRecord,
};
use crate::stage_graph::{stage_times, GraphError, Resource, StageKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrchestratorError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("training diverged in epoch {epoch}, device {device}, iteration {iteration}: {detail}")]
    Diverged {
        epoch: usize,
        device: usize,
        iteration: usize,
        detail: String,
    },
    #[error("{0}")]
    Nn(#[from] NnError),
    #[error("{0}")]
    Partition(#[from] PartitionError),
    #[error("{0}")]
    Cost(#[from] CostError),
    #[error("{0}")]
    Opt(#[from] OptError),
    #[error("{0}")]
    Sim(#[from] SimError),
    #[error("{0}")]
    Graph(#[from] GraphError),
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
}

type Result<T> = std::result::Result<T, OrchestratorError>;

/// Inputs shared by PipeLearn and the federated reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub initial_model: SequentialModel,
    pub datasets: Vec<Dataset>,
    pub validation: Dataset,
    pub profiles: LayerProfiles,
    pub loss: LossKind,
    /// Per-device `(P, N)` after resolving `auto`.
    pub params: Vec<PipelineParams>,
}

/// Builds the model, data, cost profile and per-device parameters of a run.
pub fn prepare(config: &RunConfig) -> Result<Setup> {
    config.validate()?;
    let m = &config.model;
    let model = SequentialModel::init(m.input_width, &m.layers, m.init_seed)?;
    let loss = LossKind::for_model(&model).expect("validated non-empty model");
    let out_width = model.output_width().expect("non-empty");
    let d = &config.data;
    let task = BlobTask::new(m.input_width, d.classes, out_width, d.seed);
    let datasets = (0..d.devices)
        .map(|k| task.sample(d.samples_per_device, d.seed.wrapping_add(1 + k as u64)))
        .collect();
    let validation = task.sample(d.validation_samples, d.seed ^ 0x005e_ed0f_da7a);
    let b = config.training.batch_size;
    let profiles = match &config.profile.source {
        ProfileSource::Dense {
            device_speed,
            server_speed,
        } => dense_profile(&model, *device_speed, *server_speed, b)?,
        ProfileSource::File(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| OrchestratorError::Io {
                path: path.clone(),
                message: e.to_string(),
            })?;
            let p = parse_profile(&text)?;
            if p.len() != model.len() {
                return Err(ConfigError::Invalid(format!(
                    "profile has {} layers, model has {}",
                    p.len(),
                    model.len()
                ))
                .into());
            }
            p
        }
    };
    let shape = EpochShape::new(d.samples_per_device, b)?;
    let q = model.len();
    let mode = config.training.mode;
    let params = match (&config.training.params, mode) {
        (_, ScheduleMode::FederatedLocal) => vec![PipelineParams::new(q, 1); d.devices],
        (ParamsChoice::Fixed(list), ScheduleMode::ConventionalSplit) => {
            if list.iter().any(|p| p.batches != 1) {
                return Err(ConfigError::Invalid(
                    "conventional split training uses one batch per iteration".into(),
                )
                .into());
            }
            list.clone()
        }
        (ParamsChoice::Fixed(list), _) => list.clone(),
        (ParamsChoice::Auto, ScheduleMode::ConventionalSplit) => {
            let search = exhaustive_search(
                &profiles,
                &config.network,
                &shape,
                mode,
                1..=q,
                1..=1,
                &SimConfig::default(),
            )?;
            vec![search.best; d.devices]
        }
        (ParamsChoice::Auto, _) => {
            let sel = select_params(&profiles, &config.network, &shape)?;
            vec![sel.params; d.devices]
        }
    };
    Ok(Setup {
        initial_model: model,
        datasets,
        validation,
        profiles,
        loss,
        params,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub metrics: RunMetrics,
    /// Row-weighted mean training loss over the epoch.
    pub train_loss: f64,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
    /// Samples the server received from each device (aggregation weights).
    pub received: Vec<usize>,
    /// Samples of each device left unused this epoch.
    pub dropped: Vec<usize>,
    /// Global model after this epoch's aggregation.
    pub global_model: SequentialModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub mode: ScheduleMode,
    pub params: Vec<PipelineParams>,
    pub global_model: SequentialModel,
    pub epochs: Vec<EpochReport>,
    pub messages: Vec<MessageRecord>,
    /// Early stopping fired before the configured epoch count.
    pub converged: bool,
}

impl TrainingRun {
    pub fn validation_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.validation_loss).collect()
    }
}

/// True once the best loss has not improved by more than `tol` for
/// `patience` consecutive epochs.
pub fn convergence_check(trace: &[f64], patience: usize, tol: f64) -> bool {
    let Some((&first, rest)) = trace.split_first() else {
        return false;
    };
    let mut best = first;
    let mut stale = 0;
    for &loss in rest {
        if loss < best - tol {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    stale >= patience
}

/// Runs the configured mode.
pub fn run_training(config: &RunConfig) -> Result<TrainingRun> {
    let setup = prepare(config)?;
    run_with_setup(config, &setup, config.training.mode)
}

/// Classic federated learning with full-batch local SGD on the same setup.
pub fn run_fl_reference(config: &RunConfig) -> Result<TrainingRun> {
    let setup = prepare(config)?;
    run_with_setup(config, &setup, ScheduleMode::FederatedLocal)
}

/// Runs `mode` on a prepared setup.
pub fn run_with_setup(config: &RunConfig, setup: &Setup, mode: ScheduleMode) -> Result<TrainingRun> {
    let mut trainer = Trainer::new(config, setup, mode)?;
    let mut epochs = Vec::new();
    let mut converged = false;
    for epoch in 1..=config.training.epochs {
        let report = trainer.epoch(epoch)?;
        epochs.push(report);
        if let Some(c) = config.training.convergence {
            let losses: Vec<f64> = epochs.iter().map(|e| e.validation_loss).collect();
            if convergence_check(&losses, c.patience, c.tol) {
                converged = epoch < config.training.epochs;
                break;
            }
        }
    }
    trainer.stop(epochs.len());
    Ok(TrainingRun {
        mode,
        params: trainer.params.clone(),
        global_model: trainer.global.clone(),
        epochs,
        messages: trainer.messages,
        converged,
    })
}

/// Per-micro-batch stage durations and transfer sizes of one device.
#[derive(Debug, Clone, Copy)]
struct StageCosts {
    fc: f64,
    up: f64,
    fs: f64,
    bs: f64,
    down: f64,
    bc: f64,
    up_mb: f64,
    down_mb: f64,
}

struct DeviceSession {
    model: SequentialModel,
    data: Dataset,
    params: PipelineParams,
    clock: f64,
    caches: Vec<ForwardCache>,
    grads: Gradients,
    costs: StageCosts,
}

struct ServerSession {
    model: SequentialModel,
    grads: Gradients,
    received: usize,
    clock: f64,
    pending: Vec<(usize, ForwardCache, Matrix)>,
}

struct Trainer<'a> {
    config: &'a RunConfig,
    setup: &'a Setup,
    mode: ScheduleMode,
    params: Vec<PipelineParams>,
    global: SequentialModel,
    devices: Vec<DeviceSession>,
    servers: Vec<ServerSession>,
    uplinks: Vec<Channel>,
    downlinks: Vec<Channel>,
    messages: Vec<MessageRecord>,
    trace: Vec<TraceRecord>,
    shared_server_clock: f64,
    loss_sum: f64,
    loss_rows: usize,
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

fn tensor_mb(m: &Matrix) -> f64 {
    (m.rows() * m.cols()) as f64 * 64.0 / 1e6
}

impl<'a> Trainer<'a> {
    fn new(config: &'a RunConfig, setup: &'a Setup, mode: ScheduleMode) -> Result<Self> {
        let k_count = setup.datasets.len();
        let q = setup.initial_model.len();
        let params = if mode == ScheduleMode::FederatedLocal {
            vec![PipelineParams::new(q, 1); k_count]
        } else {
            setup.params.clone()
        };
        let mut devices = Vec::with_capacity(k_count);
        let mut servers = Vec::with_capacity(k_count);
        for (k, p) in params.iter().enumerate() {
            let pair = split_model(&setup.initial_model, p.split)?;
            let t = stage_times(p.split, p.batches, &setup.profiles, &config.network)?;
            let cut = &setup.profiles.layers()[p.split - 1];
            let costs = StageCosts {
                fc: t.get(StageKind::DeviceForward, 1),
                up: t.get(StageKind::Upload, 1),
                fs: t.get(StageKind::ServerForward, 1),
                bs: t.get(StageKind::ServerBackward, 1),
                down: t.get(StageKind::Download, 1),
                bc: t.get(StageKind::DeviceBackward, 1),
                up_mb: cut.forward_volume_mb / p.batches as f64,
                down_mb: cut.backward_volume_mb / p.batches as f64,
            };
            devices.push(DeviceSession {
                grads: Gradients::zeros_like(&pair.device),
                model: pair.device,
                data: setup.datasets[k].clone(),
                params: *p,
                clock: 0.0,
                caches: Vec::new(),
                costs,
            });
            servers.push(ServerSession {
                grads: Gradients::zeros_like(&pair.server),
                model: pair.server,
                received: 0,
                clock: 0.0,
                pending: Vec::new(),
            });
        }
        Ok(Self {
            config,
            setup,
            mode,
            params,
            global: setup.initial_model.clone(),
            devices,
            servers,
            uplinks: (0..k_count).map(|k| Channel::new(Resource::Uplink(k))).collect(),
            downlinks: (0..k_count).map(|k| Channel::new(Resource::Downlink(k))).collect(),
            messages: Vec::new(),
            trace: Vec::new(),
            shared_server_clock: 0.0,
            loss_sum: 0.0,
            loss_rows: 0,
        })
    }

    fn wall(&self) -> bool {
        self.config.training.clock == Clock::Wall
    }

    fn record(&mut self, label: TaskLabel, resource: Resource, start: f64, end: f64, megabits: f64) {
        self.trace.push(TraceRecord {
            label,
            resource,
            start,
            end,
            megabits,
        });
    }

    fn diverged(&self, epoch: usize, device: usize, iteration: usize, e: NnError) -> OrchestratorError {
        match e {
            NnError::NonFinite(what) => OrchestratorError::Diverged {
                epoch,
                device,
                iteration,
                detail: format!("non-finite {what}"),
            },
            other => other.into(),
        }
    }

    fn epoch(&mut self, epoch: usize) -> Result<EpochReport> {
        self.trace.clear();
        self.loss_sum = 0.0;
        self.loss_rows = 0;
        self.shared_server_clock = 0.0;
        for d in &mut self.devices {
            d.clock = 0.0;
        }
        for s in &mut self.servers {
            s.clock = 0.0;
            s.received = 0;
        }
        for c in self.uplinks.iter_mut().chain(self.downlinks.iter_mut()) {
            c.reset_clock();
        }
        let b = self.config.training.batch_size;
        let (iterations, dropped): (Vec<usize>, Vec<usize>) = self
            .devices
            .iter()
            .map(|d| {
                let n = d.params.batches;
                let per = (b / n) * n;
                let its = if self.mode == ScheduleMode::FederatedLocal {
                    d.data.len() / b
                } else {
                    d.data.len() / per
                };
                let used = if self.mode == ScheduleMode::FederatedLocal { its * b } else { its * per };
                (its, d.data.len() - used)
            })
            .unzip();
        let max_its = iterations.iter().copied().max().unwrap_or(0);
        if self.mode == ScheduleMode::FederatedLocal {
            for (k, &its) in iterations.iter().enumerate() {
                self.local_epoch(epoch, k, its)?;
            }
        } else {
            for i in 0..max_its {
                let active: Vec<usize> = (0..self.devices.len()).filter(|&k| i < iterations[k]).collect();
                for &k in &active {
                    self.device_forwards(epoch, k, i)?;
                }
                self.server_phase(epoch, i, &active)?;
                for &k in &active {
                    self.device_backwards(epoch, k, i)?;
                }
                for &k in &active {
                    self.update(epoch, k, i)?;
                }
            }
        }
        let received = self.aggregate(epoch, max_its)?;
        let metrics = from_records(
            self.mode,
            lane_resources(self.devices.len()),
            std::mem::take(&mut self.trace),
            iterations,
        );
        let (out, _) = forward(&self.global, &self.setup.validation.inputs)?;
        let validation_loss = loss_value(self.setup.loss, &out, &self.setup.validation.labels)?;
        let validation_accuracy = accuracy(&out, &self.setup.validation.labels);
        Ok(EpochReport {
            epoch,
            metrics,
            train_loss: if self.loss_rows > 0 {
                self.loss_sum / self.loss_rows as f64
            } else {
                0.0
            },
            validation_loss,
            validation_accuracy,
            received,
            dropped,
            global_model: self.global.clone(),
        })
    }

    /// Full-model local training of one device for one epoch.
    fn local_epoch(&mut self, epoch: usize, k: usize, iterations: usize) -> Result<()> {
        let b = self.config.training.batch_size;
        let eta = self.config.training.learning_rate;
        let fwd: f64 = self.setup.profiles.layers().iter().map(|l| l.device_forward).sum();
        let bwd: f64 = self.setup.profiles.layers().iter().map(|l| l.device_backward).sum();
        let wall = self.wall();
        let mut model = self.devices[k].model.clone();
        for i in 0..iterations {
            let batch = self.devices[k].data.slice(i * b, (i + 1) * b);
            let (fwd_out, t_f) = timed(|| forward(&model, &batch.inputs));
            let (_, cache) = fwd_out.map_err(|e| self.diverged(epoch, k, i, e))?;
            let (bwd_out, t_b) = timed(|| backward(&model, &cache, &batch.labels));
            let res = bwd_out.map_err(|e| self.diverged(epoch, k, i, e))?;
            model = sgd_step(&model, &res.grads, eta, 1).map_err(|e| self.diverged(epoch, k, i, e))?;
            self.loss_sum += res.loss * batch.len() as f64;
            self.loss_rows += batch.len();
            let (df, db) = if wall { (t_f, t_b) } else { (fwd, bwd) };
            let label = |kind| TaskLabel {
                device: k,
                iteration: i,
                batch: 1,
                kind,
            };
            let t0 = self.devices[k].clock;
            self.record(label(TaskKind::LocalForward), Resource::DeviceCompute(k), t0, t0 + df, 0.0);
            self.record(label(TaskKind::LocalBackward), Resource::DeviceCompute(k), t0 + df, t0 + df + db, 0.0);
            self.devices[k].clock = t0 + df + db;
        }
        // Local training keeps the whole model on the device.
        self.devices[k].model = model;
        self.servers[k].received = self.devices[k].data.len();
        Ok(())
    }

    fn device_forwards(&mut self, epoch: usize, k: usize, i: usize) -> Result<()> {
        let b = self.config.training.batch_size;
        let wall = self.wall();
        let n = self.devices[k].params.batches;
        let micro = b / n;
        let base = i * micro * n;
        self.devices[k].caches.clear();
        for j in 0..n {
            let batch = self.devices[k].data.slice(base + j * micro, base + (j + 1) * micro);
            let dev = &self.devices[k];
            let (out, t) = timed(|| forward(&dev.model, &batch.inputs));
            let (acts, cache) = out.map_err(|e| self.diverged(epoch, k, i, e))?;
            let costs = self.devices[k].costs;
            let fc = if wall { t } else { costs.fc };
            let start = self.devices[k].clock;
            let label = |kind| TaskLabel {
                device: k,
                iteration: i,
                batch: j + 1,
                kind: TaskKind::Stage(kind),
            };
            self.record(label(StageKind::DeviceForward), Resource::DeviceCompute(k), start, start + fc, 0.0);
            self.devices[k].clock = start + fc;
            self.devices[k].caches.push(cache);
            let (mb, up) = if wall {
                let mb = tensor_mb(&acts);
                (mb, mb / self.config.network.uplink_mbps)
            } else {
                (costs.up_mb, costs.up)
            };
            let rec = self.uplinks[k].send(
                Message::Activations {
                    activations: acts,
                    labels: batch.labels,
                },
                start + fc,
                up,
                mb,
                Tag {
                    epoch,
                    iteration: i,
                    batch: j + 1,
                },
            );
            self.record(label(StageKind::Upload), Resource::Uplink(k), rec.start, rec.delivered, mb);
            self.messages.push(rec);
        }
        Ok(())
    }

    fn server_phase(&mut self, epoch: usize, i: usize, active: &[usize]) -> Result<()> {
        match self.mode {
            ScheduleMode::PipeLearnParallelServer => {
                for &k in active {
                    for _ in 0..self.devices[k].params.batches {
                        let t = self.server_forward(epoch, k, i, self.servers[k].clock)?;
                        self.servers[k].clock = self.server_backward(epoch, k, i, t)?;
                    }
                }
            }
            ScheduleMode::PipeLearnSequentialServer => {
                for &k in active {
                    for _ in 0..self.devices[k].params.batches {
                        let t = self.server_forward(epoch, k, i, self.shared_server_clock)?;
                        self.shared_server_clock = self.server_backward(epoch, k, i, t)?;
                    }
                }
            }
            ScheduleMode::ConventionalSplit => {
                // One micro-batch per device, served first come first served
                // in (ready time, label) order.
                let mut ready: Vec<(f64, TaskLabel)> = Vec::with_capacity(2 * active.len());
                for &k in active {
                    let env = self.uplinks[k]
                        .peek()
                        .ok_or_else(|| OrchestratorError::Protocol("missing activations".into()))?;
                    ready.push((env.delivered, stage_label(k, i, 1, StageKind::ServerForward)));
                }
                while !ready.is_empty() {
                    let now = self.shared_server_clock;
                    let earliest = ready.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
                    let horizon = now.max(earliest);
                    let (idx, _) = ready
                        .iter()
                        .enumerate()
                        .filter(|(_, r)| r.0 <= horizon)
                        .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(a.1 .1.cmp(&b.1 .1)))
                        .expect("a task is ready at the horizon");
                    let (at, label) = ready.remove(idx);
                    let k = label.device;
                    if label.kind == TaskKind::Stage(StageKind::ServerForward) {
                        let end = self.server_forward(epoch, k, i, now)?;
                        self.shared_server_clock = end;
                        ready.push((end, stage_label(k, i, 1, StageKind::ServerBackward)));
                    } else {
                        self.shared_server_clock = self.server_backward(epoch, k, i, now.max(at))?;
                    }
                }
            }
            ScheduleMode::FederatedLocal => unreachable!("local training has no server stages"),
        }
        Ok(())
    }

    /// Receives the next activation batch of device `k` and runs the server
    /// forward pass once the server is free at `free_at`. Returns its end.
    fn server_forward(&mut self, epoch: usize, k: usize, i: usize, free_at: f64) -> Result<f64> {
        let env = self.uplinks[k]
            .recv()
            .ok_or_else(|| OrchestratorError::Protocol(format!("device {k}: no activations queued")))?;
        let Message::Activations {
            activations,
            labels,
        } = env.message
        else {
            return Err(OrchestratorError::Protocol(format!(
                "device {k}: expected activations, got {}",
                env.message.kind()
            )));
        };
        let server = &self.servers[k];
        let (out, t) = timed(|| forward(&server.model, &activations));
        let (_, cache) = out.map_err(|e| self.diverged(epoch, k, i, e))?;
        let fs = if self.wall() { t } else { self.devices[k].costs.fs };
        let start = free_at.max(env.delivered);
        self.record(
            stage_label(k, i, env.batch, StageKind::ServerForward),
            Resource::ServerCompute,
            start,
            start + fs,
            0.0,
        );
        let server = &mut self.servers[k];
        server.received += activations.rows();
        server.pending.push((env.batch, cache, labels));
        Ok(start + fs)
    }

    /// Server backward pass of the oldest pending micro-batch of device `k`
    /// starting at `at`; sends the activation gradients. Returns its end.
    fn server_backward(&mut self, epoch: usize, k: usize, i: usize, at: f64) -> Result<f64> {
        if self.servers[k].pending.is_empty() {
            return Err(OrchestratorError::Protocol(format!("device {k}: no forward pass pending")));
        }
        let (batch, cache, labels) = self.servers[k].pending.remove(0);
        let server = &self.servers[k];
        let loss = self.setup.loss;
        let (out, t) = timed(|| backward_with_loss(&server.model, &cache, &labels, loss));
        let res = out.map_err(|e| self.diverged(epoch, k, i, e))?;
        self.servers[k].grads.accumulate(&res.grads)?;
        self.loss_sum += res.loss * labels.rows() as f64;
        self.loss_rows += labels.rows();
        let costs = self.devices[k].costs;
        let bs = if self.wall() { t } else { costs.bs };
        self.record(
            stage_label(k, i, batch, StageKind::ServerBackward),
            Resource::ServerCompute,
            at,
            at + bs,
            0.0,
        );
        let (mb, down) = if self.wall() {
            let mb = tensor_mb(&res.input_grad);
            (mb, mb / self.config.network.downlink_mbps)
        } else {
            (costs.down_mb, costs.down)
        };
        let rec = self.downlinks[k].send(
            Message::ActivationGrads(res.input_grad),
            at + bs,
            down,
            mb,
            Tag {
                epoch,
                iteration: i,
                batch,
            },
        );
        self.record(
            stage_label(k, i, batch, StageKind::Download),
            Resource::Downlink(k),
            rec.start,
            rec.delivered,
            mb,
        );
        self.messages.push(rec);
        Ok(at + bs)
    }

    fn device_backwards(&mut self, epoch: usize, k: usize, i: usize) -> Result<()> {
        let caches = std::mem::take(&mut self.devices[k].caches);
        for (j, cache) in caches.iter().enumerate() {
            let env = self.downlinks[k]
                .recv()
                .ok_or_else(|| OrchestratorError::Protocol(format!("device {k}: no gradients queued")))?;
            if env.batch != j + 1 || env.iteration != i {
                return Err(OrchestratorError::Protocol(format!(
                    "device {k}: gradients for batch {} arrived, expected {}",
                    env.batch,
                    j + 1
                )));
            }
            let Message::ActivationGrads(grad) = env.message else {
                return Err(OrchestratorError::Protocol(format!(
                    "device {k}: expected activation gradients, got {}",
                    env.message.kind()
                )));
            };
            let dev = &self.devices[k];
            let (out, t) = timed(|| backward_from_output_grad(&dev.model, cache, &grad));
            let (grads, _) = out.map_err(|e| self.diverged(epoch, k, i, e))?;
            self.devices[k].grads.accumulate(&grads)?;
            let bc = if self.wall() { t } else { self.devices[k].costs.bc };
            let start = self.devices[k].clock.max(env.delivered);
            self.record(
                stage_label(k, i, j + 1, StageKind::DeviceBackward),
                Resource::DeviceCompute(k),
                start,
                start + bc,
                0.0,
            );
            self.devices[k].clock = start + bc;
        }
        Ok(())
    }

    fn update(&mut self, epoch: usize, k: usize, i: usize) -> Result<()> {
        let eta = self.config.training.learning_rate;
        let n = self.devices[k].params.batches;
        let dev = &self.devices[k];
        let device = sgd_step(&dev.model, &dev.grads, eta, n).map_err(|e| self.diverged(epoch, k, i, e))?;
        let srv = &self.servers[k];
        let server = sgd_step(&srv.model, &srv.grads, eta, n).map_err(|e| self.diverged(epoch, k, i, e))?;
        self.devices[k].grads = Gradients::zeros_like(&device);
        self.devices[k].model = device;
        self.servers[k].grads = Gradients::zeros_like(&server);
        self.servers[k].model = server;
        Ok(())
    }

    fn model_mb(&self, k: usize, model: &SequentialModel) -> f64 {
        if self.wall() {
            params_to_mb(model.param_count() as u64)
        } else {
            params_to_mb(self.setup.profiles.device_params(self.params[k].split))
        }
    }

    /// Epoch-end model exchange; returns the aggregation weights.
    fn aggregate(&mut self, epoch: usize, after: usize) -> Result<Vec<usize>> {
        let k_count = self.devices.len();
        let tag = Tag {
            epoch,
            iteration: after,
            batch: 0,
        };
        let label = |device, kind| TaskLabel {
            device,
            iteration: after,
            batch: 0,
            kind,
        };
        let mut arrival = 0.0f64;
        for k in 0..k_count {
            let at = self.devices[k].clock;
            let rec = self.uplinks[k].send(Message::StopEpoch, at, 0.0, 0.0, tag);
            self.messages.push(rec);
            let mb = self.model_mb(k, &self.devices[k].model);
            let json = self.devices[k].model.to_json();
            let rec = self.uplinks[k].send(
                Message::DeviceModel(json),
                at,
                mb / self.config.network.uplink_mbps,
                mb,
                tag,
            );
            self.record(label(k, TaskKind::ModelUpload), Resource::Uplink(k), rec.start, rec.delivered, mb);
            arrival = arrival.max(rec.delivered);
            self.messages.push(rec);
        }
        let mut full = Vec::with_capacity(k_count);
        for k in 0..k_count {
            match self.uplinks[k].recv().map(|e| e.message) {
                Some(Message::StopEpoch) => {}
                other => {
                    return Err(OrchestratorError::Protocol(format!(
                        "device {k}: expected stop_epoch, got {:?}",
                        other.map(|m| m.kind())
                    )))
                }
            }
            let Some(Message::DeviceModel(json)) = self.uplinks[k].recv().map(|e| e.message) else {
                return Err(OrchestratorError::Protocol(format!("device {k}: expected device_model")));
            };
            let device = SequentialModel::from_json(&json)?;
            full.push(join_models(&ModelPair {
                device,
                server: self.servers[k].model.clone(),
            })?);
        }
        let weights: Vec<usize> = if self.mode == ScheduleMode::FederatedLocal {
            self.devices.iter().map(|d| d.data.len()).collect()
        } else {
            self.servers.iter().map(|s| s.received).collect()
        };
        let (global, t) = timed(|| fedavg(&full, &weights));
        self.global = global?;
        let server_free = self
            .servers
            .iter()
            .map(|s| s.clock)
            .fold(self.shared_server_clock, f64::max);
        let start = arrival.max(server_free);
        let agg = if self.wall() {
            t
        } else {
            let mparams = self.setup.profiles.total_params() as f64 / 1e6;
            self.config.profile.aggregation_secs_per_mparam * mparams * k_count as f64
        };
        self.record(label(0, TaskKind::Aggregate), Resource::ServerCompute, start, start + agg, 0.0);
        for k in 0..k_count {
            let pair = split_model(&self.global, self.params[k].split)?;
            let mb = self.model_mb(k, &pair.device);
            let rec = self.downlinks[k].send(
                Message::GlobalDeviceModel(pair.device.to_json()),
                start + agg,
                mb / self.config.network.downlink_mbps,
                mb,
                tag,
            );
            self.record(label(k, TaskKind::ModelDownload), Resource::Downlink(k), rec.start, rec.delivered, mb);
            self.messages.push(rec);
            let Some(Message::GlobalDeviceModel(json)) = self.downlinks[k].recv().map(|e| e.message) else {
                return Err(OrchestratorError::Protocol(format!("device {k}: expected global model")));
            };
            self.devices[k].model = SequentialModel::from_json(&json)?;
            self.devices[k].grads = Gradients::zeros_like(&self.devices[k].model);
            self.servers[k].grads = Gradients::zeros_like(&pair.server);
            self.servers[k].model = pair.server;
        }
        Ok(weights)
    }

    fn stop(&mut self, epoch: usize) {
        for k in 0..self.downlinks.len() {
            let rec = self.downlinks[k].send(
                Message::StopTraining,
                0.0,
                0.0,
                0.0,
                Tag {
                    epoch,
                    iteration: 0,
                    batch: 0,
                },
            );
            self.downlinks[k].recv();
            self.messages.push(rec);
        }
    }
}

fn stage_label(k: usize, i: usize, batch: usize, kind: StageKind) -> TaskLabel {
    TaskLabel {
        device: k,
        iteration: i,
        batch,
        kind: TaskKind::Stage(kind),
    }
}
