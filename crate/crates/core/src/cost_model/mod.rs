//! Profiling quantities, network presets and per-epoch time estimation.
//!
//! Units: seconds for compute, megabits (Mb) for data volumes and Mbit/s for
//! bandwidth, so `volume / bandwidth` is a duration in seconds. Conversions
//! from other units happen only in [`format`].
//!
//! Each device is assumed to have a dedicated up/down link to the server; the
//! links of different devices do not contend.

pub mod format;
mod live;
pub mod synthetic;

pub use live::live_profile;
pub use synthetic::{profile_model, ModelPreset};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::ScheduleMode;
use crate::stage_graph::{build_iteration_graph, estimate_makespan, stage_times, GraphError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("profile: {0}")]
    InvalidProfile(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("epoch shape: {0}")]
    Shape(String),
    #[error("{0}")]
    Graph(#[from] GraphError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Profiled cost of one layer with the full batch size.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerCost {
    pub device_forward: f64,
    pub device_backward: f64,
    pub server_forward: f64,
    pub server_backward: f64,
    /// Output volume of the layer in the forward pass, Mb.
    pub forward_volume_mb: f64,
    /// Volume of the gradient w.r.t. the layer output in the backward pass, Mb.
    pub backward_volume_mb: f64,
    /// Trainable parameter count; drives model upload/download sizes.
    pub params: u64,
}

impl LayerCost {
    fn values(&self) -> [f64; 6] {
        [
            self.device_forward,
            self.device_backward,
            self.server_forward,
            self.server_backward,
            self.forward_volume_mb,
            self.backward_volume_mb,
        ]
    }
}

/// Compute sums on each side of a split point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSums {
    pub device_forward: f64,
    pub device_backward: f64,
    pub server_forward: f64,
    pub server_backward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerProfiles {
    name: String,
    layers: Vec<LayerCost>,
}

impl LayerProfiles {
    pub fn new(name: impl Into<String>, layers: Vec<LayerCost>) -> Result<Self, CostError> {
        if layers.is_empty() {
            return Err(CostError::InvalidProfile("no layers".into()));
        }
        for (q, l) in layers.iter().enumerate() {
            if l.values().iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(CostError::InvalidProfile(format!(
                    "layer {} has a negative or non-finite entry",
                    q + 1
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            layers,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[LayerCost] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Device sums over layers `1..=split`, server sums over `split+1..=Q`.
    pub fn split_sums(&self, split: usize) -> SplitSums {
        let (dev, srv) = self.layers.split_at(split.min(self.layers.len()));
        SplitSums {
            device_forward: dev.iter().map(|l| l.device_forward).sum(),
            device_backward: dev.iter().map(|l| l.device_backward).sum(),
            server_forward: srv.iter().map(|l| l.server_forward).sum(),
            server_backward: srv.iter().map(|l| l.server_backward).sum(),
        }
    }

    /// Parameters held on the device for split point `split`.
    pub fn device_params(&self, split: usize) -> u64 {
        self.layers.iter().take(split).map(|l| l.params).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    /// Forward plus backward time of the whole model on the device.
    pub fn full_device_time(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.device_forward + l.device_backward)
            .sum()
    }

    /// Copy with every time multiplied by `time_factor` and every volume by
    /// `volume_factor`.
    pub fn rescaled(&self, time_factor: f64, volume_factor: f64) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerCost {
                device_forward: l.device_forward * time_factor,
                device_backward: l.device_backward * time_factor,
                server_forward: l.server_forward * time_factor,
                server_backward: l.server_backward * time_factor,
                forward_volume_mb: l.forward_volume_mb * volume_factor,
                backward_volume_mb: l.backward_volume_mb * volume_factor,
                params: l.params,
            })
            .collect();
        Self {
            name: self.name.clone(),
            layers,
        }
    }
}

/// Megabits occupied by `params` 64-bit parameters.
pub fn params_to_mb(params: u64) -> f64 {
    params as f64 * 64.0 / 1e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkProfile {
    pub name: String,
    pub uplink_mbps: f64,
    pub downlink_mbps: f64,
}

impl NetworkProfile {
    pub const PRESET_NAMES: [&'static str; 3] = ["4g", "4g+", "wifi"];

    pub fn new(name: impl Into<String>, uplink_mbps: f64, downlink_mbps: f64) -> Result<Self, CostError> {
        if !(uplink_mbps > 0.0 && downlink_mbps > 0.0) || !uplink_mbps.is_finite() || !downlink_mbps.is_finite() {
            return Err(CostError::InvalidProfile("bandwidths must be positive".into()));
        }
        Ok(Self {
            name: name.into(),
            uplink_mbps,
            downlink_mbps,
        })
    }

    /// `4g` (10/25 Mbps), `4g+` (20/40 Mbps), `wifi` (50/50 Mbps).
    pub fn preset(name: &str) -> Result<Self, CostError> {
        let (up, down) = match name {
            "4g" => (10.0, 25.0),
            "4g+" => (20.0, 40.0),
            "wifi" => (50.0, 50.0),
            other => return Err(CostError::UnknownPreset(other.to_string())),
        };
        Self::new(name, up, down)
    }

    pub fn presets() -> Vec<Self> {
        Self::PRESET_NAMES
            .iter()
            .map(|n| Self::preset(n).expect("built-in preset"))
            .collect()
    }
}

/// Local dataset size and the full (unsplit) batch size of one device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochShape {
    pub dataset_size: usize,
    pub batch_size: usize,
}

impl EpochShape {
    pub fn new(dataset_size: usize, batch_size: usize) -> Result<Self, CostError> {
        let shape = Self {
            dataset_size,
            batch_size,
        };
        shape.iterations(1)?;
        Ok(shape)
    }

    /// Micro-batch size `floor(B / N)`.
    pub fn micro_batch_size(&self, batches: usize) -> Result<usize, CostError> {
        if batches == 0 || batches > self.batch_size {
            return Err(CostError::Shape(format!(
                "parallel batch number {batches} outside [1, {}]",
                self.batch_size
            )));
        }
        Ok(self.batch_size / batches)
    }

    /// Iterations per epoch: `floor(|D| / (B' * N))`.
    pub fn iterations(&self, batches: usize) -> Result<usize, CostError> {
        let per_iteration = self.micro_batch_size(batches)? * batches;
        let iterations = self.dataset_size / per_iteration;
        if iterations == 0 {
            return Err(CostError::Shape(format!(
                "{} samples cannot fill one iteration of {per_iteration}",
                self.dataset_size
            )));
        }
        Ok(iterations)
    }

    /// Samples consumed per epoch with parallel batch number `batches`.
    pub fn samples_used(&self, batches: usize) -> Result<usize, CostError> {
        Ok(self.iterations(batches)? * self.micro_batch_size(batches)? * batches)
    }
}

/// Estimated per-epoch compute/transfer time for one device, excluding the
/// end-of-epoch aggregation exchange.
pub fn epoch_time(
    split: usize,
    batches: usize,
    profiles: &LayerProfiles,
    net: &NetworkProfile,
    shape: &EpochShape,
    mode: ScheduleMode,
) -> Result<f64, CostError> {
    match mode {
        ScheduleMode::PipeLearnParallelServer | ScheduleMode::PipeLearnSequentialServer => {
            iteration_estimate(split, batches, profiles, net, shape)
        }
        ScheduleMode::ConventionalSplit => iteration_estimate(split, 1, profiles, net, shape),
        ScheduleMode::FederatedLocal => {
            Ok(shape.iterations(1)? as f64 * profiles.full_device_time())
        }
    }
}

fn iteration_estimate(
    split: usize,
    batches: usize,
    profiles: &LayerProfiles,
    net: &NetworkProfile,
    shape: &EpochShape,
) -> Result<f64, CostError> {
    let iterations = shape.iterations(batches)?;
    let graph = build_iteration_graph(batches, 0)?;
    let times = stage_times(split, batches, profiles, net)?;
    Ok(iterations as f64 * estimate_makespan(&graph, &times)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn flat_profile(q: usize) -> LayerProfiles {
        LayerProfiles::new(
            "flat",
            (0..q)
                .map(|_| LayerCost {
                    device_forward: 1.0,
                    device_backward: 2.0,
                    server_forward: 0.1,
                    server_backward: 0.2,
                    forward_volume_mb: 10.0,
                    backward_volume_mb: 10.0,
                    params: 100,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn network_presets() {
        let p = NetworkProfile::preset("4g").unwrap();
        assert_eq!((p.uplink_mbps, p.downlink_mbps), (10.0, 25.0));
        let p = NetworkProfile::preset("4g+").unwrap();
        assert_eq!((p.uplink_mbps, p.downlink_mbps), (20.0, 40.0));
        let p = NetworkProfile::preset("wifi").unwrap();
        assert_eq!((p.uplink_mbps, p.downlink_mbps), (50.0, 50.0));
        assert!(NetworkProfile::preset("5g").is_err());
        assert!(NetworkProfile::new("x", 0.0, 1.0).is_err());
    }

    #[test]
    fn epoch_shape_iterations() {
        let shape = EpochShape::new(10_000, 100).unwrap();
        assert_eq!(shape.iterations(1).unwrap(), 100);
        assert_eq!(shape.micro_batch_size(12).unwrap(), 8);
        assert_eq!(shape.iterations(12).unwrap(), 10_000 / 96);
        assert!(shape.iterations(0).is_err());
        assert!(shape.iterations(101).is_err());
        assert!(EpochShape::new(50, 100).is_err());
    }

    #[test]
    fn epoch_time_single_iteration_chain() {
        let prof = flat_profile(2);
        let net = NetworkProfile::new("n", 10.0, 10.0).unwrap();
        let shape = EpochShape::new(100, 100).unwrap();
        let t = epoch_time(1, 1, &prof, &net, &shape, ScheduleMode::PipeLearnParallelServer).unwrap();
        // fc 1 + u 1 + fs 0.1 + bs 0.2 + d 1 + bc 2
        assert!((t - 5.3).abs() < 1e-12);
    }

    #[test]
    fn epoch_time_linear_in_dataset() {
        let prof = flat_profile(3);
        let net = NetworkProfile::preset("4g").unwrap();
        let small = EpochShape::new(1000, 100).unwrap();
        let big = EpochShape::new(2000, 100).unwrap();
        for mode in ScheduleMode::ALL {
            let a = epoch_time(2, 4, &prof, &net, &small, mode).unwrap();
            let b = epoch_time(2, 4, &prof, &net, &big, mode).unwrap();
            assert!((b - 2.0 * a).abs() < 1e-9 * b);
        }
    }

    #[test]
    fn rejects_negative_costs() {
        let bad = LayerCost {
            device_forward: -1.0,
            ..LayerCost::default()
        };
        assert!(LayerProfiles::new("bad", vec![bad]).is_err());
        assert!(LayerProfiles::new("empty", vec![]).is_err());
    }
}
