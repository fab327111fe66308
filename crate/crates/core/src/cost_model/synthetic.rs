//! Synthetic cost profiles.
//!
//! Hardware measurements are replaced by a per-layer work vector (MFLOP per
//! sample, forward pass) scaled by speed factors, with a small seeded jitter.
//! Backward passes cost twice the forward work.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CostError, LayerCost, LayerProfiles};
use crate::nn::SequentialModel;

/// Seconds per MFLOP at speed factor 1 (a ~1 GFLOP/s device).
pub const SECONDS_PER_MFLOP: f64 = 1e-3;
/// Bits per transmitted tensor element.
pub const BITS_PER_ELEMENT: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelPreset {
    /// Three convolutional and two fully connected layers on 32x32x3 input.
    Vgg5Like,
    /// Stem convolution, eight residual blocks and a classifier.
    ResNet18Like,
}

/// Per-layer work, output elements and parameters of a preset.
struct PresetLayer {
    mflop: f64,
    out_elems: u64,
    params: u64,
}

fn conv(h: u64, w: u64, cin: u64, k: u64, cout: u64, pool: u64) -> PresetLayer {
    PresetLayer {
        mflop: (h * w * cin * k * k * cout * 2) as f64 / 1e6,
        out_elems: (h / pool) * (w / pool) * cout,
        params: cin * k * k * cout + cout,
    }
}

fn residual(h: u64, w: u64, cin: u64, cout: u64, pool: u64) -> PresetLayer {
    let a = conv(h, w, cin, 3, cout, 1);
    let b = conv(h, w, cout, 3, cout, pool);
    PresetLayer {
        mflop: a.mflop + b.mflop,
        out_elems: b.out_elems,
        params: a.params + b.params,
    }
}

fn dense(fan_in: u64, out: u64) -> PresetLayer {
    PresetLayer {
        mflop: (fan_in * out * 2) as f64 / 1e6,
        out_elems: out,
        params: fan_in * out + out,
    }
}

impl ModelPreset {
    pub fn parse(name: &str) -> Result<Self, CostError> {
        match name {
            "vgg5-like" => Ok(Self::Vgg5Like),
            "resnet18-like" => Ok(Self::ResNet18Like),
            other => Err(CostError::UnknownPreset(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Vgg5Like => "vgg5-like",
            Self::ResNet18Like => "resnet18-like",
        }
    }

    fn layers(self) -> Vec<PresetLayer> {
        match self {
            Self::Vgg5Like => vec![
                conv(32, 32, 3, 3, 32, 2),
                conv(16, 16, 32, 3, 64, 2),
                conv(8, 8, 64, 3, 64, 1),
                dense(8 * 8 * 64, 128),
                dense(128, 10),
            ],
            Self::ResNet18Like => vec![
                conv(32, 32, 3, 7, 64, 2),
                residual(16, 16, 64, 64, 1),
                residual(16, 16, 64, 64, 1),
                residual(16, 16, 64, 128, 2),
                residual(8, 8, 128, 128, 1),
                residual(8, 8, 128, 256, 2),
                residual(4, 4, 256, 256, 1),
                residual(4, 4, 256, 512, 2),
                // global average pool collapses the spatial dimensions
                {
                    let mut l = residual(2, 2, 512, 512, 1);
                    l.out_elems = 512;
                    l
                },
                dense(512, 10),
            ],
        }
    }
}

/// Deterministic synthetic profile of a preset for a full batch of
/// `batch_size` samples.
pub fn profile_model(
    preset: ModelPreset,
    device_speed: f64,
    server_speed: f64,
    batch_size: usize,
    seed: u64,
) -> Result<LayerProfiles, CostError> {
    if !(device_speed > 0.0 && server_speed > 0.0) {
        return Err(CostError::InvalidProfile("speed factors must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = batch_size as f64;
    let layers = preset
        .layers()
        .into_iter()
        .map(|l| {
            let work = l.mflop * b * SECONDS_PER_MFLOP;
            let mut jitter = || rng.gen_range(0.95..1.05);
            let volume = l.out_elems as f64 * b * BITS_PER_ELEMENT / 1e6;
            LayerCost {
                device_forward: work / device_speed * jitter(),
                device_backward: 2.0 * work / device_speed * jitter(),
                server_forward: work / server_speed * jitter(),
                server_backward: 2.0 * work / server_speed * jitter(),
                forward_volume_mb: volume,
                backward_volume_mb: volume,
                params: l.params,
            }
        })
        .collect();
    LayerProfiles::new(preset.name(), layers)
}

/// Synthetic profile of a dense model: work is `2 * in * out` FLOP per sample
/// per layer, volumes are the layer output widths.
pub fn dense_profile(
    model: &SequentialModel,
    device_speed: f64,
    server_speed: f64,
    batch_size: usize,
) -> Result<LayerProfiles, CostError> {
    if !(device_speed > 0.0 && server_speed > 0.0) {
        return Err(CostError::InvalidProfile("speed factors must be positive".into()));
    }
    let b = batch_size as f64;
    let layers = model
        .layers()
        .iter()
        .map(|l| {
            let d = dense(l.inputs() as u64, l.outputs() as u64);
            let work = d.mflop * b * SECONDS_PER_MFLOP;
            let volume = d.out_elems as f64 * b * BITS_PER_ELEMENT / 1e6;
            LayerCost {
                device_forward: work / device_speed,
                device_backward: 2.0 * work / device_speed,
                server_forward: work / server_speed,
                server_backward: 2.0 * work / server_speed,
                forward_volume_mb: volume,
                backward_volume_mb: volume,
                params: d.params,
            }
        })
        .collect();
    LayerProfiles::new("dense", layers)
}

/// Knobs of a random profile family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomFamily {
    pub min_layers: usize,
    pub max_layers: usize,
    /// Range of per-layer device forward time, seconds.
    pub device_forward: (f64, f64),
    /// Range of the server/device speed ratio.
    pub server_speedup: (f64, f64),
    /// Range of per-layer output volume, Mb.
    pub volume: (f64, f64),
}

impl RandomFamily {
    /// Heterogeneous CNN-like profiles: mixed layer costs, a server 2x-50x
    /// faster than the device, activations between 0.1 and 60 Mb.
    pub fn mixed() -> Self {
        Self {
            min_layers: 2,
            max_layers: 12,
            device_forward: (0.05, 2.0),
            server_speedup: (2.0, 50.0),
            volume: (0.1, 60.0),
        }
    }

    /// Weak devices paired with a strong server.
    pub fn weak_device() -> Self {
        Self {
            min_layers: 3,
            max_layers: 10,
            device_forward: (0.5, 3.0),
            server_speedup: (30.0, 80.0),
            volume: (1.0, 30.0),
        }
    }

    pub fn sample(&self, seed: u64) -> LayerProfiles {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = rng.gen_range(self.min_layers..=self.max_layers);
        let speedup = rng.gen_range(self.server_speedup.0..=self.server_speedup.1);
        let layers = (0..q)
            .map(|_| {
                let fwd = rng.gen_range(self.device_forward.0..=self.device_forward.1);
                let bwd = fwd * rng.gen_range(1.5..=2.5);
                let vol = rng.gen_range(self.volume.0..=self.volume.1);
                LayerCost {
                    device_forward: fwd,
                    device_backward: bwd,
                    server_forward: fwd / speedup,
                    server_backward: bwd / speedup,
                    forward_volume_mb: vol,
                    backward_volume_mb: vol,
                    params: rng.gen_range(1_000..=500_000),
                }
            })
            .collect();
        LayerProfiles::new(format!("random-{seed}"), layers).expect("sampled values are valid")
    }
}
