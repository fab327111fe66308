//! Training configuration, read from TOML.
//!
//! ```toml
//! [model]
//! input_width = 4
//! init_seed = 1
//! layers = [
//!     { width = 8, activation = "relu" },
//!     { width = 2, activation = "softmax" },
//! ]
//!
//! [data]
//! devices = 2
//! samples_per_device = 500
//! seed = 7
//! classes = 2
//! validation_samples = 200
//!
//! [training]
//! batch_size = 100
//! learning_rate = 0.1
//! epochs = 10
//! mode = "pipelearn"            # pipelearn | pipelearn-seq | sfl | fl
//! params = "auto"               # or [{ split = 1, batches = 4 }, ...], one per device
//! clock = "virtual"             # virtual | wall
//! convergence = { patience = 5, tol = 1e-4 }   # optional early stopping
//!
//! [network]
//! preset = "4g"                 # or uplink_mbps / downlink_mbps
//!
//! [profile]
//! source = "dense"              # dense | file
//! device_speed = 1.0
//! server_speed = 10.0
//! aggregation_secs_per_mparam = 0.01
//! # path = "profile.txt"        # with source = "file"
//! ```
//!
//! Every device has its own uplink and downlink of the configured
//! bandwidth; links of different devices do not contend.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::NetworkProfile;
use crate::nn::{Activation, LayerSpec};
use crate::optimizer::PipelineParams;
use crate::sim::ScheduleMode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("line {line}: {message}")]
    ParseAt { line: usize, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_width: usize,
    #[serde(default)]
    pub init_seed: u64,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub devices: usize,
    pub samples_per_device: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_validation")]
    pub validation_samples: usize,
}

fn default_classes() -> usize {
    2
}

fn default_validation() -> usize {
    200
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Convergence {
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_patience() -> usize {
    5
}

fn default_tol() -> f64 {
    1e-4
}

impl Default for Convergence {
    fn default() -> Self {
        Self {
            patience: default_patience(),
            tol: default_tol(),
        }
    }
}

/// Fixed `(P, N)` per device, or selection by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamsChoice {
    Auto,
    Fixed(Vec<PipelineParams>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clock {
    /// Time charged from the cost profile; deterministic.
    Virtual,
    /// Compute charged by measured wall time; transfers by payload size.
    Wall,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub mode: ScheduleMode,
    pub params: ParamsChoice,
    pub clock: Clock,
    pub convergence: Option<Convergence>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProfileSource {
    /// Synthetic profile derived from the dense model shapes.
    Dense {
        device_speed: f64,
        server_speed: f64,
    },
    /// Profile text file, resolved relative to the working directory.
    File(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileConfig {
    pub source: ProfileSource,
    pub aggregation_secs_per_mparam: f64,
}

/// A validated training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub training: TrainingConfig,
    pub network: NetworkProfile,
    pub profile: ProfileConfig,
}

// Raw serde mirror of the file layout.

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: ModelConfig,
    data: DataConfig,
    training: RawTraining,
    #[serde(default)]
    network: RawNetwork,
    #[serde(default)]
    profile: RawProfile,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTraining {
    batch_size: usize,
    learning_rate: f64,
    epochs: usize,
    #[serde(default = "default_mode")]
    mode: String,
    #[serde(default)]
    params: Option<toml::Value>,
    #[serde(default = "default_clock")]
    clock: Clock,
    #[serde(default)]
    convergence: Option<Convergence>,
}

fn default_mode() -> String {
    "pipelearn".into()
}

fn default_clock() -> Clock {
    Clock::Virtual
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawNetwork {
    preset: Option<String>,
    uplink_mbps: Option<f64>,
    downlink_mbps: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfile {
    #[serde(default = "default_source")]
    source: String,
    #[serde(default = "one")]
    device_speed: f64,
    #[serde(default = "ten")]
    server_speed: f64,
    path: Option<String>,
    #[serde(default = "default_aggregation")]
    aggregation_secs_per_mparam: f64,
}

impl Default for RawProfile {
    fn default() -> Self {
        Self {
            source: default_source(),
            device_speed: one(),
            server_speed: ten(),
            path: None,
            aggregation_secs_per_mparam: default_aggregation(),
        }
    }
}

fn default_source() -> String {
    "dense".into()
}

fn one() -> f64 {
    1.0
}

fn ten() -> f64 {
    10.0
}

fn default_aggregation() -> f64 {
    0.01
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    split: usize,
    batches: usize,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl RunConfig {
    /// Parses and validates a TOML configuration.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| match e.span() {
            Some(span) => ConfigError::ParseAt {
                line: line_of(text, span.start),
                message: e.message().to_string(),
            },
            None => ConfigError::Parse(e.message().to_string()),
        })?;
        let mode = ScheduleMode::parse(&raw.training.mode)
            .ok_or_else(|| invalid(format!("unknown mode {:?}", raw.training.mode)))?;
        let params = match raw.training.params {
            None => ParamsChoice::Auto,
            Some(toml::Value::String(s)) if s == "auto" => ParamsChoice::Auto,
            Some(toml::Value::String(s)) => {
                return Err(invalid(format!("params must be \"auto\" or a list, found {s:?}")))
            }
            Some(v) => {
                let list: Vec<RawParams> = v
                    .try_into()
                    .map_err(|e: toml::de::Error| invalid(format!("params: {}", e.message())))?;
                ParamsChoice::Fixed(
                    list.into_iter()
                        .map(|p| PipelineParams::new(p.split, p.batches))
                        .collect(),
                )
            }
        };
        let network = match (raw.network.preset, raw.network.uplink_mbps, raw.network.downlink_mbps) {
            (Some(p), None, None) => NetworkProfile::preset(&p).map_err(|e| invalid(e.to_string()))?,
            (None, Some(u), Some(d)) => {
                NetworkProfile::new("custom", u, d).map_err(|e| invalid(e.to_string()))?
            }
            (None, None, None) => NetworkProfile::preset("4g").expect("built-in preset"),
            _ => {
                return Err(invalid(
                    "network needs either `preset` or both `uplink_mbps` and `downlink_mbps`",
                ))
            }
        };
        let source = match raw.profile.source.as_str() {
            "dense" => ProfileSource::Dense {
                device_speed: raw.profile.device_speed,
                server_speed: raw.profile.server_speed,
            },
            "file" => ProfileSource::File(
                raw.profile
                    .path
                    .ok_or_else(|| invalid("profile source \"file\" needs `path`"))?,
            ),
            other => return Err(invalid(format!("unknown profile source {other:?}"))),
        };
        let config = RunConfig {
            model: raw.model,
            data: raw.data,
            training: TrainingConfig {
                batch_size: raw.training.batch_size,
                learning_rate: raw.training.learning_rate,
                epochs: raw.training.epochs,
                mode,
                params,
                clock: raw.training.clock,
                convergence: raw.training.convergence,
            },
            network,
            profile: ProfileConfig {
                source,
                aggregation_secs_per_mparam: raw.profile.aggregation_secs_per_mparam,
            },
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        if m.input_width == 0 || m.layers.is_empty() || m.layers.iter().any(|l| l.width == 0) {
            return Err(invalid("model needs a positive input width and at least one non-empty layer"));
        }
        let out = m.layers.last().expect("non-empty").width;
        let d = &self.data;
        if d.devices == 0 {
            return Err(invalid("at least one device is required"));
        }
        if d.classes < 2 || d.classes > out {
            return Err(invalid(format!(
                "classes must lie in [2, output width {out}], found {}",
                d.classes
            )));
        }
        let t = &self.training;
        if t.batch_size == 0 || t.epochs == 0 {
            return Err(invalid("batch_size and epochs must be positive"));
        }
        if d.samples_per_device < t.batch_size {
            return Err(invalid(format!(
                "samples_per_device {} is smaller than batch_size {}",
                d.samples_per_device, t.batch_size
            )));
        }
        if !(t.learning_rate.is_finite() && t.learning_rate >= 0.0) {
            return Err(invalid("learning_rate must be finite and non-negative"));
        }
        if let Some(c) = t.convergence {
            if c.patience == 0 || !(c.tol >= 0.0) {
                return Err(invalid("convergence needs patience >= 1 and tol >= 0"));
            }
        }
        if let ParamsChoice::Fixed(list) = &t.params {
            if list.len() != d.devices {
                return Err(invalid(format!(
                    "{} parameter pairs for {} devices",
                    list.len(),
                    d.devices
                )));
            }
            for p in list {
                if p.split == 0 || p.split > m.layers.len() {
                    return Err(invalid(format!(
                        "split {} outside [1, {}]",
                        p.split,
                        m.layers.len()
                    )));
                }
                if p.batches == 0 || p.batches > t.batch_size {
                    return Err(invalid(format!(
                        "parallel batch number {} outside [1, {}]",
                        p.batches, t.batch_size
                    )));
                }
            }
        }
        if let ProfileSource::Dense {
            device_speed,
            server_speed,
        } = self.profile.source
        {
            if !(device_speed > 0.0 && server_speed > 0.0) || !device_speed.is_finite() || !server_speed.is_finite() {
                return Err(invalid("speed factors must be positive"));
            }
        }
        if !(self.profile.aggregation_secs_per_mparam >= 0.0) {
            return Err(invalid("aggregation_secs_per_mparam must be non-negative"));
        }
        Ok(())
    }

    /// Canonical TOML rendering; parsing it yields an equal config.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        let m = &self.model;
        out.push_str(&format!(
            "[model]\ninput_width = {}\ninit_seed = {}\nlayers = [\n",
            m.input_width, m.init_seed
        ));
        for l in &m.layers {
            out.push_str(&format!(
                "    {{ width = {}, activation = \"{}\" }},\n",
                l.width,
                activation_name(l.activation)
            ));
        }
        out.push_str("]\n\n");
        let d = &self.data;
        out.push_str(&format!(
            "[data]\ndevices = {}\nsamples_per_device = {}\nseed = {}\nclasses = {}\nvalidation_samples = {}\n\n",
            d.devices, d.samples_per_device, d.seed, d.classes, d.validation_samples
        ));
        let t = &self.training;
        out.push_str(&format!(
            "[training]\nbatch_size = {}\nlearning_rate = {:?}\nepochs = {}\nmode = \"{}\"\nclock = \"{}\"\n",
            t.batch_size,
            t.learning_rate,
            t.epochs,
            t.mode,
            match t.clock {
                Clock::Virtual => "virtual",
                Clock::Wall => "wall",
            }
        ));
        match &t.params {
            ParamsChoice::Auto => out.push_str("params = \"auto\"\n"),
            ParamsChoice::Fixed(list) => {
                let items: Vec<String> = list
                    .iter()
                    .map(|p| format!("{{ split = {}, batches = {} }}", p.split, p.batches))
                    .collect();
                out.push_str(&format!("params = [{}]\n", items.join(", ")));
            }
        }
        if let Some(c) = t.convergence {
            out.push_str(&format!(
                "convergence = {{ patience = {}, tol = {:?} }}\n",
                c.patience, c.tol
            ));
        }
        let n = &self.network;
        if NetworkProfile::preset(&n.name).as_ref() == Ok(n) {
            out.push_str(&format!("\n[network]\npreset = {:?}\n\n", n.name));
        } else {
            out.push_str(&format!(
                "\n[network]\nuplink_mbps = {:?}\ndownlink_mbps = {:?}\n\n",
                n.uplink_mbps, n.downlink_mbps
            ));
        }
        out.push_str("[profile]\n");
        match &self.profile.source {
            ProfileSource::Dense {
                device_speed,
                server_speed,
            } => out.push_str(&format!(
                "source = \"dense\"\ndevice_speed = {device_speed:?}\nserver_speed = {server_speed:?}\n"
            )),
            ProfileSource::File(p) => out.push_str(&format!("source = \"file\"\npath = {}\n", toml::Value::String(p.clone()))),
        }
        out.push_str(&format!(
            "aggregation_secs_per_mparam = {:?}\n",
            self.profile.aggregation_secs_per_mparam
        ));
        out
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Identity => "identity",
        Activation::Softmax => "softmax",
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_toml())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
[model]
input_width = 4
init_seed = 1
layers = [
    { width = 8, activation = "relu" },
    { width = 2, activation = "softmax" },
]

[data]
devices = 2
samples_per_device = 500
seed = 7

[training]
batch_size = 100
learning_rate = 0.1
epochs = 3
params = [{ split = 1, batches = 4 }, { split = 1, batches = 5 }]
convergence = { patience = 2 }

[network]
preset = "wifi"
"#;

    #[test]
    fn parses_sample() {
        let c = RunConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(c.data.devices, 2);
        assert_eq!(c.data.classes, 2);
        assert_eq!(c.training.mode, ScheduleMode::PipeLearnParallelServer);
        assert_eq!(
            c.training.params,
            ParamsChoice::Fixed(vec![PipelineParams::new(1, 4), PipelineParams::new(1, 5)])
        );
        assert_eq!(c.training.convergence.unwrap().tol, 1e-4);
        assert_eq!(c.network.uplink_mbps, 50.0);
    }

    #[test]
    fn canonical_form_round_trips() {
        let c = RunConfig::from_toml(SAMPLE).unwrap();
        let again = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(again.model, c.model);
        assert_eq!(again.training, c.training);
        assert_eq!(again.profile, c.profile);
        assert_eq!(again.to_toml(), c.to_toml());
    }

    #[test]
    fn errors_carry_lines() {
        let bad = SAMPLE.replace("epochs = 3", "epochs = \"three\"");
        match RunConfig::from_toml(&bad) {
            Err(ConfigError::ParseAt { line, .. }) => assert_eq!(line, 18),
            other => panic!("{other:?}"),
        }
        let bad = SAMPLE.replace("batches = 5", "batches = 500");
        assert!(matches!(RunConfig::from_toml(&bad), Err(ConfigError::Invalid(_))));
        let bad = SAMPLE.replace("preset = \"wifi\"", "preset = \"5g\"");
        assert!(RunConfig::from_toml(&bad).is_err());
        let bad = SAMPLE.replace("[network]", "[network]\nbogus = 1");
        assert!(RunConfig::from_toml(&bad).is_err());
    }
}
