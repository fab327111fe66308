//! Split point and parallel batch number selection.
//!
//! For every split point `P` the parallel batch number is the smallest `N`
//! for which the device stays busy while one micro-batch crosses the link,
//! the server and the link back:
//!
//! ```text
//! N = 1 + ceil((v_f(P)/w_u + S_fs(P) + S_bs(P) + v_b(P)/w_d) / min(S_fc(P), S_bc(P)))
//! ```
//!
//! clamped to `[1, B]`. Each shortlisted `(P, N)` is then estimated with the
//! per-iteration makespan model and the fastest one wins.

use std::fmt::Write as _;

use thiserror::Error;

use crate::cost_model::{epoch_time, CostError, EpochShape, LayerProfiles, NetworkProfile};
use crate::sim::{ScheduleMode, SimError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptError {
    #[error("degenerate profile: device-side compute time is zero at split point {split}")]
    DegenerateProfile { split: usize },
    #[error("split point {split} outside [1, {layers}]")]
    SplitOutOfRange { split: usize, layers: usize },
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("no devices to optimize")]
    NoDevices,
    #[error("score needs positive finite times, got oracle {oracle} and selected {selected}")]
    InvalidTimes { oracle: f64, selected: f64 },
    #[error("{0}")]
    Cost(#[from] CostError),
    #[error("{0}")]
    Sim(#[from] SimError),
}

/// Split point `P` (device keeps layers `1..=P`) and parallel batch number `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PipelineParams {
    pub split: usize,
    pub batches: usize,
}

impl PipelineParams {
    pub fn new(split: usize, batches: usize) -> Self {
        Self { split, batches }
    }
}

pub fn candidate_n(
    split: usize,
    profiles: &LayerProfiles,
    net: &NetworkProfile,
    batch_size: usize,
) -> Result<usize, OptError> {
    if split == 0 || split > profiles.len() {
        return Err(OptError::SplitOutOfRange {
            split,
            layers: profiles.len(),
        });
    }
    if batch_size == 0 {
        return Err(OptError::ZeroBatchSize);
    }
    let s = profiles.split_sums(split);
    let cut = &profiles.layers()[split - 1];
    let gap = cut.forward_volume_mb / net.uplink_mbps
        + s.server_forward
        + s.server_backward
        + cut.backward_volume_mb / net.downlink_mbps;
    let device = s.device_forward.min(s.device_backward);
    if !(device > 0.0) {
        return Err(OptError::DegenerateProfile { split });
    }
    let ratio = (gap / device).ceil();
    let n = if ratio >= batch_size as f64 {
        batch_size
    } else {
        1 + ratio as usize
    };
    Ok(n.clamp(1, batch_size))
}

/// One candidate per split point, duplicates removed, ordered by `P`.
pub fn shortlist(
    profiles: &LayerProfiles,
    net: &NetworkProfile,
    batch_size: usize,
) -> Result<Vec<PipelineParams>, OptError> {
    let mut out: Vec<PipelineParams> = Vec::with_capacity(profiles.len());
    for split in 1..=profiles.len() {
        let p = PipelineParams::new(split, candidate_n(split, profiles, net, batch_size)?);
        if !out.contains(&p) {
            out.push(p);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub params: PipelineParams,
    pub estimated_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSelection {
    pub params: PipelineParams,
    pub estimated_time: f64,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub devices: Vec<DeviceSelection>,
    /// Slowest device's estimated epoch time.
    pub estimated_time: f64,
}

/// Estimates every shortlisted candidate and keeps the fastest; ties go to
/// the smaller `P`, then the smaller `N`.
pub fn select_params(
    profiles: &LayerProfiles,
    net: &NetworkProfile,
    shape: &EpochShape,
) -> Result<DeviceSelection, OptError> {
    let mut candidates = Vec::new();
    for params in shortlist(profiles, net, shape.batch_size)? {
        let estimated_time = epoch_time(
            params.split,
            params.batches,
            profiles,
            net,
            shape,
            ScheduleMode::PipeLearnParallelServer,
        )?;
        candidates.push(Candidate {
            params,
            estimated_time,
        });
    }
    let best = *candidates
        .iter()
        .min_by(|a, b| {
            a.estimated_time
                .total_cmp(&b.estimated_time)
                .then(a.params.cmp(&b.params))
        })
        .expect("shortlist has one candidate per layer");
    Ok(DeviceSelection {
        params: best.params,
        estimated_time: best.estimated_time,
        candidates,
    })
}

/// Independent selection for each `(profiles, net, shape)` device.
pub fn select_for_devices(
    devices: &[(LayerProfiles, NetworkProfile, EpochShape)],
) -> Result<Selection, OptError> {
    if devices.is_empty() {
        return Err(OptError::NoDevices);
    }
    let devices = devices
        .iter()
        .map(|(p, n, s)| select_params(p, n, s))
        .collect::<Result<Vec<_>, _>>()?;
    let estimated_time = devices
        .iter()
        .map(|d| d.estimated_time)
        .fold(0.0, f64::max);
    Ok(Selection {
        devices,
        estimated_time,
    })
}

/// `oracle_time / evaluator(params)`; 1 means the selection is optimal.
pub fn score(
    params: PipelineParams,
    oracle_time: f64,
    evaluator: impl FnOnce(PipelineParams) -> Result<f64, OptError>,
) -> Result<f64, OptError> {
    let selected = evaluator(params)?;
    score_times(oracle_time, selected)
}

pub fn score_times(oracle_time: f64, selected_time: f64) -> Result<f64, OptError> {
    let valid = |t: f64| t.is_finite() && t > 0.0;
    if !valid(oracle_time) || !valid(selected_time) {
        return Err(OptError::InvalidTimes {
            oracle: oracle_time,
            selected: selected_time,
        });
    }
    Ok((oracle_time / selected_time).min(1.0))
}

/// Plain-text report of a selection.
pub fn selection_report(selection: &Selection) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "estimated_epoch_time_s = {:?}", selection.estimated_time);
    for (k, d) in selection.devices.iter().enumerate() {
        let _ = writeln!(
            out,
            "device {k}: P = {}, N = {}, estimated_epoch_time_s = {:?}",
            d.params.split, d.params.batches, d.estimated_time
        );
        for c in &d.candidates {
            let mark = if c.params == d.params { " *" } else { "" };
            let _ = writeln!(
                out,
                "  candidate P = {}, N = {}: {:?}{mark}",
                c.params.split, c.params.batches, c.estimated_time
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_model::LayerCost;

    fn profile(layers: Vec<LayerCost>) -> LayerProfiles {
        LayerProfiles::new("t", layers).unwrap()
    }

    fn layer(dev: f64, srv: f64, vol: f64) -> LayerCost {
        LayerCost {
            device_forward: dev,
            device_backward: dev,
            server_forward: srv,
            server_backward: srv,
            forward_volume_mb: vol,
            backward_volume_mb: vol,
            params: 10,
        }
    }

    fn net() -> NetworkProfile {
        NetworkProfile::new("unit", 1.0, 1.0).unwrap()
    }

    #[test]
    fn no_gap_gives_one_batch() {
        let p = profile(vec![layer(1.0, 0.0, 0.0), layer(1.0, 0.0, 0.0)]);
        assert_eq!(candidate_n(1, &p, &net(), 100).unwrap(), 1);
    }

    #[test]
    fn gap_equal_to_device_time_gives_two() {
        // gap = 0.25 + 0.25 (link) + 0.25 + 0.25 (server) = 1.0
        let p = profile(vec![layer(1.0, 0.0, 0.25), layer(0.0, 0.25, 0.0)]);
        assert_eq!(candidate_n(1, &p, &net(), 100).unwrap(), 2);
    }

    #[test]
    fn gap_of_nine_and_a_half_gives_eleven() {
        // gap = 2 * 2.0 (link) + 2 * 2.75 (server) = 9.5
        let p = profile(vec![layer(1.0, 0.0, 2.0), layer(0.0, 2.75, 0.0)]);
        assert_eq!(candidate_n(1, &p, &net(), 100).unwrap(), 11);
        assert_eq!(candidate_n(1, &p, &net(), 7).unwrap(), 7);
    }

    #[test]
    fn zero_device_time_is_degenerate() {
        let p = profile(vec![layer(0.0, 1.0, 1.0), layer(1.0, 1.0, 1.0)]);
        assert_eq!(
            candidate_n(1, &p, &net(), 100),
            Err(OptError::DegenerateProfile { split: 1 })
        );
        assert!(matches!(candidate_n(3, &p, &net(), 100), Err(OptError::SplitOutOfRange { .. })));
    }

    #[test]
    fn shortlist_sizes() {
        let p = profile(vec![layer(1.0, 0.1, 3.0); 5]);
        let s = shortlist(&p, &net(), 100).unwrap();
        assert!(!s.is_empty() && s.len() <= 5);
        let one = profile(vec![layer(1.0, 0.1, 3.0)]);
        assert_eq!(shortlist(&one, &net(), 100).unwrap().len(), 1);
    }

    #[test]
    fn equal_layers_give_non_increasing_n() {
        let p = profile(vec![layer(0.2, 0.05, 4.0); 8]);
        let s = shortlist(&p, &net(), 100).unwrap();
        for w in s.windows(2) {
            assert!(w[1].batches <= w[0].batches, "{s:?}");
        }
    }

    #[test]
    fn single_candidate_is_selected() {
        let p = profile(vec![layer(1.0, 0.1, 3.0)]);
        let shape = EpochShape::new(1000, 100).unwrap();
        let sel = select_params(&p, &net(), &shape).unwrap();
        assert_eq!(sel.candidates.len(), 1);
        assert_eq!(sel.params, sel.candidates[0].params);
    }

    #[test]
    fn rescaling_keeps_the_selection() {
        let p = profile(vec![
            layer(0.3, 0.01, 5.0),
            layer(0.7, 0.02, 1.3),
            layer(0.2, 0.01, 0.4),
        ]);
        let shape = EpochShape::new(1000, 100).unwrap();
        let a = select_params(&p, &net(), &shape).unwrap();
        let b = select_params(&p.rescaled(3.0, 3.0), &net(), &shape).unwrap();
        assert_eq!(a.params, b.params);
        assert!((b.estimated_time / a.estimated_time - 3.0).abs() < 1e-12);
    }

    #[test]
    fn scores() {
        let p = PipelineParams::new(1, 1);
        assert_eq!(score(p, 2.0, |_| Ok(2.0)).unwrap(), 1.0);
        assert_eq!(score(p, 2.0, |_| Ok(4.0)).unwrap(), 0.5);
        assert!(score(p, 0.0, |_| Ok(4.0)).is_err());
        assert!(score_times(1.0, f64::NAN).is_err());
    }

    #[test]
    fn report_marks_choice() {
        let p = profile(vec![layer(1.0, 0.1, 3.0), layer(1.0, 0.1, 3.0)]);
        let shape = EpochShape::new(1000, 100).unwrap();
        let sel = select_for_devices(&[(p, net(), shape)]).unwrap();
        let text = selection_report(&sel);
        assert_eq!(text.matches(" *").count(), 1);
        assert!(select_for_devices(&[]).is_err());
    }
}
