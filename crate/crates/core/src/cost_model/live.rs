use std::time::Instant;

use super::{CostError, LayerCost, LayerProfiles};
use crate::nn::{backward_from_output_grad, forward, Matrix, SequentialModel};

/// Measures per-layer forward/backward wall time of the numeric core on this
/// host, averaged over `iterations` runs. Device and server columns receive
/// the same measurement; volumes are exact (`rows * width * 64` bits).
pub fn live_profile(
    model: &SequentialModel,
    batch: &Matrix,
    iterations: usize,
) -> Result<LayerProfiles, CostError> {
    if iterations == 0 {
        return Err(CostError::InvalidProfile("iterations must be at least 1".into()));
    }
    let nn = |e: crate::nn::NnError| CostError::InvalidProfile(e.to_string());
    let mut x = batch.clone();
    let mut layers = Vec::with_capacity(model.len());
    for layer in model.layers() {
        let single = SequentialModel::new(vec![layer.clone()]).map_err(nn)?;
        let mut fwd_total = 0.0;
        let mut bwd_total = 0.0;
        let mut out = None;
        for _ in 0..iterations {
            let start = Instant::now();
            let (y, cache) = forward(&single, &x).map_err(nn)?;
            fwd_total += start.elapsed().as_secs_f64();
            let upstream = Matrix::new(y.rows(), y.cols(), vec![1.0; y.rows() * y.cols()])
                .map_err(nn)?;
            let start = Instant::now();
            let grads = backward_from_output_grad(&single, &cache, &upstream).map_err(nn)?;
            bwd_total += start.elapsed().as_secs_f64();
            std::hint::black_box(&grads);
            out = Some(y);
        }
        let y = out.expect("at least one iteration");
        let volume = (y.rows() * y.cols()) as f64 * 64.0 / 1e6;
        let fwd = fwd_total / iterations as f64;
        let bwd = bwd_total / iterations as f64;
        layers.push(LayerCost {
            device_forward: fwd,
            device_backward: bwd,
            server_forward: fwd,
            server_backward: bwd,
            forward_volume_mb: volume,
            backward_volume_mb: volume,
            params: layer.param_count() as u64,
        });
        x = y;
    }
    LayerProfiles::new("live", layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseLayer, LayerSpec};

    #[test]
    fn identity_volume_is_exact() {
        let layer = DenseLayer::new(Matrix::identity(4), vec![0.0; 4], Activation::Identity).unwrap();
        let model = SequentialModel::new(vec![layer]).unwrap();
        let p = live_profile(&model, &Matrix::zeros(10, 4), 2).unwrap();
        assert_eq!(p.layers()[0].forward_volume_mb, 10.0 * 4.0 * 64.0 / 1e6);
        assert_eq!(p.layers()[0].params, 20);
        assert!(p.layers()[0].device_forward >= 0.0);
        assert!(live_profile(&model, &Matrix::zeros(1, 4), 0).is_err());
    }

    #[test]
    fn fewer_rows_run_faster_on_average() {
        let model = SequentialModel::init(
            64,
            &[LayerSpec {
                width: 64,
                activation: Activation::Relu,
            }],
            1,
        )
        .unwrap();
        let total = |rows: usize| {
            let p = live_profile(&model, &Matrix::zeros(rows, 64), 20).unwrap();
            p.layers()[0].device_forward + p.layers()[0].device_backward
        };
        let big = (0..5).map(|_| total(256)).sum::<f64>();
        let small = (0..5).map(|_| total(8)).sum::<f64>();
        assert!(small < big, "small {small} big {big}");
    }

    #[test]
    fn layers_follow_the_model_shapes() {
        let specs = [(16, Activation::Relu), (3, Activation::Softmax)];
        let specs: Vec<LayerSpec> = specs
            .iter()
            .map(|&(width, activation)| LayerSpec { width, activation })
            .collect();
        let model = SequentialModel::init(8, &specs, 2).unwrap();
        let p = live_profile(&model, &Matrix::zeros(5, 8), 3).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.layers()[0].params, 8 * 16 + 16);
        assert_eq!(p.layers()[1].forward_volume_mb, 5.0 * 3.0 * 64.0 / 1e6);
        for l in p.layers() {
            assert!(l.device_forward.is_finite() && l.device_forward >= 0.0);
            assert_eq!(l.device_forward, l.server_forward);
            assert_eq!(l.device_backward, l.server_backward);
        }
    }
}
