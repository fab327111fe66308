//! Layer-granular model splitting, micro-batching and FedAvg aggregation.

use thiserror::Error;

use crate::nn::{DenseLayer, Matrix, NnError, SequentialModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("split point {point} outside [1, {layers}]")]
    SplitOutOfRange { point: usize, layers: usize },
    #[error("seam mismatch: device part emits {device} values, server part expects {server}")]
    SeamMismatch { device: usize, server: usize },
    #[error("cannot cut {rows} rows into {parts} micro-batches")]
    TooFewRows { rows: usize, parts: usize },
    #[error("parallel batch number must be at least 1")]
    ZeroParts,
    #[error("fedavg needs at least one model")]
    NoModels,
    #[error("fedavg: {0}")]
    Aggregation(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Index of the last device-side layer; layers `1..=P` run on the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SplitPoint(usize);

impl SplitPoint {
    pub fn new(point: usize, layers: usize) -> Result<Self, PartitionError> {
        if point == 0 || point > layers {
            return Err(PartitionError::SplitOutOfRange { point, layers });
        }
        Ok(Self(point))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for SplitPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub device: SequentialModel,
    pub server: SequentialModel,
}

pub fn split_model(model: &SequentialModel, point: usize) -> Result<ModelPair, PartitionError> {
    let p = SplitPoint::new(point, model.len())?.get();
    let mut layers: Vec<DenseLayer> = model.layers().to_vec();
    let server_layers = layers.split_off(p);
    Ok(ModelPair {
        device: SequentialModel::new(layers)?,
        server: SequentialModel::new(server_layers)?,
    })
}

/// Stacks the device layers followed by the server layers.
pub fn join_models(pair: &ModelPair) -> Result<SequentialModel, PartitionError> {
    if pair.device.is_empty() {
        return Err(PartitionError::SplitOutOfRange {
            point: 0,
            layers: pair.server.len(),
        });
    }
    if let (Some(d), Some(s)) = (pair.device.output_width(), pair.server.input_width()) {
        if d != s {
            return Err(PartitionError::SeamMismatch {
                device: d,
                server: s,
            });
        }
    }
    let mut layers = pair.device.layers().to_vec();
    layers.extend_from_slice(pair.server.layers());
    Ok(SequentialModel::new(layers)?)
}

/// Result of cutting a batch into equal micro-batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Microbatches {
    pub batches: Vec<Matrix>,
    /// Tail rows (`rows mod N`) left out of the iteration.
    pub dropped: usize,
}

/// Cuts `batch` into `parts` consecutive slices of `rows / parts` rows.
pub fn microbatch(batch: &Matrix, parts: usize) -> Result<Microbatches, PartitionError> {
    if parts == 0 {
        return Err(PartitionError::ZeroParts);
    }
    let rows = batch.rows();
    if rows < parts {
        return Err(PartitionError::TooFewRows { rows, parts });
    }
    let size = rows / parts;
    let batches = (0..parts)
        .map(|n| batch.slice_rows(n * size, (n + 1) * size))
        .collect();
    Ok(Microbatches {
        batches,
        dropped: rows - size * parts,
    })
}

/// Dataset-size weighted parameter average.
pub fn fedavg(
    models: &[SequentialModel],
    dataset_sizes: &[usize],
) -> Result<SequentialModel, PartitionError> {
    let first = models.first().ok_or(PartitionError::NoModels)?;
    if models.len() != dataset_sizes.len() {
        return Err(PartitionError::Aggregation(format!(
            "{} models but {} dataset sizes",
            models.len(),
            dataset_sizes.len()
        )));
    }
    if dataset_sizes.contains(&0) {
        return Err(PartitionError::Aggregation("dataset sizes must be positive".into()));
    }
    if let Some(k) = models.iter().position(|m| !m.same_architecture(first)) {
        return Err(PartitionError::Aggregation(format!(
            "model {} differs in architecture",
            k + 1
        )));
    }
    if models.len() == 1 {
        return Ok(first.clone());
    }
    let total: usize = dataset_sizes.iter().sum();
    let weights: Vec<f64> = dataset_sizes
        .iter()
        .map(|&s| s as f64 / total as f64)
        .collect();
    let mut out = first.clone();
    let mut acc = vec![0.0; first.param_count()];
    for (model, w) in models.iter().zip(&weights) {
        for (a, p) in acc.iter_mut().zip(model.params()) {
            *a += w * p;
        }
    }
    // Clamp into the input range: rounding in the weighted sum may step just
    // outside it when all inputs agree.
    let mut lo = vec![f64::INFINITY; acc.len()];
    let mut hi = vec![f64::NEG_INFINITY; acc.len()];
    for model in models {
        for ((l, h), p) in lo.iter_mut().zip(hi.iter_mut()).zip(model.params()) {
            *l = l.min(p);
            *h = h.max(p);
        }
    }
    for ((dst, a), (l, h)) in out
        .params_mut()
        .zip(acc)
        .zip(lo.into_iter().zip(hi))
    {
        *dst = a.clamp(l, h);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec};

    fn model(q: usize, seed: u64) -> SequentialModel {
        let specs: Vec<LayerSpec> = (0..q)
            .map(|_| LayerSpec {
                width: 3,
                activation: Activation::Relu,
            })
            .collect();
        SequentialModel::init(3, &specs, seed).unwrap()
    }

    #[test]
    fn split_at_last_layer_leaves_empty_server() {
        let m = model(4, 1);
        let pair = split_model(&m, 4).unwrap();
        assert_eq!(pair.device.len(), 4);
        assert!(pair.server.is_empty());
        let x = Matrix::from_rows(&[vec![1.0, -1.0, 0.5]]).unwrap();
        let (a, _) = crate::nn::forward(&pair.server, &x).unwrap();
        assert_eq!(a, x);
        assert_eq!(join_models(&pair).unwrap(), m);
    }

    #[test]
    fn split_first_layer_of_five() {
        let m = model(5, 2);
        let pair = split_model(&m, 1).unwrap();
        assert_eq!((pair.device.len(), pair.server.len()), (1, 4));
        assert_eq!(join_models(&pair).unwrap(), m);
    }

    #[test]
    fn split_point_bounds() {
        let m = model(3, 3);
        assert!(matches!(
            split_model(&m, 0),
            Err(PartitionError::SplitOutOfRange { .. })
        ));
        assert!(split_model(&m, 4).is_err());
        let empty_device = ModelPair {
            device: SequentialModel::empty(),
            server: m.clone(),
        };
        assert!(join_models(&empty_device).is_err());
    }

    #[test]
    fn seam_mismatch_detected() {
        let a = model(1, 1);
        let b = SequentialModel::init(
            5,
            &[LayerSpec {
                width: 2,
                activation: Activation::Identity,
            }],
            1,
        )
        .unwrap();
        let pair = ModelPair {
            device: a,
            server: b,
        };
        assert_eq!(
            join_models(&pair).unwrap_err(),
            PartitionError::SeamMismatch {
                device: 3,
                server: 5
            }
        );
    }

    fn rows(n: usize) -> Matrix {
        Matrix::new(n, 1, (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn microbatch_sizes() {
        let one = microbatch(&rows(100), 1).unwrap();
        assert_eq!(one.batches.len(), 1);
        assert_eq!(one.batches[0].rows(), 100);

        let twelve = microbatch(&rows(100), 12).unwrap();
        assert_eq!(twelve.batches.len(), 12);
        assert!(twelve.batches.iter().all(|b| b.rows() == 8));
        assert_eq!(twelve.dropped, 4);

        let three = microbatch(&rows(10), 3).unwrap();
        assert_eq!(
            three.batches.iter().map(Matrix::rows).collect::<Vec<_>>(),
            vec![3, 3, 3]
        );
        assert_eq!(three.dropped, 1);
        assert_eq!(three.batches[2].data(), &[6.0, 7.0, 8.0]);

        assert!(matches!(
            microbatch(&rows(2), 3),
            Err(PartitionError::TooFewRows { .. })
        ));
        assert!(microbatch(&rows(2), 0).is_err());
    }

    #[test]
    fn fedavg_cases() {
        let m = model(2, 9);
        assert_eq!(fedavg(std::slice::from_ref(&m), &[7]).unwrap(), m);
        assert_eq!(fedavg(&[m.clone(), m.clone()], &[3, 5]).unwrap(), m);

        let constant = |v: f64| {
            let layer =
                DenseLayer::new(Matrix::new(2, 2, vec![v; 4]).unwrap(), vec![v; 2], Activation::Identity)
                    .unwrap();
            SequentialModel::new(vec![layer]).unwrap()
        };
        let avg = fedavg(&[constant(1.0), constant(3.0)], &[1, 1]).unwrap();
        assert!(avg.params().all(|p| p == 2.0));

        assert_eq!(fedavg(&[], &[]).unwrap_err(), PartitionError::NoModels);
        assert!(fedavg(&[m.clone(), model(3, 1)], &[1, 1]).is_err());
        assert!(fedavg(&[m.clone(), m.clone()], &[1, 0]).is_err());
    }
}
