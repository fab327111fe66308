//! IID, label-balanced Gaussian-blob classification data.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::nn::Matrix;

/// Inputs and one-hot labels, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Matrix,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            inputs: self.inputs.slice_rows(start, end),
            labels: self.labels.slice_rows(start, end),
        }
    }
}

/// Class centres shared by every split of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobTask {
    centres: Vec<Vec<f64>>,
    label_width: usize,
}

impl BlobTask {
    /// `classes` centres drawn uniformly from `[-2, 2]^width`; labels are
    /// one-hot vectors of length `label_width`.
    pub fn new(width: usize, classes: usize, label_width: usize, seed: u64) -> Self {
        assert!(classes >= 1 && classes <= label_width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres = (0..classes)
            .map(|_| (0..width).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        Self {
            centres,
            label_width,
        }
    }

    pub fn classes(&self) -> usize {
        self.centres.len()
    }

    /// `samples` points with labels cycling through the classes, unit-variance
    /// noise around each centre, rows shuffled.
    pub fn sample(&self, samples: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = self.centres[0].len();
        let mut order: Vec<usize> = (0..samples).collect();
        order.shuffle(&mut rng);
        let mut inputs = Vec::with_capacity(samples * width);
        let mut labels = vec![0.0; samples * self.label_width];
        for (row, &i) in order.iter().enumerate() {
            let class = i % self.classes();
            for &c in &self.centres[class] {
                let noise: f64 = rng.sample(StandardNormal);
                inputs.push(c + noise);
            }
            labels[row * self.label_width + class] = 1.0;
        }
        Dataset {
            inputs: Matrix::new(samples, width, inputs).expect("finite samples"),
            labels: Matrix::new(samples, self.label_width, labels).expect("one-hot labels"),
        }
    }
}

/// Fraction of rows whose arg-max output matches the arg-max label.
pub fn accuracy(output: &Matrix, labels: &Matrix) -> f64 {
    if output.rows() == 0 {
        return 0.0;
    }
    let argmax = |row: &[f64]| {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    };
    let hits = (0..output.rows())
        .filter(|&r| argmax(output.row(r)) == argmax(labels.row(r)))
        .count();
    hits as f64 / output.rows() as f64
}
