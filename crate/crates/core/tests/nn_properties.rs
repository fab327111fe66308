use pipelearn::nn::{
    backward, backward_from_output_grad, backward_with_loss, forward, loss_value, sgd_step, Activation,
    DenseLayer, Gradients, LayerSpec, LossKind, Matrix, SequentialModel,
};
use pipelearn::partition::{join_models, microbatch, split_model};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn one_hot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        m.set(r, rng.gen_range(0..cols), 1.0);
    }
    m
}

fn random_model(rng: &mut ChaCha8Rng, layers: usize, softmax: bool) -> (SequentialModel, usize) {
    let input = rng.gen_range(1..=5);
    let specs: Vec<LayerSpec> = (0..layers)
        .map(|q| {
            let last = q + 1 == layers;
            LayerSpec {
                width: rng.gen_range(if last && softmax { 2 } else { 1 }..=5),
                activation: match (last, softmax) {
                    (true, true) => Activation::Softmax,
                    (true, false) => Activation::Identity,
                    _ => [Activation::Relu, Activation::Identity][rng.gen_range(0..2)],
                },
            }
        })
        .collect();
    (SequentialModel::init(input, &specs, rng.gen()).unwrap(), input)
}

fn labels_for(rng: &mut ChaCha8Rng, model: &SequentialModel, rows: usize) -> Matrix {
    let width = model.output_width().unwrap();
    match LossKind::for_model(model).unwrap() {
        LossKind::CrossEntropy => one_hot(rng, rows, width),
        LossKind::MeanSquared => random_matrix(rng, rows, width),
    }
}

/// Model with parameter `index` (weights then bias, layer by layer) shifted.
fn perturbed(model: &SequentialModel, index: usize, delta: f64) -> SequentialModel {
    let mut seen = 0;
    let layers = model
        .layers()
        .iter()
        .map(|l| {
            let mut w = l.weights().clone();
            let mut b = l.bias().to_vec();
            let nw = w.data().len();
            if (seen..seen + nw).contains(&index) {
                w.data_mut()[index - seen] += delta;
            } else if (seen + nw..seen + nw + b.len()).contains(&index) {
                b[index - seen - nw] += delta;
            }
            seen += nw + b.len();
            DenseLayer::new(w, b, l.activation()).unwrap()
        })
        .collect();
    SequentialModel::new(layers).unwrap()
}

/// Smallest |pre-activation| of every ReLU unit; ReLU kinks break finite differences.
fn relu_margin(model: &SequentialModel, x: &Matrix) -> f64 {
    let (_, cache) = forward(model, x).unwrap();
    let mut margin = f64::INFINITY;
    for (l, input) in model.layers().iter().zip(cache.inputs()) {
        if l.activation() != Activation::Relu {
            continue;
        }
        let linear = SequentialModel::new(vec![
            DenseLayer::new(l.weights().clone(), l.bias().to_vec(), Activation::Identity).unwrap(),
        ])
        .unwrap();
        let (z, _) = forward(&linear, input).unwrap();
        margin = z.data().iter().fold(margin, |m, v| m.min(v.abs()));
    }
    margin
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradients_match_central_differences(seed in any::<u64>(), layers in 1usize..=3, rows in 1usize..=4, softmax in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, input) = random_model(&mut rng, layers, softmax);
        let x = random_matrix(&mut rng, rows, input);
        let y = labels_for(&mut rng, &model, rows);
        prop_assume!(relu_margin(&model, &x) > 1e-3);
        let kind = LossKind::for_model(&model).unwrap();
        let (_, cache) = forward(&model, &x).unwrap();
        let grads: Vec<f64> = backward(&model, &cache, &y).unwrap().grads.values().collect();
        let h = 1e-5;
        let loss_at = |m: &SequentialModel| loss_value(kind, &forward(m, &x).unwrap().0, &y).unwrap();
        for (i, g) in grads.iter().enumerate() {
            let fd = (loss_at(&perturbed(&model, i, h)) - loss_at(&perturbed(&model, i, -h))) / (2.0 * h);
            let scale = g.abs().max(fd.abs()).max(1.0);
            prop_assert!((g - fd).abs() <= 1e-6 * scale, "param {i}: {g} vs {fd}");
        }
    }

    #[test]
    fn split_path_gradients_equal_unsplit(seed in any::<u64>(), layers in 1usize..=5, rows in 1usize..=8, softmax in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, input) = random_model(&mut rng, layers, softmax);
        let point = rng.gen_range(1..=layers);
        let x = random_matrix(&mut rng, rows, input);
        let y = labels_for(&mut rng, &model, rows);
        let kind = LossKind::for_model(&model).unwrap();
        let (_, cache) = forward(&model, &x).unwrap();
        let whole = backward(&model, &cache, &y).unwrap();

        let pair = split_model(&model, point).unwrap();
        let (acts, dcache) = forward(&pair.device, &x).unwrap();
        let (_, scache) = forward(&pair.server, &acts).unwrap();
        let srv = backward_with_loss(&pair.server, &scache, &y, kind).unwrap();
        let (dgrads, _) = backward_from_output_grad(&pair.device, &dcache, &srv.input_grad).unwrap();
        let split = dgrads.concat(srv.grads);
        prop_assert!(split.max_abs_diff(&whole.grads) <= 1e-12);
        prop_assert!((srv.loss - whole.loss).abs() <= 1e-12);
        prop_assert_eq!(join_models(&pair).unwrap(), model);
    }

    #[test]
    fn accumulated_micro_batch_update_equals_full_batch(seed in any::<u64>(), parts in 1usize..=6, per in 1usize..=5, extra in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let softmax = rng.gen();
        let (model, input) = random_model(&mut rng, 2, softmax);
        let extra = extra % parts;
        let rows = parts * per + extra;
        let x = random_matrix(&mut rng, rows, input);
        let y = labels_for(&mut rng, &model, rows);
        let xs = microbatch(&x, parts).unwrap();
        let ys = microbatch(&y, parts).unwrap();
        prop_assert_eq!(xs.dropped, extra);
        let mut acc = Gradients::zeros_like(&model);
        for (xb, yb) in xs.batches.iter().zip(&ys.batches) {
            let (_, cache) = forward(&model, xb).unwrap();
            acc.accumulate(&backward(&model, &cache, yb).unwrap().grads).unwrap();
        }
        let micro = sgd_step(&model, &acc, 0.3, parts).unwrap();
        let kept = parts * per;
        let (_, cache) = forward(&model, &x.slice_rows(0, kept)).unwrap();
        let full_grads = backward(&model, &cache, &y.slice_rows(0, kept)).unwrap().grads;
        let full = sgd_step(&model, &full_grads, 0.3, 1).unwrap();
        prop_assert!(micro.max_param_diff(&full) <= 1e-8);
    }
}
