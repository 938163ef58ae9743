//! Finite-difference helpers shared by the gradient tests and the acceptance suite.
#![allow(dead_code)]

use andnet_core::measures::{loss2, loss2_backward};
use andnet_core::network::{backward, classification_loss, forward};
use andnet_core::scramble::{sds_type_b, sds_type_b_with, ScrambleIndices};
use andnet_core::{InputFilter, Matrix, NetworkParams, NeuronMeasures, ParamGrads, RngStream};

pub const H: f64 = 1e-5;

pub fn network(sizes: &[usize], seed: u64) -> NetworkParams {
    let mut rng = RngStream::new(seed);
    // Larger weights than the default init so every term of the loss is exercised.
    let mut p = NetworkParams::init(sizes, InputFilter::default(), &mut rng).unwrap();
    for layer in &mut p.layers {
        for w in layer.weights.as_mut_slice() {
            *w = rng.uniform(-1.5, 1.5);
        }
        for b in &mut layer.bias {
            *b = rng.uniform(-0.5, 0.5);
        }
    }
    p
}

pub fn batch(rows: usize, cols: usize, classes: usize, seed: u64) -> (Matrix, Vec<usize>) {
    let mut rng = RngStream::new(seed);
    let data = (0..rows * cols).map(|_| rng.uniform(0.0, 1.0)).collect();
    let labels = (0..rows).map(|_| rng.rand_index(classes).unwrap()).collect();
    (Matrix::from_vec(rows, cols, data).unwrap(), labels)
}

/// Visits every weight and bias of `p` with a mutable handle.
pub fn for_each_param(p: &mut NetworkParams, mut f: impl FnMut(&mut NetworkParams, usize, bool, usize)) {
    for k in 0..p.layers.len() {
        for i in 0..p.layers[k].weights.as_slice().len() {
            f(p, k, false, i);
        }
        for i in 0..p.layers[k].bias.len() {
            f(p, k, true, i);
        }
    }
}

pub fn slot(p: &mut NetworkParams, k: usize, bias: bool, i: usize) -> &mut f64 {
    if bias {
        &mut p.layers[k].bias[i]
    } else {
        &mut p.layers[k].weights.as_mut_slice()[i]
    }
}

pub fn grad_value(g: &ParamGrads, k: usize, bias: bool, i: usize) -> f64 {
    if bias {
        g.layers[k].bias[i]
    } else {
        g.layers[k].weights.as_slice()[i]
    }
}

pub fn numeric(p: &NetworkParams, loss: impl Fn(&NetworkParams) -> f64) -> Vec<(usize, bool, usize, f64)> {
    let mut out = Vec::new();
    let mut q = p.clone();
    for_each_param(&mut q, |q, k, bias, i| {
        let orig = *slot(q, k, bias, i);
        *slot(q, k, bias, i) = orig + H;
        let up = loss(q);
        *slot(q, k, bias, i) = orig - H;
        let down = loss(q);
        *slot(q, k, bias, i) = orig;
        out.push((k, bias, i, (up - down) / (2.0 * H)));
    });
    out
}

/// `‖analytic − numeric‖₂ / ‖numeric‖₂` over all parameters.
pub fn relative_error(analytic: &ParamGrads, numeric: &[(usize, bool, usize, f64)]) -> f64 {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for &(k, bias, i, n) in numeric {
        let a = grad_value(analytic, k, bias, i);
        diff += (a - n) * (a - n);
        norm += n * n;
    }
    assert!(norm > 0.0, "degenerate gradient");
    (diff / norm).sqrt()
}

pub fn ce(p: &NetworkParams, x: &Matrix, labels: &[usize]) -> f64 {
    classification_loss(&forward(p, x).unwrap(), labels).unwrap().0
}

pub fn check_ce(sizes: &[usize], seed: u64) -> f64 {
    let p = network(sizes, seed);
    let (x, labels) = batch(7, sizes[0], *sizes.last().unwrap(), seed + 100);
    let trace = forward(&p, &x).unwrap();
    let (_, og) = classification_loss(&trace, &labels).unwrap();
    let analytic = backward(&p, &trace, &og).unwrap().grads;
    relative_error(&analytic, &numeric(&p, |q| ce(q, &x, &labels)))
}

/// loss2 at `p` with the scramble draws and `grad_abs` frozen.
pub fn frozen_loss2(p: &NetworkParams, x: &Matrix, indices: &[ScrambleIndices], act_grads: &[Matrix]) -> f64 {
    let eds = forward(p, x).unwrap();
    let sds = sds_type_b_with(p, &eds, indices.to_vec()).unwrap();
    loss2(&NeuronMeasures::compute(&eds, &sds, act_grads).unwrap())
}

pub fn check_loss2(sizes: &[usize], seed: u64, n_sds: usize) -> f64 {
    let p = network(sizes, seed);
    let (x, labels) = batch(9, sizes[0], *sizes.last().unwrap(), seed + 100);
    let eds = forward(&p, &x).unwrap();
    let sds = sds_type_b(&p, &eds, n_sds, &mut RngStream::new(seed + 200)).unwrap();
    let (_, og) = classification_loss(&eds, &labels).unwrap();
    let act_grads = backward(&p, &eds, &og).unwrap().activation_grads;
    let measures = NeuronMeasures::compute(&eds, &sds, &act_grads).unwrap();
    let analytic = loss2_backward(&p, &eds, &sds, &measures).unwrap();
    let indices = sds.indices.clone();
    relative_error(&analytic, &numeric(&p, |q| frozen_loss2(q, &x, &indices, &act_grads)))
}

