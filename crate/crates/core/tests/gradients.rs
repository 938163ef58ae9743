//! Finite-difference checks of the analytic gradients.

mod common;

use andnet_core::network::{backward, classification_loss, forward};
use andnet_core::{InputFilter, Matrix};
use common::*;

#[test]
fn classification_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let err = check_ce(&[8, 4, 3], seed);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
    let err = check_ce(&[6, 5, 4, 3], 11);
    assert!(err < 1e-4, "deep: relative error {err:e}");
}

#[test]
fn classification_gradient_without_filter() {
    let mut p = network(&[8, 4, 3], 3);
    p.filter = InputFilter::identity();
    let (x, labels) = batch(5, 8, 3, 4);
    let trace = forward(&p, &x).unwrap();
    let (_, og) = classification_loss(&trace, &labels).unwrap();
    let analytic = backward(&p, &trace, &og).unwrap().grads;
    let err = relative_error(&analytic, &numeric(&p, |q| ce(q, &x, &labels)));
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn measure_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let err = check_loss2(&[8, 4, 3], seed, 9);
        assert!(err < 1e-3, "8-4-3 seed {seed}: relative error {err:e}");
        let err = check_loss2(&[6, 3, 2], seed, 15);
        assert!(err < 1e-3, "6-3-2 seed {seed}: relative error {err:e}");
    }
    let err = check_loss2(&[7, 5, 4, 3], 21, 11);
    assert!(err < 1e-3, "two hidden layers: relative error {err:e}");
}

#[test]
fn input_gradient_matches_finite_differences() {
    use andnet_core::network::input_gradient;
    for filter in [InputFilter::default(), InputFilter { enabled: true, center: 0.5 }, InputFilter::identity()] {
        let mut p = network(&[8, 4, 3], 9);
        p.filter = filter;
        let (x, labels) = batch(4, 8, 3, 10);
        let analytic = input_gradient(&p, &x, &labels).unwrap();
        let summed = |m: &Matrix| ce(&p, m, &labels) * labels.len() as f64;
        let (mut diff, mut norm) = (0.0, 0.0);
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                let mut up = x.clone();
                up.set(r, c, x.get(r, c) + H);
                let mut down = x.clone();
                down.set(r, c, x.get(r, c) - H);
                let n = (summed(&up) - summed(&down)) / (2.0 * H);
                let a = analytic.get(r, c);
                diff += (a - n) * (a - n);
                norm += n * n;
            }
        }
        let err = (diff / norm).sqrt();
        assert!(err < 1e-4, "{filter:?}: relative error {err:e}");
    }
}
