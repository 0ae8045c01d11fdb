mod common;

use common::{mil_gradcheck, ssl_gradcheck, GRAD_TOL};

#[test]
fn mil_bag_loss_gradients_match_finite_differences() {
    for i in 0..20 {
        let (err, detail) = mil_gradcheck(i);
        assert!(err <= GRAD_TOL, "config {i}: relative error {err:e} at {detail}");
    }
}

#[test]
fn ssl_loss_gradients_match_finite_differences() {
    for i in 0..20 {
        let (err, detail) = ssl_gradcheck(i);
        assert!(err <= GRAD_TOL, "config {i}: relative error {err:e} at {detail}");
    }
}

/// The VGG-style encoder adds padded convolutions, ReLU and max pooling.
/// Kinks are measure-zero, so random inputs keep finite differences valid.
#[test]
fn vgg_encoder_gradients_match_finite_differences() {
    for i in 0..3 {
        let (err, detail) = common::mil_gradcheck_with(patchmil::Arch::Vggs, i);
        assert!(err <= GRAD_TOL, "config {i}: relative error {err:e} at {detail}");
    }
}
