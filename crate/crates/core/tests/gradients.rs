//! Analytic gradients against central finite differences of independently
//! written loss functions, all in f64.

mod common;

use common::grad::{one_hot, student_check, transfer_check, TOL};
use hello_core::config::{LabelArm, OutputSpace};
use hello_core::downstream::student_grads;
use hello_core::nn::{ConvNet, ConvNetSpec};
use hello_core::rng::seeded_rng;

#[test]
fn transfer_gradients_match_finite_differences() {
    let e = transfer_check();
    assert!(e <= TOL, "relative error {e:e}");
}

#[test]
fn student_gradients_match_finite_differences() {
    let e = student_check();
    assert!(e <= TOL, "relative error {e:e}");
}

#[test]
fn online_arm_without_labels_is_an_error() {
    let spec = ConvNetSpec::named("convnet-xs", [3, 8, 8], 4).unwrap();
    let net = ConvNet::init(spec, &mut seeded_rng(0)).unwrap();
    let x = common::uniform_images(2, [3, 8, 8], 1);
    let hard = one_hot(&[0, 1], 4);
    assert!(student_grads(&net, &x, LabelArm::Online, OutputSpace::Logits, None, &hard, 0.1).is_err());
}
