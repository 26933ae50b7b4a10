//! Central finite-difference checks for every differentiable op and for the
//! full unlabeled loss, including the variance path into the latent.

#[path = "support/grad_suite.rs"]
mod grad_suite;

use grad_suite::*;

const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn assert_group(group: Group) {
    let rec = run(group, INSTANCES);
    for (name, (worst, n)) in &rec.ops {
        assert!(*n >= INSTANCES as usize, "{name}: only {n} checks");
        assert!(*worst <= TOL, "{name}: relative error {worst:e}");
    }
}

#[test]
fn matmul_both_operands() {
    assert_group(grad_suite::matmul_both_operands);
}

#[test]
fn conv2d_input_kernel_bias() {
    assert_group(grad_suite::conv2d_input_kernel_bias);
}

#[test]
fn elementwise_binary_ops() {
    assert_group(grad_suite::elementwise_binary_ops);
}

#[test]
fn unary_and_reduction_ops() {
    assert_group(grad_suite::unary_and_reduction_ops);
}

#[test]
fn bilinear_upsample() {
    assert_group(grad_suite::bilinear_upsample);
}

#[test]
fn variance_and_mean_nodes() {
    assert_group(grad_suite::variance_and_mean_nodes);
}

#[test]
fn full_unlabeled_loss_through_model() {
    assert_group(grad_suite::full_unlabeled_loss_through_model);
}
