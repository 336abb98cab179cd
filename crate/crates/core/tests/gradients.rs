mod common;

use common::grad_suite as suite;

#[test]
fn elementwise() {
    suite::elementwise();
}

#[test]
fn linear_algebra() {
    suite::linear_algebra();
}

#[test]
fn reductions_and_shapes() {
    suite::reductions_and_shapes();
}

#[test]
fn softmax_family() {
    suite::softmax_family();
}

#[test]
fn losses() {
    suite::losses();
}

#[test]
fn convolution_and_sampling() {
    suite::convolution_and_sampling();
}

#[test]
fn deformable_convolution() {
    suite::deformable_convolution();
}

#[test]
fn attention() {
    suite::attention();
}

#[test]
fn semantic_alignment_loss() {
    suite::semantic_alignment_loss();
}

#[test]
fn consistency_loss_with_frozen_indices() {
    suite::consistency_loss_with_frozen_indices();
}

#[test]
fn detection_loss() {
    suite::detection_loss();
}

#[test]
fn total_loss_stage_one() {
    suite::total_loss_stage_one();
}

#[test]
fn total_loss_stage_two() {
    suite::total_loss_stage_two();
}
