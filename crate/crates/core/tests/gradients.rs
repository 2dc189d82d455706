//! Central finite-difference checks of every differentiable graph op and of
//! the composite blocks built from them.

mod support;

use support::fd::{self, FdOutcome};

fn check(outcome: FdOutcome) {
    println!(
        "{:<28} {} instances ({} redrawn at kinks), worst relative error {:.2e}",
        outcome.name, outcome.checked, outcome.redrawn, outcome.worst
    );
    if let Some(f) = &outcome.failure {
        panic!("{}: {f}", outcome.name);
    }
    assert!(outcome.checked >= fd::INSTANCES);
}

#[test]
fn conv2d() {
    check(fd::conv2d());
}

#[test]
fn relu() {
    check(fd::relu());
}

#[test]
fn batchnorm_train() {
    check(fd::batchnorm_train());
}

#[test]
fn batchnorm_train_without_affine() {
    check(fd::batchnorm_train_without_affine());
}

#[test]
fn batchnorm_eval() {
    check(fd::batchnorm_eval());
}

#[test]
fn max_pool() {
    check(fd::max_pool());
}

#[test]
fn avg_pool() {
    check(fd::avg_pool());
}

#[test]
fn add_and_scale() {
    check(fd::add_and_scale());
}

#[test]
fn weighted_sum() {
    check(fd::weighted_sum());
}

#[test]
fn softmax_rows() {
    check(fd::softmax_rows());
}

#[test]
fn concat() {
    check(fd::concat());
}

#[test]
fn shift() {
    check(fd::shift());
}

#[test]
fn global_avg_pool_and_reshape() {
    check(fd::global_avg_pool_and_reshape());
}

#[test]
fn linear() {
    check(fd::linear());
}

#[test]
fn softmax_cross_entropy() {
    check(fd::softmax_cross_entropy());
}

#[test]
fn sample_mask() {
    check(fd::sample_mask());
}

#[test]
fn sep_conv_block() {
    check(fd::sep_conv_block());
}

#[test]
fn dil_conv_block() {
    check(fd::dil_conv_block());
}

#[test]
fn factorized_reduce_block() {
    check(fd::factorized_reduce_block());
}

#[test]
fn relu_conv_bn_block() {
    check(fd::relu_conv_bn_block());
}

#[test]
fn supernet_architecture_logits() {
    check(fd::supernet_architecture_logits());
}
