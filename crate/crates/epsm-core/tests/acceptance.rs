//! Acceptance gate: every numbered selftest criterion as its own test,
//! sharing one lazily built context. Each test prints the criterion's
//! status line (visible with --nocapture) and fails with the same line.

use std::sync::OnceLock;

use epsm_core::selftest::{criterion, SelftestContext};

fn ctx() -> &'static SelftestContext {
    static CTX: OnceLock<SelftestContext> = OnceLock::new();
    CTX.get_or_init(SelftestContext::new)
}

fn check(index: usize) {
    let report = criterion(ctx(), index);
    println!("{}", report.status_line());
    assert!(report.passed, "{}", report.status_line());
}

#[test]
fn criterion_01_contour_matches_spectral_sum() {
    check(1);
}

#[test]
fn criterion_02_response_conserves_charge() {
    check(2);
}

#[test]
fn criterion_03_head_ratio_matches_curvature_tensor() {
    check(3);
}

#[test]
fn criterion_04_curvature_tensor_positive() {
    check(4);
}

#[test]
fn criterion_05_dielectric_hermitian_bounded() {
    check(5);
}

#[test]
fn criterion_06_two_route_macroscopic_tensor() {
    check(6);
}

#[test]
fn criterion_07_defect_loop_neutral() {
    check(7);
}

#[test]
fn criterion_08_screening_factor() {
    check(8);
}

#[test]
fn criterion_09_anisotropic_screening() {
    check(9);
}

#[test]
fn criterion_10_homogenized_limit() {
    check(10);
}

#[test]
fn criterion_11_second_order_vanishes() {
    check(11);
}

#[test]
fn criterion_12_structural_invariants() {
    check(12);
}
