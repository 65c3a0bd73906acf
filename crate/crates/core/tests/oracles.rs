//! The decomposition, CEM and matrix kernels against independently written
//! oracles.

mod support;

use support::oracles::{naive_matmul, singular_values_oracle};
use support::suites::{cem_suite, identity_suite, pca_suite, svd_suite};
use svf_core::linalg::{reconstruct, svd, Matrix, SeededRng};

#[test]
fn svd_matches_jacobi_oracle_on_random_matrices() {
    let s = svd_suite(200, 0);
    assert_eq!(s.matrices, 200);
    assert!(s.max_reconstruction <= 1e-6, "{s:?}");
    assert!(s.max_orthonormality <= 1e-8, "{s:?}");
    assert!(s.max_sigma_error <= 1e-8, "{s:?}");
}

#[test]
fn svd_fixture_8x5_seed_42() {
    let mut rng = SeededRng::new(42, "fixture", &[]);
    let w = Matrix::random_normal(8, 5, 1.0, &mut rng);
    let f = svd(&w).unwrap();
    assert!(reconstruct(&f).unwrap().max_abs_diff(&w) <= 1e-6);
    for (a, b) in f.sigma.iter().zip(singular_values_oracle(&w)) {
        assert!((a - b).abs() <= 1e-8);
    }
}

#[test]
fn jacobi_oracle_on_known_spectrum() {
    let w = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, -2.0], &[0.0, 0.0]]);
    let s = singular_values_oracle(&w);
    assert!((s[0] - 3.0).abs() < 1e-14 && (s[1] - 2.0).abs() < 1e-14);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = SeededRng::new(7, "gemm", &[]);
    let a = Matrix::random_normal(4, 3, 1.0, &mut rng);
    let b = Matrix::random_normal(3, 5, 1.0, &mut rng);
    assert!(a.matmul(&b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) <= 1e-10);
    let big_a = Matrix::random_normal(37, 29, 1.0, &mut rng);
    let big_b = Matrix::random_normal(29, 41, 1.0, &mut rng);
    assert!(big_a.matmul(&big_b).unwrap().max_abs_diff(&naive_matmul(&big_a, &big_b)) <= 1e-10);
}

#[test]
fn ones_expert_is_identity_and_application_is_linear() {
    let s = identity_suite();
    assert!(s.ones_forward_diff <= 1e-8, "{s:?}");
    assert!(s.linearity_diff <= 1e-9, "{s:?}");
}

#[test]
fn cem_step_matches_brute_force_bitwise() {
    let s = cem_suite();
    assert_eq!(s.bitwise_matches, s.cases, "{s:?}");
    assert!(s.forced_example);
    assert!(s.quadratic_error <= 1e-2 && s.quadratic_iterations <= 50, "{s:?}");
}

#[test]
fn pca_ratio_properties() {
    let s = pca_suite();
    assert!(s.monotone && s.full_rank_is_one && s.fixture, "{s:?}");
}
