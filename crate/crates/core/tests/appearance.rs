mod common;

use aam_cgd::appearance::{build_appearance_model, AppearanceModel, BpoOperator};
use aam_cgd::linalg::identity_defect;
use aam_cgd::shape::Components;
use aam_cgd::AamError;
use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;

const LEN: usize = 60;

/// Samples around a random offset with a dominant three-dimensional
/// subspace and small isotropic noise.
fn samples(rng: &mut ChaCha8Rng, count: usize) -> Vec<DVector<f64>> {
    let offset = random_vector(rng, LEN).add_scalar(3.0);
    let dirs = random_matrix(rng, LEN, 3);
    (0..count)
        .map(|_| &offset + &dirs * (random_vector(rng, 3) * 4.0) + random_vector(rng, LEN) * 0.05)
        .collect()
}

fn model(seed: u64, components: Components) -> (AppearanceModel, Vec<DVector<f64>>) {
    let vs = samples(&mut rng(seed), 16);
    let (m, _) = build_appearance_model(&vs, components, 1).unwrap();
    (m, vs)
}

/// `ρ A D⁻¹ Aᵀ + ((1 − ρ)/σ²)(I − A Aᵀ)` built densely.
fn dense_bpo(m: &AppearanceModel, rho: f64) -> DMatrix<f64> {
    let a = &m.basis;
    let d = DMatrix::from_diagonal(&m.eigenvalues.map(|e| 1.0 / (e + m.image_noise)));
    let id = DMatrix::identity(a.nrows(), a.nrows());
    a * d * a.transpose() * rho + (id - a * a.transpose()) * ((1.0 - rho) / m.image_noise)
}

proptest! {
    #![proptest_config(proptest_config(32))]

    #[test]
    fn project_out_is_idempotent_and_orthogonal(seed in 0u64..1000) {
        let (m, _) = model(seed, Components::Count(3));
        let r = random_vector(&mut rng(seed + 1), LEN) * 10.0;
        let once = m.project_out(&r).unwrap();
        let twice = m.project_out(&once).unwrap();
        prop_assert!((&once - twice).amax() < 1e-12 * (1.0 + r.norm()));
        prop_assert!(m.basis.tr_mul(&once).amax() < 1e-12 * (1.0 + r.norm()));
    }

    #[test]
    fn basis_is_orthonormal_and_mean_is_orthogonal(seed in 0u64..1000, k in 1usize..8) {
        let (m, _) = model(seed, Components::Count(k));
        prop_assert_eq!(m.n_components(), k);
        prop_assert!(identity_defect(&m.basis.tr_mul(&m.basis)) < 1e-10);
        prop_assert!(m.basis.tr_mul(&m.mean).amax() < 1e-10 * (1.0 + m.mean.norm()));
        m.validate().unwrap();
    }

    #[test]
    fn projection_inverts_instance(seed in 0u64..1000) {
        let (m, _) = model(seed, Components::Count(5));
        let c = random_vector(&mut rng(seed + 2), 5) * 7.0;
        let back = m.project(&m.instance(&c).unwrap()).unwrap();
        prop_assert!((back - c).amax() < 1e-10);
    }

    #[test]
    fn bpo_matches_the_dense_operator(seed in 0u64..1000, rho in 0.0f64..=1.0) {
        let (m, _) = model(seed, Components::Count(4));
        let r = random_vector(&mut rng(seed + 3), LEN);
        let (weighted, cost) = BpoOperator::new(&m, rho).unwrap().apply(&r).unwrap();
        let q = dense_bpo(&m, rho);
        let oracle = &q * &r;
        prop_assert!(rel_err(&weighted, &oracle) < 1e-10);
        prop_assert!((cost - r.dot(&oracle)).abs() < 1e-10 * (1.0 + cost.abs()));
        prop_assert!(cost >= 0.0);
    }
}

#[test]
fn data_mean_is_the_sample_mean() {
    let (m, vs) = model(5, Components::Count(3));
    let mean = vs.iter().fold(DVector::zeros(LEN), |acc, v| acc + v) / vs.len() as f64;
    assert!((m.data_mean() - mean).amax() < 1e-10);
    assert!((m.basis.tr_mul(&m.data_mean()) - &m.prior_mean).amax() < 1e-10);
}

#[test]
fn full_variance_ratio_reconstructs_training_vectors() {
    let (m, vs) = model(6, Components::VarianceRatio(1.0));
    assert_eq!(m.n_components(), vs.len() - 1);
    for v in &vs {
        let rebuilt = m.instance(&m.project(v).unwrap()).unwrap();
        assert!((rebuilt - v).amax() < 1e-9);
    }
}

#[test]
fn bpo_approaches_project_out_when_eigenvalues_dominate() {
    let (mut m, _) = model(7, Components::Count(3));
    m.eigenvalues = DVector::from_element(3, 1e12);
    let r = random_vector(&mut rng(8), LEN);
    let rho = 0.5;
    let (weighted, _) = BpoOperator::new(&m, rho).unwrap().apply(&r).unwrap();
    let limit = m.project_out(&r).unwrap();
    let scaled = weighted * (m.image_noise / (1.0 - rho));
    assert!(rel_err(&scaled, &limit) < 1e-4);
}

#[test]
fn bpo_without_prior_weight_is_scaled_project_out() {
    let (m, _) = model(9, Components::Count(3));
    let r = random_vector(&mut rng(10), LEN);
    let (weighted, cost) = BpoOperator::new(&m, 0.0).unwrap().apply(&r).unwrap();
    let po = m.project_out(&r).unwrap();
    assert!(rel_err(&weighted, &(&po / m.image_noise)) < 1e-12);
    assert!((cost - po.norm_squared() / m.image_noise).abs() < 1e-10 * cost);
}

#[test]
fn invalid_inputs_are_rejected() {
    let (m, vs) = model(11, Components::Count(3));
    assert!(matches!(BpoOperator::new(&m, 1.5), Err(AamError::Config(_))));
    assert!(matches!(BpoOperator::new(&m, -0.1), Err(AamError::Config(_))));
    assert!(matches!(m.project_out(&DVector::zeros(LEN + 1)), Err(AamError::Dimension { .. })));
    assert!(build_appearance_model(&vs[..1], Components::All, 1).is_err());
    let ragged = vec![vs[0].clone(), DVector::zeros(LEN - 1)];
    assert!(build_appearance_model(&ragged, Components::All, 1).is_err());
}
