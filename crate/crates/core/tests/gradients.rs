use idat_core::distill::{DistillPlan, LossKind};
use idat_core::gradcheck::{
    joint_objective_check, joint_suite, op_names, op_suite, reference, Tolerance,
};
use idat_core::model::{AdapterSpec, AdapterVariant, Model, ViTConfig};
use idat_core::rng::stream_rng;
use idat_core::Tensor;
use rand::Rng;

fn show(report: &idat_core::gradcheck::CheckReport) -> String {
    let worst: Vec<_> = report.mismatches.iter().take(5).collect();
    format!(
        "{} cases, {} elements, {} mismatches, max abs err {:.2e}; first: {worst:?}",
        report.cases,
        report.elements,
        report.mismatches.len(),
        report.max_abs_err
    )
}

#[test]
fn every_op_matches_finite_differences() {
    let report = op_suite(4, 17, 3e-2, Tolerance::default()).unwrap();
    assert!(report.cases >= 4 * op_names().len());
    assert!(report.passed(), "{}", show(&report));
}

#[test]
fn joint_objective_matches_finite_differences() {
    let report = joint_suite(5, 1e-3, Tolerance::default()).unwrap();
    assert!(report.passed(), "{}", show(&report));
}

#[test]
fn standard_kl_and_detached_teacher_objectives() {
    let mut plan = DistillPlan::new(LossKind::Kl);
    plan.kl_convention = idat_core::distill::KlConvention::Standard;
    let r = joint_objective_check(
        AdapterVariant::Parallel,
        plan,
        false,
        3,
        1e-3,
        Tolerance::default(),
    )
    .unwrap();
    assert!(r.passed(), "{}", show(&r));
    let none = joint_objective_check(
        AdapterVariant::Parallel,
        DistillPlan::baseline(),
        false,
        4,
        1e-3,
        Tolerance::default(),
    )
    .unwrap();
    assert!(none.passed(), "{}", show(&none));
}

fn random_model(variant: Option<AdapterVariant>, seed: u64) -> (Model, Tensor) {
    let cfg = ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        depth: 2,
        width: 12,
        heads: 3,
        mlp_ratio: 2,
        num_classes: 5,
    };
    let mut rng = stream_rng(seed, 1);
    let mut m = Model::new(cfg, &mut rng).unwrap();
    if let Some(v) = variant {
        m.inject_adapters(
            AdapterSpec {
                variant: v,
                hidden_dim: 3,
                scaling: 0.7,
            },
            &mut rng,
        )
        .unwrap();
    }
    for p in m.parameters_mut() {
        for v in p.tensor.data_mut() {
            *v += rng.random_range(-0.3f32..0.3);
        }
    }
    let images = Tensor::new(
        vec![4, 8, 8, 3],
        (0..4 * 8 * 8 * 3).map(|_| rng.random::<f32>()).collect(),
    )
    .unwrap();
    (m, images)
}

#[test]
fn tape_forward_agrees_with_reference_implementation() {
    let variants = [
        None,
        Some(AdapterVariant::Sequential),
        Some(AdapterVariant::Parallel),
        Some(AdapterVariant::ParallelShared),
    ];
    for (i, v) in variants.into_iter().enumerate() {
        let (m, images) = random_model(v, i as u64);
        let tape = m.logits(&images).unwrap();
        let oracle = reference::logits(
            m.config(),
            m.adapter_spec(),
            &reference::params_of(&m),
            &images,
        )
        .unwrap();
        for (row, want) in tape.data().chunks(5).zip(&oracle) {
            for (&a, &b) in row.iter().zip(want) {
                assert!(
                    (a as f64 - b).abs() <= 1e-4 * (1.0 + b.abs()),
                    "{v:?}: {a} vs {b}"
                );
            }
        }
    }
}
