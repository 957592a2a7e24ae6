mod common;

use std::time::Instant;

use common::{grad_toy_config, pipeline_grad_check, random_video};
use entivid_core::fusion::pool_output;
use entivid_core::{FrontendKind, Model, ModelConfig, PoolingMode, VideoFeatures};
use entivid_tensor::{grad_check, GradCheckConfig, Tape, TensorError, Var};

fn check_model(model: &Model, video: &VideoFeatures, views: [&[usize]; 2], what: &str) {
    let report = pipeline_grad_check(model, video, views);
    assert!(
        report.passed() && report.max_rel_error < 1e-5,
        "{what}: max rel error {:.3e}, first flagged {:?}",
        report.max_rel_error,
        report.flagged.first()
    );
}

#[test]
fn full_pipeline_gradients() {
    let start = Instant::now();
    // T = 2, E = 2, S = 4, D = 8
    let video = random_video(1, 2, 1, 4, 8);
    let model = Model::new(
        grad_toy_config(FrontendKind::Pooling, 2, PoolingMode::Average),
        3,
    )
    .unwrap();
    check_model(&model, &video, [&[0, 1], &[0, 1]], "pooling/average");
    assert!(
        start.elapsed().as_secs_f64() < 10.0,
        "{:?}",
        start.elapsed()
    );
}

#[test]
fn pipeline_gradients_for_other_variants() {
    let video = random_video(2, 4, 2, 4, 8);
    let cls = ModelConfig {
        layers: 2,
        ..grad_toy_config(FrontendKind::Pooling, 2, PoolingMode::ClsStyle)
    };
    check_model(
        &Model::new(cls, 4).unwrap(),
        &video,
        [&[0, 2], &[1, 3]],
        "pooling/cls",
    );

    // single-entity pooling
    let one = grad_toy_config(FrontendKind::Pooling, 1, PoolingMode::Average);
    let video1 = random_video(3, 2, 1, 4, 8);
    check_model(
        &Model::new(one, 5).unwrap(),
        &video1,
        [&[0, 1], &[0, 1]],
        "single entity",
    );

    let fixed = grad_toy_config(FrontendKind::FixedWidth, 3, PoolingMode::Average);
    check_model(
        &Model::new(fixed, 6).unwrap(),
        &video1,
        [&[0, 1], &[0, 1]],
        "fixed width",
    );
}

#[test]
fn pooling_features_gradients() {
    // entity features alone, reduced with fixed random weights
    let model = Model::new(
        grad_toy_config(FrontendKind::Pooling, 1, PoolingMode::Average),
        7,
    )
    .unwrap();
    let video = random_video(4, 2, 1, 4, 8);
    let params = model.store.values_f64();
    let weights: Vec<f64> = (0..2 * model.config.d_model)
        .map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0)
        .collect();
    let f = |tape: &mut Tape<f64>, p: &[Var]| -> Result<Var, TensorError> {
        let out = model.forward(tape, p, &video, &[0, 1]).expect("forward");
        let w = entivid_tensor::Tensor::new(vec![2, model.config.d_model], weights.clone())?;
        let y = tape.mul_const(out.entities, &w)?;
        Ok(tape.sum(y))
    };
    let report = grad_check(f, &params, &GradCheckConfig::default()).unwrap();
    assert!(report.max_rel_error < 1e-5, "{}", report.max_rel_error);
}

#[test]
fn fusion_and_pooling_gradients() {
    // build -> encode -> pool, for both pooling modes, with the entity features as a leaf
    for mode in [PoolingMode::Average, PoolingMode::ClsStyle] {
        let model = Model::new(grad_toy_config(FrontendKind::Pooling, 2, mode), 8).unwrap();
        let mut params = model.store.values_f64();
        let dm = model.config.d_model;
        let feats =
            entivid_tensor::Tensor::from_fn(&[2 * 2, dm], |i| ((i * 7 % 13) as f64) / 13.0 - 0.5);
        params.push(feats);
        let f = |tape: &mut Tape<f64>, p: &[Var]| -> Result<Var, TensorError> {
            let (store_vars, x) = p.split_at(p.len() - 1);
            let tokens = model.fusion.build_tokens(tape, x[0]).expect("tokens");
            let out = model
                .fusion
                .encode(tape, store_vars, tokens)
                .expect("encode");
            let pooled = pool_output(tape, out, 2, mode).expect("pool");
            let w = entivid_tensor::Tensor::from_fn(tape.shape(pooled), |i| {
                0.05 * ((i % 5) as f64 - 2.0)
            });
            let y = tape.mul_const(pooled, &w)?;
            Ok(tape.sum(y))
        };
        let report = grad_check(f, &params, &GradCheckConfig::default()).unwrap();
        assert!(
            report.max_rel_error < 1e-5,
            "{mode}: {} at {:?}",
            report.max_rel_error,
            report.flagged.first()
        );
    }
}
