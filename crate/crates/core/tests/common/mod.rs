#![allow(dead_code)]

pub mod oracles;

use entivid_core::features::{PhaseAnnotations, TokenGrid, VideoFeatures};
use entivid_core::loss::{scl_loss, SclParams};
use entivid_core::{FrontendKind, Model, ModelConfig, PoolingMode};
use entivid_tensor::{grad_check, GradCheckConfig, GradCheckReport, Tape, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Random video with `layers` grids of `frames x tokens x channels`, labelled
/// with two alternating-run phases.
pub fn random_video(
    seed: u64,
    frames: usize,
    layers: usize,
    tokens: usize,
    channels: usize,
) -> VideoFeatures {
    let mut r = rng(seed);
    let grids = (0..layers)
        .map(|_| {
            TokenGrid::new(
                frames,
                tokens,
                channels,
                uniform_vec(&mut r, frames * tokens * channels),
            )
            .unwrap()
        })
        .collect();
    let half = frames / 2;
    let labels = (0..frames).map(|t| u32::from(t >= half)).collect();
    let progression = (0..frames)
        .map(|t| {
            let end = if t < half { half } else { frames };
            (end - t) as f32 / frames as f32
        })
        .collect();
    VideoFeatures::with_frame_timestamps(
        format!("rand{seed}"),
        grids,
        Some(PhaseAnnotations {
            labels,
            progression,
        }),
    )
    .unwrap()
}

pub fn tiny_config(
    frontend: FrontendKind,
    entities: usize,
    layers: usize,
    channels: usize,
) -> ModelConfig {
    ModelConfig {
        frontend,
        entities,
        layers,
        channels,
        d_q: 8,
        d_v: 8,
        d_model: 8,
        blocks: 3,
        heads: 2,
        mlp_ratio: 2,
        pooling: PoolingMode::Average,
        proj_dim: 8,
    }
}

pub fn set_param(model: &mut Model, name: &str, values: Vec<f32>) {
    let id = model
        .store
        .id(name)
        .unwrap_or_else(|| panic!("no parameter `{name}`"));
    let slot = model.store.get_mut(id).value.data_mut();
    assert_eq!(slot.len(), values.len(), "size of `{name}`");
    slot.copy_from_slice(&values);
}

pub fn param(model: &Model, name: &str) -> Vec<f32> {
    let id = model.store.id(name).unwrap();
    model.store.get(id).value.data().to_vec()
}

pub fn identity(n: usize) -> Vec<f32> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
    }
    out
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

/// 64-bit finite-difference check of every parameter through the whole
/// model and the contrastive loss between two views of `video`.
pub fn pipeline_grad_check(
    model: &Model,
    video: &VideoFeatures,
    views: [&[usize]; 2],
) -> GradCheckReport {
    let params = model.store.values_f64();
    let ts: Vec<Vec<u32>> = views
        .iter()
        .map(|v| v.iter().map(|&f| f as u32).collect())
        .collect();
    let f = |tape: &mut Tape<f64>, p: &[Var]| -> Result<Var, TensorError> {
        let a = model.forward(tape, p, video, views[0]).expect("forward");
        let b = model.forward(tape, p, video, views[1]).expect("forward");
        let params = SclParams {
            sigma: 1.0,
            temperature: 0.5,
        };
        Ok(scl_loss(tape, a.projected, &ts[0], b.projected, &ts[1], params).expect("loss"))
    };
    grad_check(f, &params, &GradCheckConfig::default()).unwrap()
}

/// The smallest end-to-end toy: E = 2 entities over S = 4 tokens of D = 8
/// channels, one layer.
pub fn grad_toy_config(
    frontend: FrontendKind,
    entities: usize,
    pooling: PoolingMode,
) -> ModelConfig {
    ModelConfig {
        d_q: 4,
        d_v: 4,
        pooling,
        ..tiny_config(frontend, entities, 1, 8)
    }
}
