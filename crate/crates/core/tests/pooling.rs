mod common;

use common::{identity, param, random_video, set_param, tiny_config, uniform_vec};
use entivid_core::features::{TokenGrid, VideoFeatures};
use entivid_core::pooling::{attention_file_name, export_attention, AttentionMap};
use entivid_core::{Error, FrontendKind, Model, ModelConfig};
use rand::Rng;

fn pooling_model(entities: usize, layers: usize, channels: usize, seed: u64) -> Model {
    Model::new(
        tiny_config(FrontendKind::Pooling, entities, layers, channels),
        seed,
    )
    .unwrap()
}

/// `x [n, a] * w [a, b]` in f64.
fn matmul(x: &[f32], w: &[f32], a: usize, b: usize) -> Vec<f64> {
    let n = x.len() / a;
    let mut out = vec![0.0; n * b];
    for i in 0..n {
        for k in 0..a {
            for j in 0..b {
                out[i * b + j] += x[i * a + k] as f64 * w[k * b + j] as f64;
            }
        }
    }
    out
}

fn video_from_frames(frames: Vec<Vec<Vec<f32>>>, tokens: usize, channels: usize) -> VideoFeatures {
    // frames[t][layer] -> S*D values
    let t = frames.len();
    let layers = frames[0].len();
    let grids = (0..layers)
        .map(|l| {
            let data = frames.iter().flat_map(|f| f[l].clone()).collect();
            TokenGrid::new(t, tokens, channels, data).unwrap()
        })
        .collect();
    VideoFeatures::with_frame_timestamps("v", grids, None).unwrap()
}

#[test]
fn attention_rows_are_distributions() {
    for (e, l, seed) in [(3, 3, 0), (1, 2, 1), (6, 1, 2)] {
        let model = pooling_model(e, l, 6, seed);
        let video = random_video(seed + 10, 5, l, 16, 6);
        let set = model.entity_set(&video).unwrap();
        assert_eq!(set.entities, e);
        assert_eq!(set.attention.len(), l);
        for layer in 0..l {
            for t in 0..5 {
                for ent in 0..e {
                    let row = set.attention_row(layer, t, ent);
                    assert_eq!(row.len(), 16);
                    let sum: f64 = row.iter().map(|&a| a as f64).sum();
                    assert!((sum - 1.0).abs() < 1e-5, "{sum}");
                    assert!(row.iter().all(|&a| a >= 0.0));
                    set.attention_map(layer, t, ent).unwrap();
                }
            }
        }
    }
}

#[test]
fn identical_tokens_ignore_the_queries() {
    let (d, s, l) = (5, 9, 2);
    let mut r = common::rng(4);
    let frames: Vec<Vec<Vec<f32>>> = (0..3)
        .map(|_| {
            (0..l)
                .map(|_| {
                    let tok = uniform_vec(&mut r, d);
                    tok.repeat(s)
                })
                .collect()
        })
        .collect();
    let video = video_from_frames(frames.clone(), s, d);
    let mut a = pooling_model(3, l, d, 0);
    let mut b = a.clone();
    for layer in 0..l {
        let name = format!("pool.l{layer}.queries");
        let n = param(&a, &name).len();
        set_param(
            &mut b,
            &name,
            uniform_vec(&mut r, n).iter().map(|x| 5.0 * x).collect(),
        );
        // keys are irrelevant too
        let name = format!("pool.l{layer}.key");
        let n = param(&a, &name).len();
        set_param(&mut a, &name, uniform_vec(&mut r, n));
    }
    let sa = a.entity_set(&video).unwrap();
    let sb = b.entity_set(&video).unwrap();

    let cfg = a.config;
    let w_o = param(&a, "pool.out");
    for (t, frame) in frames.iter().enumerate() {
        let mut cat = Vec::new();
        for (layer, grid) in frame.iter().enumerate() {
            let v = matmul(
                &grid[..d],
                &param(&a, &format!("pool.l{layer}.value")),
                d,
                cfg.d_v,
            );
            cat.extend(v.iter().map(|&x| x as f32));
        }
        let expect = matmul(&cat, &w_o, l * cfg.d_v, cfg.d_model);
        for e in 0..3 {
            for (j, &x) in expect.iter().enumerate() {
                assert!((sa.feature(t, e)[j] as f64 - x).abs() < 1e-5);
                assert!((sb.feature(t, e)[j] as f64 - x).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn saturated_query_reads_one_token() {
    // one layer, D = d_q = d_v = d_model so that W_K and W_O can be identities
    let d = 8;
    let mut model = pooling_model(3, 1, d, 5);
    set_param(&mut model, "pool.l0.key", identity(d));
    set_param(&mut model, "pool.out", identity(d));
    let mut r = common::rng(6);
    let mut queries = param(&model, "pool.l0.queries");
    for e in 0..3 {
        let norm = queries[e * d..(e + 1) * d]
            .iter()
            .map(|x| x * x)
            .sum::<f32>()
            .sqrt();
        queries[e * d..(e + 1) * d]
            .iter_mut()
            .for_each(|x| *x /= norm);
    }
    set_param(&mut model, "pool.l0.queries", queries.clone());
    let w_v = param(&model, "pool.l0.value");

    for e in 0..3 {
        let q = &queries[e * d..(e + 1) * d];
        let s = 16;
        let hot = r.random_range(0..s);
        let mut grid = Vec::with_capacity(s * d);
        for i in 0..s {
            if i == hot {
                grid.extend(q.iter().map(|x| 100.0 * x));
            } else {
                let mut v = uniform_vec(&mut r, d);
                let dot: f32 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
                grid.extend(v);
            }
        }
        let video = video_from_frames(vec![vec![grid.clone()]], s, d);
        let set = model.entity_set(&video).unwrap();
        let expect = matmul(&grid[hot * d..(hot + 1) * d], &w_v, d, d);
        for (j, &x) in expect.iter().enumerate() {
            let got = set.feature(0, e)[j] as f64;
            assert!((got - x).abs() < 1e-4, "entity {e}: {got} vs {x}");
        }
        assert!(set.attention_row(0, 0, e)[hot] > 0.999);
    }
}

#[test]
fn frames_with_equal_grids_give_equal_rows() {
    let model = pooling_model(3, 2, 4, 1);
    let mut r = common::rng(2);
    let same: Vec<Vec<f32>> = (0..2).map(|_| uniform_vec(&mut r, 9 * 4)).collect();
    let other: Vec<Vec<f32>> = (0..2).map(|_| uniform_vec(&mut r, 9 * 4)).collect();
    let video = video_from_frames(vec![same.clone(), other, same], 9, 4);
    let set = model.entity_set(&video).unwrap();
    for e in 0..3 {
        assert_eq!(set.feature(0, e), set.feature(2, e));
        for l in 0..2 {
            assert_eq!(set.attention_row(l, 0, e), set.attention_row(l, 2, e));
        }
        assert_ne!(set.feature(0, e), set.feature(1, e));
    }
}

#[test]
fn spatial_permutation_moves_attention_and_keeps_features() {
    let (s, d) = (16, 6);
    let model = pooling_model(3, 2, d, 3);
    let video = random_video(8, 3, 2, s, d);
    let mut r = common::rng(9);
    let mut perm: Vec<usize> = (0..s).collect();
    for i in (1..s).rev() {
        perm.swap(i, r.random_range(0..=i));
    }
    // token i of the permuted frame is token perm[i] of the original
    let grids = video
        .layers()
        .iter()
        .map(|g| {
            let mut data = Vec::with_capacity(g.data().len());
            for t in 0..g.frames() {
                let frame = g.frame(t);
                for &p in &perm {
                    data.extend_from_slice(&frame[p * d..(p + 1) * d]);
                }
            }
            TokenGrid::new(g.frames(), s, d, data).unwrap()
        })
        .collect();
    let permuted = VideoFeatures::with_frame_timestamps("p", grids, None).unwrap();
    let a = model.entity_set(&video).unwrap();
    let b = model.entity_set(&permuted).unwrap();
    assert_eq!(a.features, b.features);
    for l in 0..2 {
        for t in 0..3 {
            for e in 0..3 {
                let (ra, rb) = (a.attention_row(l, t, e), b.attention_row(l, t, e));
                for (i, &p) in perm.iter().enumerate() {
                    assert_eq!(rb[i], ra[p]);
                }
            }
        }
    }
}

#[test]
fn fresh_models_do_not_saturate() {
    for s in [16, 64] {
        for seed in 0..5 {
            let model = Model::new(
                ModelConfig {
                    layers: 1,
                    ..ModelConfig::default()
                },
                seed,
            )
            .unwrap();
            let d = model.config.channels;
            let mut r = common::rng(100 + seed);
            let mut data = Vec::new();
            for _ in 0..4 * s {
                let v = uniform_vec(&mut r, d);
                let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
                data.extend(v.iter().map(|x| x / norm));
            }
            let grid = TokenGrid::new(4, s, d, data).unwrap();
            let video = VideoFeatures::with_frame_timestamps("u", vec![grid], None).unwrap();
            let set = model.entity_set(&video).unwrap();
            let max = set.attention[0].iter().copied().fold(0.0, f32::max);
            assert!(max < 0.9, "S={s} seed={seed}: {max}");
        }
    }
}

#[test]
fn single_entity_pooling() {
    let model = pooling_model(1, 2, 4, 0);
    let video = random_video(1, 3, 2, 9, 4);
    let set = model.entity_set(&video).unwrap();
    assert_eq!(set.entities, 1);
    assert_eq!(set.features.len(), 3 * model.config.d_model);
    assert_eq!(set.attention[0].len(), 3 * 9);
}

#[test]
fn mismatched_features_are_rejected() {
    let model = pooling_model(3, 2, 4, 0);
    for video in [random_video(0, 3, 1, 9, 4), random_video(0, 3, 2, 9, 5)] {
        assert!(matches!(model.entity_set(&video), Err(Error::Dimension(_))));
        assert!(model.embed(&video).is_err());
    }
    let fixed = Model::new(tiny_config(FrontendKind::FixedWidth, 3, 1, 4), 0).unwrap();
    assert!(matches!(
        fixed.entity_set(&random_video(0, 3, 1, 9, 4)),
        Err(Error::Spec(_))
    ));
}

#[test]
fn exported_map_file() {
    let dir = tempfile::tempdir().unwrap();
    let model = pooling_model(3, 1, 4, 0);
    let video = random_video(2, 2, 1, 64, 4);
    let set = model.entity_set(&video).unwrap();
    let map = set.attention_map(0, 1, 2).unwrap();
    assert_eq!(map.grid_side(), 8);
    let path = dir.path().join(attention_file_name("rand2", 1, 2, 0));
    export_attention(&map, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let header = b"P5\n8 8\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 64);
    assert!(bytes[header.len()..].contains(&255) && bytes[header.len()..].contains(&0));
    assert!(path.ends_with("rand2_f1_e2_l0.pgm"));

    let flat = AttentionMap::new(8, vec![1.0 / 64.0; 64]).unwrap();
    assert!(flat.to_pgm()[header.len()..].iter().all(|&b| b == 128));
}
