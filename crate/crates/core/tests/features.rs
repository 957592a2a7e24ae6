mod common;

use entivid_core::features::{
    generate_synthetic_dataset, PhaseAnnotations, SyntheticSpec, TokenGrid, VideoFeatures,
};
use entivid_core::mvff::{decode_mvff, encode_mvff, load_mvff, write_mvff};
use entivid_core::{Error, FormatError};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_videos: 6,
        frames_per_video: 12,
        ..SyntheticSpec::default()
    }
}

#[test]
fn generation_is_deterministic() {
    let a = generate_synthetic_dataset(&small_spec()).unwrap();
    let b = generate_synthetic_dataset(&small_spec()).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic_dataset(&SyntheticSpec {
        seed: 1,
        ..small_spec()
    })
    .unwrap();
    assert_ne!(a.videos, c.videos);
}

#[test]
fn labels_are_contiguous_runs_of_at_least_two() {
    let ds = generate_synthetic_dataset(&SyntheticSpec::default()).unwrap();
    for v in &ds.videos {
        let labels = v.labels().unwrap();
        assert_eq!(labels.len(), 32);
        let mut runs: Vec<(u32, usize)> = Vec::new();
        for &y in labels {
            match runs.last_mut() {
                Some((l, n)) if *l == y => *n += 1,
                _ => runs.push((y, 1)),
            }
        }
        assert_eq!(
            runs.iter().map(|r| r.0).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
        assert!(runs.iter().all(|r| r.1 >= 2));
        let p = v.progression().unwrap();
        assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}

#[test]
fn noiseless_actor_tokens_carry_the_phase_signature() {
    let spec = SyntheticSpec {
        noise_sigma: 0.0,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic_dataset(&spec).unwrap();
    let d = spec.channels;

    // Re-draw the shared signatures from the generator's seeded stream.
    let mut global = ChaCha8Rng::seed_from_u64(spec.seed);
    global.set_stream(0);
    let mut draw = || -> Vec<f32> {
        (0..d)
            .map(|_| {
                let z: f32 = StandardNormal.sample(&mut global);
                z
            })
            .collect()
    };
    let base = draw();
    let sigs: Vec<Vec<f32>> = (0..spec.num_phases)
        .map(|_| draw().iter().zip(&base).map(|(o, b)| o + b).collect())
        .collect();
    assert_eq!(sigs, ds.phase_signatures);

    for (v, video) in ds.videos.iter().enumerate() {
        let bg = &ds.truth[v].background;
        let grid = video.layer(video.num_layers() - 1);
        for t in 0..video.num_frames() {
            let sig = &sigs[video.labels().unwrap()[t] as usize];
            let mask = ds.actor_mask(v, t);
            assert_eq!(mask.iter().filter(|&&m| m).count(), 9);
            for (s, tok) in grid.frame(t).chunks(d).enumerate() {
                for ch in 0..d {
                    let extra = tok[ch] - bg[ch];
                    if mask[s] {
                        assert!((extra - sig[ch]).abs() < 1e-6);
                    } else {
                        assert_eq!(tok[ch], bg[ch]);
                    }
                }
            }
        }
    }
}

#[test]
fn noise_free_twin_shares_structure() {
    let noisy = generate_synthetic_dataset(&small_spec()).unwrap();
    let clean = generate_synthetic_dataset(&SyntheticSpec {
        noise_sigma: 0.0,
        ..small_spec()
    })
    .unwrap();
    assert_eq!(noisy.truth, clean.truth);
    for (a, b) in noisy.videos.iter().zip(&clean.videos) {
        assert_eq!(a.annotations(), b.annotations());
        let diff = common::max_abs_diff(a.layer(2).data(), b.layer(2).data());
        assert!(diff > 0.0 && diff < 1.0, "{diff}");
    }
}

#[test]
fn equal_phase_and_position_give_equal_grids() {
    let spec = SyntheticSpec {
        noise_sigma: 0.0,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic_dataset(&spec).unwrap();
    let mut matched = 0;
    for (v, video) in ds.videos.iter().enumerate() {
        let labels = video.labels().unwrap();
        let pos = &ds.truth[v].actor_positions;
        for i in 0..video.num_frames() {
            for j in i + 1..video.num_frames() {
                if labels[i] == labels[j] && pos[i] == pos[j] {
                    matched += 1;
                    for grid in video.layers() {
                        assert_eq!(grid.frame(i), grid.frame(j));
                    }
                }
            }
        }
    }
    assert!(matched > 0);
}

#[test]
fn actor_drifts_smoothly() {
    let ds = generate_synthetic_dataset(&SyntheticSpec::default()).unwrap();
    for truth in &ds.truth {
        for w in truth.actor_positions.windows(2) {
            let (a, b) = (w[0], w[1]);
            assert!(a.0.abs_diff(b.0) <= 1 && a.1.abs_diff(b.1) <= 1);
            assert!(a.0 <= 5 && a.1 <= 5);
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let too_many_phases = SyntheticSpec {
        frames_per_video: 7,
        num_phases: 4,
        ..SyntheticSpec::default()
    };
    assert!(matches!(
        generate_synthetic_dataset(&too_many_phases),
        Err(Error::Spec(_))
    ));
    let big_patch = SyntheticSpec {
        actor_patch_side: 9,
        ..SyntheticSpec::default()
    };
    assert!(generate_synthetic_dataset(&big_patch).is_err());
}

#[test]
fn layer_selection() {
    let v = common::random_video(3, 4, 3, 5, 2);
    assert_eq!(v.select_layers(&[0, 1, 2]).unwrap(), v);
    let last = v.select_layers(&[2]).unwrap();
    assert_eq!(last.num_layers(), 1);
    assert_eq!(last.layer(0), v.layer(2));
    assert!(v.select_layers(&[1, 3]).is_err());
    assert!(v.select_layers(&[2, 1]).is_err());
}

#[test]
fn mvff_size_for_small_grid() {
    let grid = TokenGrid::new(2, 4, 3, vec![0.5; 24]).unwrap();
    let v = VideoFeatures::with_frame_timestamps("s", vec![grid], None).unwrap();
    assert_eq!(encode_mvff(&v).unwrap().len(), 120 + 1);
}

#[test]
fn mvff_bad_magic_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.mvff");
    let v = common::random_video(1, 2, 1, 4, 3);
    write_mvff(&v, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(
        load_mvff(&path),
        Err(Error::Format(FormatError::BadMagic { .. }))
    ));
    assert!(matches!(
        load_mvff(&dir.path().join("missing.mvff")),
        Err(Error::Io { .. })
    ));
}

fn video_strategy() -> impl Strategy<Value = VideoFeatures> {
    (
        1usize..=16,
        1usize..=4,
        1usize..=16,
        1usize..=16,
        any::<bool>(),
    )
        .prop_flat_map(|(t, l, s, d, labelled)| {
            (
                prop::collection::vec(prop::collection::vec(any::<f32>(), t * s * d), l),
                prop::collection::vec(0u32..10, t),
                prop::collection::vec(0.0f32..=1.0, t),
            )
                .prop_map(move |(layers, labels, progression)| {
                    let grids = layers
                        .into_iter()
                        .map(|data| TokenGrid::new(t, s, d, data).unwrap())
                        .collect();
                    let ann = labelled.then_some(PhaseAnnotations {
                        labels,
                        progression,
                    });
                    VideoFeatures::with_frame_timestamps("clip", grids, ann).unwrap()
                })
        })
}

fn bits(v: &VideoFeatures) -> Vec<u32> {
    v.layers()
        .iter()
        .flat_map(|g| g.data().iter().map(|x| x.to_bits()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mvff_file_round_trip_is_bit_exact(v in video_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.mvff");
        write_mvff(&v, &path).unwrap();
        let back = load_mvff(&path).unwrap();
        prop_assert_eq!(back.video_id(), "clip");
        prop_assert_eq!(bits(&back), bits(&v));
        prop_assert_eq!(back.annotations(), v.annotations());
        prop_assert_eq!(back.timestamps(), v.timestamps());
        let expect = 24 + 4 * v.num_frames() * v.num_layers() * v.num_tokens() * v.channels()
            + 1 + if v.annotations().is_some() { 8 * v.num_frames() } else { 0 };
        prop_assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, expect);
    }

    #[test]
    fn truncation_is_always_reported(v in video_strategy(), frac in 0.0f64..1.0) {
        let bytes = encode_mvff(&v).unwrap();
        let cut = ((bytes.len() as f64) * frac) as usize;
        let truncated = matches!(
            decode_mvff(&bytes[..cut], "x"),
            Err(Error::Format(FormatError::Truncated { .. }))
        );
        prop_assert!(truncated, "cut at {} of {}", cut, bytes.len());
    }
}
