//! Brute-force reference implementations shared by the suites.

use entivid_core::eval::EmbeddedVideo;
use entivid_core::loss::{scl_loss, SclParams};
use entivid_core::Model;
use entivid_tensor::{Tape, Tensor};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Kendall's tau of `assignment` against the identity order by counting every pair.
pub fn brute_tau(assignment: &[usize]) -> f64 {
    let n = assignment.len();
    let (mut c, mut d) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let s = (i as i64 - j as i64) * (assignment[i] as i64 - assignment[j] as i64);
            if s > 0 {
                c += 1;
            } else if s < 0 {
                d += 1;
            }
        }
    }
    (c - d) as f64 / (n * (n - 1) / 2) as f64
}

/// Nearest row of `b` for each row of `a`, first index on ties.
pub fn brute_nn(a: &[f32], b: &[f32], dim: usize) -> Vec<usize> {
    a.chunks(dim)
        .map(|x| {
            let dists: Vec<f64> = b
                .chunks(dim)
                .map(|y| {
                    x.iter()
                        .zip(y)
                        .map(|(p, q)| (*p as f64 - *q as f64).powi(2))
                        .sum()
                })
                .collect();
            let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
            dists.iter().position(|&d| d == min).unwrap()
        })
        .collect()
}

pub fn labelled(id: &str, dim: usize, emb: Vec<f32>, labels: Vec<u32>) -> EmbeddedVideo {
    let n = labels.len();
    let progression = (0..n).map(|t| (n - t) as f32 / n as f32).collect();
    EmbeddedVideo::new(id, dim, emb, labels, progression).unwrap()
}

/// Mean AP@k over queries with a relevant candidate, by sorting the whole
/// pool; returns the mean and the number of scored queries.
pub fn brute_retrieval(videos: &[EmbeddedVideo], k: usize) -> (f64, usize) {
    let mut sum = 0.0;
    let mut queries = 0;
    for (qv, q) in videos.iter().enumerate() {
        for t in 0..q.len() {
            let mut cands: Vec<(f64, usize, bool)> = Vec::new();
            let mut order = 0;
            for (cv, c) in videos.iter().enumerate() {
                for s in 0..c.len() {
                    if cv != qv {
                        let d: f64 = q
                            .row(t)
                            .iter()
                            .zip(c.row(s))
                            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                            .sum();
                        cands.push((d, order, c.labels[s] == q.labels[t]));
                    }
                    order += 1;
                }
            }
            let total = cands.iter().filter(|c| c.2).count();
            if total == 0 {
                continue;
            }
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut hits = 0;
            let mut ap = 0.0;
            for (i, c) in cands.iter().take(k).enumerate() {
                if c.2 {
                    hits += 1;
                    ap += hits as f64 / (i + 1) as f64;
                }
            }
            sum += ap / k.min(total) as f64;
            queries += 1;
        }
    }
    (sum / queries as f64, queries)
}

/// Pool of `count` random videos for retrieval, at most 200 frames in total.
pub fn random_pool(r: &mut impl Rng) -> (Vec<EmbeddedVideo>, usize) {
    let n_videos = r.random_range(2..=5);
    let dim = r.random_range(1..=3);
    let mut videos = Vec::new();
    for v in 0..n_videos {
        let len = r.random_range(2..=200 / n_videos);
        // coarse values so that distance ties are common
        let emb = (0..len * dim)
            .map(|_| r.random_range(0..4) as f32)
            .collect();
        let labels = (0..len).map(|_| r.random_range(0..3)).collect();
        videos.push(labelled(&format!("v{v}"), dim, emb, labels));
    }
    let k = r.random_range(1..=7);
    (videos, k)
}

pub fn random_timestamps(r: &mut impl Rng, n: usize) -> Vec<u32> {
    let mut t = index::sample(r, 40, n).into_vec();
    t.sort_unstable();
    t.into_iter().map(|x| x as u32).collect()
}

pub fn uniform64(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

pub fn loss_f64(z1: &[f64], t1: &[u32], z2: &[f64], t2: &[u32], d: usize, p: SclParams) -> f64 {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::new(vec![t1.len(), d], z1.to_vec()).unwrap());
    let b = tape.leaf(Tensor::new(vec![t2.len(), d], z2.to_vec()).unwrap());
    let l = scl_loss(&mut tape, a, t1, b, t2, p).unwrap();
    tape.value(l).item().unwrap()
}

/// Logits whose softmax equals the Gaussian targets in both directions.
pub fn target_logits(t1: &[u32], t2: &[u32], sigma: f64) -> Vec<f64> {
    t1.iter()
        .flat_map(|&a| {
            t2.iter().map(move |&b| {
                let d = a as f64 - b as f64;
                -d * d / (2.0 * sigma * sigma)
            })
        })
        .collect()
}

/// Fusion outputs for random tagged tokens, and for the same tokens with the
/// entities of each frame reordered by `perm` (ids travel with their tokens).
pub struct EncodedPair {
    pub width: usize,
    pub order: Vec<usize>,
    pub tokens: Vec<f32>,
    pub tokens_reordered: Vec<f32>,
    pub pooled: Vec<f32>,
    pub pooled_reordered: Vec<f32>,
}

impl EncodedPair {
    pub fn new(model: &Model, frames: usize, perm: &[usize], seed: u64) -> Self {
        let e = model.config.entities;
        let dm = model.config.d_model;
        let mut r = super::rng(seed);
        let feats = super::uniform_vec(&mut r, frames * e * dm);
        let order: Vec<usize> = (0..frames)
            .flat_map(|t| perm.iter().map(move |&p| t * e + p))
            .collect();
        let run = |reorder: bool| {
            let mut tape = Tape::<f32>::new();
            let b = model.store.bind(&mut tape);
            let x = tape.leaf(Tensor::new(vec![frames * e, dm], feats.clone()).unwrap());
            let mut tokens = model.fusion.build_tokens(&mut tape, x).unwrap();
            if reorder {
                tokens = tape.index_select(tokens, &order).unwrap();
            }
            let out = model.fusion.encode(&mut tape, b.vars(), tokens).unwrap();
            let pooled = model.fusion.pool(&mut tape, out).unwrap();
            (
                tape.value(out).data().to_vec(),
                tape.value(pooled).data().to_vec(),
            )
        };
        let (tokens, pooled) = run(false);
        let (tokens_reordered, pooled_reordered) = run(true);
        Self {
            width: model.config.fusion().width,
            order,
            tokens,
            tokens_reordered,
            pooled,
            pooled_reordered,
        }
    }

    /// Whether the reordered outputs are the originals moved by the same reordering.
    pub fn tokens_follow_the_reordering(&self) -> bool {
        let w = self.width;
        self.order.iter().enumerate().all(|(i, &src)| {
            self.tokens_reordered[i * w..(i + 1) * w] == self.tokens[src * w..(src + 1) * w]
        })
    }
}

/// Standard normal embeddings; labels are four equal runs.
pub fn gaussian_videos(
    r: &mut impl Rng,
    count: usize,
    len: usize,
    dim: usize,
) -> Vec<EmbeddedVideo> {
    (0..count)
        .map(|v| {
            let emb = (0..len * dim)
                .map(|_| {
                    let z: f32 = StandardNormal.sample(r);
                    z
                })
                .collect();
            let labels = (0..len).map(|t| (4 * t / len) as u32).collect();
            labelled(&format!("g{v}"), dim, emb, labels)
        })
        .collect()
}
