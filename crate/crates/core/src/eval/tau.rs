use super::{sq_dist, EmbeddedVideo};
use crate::{Error, Result};

/// For each row of `a`, the index of the nearest row of `b` (lowest index on ties).
pub fn nearest_neighbors(a: &[f32], b: &[f32], dim: usize) -> Vec<usize> {
    a.chunks(dim)
        .map(|x| {
            let mut best = (0, f64::INFINITY);
            for (j, y) in b.chunks(dim).enumerate() {
                let d = sq_dist(x, y);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect()
}

/// Counts pairs `i < j` with `v[i] > v[j]` while sorting `v`.
fn count_inversions(v: &mut [usize], buf: &mut Vec<usize>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = count_inversions(&mut v[..mid], buf) + count_inversions(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            count += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    count
}

/// `(concordant - discordant) / (n (n - 1) / 2)`; pairs mapped to the same
/// neighbour count as neither.
pub fn tau_from_assignment(assignment: &[usize]) -> Result<f64> {
    let n = assignment.len();
    if n < 2 {
        return Err(Error::Eval(format!("tau needs at least 2 frames, got {n}")));
    }
    let total = (n * (n - 1) / 2) as u64;
    let mut sorted = assignment.to_vec();
    let discordant = count_inversions(&mut sorted, &mut Vec::with_capacity(n));
    let mut ties = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            ties += run * (run - 1) / 2;
            run = 1;
        }
    }
    ties += run * (run - 1) / 2;
    let concordant = total - discordant - ties;
    Ok((concordant as f64 - discordant as f64) / total as f64)
}

/// Tau of the nearest-neighbour alignment from `a` into `b`.
pub fn kendalls_tau(a: &[f32], b: &[f32], dim: usize) -> Result<f64> {
    if dim == 0 || !a.len().is_multiple_of(dim) || !b.len().is_multiple_of(dim) {
        return Err(Error::Eval(format!(
            "embedding lengths {} / {} are not rows of {dim}",
            a.len(),
            b.len()
        )));
    }
    if a.len() / dim < 2 || b.len() / dim < 2 {
        return Err(Error::Eval("tau needs at least 2 frames per video".into()));
    }
    tau_from_assignment(&nearest_neighbors(a, b, dim))
}

/// Mean tau over all ordered pairs of distinct videos.
pub fn dataset_tau(videos: &[EmbeddedVideo]) -> Result<f64> {
    if videos.len() < 2 {
        return Err(Error::Eval("tau needs at least 2 videos".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, a) in videos.iter().enumerate() {
        for (j, b) in videos.iter().enumerate() {
            if i != j {
                sum += kendalls_tau(&a.embeddings, &b.embeddings, a.dim)?;
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}
