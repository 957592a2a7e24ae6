use std::collections::BinaryHeap;

use super::{check_split, sq_dist, EmbeddedVideo};
use crate::{Error, Result};

/// `sum_{i<=k} precision@i * rel_i / min(k, R)`.
pub fn ap_at_k(relevance: &[bool], total_relevant: usize, k: usize) -> f64 {
    let denom = k.min(total_relevant);
    if denom == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevance.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / denom as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub ap: f64,
    pub queries: usize,
    /// Queries with no relevant candidate.
    pub skipped: usize,
}

/// Heap key: squared distance, then candidate order, so ties resolve to the
/// earlier candidate.
#[derive(PartialEq)]
struct Ranked(f64, usize, bool);

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Every frame queries all frames of the other videos; relevant means same phase label.
pub fn retrieval_ap_at_k(videos: &[EmbeddedVideo], k: usize) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::Eval("k must be at least 1".into()));
    }
    check_split("retrieval", videos)?;
    let mut sum = 0.0;
    let (mut queries, mut skipped) = (0usize, 0usize);
    for (qv, video) in videos.iter().enumerate() {
        for t in 0..video.len() {
            let (q, label) = (video.row(t), video.labels[t]);
            let mut heap = BinaryHeap::with_capacity(k + 1);
            let mut relevant = 0usize;
            let mut order = 0usize;
            for (cv, cand) in videos.iter().enumerate() {
                if cv == qv {
                    order += cand.len();
                    continue;
                }
                for s in 0..cand.len() {
                    let rel = cand.labels[s] == label;
                    relevant += usize::from(rel);
                    heap.push(Ranked(sq_dist(q, cand.row(s)), order, rel));
                    if heap.len() > k {
                        heap.pop();
                    }
                    order += 1;
                }
            }
            if relevant == 0 {
                skipped += 1;
                continue;
            }
            let ranked: Vec<bool> = heap.into_sorted_vec().into_iter().map(|r| r.2).collect();
            sum += ap_at_k(&ranked, relevant, k);
            queries += 1;
        }
    }
    if queries == 0 {
        return Err(Error::Eval(
            "no retrieval query has a relevant candidate".into(),
        ));
    }
    Ok(RetrievalResult {
        ap: sum / queries as f64,
        queries,
        skipped,
    })
}
