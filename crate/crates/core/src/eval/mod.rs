//! Frozen-embedding evaluation: phase probe, progression regression,
//! nearest-neighbour rank correlation and phase retrieval.

mod probe;
mod progression;
mod retrieval;
mod tau;

pub use probe::{linear_probe_classification, ProbeConfig};
pub use progression::{phase_progression_r2, r_squared, ProgressionResult, RIDGE_LAMBDA};
pub use retrieval::{ap_at_k, retrieval_ap_at_k, RetrievalResult};
pub use tau::{dataset_tau, kendalls_tau, nearest_neighbors, tau_from_assignment};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Frame embeddings of one video with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedVideo {
    pub video_id: String,
    pub dim: usize,
    /// `[frame][dim]`.
    pub embeddings: Vec<f32>,
    pub labels: Vec<u32>,
    pub progression: Vec<f32>,
}

impl EmbeddedVideo {
    pub fn new(
        video_id: impl Into<String>,
        dim: usize,
        embeddings: Vec<f32>,
        labels: Vec<u32>,
        progression: Vec<f32>,
    ) -> Result<Self> {
        let video_id = video_id.into();
        if dim == 0 || !embeddings.len().is_multiple_of(dim) {
            return Err(Error::Eval(format!(
                "`{video_id}`: {} values are not rows of {dim}",
                embeddings.len()
            )));
        }
        let t = embeddings.len() / dim;
        if labels.len() != t || progression.len() != t {
            return Err(Error::Eval(format!(
                "`{video_id}`: {t} embeddings, {} labels, {} progression targets",
                labels.len(),
                progression.len()
            )));
        }
        if embeddings.iter().any(|x| !x.is_finite()) {
            return Err(Error::Eval(format!("`{video_id}`: non-finite embedding")));
        }
        Ok(Self {
            video_id,
            dim,
            embeddings,
            labels,
            progression,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.embeddings[t * self.dim..(t + 1) * self.dim]
    }
}

pub(crate) fn check_split(name: &str, videos: &[EmbeddedVideo]) -> Result<usize> {
    let first = videos
        .first()
        .ok_or_else(|| Error::Eval(format!("{name} split is empty")))?;
    if videos.iter().any(|v| v.dim != first.dim) {
        return Err(Error::Eval(format!("{name} split mixes embedding sizes")));
    }
    Ok(first.dim)
}

pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum()
}

/// The four headline metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classification: f64,
    pub progression: f64,
    pub tau: f64,
    pub retrieval_ap5: f64,
}

impl MetricsReport {
    pub const NAMES: [&'static str; 4] = ["classification", "progression", "tau", "retrieval_ap5"];

    pub fn values(&self) -> [f64; 4] {
        [
            self.classification,
            self.progression,
            self.tau,
            self.retrieval_ap5,
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    pub ridge_lambda: f64,
    pub retrieval_k: usize,
    /// Frames per embedding clip; `None` embeds each video in one pass.
    pub clip_len: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            ridge_lambda: RIDGE_LAMBDA,
            retrieval_k: 5,
            clip_len: Some(16),
        }
    }
}

/// All four metrics: probes fit on `train`, scored on `test`; tau and
/// retrieval use `test` only.
pub fn evaluate_embeddings(
    train: &[EmbeddedVideo],
    test: &[EmbeddedVideo],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let classification = linear_probe_classification(train, test, &cfg.probe)?;
    let progression = phase_progression_r2(train, test, cfg.ridge_lambda)?.mean_r2;
    let tau = dataset_tau(test)?;
    let retrieval = retrieval_ap_at_k(test, cfg.retrieval_k)?;
    if retrieval.skipped > 0 {
        log::warn!(
            "retrieval skipped {} queries with no relevant candidate",
            retrieval.skipped
        );
    }
    Ok(MetricsReport {
        classification,
        progression,
        tau,
        retrieval_ap5: retrieval.ap,
    })
}
