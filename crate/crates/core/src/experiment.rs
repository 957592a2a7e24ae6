//! Train/test splitting, end-to-end runs and multi-seed aggregation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::eval::{evaluate_embeddings, EmbeddedVideo, EvalConfig, MetricsReport};
use crate::features::VideoFeatures;
use crate::model::Model;
use crate::model::ModelConfig;
use crate::training::{train, TrainConfig, TrainOutcome};
use crate::{Error, Result};

pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of video indices; the first `floor(0.8 n)` train, the rest
/// test. Both lists come back sorted.
pub fn split_videos(num_videos: usize, seed: u64) -> Result<Split> {
    let n_train = (num_videos as f64 * TRAIN_FRACTION).floor() as usize;
    if n_train == 0 || n_train == num_videos {
        return Err(Error::Spec(format!(
            "{num_videos} videos cannot fill both splits"
        )));
    }
    let mut order: Vec<usize> = (0..num_videos).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    order.shuffle(&mut rng);
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

/// Frame embeddings of every video with annotations.
pub fn embed_videos(
    model: &Model,
    videos: &[&VideoFeatures],
    clip_len: Option<usize>,
) -> Result<Vec<EmbeddedVideo>> {
    videos
        .iter()
        .map(|v| {
            let ann = v.annotations().ok_or_else(|| {
                Error::Eval(format!("video `{}` has no phase labels", v.video_id()))
            })?;
            EmbeddedVideo::new(
                v.video_id(),
                model.config.embed_dim(),
                match clip_len {
                    Some(n) => model.embed_clips(v, n)?,
                    None => model.embed(v)?,
                },
                ann.labels.clone(),
                ann.progression.clone(),
            )
        })
        .collect()
}

pub fn evaluate(
    model: &Model,
    videos: &[VideoFeatures],
    split: &Split,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let pick = |ids: &[usize]| ids.iter().map(|&i| &videos[i]).collect::<Vec<_>>();
    let train = embed_videos(model, &pick(&split.train), cfg.clip_len)?;
    let test = embed_videos(model, &pick(&split.test), cfg.clip_len)?;
    evaluate_embeddings(&train, &test, cfg)
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub model: Model,
    pub outcome: TrainOutcome,
    pub metrics: MetricsReport,
}

/// Initializes a model from `seed`, trains on the train split, evaluates.
pub fn run_experiment(
    videos: &[VideoFeatures],
    split: &Split,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<ExperimentResult> {
    let mut model = Model::new(cfg.model, seed)?;
    let train_videos: Vec<VideoFeatures> = split.train.iter().map(|&i| videos[i].clone()).collect();
    let train_cfg = TrainConfig { seed, ..cfg.train };
    let outcome = train(&mut model, &train_videos, &train_cfg)?;
    let metrics = evaluate(&model, videos, split, &cfg.eval)?;
    Ok(ExperimentResult {
        model,
        outcome,
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub name: String,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample (n - 1) standard deviation.
    pub stdev: f64,
}

impl MetricSummary {
    pub fn from_values(name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if values.len() < 2 {
            return Err(Error::Spec(format!(
                "`{name}` needs at least 2 trials for a spread"
            )));
        }
        let n = values.len() as f64;
        // shifted by the first value so that repeated values give an exact mean
        let pivot = values[0];
        let mean = pivot + values.iter().map(|v| v - pivot).sum::<f64>() / n;
        let stdev = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        Ok(Self {
            name,
            values,
            mean,
            stdev,
        })
    }

    /// `mean ± 2·stdev`, two decimals.
    pub fn interval(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean, 2.0 * self.stdev)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialReport {
    pub seeds: Vec<u64>,
    pub metrics: Vec<MetricSummary>,
}

impl TrialReport {
    pub fn from_reports(seeds: &[u64], reports: &[MetricsReport]) -> Result<Self> {
        let metrics = MetricsReport::NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| {
                MetricSummary::from_values(*name, reports.iter().map(|r| r.values()[i]).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seeds: seeds.to_vec(),
            metrics,
        })
    }

    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<16}{}\n", "metric", "mean ± 2σ");
        for m in &self.metrics {
            out.push_str(&format!("{:<16}{}\n", m.name, m.interval()));
        }
        out
    }

    /// Means under the metric names, plus `per_trial` arrays and `seeds`.
    pub fn to_json(&self) -> String {
        let mut root = Map::new();
        let mut per_trial = Map::new();
        for m in &self.metrics {
            root.insert(m.name.clone(), json!(m.mean));
            per_trial.insert(m.name.clone(), json!(m.values));
        }
        root.insert("per_trial".into(), Value::Object(per_trial));
        root.insert("seeds".into(), json!(self.seeds));
        serde_json::to_string_pretty(&Value::Object(root)).expect("json values serialize")
    }
}

/// One experiment per seed, aggregated.
pub fn run_trials(
    videos: &[VideoFeatures],
    split: &Split,
    cfg: &ExperimentConfig,
    seeds: &[u64],
) -> Result<(TrialReport, Vec<ExperimentResult>)> {
    if seeds.len() < 2 {
        return Err(Error::Spec("multi-trial runs need at least 2 seeds".into()));
    }
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let r = run_experiment(videos, split, cfg, seed).map_err(|e| Error::Trial {
            seed,
            source: Box::new(e),
        })?;
        log::info!("seed {seed}: {:?}", r.metrics);
        results.push(r);
    }
    let reports: Vec<MetricsReport> = results.iter().map(|r| r.metrics).collect();
    Ok((TrialReport::from_reports(seeds, &reports)?, results))
}
