use std::fs;
use std::path::{Path, PathBuf};

use entivid_core::checkpoint::{load_checkpoint, save_checkpoint};
use entivid_core::experiment::{
    evaluate, run_trials, split_videos, ExperimentConfig, Split, TrialReport,
};
use entivid_core::mvff::{load_mvff, write_mvff};
use entivid_core::pooling::{attention_file_name, export_attention};
use entivid_core::training::train as train_model;
use entivid_core::{generate_synthetic_dataset, Model, VideoFeatures};

use crate::config::{CliConfig, ConfigError};

pub const MANIFEST: &str = "manifest.tsv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] entivid_core::Error),
    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
}

impl CliError {
    /// 1 for configuration problems, 2 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            _ => 2,
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Write {
        path: dir.to_path_buf(),
        source,
    })
}

/// Writes every synthetic video as `<id>.mvff` and `manifest.tsv` with one
/// `id<TAB>train|test` line per video.
pub fn gen(cfg: &CliConfig, out: &Path) -> Result<(), CliError> {
    let data = generate_synthetic_dataset(&cfg.data)?;
    let split = split_videos(data.videos.len(), cfg.data.seed)?;
    create_dir(out)?;
    let mut manifest = String::new();
    for (i, video) in data.videos.iter().enumerate() {
        write_mvff(video, &out.join(format!("{}.mvff", video.video_id())))?;
        let part = if split.test.binary_search(&i).is_ok() {
            "test"
        } else {
            "train"
        };
        manifest.push_str(&format!("{}\t{part}\n", video.video_id()));
    }
    let path = out.join(MANIFEST);
    fs::write(&path, manifest).map_err(|source| CliError::Write { path, source })?;
    log::info!(
        "wrote {} videos ({} train / {} test) to {}",
        data.videos.len(),
        split.train.len(),
        split.test.len(),
        out.display()
    );
    Ok(())
}

/// Videos in manifest order and the split the manifest records.
pub fn load_dataset(dir: &Path) -> Result<(Vec<VideoFeatures>, Split), CliError> {
    let path = dir.join(MANIFEST);
    let bad = |reason: String| CliError::Manifest {
        path: path.clone(),
        reason,
    };
    let text = fs::read_to_string(&path).map_err(|e| bad(e.to_string()))?;
    let mut videos = Vec::new();
    let mut split = Split {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (n, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let (id, part) = line
            .split_once('\t')
            .ok_or_else(|| bad(format!("line {}: expected `id<TAB>split`", n + 1)))?;
        match part.trim() {
            "train" => split.train.push(videos.len()),
            "test" => split.test.push(videos.len()),
            other => return Err(bad(format!("line {}: unknown split `{other}`", n + 1))),
        }
        videos.push(load_mvff(&dir.join(format!("{id}.mvff")))?);
    }
    if split.train.is_empty() || split.test.is_empty() {
        return Err(bad("needs both train and test videos".into()));
    }
    Ok((videos, split))
}

fn load_model(cfg: &CliConfig, checkpoint: &Path) -> Result<Model, CliError> {
    let mut model = Model::new(cfg.model, cfg.seed)?;
    model.load_params(&load_checkpoint(checkpoint)?)?;
    Ok(model)
}

pub fn train(cfg: &CliConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let (videos, split) = load_dataset(data)?;
    let train_videos: Vec<VideoFeatures> = split.train.iter().map(|&i| videos[i].clone()).collect();
    let mut model = Model::new(cfg.model, cfg.seed)?;
    let outcome = train_model(&mut model, &train_videos, &cfg.train)?;
    save_checkpoint(&model.store, out)?;
    let mut trace = out.as_os_str().to_owned();
    trace.push(".loss.tsv");
    let trace = PathBuf::from(trace);
    fs::write(&trace, outcome.loss_trace()).map_err(|source| CliError::Write {
        path: trace.clone(),
        source,
    })?;
    if let Some(last) = outcome.losses.last() {
        log::info!("final loss {last}; checkpoint {}", out.display());
    }
    Ok(())
}

pub fn eval(cfg: &CliConfig, data: &Path, checkpoint: &Path) -> Result<String, CliError> {
    let (videos, split) = load_dataset(data)?;
    let model = load_model(cfg, checkpoint)?;
    Ok(evaluate(&model, &videos, &split, &cfg.eval)?.to_json())
}

/// Returns the number of maps written.
pub fn attn(
    cfg: &CliConfig,
    checkpoint: &Path,
    video: &Path,
    out: &Path,
) -> Result<usize, CliError> {
    let model = load_model(cfg, checkpoint)?;
    let video = load_mvff(video)?;
    let set = model.entity_set(&video)?;
    create_dir(out)?;
    let mut written = 0;
    for layer in 0..set.attention.len() {
        for frame in 0..set.frames {
            for entity in 0..set.entities {
                let map = set.attention_map(layer, frame, entity)?;
                let name = attention_file_name(video.video_id(), frame, entity, layer);
                export_attention(&map, &out.join(name))?;
                written += 1;
            }
        }
    }
    Ok(written)
}

pub fn trials(
    cfg: &CliConfig,
    data: Option<&Path>,
    seeds: &[u64],
) -> Result<TrialReport, CliError> {
    if seeds.len() < 2 {
        return Err(ConfigError::Invalid("trials need at least 2 seeds".into()).into());
    }
    let (videos, split) = match data {
        Some(dir) => load_dataset(dir)?,
        None => {
            let videos = generate_synthetic_dataset(&cfg.data)?.videos;
            let split = split_videos(videos.len(), cfg.data.seed)?;
            (videos, split)
        }
    };
    let exp = ExperimentConfig {
        model: cfg.model,
        train: cfg.train,
        eval: cfg.eval,
    };
    Ok(run_trials(&videos, &split, &exp, seeds)?.0)
}
