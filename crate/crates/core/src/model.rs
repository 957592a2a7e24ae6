//! Frontend (token pooling or fixed-width split) + temporal fusion + projection head.

use entivid_tensor::{ParamStore, Scalar, Tape, TensorF32, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::VideoFeatures;
use crate::fusion::{FixedWidthSplit, FusionConfig, PoolingMode, TemporalFusion};
use crate::nn::{check_params, Linear};
use crate::pooling::{EntitySet, PoolingDims, TokenPooling};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontendKind {
    /// Learnable cross-attention pooling of spatial tokens.
    Pooling,
    /// Mean-pooled last layer split into `entities` tokens by a linear layer.
    FixedWidth,
}

impl std::str::FromStr for FrontendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooling" => Ok(Self::Pooling),
            "fixed_width" => Ok(Self::FixedWidth),
            other => Err(Error::Spec(format!("unknown frontend `{other}`"))),
        }
    }
}

impl std::fmt::Display for FrontendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pooling => "pooling",
            Self::FixedWidth => "fixed_width",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frontend: FrontendKind,
    /// Entities per frame (split count for the fixed-width frontend).
    pub entities: usize,
    /// Number of backbone layers fed to the model.
    pub layers: usize,
    pub channels: usize,
    pub d_q: usize,
    pub d_v: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pooling: PoolingMode,
    pub proj_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frontend: FrontendKind::Pooling,
            entities: 3,
            layers: 3,
            channels: 32,
            d_q: 64,
            d_v: 64,
            d_model: 128,
            blocks: 3,
            heads: 4,
            mlp_ratio: 4,
            pooling: PoolingMode::Average,
            proj_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            entities: self.entities,
            d_model: self.d_model,
            width: self.d_model,
            blocks: self.blocks,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            pooling: self.pooling,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion().validate()?;
        if [
            self.layers,
            self.channels,
            self.d_q,
            self.d_v,
            self.proj_dim,
        ]
        .contains(&0)
        {
            return Err(Error::Spec(format!(
                "model sizes must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Embedding size consumed by evaluation.
    pub fn embed_dim(&self) -> usize {
        self.d_model
    }
}

#[derive(Clone, Debug)]
pub enum Frontend {
    Pooling(TokenPooling),
    FixedWidth(FixedWidthSplit),
}

#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub hidden: Linear,
    pub out: Linear,
}

/// Tape handles from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[T * E, d_model]` frontend output, before id tagging.
    pub entities: Var,
    /// `[T * E, width]` fusion output.
    pub tokens: Var,
    /// `[T, width]` pooled frame embeddings.
    pub frames: Var,
    /// `[T, proj_dim]` loss-space embeddings.
    pub projected: Var,
    /// Per-layer attention from the pooling frontend, empty otherwise.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub frontend: Frontend,
    pub fusion: TemporalFusion,
    pub head: ProjectionHead,
}

impl Model {
    /// Parameters are drawn in a fixed order from a generator seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let frontend = match config.frontend {
            FrontendKind::Pooling => Frontend::Pooling(TokenPooling::new(
                &mut store,
                &mut rng,
                PoolingDims {
                    entities: config.entities,
                    layers: config.layers,
                    channels: config.channels,
                    d_q: config.d_q,
                    d_v: config.d_v,
                    d_model: config.d_model,
                },
            )?),
            FrontendKind::FixedWidth => Frontend::FixedWidth(FixedWidthSplit::new(
                &mut store,
                &mut rng,
                config.entities,
                config.channels,
                config.d_model,
            )?),
        };
        let fusion = TemporalFusion::new(&mut store, &mut rng, config.fusion())?;
        let w = config.d_model;
        let head = ProjectionHead {
            hidden: Linear::new(&mut store, &mut rng, "head.hidden", w, w, true)?,
            out: Linear::new(&mut store, &mut rng, "head.out", w, config.proj_dim, true)?,
        };
        Ok(Self {
            config,
            store,
            frontend,
            fusion,
            head,
        })
    }

    pub fn check_video(&self, video: &VideoFeatures) -> Result<()> {
        match &self.frontend {
            Frontend::Pooling(p) => p.check_features(video),
            Frontend::FixedWidth(_) if video.channels() != self.config.channels => {
                Err(Error::Dimension(format!(
                    "video `{}` has {} channels, model expects {}",
                    video.video_id(),
                    video.channels(),
                    self.config.channels
                )))
            }
            Frontend::FixedWidth(_) => Ok(()),
        }
    }

    /// Full forward pass over `frames` of `video`, with parameters bound as `p`
    /// (store order).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        video: &VideoFeatures,
        frames: &[usize],
    ) -> Result<ForwardOutput> {
        check_params(p, &self.store)?;
        self.check_video(video)?;
        let (entities, attention) = match &self.frontend {
            Frontend::Pooling(pool) => {
                let out = pool.forward(tape, p, video, frames)?;
                (out.features, out.attention)
            }
            Frontend::FixedWidth(split) => (split.forward(tape, p, video, frames)?, Vec::new()),
        };
        let tagged = self.fusion.build_tokens(tape, entities)?;
        let tokens = self.fusion.encode(tape, p, tagged)?;
        let frames_emb = self.fusion.pool(tape, tokens)?;
        let h = self.head.hidden.forward(tape, p, frames_emb)?;
        let h = tape.gelu(h);
        let projected = self.head.out.forward(tape, p, h)?;
        Ok(ForwardOutput {
            entities,
            tokens,
            frames: frames_emb,
            projected,
            attention,
        })
    }

    /// Pooled frame embeddings for every frame, `[T][d_model]` flat.
    pub fn embed(&self, video: &VideoFeatures) -> Result<Vec<f32>> {
        let mut tape = Tape::<f32>::new();
        let p = self.store.bind(&mut tape);
        let frames: Vec<usize> = (0..video.num_frames()).collect();
        let out = self.forward(&mut tape, p.vars(), video, &frames)?;
        Ok(tape.value(out.frames).data().to_vec())
    }

    /// Frame embeddings computed through interleaved clips of at most
    /// `clip_len` frames: clip `c` holds frames `c, c + n, c + 2n, ...` for
    /// `n = ceil(T / clip_len)`. Position codes then stay within `0..clip_len`,
    /// the range seen in training.
    pub fn embed_clips(&self, video: &VideoFeatures, clip_len: usize) -> Result<Vec<f32>> {
        if clip_len == 0 {
            return Err(Error::Spec("clip length must be positive".into()));
        }
        let t = video.num_frames();
        let n = t.div_ceil(clip_len);
        if n <= 1 {
            return self.embed(video);
        }
        let dim = self.config.embed_dim();
        let mut out = vec![0.0f32; t * dim];
        for c in 0..n {
            let frames: Vec<usize> = (c..t).step_by(n).collect();
            let mut tape = Tape::<f32>::new();
            let p = self.store.bind(&mut tape);
            let emb = self.forward(&mut tape, p.vars(), video, &frames)?;
            let data = tape.value(emb.frames).data();
            for (row, &f) in frames.iter().enumerate() {
                out[f * dim..(f + 1) * dim].copy_from_slice(&data[row * dim..(row + 1) * dim]);
            }
        }
        Ok(out)
    }

    /// Pooling output with attention maps for every frame.
    pub fn entity_set(&self, video: &VideoFeatures) -> Result<EntitySet> {
        let Frontend::Pooling(pool) = &self.frontend else {
            return Err(Error::Spec(
                "the fixed-width frontend has no attention maps".into(),
            ));
        };
        let mut tape = Tape::<f32>::new();
        let p = self.store.bind(&mut tape);
        let frames: Vec<usize> = (0..video.num_frames()).collect();
        let out = pool.forward(&mut tape, p.vars(), video, &frames)?;
        Ok(EntitySet::from_tape(&tape, &out, frames.len()))
    }

    /// Replaces every parameter value with the same-named entry of `params`.
    pub fn load_params(&mut self, params: &[(String, TensorF32)]) -> Result<()> {
        if params.len() != self.store.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} parameters, model has {}",
                params.len(),
                self.store.len()
            )));
        }
        for (name, value) in params {
            let id = self
                .store
                .id(name)
                .ok_or_else(|| Error::Incompatible(format!("unknown parameter `{name}`")))?;
            let slot = &mut self.store.get_mut(id).value;
            if slot.shape() != value.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter `{name}` has shape {:?} in the checkpoint, {:?} in the model",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value.clone().with_requires_grad(true);
        }
        Ok(())
    }
}
