//! Temporal fusion over all entity tokens of a clip.
//!
//! Every entity feature gets a one-hot entity id appended and a sinusoidal
//! frame-position code added (zero on the id coordinates). A linear input
//! layer maps the `d_model + E` tokens to the transformer width, followed by
//! pre-norm self-attention blocks over all `T * E` tokens and a final norm.

use entivid_tensor::{ParamStore, Scalar, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{constant, LayerNorm, Linear};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    /// Entity 0's output token represents the frame.
    ClsStyle,
    /// Mean over the frame's entity tokens.
    Average,
}

impl std::str::FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls_style" | "cls" => Ok(Self::ClsStyle),
            "average" | "avg" => Ok(Self::Average),
            other => Err(Error::Spec(format!("unknown pooling mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ClsStyle => "cls_style",
            Self::Average => "average",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionConfig {
    pub entities: usize,
    /// Entity feature size before the id suffix.
    pub d_model: usize,
    /// Transformer width.
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pooling: PoolingMode,
}

impl FusionConfig {
    pub fn token_dim(&self) -> usize {
        self.d_model + self.entities
    }

    pub fn validate(&self) -> Result<()> {
        let FusionConfig {
            entities,
            d_model,
            width,
            blocks,
            heads,
            mlp_ratio,
            ..
        } = *self;
        if [entities, d_model, width, blocks, heads, mlp_ratio].contains(&0) {
            return Err(Error::Spec(format!(
                "fusion sizes must be positive: {self:?}"
            )));
        }
        if width % heads != 0 {
            return Err(Error::Spec(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        Ok(())
    }
}

/// Sinusoidal code for sequence position `t` over `dim` coordinates:
/// `sin` on even, `cos` on odd coordinates.
pub fn positional_encoding(t: usize, dim: usize) -> Vec<f32> {
    (0..dim)
        .map(|i| {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let angle = t as f64 * freq;
            (if i % 2 == 0 { angle.sin() } else { angle.cos() }) as f32
        })
        .collect()
}

/// Id suffix plus position code for `T * E` tokens, `[T * E, d_model + E]`.
/// Adding this to `[features | 0]` gives the tagged tokens.
pub fn token_offsets(frames: usize, entities: usize, d_model: usize) -> Vec<f32> {
    let dim = d_model + entities;
    let mut out = Vec::with_capacity(frames * entities * dim);
    for t in 0..frames {
        let pe = positional_encoding(t, d_model);
        for e in 0..entities {
            out.extend_from_slice(&pe);
            out.extend((0..entities).map(|j| if j == e { 1.0 } else { 0.0 }));
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub norm2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

#[derive(Clone, Debug)]
pub struct TemporalFusion {
    pub config: FusionConfig,
    pub input: Linear,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
}

impl TemporalFusion {
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        config: FusionConfig,
    ) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let input = Linear::new(store, rng, "fusion.input", config.token_dim(), w, true)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let n = format!("fusion.block{b}");
            blocks.push(Block {
                norm1: LayerNorm::new(store, &format!("{n}.norm1"), w)?,
                qkv: Linear::new(store, rng, &format!("{n}.qkv"), w, 3 * w, true)?,
                attn_out: Linear::new(store, rng, &format!("{n}.attn_out"), w, w, true)?,
                norm2: LayerNorm::new(store, &format!("{n}.norm2"), w)?,
                mlp_in: Linear::new(
                    store,
                    rng,
                    &format!("{n}.mlp_in"),
                    w,
                    config.mlp_ratio * w,
                    true,
                )?,
                mlp_out: Linear::new(
                    store,
                    rng,
                    &format!("{n}.mlp_out"),
                    config.mlp_ratio * w,
                    w,
                    true,
                )?,
            });
        }
        let final_norm = LayerNorm::new(store, "fusion.final_norm", w)?;
        Ok(Self {
            config,
            input,
            blocks,
            final_norm,
        })
    }

    /// Appends ids and adds position codes to `[T * E, d_model]` features.
    pub fn build_tokens<T: Scalar>(&self, tape: &mut Tape<T>, features: Var) -> Result<Var> {
        let FusionConfig {
            entities, d_model, ..
        } = self.config;
        let shape = tape.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != d_model || !shape[0].is_multiple_of(entities) {
            return Err(Error::Dimension(format!(
                "entity features {shape:?} do not fit {entities} entities of size {d_model}"
            )));
        }
        let frames = shape[0] / entities;
        let pad = constant(tape, &[shape[0], entities], vec![0.0; shape[0] * entities])?;
        let padded = tape.concat(&[features, pad], 1)?;
        let offsets = constant(
            tape,
            &[shape[0], d_model + entities],
            token_offsets(frames, entities, d_model),
        )?;
        Ok(tape.add(padded, offsets)?)
    }

    /// Runs the transformer on `[T * E, d_model + E]` tokens; returns `[T * E, width]`.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], tokens: Var) -> Result<Var> {
        let shape = tape.shape(tokens).to_vec();
        if shape.len() != 2 || shape[1] != self.config.token_dim() {
            return Err(Error::Dimension(format!(
                "tokens {shape:?}, expected [_, {}]",
                self.config.token_dim()
            )));
        }
        let n = shape[0];
        let (w, h) = (self.config.width, self.config.heads);
        let dh = w / h;
        let mut x = self.input.forward(tape, p, tokens)?;
        for b in &self.blocks {
            let y = b.norm1.forward(tape, p, x)?;
            let qkv = b.qkv.forward(tape, p, y)?;
            let mut heads = [None; 3];
            for (i, slot) in heads.iter_mut().enumerate() {
                let part = tape.narrow(qkv, 1, i * w, w)?;
                let part = tape.reshape(part, &[n, h, dh])?;
                *slot = Some(tape.swap_axes01(part)?);
            }
            let [q, k, v] = heads.map(|v| v.expect("filled above"));
            let att = tape.scaled_dot_attention(q, k, v)?;
            let merged = tape.swap_axes01(att.output)?;
            let merged = tape.reshape(merged, &[n, w])?;
            let y = b.attn_out.forward(tape, p, merged)?;
            x = tape.add(x, y)?;

            let y = b.norm2.forward(tape, p, x)?;
            let y = b.mlp_in.forward(tape, p, y)?;
            let y = tape.gelu(y);
            let y = b.mlp_out.forward(tape, p, y)?;
            x = tape.add(x, y)?;
        }
        self.final_norm.forward(tape, p, x)
    }

    /// `[T * E, width]` tokens to `[T, width]` frame embeddings.
    pub fn pool<T: Scalar>(&self, tape: &mut Tape<T>, tokens: Var) -> Result<Var> {
        pool_output(tape, tokens, self.config.entities, self.config.pooling)
    }
}

pub fn pool_output<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    entities: usize,
    mode: PoolingMode,
) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 2 || entities == 0 || !shape[0].is_multiple_of(entities) {
        return Err(Error::Dimension(format!(
            "{shape:?} tokens are not frames of {entities} entities"
        )));
    }
    let frames = shape[0] / entities;
    Ok(match mode {
        PoolingMode::ClsStyle => {
            let rows: Vec<usize> = (0..frames).map(|t| t * entities).collect();
            tape.index_select(tokens, &rows)?
        }
        PoolingMode::Average => {
            let grouped = tape.reshape(tokens, &[frames, entities, shape[1]])?;
            tape.mean_axis(grouped, 1)?
        }
    })
}

/// Splits one mean-pooled frame vector into `N` tokens with a linear layer,
/// standing in for pooling when comparing at equal token count.
#[derive(Clone, Debug)]
pub struct FixedWidthSplit {
    pub splits: usize,
    pub d_model: usize,
    pub channels: usize,
    pub linear: Linear,
}

impl FixedWidthSplit {
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        splits: usize,
        channels: usize,
        d_model: usize,
    ) -> Result<Self> {
        if !matches!(splits, 3 | 5) {
            return Err(Error::Spec(format!(
                "fixed-width split count must be 3 or 5, got {splits}"
            )));
        }
        let linear = Linear::new(store, rng, "split", channels, splits * d_model, true)?;
        Ok(Self {
            splits,
            d_model,
            channels,
            linear,
        })
    }

    /// Mean over tokens of the last layer for each selected frame, `[T, D]` flat.
    pub fn frame_means(video: &crate::VideoFeatures, frames: &[usize]) -> Vec<f32> {
        let grid = video.layer(video.num_layers() - 1);
        let (s, d) = (grid.tokens(), grid.channels());
        let mut out = vec![0.0f32; frames.len() * d];
        for (row, &t) in out.chunks_mut(d).zip(frames) {
            let mut acc = vec![0.0f64; d];
            for tok in grid.frame(t).chunks(d) {
                acc.iter_mut().zip(tok).for_each(|(a, &x)| *a += x as f64);
            }
            row.iter_mut()
                .zip(acc)
                .for_each(|(r, a)| *r = (a / s as f64) as f32);
        }
        out
    }

    /// `[T * N, d_model]` tokens, frame-major.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        video: &crate::VideoFeatures,
        frames: &[usize],
    ) -> Result<Var> {
        if video.channels() != self.channels {
            return Err(Error::Dimension(format!(
                "video `{}` has {} channels, split layer expects {}",
                video.video_id(),
                video.channels(),
                self.channels
            )));
        }
        let t = frames.len();
        let x = constant(tape, &[t, self.channels], Self::frame_means(video, frames))?;
        let y = self.linear.forward(tape, p, x)?;
        Ok(tape.reshape(y, &[t * self.splits, self.d_model])?)
    }
}

/// `(weight, bias)` values that copy the input into each of the `N` tokens.
pub fn stacked_identity_split(splits: usize, dim: usize) -> (Vec<f32>, Vec<f32>) {
    let mut w = vec![0.0f32; dim * splits * dim];
    for i in 0..dim {
        for n in 0..splits {
            w[i * splits * dim + n * dim + i] = 1.0;
        }
    }
    (w, vec![0.0; splits * dim])
}
