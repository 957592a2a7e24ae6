//! Cross-attention pooling of spatial tokens into per-frame entity features.
//!
//! Each selected backbone layer has its own learnable query matrix (one row
//! per entity) and key/value projections. The queries are parameters, not
//! functions of the input, so every frame is read with the same questions.
//! Entity `e` of every layer comes from query row `e`; the per-layer results
//! are concatenated and mapped to `d_model` by one output projection.

use std::fs;
use std::path::Path;

use entivid_tensor::{ParamId, ParamStore, Scalar, Tape, Var};
use rand::Rng;

use crate::error::io_err;
use crate::features::VideoFeatures;
use crate::nn::{constant, normal};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolingDims {
    pub entities: usize,
    pub layers: usize,
    pub channels: usize,
    pub d_q: usize,
    pub d_v: usize,
    pub d_model: usize,
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    /// `E x d_q`.
    pub queries: ParamId,
    /// `D x d_q`.
    pub key: ParamId,
    /// `D x d_v`.
    pub value: ParamId,
}

#[derive(Clone, Debug)]
pub struct TokenPooling {
    pub dims: PoolingDims,
    pub layers: Vec<LayerParams>,
    /// `(L * d_v) x d_model`.
    pub output: ParamId,
}

/// Tape handles produced by one pooling pass.
#[derive(Clone, Debug)]
pub struct PooledEntities {
    /// `[T * E, d_model]`, frame-major.
    pub features: Var,
    /// Per layer, `[T, E, S]` row-stochastic weights.
    pub attention: Vec<Var>,
}

impl TokenPooling {
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        dims: PoolingDims,
    ) -> Result<Self> {
        let PoolingDims {
            entities,
            layers,
            channels,
            d_q,
            d_v,
            d_model,
        } = dims;
        if [entities, layers, channels, d_q, d_v, d_model].contains(&0) {
            return Err(Error::Spec(format!(
                "pooling dimensions must be positive: {dims:?}"
            )));
        }
        let proj_std = 1.0 / (channels as f64).sqrt();
        let mut per_layer = Vec::with_capacity(layers);
        for l in 0..layers {
            let queries = store.insert(
                format!("pool.l{l}.queries"),
                normal(rng, &[entities, d_q], 1.0 / (d_q as f64).sqrt()),
            )?;
            let key = store.insert(
                format!("pool.l{l}.key"),
                normal(rng, &[channels, d_q], proj_std),
            )?;
            let value = store.insert(
                format!("pool.l{l}.value"),
                normal(rng, &[channels, d_v], proj_std),
            )?;
            per_layer.push(LayerParams {
                queries,
                key,
                value,
            });
        }
        let out_std = 1.0 / ((layers * d_v) as f64).sqrt();
        let output = store.insert("pool.out", normal(rng, &[layers * d_v, d_model], out_std))?;
        Ok(Self {
            dims,
            layers: per_layer,
            output,
        })
    }

    pub fn check_features(&self, video: &VideoFeatures) -> Result<()> {
        if video.num_layers() != self.dims.layers || video.channels() != self.dims.channels {
            return Err(Error::Dimension(format!(
                "video `{}` has {} layers x {} channels, pooling expects {} x {}",
                video.video_id(),
                video.num_layers(),
                video.channels(),
                self.dims.layers,
                self.dims.channels
            )));
        }
        Ok(())
    }

    /// Pools the given frames of `video`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        video: &VideoFeatures,
        frames: &[usize],
    ) -> Result<PooledEntities> {
        self.check_features(video)?;
        let PoolingDims {
            entities,
            d_q,
            d_v,
            d_model,
            channels,
            ..
        } = self.dims;
        let (t, s) = (frames.len(), video.num_tokens());
        if t == 0 || frames.iter().any(|&f| f >= video.num_frames()) {
            return Err(Error::Dimension(format!(
                "frame selection {frames:?} invalid"
            )));
        }
        let mut attention = Vec::with_capacity(self.layers.len());
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (lp, grid) in self.layers.iter().zip(video.layers()) {
            let x = constant(tape, &[t * s, channels], grid.gather(frames))?;
            let k = tape.matmul(x, p[lp.key.index()])?;
            let k = tape.reshape(k, &[t, s, d_q])?;
            let v = tape.matmul(x, p[lp.value.index()])?;
            let v = tape.reshape(v, &[t, s, d_v])?;
            let q = tape.expand(p[lp.queries.index()], t)?;
            let att = tape.scaled_dot_attention(q, k, v)?;
            attention.push(att.weights);
            per_layer.push(att.output);
        }
        let cat = tape.concat(&per_layer, 2)?;
        let flat = tape.reshape(cat, &[t * entities, self.layers.len() * d_v])?;
        let features = tape.matmul(flat, p[self.output.index()])?;
        debug_assert_eq!(tape.shape(features), &[t * entities, d_model]);
        Ok(PooledEntities {
            features,
            attention,
        })
    }
}

/// Materialized pooling output for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct EntitySet {
    pub frames: usize,
    pub entities: usize,
    pub d_model: usize,
    pub grid_tokens: usize,
    /// `[frame][entity][d_model]`.
    pub features: Vec<f32>,
    /// Per layer, `[frame][entity][token]`.
    pub attention: Vec<Vec<f32>>,
}

impl EntitySet {
    pub(crate) fn from_tape<T: Scalar>(
        tape: &Tape<T>,
        out: &PooledEntities,
        frames: usize,
    ) -> Self {
        let fshape = tape.shape(out.features);
        let (rows, d_model) = (fshape[0], fshape[1]);
        let grid_tokens = tape.shape(out.attention[0])[2];
        let to_f32 = |v: Var| {
            tape.value(v)
                .data()
                .iter()
                .map(|&x| x.to_f64() as f32)
                .collect()
        };
        Self {
            frames,
            entities: rows / frames,
            d_model,
            grid_tokens,
            features: to_f32(out.features),
            attention: out.attention.iter().map(|&a| to_f32(a)).collect(),
        }
    }

    pub fn feature(&self, frame: usize, entity: usize) -> &[f32] {
        let i = frame * self.entities + entity;
        &self.features[i * self.d_model..(i + 1) * self.d_model]
    }

    pub fn attention_row(&self, layer: usize, frame: usize, entity: usize) -> &[f32] {
        let i = frame * self.entities + entity;
        &self.attention[layer][i * self.grid_tokens..(i + 1) * self.grid_tokens]
    }

    pub fn attention_map(&self, layer: usize, frame: usize, entity: usize) -> Result<AttentionMap> {
        let side = (self.grid_tokens as f64).sqrt().round() as usize;
        AttentionMap::new(side, self.attention_row(layer, frame, entity).to_vec())
    }
}

/// One entity's spatial attention over a square token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    grid_side: usize,
    values: Vec<f32>,
}

impl AttentionMap {
    pub fn new(grid_side: usize, values: Vec<f32>) -> Result<Self> {
        if grid_side == 0 || values.len() != grid_side * grid_side {
            return Err(Error::Dimension(format!(
                "{} attention values for a {grid_side}x{grid_side} grid",
                values.len()
            )));
        }
        if values.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Features(
                "attention values must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = values.iter().map(|&v| v as f64).sum();
        if (total - 1.0).abs() > 1e-5 {
            return Err(Error::Features(format!(
                "attention map sums to {total}, not 1"
            )));
        }
        Ok(Self { grid_side, values })
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Binary PGM, min-max scaled to `0..=255`; a constant map is mid-gray.
    pub fn to_pgm(&self) -> Vec<u8> {
        let g = self.grid_side;
        let mut out = format!("P5\n{g} {g}\n255\n").into_bytes();
        let lo = self.values.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = self
            .values
            .iter()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max);
        if hi == lo {
            out.extend(std::iter::repeat_n(128u8, g * g));
        } else {
            let range = (hi - lo) as f64;
            out.extend(
                self.values
                    .iter()
                    .map(|&v| ((v - lo) as f64 / range * 255.0).round() as u8),
            );
        }
        out
    }
}

pub fn export_attention(map: &AttentionMap, path: &Path) -> Result<()> {
    fs::write(path, map.to_pgm()).map_err(io_err(path))
}

pub fn attention_file_name(video_id: &str, frame: usize, entity: usize, layer: usize) -> String {
    format!("{video_id}_f{frame}_e{entity}_l{layer}.pgm")
}
