//! Frozen-backbone token grids and the synthetic backbone.
//!
//! A [`VideoFeatures`] holds, for every selected backbone layer, a
//! `frames x tokens x channels` grid. The synthetic generator places a
//! phase-dependent "actor" patch over a static per-video background, so the
//! only time-varying signal in a video lives in a small moving region.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// One backbone layer's tokens for every frame, `[frame][token][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    frames: usize,
    tokens: usize,
    channels: usize,
    data: Vec<f32>,
}

impl TokenGrid {
    pub fn new(frames: usize, tokens: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || tokens == 0 || channels == 0 {
            return Err(Error::Features(format!(
                "empty grid {frames}x{tokens}x{channels}"
            )));
        }
        if data.len() != frames * tokens * channels {
            return Err(Error::Features(format!(
                "grid {frames}x{tokens}x{channels} needs {} values, got {}",
                frames * tokens * channels,
                data.len()
            )));
        }
        Ok(Self {
            frames,
            tokens,
            channels,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// `[token][channel]` slice of one frame.
    pub fn frame(&self, t: usize) -> &[f32] {
        let len = self.tokens * self.channels;
        &self.data[t * len..(t + 1) * len]
    }

    /// Concatenated frames in the requested order.
    pub fn gather(&self, frames: &[usize]) -> Vec<f32> {
        frames
            .iter()
            .flat_map(|&t| self.frame(t).iter().copied())
            .collect()
    }
}

/// Per-frame phase labels and progression targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseAnnotations {
    pub labels: Vec<u32>,
    /// Time left until the next phase boundary, divided by video length.
    pub progression: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    video_id: String,
    layers: Vec<TokenGrid>,
    timestamps: Vec<u32>,
    annotations: Option<PhaseAnnotations>,
}

impl VideoFeatures {
    pub fn new(
        video_id: impl Into<String>,
        layers: Vec<TokenGrid>,
        timestamps: Vec<u32>,
        annotations: Option<PhaseAnnotations>,
    ) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Features("no layers".into()))?;
        let (t, s, d) = (first.frames, first.tokens, first.channels);
        if layers
            .iter()
            .any(|g| (g.frames, g.tokens, g.channels) != (t, s, d))
        {
            return Err(Error::Features(
                "layers disagree on frames/tokens/channels".into(),
            ));
        }
        if timestamps.len() != t {
            return Err(Error::Features(format!(
                "{} timestamps for {t} frames",
                timestamps.len()
            )));
        }
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Features(
                "timestamps must be strictly increasing".into(),
            ));
        }
        if let Some(a) = &annotations {
            if a.labels.len() != t || a.progression.len() != t {
                return Err(Error::Features(format!(
                    "annotations cover {}/{} frames, expected {t}",
                    a.labels.len(),
                    a.progression.len()
                )));
            }
        }
        Ok(Self {
            video_id: video_id.into(),
            layers,
            timestamps,
            annotations,
        })
    }

    /// Frame indices `0..T` as timestamps.
    pub fn with_frame_timestamps(
        video_id: impl Into<String>,
        layers: Vec<TokenGrid>,
        annotations: Option<PhaseAnnotations>,
    ) -> Result<Self> {
        let t = layers.first().map_or(0, |g| g.frames) as u32;
        Self::new(video_id, layers, (0..t).collect(), annotations)
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn set_video_id(&mut self, id: impl Into<String>) {
        self.video_id = id.into();
    }

    pub fn num_frames(&self) -> usize {
        self.layers[0].frames
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.layers[0].tokens
    }

    pub fn channels(&self) -> usize {
        self.layers[0].channels
    }

    pub fn layers(&self) -> &[TokenGrid] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &TokenGrid {
        &self.layers[l]
    }

    pub fn timestamps(&self) -> &[u32] {
        &self.timestamps
    }

    pub fn annotations(&self) -> Option<&PhaseAnnotations> {
        self.annotations.as_ref()
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.annotations.as_ref().map(|a| a.labels.as_slice())
    }

    pub fn progression(&self) -> Option<&[f32]> {
        self.annotations.as_ref().map(|a| a.progression.as_slice())
    }

    /// Keeps exactly `layer_ids` (strictly increasing, in range), in order.
    pub fn select_layers(&self, layer_ids: &[usize]) -> Result<Self> {
        if layer_ids.is_empty() {
            return Err(Error::Features("layer selection is empty".into()));
        }
        if layer_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Features(format!(
                "layer ids {layer_ids:?} not strictly increasing"
            )));
        }
        if let Some(&bad) = layer_ids.iter().find(|&&l| l >= self.layers.len()) {
            return Err(Error::Features(format!(
                "layer {bad} out of range for {} layers",
                self.layers.len()
            )));
        }
        Ok(Self {
            video_id: self.video_id.clone(),
            layers: layer_ids.iter().map(|&l| self.layers[l].clone()).collect(),
            timestamps: self.timestamps.clone(),
            annotations: self.annotations.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub frames_per_video: usize,
    /// Grid side `G`; each frame has `G * G` tokens.
    pub grid_side: usize,
    pub channels: usize,
    pub num_phases: usize,
    pub actor_patch_side: usize,
    pub noise_sigma: f32,
    pub num_layers: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_videos: 40,
            frames_per_video: 32,
            grid_side: 8,
            channels: 32,
            num_phases: 4,
            actor_patch_side: 3,
            noise_sigma: 0.1,
            num_layers: 3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_videos", self.num_videos),
            ("frames_per_video", self.frames_per_video),
            ("grid_side", self.grid_side),
            ("channels", self.channels),
            ("actor_patch_side", self.actor_patch_side),
            ("num_layers", self.num_layers),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Spec(format!("{name} must be positive")));
        }
        if self.num_phases < 2 {
            return Err(Error::Spec("num_phases must be at least 2".into()));
        }
        if self.actor_patch_side > self.grid_side {
            return Err(Error::Spec(format!(
                "actor patch {} larger than grid {}",
                self.actor_patch_side, self.grid_side
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Spec(format!(
                "noise_sigma {} must be >= 0",
                self.noise_sigma
            )));
        }
        if 2 * self.num_phases > self.frames_per_video {
            return Err(Error::Spec(format!(
                "cannot split {} frames into {} phases of at least 2 frames",
                self.frames_per_video, self.num_phases
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.grid_side * self.grid_side
    }
}

/// Generator-side ground truth for one synthetic video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTruth {
    pub background: Vec<f32>,
    /// Top-left `(row, col)` of the actor patch, per frame.
    pub actor_positions: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub videos: Vec<VideoFeatures>,
    pub truth: Vec<VideoTruth>,
    /// Actor appearance per phase, `[phase][channel]`, shared by all videos.
    pub phase_signatures: Vec<Vec<f32>>,
    /// `D x D` maps producing layers `0..L-1` from the base grid; the last
    /// layer is the base grid itself.
    pub layer_maps: Vec<Vec<f32>>,
}

impl SyntheticDataset {
    /// Token mask of the actor patch for one frame of one video.
    pub fn actor_mask(&self, video: usize, frame: usize) -> Vec<bool> {
        let g = self.spec.grid_side;
        let p = self.spec.actor_patch_side;
        let (r0, c0) = self.truth[video].actor_positions[frame];
        (0..g * g)
            .map(|s| {
                let (r, c) = (s / g, s % g);
                (r0..r0 + p).contains(&r) && (c0..c0 + p).contains(&c)
            })
            .collect()
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f32>>()
}

/// Phase lengths, each at least 2, summing to `frames`.
fn phase_lengths(rng: &mut ChaCha8Rng, frames: usize, phases: usize) -> Vec<usize> {
    let spare = frames - 2 * phases;
    let mut cuts: Vec<usize> = (0..phases - 1)
        .map(|_| rng.random_range(0..=spare))
        .collect();
    cuts.sort_unstable();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(spare);
    bounds.windows(2).map(|w| 2 + w[1] - w[0]).collect()
}

/// Smooth sinusoidal drift of the patch corner within `[0, range]`.
fn actor_track(rng: &mut ChaCha8Rng, frames: usize, range: usize) -> Vec<(usize, usize)> {
    if range == 0 {
        return vec![(0, 0); frames];
    }
    let half = range as f64 / 2.0;
    let tau = std::f64::consts::TAU;
    let (fr, fc): (f64, f64) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
    let (pr, pc): (f64, f64) = (rng.random_range(0.0..tau), rng.random_range(0.0..tau));
    (0..frames)
        .map(|t| {
            let x = t as f64 / frames as f64;
            let r = (half + half * (tau * fr * x + pr).sin()).round() as usize;
            let c = (half + half * (tau * fc * x + pc).sin()).round() as usize;
            (r.min(range), c.min(range))
        })
        .collect()
}

// Stream ids keep structure draws and noise draws independent, so the same
// seed with `noise_sigma = 0` yields the noiseless version of each video.
const GLOBAL_STREAM: u64 = 0;
const NOISE_STREAM_BASE: u64 = 1 << 32;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Deterministic synthetic dataset: a pure function of `spec` (including its seed).
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let (t_len, g, d, k, p) = (
        spec.frames_per_video,
        spec.grid_side,
        spec.channels,
        spec.num_phases,
        spec.actor_patch_side,
    );
    let s_len = g * g;

    let mut global = stream_rng(spec.seed, GLOBAL_STREAM);
    // A shared actor component plus a per-phase offset: the actor looks like
    // the actor in every phase, but each phase is distinguishable.
    let actor_base = normal_vec(&mut global, d, 1.0);
    let phase_signatures: Vec<Vec<f32>> = (0..k)
        .map(|_| {
            let offset = normal_vec(&mut global, d, 1.0);
            actor_base.iter().zip(offset).map(|(a, o)| a + o).collect()
        })
        .collect();
    let map_scale = 1.0 / (d as f32).sqrt();
    let layer_maps: Vec<Vec<f32>> = (0..spec.num_layers - 1)
        .map(|_| normal_vec(&mut global, d * d, map_scale))
        .collect();

    let mut videos = Vec::with_capacity(spec.num_videos);
    let mut truth = Vec::with_capacity(spec.num_videos);
    for v in 0..spec.num_videos {
        let mut rng = stream_rng(spec.seed, v as u64 + 1);
        let mut noise_rng = stream_rng(spec.seed, NOISE_STREAM_BASE + v as u64);

        let background = normal_vec(&mut rng, d, 1.0);
        let lengths = phase_lengths(&mut rng, t_len, k);
        let mut labels = Vec::with_capacity(t_len);
        let mut progression = Vec::with_capacity(t_len);
        let mut start = 0;
        for (phase, &len) in lengths.iter().enumerate() {
            let end = start + len;
            for t in start..end {
                labels.push(phase as u32);
                progression.push((end - t) as f32 / t_len as f32);
            }
            start = end;
        }
        let positions = actor_track(&mut rng, t_len, g - p);

        let mut base = vec![0.0f32; t_len * s_len * d];
        for t in 0..t_len {
            let (r0, c0) = positions[t];
            let sig = &phase_signatures[labels[t] as usize];
            for s in 0..s_len {
                let (r, c) = (s / g, s % g);
                let in_patch = (r0..r0 + p).contains(&r) && (c0..c0 + p).contains(&c);
                let tok = &mut base[(t * s_len + s) * d..(t * s_len + s + 1) * d];
                for ch in 0..d {
                    tok[ch] = background[ch] + if in_patch { sig[ch] } else { 0.0 };
                }
            }
        }
        if spec.noise_sigma > 0.0 {
            for x in base.iter_mut() {
                let n: f32 = StandardNormal.sample(&mut noise_rng);
                *x += spec.noise_sigma * n;
            }
        }

        let mut layers = Vec::with_capacity(spec.num_layers);
        for map in &layer_maps {
            let mut out = vec![0.0f32; base.len()];
            for (src, dst) in base.chunks(d).zip(out.chunks_mut(d)) {
                for (i, &x) in src.iter().enumerate() {
                    let row = &map[i * d..(i + 1) * d];
                    for (o, &m) in dst.iter_mut().zip(row) {
                        *o += x * m;
                    }
                }
            }
            layers.push(TokenGrid::new(t_len, s_len, d, out)?);
        }
        layers.push(TokenGrid::new(t_len, s_len, d, base)?);

        videos.push(VideoFeatures::with_frame_timestamps(
            format!("synth_{v:04}"),
            layers,
            Some(PhaseAnnotations {
                labels,
                progression,
            }),
        )?);
        truth.push(VideoTruth {
            background,
            actor_positions: positions,
        });
    }

    Ok(SyntheticDataset {
        spec: spec.clone(),
        videos,
        truth,
        phase_signatures,
        layer_maps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_videos: 3,
            frames_per_video: 12,
            grid_side: 4,
            channels: 5,
            num_phases: 3,
            actor_patch_side: 2,
            noise_sigma: 0.0,
            num_layers: 2,
            seed: 9,
        }
    }

    #[test]
    fn impossible_partition_is_rejected() {
        let spec = SyntheticSpec {
            frames_per_video: 5,
            num_phases: 3,
            ..small()
        };
        assert!(matches!(
            generate_synthetic_dataset(&spec),
            Err(Error::Spec(_))
        ));
        let spec = SyntheticSpec {
            actor_patch_side: 5,
            ..small()
        };
        assert!(matches!(spec.validate(), Err(Error::Spec(_))));
        let spec = SyntheticSpec {
            num_phases: 1,
            ..small()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn phase_lengths_cover_video() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let l = phase_lengths(&mut rng, 32, 4);
            assert_eq!(l.len(), 4);
            assert_eq!(l.iter().sum::<usize>(), 32);
            assert!(l.iter().all(|&x| x >= 2));
        }
        // Tight case: every phase exactly 2 frames.
        assert_eq!(phase_lengths(&mut rng, 8, 4), vec![2, 2, 2, 2]);
    }

    #[test]
    fn actor_moves_smoothly_inside_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let track = actor_track(&mut rng, 32, 5);
        for w in track.windows(2) {
            assert!(w[0].0.abs_diff(w[1].0) <= 1 && w[0].1.abs_diff(w[1].1) <= 1);
        }
        assert!(track.iter().all(|&(r, c)| r <= 5 && c <= 5));
    }

    #[test]
    fn select_layers_contract() {
        let ds = generate_synthetic_dataset(&SyntheticSpec {
            num_layers: 3,
            ..small()
        })
        .unwrap();
        let v = &ds.videos[0];
        assert_eq!(&v.select_layers(&[0, 1, 2]).unwrap(), v);
        let last = v.select_layers(&[2]).unwrap();
        assert_eq!(last.num_layers(), 1);
        assert_eq!(last.layer(0), v.layer(2));
        assert!(v.select_layers(&[1, 3]).is_err());
        assert!(v.select_layers(&[2, 1]).is_err());
    }
}
