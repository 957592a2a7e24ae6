//! Two-view sampling, Adam, and the contrastive training loop.

use std::fmt::Write as _;

use entivid_tensor::{ParamStore, Tape};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::VideoFeatures;
use crate::loss::{scl_loss, SclParams};
use crate::model::Model;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub view_len: usize,
    pub scl: SclParams,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    /// Videos per step.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            view_len: 16,
            scl: SclParams::default(),
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 300,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.scl.validate()?;
        if self.view_len < 2 {
            return Err(Error::Spec(format!(
                "view length {} must be at least 2",
                self.view_len
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Spec("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.eps > 0.0) {
            return Err(Error::Spec(format!(
                "lr {} must be >= 0 and eps {} > 0",
                self.lr, self.eps
            )));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Spec(format!(
                "Adam betas {} / {} must lie in [0, 1)",
                self.beta1, self.beta2
            )));
        }
        Ok(())
    }
}

/// Sorted frame indices of one view; the timestamps are the indices themselves.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct View {
    pub frames: Vec<usize>,
    pub timestamps: Vec<u32>,
}

fn sample_view(rng: &mut impl Rng, num_frames: usize, view_len: usize) -> View {
    let mut frames = index::sample(rng, num_frames, view_len).into_vec();
    frames.sort_unstable();
    let timestamps = frames.iter().map(|&f| f as u32).collect();
    View { frames, timestamps }
}

/// Two independent uniform draws without replacement of `view_len` frames.
pub fn sample_two_views_with(
    rng: &mut impl Rng,
    video: &VideoFeatures,
    view_len: usize,
) -> Result<(View, View)> {
    let t = video.num_frames();
    if t < view_len {
        return Err(Error::Features(format!(
            "video `{}` has {t} frames, a view needs {view_len}",
            video.video_id()
        )));
    }
    Ok((sample_view(rng, t, view_len), sample_view(rng, t, view_len)))
}

pub fn sample_two_views(video: &VideoFeatures, view_len: usize, seed: u64) -> Result<(View, View)> {
    sample_two_views_with(&mut ChaCha8Rng::seed_from_u64(seed), video, view_len)
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u32,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients stored on each parameter.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Dimension(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let n = p.value.numel();
        if m.len() != n || v.len() != n {
            return Err(Error::Dimension(format!(
                "optimizer state for `{}` has the wrong size",
                p.name
            )));
        }
        let grad = p
            .value
            .grad()
            .ok_or_else(|| Error::Spec(format!("parameter `{}` has no gradient", p.name)))?
            .to_vec();
        for (i, x) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            *x = (*x as f64 - update) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub losses: Vec<f32>,
}

impl TrainOutcome {
    /// `step\tloss` lines with six significant digits.
    pub fn loss_trace(&self) -> String {
        let mut out = String::new();
        for (step, &loss) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "{step}\t{}", format_significant(loss as f64, 6));
        }
        out
    }
}

/// `printf("%.{digits}g")`.
pub fn format_significant(x: f64, digits: usize) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let p = digits.max(1);
    let sci = format!("{:.*e}", p - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -4 || exp >= p as i32 {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        trim(&format!("{x:.decimals$}"))
    }
}

/// Contrastive training over `videos`; parameters of `model` are updated in place.
///
/// Each step draws a batch of distinct videos, two views per video, and
/// averages the per-video loss. The features are only read.
pub fn train(
    model: &mut Model,
    videos: &[VideoFeatures],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::Spec("training needs at least one video".into()));
    }
    for v in videos {
        model.check_video(v)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut state = AdamState::new(&model.store);
    let batch = cfg.batch_size.min(videos.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut picks = index::sample(&mut rng, videos.len(), batch).into_vec();
        picks.sort_unstable();
        let mut tape = Tape::<f32>::new();
        let bindings = model.store.bind(&mut tape);
        let mut total = None;
        for &vi in &picks {
            let video = &videos[vi];
            let (a, b) = sample_two_views_with(&mut rng, video, cfg.view_len)?;
            let za = model
                .forward(&mut tape, bindings.vars(), video, &a.frames)?
                .projected;
            let zb = model
                .forward(&mut tape, bindings.vars(), video, &b.frames)?
                .projected;
            let l = scl_loss(&mut tape, za, &a.timestamps, zb, &b.timestamps, cfg.scl)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let total = total.expect("batch is nonempty");
        let loss = tape.scale(total, 1.0 / batch as f64);
        let value = tape.value(loss).item().expect("scalar loss");
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: value });
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        model.store.store_grads(&bindings, &grads)?;
        adam_step(&mut model.store, &mut state, cfg)?;
        log::debug!("step {step} loss {value}");
    }
    model.store.clear_grads();
    Ok(TrainOutcome { losses })
}
