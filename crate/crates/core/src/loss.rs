//! Sequence contrastive loss between two views of one video.
//!
//! For each frame `i` of one view the target over the other view's frames is
//! a Gaussian in timestamp distance, `G_ij ∝ exp(-(t1_i - t2_j)^2 / (2 σ^2))`;
//! the prediction is `softmax_j(cos(z1_i, z2_j) / τ)`. The loss is the mean
//! row-wise `KL(G || P)`, averaged over both directions.

use entivid_tensor::{Scalar, Tape, Tensor, Var};

use crate::{Error, Result};

/// Row-normalized Gaussian targets, `[t1.len()][t2.len()]` flat.
pub fn gaussian_targets(t1: &[u32], t2: &[u32], sigma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(t1.len() * t2.len());
    for &a in t1 {
        // subtract the row max before exponentiating, as in softmax
        let logits: Vec<f64> = t2
            .iter()
            .map(|&b| {
                let d = a as f64 - b as f64;
                -d * d / (2.0 * sigma * sigma)
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    out
}

/// Mean over rows of `KL(targets_i || softmax(logits_i))`; `logits` is `[n, m]`.
pub fn scl_directional<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[f64]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] * shape[1] != targets.len() {
        return Err(Error::Dimension(format!(
            "{} targets for logits of shape {shape:?}",
            targets.len()
        )));
    }
    let rows = shape[0];
    let log_p = tape.log_softmax(logits, 1)?;
    let g = Tensor::<T>::new(
        shape.clone(),
        targets.iter().map(|&v| T::from_f64(v)).collect(),
    )?;
    let weighted = tape.mul_const(log_p, &g)?;
    let cross = tape.sum(weighted);
    // sum_j G log G, with 0 log 0 = 0
    let neg_entropy: f64 = targets
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum();
    let kl = tape.scale(cross, -1.0);
    let kl = tape.add_scalar(kl, neg_entropy);
    Ok(tape.scale(kl, 1.0 / rows as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SclParams {
    pub sigma: f64,
    pub temperature: f64,
}

impl Default for SclParams {
    fn default() -> Self {
        Self {
            sigma: 3.0,
            temperature: 0.1,
        }
    }
}

impl SclParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.temperature > 0.0) {
            return Err(Error::Spec(format!(
                "sigma {} and temperature {} must be positive",
                self.sigma, self.temperature
            )));
        }
        Ok(())
    }
}

/// Symmetrized loss between `z1: [n, d]` at timestamps `t1` and `z2: [m, d]` at `t2`.
pub fn scl_loss<T: Scalar>(
    tape: &mut Tape<T>,
    z1: Var,
    t1: &[u32],
    z2: Var,
    t2: &[u32],
    params: SclParams,
) -> Result<Var> {
    params.validate()?;
    let (s1, s2) = (tape.shape(z1).to_vec(), tape.shape(z2).to_vec());
    if s1.len() != 2 || s2.len() != 2 || s1[1] != s2[1] || s1[0] != t1.len() || s2[0] != t2.len() {
        return Err(Error::Dimension(format!(
            "views {s1:?} / {s2:?} with {} / {} timestamps",
            t1.len(),
            t2.len()
        )));
    }
    let n1 = tape.l2_normalize(z1)?;
    let n2 = tape.l2_normalize(z2)?;
    let n2t = tape.transpose(n2)?;
    let sim = tape.matmul(n1, n2t)?;
    let logits12 = tape.scale(sim, 1.0 / params.temperature);
    let logits21 = tape.transpose(logits12)?;
    let d12 = scl_directional(tape, logits12, &gaussian_targets(t1, t2, params.sigma))?;
    let d21 = scl_directional(tape, logits21, &gaussian_targets(t2, t1, params.sigma))?;
    let both = tape.add(d12, d21)?;
    Ok(tape.scale(both, 0.5))
}
