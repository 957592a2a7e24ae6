//! Parameter initialization and small layer helpers shared by the model parts.

use entivid_tensor::{ParamId, ParamStore, Scalar, Tape, TensorF32, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

pub(crate) fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> TensorF32 {
    TensorF32::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        (std * z) as f32
    })
}

/// Affine map `x W + b` with `W` drawn from `N(0, 1/fan_in)` and `b = 0`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        let weight = store.insert(
            format!("{name}.weight"),
            normal(rng, &[fan_in, fan_out], std),
        )?;
        let bias = if bias {
            Some(store.insert(format!("{name}.bias"), TensorF32::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub(crate) fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight.index()])?;
        Ok(match self.bias {
            Some(b) => tape.add_bias(y, p[b.index()])?,
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub(crate) const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub(crate) fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.insert(format!("{name}.gamma"), TensorF32::full(&[dim], 1.0))?;
        let beta = store.insert(format!("{name}.beta"), TensorF32::zeros(&[dim]))?;
        Ok(Self { gamma, beta })
    }

    pub(crate) fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, p[self.gamma.index()], p[self.beta.index()], LN_EPS)?)
    }
}

/// Records an `f32` buffer as an untracked constant of the tape's scalar type.
pub(crate) fn constant<T: Scalar>(
    tape: &mut Tape<T>,
    shape: &[usize],
    data: Vec<f32>,
) -> Result<Var> {
    let t = TensorF32::new(shape.to_vec(), data)?;
    Ok(tape.constant(t.cast()))
}

pub(crate) fn check_params(p: &[Var], store: &ParamStore) -> Result<()> {
    if p.len() != store.len() {
        return Err(Error::Dimension(format!(
            "{} parameter handles for a model with {} parameters",
            p.len(),
            store.len()
        )));
    }
    Ok(())
}
