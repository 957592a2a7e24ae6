//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to compute vector-Jacobian products. [`Tape::backward`] walks the
//! nodes once in reverse recording order.

use crate::{Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias(Var, Var),
    MulConst(Var, Vec<T>),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    SwapAxes01(Var),
    Expand(Var),
    IndexSelect {
        x: Var,
        rows: Vec<usize>,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    AttentionWeights {
        q: Var,
        k: Var,
        scale: T,
    },
    Attend {
        w: Var,
        v: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Output of [`Tape::scaled_dot_attention`].
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub output: Var,
    /// Row-stochastic attention matrix, `[.., queries, keys]`.
    pub weights: Var,
}

/// Gradients of a scalar loss with respect to every tracked leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    /// `None` for untracked values and for intermediate (non-leaf) nodes.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of tape nodes the reverse sweep stepped through.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `(batch, rows, cols)` view of a rank-2 or rank-3 shape.
fn as_batched(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [r, c] => Some((1, r, c)),
        [b, r, c] => Some((b, r, c)),
        _ => None,
    }
}

fn grad_slot<'g, T: Scalar>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.tracked {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

fn lex_cmp<T: Scalar>(a: &[T], b: &[T]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Sum whose result does not depend on the order of the terms.
fn sorted_sum<T: Scalar>(terms: &mut [T]) -> T {
    terms.sort_unstable_by(T::total_cmp);
    terms.iter().fold(T::zero(), |acc, &v| acc + v)
}

fn gelu_cdf<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_pdf<T: Scalar>(x: T) -> T {
    let inv_sqrt_2pi = T::from_f64(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-(x * x) * T::from_f64(0.5)).exp()
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let tracked = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor.with_requires_grad(false),
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        let value = Tensor::new(shape, data).expect("op produced a consistent shape");
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(), TensorError> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(TensorError::Axis { op, axis, rank });
        }
        Ok(())
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(TensorError::Shape {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                })
            }
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            T::zero(),
            &mut out,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched matrix product of `[B, m, k]` and `[B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (bs, m, k, n) = match (sa, sb) {
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => {
                return Err(TensorError::Shape {
                    op: "bmm",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                })
            }
        };
        let mut out = vec![T::zero(); bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &da[i * m * k..(i + 1) * m * k],
                (k, 1),
                &db[i * k * n..(i + 1) * k * n],
                (n, 1),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(vec![bs, m, n], out, Op::BatchMatMul(a, b), &[a, b]))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let (bs, r, c) = as_batched(&shape).ok_or(TensorError::Rank {
            op: "transpose",
            expected: "2 or 3",
            shape: shape.clone(),
        })?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..bs {
            let off = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[off + j * r + i] = src[off + i * c + j];
                }
            }
        }
        let mut new_shape = shape;
        let rank = new_shape.len();
        new_shape.swap(rank - 2, rank - 1);
        Ok(self.push(new_shape, out, Op::Transpose(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p - q)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p * q)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(x).data().iter().map(|&v| v * c).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(x).data().iter().map(|&v| v + c).collect();
        self.push(self.shape(x).to_vec(), out, Op::AddScalar(x), &[x])
    }

    /// Adds a rank-1 `bias` along the trailing dimension of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != sb.first() {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let n = sb[0];
        let b = self.value(bias).data();
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        Ok(self.push(sx.to_vec(), out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// Element-wise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var, TensorError> {
        if self.shape(x) != c.shape() {
            return Err(TensorError::Shape {
                op: "mul_const",
                lhs: self.shape(x).to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&p, &q)| p * q)
            .collect();
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::MulConst(x, c.data().to_vec()),
            &[x],
        ))
    }

    /// Exact GELU, `x * Phi(x)` with the Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v * gelu_cdf(v))
            .collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), &[x])
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len)
                    .map(|i| src[idx(i)])
                    .fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for i in 0..len {
                    let e = (src[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    sum = sum + e;
                }
                for i in 0..len {
                    out[idx(i)] = out[idx(i)] / sum;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("log_softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len)
                    .map(|i| src[idx(i)])
                    .fold(T::neg_infinity(), T::max);
                let sum: T = (0..len).map(|i| (src[idx(i)] - max).exp()).sum();
                let lse = max + sum.ln();
                for i in 0..len {
                    out[idx(i)] = src[idx(i)] - lse;
                }
            }
        }
        Ok(self.push(shape, out, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Normalizes over the trailing dimension, then applies `gamma * x + beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::Rank {
            op: "layer_norm",
            expected: ">= 1",
            shape: shape.clone(),
        })?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::from_f64(eps);
        let n = T::from_f64(d as f64);
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *xs
            .first()
            .ok_or(TensorError::Contract("concat of zero tensors".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (p, q))| i == axis || p == q);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        self.check_axis("narrow", x, axis)?;
        let mut shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Contract(format!(
                "narrow [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).data().to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), &[x]))
    }

    /// `[a, b, c] -> [b, a, c]`.
    pub fn swap_axes01(&mut self, x: Var) -> Result<Var, TensorError> {
        let (a, b, c) = match *self.shape(x) {
            [a, b, c] => (a, b, c),
            _ => {
                return Err(TensorError::Rank {
                    op: "swap_axes01",
                    expected: "3",
                    shape: self.shape(x).to_vec(),
                })
            }
        };
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for i in 0..a {
            for j in 0..b {
                out[(j * a + i) * c..(j * a + i + 1) * c]
                    .copy_from_slice(&src[(i * b + j) * c..(i * b + j + 1) * c]);
            }
        }
        Ok(self.push(vec![b, a, c], out, Op::SwapAxes01(x), &[x]))
    }

    /// Repeats `x` along a new leading axis of length `n`.
    pub fn expand(&mut self, x: Var, n: usize) -> Result<Var, TensorError> {
        if n == 0 {
            return Err(TensorError::Contract("expand to zero copies".into()));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(x));
        Ok(self.push(shape, out, Op::Expand(x), &[x]))
    }

    /// Gathers rows (indices along axis 0), repeats allowed.
    pub fn index_select(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || rows.is_empty() {
            return Err(TensorError::Contract(
                "index_select needs rank >= 1 and rows".into(),
            ));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(TensorError::Contract(format!(
                "row {bad} out of range for {shape:?}"
            )));
        }
        let row = self.value(x).numel() / shape[0];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            out.extend_from_slice(&src[r * row..(r + 1) * row]);
        }
        let mut new_shape = shape;
        new_shape[0] = rows.len();
        Ok(self.push(
            new_shape,
            out,
            Op::IndexSelect {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("mean_axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let inv = T::one() / T::from_f64(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let s: T = (0..len).map(|i| src[(o * len + i) * inner + j]).sum();
                out[o * inner + j] = s * inv;
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        Ok(self.push(new_shape, out, Op::MeanAxis { x, axis }, &[x]))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    /// Divides every trailing-dimension row by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::Rank {
            op: "l2_normalize",
            expected: ">= 1",
            shape: shape.clone(),
        })?;
        let src = self.value(x).data();
        let rows = src.len() / d;
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() || !norm.is_finite() {
                return Err(TensorError::Contract(format!("row {r} has norm {norm}")));
            }
            for c in 0..d {
                out[r * d + c] = row[c] / norm;
            }
            norms.push(norm);
        }
        Ok(self.push(shape, out, Op::L2Normalize { x, norms }, &[x]))
    }

    /// `softmax(q k^T / sqrt(d))` over the key axis.
    ///
    /// The softmax denominator is an order-independent sum, so permuting the
    /// keys permutes the weights exactly.
    pub fn attention_weights(&mut self, q: Var, k: Var) -> Result<Var, TensorError> {
        let (sq, sk) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        let shape_err = || TensorError::Shape {
            op: "attention",
            lhs: sq.clone(),
            rhs: sk.clone(),
        };
        let (bq, m, d) = as_batched(&sq).ok_or_else(shape_err)?;
        let (bk, n, dk) = as_batched(&sk).ok_or_else(shape_err)?;
        if sq.len() != sk.len() || bq != bk || d != dk {
            return Err(shape_err());
        }
        let scale = T::one() / T::from_f64(d as f64).sqrt();
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![T::zero(); bq * m * n];
        let mut buf = vec![T::zero(); n];
        for b in 0..bq {
            for i in 0..m {
                let qrow = &qd[(b * m + i) * d..(b * m + i + 1) * d];
                let row = &mut out[(b * m + i) * n..(b * m + i + 1) * n];
                for (j, slot) in row.iter_mut().enumerate() {
                    let krow = &kd[(b * n + j) * d..(b * n + j + 1) * d];
                    let dot = qrow
                        .iter()
                        .zip(krow)
                        .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                    *slot = dot * scale;
                }
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                for (slot, e) in row.iter_mut().zip(buf.iter_mut()) {
                    *slot = (*slot - max).exp();
                    *e = *slot;
                }
                let denom = sorted_sum(&mut buf);
                for slot in row.iter_mut() {
                    *slot = *slot / denom;
                }
            }
        }
        let mut shape = sq;
        let rank = shape.len();
        shape[rank - 1] = n;
        Ok(self.push(shape, out, Op::AttentionWeights { q, k, scale }, &[q, k]))
    }

    /// `w v` where the reduction over keys is order-independent.
    ///
    /// Keys are summed in a canonical order: by value row (lexicographic),
    /// then by weight among keys with equal value rows. Permuting the keys
    /// therefore permutes nothing in the arithmetic.
    pub fn attend(&mut self, w: Var, v: Var) -> Result<Var, TensorError> {
        let (sw, sv) = (self.shape(w).to_vec(), self.shape(v).to_vec());
        let shape_err = || TensorError::Shape {
            op: "attend",
            lhs: sw.clone(),
            rhs: sv.clone(),
        };
        let (bw, m, n) = as_batched(&sw).ok_or_else(shape_err)?;
        let (bv, nv, dv) = as_batched(&sv).ok_or_else(shape_err)?;
        if sw.len() != sv.len() || bw != bv || n != nv {
            return Err(shape_err());
        }
        let (wd, vd) = (self.value(w).data(), self.value(v).data());
        let mut out = vec![T::zero(); bw * m * dv];
        for b in 0..bw {
            let vb = &vd[b * n * dv..(b + 1) * n * dv];
            let vrow = |j: usize| &vb[j * dv..(j + 1) * dv];
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_unstable_by(|&x, &y| lex_cmp(vrow(x), vrow(y)));
            // runs of keys whose value rows are identical
            let mut runs = Vec::new();
            let mut start = 0;
            for i in 1..=n {
                if i == n || lex_cmp(vrow(order[i - 1]), vrow(order[i])).is_ne() {
                    if i - start > 1 {
                        runs.push(start..i);
                    }
                    start = i;
                }
            }
            let mut row_order = order.clone();
            for i in 0..m {
                let wrow = &wd[(b * m + i) * n..(b * m + i + 1) * n];
                for r in &runs {
                    row_order[r.clone()].sort_unstable_by(|&x, &y| wrow[x].total_cmp(&wrow[y]));
                }
                let acc = &mut out[(b * m + i) * dv..(b * m + i + 1) * dv];
                for &j in &row_order {
                    let wj = wrow[j];
                    for (a, &x) in acc.iter_mut().zip(vrow(j)) {
                        *a = *a + wj * x;
                    }
                }
            }
        }
        let mut shape = sw;
        let rank = shape.len();
        shape[rank - 1] = dv;
        Ok(self.push(shape, out, Op::Attend { w, v }, &[w, v]))
    }

    /// Single-head `softmax(q k^T / sqrt(d)) v` for rank-2 or batched rank-3 inputs.
    pub fn scaled_dot_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<Attention, TensorError> {
        let weights = self.attention_weights(q, k)?;
        let output = self.attend(weights, v)?;
        Ok(Attention { output, weights })
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![T::one()]);
        }
        let mut visited = 0;
        for i in (0..self.nodes.len()).rev() {
            visited += 1;
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.backprop(node, &g, &mut grads);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.tracked {
                grads[i].get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = grad_slot(grads, nodes, $v) $body
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();
        let out = node.value.data();

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (shp(a)[0], shp(a)[1]);
                let n = shp(b)[1];
                with_grad!(a, |ga| {
                    T::gemm(m, n, k, T::one(), g, (n, 1), val(b), (1, n), T::one(), ga);
                });
                with_grad!(b, |gb| {
                    T::gemm(k, m, n, T::one(), val(a), (1, k), g, (n, 1), T::one(), gb);
                });
            }
            &Op::BatchMatMul(a, b) => {
                let (bs, m, k) = (shp(a)[0], shp(a)[1], shp(a)[2]);
                let n = shp(b)[2];
                with_grad!(a, |ga| {
                    for i in 0..bs {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            &val(b)[i * k * n..(i + 1) * k * n],
                            (1, n),
                            T::one(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                with_grad!(b, |gb| {
                    for i in 0..bs {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &val(a)[i * m * k..(i + 1) * m * k],
                            (1, k),
                            &g[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            T::one(),
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                });
            }
            &Op::Transpose(x) => {
                let (bs, r, c) = as_batched(shp(x)).expect("checked in forward");
                with_grad!(x, |gx| {
                    for b in 0..bs {
                        let off = b * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                gx[off + i * c + j] = gx[off + i * c + j] + g[off + j * r + i];
                            }
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                with_grad!(a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d);
                });
                with_grad!(b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d);
                });
            }
            &Op::Sub(a, b) => {
                with_grad!(a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d);
                });
                with_grad!(b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(s, &d)| *s = *s - d);
                });
            }
            &Op::Mul(a, b) => {
                with_grad!(a, |ga| {
                    for ((s, &d), &o) in ga.iter_mut().zip(g).zip(val(b)) {
                        *s = *s + d * o;
                    }
                });
                with_grad!(b, |gb| {
                    for ((s, &d), &o) in gb.iter_mut().zip(g).zip(val(a)) {
                        *s = *s + d * o;
                    }
                });
            }
            &Op::Scale(x, c) => with_grad!(x, |gx| {
                gx.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d * c);
            }),
            &Op::AddScalar(x) => with_grad!(x, |gx| {
                gx.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d);
            }),
            &Op::AddBias(x, bias) => {
                let n = shp(bias)[0];
                with_grad!(x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d);
                });
                with_grad!(bias, |gb| {
                    for (i, &d) in g.iter().enumerate() {
                        gb[i % n] = gb[i % n] + d;
                    }
                });
            }
            Op::MulConst(x, c) => with_grad!(*x, |gx| {
                for ((s, &d), &k) in gx.iter_mut().zip(g).zip(c) {
                    *s = *s + d * k;
                }
            }),
            &Op::Gelu(x) => with_grad!(x, |gx| {
                for ((s, &d), &v) in gx.iter_mut().zip(g).zip(val(x)) {
                    *s = *s + d * (gelu_cdf(v) + v * gelu_pdf(v));
                }
            }),
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(shp(x), axis);
                with_grad!(x, |gx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + j;
                            let dot: T = (0..len).map(|i| g[idx(i)] * out[idx(i)]).sum();
                            for i in 0..len {
                                gx[idx(i)] = gx[idx(i)] + out[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                });
            }
            &Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = split_axis(shp(x), axis);
                with_grad!(x, |gx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + j;
                            let total: T = (0..len).map(|i| g[idx(i)]).sum();
                            for i in 0..len {
                                let p = out[idx(i)].exp();
                                gx[idx(i)] = gx[idx(i)] + g[idx(i)] - p * total;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = shp(*gamma)[0];
                let rows = rstd.len();
                let gam = val(*gamma);
                with_grad!(*gamma, |gg| {
                    for (i, (&dy, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[i % d] = gg[i % d] + dy * h;
                    }
                });
                with_grad!(*beta, |gb| {
                    for (i, &dy) in g.iter().enumerate() {
                        gb[i % d] = gb[i % d] + dy;
                    }
                });
                with_grad!(*x, |gx| {
                    let n = T::from_f64(d as f64);
                    for r in 0..rows {
                        let span = r * d..(r + 1) * d;
                        let (gr, hr) = (&g[span.clone()], &xhat[span]);
                        let mut mean_gh = T::zero();
                        let mut mean_ghx = T::zero();
                        for c in 0..d {
                            let gh = gr[c] * gam[c];
                            mean_gh = mean_gh + gh;
                            mean_ghx = mean_ghx + gh * hr[c];
                        }
                        mean_gh = mean_gh / n;
                        mean_ghx = mean_ghx / n;
                        for c in 0..d {
                            let gh = gr[c] * gam[c];
                            gx[r * d + c] =
                                gx[r * d + c] + rstd[r] * (gh - mean_gh - hr[c] * mean_ghx);
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = shp(v)[*axis];
                    with_grad!(v, |gv| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for t in 0..len * inner {
                                gv[dst + t] = gv[dst + t] + g[src + t];
                            }
                        }
                    });
                    offset += len;
                }
            }
            &Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = split_axis(shp(x), axis);
                let len = node.value.shape()[axis];
                with_grad!(x, |gx| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for t in 0..len * inner {
                            gx[dst + t] = gx[dst + t] + g[src + t];
                        }
                    }
                });
            }
            &Op::Reshape(x) => with_grad!(x, |gx| {
                gx.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d);
            }),
            &Op::SwapAxes01(x) => {
                let (a, b, c) = (shp(x)[0], shp(x)[1], shp(x)[2]);
                with_grad!(x, |gx| {
                    for i in 0..a {
                        for j in 0..b {
                            for t in 0..c {
                                let dst = (i * b + j) * c + t;
                                gx[dst] = gx[dst] + g[(j * a + i) * c + t];
                            }
                        }
                    }
                });
            }
            &Op::Expand(x) => {
                let len = nodes[x.0].value.numel();
                with_grad!(x, |gx| {
                    for chunk in g.chunks(len) {
                        gx.iter_mut().zip(chunk).for_each(|(s, &d)| *s = *s + d);
                    }
                });
            }
            Op::IndexSelect { x, rows } => {
                let row = nodes[x.0].value.numel() / shp(*x)[0];
                with_grad!(*x, |gx| {
                    for (i, &r) in rows.iter().enumerate() {
                        for t in 0..row {
                            gx[r * row + t] = gx[r * row + t] + g[i * row + t];
                        }
                    }
                });
            }
            &Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = split_axis(shp(x), axis);
                let inv = T::one() / T::from_f64(len as f64);
                with_grad!(x, |gx| {
                    for o in 0..outer {
                        for i in 0..len {
                            for j in 0..inner {
                                let dst = (o * len + i) * inner + j;
                                gx[dst] = gx[dst] + g[o * inner + j] * inv;
                            }
                        }
                    }
                });
            }
            &Op::Sum(x) => with_grad!(x, |gx| {
                gx.iter_mut().for_each(|s| *s = *s + g[0]);
            }),
            Op::L2Normalize { x, norms } => {
                let d = *shp(*x).last().expect("rank checked in forward");
                with_grad!(*x, |gx| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let (gr, yr) = (&g[span.clone()], &out[span]);
                        let dot: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        for c in 0..d {
                            gx[r * d + c] = gx[r * d + c] + (gr[c] - yr[c] * dot) / norm;
                        }
                    }
                });
            }
            &Op::AttentionWeights { q, k, scale } => {
                let (bs, m, d) = as_batched(shp(q)).expect("checked in forward");
                let n = as_batched(shp(k)).expect("checked in forward").1;
                // Gradient w.r.t. the scaled logits.
                let mut gl = vec![T::zero(); bs * m * n];
                for r in 0..bs * m {
                    let (wr, gr) = (&out[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: T = wr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        gl[r * n + j] = wr[j] * (gr[j] - dot) * scale;
                    }
                }
                with_grad!(q, |gq| {
                    for b in 0..bs {
                        T::gemm(
                            m,
                            n,
                            d,
                            T::one(),
                            &gl[b * m * n..(b + 1) * m * n],
                            (n, 1),
                            &val(k)[b * n * d..(b + 1) * n * d],
                            (d, 1),
                            T::one(),
                            &mut gq[b * m * d..(b + 1) * m * d],
                        );
                    }
                });
                with_grad!(k, |gk| {
                    for b in 0..bs {
                        T::gemm(
                            n,
                            m,
                            d,
                            T::one(),
                            &gl[b * m * n..(b + 1) * m * n],
                            (1, n),
                            &val(q)[b * m * d..(b + 1) * m * d],
                            (d, 1),
                            T::one(),
                            &mut gk[b * n * d..(b + 1) * n * d],
                        );
                    }
                });
            }
            &Op::Attend { w, v } => {
                let (bs, m, n) = as_batched(shp(w)).expect("checked in forward");
                let dv = as_batched(shp(v)).expect("checked in forward").2;
                with_grad!(w, |gw| {
                    for b in 0..bs {
                        T::gemm(
                            m,
                            dv,
                            n,
                            T::one(),
                            &g[b * m * dv..(b + 1) * m * dv],
                            (dv, 1),
                            &val(v)[b * n * dv..(b + 1) * n * dv],
                            (1, dv),
                            T::one(),
                            &mut gw[b * m * n..(b + 1) * m * n],
                        );
                    }
                });
                with_grad!(v, |gv| {
                    for b in 0..bs {
                        T::gemm(
                            n,
                            m,
                            dv,
                            T::one(),
                            &val(w)[b * m * n..(b + 1) * m * n],
                            (1, n),
                            &g[b * m * dv..(b + 1) * m * dv],
                            (dv, 1),
                            T::one(),
                            &mut gv[b * n * dv..(b + 1) * n * dv],
                        );
                    }
                });
            }
        }
    }
}
