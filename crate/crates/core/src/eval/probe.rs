use nalgebra::{DMatrix, RowDVector};

use super::{check_split, EmbeddedVideo};
use crate::{Error, Result};

/// Full-batch gradient descent settings for the softmax probe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 0.5,
        }
    }
}

/// Per-coordinate mean and std from the train rows; constant coordinates keep std 1.
fn standardizer(rows: &[&[f32]], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        mean.iter_mut()
            .zip(r.iter())
            .for_each(|(m, &x)| *m += x as f64 / n);
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        var.iter_mut()
            .zip(r.iter())
            .zip(&mean)
            .for_each(|((v, &x), m)| *v += (x as f64 - m).powi(2) / n);
    }
    let std = var
        .into_iter()
        .map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 })
        .collect();
    (mean, std)
}

/// Softmax regression on standardized embeddings, zero-initialized and fit by
/// full-batch gradient descent; returns test frame accuracy.
pub fn linear_probe_classification(
    train: &[EmbeddedVideo],
    test: &[EmbeddedVideo],
    cfg: &ProbeConfig,
) -> Result<f64> {
    let dim = check_split("train", train)?;
    if check_split("test", test)? != dim {
        return Err(Error::Eval("train and test embedding sizes differ".into()));
    }
    let rows: Vec<&[f32]> = train
        .iter()
        .flat_map(|v| (0..v.len()).map(move |t| v.row(t)))
        .collect();
    let labels: Vec<usize> = train
        .iter()
        .flat_map(|v| v.labels.iter().map(|&l| l as usize))
        .collect();
    let mut seen: Vec<usize> = labels.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(Error::Eval(format!(
            "probe needs two classes in train, found {seen:?}"
        )));
    }
    let classes = 1 + train
        .iter()
        .chain(test)
        .flat_map(|v| v.labels.iter())
        .copied()
        .max()
        .unwrap_or(0) as usize;

    let (mean, std) = standardizer(&rows, dim);
    let standardize = |r: &[f32]| -> Vec<f64> {
        r.iter()
            .zip(&mean)
            .zip(&std)
            .map(|((&x, m), s)| (x as f64 - m) / s)
            .collect()
    };
    let n = rows.len();
    let x = DMatrix::from_fn(n, dim, |i, j| (rows[i][j] as f64 - mean[j]) / std[j]);
    let xt = x.transpose();
    let mut w = DMatrix::<f64>::zeros(dim, classes);
    let mut b = RowDVector::<f64>::zeros(classes);
    for _ in 0..cfg.epochs {
        let mut d = &x * &w;
        for (i, mut row) in d.row_iter_mut().enumerate() {
            row += &b;
            let max = row.max();
            row.apply(|v| *v = (*v - max).exp());
            let z = row.sum();
            row /= z;
            row[labels[i]] -= 1.0;
        }
        let gw = &xt * &d;
        w -= gw * (cfg.lr / n as f64);
        b -= d.row_sum() * (cfg.lr / n as f64);
    }
    let w: Vec<f64> = (0..dim)
        .flat_map(|j| (0..classes).map(move |c| (j, c)))
        .map(|(j, c)| w[(j, c)])
        .collect();
    let b: Vec<f64> = b.iter().copied().collect();
    let mut logits = vec![0.0f64; classes];

    let (mut correct, mut total) = (0usize, 0usize);
    for v in test {
        for t in 0..v.len() {
            scores(&standardize(v.row(t)), &w, &b, &mut logits);
            // first maximum wins ties
            let pred = logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &s)| {
                    if s > best.1 {
                        (c, s)
                    } else {
                        best
                    }
                })
                .0;
            correct += usize::from(pred == v.labels[t] as usize);
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

fn scores(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let classes = b.len();
    out.copy_from_slice(b);
    for (j, &xj) in x.iter().enumerate() {
        out.iter_mut()
            .zip(&w[j * classes..(j + 1) * classes])
            .for_each(|(o, &wj)| *o += xj * wj);
    }
}
