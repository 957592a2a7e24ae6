use nalgebra::{DMatrix, DVector};

use super::{check_split, EmbeddedVideo};
use crate::{Error, Result};

pub const RIDGE_LAMBDA: f64 = 1e-4;

/// `1 - SS_res / SS_tot`; `None` when the targets have zero variance.
pub fn r_squared(targets: &[f64], predictions: &[f64]) -> Option<f64> {
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let ss_tot: f64 = targets.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return None;
    }
    let ss_res: f64 = targets
        .iter()
        .zip(predictions)
        .map(|(y, p)| (y - p).powi(2))
        .sum();
    Some(1.0 - ss_res / ss_tot)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProgressionResult {
    pub mean_r2: f64,
    pub per_video: Vec<f64>,
    /// Test videos whose targets are constant.
    pub excluded: Vec<String>,
}

/// Ridge regression (centered, intercept unpenalized) from embeddings to
/// progression targets, scored by per-video R² on `test`.
pub fn phase_progression_r2(
    train: &[EmbeddedVideo],
    test: &[EmbeddedVideo],
    lambda: f64,
) -> Result<ProgressionResult> {
    let dim = check_split("train", train)?;
    if check_split("test", test)? != dim {
        return Err(Error::Eval("train and test embedding sizes differ".into()));
    }
    let n: usize = train.iter().map(|v| v.len()).sum();
    let x = DMatrix::from_fn(n, dim, |i, j| {
        let (v, t) = locate(train, i);
        train[v].row(t)[j] as f64
    });
    let y = DVector::from_iterator(
        n,
        train
            .iter()
            .flat_map(|v| v.progression.iter().map(|&p| p as f64)),
    );
    let x_mean = x.row_mean();
    let y_mean = y.mean();
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= &x_mean;
    }
    let yc = y.add_scalar(-y_mean);
    let gram = xc.transpose() * &xc + DMatrix::identity(dim, dim) * lambda;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Eval("ridge system is not positive definite".into()))?;
    let w = chol.solve(&(xc.transpose() * yc));
    let intercept = y_mean - (x_mean * &w)[(0, 0)];

    let mut per_video = Vec::new();
    let mut excluded = Vec::new();
    for v in test {
        let preds: Vec<f64> = (0..v.len())
            .map(|t| {
                intercept
                    + v.row(t)
                        .iter()
                        .zip(w.iter())
                        .map(|(&a, b)| a as f64 * b)
                        .sum::<f64>()
            })
            .collect();
        let targets: Vec<f64> = v.progression.iter().map(|&p| p as f64).collect();
        match r_squared(&targets, &preds) {
            Some(r2) => per_video.push(r2),
            None => {
                log::warn!(
                    "video `{}` has constant progression targets; excluded from R²",
                    v.video_id
                );
                excluded.push(v.video_id.clone());
            }
        }
    }
    if per_video.is_empty() {
        return Err(Error::Eval(
            "every test video has constant progression targets".into(),
        ));
    }
    let mean_r2 = per_video.iter().sum::<f64>() / per_video.len() as f64;
    Ok(ProgressionResult {
        mean_r2,
        per_video,
        excluded,
    })
}

fn locate(videos: &[EmbeddedVideo], mut i: usize) -> (usize, usize) {
    for (v, video) in videos.iter().enumerate() {
        if i < video.len() {
            return (v, i);
        }
        i -= video.len();
    }
    unreachable!("row index within total length")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r_squared_cases() {
        assert_eq!(r_squared(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0]), Some(1.0));
        assert_eq!(r_squared(&[0.0, 1.0, 2.0], &[1.0, 1.0, 1.0]), Some(0.0));
        assert_eq!(r_squared(&[0.0, 1.0, 2.0], &[0.0, 1.0, 1.0]), Some(0.5));
        assert_eq!(r_squared(&[3.0, 3.0], &[3.0, 2.0]), None);
    }
}
