use super::{ModelError, Result};
use crate::tensor::Tensor;

const EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub l_att: f64,
    pub l_fin: f64,
    pub total: f64,
}

pub(crate) fn validate_targets(targets: &[f64]) -> Result<()> {
    match targets.iter().find(|&&y| y != 0.0 && y != 1.0) {
        Some(&y) => Err(ModelError::TargetOutOfRange(y)),
        None => Ok(()),
    }
}

/// Clip labels repeated over every frame, row-major `[N, T]`.
pub(crate) fn frame_targets(targets: &[f64], n_frames: usize) -> Vec<f64> {
    targets
        .iter()
        .flat_map(|&y| std::iter::repeat_n(y, n_frames))
        .collect()
}

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(EPS, 1.0 - EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Summed frame-level and clip-level binary cross-entropy.
///
/// `frame_scores` is `[N, T]`, `clip_scores` and `targets` have length `N`;
/// every frame of a clip carries the clip's label.
pub fn composite_loss(
    frame_scores: &Tensor,
    clip_scores: &[f64],
    targets: &[f64],
    lambda: f64,
) -> Result<LossParts> {
    validate_targets(targets)?;
    let n = targets.len();
    let shape = frame_scores.shape();
    if shape.len() != 2 || shape[0] != n || clip_scores.len() != n {
        return Err(ModelError::StageShape {
            stage: "composite loss",
            expected: vec![n, shape.get(1).copied().unwrap_or(0)],
            actual: shape.to_vec(),
        });
    }
    let t = shape[1];
    let l_att: f64 = frame_scores
        .data()
        .iter()
        .zip(frame_targets(targets, t))
        .map(|(&p, y)| bce(p, y))
        .sum();
    let l_fin: f64 = clip_scores.iter().zip(targets).map(|(&p, &y)| bce(p, y)).sum();
    Ok(LossParts {
        l_att,
        l_fin,
        total: l_att + lambda * l_fin,
    })
}
