//! Detection error trade-off, equal error rate and minimum normalised t-DCF.
//!
//! Scores are oriented so that higher means more bona fide. At threshold
//! `θ` a bona fide trial is rejected when its score is `<= θ` and a spoof is
//! accepted when its score is `> θ`.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no {0} scores")]
    EmptyPopulation(&'static str),
    #[error("beta must be > 0, got {0}")]
    NonPositiveBeta(f64),
    #[error("score {0} is not finite")]
    NonFinite(f64),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    /// False rejection rate of bona fide trials.
    pub frr: f64,
    /// False acceptance rate of spoofed trials.
    pub far: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
    pub frr: f64,
    pub far: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinTdcf {
    pub value: f64,
    pub threshold: f64,
}

fn sorted(scores: &[f64], population: &'static str) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyPopulation(population));
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite(bad));
    }
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

fn rates(bona: &[f64], spoof: &[f64], threshold: f64) -> (f64, f64) {
    let rejected = bona.partition_point(|&s| s <= threshold);
    let accepted = spoof.len() - spoof.partition_point(|&s| s <= threshold);
    (
        rejected as f64 / bona.len() as f64,
        accepted as f64 / spoof.len() as f64,
    )
}

/// `(FRR, FAR)` at one threshold.
pub fn frr_far(bona: &[f64], spoof: &[f64], threshold: f64) -> Result<(f64, f64)> {
    Ok(rates(
        &sorted(bona, "bona fide")?,
        &sorted(spoof, "spoof")?,
        threshold,
    ))
}

/// `-inf`, the midpoints of adjacent pooled scores, and `+inf`, ascending.
pub fn candidate_thresholds(bona: &[f64], spoof: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = bona.iter().chain(spoof).copied().collect();
    all.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(all.len() + 1);
    out.push(f64::NEG_INFINITY);
    out.extend(all.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(f64::INFINITY);
    out
}

/// One operating point per candidate threshold: `N + M + 1` points, FRR
/// non-decreasing and FAR non-increasing.
pub fn det_curve(bona: &[f64], spoof: &[f64]) -> Result<Vec<OperatingPoint>> {
    let b = sorted(bona, "bona fide")?;
    let s = sorted(spoof, "spoof")?;
    Ok(candidate_thresholds(&b, &s)
        .into_iter()
        .map(|threshold| {
            let (frr, far) = rates(&b, &s, threshold);
            OperatingPoint {
                threshold,
                frr,
                far,
            }
        })
        .collect())
}

/// `(FRR + FAR) / 2` at the threshold where `|FRR - FAR|` is smallest; ties
/// go to the lowest threshold.
pub fn compute_eer(bona: &[f64], spoof: &[f64]) -> Result<Eer> {
    let curve = det_curve(bona, spoof)?;
    let mut best = curve[0];
    for p in &curve[1..] {
        if (p.frr - p.far).abs() < (best.frr - best.far).abs() {
            best = *p;
        }
    }
    Ok(Eer {
        eer: (best.frr + best.far) / 2.0,
        threshold: best.threshold,
        frr: best.frr,
        far: best.far,
    })
}

/// `min over θ of beta * FRR(θ) + FAR(θ)`; ties go to the lowest threshold.
pub fn compute_min_tdcf(bona: &[f64], spoof: &[f64], beta: f64) -> Result<MinTdcf> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(MetricsError::NonPositiveBeta(beta));
    }
    let curve = det_curve(bona, spoof)?;
    let mut best = MinTdcf {
        value: f64::INFINITY,
        threshold: f64::NEG_INFINITY,
    };
    for p in curve {
        let v = beta * p.frr + p.far;
        if v < best.value {
            best = MinTdcf {
                value: v,
                threshold: p.threshold,
            };
        }
    }
    Ok(best)
}
