//! Registration and matching metrics.

use nalgebra::{Matrix3, Point3};
use serde::{Deserialize, Serialize};

use super::{Correspondence, RigidTransform};
use crate::error::{Error, Result};

/// Which success criterion registration recall uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecallProtocol {
    /// RTE and RRE below their thresholds (LiDAR benchmarks).
    PoseThresholds,
    /// Ground-truth correspondence RMSE below `rmse_threshold` (RGB-D benchmarks).
    Rmse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// meters
    pub rr_rte_threshold: f64,
    /// degrees
    pub rr_rre_threshold: f64,
    /// meters
    pub rmse_threshold: f64,
    /// meters
    pub inlier_threshold: f64,
    /// fraction
    pub fmr_threshold: f64,
    /// fraction
    pub pir_threshold: f64,
    /// Patch radius (m) for node-pair overlap.
    pub patch_radius: f64,
    pub protocol: RecallProtocol,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            rr_rte_threshold: 2.0,
            rr_rre_threshold: 5.0,
            rmse_threshold: 0.2,
            inlier_threshold: 0.1,
            fmr_threshold: 0.05,
            pir_threshold: 0.2,
            patch_radius: 0.5,
            protocol: RecallProtocol::PoseThresholds,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.rr_rte_threshold,
            self.rr_rre_threshold,
            self.rmse_threshold,
            self.inlier_threshold,
            self.fmr_threshold,
            self.pir_threshold,
            self.patch_radius,
        ];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput("metric thresholds must be positive".into()))
        }
    }
}

/// Geodesic rotation distance in degrees.
///
/// Evaluated as `atan2(sin θ, cos θ)` of the relative rotation `R̂ᵀR`, with
/// `cos θ = (trace − 1)/2` clamped to `[−1, 1]`; a trace at or above 3 yields
/// exactly 0. Same value as `arccos((trace − 1)/2)` but without the
/// square-root loss of precision near zero.
pub fn rre(estimate: &RigidTransform, truth: &RigidTransform) -> f64 {
    rotation_angle(&(estimate.rotation().transpose() * truth.rotation())).to_degrees()
}

pub(crate) fn rotation_angle(relative: &Matrix3<f64>) -> f64 {
    let cos = (relative.trace() - 1.0) / 2.0;
    if cos >= 1.0 {
        return 0.0;
    }
    let cos = cos.max(-1.0);
    let skew = nalgebra::Vector3::new(
        relative[(2, 1)] - relative[(1, 2)],
        relative[(0, 2)] - relative[(2, 0)],
        relative[(1, 0)] - relative[(0, 1)],
    );
    let sin = skew.norm() / 2.0;
    sin.atan2(cos)
}

/// `‖t̂ − t‖₂` in meters.
pub fn rte(estimate: &RigidTransform, truth: &RigidTransform) -> f64 {
    (estimate.translation() - truth.translation()).norm()
}

/// RMSE of the ground-truth pairs `(i, j)` under `estimate`.
pub fn registration_rmse(
    src: &[Point3<f64>],
    dst: &[Point3<f64>],
    gt_corrs: &[(usize, usize)],
    estimate: &RigidTransform,
) -> Result<f64> {
    if gt_corrs.is_empty() {
        return Err(Error::Empty("ground-truth correspondence set".into()));
    }
    let mut sum = 0.0;
    for &(i, j) in gt_corrs {
        let (Some(x), Some(y)) = (src.get(i), dst.get(j)) else {
            return Err(Error::InvalidInput(format!("correspondence ({i}, {j}) out of range")));
        };
        sum += (estimate.apply(x) - y).norm_squared();
    }
    Ok((sum / gt_corrs.len() as f64).sqrt())
}

/// Fraction of correspondences with residual below `threshold` under `gt`.
pub fn inlier_ratio(corrs: &[Correspondence], gt: &RigidTransform, threshold: f64) -> Result<f64> {
    if corrs.is_empty() {
        return Err(Error::Empty("correspondence set".into()));
    }
    let hits = corrs.iter().filter(|c| c.residual(gt) < threshold).count();
    Ok(hits as f64 / corrs.len() as f64)
}

/// Per-pair quantities the batch metrics consume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub rte: f64,
    pub rre: f64,
    pub rmse: f64,
    pub inlier_ratio: f64,
}

fn nonempty(batch: &[PairOutcome]) -> Result<()> {
    if batch.is_empty() {
        Err(Error::Empty("batch of pair results".into()))
    } else {
        Ok(())
    }
}

/// Fraction of pairs whose inlier ratio exceeds `fmr_threshold`.
pub fn fmr(batch: &[PairOutcome], cfg: &MetricsConfig) -> Result<f64> {
    nonempty(batch)?;
    let hits = batch.iter().filter(|p| p.inlier_ratio > cfg.fmr_threshold).count();
    Ok(hits as f64 / batch.len() as f64)
}

pub fn pair_registered(pair: &PairOutcome, cfg: &MetricsConfig) -> bool {
    match cfg.protocol {
        RecallProtocol::PoseThresholds => {
            pair.rte < cfg.rr_rte_threshold && pair.rre < cfg.rr_rre_threshold
        }
        RecallProtocol::Rmse => pair.rmse < cfg.rmse_threshold,
    }
}

/// Fraction of successfully registered pairs under `cfg.protocol`.
pub fn registration_recall(batch: &[PairOutcome], cfg: &MetricsConfig) -> Result<f64> {
    nonempty(batch)?;
    let hits = batch.iter().filter(|p| pair_registered(p, cfg)).count();
    Ok(hits as f64 / batch.len() as f64)
}

/// Volume fraction shared by two radius-`r` spheres centred at `gt(p)` and
/// `q`: `1 − 3d/(4r) + d³/(16r³)` with `d = min(‖R p + t − q‖, 2r)`.
pub fn patch_overlap_ratio(p: &Point3<f64>, q: &Point3<f64>, gt: &RigidTransform, r: f64) -> f64 {
    let d = (gt.apply(p) - q).norm().min(2.0 * r);
    overlap_from_distance(d, r)
}

pub(crate) fn overlap_from_distance(d: f64, r: f64) -> f64 {
    let d = d.min(2.0 * r);
    let x = d / r;
    (1.0 - 0.75 * x + x * x * x / 16.0).max(0.0)
}

/// Fraction of node pairs whose patches overlap under `gt`; 0 for no pairs.
pub fn pir(node_pairs: &[(Point3<f64>, Point3<f64>)], gt: &RigidTransform, r: f64) -> f64 {
    if node_pairs.is_empty() {
        return 0.0;
    }
    let hits = node_pairs
        .iter()
        .filter(|(p, q)| patch_overlap_ratio(p, q, gt, r) > 0.0)
        .count();
    hits as f64 / node_pairs.len() as f64
}

/// Fraction of pairs with PIR above `threshold`.
pub fn pmr(pirs: &[f64], threshold: f64) -> Result<f64> {
    if pirs.is_empty() {
        return Err(Error::Empty("batch of PIR values".into()));
    }
    Ok(pirs.iter().filter(|v| **v > threshold).count() as f64 / pirs.len() as f64)
}
