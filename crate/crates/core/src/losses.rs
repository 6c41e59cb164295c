//! Scalar supervision functionals, evaluated for verification and
//! diagnostics only (no gradients).

use nalgebra::{DMatrix, Matrix3, Point3};

use crate::error::{Error, Result};
use crate::geometry::metrics::patch_overlap_ratio;
use crate::geometry::{KdTree, RigidTransform};

/// Ground-truth node correspondence with its patch overlap ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtMatch {
    pub source: usize,
    pub target: usize,
    pub overlap: f64,
}

/// Node pairs with positive overlap under `gt` (patch radius `r`), plus the
/// nodes of either side that have none. Pairs at exactly `2r` count as
/// unmatched.
pub fn gt_node_matches(nodes_x: &[Point3<f64>], nodes_y: &[Point3<f64>], gt: &RigidTransform, r: f64) -> (Vec<GtMatch>, Vec<usize>, Vec<usize>) {
    let tree = KdTree::new(nodes_y);
    let mut matches = Vec::new();
    let mut hit_y = vec![false; nodes_y.len()];
    let mut unmatched_x = Vec::new();
    for (i, p) in nodes_x.iter().enumerate() {
        let mut hits: Vec<usize> = tree.radius_search(&gt.apply(p), 2.0 * r).into_iter().map(|n| n.index).collect();
        hits.sort_unstable();
        let before = matches.len();
        for j in hits {
            let overlap = patch_overlap_ratio(p, &nodes_y[j], gt, r);
            if overlap > 0.0 {
                matches.push(GtMatch { source: i, target: j, overlap });
                hit_y[j] = true;
            }
        }
        if matches.len() == before {
            unmatched_x.push(i);
        }
    }
    let unmatched_y = (0..nodes_y.len()).filter(|&j| !hit_y[j]).collect();
    (matches, unmatched_x, unmatched_y)
}

fn weighted_nll(p: &DMatrix<f64>, gt: &[GtMatch]) -> Result<f64> {
    let mut total = 0.0;
    let mut norm = 0.0;
    for m in gt {
        if m.source >= p.nrows() || m.target >= p.ncols() {
            return Err(Error::InvalidInput(format!("ground-truth pair ({}, {}) outside score matrix", m.source, m.target)));
        }
        if !(m.overlap > 0.0 && m.overlap <= 1.0) {
            return Err(Error::InvalidInput(format!("overlap {} outside (0, 1]", m.overlap)));
        }
        total -= m.overlap * p[(m.source, m.target)].ln();
        norm += m.overlap;
    }
    Ok(total / norm)
}

/// Overlap-weighted negative log of the per-layer scores, averaged over layers.
pub fn spot_matching_loss(layers: &[&DMatrix<f64>], gt: &[GtMatch]) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::Empty("ground-truth correspondence set".into()));
    }
    if layers.is_empty() {
        return Err(Error::Empty("layer score matrices".into()));
    }
    let mut sum = 0.0;
    for p in layers {
        sum += weighted_nll(p, gt)?;
    }
    Ok(sum / layers.len() as f64)
}

fn mean_neg_log_complement(o: &nalgebra::DVector<f64>, idx: &[usize]) -> Result<f64> {
    let mut s = 0.0;
    for &k in idx {
        let v = *o.get(k).ok_or_else(|| Error::InvalidInput(format!("unmatched node {k} out of range")))?;
        s -= (-v).ln_1p();
    }
    Ok(s / idx.len() as f64)
}

/// Weighted cross entropy on the final scores plus `−log(1 − ô)` on nodes
/// without correspondences. Empty sets contribute nothing.
pub fn coarse_matching_loss(
    p: &DMatrix<f64>,
    gt: &[GtMatch],
    overlap_x: &nalgebra::DVector<f64>,
    overlap_y: &nalgebra::DVector<f64>,
    unmatched_x: &[usize],
    unmatched_y: &[usize],
) -> Result<f64> {
    if gt.is_empty() && unmatched_x.is_empty() && unmatched_y.is_empty() {
        return Err(Error::Empty("coarse loss index sets".into()));
    }
    let mut loss = 0.0;
    if !gt.is_empty() {
        loss += weighted_nll(p, gt)?;
    }
    if !unmatched_x.is_empty() {
        loss += mean_neg_log_complement(overlap_x, unmatched_x)?;
    }
    if !unmatched_y.is_empty() {
        loss += mean_neg_log_complement(overlap_y, unmatched_y)?;
    }
    Ok(loss)
}

/// Anchor row in the source descriptors, positive and negative rows in the
/// target descriptors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triple {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Mean contrastive loss with bilinear similarity `d_xᵀ W d_y`.
pub fn infonce_loss(triples: &[Triple], desc_x: &DMatrix<f64>, desc_y: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::Empty("InfoNCE triples".into()));
    }
    let d = desc_x.ncols();
    if desc_y.ncols() != d || w.shape() != (d, d) {
        return Err(Error::DimensionMismatch("descriptor widths and W disagree".into()));
    }
    check_symmetric(w)?;
    let proj = desc_x * w;
    let mut total = 0.0;
    for t in triples {
        if t.negatives.is_empty() {
            return Err(Error::InvalidInput(format!("triple for anchor {} has no negatives", t.anchor)));
        }
        if t.anchor >= desc_x.nrows() || std::iter::once(&t.positive).chain(&t.negatives).any(|&j| j >= desc_y.nrows()) {
            return Err(Error::InvalidInput("triple index out of range".into()));
        }
        let a = proj.row(t.anchor);
        let logit = |j: usize| a.dot(&desc_y.row(j));
        let pos = logit(t.positive);
        let logits: Vec<f64> = std::iter::once(pos).chain(t.negatives.iter().map(|&j| logit(j))).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - pos;
    }
    Ok(total / triples.len() as f64)
}

fn check_symmetric(w: &DMatrix<f64>) -> Result<()> {
    if (w - w.transpose()).abs().max() > 1e-9 {
        return Err(Error::InvalidInput("InfoNCE weight matrix is not symmetric".into()));
    }
    Ok(())
}

/// Mean `‖R x + t − ŷ‖`.
pub fn keypoint_l2_loss(pairs: &[(Point3<f64>, Point3<f64>)], gt: &RigidTransform) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("keypoint correspondences".into()));
    }
    Ok(pairs.iter().map(|(x, y)| (gt.apply(x) - y).norm()).sum::<f64>() / pairs.len() as f64)
}

/// Label 1 iff the residual under `gt` is below `r_f`.
pub fn inlier_labels(pairs: &[(Point3<f64>, Point3<f64>)], gt: &RigidTransform, r_f: f64) -> Vec<bool> {
    pairs.iter().map(|(x, y)| (gt.apply(x) - y).norm() < r_f).collect()
}

/// Mean binary cross-entropy. A certain, wrong confidence gives `+∞`.
pub fn inlier_bce_loss(confidences: &[f64], labels: &[bool]) -> Result<f64> {
    if confidences.is_empty() {
        return Err(Error::Empty("confidences".into()));
    }
    if confidences.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!("{} confidences for {} labels", confidences.len(), labels.len())));
    }
    if confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::InvalidInput("confidences must lie in [0, 1]".into()));
    }
    let s: f64 = confidences
        .iter()
        .zip(labels)
        .map(|(&c, &l)| if l { -c.ln() } else { -(-c).ln_1p() })
        .sum();
    Ok(s / confidences.len() as f64)
}

/// `(‖t̂ − t‖, ‖R̂ᵀR − I‖_F)`.
pub fn pose_losses(estimate: &RigidTransform, truth: &RigidTransform) -> (f64, f64) {
    let lt = (estimate.translation() - truth.translation()).norm();
    let lr = (estimate.rotation().transpose() * truth.rotation() - Matrix3::identity()).norm();
    (lt, lr)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub spot: f64,
    pub coarse: f64,
    pub infonce: f64,
    pub keypoint: f64,
    pub inlier: f64,
    pub translation: f64,
    pub rotation: f64,
    /// Symmetric bilinear matrix of the contrastive term.
    pub w: DMatrix<f64>,
}

impl LossWeights {
    /// The LiDAR setting: λ_f = λ_i = λ_k = 1, λ_r = 20, λ_t = 5, λ_s = 0.1,
    /// λ_c = 0.2.
    pub fn kitti(descriptor_dim: usize) -> Self {
        Self {
            spot: 0.1,
            coarse: 0.2,
            infonce: 1.0,
            keypoint: 1.0,
            inlier: 1.0,
            translation: 5.0,
            rotation: 20.0,
            w: DMatrix::identity(descriptor_dim, descriptor_dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = [self.spot, self.coarse, self.infonce, self.keypoint, self.inlier, self.translation, self.rotation];
        if l.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput("loss weights must be non-negative".into()));
        }
        check_symmetric(&self.w)
    }
}

/// Values of the implemented terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub spot: f64,
    pub coarse: f64,
    pub infonce: f64,
    pub keypoint: f64,
    pub inlier: f64,
    pub translation: f64,
    pub rotation: f64,
}

impl LossTerms {
    pub fn ones() -> Self {
        Self {
            spot: 1.0,
            coarse: 1.0,
            infonce: 1.0,
            keypoint: 1.0,
            inlier: 1.0,
            translation: 1.0,
            rotation: 1.0,
        }
    }
}

/// Weighted sum of the implemented terms. The keypoint-detector chamfer
/// term is not implemented and contributes nothing.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(w.spot * terms.spot
        + w.coarse * terms.coarse
        + w.infonce * terms.infonce
        + w.keypoint * terms.keypoint
        + w.inlier * terms.inlier
        + w.translation * terms.translation
        + w.rotation * terms.rotation)
}
