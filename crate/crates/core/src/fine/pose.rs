//! Pose solvers: confidence-weighted sparse fit, dense soft refinement,
//! RANSAC over correspondences and point-to-point ICP.

use nalgebra::{DMatrix, DVector, Point3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::single_head_local_attention;
use crate::error::{Error, Result};
use crate::geometry::metrics::rotation_angle;
use crate::geometry::{weighted_kabsch, Correspondence, KdTree, RigidTransform};

/// Weighted Kabsch with per-correspondence confidences.
pub fn sparse_register(pairs: &[(Point3<f64>, Point3<f64>)], confidences: &[f64]) -> Result<RigidTransform> {
    if pairs.len() != confidences.len() {
        return Err(Error::DimensionMismatch(format!("{} confidences for {} correspondences", confidences.len(), pairs.len())));
    }
    let corrs: Vec<Correspondence> = pairs.iter().zip(confidences).map(|(&(s, t), &w)| Correspondence::new(s, t, w)).collect();
    weighted_kabsch(&corrs)
}

/// `[1 − d/R_d]^+`.
pub fn dense_weight(d: f64, r_d: f64) -> f64 {
    (1.0 - d / r_d).max(0.0)
}

/// Dense points with descriptors, as used by [`dense_refine`].
#[derive(Debug, Clone, Copy)]
pub struct DenseCloud<'a> {
    pub points: &'a [Point3<f64>],
    pub features: &'a DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenseConfig {
    pub radius: f64,
    pub neighbors: usize,
    /// Re-association rounds; each solves the objective once.
    pub iterations: usize,
}

impl Default for DenseConfig {
    fn default() -> Self {
        Self {
            radius: 0.6,
            neighbors: 6,
            iterations: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseResult {
    pub transform: RigidTransform,
    /// Dense correspondences of the last round (source frame, virtual
    /// target, weight).
    pub dense: Vec<Correspondence>,
    /// Objective of the last round at its starting pose and at the solution.
    pub objective_before: f64,
    pub objective_after: f64,
}

fn dense_round(
    src: DenseCloud<'_>,
    dst: DenseCloud<'_>,
    dst_tree: &KdTree,
    pose: &RigidTransform,
    cfg: &DenseConfig,
    w_q: &DMatrix<f64>,
    w_k: &DMatrix<f64>,
) -> Result<Vec<Correspondence>> {
    let mut out = Vec::new();
    for (i, p) in src.points.iter().enumerate() {
        let q = pose.apply(p);
        let cands: Vec<(Point3<f64>, DVector<f64>)> = dst_tree
            .knn(&q, cfg.neighbors)
            .into_iter()
            .filter(|n| n.distance < cfg.radius)
            .map(|n| (dst.points[n.index], dst.features.row(n.index).transpose()))
            .collect();
        if cands.is_empty() {
            continue;
        }
        let query = src.features.row(i).transpose();
        let local = single_head_local_attention(&query, &cands, w_q, w_k)?;
        let w = dense_weight((q - local.point).norm(), cfg.radius);
        if w > 0.0 {
            out.push(Correspondence::new(*p, local.point, w));
        }
    }
    Ok(out)
}

/// Refines `init` with dense virtual correspondences found within
/// `cfg.radius`, solved jointly with the fixed-weight `sparse` set.
/// Without any dense match the initial pose is returned.
pub fn dense_refine(
    src: DenseCloud<'_>,
    dst: DenseCloud<'_>,
    init: &RigidTransform,
    sparse: &[Correspondence],
    cfg: &DenseConfig,
    w_q: &DMatrix<f64>,
    w_k: &DMatrix<f64>,
) -> Result<DenseResult> {
    if src.features.nrows() != src.points.len() || dst.features.nrows() != dst.points.len() {
        return Err(Error::DimensionMismatch("dense features and points disagree".into()));
    }
    if !(cfg.radius > 0.0) || cfg.neighbors == 0 {
        return Err(Error::InvalidInput("dense radius and neighbor count must be positive".into()));
    }
    let dst_tree = KdTree::new(dst.points);
    let mut pose = *init;
    let mut result = DenseResult {
        transform: pose,
        dense: Vec::new(),
        objective_before: 0.0,
        objective_after: 0.0,
    };
    for _ in 0..cfg.iterations.max(1) {
        let dense = dense_round(src, dst, &dst_tree, &pose, cfg, w_q, w_k)?;
        if dense.is_empty() {
            break;
        }
        let all: Vec<Correspondence> = sparse.iter().chain(&dense).copied().collect();
        let before = crate::geometry::weighted_objective(&all, &pose);
        let next = weighted_kabsch(&all)?;
        result = DenseResult {
            transform: next,
            objective_before: before,
            objective_after: crate::geometry::weighted_objective(&all, &next),
            dense,
        };
        pose = next;
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold: f64,
    /// Early exit once this success probability is reached.
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            inlier_threshold: 0.5,
            confidence: 0.999,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub transform: RigidTransform,
    pub inliers: Vec<usize>,
    pub iterations: usize,
}

fn inliers_of(corrs: &[Correspondence], t: &RigidTransform, thr: f64) -> Vec<usize> {
    (0..corrs.len()).filter(|&i| corrs[i].residual(t) < thr).collect()
}

/// Residuals below `t` on all three keep every pairwise length within `2t`.
fn edges_agree(corrs: &[Correspondence], idx: [usize; 3], tol: f64) -> bool {
    let len = |i: usize, j: usize, f: fn(&Correspondence) -> Point3<f64>| (f(&corrs[i]) - f(&corrs[j])).norm();
    [(0, 1), (0, 2), (1, 2)].iter().all(|&(u, v)| {
        let (i, j) = (idx[u], idx[v]);
        (len(i, j, |c| c.source) - len(i, j, |c| c.target)).abs() < tol
    })
}

/// Inlier count and truncated-quadratic score `Σ (1 − r²/t²)^+`.
fn msac(corrs: &[Correspondence], t: &RigidTransform, thr: f64) -> (usize, f64) {
    let mut count = 0;
    let mut score = 0.0;
    for c in corrs {
        let r = c.residual(t);
        if r < thr {
            count += 1;
            score += 1.0 - (r / thr).powi(2);
        }
    }
    (count, score)
}

fn unit_subset(corrs: &[Correspondence], idx: &[usize]) -> Vec<Correspondence> {
    idx.iter().map(|&i| Correspondence::unit(corrs[i].source, corrs[i].target)).collect()
}

/// Rejected draws per counted hypothesis before giving up.
const MAX_DRAWS_PER_ITERATION: usize = 50;

/// Minimal three-point hypotheses scored by truncated-quadratic consensus,
/// then a least-squares refit on the inlier set. Triples whose pairwise
/// lengths disagree by `2·inlier_threshold` or more cannot be all inliers
/// and are discarded without counting as an iteration. Input weights are
/// ignored.
pub fn ransac_register(corrs: &[Correspondence], cfg: &RansacConfig) -> Result<RansacResult> {
    let mut best = ransac_hypotheses(corrs, cfg, 1)?;
    Ok(best.swap_remove(0))
}

fn sample_triple(rng: &mut ChaCha8Rng, n: usize) -> [usize; 3] {
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    let mut c = rng.random_range(0..n - 2);
    for lo in [a.min(b), a.max(b)] {
        if c >= lo {
            c += 1;
        }
    }
    [a, b, c]
}

/// Sorted index sets sharing at least half of the smaller one.
fn same_cluster(a: &[usize], b: &[usize]) -> bool {
    let (mut i, mut j, mut shared) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                shared += 1;
                i += 1;
                j += 1;
            }
        }
    }
    2 * shared >= a.len().min(b.len())
}

struct Hypothesis {
    transform: RigidTransform,
    score: f64,
    inliers: Vec<usize>,
}

/// Like [`ransac_register`] but returns up to `count` refitted hypotheses
/// from distinct consensus clusters, best score first. Hypotheses whose
/// inlier sets share half of the smaller set belong to the same cluster,
/// which keeps only its best member.
pub fn ransac_hypotheses(corrs: &[Correspondence], cfg: &RansacConfig, count: usize) -> Result<Vec<RansacResult>> {
    let n = corrs.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("RANSAC needs at least 3 correspondences, got {n}")));
    }
    if !(cfg.inlier_threshold > 0.0) || !(0.0..1.0).contains(&cfg.confidence) || count == 0 {
        return Err(Error::InvalidInput("RANSAC threshold must be positive, confidence in [0, 1) and count ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // best first; equal scores keep the earlier hypothesis
    let mut pool: Vec<Hypothesis> = Vec::with_capacity(count + 1);
    let mut needed = cfg.iterations;
    let mut it = 0;
    let mut draws = 0;
    let max_draws = cfg.iterations.saturating_mul(MAX_DRAWS_PER_ITERATION);
    while it < needed.min(cfg.iterations) && draws < max_draws {
        draws += 1;
        let idx = sample_triple(&mut rng, n);
        if !edges_agree(corrs, idx, 2.0 * cfg.inlier_threshold) {
            continue;
        }
        it += 1;
        let Ok(t) = weighted_kabsch(&unit_subset(corrs, &idx)) else {
            continue;
        };
        let (inl, score) = msac(corrs, &t, cfg.inlier_threshold);
        if pool.len() == count && pool.last().is_some_and(|h| h.score >= score) {
            continue;
        }
        let inliers = inliers_of(corrs, &t, cfg.inlier_threshold);
        if let Some(k) = pool.iter().position(|h| same_cluster(&h.inliers, &inliers)) {
            if pool[k].score >= score {
                continue;
            }
            pool.remove(k);
        }
        let pos = pool.partition_point(|h| h.score >= score);
        pool.insert(pos, Hypothesis { transform: t, score, inliers });
        pool.truncate(count);
        if pos == 0 {
            let p_good = (inl as f64 / n as f64).powi(3);
            if p_good >= 1.0 {
                needed = it;
            } else if p_good > 0.0 {
                let k = ((1.0 - cfg.confidence).ln() / (1.0 - p_good).ln()).ceil();
                needed = if k.is_finite() { (k as usize).max(it) } else { cfg.iterations };
            }
        }
    }
    if pool.is_empty() {
        return Err(Error::NoConsensus("no non-degenerate hypothesis".into()));
    }
    let mut out: Vec<RansacResult> = Vec::new();
    let best_count = pool.iter().map(|h| h.inliers.len()).max().unwrap_or(0);
    for h in pool {
        if h.inliers.len() < 3 {
            continue;
        }
        let (transform, inliers) = refine_consensus(corrs, h.transform, h.inliers, cfg.inlier_threshold);
        let duplicate = out.iter().any(|o| {
            let d = o.transform.inverse().compose(&transform);
            d.translation().norm() < cfg.inlier_threshold && crate::geometry::metrics::rotation_angle(d.rotation()) < DISTINCT_ROTATION_DEG.to_radians()
        });
        if !duplicate {
            out.push(RansacResult { transform, inliers, iterations: it });
        }
    }
    if out.is_empty() {
        return Err(Error::NoConsensus(format!("best hypothesis has only {best_count} inliers")));
    }
    Ok(out)
}

/// Hypotheses closer than this in rotation (and the inlier threshold in
/// translation) count as the same pose.
const DISTINCT_ROTATION_DEG: f64 = 2.0;

/// Two least-squares refits on the growing consensus set.
fn refine_consensus(corrs: &[Correspondence], mut transform: RigidTransform, mut inliers: Vec<usize>, thr: f64) -> (RigidTransform, Vec<usize>) {
    for _ in 0..2 {
        let Ok(refit) = weighted_kabsch(&unit_subset(corrs, &inliers)) else {
            break;
        };
        let next = inliers_of(corrs, &refit, thr);
        if next.len() < inliers.len() {
            break;
        }
        transform = refit;
        inliers = next;
    }
    (transform, inliers)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpConfig {
    pub max_iterations: usize,
    pub max_correspondence_distance: f64,
    /// Stop once rotation (rad) plus translation (m) change falls below this.
    pub tolerance: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            max_correspondence_distance: 0.3,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub iterations: usize,
    /// Association RMSE at the start of each iteration.
    pub rmse: Vec<f64>,
    /// RMSE of each iteration's fixed associations after its update.
    pub rmse_after_update: Vec<f64>,
}

fn pose_delta(a: &RigidTransform, b: &RigidTransform) -> f64 {
    rotation_angle(&(a.rotation().transpose() * b.rotation())) + (a.translation() - b.translation()).norm()
}

fn rms(corrs: &[Correspondence], t: &RigidTransform) -> f64 {
    (corrs.iter().map(|c| c.residual(t).powi(2)).sum::<f64>() / corrs.len() as f64).sqrt()
}

/// Point-to-point ICP with nearest-neighbor association.
pub fn icp_refine(src: &[Point3<f64>], dst: &[Point3<f64>], init: &RigidTransform, cfg: &IcpConfig) -> Result<IcpResult> {
    if dst.is_empty() {
        return Err(Error::Empty("ICP target".into()));
    }
    let tree = KdTree::new(dst);
    let mut pose = *init;
    let mut out = IcpResult {
        transform: pose,
        iterations: 0,
        rmse: Vec::new(),
        rmse_after_update: Vec::new(),
    };
    for _ in 0..cfg.max_iterations {
        let assoc: Vec<Correspondence> = src
            .iter()
            .filter_map(|p| {
                let n = tree.nearest(&pose.apply(p))?;
                (n.distance <= cfg.max_correspondence_distance).then(|| Correspondence::unit(*p, dst[n.index]))
            })
            .collect();
        if assoc.len() < 3 {
            if out.iterations == 0 {
                return Err(Error::NoConsensus(format!(
                    "ICP found {} associations within {}",
                    assoc.len(),
                    cfg.max_correspondence_distance
                )));
            }
            break;
        }
        let next = match weighted_kabsch(&assoc) {
            Ok(t) => t,
            Err(e) if out.iterations == 0 => return Err(e),
            Err(_) => break,
        };
        out.rmse.push(rms(&assoc, &pose));
        out.rmse_after_update.push(rms(&assoc, &next));
        out.iterations += 1;
        let delta = pose_delta(&pose, &next);
        pose = next;
        out.transform = pose;
        if delta < cfg.tolerance {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rre, rte};
    use nalgebra::Vector3;
    use rand_distr::{Distribution, Normal};

    fn truth() -> RigidTransform {
        RigidTransform::from_axis_angle(Vector3::new(0.2, 1.0, -0.4), 0.7, Vector3::new(1.0, -2.0, 0.5))
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3<f64>> {
        (0..n)
            .map(|_| {
                let x: f64 = rng.random_range(0.0..6.0);
                let y: f64 = rng.random_range(0.0..6.0);
                Point3::new(x, y, (x * 1.1).sin() * 0.5 + (y * 0.7).cos() * 0.6)
            })
            .collect()
    }

    #[test]
    fn sparse_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = truth();
        let pts = cloud(&mut rng, 40);
        let mut pairs: Vec<_> = pts.iter().map(|p| (*p, t.apply(p))).collect();
        let est = sparse_register(&pairs, &vec![0.7; 40]).unwrap();
        assert!(rre(&est, &t) < 1e-7 && rte(&est, &t) < 1e-9);
        let mut conf = vec![1.0; 40];
        for k in 0..20 {
            pairs[k].1 = Point3::new(rng.random_range(-9.0..9.0), 0.0, 3.0);
            conf[k] = 0.0;
        }
        let est = sparse_register(&pairs, &conf).unwrap();
        assert!(rre(&est, &t) < 1e-7 && rte(&est, &t) < 1e-9);
        // one-hot on an exact triple equals Kabsch on that triple
        let mut hot = vec![0.0; 40];
        hot[25..28].fill(1.0);
        let triple: Vec<_> = (25..28).map(|k| Correspondence::unit(pairs[k].0, pairs[k].1)).collect();
        assert_eq!(sparse_register(&pairs, &hot).unwrap(), weighted_kabsch(&triple).unwrap());
    }

    #[test]
    fn dense_weight_formula() {
        assert_eq!(dense_weight(0.0, 2.0), 1.0);
        assert_eq!(dense_weight(1.0, 2.0), 0.5);
        assert_eq!(dense_weight(2.0, 2.0), 0.0);
        assert_eq!(dense_weight(3.0, 2.0), 0.0);
    }

    #[test]
    fn dense_fixed_point_with_identifying_descriptors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = cloud(&mut rng, 60);
        let t = truth();
        let moved: Vec<_> = pts.iter().map(|p| t.apply(p)).collect();
        let feats = DMatrix::<f64>::identity(60, 60);
        let w = DMatrix::<f64>::identity(60, 60) * 10.0;
        let cfg = DenseConfig { radius: 1.5, neighbors: 6, iterations: 2 };
        let r = dense_refine(
            DenseCloud { points: &pts, features: &feats },
            DenseCloud { points: &moved, features: &feats },
            &t,
            &[],
            &cfg,
            &w,
            &w,
        )
        .unwrap();
        assert!(rre(&r.transform, &t) < 1e-6 && rte(&r.transform, &t) < 1e-6);
        assert!(r.objective_after <= r.objective_before + 1e-12);
        assert!(r.dense.iter().all(|c| c.weight > 0.0 && c.weight <= 1.0));
        let far = RigidTransform::from_translation(Vector3::new(100.0, 0.0, 0.0));
        let r = dense_refine(DenseCloud { points: &pts, features: &feats }, DenseCloud { points: &moved, features: &feats }, &far, &[], &cfg, &w, &w).unwrap();
        assert_eq!(r.transform, far);
    }

    fn outlier_set(rng: &mut ChaCha8Rng, n: usize, inlier: f64) -> Vec<Correspondence> {
        let t = truth();
        (0..n)
            .map(|k| {
                let p = Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
                if (k as f64) < inlier * n as f64 {
                    Correspondence::unit(p, t.apply(&p))
                } else {
                    Correspondence::unit(p, Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
                }
            })
            .collect()
    }

    #[test]
    fn ransac_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clean = outlier_set(&mut rng, 30, 1.0);
        let r = ransac_register(&clean, &RansacConfig::default()).unwrap();
        assert!(rre(&r.transform, &truth()) < 1e-6 && rte(&r.transform, &truth()) < 1e-6);
        assert_eq!(r.iterations, 1);
        let mixed = outlier_set(&mut rng, 200, 0.3);
        let cfg = RansacConfig { inlier_threshold: 0.1, ..Default::default() };
        let a = ransac_register(&mixed, &cfg).unwrap();
        assert_eq!(a, ransac_register(&mixed, &cfg).unwrap());
        assert!(rre(&a.transform, &truth()) < 0.5);
        let junk = outlier_set(&mut rng, 50, 0.0);
        assert!(ransac_register(&junk, &RansacConfig { inlier_threshold: 1e-6, ..Default::default() }).is_err());
        assert!(ransac_register(&clean[..2], &cfg).is_err());
    }

    #[test]
    fn hypotheses_cover_distinct_motions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let other = RigidTransform::from_axis_angle(Vector3::z(), 2.5, Vector3::new(3.0, 0.0, 0.0));
        let mut corrs = outlier_set(&mut rng, 60, 1.0);
        corrs.extend(outlier_set(&mut rng, 40, 1.0).into_iter().map(|c| Correspondence::unit(c.source, other.apply(&c.source))));
        let h = ransac_hypotheses(&corrs, &RansacConfig { inlier_threshold: 0.05, ..Default::default() }, 4).unwrap();
        assert!(rre(&h[0].transform, &truth()) < 1e-6 && h[0].inliers.len() == 60);
        assert!(h.iter().any(|r| rre(&r.transform, &other) < 1e-6 && r.inliers.len() == 40));
        assert!(ransac_hypotheses(&corrs, &RansacConfig::default(), 0).is_err());
        assert!(same_cluster(&[1, 2, 3, 4], &[3, 4, 9]) && !same_cluster(&[1, 2, 3, 4], &[4, 8, 9]));
    }

    #[test]
    fn icp_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = cloud(&mut rng, 2000);
        let t = truth();
        let noise = Normal::new(0.0, 0.005).unwrap();
        let dst: Vec<_> = src.iter().map(|p| t.apply(p) + Vector3::from_fn(|_, _| noise.sample(&mut rng))).collect();
        let exact: Vec<_> = src.iter().map(|p| t.apply(p)).collect();
        let r = icp_refine(&src, &exact, &t, &IcpConfig::default()).unwrap();
        assert!(r.iterations <= 2 && rte(&r.transform, &t) < 1e-9);
        let nudge = RigidTransform::from_axis_angle(Vector3::z(), 0.02, Vector3::new(0.05, -0.03, 0.02)).compose(&t);
        let r = icp_refine(&src, &dst, &nudge, &IcpConfig::default()).unwrap();
        assert!(rte(&r.transform, &t) < 0.01 && rre(&r.transform, &t) < 0.2, "{} {}", rte(&r.transform, &t), rre(&r.transform, &t));
        for (b, a) in r.rmse.iter().zip(&r.rmse_after_update) {
            assert!(a <= &(b + 1e-12));
        }
        for w in r.rmse.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        let far = RigidTransform::from_translation(Vector3::new(50.0, 0.0, 0.0));
        assert!(icp_refine(&src, &dst, &far, &IcpConfig::default()).is_err());
    }
}
