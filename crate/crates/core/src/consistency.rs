//! Geometric compatibility between correspondences and the node sampling
//! rules built on it.
//!
//! Two correspondences are compatible when the segment joining their source
//! points and the segment joining their target points have similar length:
//! `β_ij = max(0, 1 − d_ij²/σ_c²)`, `d_ij = |‖x_i − x_j‖ − ‖y_i − y_j‖|`.
//! The generalized degree of a correspondence is its off-diagonal row sum.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Point3};

use crate::error::{Error, Result};
use crate::geometry::KdTree;

#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityGraph {
    beta: DMatrix<f64>,
    degrees: DVector<f64>,
    sigma_c: f64,
}

impl CompatibilityGraph {
    pub fn beta(&self) -> &DMatrix<f64> {
        &self.beta
    }

    pub fn degrees(&self) -> &DVector<f64> {
        &self.degrees
    }

    pub fn sigma_c(&self) -> f64 {
        self.sigma_c
    }

    pub fn len(&self) -> usize {
        self.degrees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degrees.is_empty()
    }

    pub fn max_degree(&self) -> f64 {
        self.degrees.iter().copied().fold(0.0, f64::max)
    }

    /// `β` as comma-separated rows, for inspection.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        for row in self.beta.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Builds the dense compatibility graph of point pairs `(x_i, y_i)`.
/// The diagonal holds 1 but never contributes to degrees.
pub fn build_compatibility(pairs: &[(Point3<f64>, Point3<f64>)], sigma_c: f64) -> Result<CompatibilityGraph> {
    if pairs.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "compatibility needs at least 2 correspondences, got {}",
            pairs.len()
        )));
    }
    if !(sigma_c > 0.0) {
        return Err(Error::InvalidInput(format!("sigma_c must be positive, got {sigma_c}")));
    }
    let n = pairs.len();
    let inv = 1.0 / (sigma_c * sigma_c);
    let mut beta = DMatrix::zeros(n, n);
    for i in 0..n {
        beta[(i, i)] = 1.0;
        for j in i + 1..n {
            let dx = (pairs[i].0 - pairs[j].0).norm();
            let dy = (pairs[i].1 - pairs[j].1).norm();
            let d = dx - dy;
            let b = (1.0 - d * d * inv).max(0.0);
            beta[(i, j)] = b;
            beta[(j, i)] = b;
        }
    }
    let degrees = DVector::from_fn(n, |i, _| (0..n).filter(|&j| j != i).map(|j| beta[(i, j)]).sum());
    Ok(CompatibilityGraph {
        beta,
        degrees,
        sigma_c,
    })
}

/// Degrees divided by their maximum; all-zero degrees stay zero.
pub fn scaled_degrees(g: &CompatibilityGraph) -> DVector<f64> {
    let max = g.max_degree();
    if max > 0.0 {
        &g.degrees / max
    } else {
        DVector::zeros(g.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    /// Scaled-degree cut for the first sampling stage.
    pub degree_threshold: f64,
    /// Keys kept by the second stage.
    pub salient_count: usize,
    /// Seeds per spot, the node itself included.
    pub seed_count: usize,
    /// Neighborhood size on both the source and target side.
    pub neighborhood_size: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            degree_threshold: 0.3,
            salient_count: 48,
            seed_count: 4,
            neighborhood_size: 12,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.salient_count == 0 {
            return Err(Error::InvalidInput("salient_count must be ≥ 1".into()));
        }
        if self.seed_count == 0 || self.seed_count > self.neighborhood_size {
            return Err(Error::InvalidInput("need 1 ≤ seed_count ≤ neighborhood_size".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SalientSample {
    /// Selected indices, highest score first.
    pub indices: Vec<usize>,
    /// True when no candidate passed the degree threshold and the top
    /// degrees were used instead.
    pub fallback: bool,
}

fn top_by(candidates: impl Iterator<Item = usize>, key: &[f64], count: usize) -> Vec<usize> {
    let mut c: Vec<usize> = candidates.collect();
    c.sort_by(|&a, &b| key[b].total_cmp(&key[a]).then(a.cmp(&b)));
    c.truncate(count);
    c
}

/// Two-stage selection: keep scaled degree > threshold, then the
/// `salient_count` highest matching scores (ties to the lower index).
pub fn sample_salient(scores: &[f64], g: &CompatibilityGraph, cfg: &SamplingConfig) -> Result<SalientSample> {
    if scores.len() != g.len() {
        return Err(Error::DimensionMismatch(format!("{} scores for {} correspondences", scores.len(), g.len())));
    }
    cfg.validate()?;
    let scaled = scaled_degrees(g);
    let survivors: Vec<usize> = (0..g.len()).filter(|&i| scaled[i] > cfg.degree_threshold).collect();
    if survivors.is_empty() {
        return Ok(SalientSample {
            indices: top_by(0..g.len(), g.degrees.as_slice(), cfg.salient_count),
            fallback: true,
        });
    }
    Ok(SalientSample {
        indices: top_by(survivors.into_iter(), scores, cfg.salient_count),
        fallback: false,
    })
}

/// Matching score times normalised degree; 0 when `max_degree` is 0.
pub fn consistency_confidence(score: f64, degree: f64, max_degree: f64) -> f64 {
    if max_degree > 0.0 {
        score * (degree / max_degree)
    } else {
        0.0
    }
}

/// Target-side region of interest for source node `node`.
///
/// Seeds are the node and its `seed_count − 1` neighbors of highest
/// confidence; the spot is the union of the `neighborhood_size` nearest
/// target nodes around each seed's current correspondence. Returned sorted
/// ascending.
pub fn build_spot(
    node: usize,
    neighbors: &[usize],
    layer_corrs: &[usize],
    confidences: &[f64],
    target_index: &KdTree,
    cfg: &SamplingConfig,
) -> Result<Vec<usize>> {
    let &own = layer_corrs
        .get(node)
        .ok_or_else(|| Error::InvalidInput(format!("node {node} has no current correspondence")))?;
    if own >= target_index.len() {
        return Err(Error::InvalidInput(format!("correspondence {own} outside target index")));
    }
    let seeds = select_seeds(node, neighbors, confidences, cfg.seed_count);
    let mut spot = Vec::new();
    for s in seeds {
        let center = target_index.point(layer_corrs[s]);
        spot.extend(target_index.knn(center, cfg.neighborhood_size).into_iter().map(|n| n.index));
    }
    spot.sort_unstable();
    spot.dedup();
    Ok(spot)
}

pub(crate) fn select_seeds(node: usize, neighbors: &[usize], confidences: &[f64], seed_count: usize) -> Vec<usize> {
    let extra = top_by(
        neighbors.iter().copied().filter(|&j| j != node),
        confidences,
        seed_count.saturating_sub(1),
    );
    std::iter::once(node).chain(extra).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pairs(rng: &mut ChaCha8Rng, n: usize) -> Vec<(Point3<f64>, Point3<f64>)> {
        (0..n)
            .map(|_| {
                let p = Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0));
                let q = Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0));
                (p, q)
            })
            .collect()
    }

    #[test]
    fn rigid_correspondences_are_fully_compatible() {
        let t = RigidTransform::from_axis_angle(Vector3::new(1.0, 0.0, 1.0), 0.8, Vector3::new(2.0, 0.0, -1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs: Vec<_> = random_pairs(&mut rng, 20).into_iter().map(|(p, _)| (p, t.apply(&p))).collect();
        let g = build_compatibility(&pairs, 0.5).unwrap();
        assert!(g.beta().iter().all(|b| (b - 1.0).abs() < 1e-9));
        assert!(g.degrees().iter().all(|d| (d - 19.0).abs() < 1e-8));
    }

    #[test]
    fn beta_boundary_values() {
        let sigma = 0.4;
        let pairs = |d: f64| {
            vec![
                (Point3::origin(), Point3::origin()),
                (Point3::new(1.0, 0.0, 0.0), Point3::new(1.0 + d, 0.0, 0.0)),
            ]
        };
        let g = build_compatibility(&pairs(sigma), sigma).unwrap();
        assert!(g.beta()[(0, 1)].abs() < 1e-12);
        let g = build_compatibility(&pairs(sigma / 2.0), sigma).unwrap();
        assert!((g.beta()[(0, 1)] - 0.75).abs() < 1e-12);
        assert!(build_compatibility(&pairs(0.0)[..1], sigma).is_err());
        assert!(build_compatibility(&pairs(0.0), 0.0).is_err());
    }

    #[test]
    fn degrees_equal_offdiagonal_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = build_compatibility(&random_pairs(&mut rng, 40), 2.0).unwrap();
        let b = g.beta();
        for i in 0..40 {
            assert_eq!(b[(i, i)], 1.0);
            let brute: f64 = b.row(i).sum() - b[(i, i)];
            assert!((brute - g.degrees()[i]).abs() < 1e-12);
            for j in 0..40 {
                assert_eq!(b[(i, j)], b[(j, i)]);
                assert!((0.0..=1.0).contains(&b[(i, j)]));
            }
        }
        let s = scaled_degrees(&g);
        assert_eq!(s.max(), 1.0);
    }

    #[test]
    fn isolated_correspondence_has_zero_scaled_degree() {
        let mut pairs: Vec<_> = (0..5).map(|i| (Point3::new(i as f64, 0.0, 0.0), Point3::new(i as f64, 0.0, 0.0))).collect();
        pairs.push((Point3::new(0.5, 0.0, 0.0), Point3::new(100.0, 50.0, 0.0)));
        let g = build_compatibility(&pairs, 0.1).unwrap();
        assert_eq!(scaled_degrees(&g)[5], 0.0);
        assert_eq!(scaled_degrees(&g)[0], 1.0);
    }

    #[test]
    fn low_degree_is_excluded_regardless_of_score() {
        let mut pairs: Vec<_> = (0..6).map(|i| (Point3::new(i as f64, 0.0, 0.0), Point3::new(i as f64, 0.0, 0.0))).collect();
        pairs.push((Point3::new(0.5, 0.0, 0.0), Point3::new(100.0, 50.0, 0.0)));
        let g = build_compatibility(&pairs, 0.1).unwrap();
        let mut scores = vec![0.1; 7];
        scores[6] = 0.99;
        let s = sample_salient(&scores, &g, &SamplingConfig::default()).unwrap();
        assert!(!s.fallback);
        assert_eq!(s.indices, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn fallback_when_nothing_survives() {
        let pairs = vec![
            (Point3::new(0.0, 0.0, 0.0), Point3::new(0.0, 0.0, 0.0)),
            (Point3::new(1.0, 0.0, 0.0), Point3::new(9.0, 0.0, 0.0)),
        ];
        let g = build_compatibility(&pairs, 0.1).unwrap();
        let s = sample_salient(&[0.3, 0.2], &g, &SamplingConfig::default()).unwrap();
        assert!(s.fallback);
        assert_eq!(s.indices, vec![0, 1]);
    }

    #[test]
    fn confidence_arithmetic() {
        assert_eq!(consistency_confidence(0.7, 4.0, 4.0), 0.7);
        assert_eq!(consistency_confidence(0.7, 0.0, 4.0), 0.0);
        assert_eq!(consistency_confidence(0.5, 3.0, 6.0), 0.25);
        assert_eq!(consistency_confidence(0.5, 3.0, 0.0), 0.0);
    }

    #[test]
    fn single_seed_spot_is_own_neighborhood() {
        let target: Vec<_> = (0..30).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let tree = KdTree::new(&target);
        let corrs: Vec<usize> = (0..30).collect();
        let cfg = SamplingConfig { seed_count: 1, neighborhood_size: 5, ..Default::default() };
        let spot = build_spot(10, &[10, 11, 9], &corrs, &vec![1.0; 30], &tree, &cfg).unwrap();
        assert_eq!(spot, vec![8, 9, 10, 11, 12]);
        // all seeds share one correspondence: union collapses
        let shared = vec![10usize; 30];
        let cfg = SamplingConfig { seed_count: 3, neighborhood_size: 5, ..Default::default() };
        let spot = build_spot(0, &[0, 1, 2, 3], &shared, &vec![1.0; 30], &tree, &cfg).unwrap();
        assert_eq!(spot, vec![8, 9, 10, 11, 12]);
        assert!(build_spot(40, &[], &corrs, &[], &tree, &cfg).is_err());
    }
}
