//! Handcrafted node descriptors standing in for a learned backbone.
//!
//! Every node of every level gets a raw vector made of covariance shape
//! features, a sign-invariant pair-feature histogram (FPFH-style), local
//! density, the normal and the height above the lowest point. The raw vector
//! is centred over the cloud, mapped to `D` channels by a seeded Gaussian
//! projection and L2-normalised. Only the normal and height entries depend on
//! the orientation of the input; they are down-weighted by default.

use nalgebra::{DMatrix, Matrix3, Point3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::attention::{RngSeed, WeightInit};
use crate::error::{Error, Result};
use crate::geometry::{voxel_downsample, KdTree, PointCloud};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Voxel size of the finest (1/2) level; the next levels use 2× and 4×.
    pub voxel_size: f64,
    pub dim: usize,
    /// Neighborhood radius for shape features, in units of the level voxel.
    pub shape_radius: f64,
    /// Neighborhood radius for the pair histogram, in units of the level voxel.
    pub histogram_radius: f64,
    pub histogram_bins: usize,
    pub histogram_weight: f64,
    pub shape_weight: f64,
    pub density_weight: f64,
    pub normal_weight: f64,
    pub height_weight: f64,
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.25,
            dim: 128,
            shape_radius: 2.0,
            histogram_radius: 4.0,
            histogram_bins: 12,
            histogram_weight: 2.0,
            shape_weight: 0.5,
            density_weight: 0.1,
            normal_weight: 0.1,
            height_weight: 0.1,
            seed: 0x5eed_f00d,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) {
            return Err(Error::InvalidInput("features.voxel_size must be positive".into()));
        }
        if self.dim == 0 || self.histogram_bins == 0 {
            return Err(Error::InvalidInput("features.dim and features.histogram_bins must be ≥ 1".into()));
        }
        if !(self.shape_radius > 0.0 && self.histogram_radius > 0.0) {
            return Err(Error::InvalidInput("feature radii must be positive".into()));
        }
        Ok(())
    }

    fn raw_width(&self) -> usize {
        SHAPE_FEATURES + 1 + 3 + 1 + 3 * self.histogram_bins
    }
}

const SHAPE_FEATURES: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub voxel_size: f64,
    pub points: Vec<Point3<f64>>,
    /// `n × D`, unit rows.
    pub features: DMatrix<f64>,
}

impl PyramidLevel {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Levels 1/2, 1/4 and 1/8 with nearest-coarser-node parent maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub half: PyramidLevel,
    pub quarter: PyramidLevel,
    pub eighth: PyramidLevel,
    /// For each 1/2 node, its nearest 1/4 node.
    pub half_to_quarter: Vec<usize>,
    /// For each 1/4 node, its nearest 1/8 node.
    pub quarter_to_eighth: Vec<usize>,
}

impl FeaturePyramid {
    pub fn dim(&self) -> usize {
        self.quarter.features.ncols()
    }
}

/// Covariance eigenvalues (descending) and the eigenvector of the smallest.
fn local_shape(points: &[Point3<f64>]) -> Option<([f64; 3], Vector3<f64>)> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let mean: Vector3<f64> = points.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let l = order.map(|i| eig.eigenvalues[i].max(0.0));
    let mut normal: Vector3<f64> = eig.eigenvectors.column(order[2]).into_owned();
    if normal.z < 0.0 || (normal.z == 0.0 && (normal.y < 0.0 || (normal.y == 0.0 && normal.x < 0.0))) {
        normal = -normal;
    }
    Some((l, normal))
}

/// Linearity, planarity, scattering, omnivariance, anisotropy, eigenentropy
/// and change of curvature from descending eigenvalues.
pub fn shape_features(l: [f64; 3]) -> [f64; SHAPE_FEATURES] {
    let l1 = l[0];
    if l1 <= 0.0 {
        return [0.0; SHAPE_FEATURES];
    }
    let sum = l[0] + l[1] + l[2];
    let e = l.map(|v| v / sum);
    let entropy = -e.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>() / 3f64.ln();
    [
        (l[0] - l[1]) / l1,
        (l[1] - l[2]) / l1,
        l[2] / l1,
        (e[0] * e[1] * e[2]).cbrt() * 3.0,
        (l[0] - l[2]) / l1,
        entropy,
        3.0 * l[2] / sum,
    ]
}

/// Sign-invariant pair features: `|n_s·d̂|`, `|n_t·d̂|`, `|n_s·n_t|`.
fn pair_features(ps: &Point3<f64>, ns: &Vector3<f64>, pt: &Point3<f64>, nt: &Vector3<f64>) -> Option<[f64; 3]> {
    let d = pt - ps;
    let len = d.norm();
    if len == 0.0 {
        return None;
    }
    let d = d / len;
    Some([ns.dot(&d).abs(), nt.dot(&d).abs(), ns.dot(nt).abs()])
}

fn bin(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

fn downsample_points(points: &[Point3<f64>], voxel: f64) -> Result<Vec<Point3<f64>>> {
    Ok(voxel_downsample(&PointCloud::new(points.to_vec())?, voxel)?.into_points())
}

/// Raw (unprojected) descriptors of `nodes` against the full-resolution
/// `raw` cloud. Rows are not centred.
pub fn raw_descriptors(raw: &KdTree, nodes: &[Point3<f64>], voxel: f64, z_range: (f64, f64), cfg: &FeatureConfig) -> DMatrix<f64> {
    let bins = cfg.histogram_bins;
    let shape_r = cfg.shape_radius * voxel;
    let hist_r = cfg.histogram_radius * voxel;
    let mut shapes = Vec::with_capacity(nodes.len());
    let mut normals = Vec::with_capacity(nodes.len());
    let mut counts = Vec::with_capacity(nodes.len());
    for q in nodes {
        let members: Vec<Point3<f64>> = raw.radius_search(q, shape_r).into_iter().map(|n| *raw.point(n.index)).collect();
        counts.push(members.len());
        match local_shape(&members) {
            Some((l, n)) => {
                shapes.push(shape_features(l));
                normals.push(n);
            }
            None => {
                shapes.push([0.0; SHAPE_FEATURES]);
                normals.push(Vector3::z());
            }
        }
    }

    // simple per-node histograms, then FPFH-style neighbor blending
    let node_tree = KdTree::new(nodes);
    let neighborhoods: Vec<Vec<(usize, f64)>> = nodes
        .iter()
        .enumerate()
        .map(|(i, q)| {
            node_tree
                .radius_search(q, hist_r)
                .into_iter()
                .filter(|n| n.index != i)
                .map(|n| (n.index, n.distance))
                .collect()
        })
        .collect();
    let mut simple = DMatrix::zeros(nodes.len(), 3 * bins);
    for (i, nbrs) in neighborhoods.iter().enumerate() {
        let mut used = 0usize;
        for &(j, _) in nbrs {
            if let Some(f) = pair_features(&nodes[i], &normals[i], &nodes[j], &normals[j]) {
                for (k, v) in f.iter().enumerate() {
                    simple[(i, k * bins + bin(*v, bins))] += 1.0;
                }
                used += 1;
            }
        }
        if used > 0 {
            simple.row_mut(i).scale_mut(1.0 / used as f64);
        }
    }
    let mut hist = simple.clone();
    for (i, nbrs) in neighborhoods.iter().enumerate() {
        if nbrs.is_empty() {
            continue;
        }
        let mut acc = DMatrix::zeros(1, 3 * bins);
        let mut total = 0.0;
        for &(j, d) in nbrs {
            let w = 1.0 - d / hist_r;
            acc += simple.row(j) * w;
            total += w;
        }
        if total > 0.0 {
            let mut row = hist.row_mut(i);
            row += acc / total;
            row.scale_mut(0.5);
        }
    }

    let expected = (4.0 / 3.0 * std::f64::consts::PI * shape_r.powi(3) / voxel.powi(3)).max(1.0);
    let (z_min, z_max) = z_range;
    let z_span = (z_max - z_min).max(f64::EPSILON);
    let mut out = DMatrix::zeros(nodes.len(), cfg.raw_width());
    for i in 0..nodes.len() {
        let mut c = 0;
        for v in shapes[i] {
            out[(i, c)] = v * cfg.shape_weight;
            c += 1;
        }
        out[(i, c)] = (1.0 + counts[i] as f64).ln() / (1.0 + expected).ln() * cfg.density_weight;
        c += 1;
        for k in 0..3 {
            out[(i, c)] = normals[i][k] * cfg.normal_weight;
            c += 1;
        }
        out[(i, c)] = (nodes[i].z - z_min) / z_span * cfg.height_weight;
        c += 1;
        for k in 0..3 * bins {
            out[(i, c + k)] = hist[(i, k)] * cfg.histogram_weight;
        }
    }
    out
}

/// Centres raw rows, projects them to `D` channels and L2-normalises.
pub fn project_descriptors(raw: &DMatrix<f64>, projection: &DMatrix<f64>) -> DMatrix<f64> {
    let n = raw.nrows();
    let mut centred = raw.clone();
    if n > 0 {
        let mean = raw.row_sum() / n as f64;
        for mut row in centred.row_iter_mut() {
            row -= &mean;
        }
    }
    let mut f = centred * projection;
    let uniform = 1.0 / (f.ncols() as f64).sqrt();
    for mut row in f.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        } else {
            row.fill(uniform);
        }
    }
    f
}

fn nearest_map(fine: &[Point3<f64>], coarse: &[Point3<f64>]) -> Vec<usize> {
    let tree = KdTree::new(coarse);
    fine.iter().map(|p| tree.nearest(p).expect("coarse level non-empty").index).collect()
}

/// Builds the three-level descriptor pyramid of `cloud`.
pub fn handcrafted_features(cloud: &PointCloud, cfg: &FeatureConfig) -> Result<FeaturePyramid> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(Error::Empty("point cloud".into()));
    }
    let raw = KdTree::new(cloud.points());
    let z_range = cloud
        .points()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.z), hi.max(p.z)));
    let projection = WeightInit::new(RngSeed(cfg.seed)).projection(cfg.raw_width(), cfg.dim);
    let mut levels = Vec::with_capacity(3);
    for (k, name) in ["1/2", "1/4", "1/8"].iter().enumerate() {
        let voxel = cfg.voxel_size * (1 << k) as f64;
        let points = downsample_points(cloud.points(), voxel)?;
        if points.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "level {name} has {} nodes at voxel size {voxel}; at least 3 are required",
                points.len()
            )));
        }
        let features = project_descriptors(&raw_descriptors(&raw, &points, voxel, z_range, cfg), &projection);
        levels.push(PyramidLevel {
            voxel_size: voxel,
            points,
            features,
        });
    }
    let eighth = levels.pop().expect("three levels");
    let quarter = levels.pop().expect("three levels");
    let half = levels.pop().expect("three levels");
    Ok(FeaturePyramid {
        half_to_quarter: nearest_map(&half.points, &quarter.points),
        quarter_to_eighth: nearest_map(&quarter.points, &eighth.points),
        half,
        quarter,
        eighth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bumpy(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                let x: f64 = rng.random_range(0.0..8.0);
                let y: f64 = rng.random_range(0.0..8.0);
                Point3::new(x, y, (x * 0.9).sin() * 0.6 + (y * 1.3).cos() * 0.4)
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn planar_patch_is_planar() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<_> = (0..400).map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0)).collect();
        let (l, n) = local_shape(&pts).unwrap();
        let f = shape_features(l);
        assert!(l[2] < 1e-12 && (l[0] / l[1]) < 1.3);
        assert!(f[1] > f[0] && f[1] > f[2], "{f:?}");
        assert!((n.z - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pyramid_shape_and_norms() {
        let cfg = FeatureConfig::default();
        let p = handcrafted_features(&bumpy(1, 4000), &cfg).unwrap();
        assert!(p.half.len() >= p.quarter.len() && p.quarter.len() >= p.eighth.len());
        assert_eq!(p.half_to_quarter.len(), p.half.len());
        assert_eq!(p.quarter_to_eighth.len(), p.quarter.len());
        for level in [&p.half, &p.quarter, &p.eighth] {
            assert_eq!(level.features.ncols(), 128);
            for row in level.features.row_iter() {
                assert!((row.norm() - 1.0).abs() < 1e-9);
            }
        }
        assert_eq!(p, handcrafted_features(&bumpy(1, 4000), &cfg).unwrap());
    }

    #[test]
    fn rotation_only_moves_normal_and_height_entries() {
        let cfg = FeatureConfig::default();
        let cloud = bumpy(2, 3000);
        let rot = RigidTransform::from_axis_angle(Vector3::new(0.3, 1.0, 0.2), 0.9, Vector3::new(1.0, 2.0, 3.0));
        let moved: Vec<_> = cloud.points().iter().map(|p| rot.apply(p)).collect();
        let nodes = &cloud.points()[..50];
        let moved_nodes = &moved[..50];
        let zr = |pts: &[Point3<f64>]| pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.z), b.max(p.z)));
        let a = raw_descriptors(&KdTree::new(cloud.points()), nodes, 0.25, zr(cloud.points()), &cfg);
        let b = raw_descriptors(&KdTree::new(&moved), moved_nodes, 0.25, zr(&moved), &cfg);
        let variant = SHAPE_FEATURES + 1..SHAPE_FEATURES + 5;
        for c in 0..a.ncols() {
            if variant.contains(&c) {
                continue;
            }
            for r in 0..a.nrows() {
                assert!((a[(r, c)] - b[(r, c)]).abs() < 1e-6, "column {c}");
            }
        }
    }

    #[test]
    fn too_few_nodes_is_an_error() {
        let cloud = PointCloud::new(vec![Point3::origin(), Point3::new(0.01, 0.0, 0.0)]).unwrap();
        assert!(handcrafted_features(&cloud, &FeatureConfig::default()).is_err());
    }
}
