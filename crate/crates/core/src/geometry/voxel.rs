use std::collections::HashMap;

use nalgebra::{DMatrix, Point3, Vector3};

use super::PointCloud;
use crate::error::{Error, Result};

pub(crate) fn voxel_key(p: &Point3<f64>, voxel_size: f64) -> [i64; 3] {
    [
        (p.x / voxel_size).floor() as i64,
        (p.y / voxel_size).floor() as i64,
        (p.z / voxel_size).floor() as i64,
    ]
}

/// Replaces the members of every occupied voxel by their centroid.
///
/// Output order follows the first occurrence of each voxel in the input.
/// Features, when present, are averaged the same way.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::InvalidInput(format!("voxel size must be positive, got {voxel_size}")));
    }
    let (groups, _) = voxel_groups(cloud.points(), voxel_size);
    let points = groups
        .iter()
        .map(|members| {
            let sum: Vector3<f64> = members.iter().map(|&i| cloud.points()[i].coords).sum();
            Point3::from(sum / members.len() as f64)
        })
        .collect();
    match cloud.features() {
        None => PointCloud::new(points),
        Some(f) => {
            let mut out = DMatrix::zeros(groups.len(), f.ncols());
            for (g, members) in groups.iter().enumerate() {
                for &i in members {
                    let mut row = out.row_mut(g);
                    row += f.row(i);
                }
                out.row_mut(g).scale_mut(1.0 / members.len() as f64);
            }
            PointCloud::with_features(points, out)
        }
    }
}

/// Member lists per occupied voxel (first-occurrence order) and the voxel
/// id of every input point.
pub(crate) fn voxel_groups(points: &[Point3<f64>], voxel_size: f64) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut slot: HashMap<[i64; 3], usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut assignment = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let g = *slot.entry(voxel_key(p, voxel_size)).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
        assignment.push(g);
    }
    (groups, assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sorted(mut v: Vec<Point3<f64>>) -> Vec<[f64; 3]> {
        v.sort_by(|a, b| {
            a.x.total_cmp(&b.x)
                .then(a.y.total_cmp(&b.y))
                .then(a.z.total_cmp(&b.z))
        });
        v.into_iter().map(|p| [p.x, p.y, p.z]).collect()
    }

    #[test]
    fn cube_corners_collapse_to_center() {
        let mut pts = Vec::new();
        for x in [0.2, 0.3] {
            for y in [0.2, 0.3] {
                for z in [0.2, 0.3] {
                    pts.push(Point3::new(x, y, z));
                }
            }
        }
        let out = voxel_downsample(&PointCloud::new(pts).unwrap(), 1.0).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out.points()[0] - Point3::new(0.25, 0.25, 0.25)).norm() < 1e-15);
    }

    #[test]
    fn empty_in_empty_out() {
        let out = voxel_downsample(&PointCloud::empty(), 0.5).unwrap();
        assert!(out.is_empty());
        assert!(voxel_downsample(&PointCloud::empty(), 0.0).is_err());
    }

    #[test]
    fn tiny_voxel_keeps_points() {
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.5),
        ];
        let out = voxel_downsample(&PointCloud::new(pts.clone()).unwrap(), 1e-3).unwrap();
        assert_eq!(sorted(out.into_points()), sorted(pts));
    }

    #[test]
    fn idempotent_up_to_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<_> = (0..2000)
            .map(|_| Point3::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(-1.0..1.0)))
            .collect();
        let once = voxel_downsample(&PointCloud::new(pts).unwrap(), 0.37).unwrap();
        let twice = voxel_downsample(&once, 0.37).unwrap();
        assert_eq!(sorted(once.into_points()), sorted(twice.into_points()));
    }

    #[test]
    fn features_are_averaged() {
        let pts = vec![Point3::new(0.1, 0.1, 0.1), Point3::new(0.2, 0.2, 0.2)];
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let out = voxel_downsample(&PointCloud::with_features(pts, f).unwrap(), 1.0).unwrap();
        assert_eq!(out.features().unwrap().as_slice(), &[2.0, 3.0]);
    }
}
