//! Closed-form weighted rigid alignment.

use nalgebra::{Matrix3, Vector3};

use super::{Correspondence, RigidTransform};
use crate::error::{Error, Result};

/// Relative singular-value floor below which the cross-covariance is
/// considered rank-deficient.
pub const DEGENERACY_RATIO: f64 = 1e-12;

/// Minimizes `Σ w_k ‖R x_k + t − y_k‖²` over proper rigid motions.
///
/// Centres both sides on their weighted centroids, takes the SVD of the
/// weighted cross-covariance `H = U Σ Vᵀ` and returns
/// `R = V diag(1, 1, det(V Uᵀ)) Uᵀ`, `t = ȳ − R x̄`.
///
/// Fails with [`Error::Degenerate`] when fewer than three correspondences
/// carry positive weight, the total weight is zero, or the points are
/// coincident or collinear.
pub fn weighted_kabsch(corrs: &[Correspondence]) -> Result<RigidTransform> {
    if let Some(c) = corrs.iter().find(|c| !(c.weight.is_finite() && c.weight >= 0.0)) {
        return Err(Error::InvalidInput(format!("invalid correspondence weight {}", c.weight)));
    }
    let effective = corrs.iter().filter(|c| c.weight > 0.0).count();
    if effective < 3 {
        return Err(Error::Degenerate(format!(
            "{effective} correspondences with positive weight, need at least 3"
        )));
    }
    let total: f64 = corrs.iter().map(|c| c.weight).sum();
    let mut src_mean = Vector3::zeros();
    let mut dst_mean = Vector3::zeros();
    for c in corrs {
        src_mean += c.source.coords * c.weight;
        dst_mean += c.target.coords * c.weight;
    }
    src_mean /= total;
    dst_mean /= total;

    let mut h = Matrix3::zeros();
    for c in corrs.iter().filter(|c| c.weight > 0.0) {
        let xs = c.source.coords - src_mean;
        let ys = c.target.coords - dst_mean;
        h += (xs * ys.transpose()) * c.weight;
    }
    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    let (largest, second) = {
        let mut s = [sv[0], sv[1], sv[2]];
        s.sort_by(|a, b| b.total_cmp(a));
        (s[0], s[1])
    };
    if !(largest > 0.0) {
        return Err(Error::Degenerate("coincident correspondences".into()));
    }
    if second / largest < DEGENERACY_RATIO {
        return Err(Error::Degenerate("collinear correspondences".into()));
    }
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(Error::Degenerate("SVD did not produce singular vectors".into()));
    };
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let translation = dst_mean - rotation * src_mean;
    Ok(RigidTransform::from_parts_unchecked(rotation, translation))
}

/// `Σ w_k ‖R x_k + t − y_k‖²`.
pub fn weighted_objective(corrs: &[Correspondence], transform: &RigidTransform) -> f64 {
    corrs
        .iter()
        .map(|c| c.weight * (transform.apply(&c.source) - c.target).norm_squared())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rre, rte};
    use nalgebra::Point3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_transform(rng: &mut impl Rng) -> RigidTransform {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        RigidTransform::from_axis_angle(
            axis,
            rng.random_range(-3.1..3.1),
            Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)),
        )
    }

    #[test]
    fn identity_on_matching_points() {
        let corrs: Vec<_> = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.3, 0.2, 1.0]]
            .iter()
            .map(|p| Correspondence::unit(Point3::from(*p), Point3::from(*p)))
            .collect();
        let t = weighted_kabsch(&corrs).unwrap();
        assert!((t.rotation() - Matrix3::identity()).norm() < 1e-12);
        assert!(t.translation().norm() < 1e-12);
    }

    #[test]
    fn recovers_known_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let truth = random_transform(&mut rng);
            let n = rng.random_range(3..60);
            let corrs: Vec<_> = (0..n)
                .map(|_| {
                    let p = Point3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                    Correspondence::new(p, truth.apply(&p), rng.random_range(0.1..2.0))
                })
                .collect();
            let est = weighted_kabsch(&corrs).unwrap();
            assert!((est.rotation() - truth.rotation()).norm() < 1e-9);
            assert!((est.translation() - truth.translation()).norm() < 1e-9);
            assert!(rre(&est, &truth) < 1e-7);
            assert!(rte(&est, &truth) < 1e-9);
        }
    }

    #[test]
    fn weight_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let corrs: Vec<_> = (0..20)
            .map(|_| {
                let p = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let q = p + Vector3::new(rng.random_range(-0.1..0.1), 0.5, rng.random_range(-0.1..0.1));
                Correspondence::new(p, q, rng.random_range(0.0..1.0))
            })
            .collect();
        let scaled: Vec<_> = corrs.iter().map(|c| Correspondence { weight: c.weight * 37.5, ..*c }).collect();
        let a = weighted_kabsch(&corrs).unwrap();
        let b = weighted_kabsch(&scaled).unwrap();
        assert!((a.rotation() - b.rotation()).norm() < 1e-12);
        assert!((a.translation() - b.translation()).norm() < 1e-12);
    }

    #[test]
    fn coplanar_points_are_fine_and_reflection_is_corrected() {
        let truth = RigidTransform::from_axis_angle(Vector3::new(0.0, 1.0, 1.0), 2.5, Vector3::new(1.0, 2.0, 3.0));
        let corrs: Vec<_> = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]
            .iter()
            .map(|p| {
                let p = Point3::from(*p);
                Correspondence::unit(p, truth.apply(&p))
            })
            .collect();
        let est = weighted_kabsch(&corrs).unwrap();
        assert!((est.rotation().determinant() - 1.0).abs() < 1e-12);
        assert!((est.rotation() - truth.rotation()).norm() < 1e-9);
    }

    #[test]
    fn degenerate_inputs_error() {
        let line: Vec<_> = (0..5)
            .map(|i| {
                let p = Point3::new(i as f64, 2.0 * i as f64, 0.0);
                Correspondence::unit(p, p)
            })
            .collect();
        assert!(matches!(weighted_kabsch(&line), Err(Error::Degenerate(_))));

        let same = vec![Correspondence::unit(Point3::new(1.0, 1.0, 1.0), Point3::origin()); 4];
        assert!(matches!(weighted_kabsch(&same), Err(Error::Degenerate(_))));

        let zero: Vec<_> = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
            .iter()
            .map(|p| Correspondence::new(Point3::from(*p), Point3::from(*p), 0.0))
            .collect();
        assert!(matches!(weighted_kabsch(&zero), Err(Error::Degenerate(_))));
        assert!(matches!(weighted_kabsch(&zero[..2]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn zero_weight_outliers_are_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth = random_transform(&mut rng);
        let corrs: Vec<_> = (0..40)
            .map(|i| {
                let p = Point3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                if i % 2 == 0 {
                    Correspondence::new(p, truth.apply(&p), 1.0)
                } else {
                    Correspondence::new(p, Point3::new(rng.random_range(-9.0..9.0), 0.0, 4.0), 0.0)
                }
            })
            .collect();
        let est = weighted_kabsch(&corrs).unwrap();
        assert!(rre(&est, &truth) < 1e-7 && rte(&est, &truth) < 1e-9);
    }
}
