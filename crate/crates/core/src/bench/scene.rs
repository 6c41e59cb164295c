//! Seeded synthetic registration pairs.
//!
//! The target is a rigidly moved crop of the source with Gaussian noise and
//! uniform outliers. Overlap is measured as the fraction of source points
//! that have a target point within `2 × voxel_size` under the ground truth.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Point3, Unit, Vector3};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{KdTree, PointCloud, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    /// Height field made of random Gaussian bumps and ripples.
    RandomSurface,
    /// Ground plane, two walls and scattered boxes.
    PlanesAndBoxes,
    /// Closed, lumpy shell.
    ShellScan,
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SceneKind::RandomSurface => "random-surface",
            SceneKind::PlanesAndBoxes => "planes-and-boxes",
            SceneKind::ShellScan => "shell-scan",
        })
    }
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random-surface" => Ok(SceneKind::RandomSurface),
            "planes-and-boxes" => Ok(SceneKind::PlanesAndBoxes),
            "shell-scan" => Ok(SceneKind::ShellScan),
            other => Err(Error::InvalidInput(format!("unknown scene kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub points: usize,
    pub overlap: f64,
    /// Suites spread pair overlaps over `[overlap, overlap + overlap_spread]`.
    pub overlap_spread: f64,
    pub noise_sigma: f64,
    /// Fraction of the target cloud made of outliers.
    pub outlier_fraction: f64,
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    /// Edge length of the generated scene (m).
    pub scene_scale: f64,
    /// Voxel size used by the overlap measurement.
    pub voxel_size: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            kind: SceneKind::RandomSurface,
            points: 5000,
            overlap: 0.7,
            overlap_spread: 0.0,
            noise_sigma: 0.01,
            outlier_fraction: 0.1,
            max_rotation_deg: 60.0,
            max_translation: 2.0,
            scene_scale: 10.0,
            voxel_size: 0.25,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.overlap > 0.0 && self.overlap <= 1.0) {
            return Err(Error::InvalidInput(format!("overlap must be in (0, 1], got {}", self.overlap)));
        }
        if !(self.overlap_spread >= 0.0 && self.overlap + self.overlap_spread <= 1.0) {
            return Err(Error::InvalidInput("overlap + overlap_spread must stay within (0, 1]".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidInput("noise_sigma must be ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::InvalidInput("outlier_fraction must be in [0, 1)".into()));
        }
        if self.points < 10 {
            return Err(Error::InvalidInput("a scene needs at least 10 points".into()));
        }
        if !(self.scene_scale > 0.0 && self.voxel_size > 0.0 && self.max_translation >= 0.0 && self.max_rotation_deg >= 0.0) {
            return Err(Error::InvalidInput("scene scales must be positive".into()));
        }
        Ok(())
    }

    /// Same spec with the seed advanced for pair `index` of a suite and the
    /// overlap placed on a golden-ratio sequence over the spread.
    pub fn for_pair(&self, index: usize) -> SceneSpec {
        let phase = (index as f64 * 0.618_033_988_749_894_9).fract();
        SceneSpec {
            seed: self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64),
            overlap: self.overlap + self.overlap_spread * phase,
            overlap_spread: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub source: PointCloud,
    pub target: PointCloud,
    pub truth: RigidTransform,
    pub measured_overlap: f64,
}

fn random_surface(rng: &mut ChaCha8Rng, n: usize, l: f64) -> Vec<Point3<f64>> {
    let bumps: Vec<(f64, f64, f64, f64)> = (0..40)
        .map(|_| {
            (
                rng.random_range(0.0..l),
                rng.random_range(0.0..l),
                rng.random_range(-0.08..0.08) * l,
                rng.random_range(0.04..0.15) * l,
            )
        })
        .collect();
    let ripples: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let a: f64 = rng.random_range(0.0..TAU);
            let k = rng.random_range(1.0..3.0) * TAU / l;
            (a.cos() * k, a.sin() * k, rng.random_range(0.0..TAU), rng.random_range(0.005..0.02) * l)
        })
        .collect();
    (0..n)
        .map(|_| {
            let x = rng.random_range(0.0..l);
            let y = rng.random_range(0.0..l);
            let mut z = 0.0;
            for &(cx, cy, a, s) in &bumps {
                z += a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp();
            }
            for &(kx, ky, ph, a) in &ripples {
                z += a * (kx * x + ky * y + ph).sin();
            }
            Point3::new(x, y, z)
        })
        .collect()
}

/// Axis-aligned box faces as (corner, edge u, edge v).
fn box_faces(min: Vector3<f64>, size: Vector3<f64>, with_bottom: bool) -> Vec<(Vector3<f64>, Vector3<f64>, Vector3<f64>)> {
    let (ex, ey, ez) = (Vector3::x() * size.x, Vector3::y() * size.y, Vector3::z() * size.z);
    let mut faces = vec![
        (min + ez, ex, ey),
        (min, ex, ez),
        (min + ey, ex, ez),
        (min, ey, ez),
        (min + ex, ey, ez),
    ];
    if with_bottom {
        faces.push((min, ex, ey));
    }
    faces
}

fn planes_and_boxes(rng: &mut ChaCha8Rng, n: usize, l: f64) -> Vec<Point3<f64>> {
    let mut faces = vec![
        (Vector3::zeros(), Vector3::x() * l, Vector3::y() * l),
        (Vector3::zeros(), Vector3::x() * l, Vector3::z() * 0.3 * l),
        (Vector3::zeros(), Vector3::y() * l, Vector3::z() * 0.25 * l),
    ];
    for _ in 0..12 {
        let size = Vector3::new(rng.random_range(0.04..0.2) * l, rng.random_range(0.04..0.2) * l, rng.random_range(0.03..0.25) * l);
        let min = Vector3::new(rng.random_range(0.05..0.8) * l, rng.random_range(0.05..0.8) * l, 0.0);
        faces.extend(box_faces(min, size, false));
    }
    let areas: Vec<f64> = faces.iter().map(|(_, u, v)| u.norm() * v.norm()).collect();
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.random_range(0.0..total);
            let mut k = 0;
            while k + 1 < faces.len() && pick >= areas[k] {
                pick -= areas[k];
                k += 1;
            }
            let (o, u, v) = faces[k];
            Point3::from(o + u * rng.random_range(0.0..1.0) + v * rng.random_range(0.0..1.0))
        })
        .collect()
}

fn shell_scan(rng: &mut ChaCha8Rng, n: usize, l: f64) -> Vec<Point3<f64>> {
    let lobes: Vec<(Vector3<f64>, f64, f64)> = (0..10)
        .map(|_| {
            let d: Vector3<f64> = Vector3::from_fn(|_, _| rng.sample(StandardNormal));
            (d.normalize(), rng.random_range(-0.12..0.2), rng.random_range(2.0..8.0))
        })
        .collect();
    let r0 = 0.35 * l;
    let centre = Vector3::repeat(0.5 * l);
    (0..n)
        .map(|_| {
            let z: f64 = rng.random_range(-1.0..1.0);
            let phi: f64 = rng.random_range(0.0..TAU);
            let s = (1.0 - z * z).sqrt();
            let dir = Vector3::new(s * phi.cos(), s * phi.sin(), z);
            let mut r = 1.0;
            for (axis, a, sharp) in &lobes {
                r += a * (sharp * (dir.dot(axis) - 1.0)).exp();
            }
            Point3::from(centre + dir * (r0 * r))
        })
        .collect()
}

fn random_rotation(rng: &mut ChaCha8Rng, max_deg: f64, max_translation: f64) -> RigidTransform {
    let axis: Vector3<f64> = Vector3::from_fn(|_, _| rng.sample(StandardNormal));
    let axis = if axis.norm() > 0.0 { axis } else { Vector3::z() };
    let angle = rng.random_range(0.0..=1.0) * max_deg.to_radians();
    let dir: Vector3<f64> = Vector3::from_fn(|_, _| rng.sample(StandardNormal));
    let t = if dir.norm() > 0.0 {
        dir.normalize() * max_translation * rng.random_range(0.0f64..=1.0).cbrt()
    } else {
        Vector3::zeros()
    };
    RigidTransform::from_axis_angle(axis, angle, t)
}

/// Fraction of `source` points with a `target` point within `radius` after
/// mapping the source by `truth`.
pub fn measure_overlap(source: &[Point3<f64>], target: &KdTree, truth: &RigidTransform, radius: f64) -> f64 {
    if source.is_empty() || target.is_empty() {
        return 0.0;
    }
    let hits = source
        .iter()
        .filter(|p| target.nearest(&truth.apply(p)).is_some_and(|n| n.distance <= radius))
        .count();
    hits as f64 / source.len() as f64
}

fn half_space(points: &[Point3<f64>], dir: &Vector3<f64>, offset: f64) -> Vec<usize> {
    (0..points.len()).filter(|&i| points[i].coords.dot(dir) <= offset).collect()
}

/// Pre-drawn randomness so that every crop candidate is built the same way.
struct Perturbation {
    noise: Vec<Vector3<f64>>,
    /// Outlier positions in the unit cube, scaled into the target box.
    outliers: Vec<Vector3<f64>>,
    outlier_ratio: f64,
}

impl Perturbation {
    fn draw(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Result<Self> {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let noise = (0..spec.points)
            .map(|_| if spec.noise_sigma > 0.0 { Vector3::from_fn(|_, _| normal.sample(rng)) } else { Vector3::zeros() })
            .collect();
        let outlier_ratio = spec.outlier_fraction / (1.0 - spec.outlier_fraction);
        let max_outliers = (outlier_ratio * spec.points as f64).round() as usize;
        let outliers = (0..max_outliers).map(|_| Vector3::from_fn(|_, _| rng.random_range(0.0..=1.0))).collect();
        Ok(Self {
            noise,
            outliers,
            outlier_ratio,
        })
    }

    fn target(&self, points: &[Point3<f64>], keep: &[usize], truth: &RigidTransform) -> Vec<Point3<f64>> {
        let mut target: Vec<Point3<f64>> = keep.iter().map(|&i| truth.apply(&points[i]) + self.noise[i]).collect();
        let count = ((self.outlier_ratio * keep.len() as f64).round() as usize).min(self.outliers.len());
        if count > 0 {
            let (lo, hi) = target.iter().fold(
                (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
                |(lo, hi), p| (lo.inf(&p.coords), hi.sup(&p.coords)),
            );
            let span = hi - lo;
            target.extend(self.outliers[..count].iter().map(|u| Point3::from(lo + u.component_mul(&span))));
        }
        target
    }
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let l = spec.scene_scale;
    let points = match spec.kind {
        SceneKind::RandomSurface => random_surface(&mut rng, spec.points, l),
        SceneKind::PlanesAndBoxes => planes_and_boxes(&mut rng, spec.points, l),
        SceneKind::ShellScan => shell_scan(&mut rng, spec.points, l),
    };
    let truth = random_rotation(&mut rng, spec.max_rotation_deg, spec.max_translation);
    let radius = 2.0 * spec.voxel_size;
    let perturb = Perturbation::draw(&mut rng, spec)?;
    let overlap_of = |keep: &[usize]| {
        let t = perturb.target(&points, keep, &truth);
        measure_overlap(&points, &KdTree::new(&t), &truth, radius)
    };

    let keep: Vec<usize> = if spec.overlap >= 1.0 {
        (0..points.len()).collect()
    } else {
        let dir: Vector3<f64> = match spec.kind {
            SceneKind::ShellScan => Vector3::from_fn(|_, _| rng.sample(StandardNormal)),
            _ => {
                let a: f64 = rng.random_range(0.0..TAU);
                Vector3::new(a.cos(), a.sin(), 0.0)
            }
        };
        let dir = Unit::new_normalize(dir).into_inner();
        let (mut lo, mut hi) = points
            .iter()
            .map(|p| p.coords.dot(&dir))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        for _ in 0..30 {
            let mid = 0.5 * (lo + hi);
            if overlap_of(&half_space(&points, &dir, mid)) < spec.overlap {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        half_space(&points, &dir, hi)
    };
    if keep.len() < 3 {
        return Err(Error::InvalidInput("crop left fewer than 3 target points".into()));
    }
    let mut target = perturb.target(&points, &keep, &truth);
    if target.len() > keep.len() {
        target.shuffle(&mut rng);
    }
    let measured = measure_overlap(&points, &KdTree::new(&target), &truth, radius);
    if (measured - spec.overlap).abs() > 0.05 {
        return Err(Error::InvalidInput(format!(
            "requested overlap {:.3} is unattainable for this geometry (measured {measured:.3})",
            spec.overlap
        )));
    }
    Ok(Scene {
        source: PointCloud::new(points)?,
        target: PointCloud::new(target)?,
        truth,
        measured_overlap: measured,
    })
}
