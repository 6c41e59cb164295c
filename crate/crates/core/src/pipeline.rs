//! Full registration pipeline: features, coarse node matching, optional
//! RANSAC initialization, fine keypoint matching, dense refinement and an
//! optional ICP polish.

use std::time::Instant;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::coarse::{coarse_match, top_entries, handcrafted_features, CoarseConfig, CoarseWeights, FeatureConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::fine::{fine_match, icp_refine, ransac_hypotheses, FineConfig, FineOutput, FineWeights, IcpConfig, RansacConfig, RansacResult};
use crate::geometry::{weighted_kabsch, KdTree, Correspondence, NodeMatch, PointCloud, RigidTransform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustConfig {
    pub enabled: bool,
    /// Highest-scoring coarse matches handed to RANSAC.
    pub top: usize,
    /// Coarse matches farther than this from the RANSAC pose are dropped
    /// before the fine stage (m).
    pub prune_distance: f64,
    /// Distinct RANSAC poses compared by cloud fitness.
    pub hypotheses: usize,
    /// Nearest-neighbor distance counted as aligned in the fitness check (m).
    pub verify_distance: f64,
    /// Node-level ICP applied to each hypothesis before the fitness check.
    pub verify_icp: IcpConfig,
    pub ransac: RansacConfig,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            top: 250,
            prune_distance: 1.0,
            hypotheses: 32,
            verify_distance: 0.3,
            verify_icp: IcpConfig {
                max_iterations: 10,
                max_correspondence_distance: 1.0,
                tolerance: 1e-4,
            },
            ransac: RansacConfig {
                iterations: 10_000,
                inlier_threshold: 0.6,
                ..RansacConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolishConfig {
    pub enabled: bool,
    pub icp: IcpConfig,
}

impl Default for PolishConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            icp: IcpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub features: FeatureConfig,
    pub coarse: CoarseConfig,
    pub fine: FineConfig,
    pub robust: RobustConfig,
    pub polish: PolishConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.coarse.validate()?;
        self.fine.validate()?;
        if self.features.dim != self.coarse.dim {
            return Err(Error::InvalidInput(format!(
                "features.dim {} differs from coarse.dim {}",
                self.features.dim, self.coarse.dim
            )));
        }
        if self.robust.enabled && (self.robust.top < 3 || self.robust.hypotheses == 0 || !(self.robust.prune_distance > 0.0 && self.robust.verify_distance > 0.0)) {
            return Err(Error::InvalidInput("robust.top must be ≥ 3, robust.hypotheses ≥ 1 and robust distances positive".into()));
        }
        Ok(())
    }
}

/// Which stage produced the final pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Coarse,
    Sparse,
    Dense,
    Icp,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub features: f64,
    pub coarse: f64,
    pub fine: f64,
    pub polish: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub source_points: usize,
    pub target_points: usize,
    pub source_nodes: usize,
    pub target_nodes: usize,
    pub coarse: usize,
    pub ransac_inliers: usize,
    pub keypoints_source: usize,
    pub keypoints_target: usize,
    pub fine: usize,
    pub dense: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StagePoses {
    /// RANSAC or confidence-weighted fit on coarse matches.
    pub coarse: Option<RigidTransform>,
    pub sparse: Option<RigidTransform>,
    pub dense: Option<RigidTransform>,
    pub icp: Option<RigidTransform>,
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub transform: RigidTransform,
    pub stage: Stage,
    /// Set when the fine stage was unusable and a coarse pose is reported.
    pub fine_failed: bool,
    pub counts: Counts,
    pub timings: StageTimings,
    /// Pose after each stage that ran.
    pub poses: StagePoses,
    /// Node coordinates of the coarse matches used by the fine stage.
    pub coarse_pairs: Vec<(Point3<f64>, Point3<f64>)>,
    /// Fine virtual correspondences with their confidences.
    pub fine_correspondences: Vec<Correspondence>,
    /// Ten equal bins over `[0, 1]`.
    pub confidence_histogram: [usize; 10],
}

pub(crate) fn histogram(values: impl Iterator<Item = f64>) -> [usize; 10] {
    let mut h = [0; 10];
    for v in values {
        h[((v.clamp(0.0, 1.0) * 10.0) as usize).min(9)] += 1;
    }
    h
}

/// Configured pipeline with its frozen weights.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: PipelineConfig,
    coarse_weights: CoarseWeights,
    fine_weights: FineWeights,
}

fn coarse_pose(pairs: &[(Point3<f64>, Point3<f64>)], scores: &[f64]) -> Result<RigidTransform> {
    let corrs: Vec<Correspondence> = pairs.iter().zip(scores).map(|(&(s, t), &w)| Correspondence::new(s, t, w)).collect();
    weighted_kabsch(&corrs)
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            coarse_weights: CoarseWeights::random(&cfg.coarse)?,
            fine_weights: FineWeights::random(cfg.coarse.dim, &cfg.fine),
            cfg,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn features(&self, cloud: &PointCloud) -> Result<FeaturePyramid> {
        handcrafted_features(cloud, &self.cfg.features)
    }

    /// Refines every hypothesis by node-level ICP and keeps the one putting
    /// the most dense source points within `verify_distance` of the target;
    /// ties keep the better consensus. The winner carries its refined pose.
    fn verify(&self, hypotheses: Vec<RansacResult>, nodes: (&[Point3<f64>], &[Point3<f64>]), dense: (&[Point3<f64>], &[Point3<f64>])) -> Option<RansacResult> {
        if hypotheses.len() == 1 {
            return hypotheses.into_iter().next();
        }
        let tree = KdTree::new(dense.1);
        let d = self.cfg.robust.verify_distance;
        let fitness = |t: &RigidTransform| dense.0.iter().filter(|p| tree.nearest(&t.apply(p)).is_some_and(|n| n.distance < d)).count();
        let mut best: Option<(usize, RansacResult)> = None;
        for mut h in hypotheses {
            if let Ok(r) = icp_refine(nodes.0, nodes.1, &h.transform, &self.cfg.robust.verify_icp) {
                h.transform = r.transform;
            }
            let f = fitness(&h.transform);
            if best.as_ref().is_none_or(|(bf, _)| f > *bf) {
                best = Some((f, h));
            }
        }
        best.map(|(_, h)| h)
    }

    /// Estimates the transform mapping `source` onto `target`.
    pub fn register(&self, source: &PointCloud, target: &PointCloud) -> Result<Registration> {
        let t0 = Instant::now();
        let px = self.features(source)?;
        let py = self.features(target)?;
        let t_features = t0.elapsed().as_secs_f64();

        let coarse = coarse_match(&px, &py, &self.coarse_weights, &self.cfg.coarse, false)?;
        if coarse.matches.len() < 3 {
            return Err(Error::NoConsensus(format!("only {} coarse matches", coarse.matches.len())));
        }
        let nodes_x = &px.quarter.points;
        let nodes_y = &py.quarter.points;
        let mut counts = Counts {
            source_points: source.len(),
            target_points: target.len(),
            source_nodes: nodes_x.len(),
            target_nodes: nodes_y.len(),
            coarse: coarse.matches.len(),
            ..Counts::default()
        };
        let pairs_of = |m: &[NodeMatch]| -> Vec<(Point3<f64>, Point3<f64>)> { m.iter().map(|c| (nodes_x[c.source], nodes_y[c.target])).collect() };

        let mut matches = coarse.matches.clone();
        let mut initial = None;
        if self.cfg.robust.enabled {
            let ranked = top_entries(&coarse.scores.scores, self.cfg.robust.top);
            let corrs: Vec<Correspondence> = pairs_of(&ranked).into_iter().map(|(s, t)| Correspondence::unit(s, t)).collect();
            let hypotheses = ransac_hypotheses(&corrs, &self.cfg.robust.ransac, self.cfg.robust.hypotheses);
            if let Some(r) = hypotheses.ok().and_then(|h| self.verify(h, (nodes_x, nodes_y), (&px.half.points, &py.half.points))) {
                counts.ransac_inliers = r.inliers.len();
                // consistent mutual matches plus consistent top entries, best per source node
                let mut kept: Vec<NodeMatch> = matches
                    .iter()
                    .chain(&ranked)
                    .copied()
                    .filter(|c| (r.transform.apply(&nodes_x[c.source]) - nodes_y[c.target]).norm() < self.cfg.robust.prune_distance)
                    .collect();
                kept.sort_by(|a, b| a.source.cmp(&b.source).then(b.score.total_cmp(&a.score)).then(a.target.cmp(&b.target)));
                kept.dedup_by_key(|c| c.source);
                if kept.len() >= 3 {
                    matches = kept;
                }
                initial = Some(r.transform);
            }
        }
        let coarse_pairs = pairs_of(&matches);
        let coarse_scores: Vec<f64> = matches.iter().map(|c| c.score).collect();
        let fallback = match initial {
            Some(t) => t,
            None => coarse_pose(&coarse_pairs, &coarse_scores)?,
        };
        let t_coarse = t0.elapsed().as_secs_f64();

        let spacing = px.quarter.voxel_size;
        let fine: Option<FineOutput> = fine_match(nodes_x, nodes_y, &px.half, &py.half, &matches, spacing, &self.fine_weights, &self.cfg.fine).ok();
        let (mut transform, mut stage, fine_failed) = match fine.as_ref().and_then(|f| f.transform().map(|t| (t, f.dense.is_some()))) {
            Some((t, dense)) => (t, if dense { Stage::Dense } else { Stage::Sparse }, false),
            None => (fallback, Stage::Coarse, true),
        };
        if let Some(f) = &fine {
            counts.keypoints_source = f.keypoints_x;
            counts.keypoints_target = f.keypoints_y;
            counts.fine = f.matches.len();
            counts.dense = f.dense.as_ref().map_or(0, |d| d.dense.len());
        }
        let mut poses = StagePoses {
            coarse: Some(fallback),
            sparse: fine.as_ref().and_then(|f| f.sparse),
            dense: fine.as_ref().and_then(|f| f.dense.as_ref().map(|d| d.transform)),
            icp: None,
        };
        let t_fine = t0.elapsed().as_secs_f64();

        if self.cfg.polish.enabled {
            if let Ok(r) = icp_refine(source.points(), target.points(), &transform, &self.cfg.polish.icp) {
                transform = r.transform;
                poses.icp = Some(transform);
                stage = Stage::Icp;
            }
        }
        let t_total = t0.elapsed().as_secs_f64();

        let fine_correspondences = fine.as_ref().map(|f| f.sparse_correspondences()).unwrap_or_default();
        Ok(Registration {
            transform,
            stage,
            fine_failed,
            counts,
            timings: StageTimings {
                features: t_features,
                coarse: t_coarse - t_features,
                fine: t_fine - t_coarse,
                polish: t_total - t_fine,
                total: t_total,
            },
            confidence_histogram: histogram(fine_correspondences.iter().map(|c| c.weight)),
            poses,
            coarse_pairs,
            fine_correspondences,
        })
    }
}
