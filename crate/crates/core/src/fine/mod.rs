//! Sparse-to-dense fine matching: keypoints per coarse node, virtual
//! keypoint correspondences with consistency confidences, a weighted
//! sparse pose, then dense refinement on the 1/2 level.

mod embedding;
mod keypoints;
mod pose;

pub use embedding::{embedding_layer, graph_embed_confidence, ConfidenceMode, EmbeddingLayer, GraphEmbedding};
pub use keypoints::{
    detect_keypoints, group_patches, keypoint_to_patch, virtual_correspondence, Keypoint, KeypointDetector, KeypointPatch, VirtualMatch,
    MIN_PATCH,
};
pub use pose::{
    dense_refine, dense_weight, icp_refine, ransac_hypotheses, ransac_register, sparse_register, DenseCloud, DenseConfig, DenseResult, IcpConfig, IcpResult,
    RansacConfig, RansacResult,
};

use nalgebra::{DMatrix, Point3};
use serde::{Deserialize, Serialize};

use crate::attention::{Parameters, RngSeed, WeightInit};
use crate::coarse::PyramidLevel;
use crate::error::{Error, Result};
use crate::geometry::{Correspondence, KdTree, NodeMatch, RigidTransform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineConfig {
    /// Keypoint-to-node assignment threshold (m).
    pub r_k: f64,
    /// Fine compatibility threshold (m).
    pub sigma_d: f64,
    /// Dense search radius (m).
    pub r_d: f64,
    pub r_p: f64,
    pub r_n: f64,
    /// Inlier threshold (m) for fine-stage inlier ratios.
    pub r_f: f64,
    pub k_p: usize,
    pub k_s: usize,
    pub k_d: usize,
    pub d_e: usize,
    pub embedding_layers: usize,
    /// Dense points per node patch.
    pub patch_size: usize,
    pub descriptor_dim: usize,
    pub detector_hidden: usize,
    pub confidence_mode: ConfidenceMode,
    /// Scale `s` of the local projections `W̄ = s·I`; logits are `s²` times
    /// the descriptor dot product.
    pub local_scale: f64,
    pub dense_iterations: usize,
    pub dense: bool,
    pub seed: u64,
}

impl Default for FineConfig {
    fn default() -> Self {
        Self::synthetic()
    }
}

impl FineConfig {
    fn with(r_k: f64, sigma_d: f64, r_d: f64, r_p: f64, r_n: f64, k_p: usize) -> Self {
        Self {
            r_k,
            sigma_d,
            r_d,
            r_p,
            r_n,
            r_f: r_p,
            k_p,
            k_s: 4,
            k_d: 6,
            d_e: 64,
            embedding_layers: 3,
            patch_size: 32,
            descriptor_dim: 32,
            detector_hidden: 64,
            confidence_mode: ConfidenceMode::Bypass,
            local_scale: 10f64.sqrt(),
            dense_iterations: 2,
            dense: true,
            seed: 1234,
        }
    }

    pub fn threedmatch() -> Self {
        Self::with(0.1, 0.1, 0.15, 0.05, 0.06, 16)
    }

    pub fn kitti() -> Self {
        Self::with(1.8, 1.0, 0.75, 0.45, 0.6, 24)
    }

    pub fn nuscenes() -> Self {
        Self::with(1.8, 1.0, 1.0, 0.45, 0.6, 24)
    }

    /// Defaults for the synthetic benchmark scenes (10 m scale, 0.25 m voxels).
    pub fn synthetic() -> Self {
        Self::with(0.5, 0.3, 0.5, 0.1, 0.15, 16)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "3dmatch" => Ok(Self::threedmatch()),
            "kitti" => Ok(Self::kitti()),
            "nuscenes" => Ok(Self::nuscenes()),
            "synthetic" => Ok(Self::synthetic()),
            other => Err(Error::InvalidInput(format!("unknown fine preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_p > 0.0 && self.r_n >= self.r_p) {
            return Err(Error::InvalidInput(format!("need r_n >= r_p > 0, got r_p {} r_n {}", self.r_p, self.r_n)));
        }
        if self.k_s == 0 || self.k_s > self.k_p {
            return Err(Error::InvalidInput(format!("need 0 < k_s <= k_p, got k_s {} k_p {}", self.k_s, self.k_p)));
        }
        for (name, v) in [("r_k", self.r_k), ("sigma_d", self.sigma_d), ("r_d", self.r_d), ("r_f", self.r_f), ("local_scale", self.local_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        if self.k_d == 0 || self.patch_size < MIN_PATCH || self.descriptor_dim == 0 || self.d_e == 0 || self.detector_hidden == 0 {
            return Err(Error::InvalidInput("fine sizes must be positive and patch_size >= 3".into()));
        }
        Ok(())
    }

    pub fn dense_config(&self) -> DenseConfig {
        DenseConfig {
            radius: self.r_d,
            neighbors: self.k_d,
            iterations: self.dense_iterations,
        }
    }
}

/// Frozen fine-stage weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FineWeights {
    pub detector: KeypointDetector,
    pub sparse_q: DMatrix<f64>,
    pub sparse_k: DMatrix<f64>,
    pub dense_q: DMatrix<f64>,
    pub dense_k: DMatrix<f64>,
    pub embedding: GraphEmbedding,
}

impl FineWeights {
    pub fn random(feature_dim: usize, cfg: &FineConfig) -> Self {
        let mut init = WeightInit::new(RngSeed(cfg.seed));
        // stored weights are f32
        let s = cfg.local_scale as f32 as f64;
        Self {
            detector: KeypointDetector::random(&mut init, feature_dim, cfg.detector_hidden, cfg.descriptor_dim),
            sparse_q: DMatrix::identity(cfg.descriptor_dim, cfg.descriptor_dim) * s,
            sparse_k: DMatrix::identity(cfg.descriptor_dim, cfg.descriptor_dim) * s,
            dense_q: DMatrix::identity(feature_dim, feature_dim) * s,
            dense_k: DMatrix::identity(feature_dim, feature_dim) * s,
            embedding: GraphEmbedding::random(&mut init, cfg.descriptor_dim, cfg.d_e, cfg.embedding_layers),
        }
    }
}

impl Parameters for FineWeights {
    fn visit(&mut self, f: &mut dyn FnMut(&mut DMatrix<f64>)) {
        self.detector.visit(f);
        f(&mut self.sparse_q);
        f(&mut self.sparse_k);
        f(&mut self.dense_q);
        f(&mut self.dense_k);
        self.embedding.visit(f);
    }
}

#[derive(Debug, Clone)]
pub struct FineOutput {
    pub keypoints_x: usize,
    pub keypoints_y: usize,
    pub matches: Vec<VirtualMatch>,
    pub confidences: Vec<f64>,
    /// `None` when the sparse stage had too few correspondences.
    pub sparse: Option<RigidTransform>,
    pub dense: Option<DenseResult>,
}

impl FineOutput {
    pub fn sparse_correspondences(&self) -> Vec<Correspondence> {
        self.matches.iter().zip(&self.confidences).map(|(m, &w)| Correspondence::new(m.source, m.target, w)).collect()
    }

    /// Most refined pose available.
    pub fn transform(&self) -> Option<RigidTransform> {
        self.dense.as_ref().map(|d| d.transform).or(self.sparse)
    }
}

fn keypoints(nodes: &[Point3<f64>], dense: &PyramidLevel, w: &FineWeights, cfg: &FineConfig, node_spacing: f64) -> Result<Vec<Keypoint>> {
    let tree = KdTree::new(&dense.points);
    let patches = group_patches(nodes, &tree, cfg.patch_size);
    detect_keypoints(nodes, &patches, &dense.points, &dense.features, &w.detector, 1.0 / node_spacing)
}

/// Runs the fine stage from coarse node matches. `nodes_*` are the coarse
/// nodes the matches index into; `dense_*` the 1/2-level points and features.
pub fn fine_match(
    nodes_x: &[Point3<f64>],
    nodes_y: &[Point3<f64>],
    dense_x: &PyramidLevel,
    dense_y: &PyramidLevel,
    coarse: &[NodeMatch],
    node_spacing: f64,
    w: &FineWeights,
    cfg: &FineConfig,
) -> Result<FineOutput> {
    cfg.validate()?;
    let kx = keypoints(nodes_x, dense_x, w, cfg, node_spacing)?;
    let ky = keypoints(nodes_y, dense_y, w, cfg, node_spacing)?;
    let pairs = keypoint_to_patch(&kx, nodes_x, coarse, &ky, nodes_y, cfg.r_k, cfg.k_p)?;
    let mut matches = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let cands: Vec<&Keypoint> = pair.candidates.iter().map(|&j| &ky[j]).collect();
        matches.push(virtual_correspondence(&kx[pair.keypoint], &cands, cfg.k_s, &w.sparse_q, &w.sparse_k)?.0);
    }
    let confidences = graph_embed_confidence(&matches, cfg.sigma_d, cfg.confidence_mode, &w.embedding)?;
    let mut out = FineOutput {
        keypoints_x: kx.len(),
        keypoints_y: ky.len(),
        matches,
        confidences,
        sparse: None,
        dense: None,
    };
    if out.matches.len() < 3 {
        return Ok(out);
    }
    let pts: Vec<_> = out.matches.iter().map(|m| (m.source, m.target)).collect();
    let Ok(sparse) = sparse_register(&pts, &out.confidences) else {
        return Ok(out);
    };
    out.sparse = Some(sparse);
    if cfg.dense {
        let corrs = out.sparse_correspondences();
        out.dense = Some(dense_refine(
            DenseCloud { points: &dense_x.points, features: &dense_x.features },
            DenseCloud { points: &dense_y.points, features: &dense_y.features },
            &sparse,
            &corrs,
            &cfg.dense_config(),
            &w.dense_q,
            &w.dense_k,
        )?);
    }
    Ok(out)
}
