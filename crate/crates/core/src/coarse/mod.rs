//! Node-level matching: feature pyramid, attention blocks guided by
//! geometric consistency, and gated dual-softmax correspondence extraction.

mod features;
mod matching;

pub use features::{handcrafted_features, project_descriptors, raw_descriptors, shape_features, FeatureConfig, FeaturePyramid, PyramidLevel};
pub use matching::{dual_softmax, final_match, gated_scores, layer_match_scores, mutual_topk, overlap_scores, row_argmax, top_entries, write_score_matrix, MatchScores};

use nalgebra::{DMatrix, Point3};
use serde::{Deserialize, Serialize};

use crate::attention::{
    linear_cross_attention, masked_attention_with_probs, rotary_self_attention, vanilla_attention, AttentionWeights, KeySet, Mlp,
    Parameters, RngSeed, RotaryEmbedding3D, WeightInit,
};
use crate::consistency::{build_compatibility, build_spot, consistency_confidence, sample_salient, SalientSample, SamplingConfig};
use crate::error::{Error, Result};
use crate::geometry::{KdTree, NodeMatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoarseConfig {
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub overlap_hidden: usize,
    pub sigma_c: f64,
    pub degree_threshold: f64,
    pub salient_count: usize,
    pub seed_count: usize,
    pub neighborhood_size: usize,
    /// Similarities are computed on unit features divided by `√temperature`.
    pub match_temperature: f64,
    /// Scale of every residual update inside the blocks.
    pub residual_gain: f64,
    /// Wavelength scale (m) for the rotary frequencies.
    pub rotary_scale: f64,
    pub initial_cross_attention: bool,
    pub seed: u64,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            dim: 128,
            heads: 4,
            overlap_hidden: 128,
            sigma_c: 1.5,
            degree_threshold: 0.3,
            salient_count: 48,
            seed_count: 4,
            neighborhood_size: 12,
            match_temperature: 0.1,
            residual_gain: 0.5,
            rotary_scale: 10.0,
            initial_cross_attention: true,
            seed: 42,
        }
    }
}

impl CoarseConfig {
    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            degree_threshold: self.degree_threshold,
            salient_count: self.salient_count,
            seed_count: self.seed_count,
            neighborhood_size: self.neighborhood_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::InvalidInput("coarse.blocks must be ≥ 1".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 || self.dim % 2 != 0 {
            return Err(Error::InvalidInput("coarse.dim must be even and divisible by coarse.heads".into()));
        }
        if !(self.sigma_c > 0.0 && self.match_temperature > 0.0 && self.rotary_scale > 0.0) {
            return Err(Error::InvalidInput("sigma_c, match_temperature and rotary_scale must be positive".into()));
        }
        self.sampling().validate()
    }
}

/// Frozen parameters of one attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub rotary: RotaryEmbedding3D,
    pub self_eighth: AttentionWeights,
    pub cross_eighth: AttentionWeights,
    pub fuse_up: Mlp,
    pub fuse_down: Mlp,
    pub consistency_self: AttentionWeights,
    pub spot_cross: AttentionWeights,
}

impl BlockWeights {
    /// Random queries/keys with identity values, so that an untrained block
    /// aggregates features instead of scrambling them.
    pub fn random(init: &mut WeightInit, cfg: &CoarseConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            rotary: RotaryEmbedding3D::random(init, d, cfg.rotary_scale)?,
            self_eighth: AttentionWeights::identity_values(init, d, cfg.heads)?,
            cross_eighth: AttentionWeights::identity_values(init, d, cfg.heads)?,
            fuse_up: Mlp::random(init, d, d, d),
            fuse_down: Mlp::random(init, d, d, d),
            consistency_self: AttentionWeights::identity_values(init, d, cfg.heads)?,
            spot_cross: AttentionWeights::identity_values(init, d, cfg.heads)?,
        })
    }

    /// Zero values and zero fusion MLPs: the block leaves features unchanged.
    pub fn passthrough(init: &mut WeightInit, cfg: &CoarseConfig) -> Result<Self> {
        let d = cfg.dim;
        let zero_values = |init: &mut WeightInit| {
            AttentionWeights::new(init.projection(d, d), init.projection(d, d), DMatrix::zeros(d, d), cfg.heads, None)
        };
        Ok(Self {
            rotary: RotaryEmbedding3D::random(init, d, cfg.rotary_scale)?,
            self_eighth: zero_values(init)?,
            cross_eighth: zero_values(init)?,
            fuse_up: Mlp::zeros(d, d, d),
            fuse_down: Mlp::zeros(d, d, d),
            consistency_self: zero_values(init)?,
            spot_cross: zero_values(init)?,
        })
    }
}

impl Parameters for BlockWeights {
    fn visit(&mut self, f: &mut dyn FnMut(&mut DMatrix<f64>)) {
        self.rotary.visit(f);
        self.self_eighth.visit(f);
        self.cross_eighth.visit(f);
        self.fuse_up.visit(f);
        self.fuse_down.visit(f);
        self.consistency_self.visit(f);
        self.spot_cross.visit(f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseWeights {
    pub initial_cross: AttentionWeights,
    pub blocks: Vec<BlockWeights>,
    pub overlap_head: Mlp,
}

impl CoarseWeights {
    /// Seeded weights. The overlap head's output layer starts at zero, so
    /// untrained overlap scores are a uniform 0.5.
    pub fn random(cfg: &CoarseConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = WeightInit::new(RngSeed(cfg.seed));
        let initial_cross = AttentionWeights::identity_values(&mut init, cfg.dim, cfg.heads)?;
        let blocks = (0..cfg.blocks).map(|_| BlockWeights::random(&mut init, cfg)).collect::<Result<_>>()?;
        let mut overlap_head = Mlp::random(&mut init, cfg.dim, cfg.overlap_hidden, 1);
        overlap_head.output = crate::attention::Linear::zeros(cfg.overlap_hidden, 1);
        Ok(Self {
            initial_cross,
            blocks,
            overlap_head,
        })
    }
}

impl Parameters for CoarseWeights {
    fn visit(&mut self, f: &mut dyn FnMut(&mut DMatrix<f64>)) {
        self.initial_cross.visit(f);
        for b in &mut self.blocks {
            b.visit(f);
        }
        self.overlap_head.visit(f);
    }
}

/// Interpolation sources for each 1/8 node: its 3 nearest 1/4 nodes with
/// normalised inverse-distance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FuseMaps {
    pub up: Vec<usize>,
    pub down: Vec<Vec<(usize, f64)>>,
}

const INTERP_EPS: f64 = 1e-9;

impl FuseMaps {
    pub fn new(quarter: &[Point3<f64>], eighth: &[Point3<f64>], quarter_to_eighth: &[usize]) -> Self {
        let tree = KdTree::new(quarter);
        let down = eighth
            .iter()
            .map(|p| {
                let nn = tree.knn(p, 3);
                let inv: Vec<f64> = nn.iter().map(|n| 1.0 / n.distance.max(INTERP_EPS)).collect();
                let total: f64 = inv.iter().sum();
                nn.iter().zip(inv).map(|(n, w)| (n.index, w / total)).collect()
            })
            .collect();
        Self {
            up: quarter_to_eighth.to_vec(),
            down,
        }
    }

    pub fn from_pyramid(p: &FeaturePyramid) -> Self {
        Self::new(&p.quarter.points, &p.eighth.points, &p.quarter_to_eighth)
    }
}

/// Residual exchange between the 1/4 and 1/8 levels: nearest up-sampling of
/// coarse features into the finer level and inverse-distance down-sampling
/// the other way, each through an MLP.
pub fn multiscale_fuse(
    quarter: &DMatrix<f64>,
    eighth: &DMatrix<f64>,
    maps: &FuseMaps,
    up: &Mlp,
    down: &Mlp,
    gain: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if maps.up.len() != quarter.nrows() || maps.down.len() != eighth.nrows() {
        return Err(Error::DimensionMismatch("fusion maps do not match level sizes".into()));
    }
    let d = quarter.ncols();
    let upsampled = DMatrix::from_fn(quarter.nrows(), d, |r, c| eighth[(maps.up[r], c)]);
    let mut downsampled = DMatrix::zeros(eighth.nrows(), d);
    for (e, srcs) in maps.down.iter().enumerate() {
        for &(q, w) in srcs {
            let mut row = downsampled.row_mut(e);
            row += quarter.row(q) * w;
        }
    }
    let fq = quarter + up.forward(&upsampled) * gain;
    let fe = eighth + down.forward(&downsampled) * gain;
    Ok((fq, fe))
}

fn normalized_rows(f: &DMatrix<f64>, temperature: f64) -> DMatrix<f64> {
    let s = 1.0 / temperature.sqrt();
    let mut out = f.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row *= s / n;
        }
    }
    out
}

/// Similarity-ready features: unit rows scaled by `1/√τ`.
pub fn match_features(f: &DMatrix<f64>, temperature: f64) -> DMatrix<f64> {
    normalized_rows(f, temperature)
}

/// Per-side mutable state of the block stack.
#[derive(Debug, Clone)]
pub struct SideState {
    pub quarter_points: Vec<Point3<f64>>,
    pub eighth_points: Vec<Point3<f64>>,
    pub quarter: DMatrix<f64>,
    pub eighth: DMatrix<f64>,
    maps: FuseMaps,
    neighbors: Vec<Vec<usize>>,
    tree: KdTree,
}

impl SideState {
    pub fn new(p: &FeaturePyramid, neighborhood_size: usize) -> Self {
        let tree = KdTree::new(&p.quarter.points);
        let neighbors = p
            .quarter
            .points
            .iter()
            .map(|q| tree.knn(q, neighborhood_size).into_iter().map(|n| n.index).collect())
            .collect();
        Self {
            quarter_points: p.quarter.points.clone(),
            eighth_points: p.eighth.points.clone(),
            quarter: p.quarter.features.clone(),
            eighth: p.eighth.features.clone(),
            maps: FuseMaps::from_pyramid(p),
            neighbors,
            tree,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CastState {
    pub x: SideState,
    pub y: SideState,
}

/// What one block saw and decided.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    /// Layer matching scores on the 1/4 level.
    pub scores: DMatrix<f64>,
    pub salient_x: SalientSample,
    pub salient_y: SalientSample,
    pub spots_x: Vec<Vec<usize>>,
    pub spots_y: Vec<Vec<usize>>,
    /// Largest attention mass placed outside a spot (only when audited).
    pub spot_leak: Option<f64>,
}

struct SideConsistency {
    salient: SalientSample,
    spots: Vec<Vec<usize>>,
}

/// Degree-based key selection and spot masks for queries on `own`, whose
/// current correspondences point into `other`.
fn consistency_for_side(
    own: &SideState,
    other: &SideState,
    corrs: &[(usize, f64)],
    cfg: &CoarseConfig,
) -> Result<SideConsistency> {
    let sampling = cfg.sampling();
    let pairs: Vec<_> = corrs
        .iter()
        .enumerate()
        .map(|(i, &(j, _))| (own.quarter_points[i], other.quarter_points[j]))
        .collect();
    let scores: Vec<f64> = corrs.iter().map(|c| c.1).collect();
    let graph = build_compatibility(&pairs, cfg.sigma_c)?;
    let salient = sample_salient(&scores, &graph, &sampling)?;
    let max_degree = graph.max_degree();
    let confidences: Vec<f64> = scores
        .iter()
        .zip(graph.degrees().iter())
        .map(|(&s, &d)| consistency_confidence(s, d, max_degree))
        .collect();
    let layer_corrs: Vec<usize> = corrs.iter().map(|c| c.0).collect();
    let spots = (0..own.quarter_points.len())
        .map(|i| build_spot(i, &own.neighbors[i], &layer_corrs, &confidences, &other.tree, &sampling))
        .collect::<Result<Vec<_>>>()?;
    Ok(SideConsistency { salient, spots })
}

fn max_leak(probs: &[DMatrix<f64>], allowed: &[Vec<usize>]) -> f64 {
    let mut worst: f64 = 0.0;
    for p in probs {
        for (i, keys) in allowed.iter().enumerate() {
            let inside: f64 = keys.iter().map(|&k| p[(i, k)]).sum();
            worst = worst.max((p.row(i).sum() - inside).abs());
        }
    }
    worst
}

/// One block: rotary self- and cross-attention on 1/8, multi-scale fusion,
/// layer scores with compatibility on the row-argmax correspondences,
/// consistency-aware self-attention and spot-guided cross-attention on 1/4.
pub fn cast_block(state: &mut CastState, w: &BlockWeights, cfg: &CoarseConfig, audit: bool) -> Result<BlockTrace> {
    let g = cfg.residual_gain;
    let (x, y) = (&mut state.x, &mut state.y);

    let sx = rotary_self_attention(&x.eighth, &x.eighth_points, &x.eighth, &x.eighth_points, &w.self_eighth, &w.rotary)?;
    let sy = rotary_self_attention(&y.eighth, &y.eighth_points, &y.eighth, &y.eighth_points, &w.self_eighth, &w.rotary)?;
    x.eighth += sx * g;
    y.eighth += sy * g;
    let cx = vanilla_attention(&x.eighth, &y.eighth, &w.cross_eighth)?;
    let cy = vanilla_attention(&y.eighth, &x.eighth, &w.cross_eighth)?;
    x.eighth += cx * g;
    y.eighth += cy * g;

    for side in [&mut *x, &mut *y] {
        let (q, e) = multiscale_fuse(&side.quarter, &side.eighth, &side.maps, &w.fuse_up, &w.fuse_down, g)?;
        side.quarter = q;
        side.eighth = e;
    }

    let (_, p) = layer_match_scores(&match_features(&x.quarter, cfg.match_temperature), &match_features(&y.quarter, cfg.match_temperature))?;
    let corr_x = row_argmax(&p);
    let corr_y = row_argmax(&p.transpose());
    let cons_x = consistency_for_side(x, y, &corr_x, cfg)?;
    let cons_y = consistency_for_side(y, x, &corr_y, cfg)?;

    let ax = masked_attention_with_probs(&x.quarter, &x.quarter, KeySet::Shared(&cons_x.salient.indices), &w.consistency_self, false)?;
    let ay = masked_attention_with_probs(&y.quarter, &y.quarter, KeySet::Shared(&cons_y.salient.indices), &w.consistency_self, false)?;
    x.quarter += ax.output * g;
    y.quarter += ay.output * g;

    let bx = masked_attention_with_probs(&x.quarter, &y.quarter, KeySet::PerQuery(&cons_x.spots), &w.spot_cross, audit)?;
    let by = masked_attention_with_probs(&y.quarter, &x.quarter, KeySet::PerQuery(&cons_y.spots), &w.spot_cross, audit)?;
    let spot_leak = audit.then(|| max_leak(&bx.probs, &cons_x.spots).max(max_leak(&by.probs, &cons_y.spots)));
    x.quarter += bx.output * g;
    y.quarter += by.output * g;

    Ok(BlockTrace {
        scores: p,
        salient_x: cons_x.salient,
        salient_y: cons_y.salient,
        spots_x: cons_x.spots,
        spots_y: cons_y.spots,
        spot_leak,
    })
}

#[derive(Debug, Clone)]
pub struct CoarseOutput {
    pub scores: MatchScores,
    pub matches: Vec<NodeMatch>,
    pub traces: Vec<BlockTrace>,
    /// Final 1/4-level features of both clouds.
    pub features_x: DMatrix<f64>,
    pub features_y: DMatrix<f64>,
}

impl CoarseOutput {
    /// Per-layer matching scores `P^(1..L)`.
    pub fn layer_scores(&self) -> Vec<&DMatrix<f64>> {
        self.traces.iter().map(|t| &t.scores).collect()
    }

    /// Blocks whose salient sampling fell back to raw degrees.
    pub fn fallback_count(&self) -> usize {
        self.traces
            .iter()
            .map(|t| t.salient_x.fallback as usize + t.salient_y.fallback as usize)
            .sum()
    }
}

/// The whole node-matching stage for one pair.
pub fn coarse_match(px: &FeaturePyramid, py: &FeaturePyramid, w: &CoarseWeights, cfg: &CoarseConfig, audit: bool) -> Result<CoarseOutput> {
    cfg.validate()?;
    if px.dim() != cfg.dim || py.dim() != cfg.dim {
        return Err(Error::DimensionMismatch(format!("pyramid width {} / {} vs coarse.dim {}", px.dim(), py.dim(), cfg.dim)));
    }
    if w.blocks.len() != cfg.blocks {
        return Err(Error::DimensionMismatch(format!("{} block weights for {} blocks", w.blocks.len(), cfg.blocks)));
    }
    let mut state = CastState {
        x: SideState::new(px, cfg.neighborhood_size),
        y: SideState::new(py, cfg.neighborhood_size),
    };
    if cfg.initial_cross_attention {
        let lx = linear_cross_attention(&state.x.quarter, &state.y.quarter, &w.initial_cross)?;
        let ly = linear_cross_attention(&state.y.quarter, &state.x.quarter, &w.initial_cross)?;
        state.x.quarter += lx * cfg.residual_gain;
        state.y.quarter += ly * cfg.residual_gain;
    }
    let traces = w
        .blocks
        .iter()
        .map(|b| cast_block(&mut state, b, cfg, audit))
        .collect::<Result<Vec<_>>>()?;
    let scores = final_match(
        &match_features(&state.x.quarter, cfg.match_temperature),
        &match_features(&state.y.quarter, cfg.match_temperature),
        &w.overlap_head,
    )?;
    let matches = mutual_topk(&scores.scores);
    Ok(CoarseOutput {
        scores,
        matches,
        traces,
        features_x: state.x.quarter,
        features_y: state.y.quarter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointCloud;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(seed: u64, shift: f64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..3000)
            .map(|_| {
                let x: f64 = rng.random_range(0.0..8.0);
                let y: f64 = rng.random_range(0.0..8.0);
                Point3::new(x + shift, y, (x * 0.9).sin() * 0.6 + (y * 1.3).cos() * 0.4 + (x * y * 0.2).sin() * 0.3)
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    fn small_cfg() -> CoarseConfig {
        CoarseConfig { dim: 32, heads: 4, overlap_hidden: 16, ..Default::default() }
    }

    fn feature_cfg() -> FeatureConfig {
        FeatureConfig { dim: 32, ..Default::default() }
    }

    #[test]
    fn zero_mlp_fusion_is_identity() {
        let mut init = WeightInit::new(RngSeed(1));
        let q = init.normal(6, 4, 1.0);
        let e = init.normal(2, 4, 1.0);
        let pq: Vec<_> = (0..6).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let pe = vec![Point3::new(1.0, 0.0, 0.0), Point3::new(4.0, 0.0, 0.0)];
        let maps = FuseMaps::new(&pq, &pe, &[0, 0, 0, 1, 1, 1]);
        let z = Mlp::zeros(4, 4, 4);
        let (fq, fe) = multiscale_fuse(&q, &e, &maps, &z, &z, 1.0).unwrap();
        assert_eq!((fq, fe), (q, e));
    }

    #[test]
    fn interpolation_weights_are_inverse_distance() {
        let pq = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0), Point3::new(3.0, 0.0, 0.0), Point3::new(9.0, 0.0, 0.0)];
        let pe = vec![Point3::new(0.5, 0.0, 0.0)];
        let maps = FuseMaps::new(&pq, &pe, &[0, 0, 0, 0]);
        let inv = [2.0, 2.0, 1.0 / 2.5];
        let total: f64 = inv.iter().sum();
        let got = &maps.down[0];
        assert_eq!(got.iter().map(|c| c.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        for (k, (_, w)) in got.iter().enumerate() {
            assert!((w - inv[k] / total).abs() < 1e-12);
        }
    }

    #[test]
    fn single_coarse_node_broadcasts() {
        let mut init = WeightInit::new(RngSeed(2));
        let q = init.normal(5, 4, 1.0);
        let e = init.normal(1, 4, 1.0);
        let pq: Vec<_> = (0..5).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let maps = FuseMaps::new(&pq, &[Point3::new(2.0, 0.0, 0.0)], &[0; 5]);
        let up = Mlp::random(&mut init, 4, 4, 4);
        let (fq, _) = multiscale_fuse(&q, &e, &maps, &up, &Mlp::zeros(4, 4, 4), 1.0).unwrap();
        let delta = &fq - &q;
        for r in 1..5 {
            assert!((delta.row(r) - delta.row(0)).norm() < 1e-12);
        }
    }

    #[test]
    fn passthrough_block_keeps_features() {
        let cfg = small_cfg();
        let px = handcrafted_features(&cloud(1, 0.0), &feature_cfg()).unwrap();
        let py = handcrafted_features(&cloud(1, 0.5), &feature_cfg()).unwrap();
        let mut init = WeightInit::new(RngSeed(3));
        let block = BlockWeights::passthrough(&mut init, &cfg).unwrap();
        let mut state = CastState { x: SideState::new(&px, 12), y: SideState::new(&py, 12) };
        let trace = cast_block(&mut state, &block, &cfg, true).unwrap();
        assert_eq!(state.x.quarter, px.quarter.features);
        assert_eq!(state.y.eighth, py.eighth.features);
        let (_, p0) = layer_match_scores(
            &match_features(&px.quarter.features, cfg.match_temperature),
            &match_features(&py.quarter.features, cfg.match_temperature),
        )
        .unwrap();
        assert_eq!(trace.scores, p0);
    }

    #[test]
    fn spot_masks_hold_and_keys_are_bounded() {
        let cfg = small_cfg();
        let px = handcrafted_features(&cloud(4, 0.0), &feature_cfg()).unwrap();
        let py = handcrafted_features(&cloud(4, 1.0), &feature_cfg()).unwrap();
        let w = CoarseWeights::random(&cfg).unwrap();
        let out = coarse_match(&px, &py, &w, &cfg, true).unwrap();
        assert_eq!(out.traces.len(), 3);
        for t in &out.traces {
            assert_eq!(t.spot_leak, Some(0.0));
            assert!(t.salient_x.indices.len() <= 48 && t.salient_y.indices.len() <= 48);
        }
        let mut seen = std::collections::HashSet::new();
        for m in &out.matches {
            assert!(seen.insert(m.target));
        }
        let p = &out.scores.scores;
        for i in 0..p.nrows() {
            for j in 0..p.ncols() {
                assert!(p[(i, j)] >= 0.0 && p[(i, j)] <= out.scores.overlap_x[i] * out.scores.overlap_y[j] + 1e-15);
            }
        }
        let again = coarse_match(&px, &py, &w, &cfg, false).unwrap();
        assert_eq!(again.matches, out.matches);
    }

    #[test]
    fn weights_roundtrip_through_store() {
        let cfg = small_cfg();
        let mut w = CoarseWeights::random(&cfg).unwrap();
        let bytes = crate::attention::encode_weights(RngSeed(cfg.seed), &mut w);
        let mut other = CoarseWeights::random(&CoarseConfig { seed: 7, ..small_cfg() }).unwrap();
        crate::attention::decode_weights(&bytes, &mut other).unwrap();
        assert_eq!(other, w);
    }
}
