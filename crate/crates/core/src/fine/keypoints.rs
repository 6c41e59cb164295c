//! Attentive keypoints per patch and keypoint-to-patch virtual matches.

use nalgebra::{DMatrix, DVector, Point3, Vector3};

use crate::attention::{single_head_local_attention, softmax, Linear, LocalMatch, Mlp, Parameters, WeightInit};
use crate::error::{Error, Result};
use crate::geometry::{KdTree, NodeMatch};

/// Smallest patch the detector accepts.
pub const MIN_PATCH: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub position: Point3<f64>,
    pub descriptor: DVector<f64>,
    /// Predicted spatial uncertainty (m), always positive. Not consumed by
    /// the forward pipeline.
    pub uncertainty: f64,
    /// Node whose patch produced the keypoint.
    pub node: usize,
}

/// Shared MLP scoring every patch member from
/// `[(x_j − x_node)·s, ‖x_j − x_node‖·s, f_j]`, with `s` the inverse patch
/// scale.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointDetector {
    pub scorer: Mlp,
    pub descriptor: Linear,
    pub uncertainty: Linear,
}

impl KeypointDetector {
    pub fn random(init: &mut WeightInit, feature_dim: usize, hidden: usize, descriptor_dim: usize) -> Self {
        Self {
            scorer: Mlp::random(init, 4 + feature_dim, hidden, 1),
            descriptor: Linear::random(init, feature_dim, descriptor_dim),
            uncertainty: Linear::random(init, feature_dim, 1),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.descriptor.fan_in()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptor.fan_out()
    }

    /// Per-member attention logits of one patch.
    pub fn logits(&self, node: &Point3<f64>, members: &[Point3<f64>], features: &DMatrix<f64>, coord_scale: f64) -> DMatrix<f64> {
        let d = features.ncols();
        let input = DMatrix::from_fn(members.len(), 4 + d, |r, c| {
            let rel = (members[r] - node) * coord_scale;
            match c {
                0..=2 => rel[c],
                3 => rel.norm(),
                _ => features[(r, c - 4)],
            }
        });
        self.scorer.forward(&input)
    }

    /// Keypoint from pre-computed logits.
    pub fn pool(&self, node: usize, members: &[Point3<f64>], features: &DMatrix<f64>, logits: &[f64]) -> Keypoint {
        let w = softmax(logits);
        let mut pos = Vector3::zeros();
        let mut pooled = DMatrix::zeros(1, features.ncols());
        for (k, wk) in w.iter().enumerate() {
            pos += members[k].coords * *wk;
            pooled += features.row(k) * *wk;
        }
        let mut descriptor: DVector<f64> = self.descriptor.forward(&pooled).row(0).transpose();
        let n = descriptor.norm();
        if n > 0.0 {
            descriptor /= n;
        }
        let u = self.uncertainty.forward(&pooled)[(0, 0)];
        Keypoint {
            position: Point3::from(pos),
            descriptor,
            uncertainty: softplus(u).max(f64::MIN_POSITIVE),
            node,
        }
    }
}

impl Parameters for KeypointDetector {
    fn visit(&mut self, f: &mut dyn FnMut(&mut DMatrix<f64>)) {
        self.scorer.visit(f);
        self.descriptor.visit(f);
        self.uncertainty.visit(f);
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Members of each node's patch: its `k` nearest dense points.
pub fn group_patches(nodes: &[Point3<f64>], dense: &KdTree, k: usize) -> Vec<Vec<usize>> {
    nodes.iter().map(|n| dense.knn(n, k).into_iter().map(|nb| nb.index).collect()).collect()
}

/// One keypoint per patch with at least [`MIN_PATCH`] members.
pub fn detect_keypoints(
    nodes: &[Point3<f64>],
    patches: &[Vec<usize>],
    dense_points: &[Point3<f64>],
    dense_features: &DMatrix<f64>,
    detector: &KeypointDetector,
    coord_scale: f64,
) -> Result<Vec<Keypoint>> {
    if nodes.len() != patches.len() {
        return Err(Error::DimensionMismatch(format!("{} patches for {} nodes", patches.len(), nodes.len())));
    }
    if dense_features.nrows() != dense_points.len() || dense_features.ncols() != detector.feature_dim() {
        return Err(Error::DimensionMismatch("dense features do not fit the detector".into()));
    }
    let mut out = Vec::with_capacity(nodes.len());
    for (i, members) in patches.iter().enumerate() {
        if members.len() < MIN_PATCH {
            continue;
        }
        let pts: Vec<Point3<f64>> = members.iter().map(|&m| dense_points[m]).collect();
        let feats = DMatrix::from_fn(members.len(), dense_features.ncols(), |r, c| dense_features[(members[r], c)]);
        let logits = detector.logits(&nodes[i], &pts, &feats, coord_scale);
        out.push(detector.pool(i, &pts, &feats, logits.column(0).as_slice()));
    }
    Ok(out)
}

/// A source keypoint and the target keypoints it may match.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointPatch {
    pub keypoint: usize,
    pub source_node: usize,
    pub target_node: usize,
    /// Indices into the target keypoints, nearest to the target node first.
    pub candidates: Vec<usize>,
}

/// Assigns each source keypoint to its nearest source node within `r_k`;
/// if that node is matched, the `k_p` target keypoints nearest to the
/// matched target node become its candidates.
pub fn keypoint_to_patch(
    keypoints_x: &[Keypoint],
    nodes_x: &[Point3<f64>],
    coarse: &[NodeMatch],
    keypoints_y: &[Keypoint],
    nodes_y: &[Point3<f64>],
    r_k: f64,
    k_p: usize,
) -> Result<Vec<KeypointPatch>> {
    if coarse.is_empty() {
        return Err(Error::Empty("coarse correspondence set".into()));
    }
    if nodes_x.is_empty() || keypoints_y.is_empty() {
        return Ok(Vec::new());
    }
    let mut matched = vec![None; nodes_x.len()];
    for m in coarse {
        if m.source >= nodes_x.len() || m.target >= nodes_y.len() {
            return Err(Error::InvalidInput(format!("coarse match ({}, {}) out of range", m.source, m.target)));
        }
        matched[m.source] = Some(m.target);
    }
    let node_tree = KdTree::new(nodes_x);
    let ky: Vec<Point3<f64>> = keypoints_y.iter().map(|k| k.position).collect();
    let ky_tree = KdTree::new(&ky);
    let mut patch_cache: Vec<Option<Vec<usize>>> = vec![None; nodes_y.len()];
    let mut out = Vec::new();
    for (i, kp) in keypoints_x.iter().enumerate() {
        let nearest = node_tree.nearest(&kp.position).expect("non-empty");
        if nearest.distance >= r_k {
            continue;
        }
        let Some(t) = matched[nearest.index] else {
            continue;
        };
        let candidates = patch_cache[t]
            .get_or_insert_with(|| ky_tree.knn(&nodes_y[t], k_p).into_iter().map(|n| n.index).collect())
            .clone();
        out.push(KeypointPatch {
            keypoint: i,
            source_node: nearest.index,
            target_node: t,
            candidates,
        });
    }
    Ok(out)
}

/// Keypoint correspondence with a sub-resolution target.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualMatch {
    pub source: Point3<f64>,
    pub target: Point3<f64>,
    pub source_descriptor: DVector<f64>,
    pub target_descriptor: DVector<f64>,
}

/// Indices of the `k` largest values, ties to the lower index.
pub(crate) fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Restricts the candidates to the `k_s` most similar descriptors, then
/// attends over them with a single head.
pub fn virtual_correspondence(
    query: &Keypoint,
    candidates: &[&Keypoint],
    k_s: usize,
    w_q: &DMatrix<f64>,
    w_k: &DMatrix<f64>,
) -> Result<(VirtualMatch, LocalMatch)> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate patch".into()));
    }
    let sims: Vec<f64> = candidates.iter().map(|c| c.descriptor.dot(&query.descriptor)).collect();
    let chosen: Vec<(Point3<f64>, DVector<f64>)> = top_k(&sims, k_s.max(1))
        .into_iter()
        .map(|j| (candidates[j].position, candidates[j].descriptor.clone()))
        .collect();
    let local = single_head_local_attention(&query.descriptor, &chosen, w_q, w_k)?;
    Ok((
        VirtualMatch {
            source: query.position,
            target: local.point,
            source_descriptor: query.descriptor.clone(),
            target_descriptor: local.descriptor.clone(),
        },
        local,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::RngSeed;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn detector(d: usize) -> KeypointDetector {
        KeypointDetector::random(&mut WeightInit::new(RngSeed(3)), d, 16, 8)
    }

    fn patch(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3<f64>> {
        (0..n).map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.2..0.2))).collect()
    }

    #[test]
    fn uniform_logits_give_centroid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = patch(&mut rng, 32);
        let det = detector(5);
        let feats = DMatrix::from_element(32, 5, 0.2);
        let kp = det.pool(0, &pts, &feats, &[0.0; 32]);
        let centroid: Vector3<f64> = pts.iter().map(|p| p.coords).sum::<Vector3<f64>>() / 32.0;
        assert!((kp.position.coords - centroid).norm() < 1e-12);
        assert!(kp.uncertainty > 0.0);
    }

    #[test]
    fn dominant_logit_selects_member() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = patch(&mut rng, 32);
        let mut logits = vec![0.0; 32];
        logits[7] = 40.0;
        let kp = detector(5).pool(0, &pts, &DMatrix::from_element(32, 5, 0.1), &logits);
        assert!((kp.position - pts[7]).norm() < 1e-3);
    }

    #[test]
    fn keypoints_stay_in_patch_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dense = patch(&mut rng, 300);
        let feats = WeightInit::new(RngSeed(1)).normal(300, 5, 1.0);
        let nodes: Vec<_> = dense.iter().step_by(30).copied().collect();
        let tree = KdTree::new(&dense);
        let mut patches = group_patches(&nodes, &tree, 32);
        patches[0].truncate(2);
        let kps = detect_keypoints(&nodes, &patches, &dense, &feats, &detector(5), 2.0).unwrap();
        assert_eq!(kps.len(), nodes.len() - 1);
        for kp in &kps {
            let members = &patches[kp.node];
            for a in 0..3 {
                let lo = members.iter().map(|&m| dense[m][a]).fold(f64::INFINITY, f64::min);
                let hi = members.iter().map(|&m| dense[m][a]).fold(f64::NEG_INFINITY, f64::max);
                assert!(kp.position[a] >= lo - 1e-12 && kp.position[a] <= hi + 1e-12);
            }
            assert!((kp.descriptor.norm() - 1.0).abs() < 1e-12);
        }
    }

    fn kp(p: Point3<f64>, d: DVector<f64>) -> Keypoint {
        Keypoint { position: p, descriptor: d, uncertainty: 1.0, node: 0 }
    }

    #[test]
    fn assignment_rules() {
        let nodes_x = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(10.0, 0.0, 0.0)];
        let nodes_y = vec![Point3::new(5.0, 5.0, 0.0)];
        let d = DVector::from_element(2, 0.5f64.sqrt());
        let kx = vec![
            kp(Point3::new(0.1, 0.0, 0.0), d.clone()),
            kp(Point3::new(3.0, 0.0, 0.0), d.clone()),
            kp(Point3::new(10.1, 0.0, 0.0), d.clone()),
        ];
        let ky: Vec<_> = (0..5).map(|i| kp(Point3::new(5.0 + i as f64, 5.0, 0.0), d.clone())).collect();
        let coarse = [NodeMatch { source: 0, target: 0, score: 1.0 }];
        let pairs = keypoint_to_patch(&kx, &nodes_x, &coarse, &ky, &nodes_y, 1.0, 3).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].keypoint, 0);
        assert_eq!(pairs[0].candidates, vec![0, 1, 2]);
        assert!(keypoint_to_patch(&kx, &nodes_x, &[], &ky, &nodes_y, 1.0, 3).is_err());
    }

    #[test]
    fn virtual_match_cases() {
        let w = DMatrix::<f64>::identity(3, 3) * 8.0;
        let e = |i: usize| DVector::from_fn(3, |r, _| (r == i) as u8 as f64);
        let q = kp(Point3::origin(), e(0));
        let lone = kp(Point3::new(1.0, 2.0, 3.0), e(1));
        let (v, _) = virtual_correspondence(&q, &[&lone], 4, &w, &w).unwrap();
        assert_eq!(v.target, lone.position);

        let twin = kp(Point3::new(4.0, 0.0, 0.0), e(0));
        let others = [kp(Point3::new(0.0, 4.0, 0.0), e(1)), kp(Point3::new(0.0, 0.0, 4.0), e(2))];
        let cands = [&others[0], &twin, &others[1]];
        let (v, local) = virtual_correspondence(&q, &cands, 4, &w, &w).unwrap();
        assert!((v.target - twin.position).norm() < 1e-9, "{:?}", local.weights);
        for a in 0..3 {
            assert!(v.target[a] >= -1e-12 && v.target[a] <= 4.0 + 1e-12);
        }
        assert_eq!(top_k(&[0.3, 0.9, 0.9, 0.1], 2), vec![1, 2]);
    }
}
