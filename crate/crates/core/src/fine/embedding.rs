//! Inlier confidence from a compatibility-gated embedding of the
//! correspondence set.
//!
//! Each layer computes `softmax((E W_Q (E W_K)ᵀ / √D_e) ⊙ B) E W_V`, where
//! `B` is the compatibility matrix of the correspondences. The product with
//! `B` acts on the logits, so incompatible pairs get a zero logit rather
//! than being masked out.

use nalgebra::{DMatrix, Point3};
use serde::{Deserialize, Serialize};

use super::keypoints::VirtualMatch;
use crate::attention::{Mlp, Parameters, WeightInit};
use crate::coarse::overlap_scores;
use crate::consistency::{build_compatibility, scaled_degrees};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceMode {
    /// The learned-style embedding stack with a logistic classifier.
    Embedding,
    /// Scaled generalized degrees of the compatibility graph.
    Bypass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingLayer {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEmbedding {
    pub input: Mlp,
    pub layers: Vec<EmbeddingLayer>,
    pub classifier: Mlp,
}

impl GraphEmbedding {
    /// `descriptor_dim` is the keypoint descriptor width; the input MLP reads
    /// `[x, d^X, ŷ, d̂^Y]`.
    pub fn random(init: &mut WeightInit, descriptor_dim: usize, width: usize, layers: usize) -> Self {
        Self {
            input: Mlp::random(init, 6 + 2 * descriptor_dim, width, width),
            layers: (0..layers)
                .map(|_| EmbeddingLayer {
                    w_q: init.projection(width, width),
                    w_k: init.projection(width, width),
                    w_v: init.projection(width, width),
                })
                .collect(),
            classifier: Mlp::random(init, width, width, 1),
        }
    }

    pub fn width(&self) -> usize {
        self.input.output.fan_out()
    }
}

impl Parameters for GraphEmbedding {
    fn visit(&mut self, f: &mut dyn FnMut(&mut DMatrix<f64>)) {
        self.input.visit(f);
        for l in &mut self.layers {
            f(&mut l.w_q);
            f(&mut l.w_k);
            f(&mut l.w_v);
        }
        self.classifier.visit(f);
    }
}

/// One embedding layer on `E` with compatibility matrix `B`.
pub fn embedding_layer(e: &DMatrix<f64>, b: &DMatrix<f64>, layer: &EmbeddingLayer) -> Result<DMatrix<f64>> {
    let n = e.nrows();
    if b.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!("B is {:?} for {n} correspondences", b.shape())));
    }
    if layer.w_q.nrows() != e.ncols() {
        return Err(Error::DimensionMismatch("embedding width does not fit layer".into()));
    }
    let scale = 1.0 / (e.ncols() as f64).sqrt();
    let q = e * &layer.w_q;
    let k = e * &layer.w_k;
    let mut a = (q * k.transpose()).component_mul(b) * scale;
    for mut row in a.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
    Ok(a * (e * &layer.w_v))
}

fn input_rows(matches: &[VirtualMatch]) -> DMatrix<f64> {
    let dd = matches[0].source_descriptor.len();
    DMatrix::from_fn(matches.len(), 6 + 2 * dd, |r, c| {
        let m = &matches[r];
        if c < 3 {
            m.source[c]
        } else if c < 3 + dd {
            m.source_descriptor[c - 3]
        } else if c < 6 + dd {
            m.target[c - 3 - dd]
        } else {
            m.target_descriptor[c - 6 - dd]
        }
    })
}

/// Per-correspondence confidences in `[0, 1]`. Fewer than 2
/// correspondences carry no consistency signal and get confidence 1.
pub fn graph_embed_confidence(matches: &[VirtualMatch], sigma_d: f64, mode: ConfidenceMode, net: &GraphEmbedding) -> Result<Vec<f64>> {
    if matches.len() < 2 {
        return Ok(vec![1.0; matches.len()]);
    }
    let pairs: Vec<(Point3<f64>, Point3<f64>)> = matches.iter().map(|m| (m.source, m.target)).collect();
    let graph = build_compatibility(&pairs, sigma_d)?;
    match mode {
        ConfidenceMode::Bypass => Ok(scaled_degrees(&graph).iter().copied().collect()),
        ConfidenceMode::Embedding => {
            let mut e = net.input.forward(&input_rows(matches));
            for layer in &net.layers {
                e = embedding_layer(&e, graph.beta(), layer)?;
            }
            Ok(overlap_scores(&e, &net.classifier)?.iter().copied().collect())
        }
    }
}
