//! Dual-softmax scores, overlap gating and mutual nearest-neighbor
//! extraction.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::attention::Mlp;
use crate::error::{Error, Result};
use crate::geometry::NodeMatch;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchScores {
    pub similarity: DMatrix<f64>,
    pub scores: DMatrix<f64>,
    pub overlap_x: DVector<f64>,
    pub overlap_y: DVector<f64>,
}

fn row_softmax(s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = s.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// `P = softmax_rows(S) ⊙ softmax_cols(S)`; empty on either side is an error.
pub fn dual_softmax(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if s.nrows() == 0 || s.ncols() == 0 {
        return Err(Error::Empty("similarity matrix".into()));
    }
    let rows = row_softmax(s);
    let cols = row_softmax(&s.transpose()).transpose();
    Ok(rows.component_mul(&cols))
}

/// `S = F_X F_Yᵀ` and its dual softmax.
pub fn layer_match_scores(fx: &DMatrix<f64>, fy: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if fx.ncols() != fy.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "feature widths {} and {} differ",
            fx.ncols(),
            fy.ncols()
        )));
    }
    let s = fx * fy.transpose();
    let p = dual_softmax(&s)?;
    Ok((s, p))
}

pub(crate) fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-node overlap scores `σ(MLP(f))`.
pub fn overlap_scores(features: &DMatrix<f64>, head: &Mlp) -> Result<DVector<f64>> {
    if head.hidden.fan_in() != features.ncols() || head.output.fan_out() != 1 {
        return Err(Error::DimensionMismatch("overlap head does not fit features".into()));
    }
    let logits = head.forward(features);
    Ok(DVector::from_iterator(logits.nrows(), logits.column(0).iter().map(|&v| logistic(v))))
}

/// Dual-softmax scores gated by `ô_i^X ô_j^Y`.
pub fn gated_scores(fx: &DMatrix<f64>, fy: &DMatrix<f64>, ox: &DVector<f64>, oy: &DVector<f64>) -> Result<MatchScores> {
    if ox.len() != fx.nrows() || oy.len() != fy.nrows() {
        return Err(Error::DimensionMismatch("overlap score count does not match node count".into()));
    }
    let (s, mut p) = layer_match_scores(fx, fy)?;
    for i in 0..p.nrows() {
        for j in 0..p.ncols() {
            p[(i, j)] *= ox[i] * oy[j];
        }
    }
    Ok(MatchScores {
        similarity: s,
        scores: p,
        overlap_x: ox.clone(),
        overlap_y: oy.clone(),
    })
}

/// Overlap head plus gated dual softmax on final features.
pub fn final_match(fx: &DMatrix<f64>, fy: &DMatrix<f64>, head: &Mlp) -> Result<MatchScores> {
    let ox = overlap_scores(fx, head)?;
    let oy = overlap_scores(fy, head)?;
    gated_scores(fx, fy, &ox, &oy)
}

fn argmax(values: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Row-wise argmax (lowest index on ties) with its score.
pub fn row_argmax(p: &DMatrix<f64>) -> Vec<(usize, f64)> {
    p.row_iter().map(|r| argmax(r.iter().copied()).expect("non-empty row")).collect()
}

/// `(i, j)` with `j` the row argmax of `i` and `i` the column argmax of `j`;
/// entries equal to zero never match.
pub fn mutual_topk(p: &DMatrix<f64>) -> Vec<NodeMatch> {
    if p.nrows() == 0 || p.ncols() == 0 {
        return Vec::new();
    }
    let rows = row_argmax(p);
    let cols: Vec<usize> = p
        .column_iter()
        .map(|c| argmax(c.iter().copied()).expect("non-empty column").0)
        .collect();
    rows.iter()
        .enumerate()
        .filter(|&(i, &(j, v))| v > 0.0 && cols[j] == i)
        .map(|(i, &(j, v))| NodeMatch {
            source: i,
            target: j,
            score: v,
        })
        .collect()
}

/// Row and column argmax correspondences merged, the `k` highest-scoring
/// kept; ties in (source, target) order. Zero entries never match.
pub fn top_entries(p: &DMatrix<f64>, k: usize) -> Vec<NodeMatch> {
    if p.nrows() == 0 || p.ncols() == 0 {
        return Vec::new();
    }
    let mut all: Vec<(usize, usize)> = row_argmax(p).into_iter().enumerate().map(|(i, (j, _))| (i, j)).collect();
    all.extend(p.column_iter().enumerate().map(|(j, c)| (argmax(c.iter().copied()).expect("non-empty column").0, j)));
    all.sort_unstable();
    all.dedup();
    let mut out: Vec<NodeMatch> = all
        .into_iter()
        .filter(|&(i, j)| p[(i, j)] > 0.0)
        .map(|(i, j)| NodeMatch {
            source: i,
            target: j,
            score: p[(i, j)],
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.source, a.target).cmp(&(b.source, b.target))));
    out.truncate(k);
    out
}

/// Raw dump: `u32 rows`, `u32 cols`, row-major little-endian `f32`.
pub fn write_score_matrix(mut w: impl Write, m: &DMatrix<f64>) -> std::io::Result<()> {
    w.write_all(&(m.nrows() as u32).to_le_bytes())?;
    w.write_all(&(m.ncols() as u32).to_le_bytes())?;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            w.write_all(&(m[(r, c)] as f32).to_le_bytes())?;
        }
    }
    Ok(())
}
