//! Attention kernels over row-major token matrices (`n × D`).

use nalgebra::{DMatrix, DVector, Point3};

use super::rotary::RotaryEmbedding3D;
use super::weights::AttentionWeights;
use crate::error::{Error, Result};

/// Which keys each query may attend to.
#[derive(Debug, Clone, Copy)]
pub enum KeySet<'a> {
    All,
    /// One key list shared by every query.
    Shared(&'a [usize]),
    /// A key list per query.
    PerQuery(&'a [Vec<usize>]),
}

/// Attention output together with the per-head attention matrices
/// (`n_queries × n_keys`, exact zeros on excluded keys).
#[derive(Debug, Clone)]
pub struct Attended {
    pub output: DMatrix<f64>,
    pub probs: Vec<DMatrix<f64>>,
}

/// In-place max-subtracted softmax.
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return;
    }
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut v = logits.to_vec();
    softmax_in_place(&mut v);
    v
}

fn check_width(name: &str, m: &DMatrix<f64>, d: usize) -> Result<()> {
    if m.ncols() != d {
        return Err(Error::DimensionMismatch(format!("{name} has {} columns, weights expect {d}", m.ncols())));
    }
    Ok(())
}

fn check_keys(keys: KeySet<'_>, n_queries: usize, n_keys: usize) -> Result<()> {
    let check_list = |list: &[usize], q: Option<usize>| -> Result<()> {
        if list.is_empty() {
            return Err(Error::InvalidInput(match q {
                Some(q) => format!("query {q} has no allowed keys"),
                None => "shared key set is empty".into(),
            }));
        }
        if let Some(&bad) = list.iter().find(|&&k| k >= n_keys) {
            return Err(Error::InvalidInput(format!("key index {bad} out of range ({n_keys} keys)")));
        }
        Ok(())
    };
    match keys {
        KeySet::All => {
            if n_keys == 0 {
                return Err(Error::Empty("key set".into()));
            }
        }
        KeySet::Shared(list) => check_list(list, None)?,
        KeySet::PerQuery(lists) => {
            if lists.len() != n_queries {
                return Err(Error::DimensionMismatch(format!(
                    "{} key lists for {n_queries} queries",
                    lists.len()
                )));
            }
            for (q, l) in lists.iter().enumerate() {
                check_list(l, Some(q))?;
            }
        }
    }
    Ok(())
}

/// Multi-head scaled dot-product attention on already projected
/// queries/keys/values. Heads are contiguous channel blocks; each head's
/// logits are scaled by `1/√d_head`.
pub(crate) fn attend_projected(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    v: &DMatrix<f64>,
    heads: usize,
    keys: KeySet<'_>,
    record: bool,
) -> Result<Attended> {
    check_keys(keys, q.nrows(), k.nrows())?;
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = q.nrows();
    let m = k.nrows();
    let mut output = DMatrix::zeros(n, v.ncols());
    let dv = v.ncols() / heads;
    let mut probs = Vec::new();
    for h in 0..heads {
        let qh = q.columns(h * dh, dh);
        let kh = k.columns(h * dh, dh);
        let vh = v.columns(h * dv, dv);
        let mut p_full = if record { DMatrix::zeros(n, m) } else { DMatrix::zeros(0, 0) };
        match keys {
            KeySet::All => {
                let mut logits = (qh * kh.transpose()) * scale;
                for i in 0..n {
                    let mut row: Vec<f64> = logits.row(i).iter().copied().collect();
                    softmax_in_place(&mut row);
                    for (j, p) in row.into_iter().enumerate() {
                        logits[(i, j)] = p;
                    }
                }
                let out_h = &logits * vh;
                output.columns_mut(h * dv, dv).copy_from(&out_h);
                if record {
                    p_full = logits;
                }
            }
            KeySet::Shared(_) | KeySet::PerQuery(_) => {
                for i in 0..n {
                    let list: &[usize] = match keys {
                        KeySet::Shared(l) => l,
                        KeySet::PerQuery(ls) => &ls[i],
                        KeySet::All => unreachable!(),
                    };
                    let qi = qh.row(i);
                    let mut w: Vec<f64> = list.iter().map(|&j| qi.dot(&kh.row(j)) * scale).collect();
                    softmax_in_place(&mut w);
                    let mut acc = output.view_mut((i, h * dv), (1, dv));
                    for (&j, &p) in list.iter().zip(&w) {
                        acc += vh.row(j) * p;
                        if record {
                            p_full[(i, j)] += p;
                        }
                    }
                }
            }
        }
        if record {
            probs.push(p_full);
        }
    }
    Ok(Attended { output, probs })
}

fn project(
    fa: &DMatrix<f64>,
    fb: &DMatrix<f64>,
    w: &AttentionWeights,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    w.validate()?;
    check_width("F_A", fa, w.dim())?;
    check_width("F_B", fb, w.dim())?;
    Ok((fa * &w.w_q, fb * &w.w_k, fb * &w.w_v))
}

fn finish(mut a: Attended, w: &AttentionWeights) -> Attended {
    if let Some(o) = &w.w_o {
        a.output = &a.output * o;
    }
    a
}

/// `softmax(F_A W_Q (F_B W_K)ᵀ / √d) F_B W_V`, per head.
pub fn vanilla_attention(fa: &DMatrix<f64>, fb: &DMatrix<f64>, w: &AttentionWeights) -> Result<DMatrix<f64>> {
    Ok(vanilla_attention_with_probs(fa, fb, w, false)?.output)
}

pub fn vanilla_attention_with_probs(
    fa: &DMatrix<f64>,
    fb: &DMatrix<f64>,
    w: &AttentionWeights,
    record: bool,
) -> Result<Attended> {
    let (q, k, v) = project(fa, fb, w)?;
    Ok(finish(attend_projected(&q, &k, &v, w.heads, KeySet::All, record)?, w))
}

/// Attention restricted to `mask[i]` for query `i`; excluded keys receive
/// exactly zero weight.
pub fn masked_attention(
    fa: &DMatrix<f64>,
    fb: &DMatrix<f64>,
    mask: &[Vec<usize>],
    w: &AttentionWeights,
) -> Result<DMatrix<f64>> {
    Ok(masked_attention_with_probs(fa, fb, KeySet::PerQuery(mask), w, false)?.output)
}

pub fn masked_attention_with_probs(
    fa: &DMatrix<f64>,
    fb: &DMatrix<f64>,
    keys: KeySet<'_>,
    w: &AttentionWeights,
    record: bool,
) -> Result<Attended> {
    let (q, k, v) = project(fa, fb, w)?;
    Ok(finish(attend_projected(&q, &k, &v, w.heads, keys, record)?, w))
}

/// Self-attention with rotary position encoding: queries and keys are
/// right-multiplied by `R̃(p)` of their own positions before the dot product.
pub fn rotary_self_attention(
    fa: &DMatrix<f64>,
    pa: &[Point3<f64>],
    fb: &DMatrix<f64>,
    pb: &[Point3<f64>],
    w: &AttentionWeights,
    emb: &RotaryEmbedding3D,
) -> Result<DMatrix<f64>> {
    Ok(rotary_attention_with_probs(fa, pa, fb, pb, KeySet::All, w, emb, false)?.output)
}

#[allow(clippy::too_many_arguments)]
pub fn rotary_attention_with_probs(
    fa: &DMatrix<f64>,
    pa: &[Point3<f64>],
    fb: &DMatrix<f64>,
    pb: &[Point3<f64>],
    keys: KeySet<'_>,
    w: &AttentionWeights,
    emb: &RotaryEmbedding3D,
    record: bool,
) -> Result<Attended> {
    if pa.len() != fa.nrows() || pb.len() != fb.nrows() {
        return Err(Error::DimensionMismatch("feature rows and positions disagree".into()));
    }
    if emb.dim() != w.dim() {
        return Err(Error::DimensionMismatch(format!(
            "rotary dimension {} vs attention dimension {}",
            emb.dim(),
            w.dim()
        )));
    }
    let (mut q, mut k, v) = project(fa, fb, w)?;
    emb.rotate_rows(&mut q, pa);
    emb.rotate_rows(&mut k, pb);
    Ok(finish(attend_projected(&q, &k, &v, w.heads, keys, record)?, w))
}

fn elu_plus_one(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// `φ(Q)(φ(K)ᵀV)` normalised row-wise by `φ(Q)(φ(K)ᵀ1)`, `φ = elu + 1`.
pub fn linear_attention(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if q.ncols() != k.ncols() {
        return Err(Error::DimensionMismatch(format!("Q width {} vs K width {}", q.ncols(), k.ncols())));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::DimensionMismatch(format!("{} keys vs {} values", k.nrows(), v.nrows())));
    }
    if k.nrows() == 0 {
        return Err(Error::Empty("key set".into()));
    }
    let fq = q.map(elu_plus_one);
    let fk = k.map(elu_plus_one);
    let kv = fk.transpose() * v;
    let ksum = fk.row_sum();
    let mut out = &fq * kv;
    for i in 0..out.nrows() {
        let z = fq.row(i).dot(&ksum);
        out.row_mut(i).scale_mut(1.0 / z);
    }
    Ok(out)
}

/// Multi-head linear cross-attention with projections from `w`.
pub fn linear_cross_attention(fa: &DMatrix<f64>, fb: &DMatrix<f64>, w: &AttentionWeights) -> Result<DMatrix<f64>> {
    let (q, k, v) = project(fa, fb, w)?;
    let dh = w.head_dim();
    let mut out = DMatrix::zeros(fa.nrows(), w.dim());
    for h in 0..w.heads {
        let o = linear_attention(
            &q.columns(h * dh, dh).into_owned(),
            &k.columns(h * dh, dh).into_owned(),
            &v.columns(h * dh, dh).into_owned(),
        )?;
        out.columns_mut(h * dh, dh).copy_from(&o);
    }
    Ok(finish(Attended { output: out, probs: Vec::new() }, w).output)
}

/// Soft assignment of a query descriptor over candidate points.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMatch {
    pub point: Point3<f64>,
    pub descriptor: DVector<f64>,
    pub weights: Vec<f64>,
}

/// Single-head attention of one descriptor over a candidate set:
/// weights `softmax_j((d_x W̄_Q)·(d_j W̄_K))`, output the weighted mean of
/// candidate points and descriptors.
pub fn single_head_local_attention(
    query: &DVector<f64>,
    candidates: &[(Point3<f64>, DVector<f64>)],
    w_q: &DMatrix<f64>,
    w_k: &DMatrix<f64>,
) -> Result<LocalMatch> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate set".into()));
    }
    if w_q.nrows() != query.len() || w_k.nrows() != query.len() || w_q.ncols() != w_k.ncols() {
        return Err(Error::DimensionMismatch("local attention projections do not fit descriptors".into()));
    }
    let qp = w_q.tr_mul(query);
    let mut weights = Vec::with_capacity(candidates.len());
    for (_, d) in candidates {
        if d.len() != query.len() {
            return Err(Error::DimensionMismatch("candidate descriptor width".into()));
        }
        weights.push(qp.dot(&w_k.tr_mul(d)));
    }
    softmax_in_place(&mut weights);
    Ok(combine(candidates, weights))
}

pub(crate) fn combine(candidates: &[(Point3<f64>, DVector<f64>)], weights: Vec<f64>) -> LocalMatch {
    let mut point = nalgebra::Vector3::zeros();
    let mut descriptor = DVector::zeros(candidates[0].1.len());
    for ((p, d), &w) in candidates.iter().zip(&weights) {
        point += p.coords * w;
        descriptor += d * w;
    }
    LocalMatch {
        point: Point3::from(point),
        descriptor,
        weights,
    }
}
