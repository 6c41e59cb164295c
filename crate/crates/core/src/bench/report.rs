//! Benchmark reports: one CSV row per pair followed by a `# key=value`
//! summary block.
//!
//! Floats are written in shortest round-trip form, so the aggregates can be
//! recomputed bit-for-bit from the parsed rows.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{fmr, pair_registered, pmr, registration_recall, MetricsConfig, PairOutcome};
use crate::pipeline::{Stage, StageTimings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub rte: f64,
    pub rre: f64,
    pub rmse: f64,
    /// Inlier ratio of the fine correspondences.
    pub inlier_ratio: f64,
    /// Patch inlier ratio of the coarse matches.
    pub pir: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub index: usize,
    pub source: String,
    pub target: String,
    /// Empty on success, otherwise the stage error.
    pub error: String,
    pub stage: Option<Stage>,
    pub fine_failed: bool,
    pub has_truth: bool,
    /// Present for successful rows with ground truth.
    pub metrics: Option<PairMetrics>,
    pub coarse: usize,
    pub ransac_inliers: usize,
    pub fine: usize,
    pub dense: usize,
    /// Row-major 3×4 estimate.
    pub transform: Option<[f64; 12]>,
    pub timings: Option<StageTimings>,
}

impl PairRow {
    pub fn failed(index: usize, source: String, target: String, has_truth: bool, error: String) -> Self {
        Self {
            index,
            source,
            target,
            error,
            stage: None,
            fine_failed: false,
            has_truth,
            metrics: None,
            coarse: 0,
            ransac_inliers: 0,
            fine: 0,
            dense: 0,
            transform: None,
            timings: None,
        }
    }

    pub fn ok(&self) -> bool {
        self.error.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pairs: usize,
    pub failed: usize,
    /// Rows with ground truth, successful or not.
    pub evaluated: usize,
    pub rr: Option<f64>,
    pub fmr: Option<f64>,
    pub pmr: Option<f64>,
    pub mean_rte: Option<f64>,
    pub median_rte: Option<f64>,
    pub mean_rre: Option<f64>,
    pub median_rre: Option<f64>,
    pub median_time: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub(crate) fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

/// Aggregates over the rows. Failed rows with ground truth count as
/// unregistered with zero inlier ratios; error statistics use successful
/// rows only.
pub fn summarize(rows: &[PairRow], cfg: &MetricsConfig) -> Result<Summary> {
    cfg.validate()?;
    let mut outcomes = Vec::new();
    let mut pirs = Vec::new();
    let mut rtes = Vec::new();
    let mut rres = Vec::new();
    let mut evaluated = 0;
    for r in rows {
        match (&r.metrics, r.ok()) {
            (Some(m), true) => {
                evaluated += 1;
                outcomes.push(PairOutcome {
                    rte: m.rte,
                    rre: m.rre,
                    rmse: m.rmse,
                    inlier_ratio: m.inlier_ratio,
                });
                pirs.push(m.pir);
                rtes.push(m.rte);
                rres.push(m.rre);
            }
            (_, false) if r.has_truth => {
                evaluated += 1;
                outcomes.push(PairOutcome {
                    rte: f64::INFINITY,
                    rre: f64::INFINITY,
                    rmse: f64::INFINITY,
                    inlier_ratio: 0.0,
                });
                pirs.push(0.0);
            }
            _ => {}
        }
    }
    let times: Vec<f64> = rows.iter().filter_map(|r| r.timings.map(|t| t.total)).collect();
    let has = !outcomes.is_empty();
    Ok(Summary {
        pairs: rows.len(),
        failed: rows.iter().filter(|r| !r.ok()).count(),
        evaluated,
        rr: if has { Some(registration_recall(&outcomes, cfg)?) } else { None },
        fmr: if has { Some(fmr(&outcomes, cfg)?) } else { None },
        pmr: if has { Some(pmr(&pirs, cfg.pir_threshold)?) } else { None },
        mean_rte: mean(&rtes),
        median_rte: median(&rtes),
        mean_rre: mean(&rres),
        median_rre: median(&rres),
        median_time: median(&times),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<PairRow>,
    pub summary: Summary,
    pub metrics: MetricsConfig,
}

impl BenchReport {
    pub fn new(rows: Vec<PairRow>, metrics: MetricsConfig) -> Result<Self> {
        let summary = summarize(&rows, &metrics)?;
        Ok(Self { rows, summary, metrics })
    }

    /// Whether a row passes the recall criterion.
    pub fn registered(&self, row: &PairRow) -> bool {
        row.ok()
            && row.metrics.as_ref().is_some_and(|m| {
                pair_registered(
                    &PairOutcome {
                        rte: m.rte,
                        rre: m.rre,
                        rmse: m.rmse,
                        inlier_ratio: m.inlier_ratio,
                    },
                    &self.metrics,
                )
            })
    }

    pub fn to_text(&self) -> String {
        let timings = self.rows.iter().any(|r| r.timings.is_some());
        let mut header: Vec<&str> = COLUMNS.to_vec();
        if timings {
            header.extend(TIMING_COLUMNS);
        }
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![
                r.index.to_string(),
                r.source.clone(),
                r.target.clone(),
                if r.ok() { "ok".into() } else { "failed".into() },
                r.stage.map(stage_name).unwrap_or_default().into(),
                r.fine_failed.to_string(),
                r.has_truth.to_string(),
            ];
            let m = r.metrics.as_ref();
            for v in [m.map(|m| m.rte), m.map(|m| m.rre), m.map(|m| m.rmse), m.map(|m| m.inlier_ratio), m.map(|m| m.pir)] {
                rec.push(opt(v));
            }
            rec.extend([r.coarse, r.ransac_inliers, r.fine, r.dense].map(|c| c.to_string()));
            rec.push(r.transform.map(|t| t.map(|v| v.to_string()).join(" ")).unwrap_or_default());
            rec.push(r.error.clone());
            if timings {
                let t = r.timings;
                for v in [t.map(|t| t.features), t.map(|t| t.coarse), t.map(|t| t.fine), t.map(|t| t.polish), t.map(|t| t.total)] {
                    rec.push(opt(v));
                }
            }
            w.write_record(&rec).expect("in-memory write");
        }
        let mut out = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields");
        let s = &self.summary;
        out.push_str("# summary\n");
        let _ = writeln!(out, "# pairs={}", s.pairs);
        let _ = writeln!(out, "# failed={}", s.failed);
        let _ = writeln!(out, "# evaluated={}", s.evaluated);
        for (k, v) in summary_values(s) {
            let _ = writeln!(out, "# {k}={}", opt(v));
        }
        let m = &self.metrics;
        let _ = writeln!(
            out,
            "# thresholds=rte:{} rre:{} rmse:{} inlier:{} fmr:{} pir:{} patch_radius:{} protocol:{}",
            m.rr_rte_threshold,
            m.rr_rre_threshold,
            m.rmse_threshold,
            m.inlier_threshold,
            m.fmr_threshold,
            m.pir_threshold,
            m.patch_radius,
            match m.protocol {
                crate::geometry::RecallProtocol::PoseThresholds => "pose-thresholds",
                crate::geometry::RecallProtocol::Rmse => "rmse",
            }
        );
        out
    }

    /// Parses a report and returns it with the stored summary alongside.
    pub fn parse(text: &str) -> Result<(BenchReport, Summary)> {
        let csv_end = text.find("\n# summary").map(|i| i + 1).ok_or_else(|| Error::parse(text.len(), "missing '# summary' block"))?;
        let mut reader = csv::ReaderBuilder::new().from_reader(text[..csv_end].as_bytes());
        let headers = reader.headers().map_err(|e| csv_error(&e))?.clone();
        let timings = headers.len() == COLUMNS.len() + TIMING_COLUMNS.len();
        if headers.iter().take(COLUMNS.len()).ne(COLUMNS.iter().copied()) || !(timings || headers.len() == COLUMNS.len()) {
            return Err(Error::parse(0, "unexpected report header"));
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| csv_error(&e))?;
            let offset = rec.position().map_or(0, |p| p.byte() as usize);
            rows.push(parse_row(&rec, timings).map_err(|m| Error::parse(offset, m))?);
        }
        let (stored, metrics) = parse_summary(&text[csv_end..], csv_end)?;
        let report = BenchReport::new(rows, metrics)?;
        Ok((report, stored))
    }
}

const COLUMNS: [&str; 18] = [
    "index",
    "source",
    "target",
    "status",
    "stage",
    "fine_failed",
    "has_truth",
    "rte",
    "rre",
    "rmse",
    "inlier_ratio",
    "pir",
    "coarse",
    "ransac_inliers",
    "fine",
    "dense",
    "transform",
    "error",
];

const TIMING_COLUMNS: [&str; 5] = ["t_features", "t_coarse", "t_fine", "t_polish", "t_total"];

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Coarse => "coarse",
        Stage::Sparse => "sparse",
        Stage::Dense => "dense",
        Stage::Icp => "icp",
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn summary_values(s: &Summary) -> [(&'static str, Option<f64>); 8] {
    [
        ("rr", s.rr),
        ("fmr", s.fmr),
        ("pmr", s.pmr),
        ("mean_rte", s.mean_rte),
        ("median_rte", s.median_rte),
        ("mean_rre", s.mean_rre),
        ("median_rre", s.median_rre),
        ("median_time", s.median_time),
    ]
}

fn csv_error(e: &csv::Error) -> Error {
    Error::parse(e.position().map_or(0, |p| p.byte() as usize), e.to_string())
}

fn num<T: std::str::FromStr>(field: &str, name: &str) -> std::result::Result<T, String> {
    field.parse().map_err(|_| format!("bad {name} value '{field}'"))
}

fn opt_num(field: &str, name: &str) -> std::result::Result<Option<f64>, String> {
    if field.is_empty() {
        Ok(None)
    } else {
        num(field, name).map(Some)
    }
}

fn parse_row(rec: &csv::StringRecord, timings: bool) -> std::result::Result<PairRow, String> {
    let f = |i: usize| rec.get(i).unwrap_or("");
    let stage = match f(4) {
        "" => None,
        "coarse" => Some(Stage::Coarse),
        "sparse" => Some(Stage::Sparse),
        "dense" => Some(Stage::Dense),
        "icp" => Some(Stage::Icp),
        other => return Err(format!("unknown stage '{other}'")),
    };
    let vals: Vec<Option<f64>> = (7..12).map(|i| opt_num(f(i), COLUMNS[i])).collect::<std::result::Result<_, _>>()?;
    let metrics = match vals.as_slice() {
        [Some(rte), Some(rre), Some(rmse), Some(ir), Some(pir)] => Some(PairMetrics {
            rte: *rte,
            rre: *rre,
            rmse: *rmse,
            inlier_ratio: *ir,
            pir: *pir,
        }),
        [None, None, None, None, None] => None,
        _ => return Err("partially filled metric columns".into()),
    };
    let transform = if f(16).is_empty() {
        None
    } else {
        let v: Vec<f64> = f(16).split(' ').map(|s| num(s, "transform")).collect::<std::result::Result<_, _>>()?;
        Some(<[f64; 12]>::try_from(v).map_err(|_| "transform needs 12 numbers".to_string())?)
    };
    let timings = if timings {
        let t: Vec<Option<f64>> = (18..23).map(|i| opt_num(f(i), TIMING_COLUMNS[i - 18])).collect::<std::result::Result<_, _>>()?;
        match t.as_slice() {
            [Some(a), Some(b), Some(c), Some(d), Some(e)] => Some(StageTimings {
                features: *a,
                coarse: *b,
                fine: *c,
                polish: *d,
                total: *e,
            }),
            _ => None,
        }
    } else {
        None
    };
    let ok = match f(3) {
        "ok" => true,
        "failed" => false,
        other => return Err(format!("unknown status '{other}'")),
    };
    let error = f(17).to_string();
    if ok != error.is_empty() {
        return Err("status and error column disagree".into());
    }
    Ok(PairRow {
        index: num(f(0), "index")?,
        source: f(1).to_string(),
        target: f(2).to_string(),
        error,
        stage,
        fine_failed: num(f(5), "fine_failed")?,
        has_truth: num(f(6), "has_truth")?,
        metrics,
        coarse: num(f(12), "coarse")?,
        ransac_inliers: num(f(13), "ransac_inliers")?,
        fine: num(f(14), "fine")?,
        dense: num(f(15), "dense")?,
        transform,
        timings,
    })
}

fn parse_summary(block: &str, base: usize) -> Result<(Summary, MetricsConfig)> {
    let mut s = Summary {
        pairs: 0,
        failed: 0,
        evaluated: 0,
        rr: None,
        fmr: None,
        pmr: None,
        mean_rte: None,
        median_rte: None,
        mean_rre: None,
        median_rre: None,
        median_time: None,
    };
    let mut metrics = None;
    let mut offset = base;
    for line in block.split_inclusive('\n') {
        let here = offset;
        offset += line.len();
        let body = line.trim_end();
        if body == "# summary" || body.is_empty() {
            continue;
        }
        let kv = body.strip_prefix("# ").and_then(|l| l.split_once('=')).ok_or_else(|| Error::parse(here, "expected '# key=value'"))?;
        let bad = |m: String| Error::parse(here, m);
        match kv {
            ("pairs", v) => s.pairs = num(v, "pairs").map_err(bad)?,
            ("failed", v) => s.failed = num(v, "failed").map_err(bad)?,
            ("evaluated", v) => s.evaluated = num(v, "evaluated").map_err(bad)?,
            ("rr", v) => s.rr = opt_num(v, "rr").map_err(bad)?,
            ("fmr", v) => s.fmr = opt_num(v, "fmr").map_err(bad)?,
            ("pmr", v) => s.pmr = opt_num(v, "pmr").map_err(bad)?,
            ("mean_rte", v) => s.mean_rte = opt_num(v, "mean_rte").map_err(bad)?,
            ("median_rte", v) => s.median_rte = opt_num(v, "median_rte").map_err(bad)?,
            ("mean_rre", v) => s.mean_rre = opt_num(v, "mean_rre").map_err(bad)?,
            ("median_rre", v) => s.median_rre = opt_num(v, "median_rre").map_err(bad)?,
            ("median_time", v) => s.median_time = opt_num(v, "median_time").map_err(bad)?,
            ("thresholds", v) => metrics = Some(parse_thresholds(v).map_err(bad)?),
            (k, _) => return Err(Error::parse(here, format!("unknown summary key '{k}'"))),
        }
    }
    let metrics = metrics.ok_or_else(|| Error::parse(offset, "missing thresholds line"))?;
    Ok((s, metrics))
}

fn parse_thresholds(v: &str) -> std::result::Result<MetricsConfig, String> {
    let mut m = MetricsConfig::default();
    for item in v.split(' ') {
        let (k, val) = item.split_once(':').ok_or_else(|| format!("bad threshold item '{item}'"))?;
        match k {
            "rte" => m.rr_rte_threshold = num(val, k)?,
            "rre" => m.rr_rre_threshold = num(val, k)?,
            "rmse" => m.rmse_threshold = num(val, k)?,
            "inlier" => m.inlier_threshold = num(val, k)?,
            "fmr" => m.fmr_threshold = num(val, k)?,
            "pir" => m.pir_threshold = num(val, k)?,
            "patch_radius" => m.patch_radius = num(val, k)?,
            "protocol" => {
                m.protocol = match val {
                    "pose-thresholds" => crate::geometry::RecallProtocol::PoseThresholds,
                    "rmse" => crate::geometry::RecallProtocol::Rmse,
                    other => return Err(format!("unknown protocol '{other}'")),
                }
            }
            other => return Err(format!("unknown threshold '{other}'")),
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: usize, rte: f64, rre: f64) -> PairRow {
        PairRow {
            metrics: Some(PairMetrics { rte, rre, rmse: 0.01, inlier_ratio: 0.3, pir: 0.5 }),
            stage: Some(Stage::Icp),
            transform: Some([1.0, 0.0, 0.0, 0.5, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, -0.25]),
            ..PairRow::failed(i, format!("s{i}.xyz"), "a,b.xyz".into(), true, String::new())
        }
    }

    #[test]
    fn roundtrip_and_recompute() {
        let mut rows = vec![row(0, 0.01, 0.2), row(1, 3.0, 0.1), row(2, 0.1 / 3.0, 1.0 / 7.0)];
        rows.push(PairRow::failed(3, "x".into(), "y".into(), true, "no consensus: \"quoted\"".into()));
        let report = BenchReport::new(rows, MetricsConfig::default()).unwrap();
        assert_eq!(report.summary.rr, Some(0.5));
        assert_eq!(report.summary.failed, 1);
        let text = report.to_text();
        let (back, stored) = BenchReport::parse(&text).unwrap();
        assert_eq!(back, report);
        assert_eq!(stored, report.summary);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn timings_columns_roundtrip() {
        let mut r = row(0, 0.01, 0.2);
        r.timings = Some(StageTimings { features: 0.1, coarse: 0.2, fine: 0.3, polish: 0.05, total: 0.65 });
        let report = BenchReport::new(vec![r], MetricsConfig::default()).unwrap();
        assert_eq!(report.summary.median_time, Some(0.65));
        let (back, _) = BenchReport::parse(&report.to_text()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn parse_errors_carry_offsets() {
        let report = BenchReport::new(vec![row(0, 0.01, 0.2)], MetricsConfig::default()).unwrap();
        let text = report.to_text().replace(",icp,", ",warp,");
        match BenchReport::parse(&text) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0 && offset < text.find("# summary").unwrap()),
            other => panic!("{other:?}"),
        }
        assert!(matches!(BenchReport::parse("index\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
