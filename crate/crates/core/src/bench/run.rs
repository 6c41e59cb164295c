//! Per-pair evaluation and suite runners.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{BenchReport, PairMetrics, PairRow};
use super::scene::{generate_scene, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::io::{load_cloud, CloudFormat};
use crate::geometry::{inlier_ratio, pir, registration_rmse, rre, rte, KdTree, MetricsConfig, PointCloud, RigidTransform};
use crate::pipeline::{Pipeline, PipelineConfig, Registration};

/// Everything a benchmark run is configured by, stored as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub metrics: MetricsConfig,
    /// Pairs evaluated concurrently; each pair runs single-threaded.
    pub workers: usize,
    /// Adds per-stage wall-clock columns, which makes reports
    /// non-reproducible.
    pub timings: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            metrics: MetricsConfig::default(),
            workers: 1,
            timings: false,
        }
    }
}

fn toml_error(e: toml::de::Error) -> Error {
    Error::parse(e.span().map_or(0, |s| s.start), e.message().to_string())
}

/// Parses TOML text; errors carry the byte offset of the offending span.
pub fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(toml_error)
}

pub fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    parse_toml(&std::fs::read_to_string(path)?)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.metrics.validate()?;
        if self.workers == 0 {
            return Err(Error::InvalidInput("workers must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One manifest line: two clouds and optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub source: PathBuf,
    pub target: PathBuf,
    pub truth: Option<RigidTransform>,
}

/// Whitespace-separated `source target [12 numbers]` per line; `#` starts
/// a comment. Relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let here = offset;
        offset += line.len();
        let body = line.split('#').next().unwrap_or("");
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let truth = match fields.len() {
            2 => None,
            14 => {
                let mut v = [0.0; 12];
                for (k, f) in fields[2..].iter().enumerate() {
                    let at = here + body.find(f).unwrap_or(0);
                    v[k] = f.parse().map_err(|_| Error::parse(at, format!("bad number '{f}'")))?;
                }
                Some(RigidTransform::from_row_major_3x4(&v).map_err(|e| Error::parse(here, e.to_string()))?)
            }
            n => return Err(Error::parse(here, format!("expected 2 or 14 fields, found {n}"))),
        };
        out.push(ManifestEntry {
            source: base.join(fields[0]),
            target: base.join(fields[1]),
            truth,
        });
    }
    Ok(out)
}

/// Ground-truth point pairs for RMSE: each source point and its nearest
/// target point, kept when closer than `radius` under `truth`.
pub fn truth_pairs(source: &[nalgebra::Point3<f64>], target: &KdTree, truth: &RigidTransform, radius: f64) -> Vec<(usize, usize)> {
    source
        .iter()
        .enumerate()
        .filter_map(|(i, p)| target.nearest(&truth.apply(p)).filter(|n| n.distance < radius).map(|n| (i, n.index)))
        .collect()
}

fn row_from(index: usize, names: (String, String), reg: &Registration, metrics: Option<PairMetrics>, timings: bool) -> PairRow {
    let m = reg.transform.rotation();
    let t = reg.transform.translation();
    PairRow {
        index,
        source: names.0,
        target: names.1,
        error: String::new(),
        stage: Some(reg.stage),
        fine_failed: reg.fine_failed,
        has_truth: metrics.is_some(),
        metrics,
        coarse: reg.counts.coarse,
        ransac_inliers: reg.counts.ransac_inliers,
        fine: reg.counts.fine,
        dense: reg.counts.dense,
        transform: Some([m[(0, 0)], m[(0, 1)], m[(0, 2)], t[0], m[(1, 0)], m[(1, 1)], m[(1, 2)], t[1], m[(2, 0)], m[(2, 1)], m[(2, 2)], t[2]]),
        timings: timings.then_some(reg.timings),
    }
}

/// Metrics of a registration against ground truth.
pub fn evaluate(reg: &Registration, source: &PointCloud, target: &PointCloud, truth: &RigidTransform, cfg: &RunConfig) -> PairMetrics {
    let tree = KdTree::new(target.points());
    let pairs = truth_pairs(source.points(), &tree, truth, 2.0 * cfg.pipeline.features.voxel_size);
    let rmse = registration_rmse(source.points(), target.points(), &pairs, &reg.transform).unwrap_or(f64::INFINITY);
    PairMetrics {
        rte: rte(&reg.transform, truth),
        rre: rre(&reg.transform, truth),
        rmse,
        inlier_ratio: inlier_ratio(&reg.fine_correspondences, truth, cfg.metrics.inlier_threshold).unwrap_or(0.0),
        pir: pir(&reg.coarse_pairs, truth, cfg.metrics.patch_radius),
    }
}

/// Registers one pair and scores it; stage failures become a failed row.
pub fn run_pair(
    pipeline: &Pipeline,
    index: usize,
    names: (String, String),
    source: &PointCloud,
    target: &PointCloud,
    truth: Option<&RigidTransform>,
    cfg: &RunConfig,
) -> PairRow {
    match pipeline.register(source, target) {
        Ok(reg) => {
            let metrics = truth.map(|t| evaluate(&reg, source, target, t, cfg));
            let mut row = row_from(index, names, &reg, metrics, cfg.timings);
            row.has_truth = truth.is_some();
            row
        }
        Err(e) => PairRow::failed(index, names.0, names.1, truth.is_some(), e.to_string()),
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidInput(format!("worker pool: {e}")))
}

/// `pairs` seeded synthetic scenes from `spec`.
pub fn run_synth(spec: &SceneSpec, pairs: usize, cfg: &RunConfig) -> Result<BenchReport> {
    cfg.validate()?;
    spec.validate()?;
    let pipeline = Pipeline::new(cfg.pipeline.clone())?;
    let rows: Vec<PairRow> = pool(cfg.workers)?.install(|| {
        (0..pairs)
            .into_par_iter()
            .map(|i| {
                let spec = spec.for_pair(i);
                let names = (format!("synth-{i}-source"), format!("synth-{i}-target"));
                match generate_scene(&spec) {
                    Ok(s) => run_pair(&pipeline, i, names, &s.source, &s.target, Some(&s.truth), cfg),
                    Err(e) => PairRow::failed(i, names.0, names.1, true, format!("scene generation: {e}")),
                }
            })
            .collect()
    });
    BenchReport::new(rows, cfg.metrics)
}

/// Pairs from a manifest; unreadable clouds become failed rows. Timings
/// exclude file loading.
pub fn run_dataset(entries: &[ManifestEntry], format: Option<CloudFormat>, cfg: &RunConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let pipeline = Pipeline::new(cfg.pipeline.clone())?;
    let rows: Vec<PairRow> = pool(cfg.workers)?.install(|| {
        entries
            .par_iter()
            .enumerate()
            .map(|(i, e)| {
                let names = (e.source.display().to_string(), e.target.display().to_string());
                let loaded = load_cloud(&e.source, format).and_then(|s| Ok((s, load_cloud(&e.target, format)?)));
                match loaded {
                    Ok((s, t)) => run_pair(&pipeline, i, names, &s, &t, e.truth.as_ref(), cfg),
                    Err(err) => PairRow::failed(i, names.0, names.1, e.truth.is_some(), format!("load: {err}")),
                }
            })
            .collect()
    });
    BenchReport::new(rows, cfg.metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lines() {
        let text = "# pairs\na.bin b.bin\n\nc.bin d.bin 1 0 0 0.5 0 1 0 0 0 0 1 2 # note\n";
        let m = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].source, PathBuf::from("/data/a.bin"));
        assert!(m[0].truth.is_none());
        let t = m[1].truth.unwrap();
        assert_eq!(t.translation()[0], 0.5);
        assert_eq!(t.translation()[2], 2.0);
    }

    #[test]
    fn manifest_errors_have_offsets() {
        let text = "a b\nc d 1 0 0 0 0 1 0 0 0 0 1 x\n";
        match parse_manifest(text, Path::new(".")) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, text.find('x').unwrap()),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_manifest("a b c\n", Path::new(".")), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn config_toml() {
        let cfg: RunConfig = parse_toml("workers = 2\n[pipeline.coarse]\nsigma_c = 1.2\n[metrics]\ninlier_threshold = 0.2\n").unwrap();
        assert_eq!(cfg.workers, 2);
        assert_eq!(cfg.pipeline.coarse.sigma_c, 1.2);
        assert_eq!(cfg.metrics.inlier_threshold, 0.2);
        let text = "workers = 1\n[pipeline]\nbogus = 3\n";
        match parse_toml::<RunConfig>(text) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, text.find("bogus").unwrap()),
            other => panic!("{other:?}"),
        }
        let roundtrip: RunConfig = parse_toml(&toml::to_string(&RunConfig::default()).unwrap()).unwrap();
        assert_eq!(roundtrip, RunConfig::default());
    }

    #[test]
    fn failure_rows_do_not_abort() {
        let entries = vec![ManifestEntry {
            source: "/nonexistent/a.xyz".into(),
            target: "/nonexistent/b.xyz".into(),
            truth: Some(RigidTransform::identity()),
        }];
        let r = run_dataset(&entries, None, &RunConfig::default()).unwrap();
        assert_eq!(r.summary.failed, 1);
        assert_eq!(r.summary.rr, Some(0.0));
    }
}
