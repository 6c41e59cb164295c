//! Synthetic scenes, the per-pair pipeline runner and benchmark reports.

mod report;
mod run;
mod scene;

pub use report::{summarize, BenchReport, PairMetrics, PairRow, Summary};
pub use run::{evaluate, load_toml, parse_manifest, parse_toml, run_dataset, run_pair, run_synth, truth_pairs, ManifestEntry, RunConfig};
pub use scene::{generate_scene, measure_overlap, Scene, SceneKind, SceneSpec};
