//! `spotreg` command-line interface: pairwise registration, synthetic and
//! dataset benchmarks, and report re-aggregation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use spotreg::bench::{load_toml, parse_manifest, run_dataset, run_synth, BenchReport, RunConfig, SceneSpec, Summary};
use spotreg::geometry::io::{format_transform, load_cloud, CloudFormat};
use spotreg::pipeline::Pipeline;
use spotreg::Result;

#[derive(Parser)]
#[command(name = "spotreg", version, about = "Coarse-to-fine point cloud registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register `src` onto `dst` and print the 4×4 transform.
    Register {
        src: PathBuf,
        dst: PathBuf,
        /// TOML run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the transform here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write stage, counts, timings and confidences as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Cloud format; inferred from the extension when omitted.
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    #[command(subcommand)]
    Bench(Bench),
    /// Recompute aggregates of a report and compare them with the stored ones.
    Metrics {
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Subcommand)]
enum Bench {
    /// Seeded synthetic scenes.
    Synth {
        /// TOML scene specification.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        pairs: usize,
        /// Overrides the scene seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Pairs listed in a manifest (`src dst [12 gt numbers]` per line).
    Dataset {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, value_enum)]
        format: Option<Format>,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured worker count.
    #[arg(long)]
    workers: Option<usize>,
    /// Add per-stage wall-clock columns.
    #[arg(long)]
    timings: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    KittiBin,
    Ply,
    Xyz,
}

impl From<Format> for CloudFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::KittiBin => CloudFormat::KittiBin,
            Format::Ply => CloudFormat::Ply,
            Format::Xyz => CloudFormat::Xyz,
        }
    }
}

/// Prefixes errors with the file they came from.
fn context<T>(path: &Path, r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| format!("{}: {e}", path.display()))
}

fn load_config(path: Option<&Path>) -> std::result::Result<RunConfig, String> {
    match path {
        Some(p) => context(p, load_toml(p)),
        None => Ok(RunConfig::default()),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> std::result::Result<(), String> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| format!("{}: {e}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn print_summary(s: &Summary) {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    eprintln!(
        "pairs {} failed {} | RR {} FMR {} PMR {} | median RTE {} m RRE {}°",
        s.pairs,
        s.failed,
        f(s.rr),
        f(s.fmr),
        f(s.pmr),
        f(s.median_rte),
        f(s.median_rre)
    );
}

fn run_bench(report: Result<BenchReport>, out: Option<&Path>) -> std::result::Result<(), String> {
    let report = report.map_err(|e| e.to_string())?;
    write_or_print(out, &report.to_text())?;
    print_summary(&report.summary);
    Ok(())
}

fn apply_run_args(cfg: &mut RunConfig, run: &RunArgs) {
    if let Some(w) = run.workers {
        cfg.workers = w;
    }
    cfg.timings |= run.timings;
}

fn run(cli: Cli) -> std::result::Result<(), String> {
    match cli.command {
        Command::Register { src, dst, config, out, json, format } => {
            let cfg = load_config(config.as_deref())?;
            let format = format.map(CloudFormat::from);
            let source = context(&src, load_cloud(&src, format))?;
            let target = context(&dst, load_cloud(&dst, format))?;
            let pipeline = Pipeline::new(cfg.pipeline).map_err(|e| e.to_string())?;
            let reg = pipeline.register(&source, &target).map_err(|e| e.to_string())?;
            write_or_print(out.as_deref(), &format_transform(&reg.transform))?;
            if let Some(p) = json {
                let h = reg.transform.to_homogeneous();
                let doc = json!({
                    "transform": (0..4).map(|r| (0..4).map(|c| h[(r, c)]).collect::<Vec<_>>()).collect::<Vec<_>>(),
                    "stage": reg.stage,
                    "fine_failed": reg.fine_failed,
                    "counts": reg.counts,
                    "timings": reg.timings,
                    "confidence_histogram": reg.confidence_histogram,
                });
                let text = serde_json::to_string_pretty(&doc).map_err(|e| e.to_string())?;
                fs::write(&p, text + "\n").map_err(|e| format!("{}: {e}", p.display()))?;
            }
            if reg.fine_failed {
                eprintln!("warning: fine stage failed, reporting the coarse pose");
            }
            Ok(())
        }
        Command::Bench(Bench::Synth { spec, pairs, seed, run }) => {
            let mut spec: SceneSpec = context(&spec, load_toml(&spec))?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let mut cfg = load_config(run.config.as_deref())?;
            apply_run_args(&mut cfg, &run);
            run_bench(run_synth(&spec, pairs, &cfg), run.out.as_deref())
        }
        Command::Bench(Bench::Dataset { pairs, format, run }) => {
            let text = fs::read_to_string(&pairs).map_err(|e| format!("{}: {e}", pairs.display()))?;
            let base = pairs.parent().unwrap_or(Path::new("."));
            let entries = context(&pairs, parse_manifest(&text, base))?;
            let mut cfg = load_config(run.config.as_deref())?;
            apply_run_args(&mut cfg, &run);
            run_bench(run_dataset(&entries, format.map(CloudFormat::from), &cfg), run.out.as_deref())
        }
        Command::Metrics { report } => {
            let text = fs::read_to_string(&report).map_err(|e| format!("{}: {e}", report.display()))?;
            let (parsed, stored) = context(&report, BenchReport::parse(&text))?;
            print_summary(&parsed.summary);
            if parsed.summary != stored {
                return Err(format!("recomputed aggregates differ from stored ones\nstored:     {stored:?}\nrecomputed: {:?}", parsed.summary));
            }
            println!("aggregates match");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
