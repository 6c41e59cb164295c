use std::path::Path;
use std::process::{Command, Output};

use spotreg::bench::{generate_scene, SceneSpec};
use spotreg::geometry::io::{parse_transform, write_kitti_bin, write_xyz};
use spotreg::geometry::{rre, rte};
use spotreg::RigidTransform;

fn spotreg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spotreg")).args(args).current_dir(cwd).output().expect("run spotreg")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_scene(seed: u64) -> spotreg::bench::Scene {
    generate_scene(&SceneSpec { points: 2500, seed, ..SceneSpec::default() }).unwrap()
}

#[test]
fn register_identical_files_gives_identity() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_scene(1);
    std::fs::write(dir.path().join("a.xyz"), write_xyz(&s.source)).unwrap();
    let out = spotreg(&["register", "a.xyz", "a.xyz", "--out", "t.txt", "--json", "r.json"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let t = parse_transform(&std::fs::read_to_string(dir.path().join("t.txt")).unwrap()).unwrap();
    let id = RigidTransform::identity();
    assert!(rte(&t, &id) < 1e-6 && rre(&t, &id) < 1e-6);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(json["stage"], "icp");
    assert_eq!(json["confidence_histogram"].as_array().unwrap().len(), 10);
}

#[test]
fn register_recovers_scene_motion() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_scene(2);
    std::fs::write(dir.path().join("src.bin"), write_kitti_bin(&s.source)).unwrap();
    std::fs::write(dir.path().join("dst.bin"), write_kitti_bin(&s.target)).unwrap();
    let out = spotreg(&["register", "src.bin", "dst.bin", "--format", "kitti-bin"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let t = parse_transform(&String::from_utf8(out.stdout).unwrap()).unwrap();
    // KITTI files store f32 coordinates
    assert!(rte(&t, &s.truth) < 0.1 && rre(&t, &s.truth) < 1.0, "{t:?}");
}

#[test]
fn malformed_inputs_fail_with_offsets() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.xyz"), "0 0 0\n1 2 oops\n").unwrap();
    let out = spotreg(&["register", "bad.xyz", "bad.xyz"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("at byte 10"), "{}", stderr(&out));

    std::fs::write(dir.path().join("cfg.toml"), "[pipeline.coarse]\nsigma_c = \"wide\"\n").unwrap();
    std::fs::write(dir.path().join("ok.xyz"), "0 0 0\n").unwrap();
    let out = spotreg(&["register", "ok.xyz", "ok.xyz", "--config", "cfg.toml"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("cfg.toml: parse error at byte 28"), "{}", stderr(&out));

    std::fs::write(dir.path().join("pairs.txt"), "a.xyz b.xyz 1 2 3\n").unwrap();
    let out = spotreg(&["bench", "dataset", "--pairs", "pairs.txt"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("parse error at byte 0"), "{}", stderr(&out));

    let out = spotreg(&["metrics", "--report", "pairs.txt"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn dataset_bench_and_metrics_recompute() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = String::from("# source target [3x4 ground truth]\n");
    for k in 0..2 {
        let s = small_scene(10 + k);
        std::fs::write(dir.path().join(format!("s{k}.xyz")), write_xyz(&s.source)).unwrap();
        std::fs::write(dir.path().join(format!("t{k}.xyz")), write_xyz(&s.target)).unwrap();
        let (r, t) = (s.truth.rotation(), s.truth.translation());
        let gt: Vec<String> = (0..3).flat_map(|i| (0..4).map(move |j| if j < 3 { r[(i, j)] } else { t[i] })).map(|v| format!("{v:e}")).collect();
        manifest.push_str(&format!("s{k}.xyz t{k}.xyz {}\n", gt.join(" ")));
    }
    manifest.push_str("missing.xyz t0.xyz\n");
    std::fs::create_dir(dir.path().join("lists")).unwrap();
    std::fs::write(dir.path().join("lists/pairs.txt"), manifest.replace("s0.", "../s0.").replace("s1.", "../s1.").replace(" t", " ../t").replace("missing", "../missing")).unwrap();

    let out = spotreg(&["bench", "dataset", "--pairs", "lists/pairs.txt", "--format", "xyz", "--out", "report.csv", "--timings"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let (report, stored) = spotreg::bench::BenchReport::parse(&text).unwrap();
    assert_eq!(report.summary, stored);
    assert_eq!(stored.pairs, 3);
    assert_eq!(stored.failed, 1);
    assert_eq!(stored.evaluated, 2);
    assert_eq!(stored.rr, Some(1.0));
    assert!(report.rows.iter().filter(|r| r.ok()).all(|r| r.timings.is_some()));
    assert!(report.rows[2].error.starts_with("load:"));

    let out = spotreg(&["metrics", "--report", "report.csv"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("aggregates match"));

    // a tampered aggregate is detected
    std::fs::write(dir.path().join("tampered.csv"), text.replace("# rr=1\n", "# rr=0.5\n")).unwrap();
    let out = spotreg(&["metrics", "--report", "tampered.csv"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("differ"), "{}", stderr(&out));
}
