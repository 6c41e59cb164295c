use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use spotreg_ffi::*;

const IDENTITY: [f64; 16] = [1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.];

fn last_error() -> String {
    unsafe { CStr::from_ptr(spotreg_last_error()).to_string_lossy().into_owned() }
}

#[test]
fn kabsch_and_errors() {
    let src = [0., 0., 0., 1., 0., 0., 0., 1., 0., 0., 0., 1.];
    let dst: Vec<f64> = src.chunks(3).flat_map(|p| [p[0] + 1.0, p[1] - 2.0, p[2] + 0.5]).collect();
    let mut m = [0.0; 16];
    let st = unsafe { spotreg_kabsch(src.as_ptr(), dst.as_ptr(), ptr::null(), 4, m.as_mut_ptr()) };
    assert_eq!(st, SpotregStatus::Ok);
    assert!((m[3] - 1.0).abs() < 1e-12 && (m[7] + 2.0).abs() < 1e-12 && (m[11] - 0.5).abs() < 1e-12);
    let (mut e_rot, mut e_tr) = (f64::NAN, f64::NAN);
    unsafe {
        assert_eq!(spotreg_rre(m.as_ptr(), IDENTITY.as_ptr(), &mut e_rot), SpotregStatus::Ok);
        assert_eq!(spotreg_rte(m.as_ptr(), IDENTITY.as_ptr(), &mut e_tr), SpotregStatus::Ok);
    }
    assert!(e_rot < 1e-9);
    assert!((e_tr - 5.25f64.sqrt()).abs() < 1e-12);

    let st = unsafe { spotreg_kabsch(src.as_ptr(), dst.as_ptr(), ptr::null(), 2, m.as_mut_ptr()) };
    assert_eq!(st, SpotregStatus::Degenerate);
    assert!(!last_error().is_empty());
    let st = unsafe { spotreg_kabsch(ptr::null(), dst.as_ptr(), ptr::null(), 4, m.as_mut_ptr()) };
    assert_eq!(st, SpotregStatus::NullPointer);
    assert!(last_error().contains("source"));
    let mut bad = IDENTITY;
    bad[0] = 2.0;
    assert_eq!(unsafe { spotreg_rre(bad.as_ptr(), IDENTITY.as_ptr(), &mut e_rot) }, SpotregStatus::InvalidInput);
}

#[test]
fn cloud_handles() {
    let xyz = [0., 0., 0., 1., 2., 3.];
    let mut c = ptr::null_mut();
    unsafe {
        assert_eq!(spotreg_cloud_from_xyz(xyz.as_ptr(), 2, &mut c), SpotregStatus::Ok);
        assert_eq!(spotreg_cloud_len(c), 2);
        spotreg_cloud_free(c);
        spotreg_cloud_free(ptr::null_mut());
        assert_eq!(spotreg_cloud_len(ptr::null()), 0);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.xyz");
    std::fs::write(&path, "0 0 0\n1 1 1\n2 2 x\n").unwrap();
    let p = CString::new(path.to_str().unwrap()).unwrap();
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { spotreg_cloud_load(p.as_ptr(), ptr::null(), &mut c) }, SpotregStatus::Parse);
    assert!(last_error().contains("byte"), "{}", last_error());
    let fmt = CString::new("laz").unwrap();
    assert_eq!(unsafe { spotreg_cloud_load(p.as_ptr(), fmt.as_ptr(), &mut c) }, SpotregStatus::InvalidInput);
    let missing = CString::new("/nonexistent/cloud.xyz").unwrap();
    assert_eq!(unsafe { spotreg_cloud_load(missing.as_ptr(), ptr::null(), &mut c) }, SpotregStatus::Io);
}

#[test]
fn pipeline_register_identity() {
    let scene = spotreg::bench::generate_scene(&spotreg::bench::SceneSpec {
        points: 2000,
        overlap: 1.0,
        noise_sigma: 0.0,
        outlier_fraction: 0.0,
        ..Default::default()
    })
    .unwrap();
    let xyz: Vec<f64> = scene.source.points().iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    let mut pipe = ptr::null_mut();
    let mut cloud = ptr::null_mut();
    let mut m = [0.0; 16];
    let mut fine_failed = -1;
    unsafe {
        let bad = CString::new("[pipeline]\nnope = 1\n").unwrap();
        assert_eq!(spotreg_pipeline_new(bad.as_ptr(), &mut pipe), SpotregStatus::Parse);
        assert_eq!(spotreg_pipeline_new(ptr::null(), &mut pipe), SpotregStatus::Ok);
        assert_eq!(spotreg_cloud_from_xyz(xyz.as_ptr(), scene.source.len(), &mut cloud), SpotregStatus::Ok);
        assert_eq!(spotreg_register(pipe, cloud, cloud, m.as_mut_ptr(), &mut fine_failed), SpotregStatus::Ok);
        assert_eq!(spotreg_register(pipe, ptr::null(), cloud, m.as_mut_ptr(), ptr::null_mut()), SpotregStatus::NullPointer);
        spotreg_cloud_free(cloud);
        spotreg_pipeline_free(pipe);
    }
    assert_eq!(fine_failed, 0);
    for (a, b) in m.iter().zip(IDENTITY) {
        assert!((a - b).abs() < 1e-6, "{m:?}");
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(spotreg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

/// The generated header declares every exported symbol and is valid C.
#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/spotreg.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in [
        "spotreg_last_error", "spotreg_version", "spotreg_cloud_from_xyz", "spotreg_cloud_load", "spotreg_cloud_len",
        "spotreg_cloud_free", "spotreg_pipeline_new", "spotreg_pipeline_free", "spotreg_register", "spotreg_kabsch",
        "spotreg_rre", "spotreg_rte",
    ] {
        assert!(text.contains(&format!("{f}(")), "{f} missing from header");
    }
    let probe = "#include \"spotreg.h\"\nint main(void) { SpotregCloud *c = 0; double m[16];\n\
                 SpotregStatus s = spotreg_kabsch(0, 0, 0, 0, m); spotreg_cloud_free(c); return s == SPOTREG_STATUS_OK; }\n";
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(&src, probe).unwrap();
    match Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-I"]).arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include")).arg(&src).output() {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("skipping C syntax check: {e}"),
    }
}
