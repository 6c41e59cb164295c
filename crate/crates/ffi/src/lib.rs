//! C ABI over the `spotreg` pipeline.
//!
//! Clouds and pipelines are opaque heap handles released with their `_free`
//! function. Every fallible call returns a [`SpotregStatus`]; on failure the
//! message is available from [`spotreg_last_error`] on the same thread.
//! Transforms cross the boundary as 16 row-major doubles.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use nalgebra::{Matrix4, Point3};
use spotreg::bench::{parse_toml, RunConfig};
use spotreg::geometry::io::{load_cloud, CloudFormat};
use spotreg::geometry::{rre, rte, weighted_kabsch};
use spotreg::pipeline::{Pipeline, PipelineConfig};
use spotreg::{Correspondence, Error, PointCloud, RigidTransform};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpotregStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Degenerate = 3,
    DimensionMismatch = 4,
    Empty = 5,
    Parse = 6,
    NoConsensus = 7,
    Io = 8,
    Panic = 9,
}

/// Opaque point cloud.
pub struct SpotregCloud(PointCloud);

/// Opaque configured pipeline.
pub struct SpotregPipeline(Pipeline);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SpotregStatus {
    match e {
        Error::Degenerate(_) => SpotregStatus::Degenerate,
        Error::DimensionMismatch(_) => SpotregStatus::DimensionMismatch,
        Error::InvalidInput(_) => SpotregStatus::InvalidInput,
        Error::Empty(_) => SpotregStatus::Empty,
        Error::Parse { .. } => SpotregStatus::Parse,
        Error::NoConsensus(_) => SpotregStatus::NoConsensus,
        Error::Io(_) => SpotregStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SpotregStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpotregStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            SpotregStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            SpotregStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(p)
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    let s = CStr::from_ptr(non_null(p, what)?);
    s.to_str().map_err(|_| Failure::Lib(Error::InvalidInput(format!("{what} is not UTF-8"))))
}

unsafe fn points_arg(xyz: *const f64, n: usize, what: &'static str) -> Result<Vec<Point3<f64>>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let v = slice::from_raw_parts(non_null(xyz, what)?, 3 * n);
    Ok(v.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect())
}

unsafe fn transform_arg(m: *const f64, what: &'static str) -> Result<RigidTransform, Failure> {
    let v = slice::from_raw_parts(non_null(m, what)?, 16);
    Ok(RigidTransform::from_homogeneous(&Matrix4::from_row_slice(v))?)
}

unsafe fn write_transform(t: &RigidTransform, out: *mut f64) {
    let h = t.to_homogeneous();
    let out = slice::from_raw_parts_mut(out, 16);
    for r in 0..4 {
        for c in 0..4 {
            out[4 * r + c] = h[(r, c)];
        }
    }
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn spotreg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn spotreg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a cloud from `n` packed `x y z` triples.
///
/// # Safety
/// `xyz` must point to `3 * n` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spotreg_cloud_from_xyz(xyz: *const f64, n: usize, out: *mut *mut SpotregCloud) -> SpotregStatus {
    guard(|| {
        non_null(out, "out")?;
        let cloud = PointCloud::new(points_arg(xyz, n, "xyz")?)?;
        *out = Box::into_raw(Box::new(SpotregCloud(cloud)));
        Ok(())
    })
}

/// Loads a cloud from disk. `format` is `"kitti-bin"`, `"ply"`, `"xyz"`, or
/// NULL to infer it from the extension.
///
/// # Safety
/// `path` and a non-NULL `format` must be NUL-terminated; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn spotreg_cloud_load(path: *const c_char, format: *const c_char, out: *mut *mut SpotregCloud) -> SpotregStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = str_arg(path, "path")?;
        let format = if format.is_null() { None } else { Some(str_arg(format, "format")?.parse::<CloudFormat>()?) };
        let cloud = load_cloud(Path::new(path), format)?;
        *out = Box::into_raw(Box::new(SpotregCloud(cloud)));
        Ok(())
    })
}

/// Number of points; 0 for NULL.
///
/// # Safety
/// `cloud` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spotreg_cloud_len(cloud: *const SpotregCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.0.len())
}

/// # Safety
/// `cloud` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spotreg_cloud_free(cloud: *mut SpotregCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Creates a pipeline. `config_toml` holds a run configuration in TOML (its
/// `[pipeline]` table is used) or is NULL for defaults.
///
/// # Safety
/// A non-NULL `config_toml` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spotreg_pipeline_new(config_toml: *const c_char, out: *mut *mut SpotregPipeline) -> SpotregStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg = if config_toml.is_null() {
            PipelineConfig::default()
        } else {
            parse_toml::<RunConfig>(str_arg(config_toml, "config_toml")?)?.pipeline
        };
        *out = Box::into_raw(Box::new(SpotregPipeline(Pipeline::new(cfg)?)));
        Ok(())
    })
}

/// # Safety
/// `pipeline` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spotreg_pipeline_free(pipeline: *mut SpotregPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Registers `source` onto `target`, writing the transform to `out_matrix`.
/// `fine_failed` may be NULL; otherwise it receives 1 when the reported
/// pose comes from the coarse stage.
///
/// # Safety
/// Handles must be live; `out_matrix` must hold 16 doubles.
#[no_mangle]
pub unsafe extern "C" fn spotreg_register(
    pipeline: *const SpotregPipeline,
    source: *const SpotregCloud,
    target: *const SpotregCloud,
    out_matrix: *mut f64,
    fine_failed: *mut i32,
) -> SpotregStatus {
    guard(|| {
        let p = &*non_null(pipeline, "pipeline")?;
        let s = &*non_null(source, "source")?;
        let t = &*non_null(target, "target")?;
        non_null(out_matrix, "out_matrix")?;
        let reg = p.0.register(&s.0, &t.0)?;
        write_transform(&reg.transform, out_matrix);
        if !fine_failed.is_null() {
            *fine_failed = i32::from(reg.fine_failed);
        }
        Ok(())
    })
}

/// Weighted least-squares rigid fit of `n` point pairs; `weights` may be
/// NULL for unit weights.
///
/// # Safety
/// `source` and `target` must hold `3 * n` doubles, a non-NULL `weights`
/// `n` doubles, and `out_matrix` 16 doubles.
#[no_mangle]
pub unsafe extern "C" fn spotreg_kabsch(
    source: *const f64,
    target: *const f64,
    weights: *const f64,
    n: usize,
    out_matrix: *mut f64,
) -> SpotregStatus {
    guard(|| {
        non_null(out_matrix, "out_matrix")?;
        let s = points_arg(source, n, "source")?;
        let t = points_arg(target, n, "target")?;
        let w = if weights.is_null() || n == 0 { vec![1.0; n] } else { slice::from_raw_parts(weights, n).to_vec() };
        let corrs: Vec<Correspondence> = s.into_iter().zip(t).zip(w).map(|((a, b), w)| Correspondence::new(a, b, w)).collect();
        write_transform(&weighted_kabsch(&corrs)?, out_matrix);
        Ok(())
    })
}

/// Rotation error in degrees between two rigid transforms.
///
/// # Safety
/// `estimate` and `truth` must hold 16 doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spotreg_rre(estimate: *const f64, truth: *const f64, out: *mut f64) -> SpotregStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = rre(&transform_arg(estimate, "estimate")?, &transform_arg(truth, "truth")?);
        Ok(())
    })
}

/// Translation error between two rigid transforms.
///
/// # Safety
/// `estimate` and `truth` must hold 16 doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spotreg_rte(estimate: *const f64, truth: *const f64, out: *mut f64) -> SpotregStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = rte(&transform_arg(estimate, "estimate")?, &transform_arg(truth, "truth")?);
        Ok(())
    })
}
