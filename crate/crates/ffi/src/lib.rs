//! C ABI for the pose9 toolkit.
//!
//! Every object crossing the boundary is an opaque handle created and
//! destroyed by this library; all functions return a [`Pose9Status`]
//! and write results through out-pointers. The generated header lives
//! in `include/pose9.h`.
//!
//! Handles are not thread-safe; do not share one handle across threads
//! without external synchronization. Passing a handle after freeing it
//! is undefined behavior, as in any C API.

use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use pose9::error::Error;
use pose9::fitter::{fit_instance, FitConfig, FitResult, InitScheme, Preset};
use pose9::metrics::pose_error;
use pose9::symmetry::CategoryProfile;
use pose9::synthgen::{category_profile, make_instance, GenConfig, Instance};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pose9Status {
    Pose9Ok = 0,
    /// Bad configuration or argument (unknown category, bad preset,
    /// zero sizes, malformed UTF-8, ...).
    Pose9InvalidArgument = 1,
    /// Filesystem or parse failure.
    Pose9Io = 2,
    /// Numerical failure (divergence, no RANSAC consensus, degenerate
    /// input).
    Pose9Numerical = 3,
    /// A required pointer was null.
    Pose9NullPointer = 4,
    /// A panic crossed the boundary and was contained.
    Pose9Panic = 5,
}

use Pose9Status::*;

fn status_of(err: &Error) -> Pose9Status {
    match err {
        Error::Io(_) | Error::Parse { .. } | Error::IdentifierMismatch(_) => Pose9Io,
        Error::Divergence { .. }
        | Error::NoConsensus { .. }
        | Error::NoInliers
        | Error::DegenerateInput(_) => Pose9Numerical,
        _ => Pose9InvalidArgument,
    }
}

/// Opaque category profile (mean-shape prior, mean size, symmetry).
pub struct Pose9Profile(CategoryProfile);

/// Opaque synthetic instance (observed cloud plus ground truth).
pub struct Pose9Instance(Instance);

/// Opaque fit outcome.
pub struct Pose9Fit(FitResult, Instance);

/// Static name for a status code, e.g. for log messages.
#[no_mangle]
pub extern "C" fn pose9_status_name(status: Pose9Status) -> *const c_char {
    let s: &'static [u8] = match status {
        Pose9Ok => b"ok\0",
        Pose9InvalidArgument => b"invalid argument\0",
        Pose9Io => b"io error\0",
        Pose9Numerical => b"numerical failure\0",
        Pose9NullPointer => b"null pointer\0",
        Pose9Panic => b"panic\0",
    };
    s.as_ptr() as *const c_char
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn pose9_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn cstr<'a>(p: *const c_char) -> Result<&'a str, Pose9Status> {
    if p.is_null() {
        return Err(Pose9NullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| Pose9InvalidArgument)
}

fn guarded<F: FnOnce() -> Pose9Status>(f: F) -> Pose9Status {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or(Pose9Panic)
}

/// Builds the profile of a named category.
///
/// `category` is one of "bowl", "box", "camera", "can", "laptop";
/// `prior_points` is the prior cloud resolution (0 picks the default).
#[no_mangle]
pub unsafe extern "C" fn pose9_profile_new(
    category: *const c_char,
    prior_points: usize,
    out: *mut *mut Pose9Profile,
) -> Pose9Status {
    guarded(|| {
        if out.is_null() {
            return Pose9NullPointer;
        }
        let name = match cstr(category) {
            Ok(s) => s,
            Err(e) => return e,
        };
        let points = if prior_points == 0 {
            GenConfig::default().prior_points
        } else {
            prior_points
        };
        match category_profile(name, points) {
            Ok(profile) => {
                *out = Box::into_raw(Box::new(Pose9Profile(profile)));
                Pose9Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn pose9_profile_free(profile: *mut Pose9Profile) {
    if !profile.is_null() {
        drop(Box::from_raw(profile));
    }
}

/// Generates a deterministic synthetic instance.
///
/// `points` of 0 picks the default cloud size. `noise_sigma` is in
/// meters; `outlier_fraction` in [0, 0.9).
#[no_mangle]
pub unsafe extern "C" fn pose9_instance_new(
    category: *const c_char,
    seed: u64,
    points: usize,
    noise_sigma: f64,
    outlier_fraction: f64,
    out: *mut *mut Pose9Instance,
) -> Pose9Status {
    guarded(|| {
        if out.is_null() {
            return Pose9NullPointer;
        }
        let name = match cstr(category) {
            Ok(s) => s,
            Err(e) => return e,
        };
        let mut cfg = GenConfig {
            noise_sigma,
            outlier_fraction,
            ..GenConfig::default()
        };
        if points != 0 {
            cfg.points = points;
        }
        match make_instance(name, seed, &cfg) {
            Ok(inst) => {
                *out = Box::into_raw(Box::new(Pose9Instance(inst)));
                Pose9Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn pose9_instance_free(instance: *mut Pose9Instance) {
    if !instance.is_null() {
        drop(Box::from_raw(instance));
    }
}

/// Number of observed points.
#[no_mangle]
pub unsafe extern "C" fn pose9_instance_len(instance: *const Pose9Instance) -> usize {
    if instance.is_null() {
        return 0;
    }
    (*instance).0.observed.len()
}

/// Copies the observed cloud into `buffer` as x,y,z triples; `buffer`
/// must hold `3 * pose9_instance_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pose9_instance_observed(
    instance: *const Pose9Instance,
    buffer: *mut f64,
) -> Pose9Status {
    guarded(|| {
        if instance.is_null() || buffer.is_null() {
            return Pose9NullPointer;
        }
        for (i, p) in (*instance).0.observed.points.iter().enumerate() {
            *buffer.add(3 * i) = p.x;
            *buffer.add(3 * i + 1) = p.y;
            *buffer.add(3 * i + 2) = p.z;
        }
        Pose9Ok
    })
}

/// Fits one instance with an ablation preset ("a1".."d", case
/// insensitive). `max_steps` of 0 picks the default budget.
#[no_mangle]
pub unsafe extern "C" fn pose9_fit(
    instance: *const Pose9Instance,
    profile: *const Pose9Profile,
    preset: *const c_char,
    seed: u64,
    max_steps: usize,
    out: *mut *mut Pose9Fit,
) -> Pose9Status {
    guarded(|| {
        if instance.is_null() || profile.is_null() || out.is_null() {
            return Pose9NullPointer;
        }
        let preset: Preset = match cstr(preset).map(str::parse) {
            Ok(Ok(p)) => p,
            Ok(Err(e)) => return status_of(&e),
            Err(e) => return e,
        };
        let mut cfg = FitConfig {
            init: InitScheme::Multistart,
            seed,
            ..FitConfig::default()
        }
        .with_preset(preset);
        if max_steps != 0 {
            cfg.max_steps = max_steps;
        }
        let inst = &(*instance).0;
        match fit_instance(inst, &(*profile).0, &cfg) {
            Ok(fit) => {
                *out = Box::into_raw(Box::new(Pose9Fit(fit, inst.clone())));
                Pose9Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn pose9_fit_free(fit: *mut Pose9Fit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Recovered pose: rotation as 9 doubles (row-major), translation and
/// size as 3 doubles each. Null out-pointers are skipped.
#[no_mangle]
pub unsafe extern "C" fn pose9_fit_pose(
    fit: *const Pose9Fit,
    rotation: *mut f64,
    translation: *mut f64,
    size: *mut f64,
) -> Pose9Status {
    guarded(|| {
        if fit.is_null() {
            return Pose9NullPointer;
        }
        let pose = &(*fit).0.pose;
        if !rotation.is_null() {
            for r in 0..3 {
                for c in 0..3 {
                    *rotation.add(3 * r + c) = pose.rotation.column(c)[r];
                }
            }
        }
        if !translation.is_null() {
            for k in 0..3 {
                *translation.add(k) = pose.translation[k];
            }
        }
        if !size.is_null() {
            for k in 0..3 {
                *size.add(k) = pose.size[k];
            }
        }
        Pose9Ok
    })
}

/// Final weighted loss of the winning branch.
#[no_mangle]
pub unsafe extern "C" fn pose9_fit_final_loss(fit: *const Pose9Fit) -> f64 {
    if fit.is_null() {
        return f64::NAN;
    }
    (*fit).0.report.total
}

/// Accepted descent steps of the winning branch.
#[no_mangle]
pub unsafe extern "C" fn pose9_fit_steps(fit: *const Pose9Fit) -> usize {
    if fit.is_null() {
        return 0;
    }
    (*fit).0.steps
}

/// Copies the recovered inlier labels (1 inlier, 0 outlier) into
/// `buffer`, which must hold `pose9_instance_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pose9_fit_inliers(
    fit: *const Pose9Fit,
    buffer: *mut u8,
) -> Pose9Status {
    guarded(|| {
        if fit.is_null() || buffer.is_null() {
            return Pose9NullPointer;
        }
        for (i, label) in (*fit).0.mask.labels.iter().enumerate() {
            *buffer.add(i) = *label as u8;
        }
        Pose9Ok
    })
}

/// Symmetry-aware error of the fit against the instance ground truth.
/// Null out-pointers are skipped.
#[no_mangle]
pub unsafe extern "C" fn pose9_fit_error(
    fit: *const Pose9Fit,
    profile: *const Pose9Profile,
    rotation_deg: *mut f64,
    translation: *mut f64,
    iou: *mut f64,
) -> Pose9Status {
    guarded(|| {
        if fit.is_null() || profile.is_null() {
            return Pose9NullPointer;
        }
        let err = pose_error(&(*fit).0.pose, &(*fit).1.pose_gt, &(*profile).0.symmetry);
        if !rotation_deg.is_null() {
            *rotation_deg = err.rotation_deg;
        }
        if !translation.is_null() {
            *translation = err.translation;
        }
        if !iou.is_null() {
            *iou = err.iou;
        }
        Pose9Ok
    })
}
