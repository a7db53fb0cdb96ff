//! C ABI over the `gmfm` library.
//!
//! Every fallible function returns a `GmfmStatus`. On failure the message is
//! kept per thread and can be read with `gmfm_last_error`. Handles are opaque
//! and must be released with their matching `_free` function.
//!
//! Matrices crossing the boundary are row-major. A data series of `T` slices
//! of `p1 x p2` holds cell `(i, j, t)` at `(t * p1 + i) * p2 + j`; NaN marks a
//! missing cell.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gmfm::evalsim::{ccor, Estimator};
use gmfm::fit::FitOutput;
use gmfm::io::read_bundle;
use gmfm::mm::{mm_fit, MmConfig};
use gmfm::selection::{select_factor_numbers, SelectionGrid};
use gmfm::tsam::{tsam_fit, TsamConfig};
use gmfm::{Dataset, FamilyBlock, FamilyKind, FamilyMap, GmfmError, MatrixSeries};
use nalgebra::DMatrix;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GmfmStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Malformed data, out-of-support values or an invalid configuration.
    InvalidInput = 2,
    /// The fit failed numerically.
    Numerical = 3,
    /// A buffer was too small; the required length was written back.
    BufferTooSmall = 4,
    /// The library panicked. This is a bug.
    Internal = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GmfmFamily {
    Gaussian = 0,
    Poisson = 1,
    Logit = 2,
    Probit = 3,
    Tobit = 4,
}

impl From<GmfmFamily> for FamilyKind {
    fn from(f: GmfmFamily) -> Self {
        match f {
            GmfmFamily::Gaussian => FamilyKind::Gaussian,
            GmfmFamily::Poisson => FamilyKind::Poisson,
            GmfmFamily::Logit => FamilyKind::Logit,
            GmfmFamily::Probit => FamilyKind::Probit,
            GmfmFamily::Tobit => FamilyKind::Tobit,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GmfmAlgo {
    Tsam = 0,
    Mm = 1,
}

/// Solver settings. `gmfm_fit_options_default` fills in the library defaults.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GmfmFitOptions {
    pub algo: GmfmAlgo,
    pub restarts: usize,
    pub seed: u64,
    /// Relative convergence tolerance; zero keeps the default.
    pub tol: f64,
}

/// A data series with its family assignment.
pub struct GmfmData {
    series: MatrixSeries,
    map: FamilyMap,
}

/// A fitted model.
pub struct GmfmFit {
    out: FitOutput,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(err: &GmfmError) -> GmfmStatus {
    set_error(&err.to_string());
    if err.is_input_error() {
        GmfmStatus::InvalidInput
    } else {
        GmfmStatus::Numerical
    }
}

fn guard(f: impl FnOnce() -> GmfmStatus) -> GmfmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            GmfmStatus::Internal
        }
    }
}

macro_rules! non_null {
    ($($p:expr),+) => {
        if $($p.is_null())||+ {
            set_error("null pointer argument");
            return GmfmStatus::NullPointer;
        }
    };
}

fn family_from_raw(raw: i32) -> Option<GmfmFamily> {
    Some(match raw {
        0 => GmfmFamily::Gaussian,
        1 => GmfmFamily::Poisson,
        2 => GmfmFamily::Logit,
        3 => GmfmFamily::Probit,
        4 => GmfmFamily::Tobit,
        _ => return None,
    })
}

fn bad_family(raw: i32) -> GmfmStatus {
    set_error(&format!("unknown family code {raw}"));
    GmfmStatus::InvalidInput
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gmfm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread. The pointer stays valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gmfm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a data handle from `p1 * p2 * t` values with every cell in
/// `family` (a `GmfmFamily` code).
///
/// # Safety
/// `values` must point to `p1 * p2 * t` readable doubles and `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn gmfm_data_new(
    p1: usize,
    p2: usize,
    t: usize,
    values: *const f64,
    family: i32,
    out: *mut *mut GmfmData,
) -> GmfmStatus {
    guard(|| {
        non_null!(values, out);
        let Some(family) = family_from_raw(family) else {
            return bad_family(family);
        };
        let Some(n) = p1.checked_mul(p2).and_then(|n| n.checked_mul(t)) else {
            set_error("dimensions overflow");
            return GmfmStatus::InvalidInput;
        };
        let values = std::slice::from_raw_parts(values, n).to_vec();
        let mask: Vec<bool> = values.iter().map(|v| !v.is_nan()).collect();
        let series = match MatrixSeries::with_mask(p1, p2, t, values, Some(mask)) {
            Ok(s) => s,
            Err(e) => return fail(&e),
        };
        *out = Box::into_raw(Box::new(GmfmData {
            series,
            map: FamilyMap::uniform(family.into()),
        }));
        GmfmStatus::Ok
    })
}

/// Assigns `family` to the one-based inclusive block of rows, columns and
/// slices. Later blocks override earlier ones.
///
/// # Safety
/// `data` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn gmfm_data_set_family_block(
    data: *mut GmfmData,
    row_first: usize,
    row_last: usize,
    col_first: usize,
    col_last: usize,
    slice_first: usize,
    slice_last: usize,
    family: i32,
) -> GmfmStatus {
    guard(|| {
        non_null!(data);
        let Some(family) = family_from_raw(family) else {
            return bad_family(family);
        };
        let data = &mut *data;
        let mut map = data.map.clone();
        map.blocks.push(FamilyBlock {
            rows: [row_first, row_last],
            cols: [col_first, col_last],
            slices: [slice_first, slice_last],
            family: family.into(),
        });
        let s = &data.series;
        if let Err(e) = map.resolve(s.p1(), s.p2(), s.t()) {
            return fail(&e);
        }
        data.map = map;
        GmfmStatus::Ok
    })
}

/// Reads a bundle directory holding `meta.json` and `data.csv`.
///
/// # Safety
/// `dir` must be a NUL-terminated UTF-8 path and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gmfm_data_load_bundle(dir: *const c_char, out: *mut *mut GmfmData) -> GmfmStatus {
    guard(|| {
        non_null!(dir, out);
        let Ok(dir) = CStr::from_ptr(dir).to_str() else {
            set_error("path is not valid UTF-8");
            return GmfmStatus::InvalidInput;
        };
        match read_bundle(Path::new(dir)) {
            Ok(b) => {
                *out = Box::into_raw(Box::new(GmfmData {
                    series: b.data.series().clone(),
                    map: b.data.map().clone(),
                }));
                GmfmStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Writes the dimensions of a data handle; any output pointer may be null.
///
/// # Safety
/// `data` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn gmfm_data_dims(data: *const GmfmData, p1: *mut usize, p2: *mut usize, t: *mut usize) -> GmfmStatus {
    guard(|| {
        non_null!(data);
        let s = &(*data).series;
        for (p, v) in [(p1, s.p1()), (p2, s.p2()), (t, s.t())] {
            if !p.is_null() {
                *p = v;
            }
        }
        GmfmStatus::Ok
    })
}

/// # Safety
/// `data` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gmfm_data_free(data: *mut GmfmData) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

#[no_mangle]
pub extern "C" fn gmfm_fit_options_default() -> GmfmFitOptions {
    let d = TsamConfig::new(1, 1);
    GmfmFitOptions {
        algo: GmfmAlgo::Tsam,
        restarts: d.restarts,
        seed: d.seed,
        tol: 0.0,
    }
}

fn estimator(opts: &GmfmFitOptions, k1: usize, k2: usize) -> Estimator {
    match opts.algo {
        GmfmAlgo::Tsam => {
            let mut c = TsamConfig::new(k1, k2);
            c.restarts = opts.restarts;
            c.seed = opts.seed;
            if opts.tol > 0.0 {
                c.tol = opts.tol;
            }
            Estimator::Tsam(c)
        }
        GmfmAlgo::Mm => {
            let mut c = MmConfig::new(k1, k2);
            c.restarts = opts.restarts;
            c.seed = opts.seed;
            if opts.tol > 0.0 {
                c.error_tol = opts.tol;
            }
            Estimator::Mm(c)
        }
    }
}

fn dataset(data: &GmfmData) -> Result<Dataset, GmfmError> {
    Dataset::new(data.series.clone(), data.map.clone())
}

/// Fits a model with `k1` row and `k2` column factors. A null `opts` uses
/// the defaults.
///
/// # Safety
/// `data` must be a live handle, `opts` null or readable, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gmfm_fit(
    data: *const GmfmData,
    k1: usize,
    k2: usize,
    opts: *const GmfmFitOptions,
    out: *mut *mut GmfmFit,
) -> GmfmStatus {
    guard(|| {
        non_null!(data, out);
        let opts = if opts.is_null() { gmfm_fit_options_default() } else { *opts };
        let result = dataset(&*data).and_then(|d| match estimator(&opts, k1, k2) {
            Estimator::Tsam(c) => tsam_fit(&d, &c),
            Estimator::Mm(c) => mm_fit(&d, &c),
            Estimator::AlphaPca { .. } => unreachable!(),
        });
        match result {
            Ok(fit) => {
                *out = Box::into_raw(Box::new(GmfmFit { out: fit }));
                GmfmStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Writes `p1, p2, T, k1, k2` of a fit; any output pointer may be null.
///
/// # Safety
/// `fit` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn gmfm_fit_dims(
    fit: *const GmfmFit,
    p1: *mut usize,
    p2: *mut usize,
    t: *mut usize,
    k1: *mut usize,
    k2: *mut usize,
) -> GmfmStatus {
    guard(|| {
        non_null!(fit);
        let th = &(*fit).out.theta;
        for (p, v) in [(p1, th.p1()), (p2, th.p2()), (t, th.t()), (k1, th.k1()), (k2, th.k2())] {
            if !p.is_null() {
                *p = v;
            }
        }
        GmfmStatus::Ok
    })
}

/// Maximised log-likelihood of the fit.
///
/// # Safety
/// `fit` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gmfm_fit_loglik(fit: *const GmfmFit, out: *mut f64) -> GmfmStatus {
    guard(|| {
        non_null!(fit, out);
        *out = (*fit).out.report.loglik;
        GmfmStatus::Ok
    })
}

unsafe fn copy_out(values: impl ExactSizeIterator<Item = f64>, buf: *mut f64, len: *mut usize) -> GmfmStatus {
    non_null!(len);
    let need = values.len();
    if buf.is_null() || *len < need {
        *len = need;
        set_error(&format!("buffer needs {need} doubles"));
        return GmfmStatus::BufferTooSmall;
    }
    for (k, v) in values.enumerate() {
        *buf.add(k) = v;
    }
    *len = need;
    GmfmStatus::Ok
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Copies the `p1 x k1` row loadings, row-major. `len` holds the buffer
/// capacity on entry and the number of doubles written (or needed) on exit.
///
/// # Safety
/// `fit` must be a live handle, `len` writable, `buf` null or writable for
/// `*len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gmfm_fit_row_loadings(fit: *const GmfmFit, buf: *mut f64, len: *mut usize) -> GmfmStatus {
    guard(|| {
        non_null!(fit);
        copy_out(row_major(&(*fit).out.theta.r).into_iter(), buf, len)
    })
}

/// Copies the `p2 x k2` column loadings, row-major; see
/// `gmfm_fit_row_loadings` for the buffer protocol.
///
/// # Safety
/// As for `gmfm_fit_row_loadings`.
#[no_mangle]
pub unsafe extern "C" fn gmfm_fit_col_loadings(fit: *const GmfmFit, buf: *mut f64, len: *mut usize) -> GmfmStatus {
    guard(|| {
        non_null!(fit);
        copy_out(row_major(&(*fit).out.theta.c).into_iter(), buf, len)
    })
}

/// Copies the `T` factor matrices of `k1 x k2`, each row-major, back to back.
///
/// # Safety
/// As for `gmfm_fit_row_loadings`.
#[no_mangle]
pub unsafe extern "C" fn gmfm_fit_factors(fit: *const GmfmFit, buf: *mut f64, len: *mut usize) -> GmfmStatus {
    guard(|| {
        non_null!(fit);
        let all: Vec<f64> = (*fit).out.theta.f.iter().flat_map(row_major).collect();
        copy_out(all.into_iter(), buf, len)
    })
}

/// # Safety
/// `fit` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gmfm_fit_free(fit: *mut GmfmFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Chooses the factor numbers over `1..=l1_max` x `1..=l2_max`. A nonzero
/// `warm` seeds each grid cell from its neighbour.
///
/// # Safety
/// `data` must be a live handle, `opts` null or readable, `k1` and `k2`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn gmfm_select(
    data: *const GmfmData,
    l1_max: usize,
    l2_max: usize,
    warm: i32,
    opts: *const GmfmFitOptions,
    k1: *mut usize,
    k2: *mut usize,
) -> GmfmStatus {
    guard(|| {
        non_null!(data, k1, k2);
        let opts = if opts.is_null() { gmfm_fit_options_default() } else { *opts };
        let grid = SelectionGrid {
            l1_max,
            l2_max,
            warm: warm != 0,
        };
        match dataset(&*data).and_then(|d| select_factor_numbers(&d, &grid, &estimator(&opts, 1, 1))) {
            Ok(s) => {
                *k1 = s.k1;
                *k2 = s.k2;
                GmfmStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Smallest canonical correlation between the columns of two row-major
/// matrices with `rows` rows and `ka`, `kb` columns.
///
/// # Safety
/// `a` and `b` must hold `rows * ka` and `rows * kb` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gmfm_ccor(
    a: *const f64,
    b: *const f64,
    rows: usize,
    ka: usize,
    kb: usize,
    out: *mut f64,
) -> GmfmStatus {
    guard(|| {
        non_null!(a, b, out);
        let a = DMatrix::from_row_slice(rows, ka, std::slice::from_raw_parts(a, rows * ka));
        let b = DMatrix::from_row_slice(rows, kb, std::slice::from_raw_parts(b, rows * kb));
        match ccor(&a, &b) {
            Ok(v) => {
                *out = v;
                GmfmStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Log-likelihood of one observation `x` at natural parameter `pi`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gmfm_loglik_cell(family: i32, x: f64, pi: f64, out: *mut f64) -> GmfmStatus {
    guard(|| {
        non_null!(out);
        let Some(family) = family_from_raw(family) else {
            return bad_family(family);
        };
        match gmfm::families::loglik_cell(family.into(), x, pi) {
            Ok(v) => {
                *out = v;
                GmfmStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}
