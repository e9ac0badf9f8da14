// SPDX-License-Identifier: MIT OR Apache-2.0

//! C ABI over the headbias library.
//!
//! Objects are opaque handles created by `hb_*_load` / `hb_audit_run` and
//! released with the matching `hb_*_free`. Every fallible call returns an
//! [`HbStatus`]; on failure `hb_last_error_message` describes the error on
//! the calling thread. Strings returned by the library are freed with
//! `hb_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use headbias::audit::{run_audit, AuditConfig, AuditReport};
use headbias::decomposition::{classify, head_means, HeadId};
use headbias::error::{AuditError, RankingError, StatsError};
use headbias::stats::{chi2_counts, cramers_v};
use headbias::store::{load_classifier, load_prototypes, load_store};
use headbias::{ClassifierMatrix, HeadContributionStore, PrototypeSet};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    Validation = 5,
    Dimension = 6,
    Untestable = 7,
    Infeasible = 8,
    Panic = 9,
}

pub struct HbStore(HeadContributionStore);
pub struct HbPrototypes(PrototypeSet);
pub struct HbClassifier(ClassifierMatrix);
pub struct HbReport {
    report: AuditReport,
    json: CString,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HbDims {
    pub n_images: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HbHeadId {
    pub layer: u32,
    pub head: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HbChi2 {
    pub chi2: f64,
    pub dof: usize,
    pub dof_before_drop: usize,
    pub p_value: f64,
    pub n: u64,
    pub rows: usize,
    pub cols: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("nul bytes removed"));
}

struct Failure(HbStatus, String);

impl From<headbias::StoreError> for Failure {
    fn from(e: headbias::StoreError) -> Self {
        use headbias::StoreError as S;
        let status = match &e {
            S::Io { .. } => HbStatus::Io,
            S::Manifest { .. } | S::Truncated { .. } | S::LengthMismatch { .. } | S::TrailingBytes { .. } => {
                HbStatus::Format
            }
            S::DimensionMismatch { .. } | S::Incompatible(_) => HbStatus::Dimension,
            _ => HbStatus::Validation,
        };
        Failure(status, e.to_string())
    }
}

impl From<headbias::DecompositionError> for Failure {
    fn from(e: headbias::DecompositionError) -> Self {
        Failure(HbStatus::Dimension, e.to_string())
    }
}

impl From<StatsError> for Failure {
    fn from(e: StatsError) -> Self {
        let status = match e {
            StatsError::Untestable(_) => HbStatus::Untestable,
            StatsError::DegenerateTable { .. } => HbStatus::Dimension,
            _ => HbStatus::Validation,
        };
        Failure(status, e.to_string())
    }
}

impl From<AuditError> for Failure {
    fn from(e: AuditError) -> Self {
        match e {
            AuditError::Store(s) => s.into(),
            AuditError::Decomposition(d) => d.into(),
            AuditError::Stats(s) => s.into(),
            AuditError::Ranking(RankingError::Stats(s)) => s.into(),
            AuditError::Ranking(RankingError::Decomposition(d)) => d.into(),
            AuditError::InfeasibleProfile { .. } => Failure(HbStatus::Infeasible, e.to_string()),
            other => Failure(HbStatus::Validation, other.to_string()),
        }
    }
}

/// Runs `f`, converting failures and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HbStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {message}"));
            HbStatus::Panic
        }
    }
}

fn null() -> Failure {
    Failure(HbStatus::NullPointer, "null pointer argument".into())
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null());
    }
    // SAFETY: caller passes a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|e| Failure(HbStatus::InvalidUtf8, e.to_string()))
}

unsafe fn out_arg<'a, T>(p: *mut T) -> Result<&'a mut T, Failure> {
    // SAFETY: caller passes a valid, writable pointer or null.
    unsafe { p.as_mut() }.ok_or_else(null)
}

unsafe fn ref_arg<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    // SAFETY: caller passes a live handle or null.
    unsafe { p.as_ref() }.ok_or_else(null)
}

/// Message of the last failed call on this thread. Valid until the next
/// call on the same thread; never null.
#[no_mangle]
pub extern "C" fn hb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn hb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hb_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: produced by CString::into_raw in this crate.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Loads a store directory.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hb_store_load(path: *const c_char, out: *mut *mut HbStore) -> HbStatus {
    guard(|| {
        let out = unsafe { out_arg(out) }?;
        *out = ptr::null_mut();
        let store = load_store(unsafe { str_arg(path) }?)?;
        *out = Box::into_raw(Box::new(HbStore(store)));
        Ok(())
    })
}

/// # Safety
/// `store` must be null or a handle from `hb_store_load`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hb_store_free(store: *mut HbStore) {
    if !store.is_null() {
        drop(unsafe { Box::from_raw(store) });
    }
}

/// # Safety
/// `store` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hb_store_dims(store: *const HbStore, out: *mut HbDims) -> HbStatus {
    guard(|| {
        let s = &unsafe { ref_arg(store) }?.0;
        *unsafe { out_arg(out) }? = HbDims {
            n_images: s.n_images(),
            n_layers: s.n_layers(),
            n_heads: s.n_heads(),
            embed_dim: s.embed_dim(),
            n_classes: s.n_classes(),
        };
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hb_prototypes_load(path: *const c_char, out: *mut *mut HbPrototypes) -> HbStatus {
    guard(|| {
        let out = unsafe { out_arg(out) }?;
        *out = ptr::null_mut();
        let set = load_prototypes(unsafe { str_arg(path) }?)?;
        *out = Box::into_raw(Box::new(HbPrototypes(set)));
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a handle from `hb_prototypes_load`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hb_prototypes_free(p: *mut HbPrototypes) {
    if !p.is_null() {
        drop(unsafe { Box::from_raw(p) });
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hb_classifier_load(path: *const c_char, out: *mut *mut HbClassifier) -> HbStatus {
    guard(|| {
        let out = unsafe { out_arg(out) }?;
        *out = ptr::null_mut();
        let c = load_classifier(unsafe { str_arg(path) }?)?;
        *out = Box::into_raw(Box::new(HbClassifier(c)));
        Ok(())
    })
}

/// # Safety
/// `c` must be null or a handle from `hb_classifier_load`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hb_classifier_free(c: *mut HbClassifier) {
    if !c.is_null() {
        drop(unsafe { Box::from_raw(c) });
    }
}

/// Predicts every image, mean-ablating `heads` (may be null when
/// `n_ablate` is 0). `predictions` must hold `n_images` entries.
///
/// # Safety
/// Handles must be live; `heads` must point to `n_ablate` entries and
/// `predictions` to `capacity` writable entries.
#[no_mangle]
pub unsafe extern "C" fn hb_classify(
    store: *const HbStore,
    classifier: *const HbClassifier,
    heads: *const HbHeadId,
    n_ablate: usize,
    predictions: *mut u32,
    capacity: usize,
) -> HbStatus {
    guard(|| {
        let s = &unsafe { ref_arg(store) }?.0;
        let c = &unsafe { ref_arg(classifier) }?.0;
        if predictions.is_null() || (heads.is_null() && n_ablate > 0) {
            return Err(null());
        }
        if capacity < s.n_images() {
            return Err(Failure(
                HbStatus::Dimension,
                format!("prediction buffer holds {capacity} entries, store has {} images", s.n_images()),
            ));
        }
        let ids: Vec<HeadId> = if n_ablate == 0 {
            Vec::new()
        } else {
            // SAFETY: checked non-null; caller guarantees the length.
            unsafe { std::slice::from_raw_parts(heads, n_ablate) }
                .iter()
                .map(|h| HeadId {
                    layer: h.layer as usize,
                    head: h.head as usize,
                })
                .collect()
        };
        let result = if ids.is_empty() {
            classify(s, c, None)?
        } else {
            let plan = head_means(s, ids)?;
            classify(s, c, Some(&plan))?
        };
        // SAFETY: checked non-null and large enough.
        let out = unsafe { std::slice::from_raw_parts_mut(predictions, capacity) };
        for (o, &p) in out.iter_mut().zip(&result.predictions) {
            *o = p as u32;
        }
        Ok(())
    })
}

/// Runs the full audit. `config_toml` may be null for defaults; `attribute`
/// (if non-null) overrides the configured attribute.
///
/// # Safety
/// Handles must be live, strings NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hb_audit_run(
    store: *const HbStore,
    prototypes: *const HbPrototypes,
    classifier: *const HbClassifier,
    config_toml: *const c_char,
    attribute: *const c_char,
    out: *mut *mut HbReport,
) -> HbStatus {
    guard(|| {
        let out = unsafe { out_arg(out) }?;
        *out = ptr::null_mut();
        let s = &unsafe { ref_arg(store) }?.0;
        let p = &unsafe { ref_arg(prototypes) }?.0;
        let c = &unsafe { ref_arg(classifier) }?.0;
        let attribute = (!attribute.is_null()).then(|| unsafe { str_arg(attribute) }).transpose()?;
        let mut config = if config_toml.is_null() {
            AuditConfig::new(attribute.ok_or_else(|| {
                Failure(HbStatus::Validation, "attribute is required without a config".into())
            })?)
        } else {
            AuditConfig::from_toml_str(unsafe { str_arg(config_toml) }?)?
        };
        if let Some(a) = attribute {
            config.attribute = a.to_string();
        }
        let output = run_audit(s, p, c, &config)?;
        let json = CString::new(output.report.to_json()).expect("JSON has no NUL bytes");
        *out = Box::into_raw(Box::new(HbReport {
            report: output.report,
            json,
        }));
        Ok(())
    })
}

/// Report as JSON, owned by the report handle.
///
/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hb_report_json(report: *const HbReport) -> *const c_char {
    match unsafe { report.as_ref() } {
        Some(r) => r.json.as_ptr(),
        None => ptr::null(),
    }
}

/// Copy of the report JSON that the caller frees with `hb_string_free`.
///
/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hb_report_json_copy(report: *const HbReport, out: *mut *mut c_char) -> HbStatus {
    guard(|| {
        let r = unsafe { ref_arg(report) }?;
        *unsafe { out_arg(out) }? = r.json.clone().into_raw();
        Ok(())
    })
}

/// Number of suspected heads.
///
/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hb_report_suspected_count(report: *const HbReport) -> usize {
    unsafe { report.as_ref() }.map_or(0, |r| r.report.suspected_heads().len())
}

/// Copies up to `capacity` suspected heads into `out`; `written` receives
/// the number copied.
///
/// # Safety
/// `report` must be live, `out` must hold `capacity` entries, `written`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn hb_report_suspected(
    report: *const HbReport,
    out: *mut HbHeadId,
    capacity: usize,
    written: *mut usize,
) -> HbStatus {
    guard(|| {
        let r = unsafe { ref_arg(report) }?;
        let written = unsafe { out_arg(written) }?;
        let heads = r.report.suspected_heads();
        let n = heads.len().min(capacity);
        if n > 0 && out.is_null() {
            return Err(null());
        }
        for (i, h) in heads.iter().take(n).enumerate() {
            // SAFETY: i < capacity.
            unsafe {
                *out.add(i) = HbHeadId {
                    layer: h.layer as u32,
                    head: h.head as u32,
                }
            };
        }
        *written = n;
        Ok(())
    })
}

/// # Safety
/// `report` must be null or a handle from `hb_audit_run`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hb_report_free(report: *mut HbReport) {
    if !report.is_null() {
        drop(unsafe { Box::from_raw(report) });
    }
}

/// Chi-squared test of a row-major `rows x cols` count table; all-zero
/// columns are dropped first.
///
/// # Safety
/// `counts` must point to `rows * cols` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn hb_chi2(counts: *const u64, rows: usize, cols: usize, out: *mut HbChi2) -> HbStatus {
    guard(|| {
        if counts.is_null() {
            return Err(null());
        }
        let out = unsafe { out_arg(out) }?;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Failure(HbStatus::Dimension, "table size overflows".into()))?;
        // SAFETY: caller guarantees `rows * cols` readable values.
        let flat = unsafe { std::slice::from_raw_parts(counts, len) };
        let table: Vec<Vec<u64>> = flat.chunks(cols.max(1)).map(|r| r.to_vec()).collect();
        let r = chi2_counts(&table)?;
        *out = HbChi2 {
            chi2: r.chi2,
            dof: r.dof,
            dof_before_drop: r.dof_before_drop,
            p_value: r.p_value,
            n: r.n,
            rows: r.rows,
            cols: r.cols,
        };
        Ok(())
    })
}

/// Cramér's V from a chi-squared statistic.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hb_cramers_v(chi2: f64, n: u64, rows: usize, cols: usize, out: *mut f64) -> HbStatus {
    guard(|| {
        let out = unsafe { out_arg(out) }?;
        *out = cramers_v(chi2, n, rows, cols)?;
        Ok(())
    })
}
