// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use headbias::synth::{generate, SynthSpec};
use headbias::{save_classifier, save_prototypes, save_store};
use headbias_ffi::*;

fn c(path: &Path) -> CString {
    CString::new(path.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(hb_last_error_message()) }.to_string_lossy().into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    store: *mut HbStore,
    protos: *mut HbPrototypes,
    clf: *mut HbClassifier,
    truth: headbias::synth::GroundTruth,
}

impl Drop for Fixture {
    fn drop(&mut self) {
        unsafe {
            hb_store_free(self.store);
            hb_prototypes_free(self.protos);
            hb_classifier_free(self.clf);
        }
    }
}

fn fixture(n_images: usize) -> Fixture {
    let mut spec = SynthSpec::concentrated(3);
    spec.n_images = n_images;
    let out = generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_store(&out.store, dir.path().join("store")).unwrap();
    save_prototypes(&out.prototypes, dir.path().join("prototypes")).unwrap();
    save_classifier(&out.classifier, dir.path().join("classifier")).unwrap();
    let mut f = Fixture {
        store: ptr::null_mut(),
        protos: ptr::null_mut(),
        clf: ptr::null_mut(),
        truth: out.truth,
        _dir: dir,
    };
    let root = f._dir.path().to_path_buf();
    unsafe {
        assert_eq!(hb_store_load(c(&root.join("store")).as_ptr(), &mut f.store), HbStatus::Ok);
        assert_eq!(hb_prototypes_load(c(&root.join("prototypes")).as_ptr(), &mut f.protos), HbStatus::Ok);
        assert_eq!(hb_classifier_load(c(&root.join("classifier")).as_ptr(), &mut f.clf), HbStatus::Ok);
    }
    f
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(hb_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn load_reports_dims_and_classifies() {
    let f = fixture(400);
    let mut dims = HbDims::default();
    assert_eq!(unsafe { hb_store_dims(f.store, &mut dims) }, HbStatus::Ok);
    assert_eq!(dims.n_images, 400);
    assert_eq!(dims.n_layers, 24);
    assert_eq!(dims.n_heads, 16);
    let mut preds = vec![u32::MAX; 400];
    let st = unsafe { hb_classify(f.store, f.clf, ptr::null(), 0, preds.as_mut_ptr(), preds.len()) };
    assert_eq!(st, HbStatus::Ok);
    let expected: Vec<u32> = f.truth.predictions.iter().map(|&p| p as u32).collect();
    assert_eq!(preds, expected);

    let heads: Vec<HbHeadId> = f
        .truth
        .planted
        .iter()
        .map(|h| HbHeadId {
            layer: h.layer as u32,
            head: h.head as u32,
        })
        .collect();
    let st = unsafe { hb_classify(f.store, f.clf, heads.as_ptr(), heads.len(), preds.as_mut_ptr(), preds.len()) };
    assert_eq!(st, HbStatus::Ok);
    let clean: Vec<u32> = f.truth.clean_predictions.iter().map(|&p| p as u32).collect();
    let agree = preds.iter().zip(&clean).filter(|(a, b)| a == b).count();
    assert!(agree > 390, "{agree}");
}

#[test]
fn classify_rejects_short_buffer_and_bad_head() {
    let f = fixture(200);
    let mut preds = vec![0u32; 10];
    let st = unsafe { hb_classify(f.store, f.clf, ptr::null(), 0, preds.as_mut_ptr(), preds.len()) };
    assert_eq!(st, HbStatus::Dimension);
    assert!(last_error().contains("200"));
    let mut preds = vec![0u32; 200];
    let bad = [HbHeadId { layer: 99, head: 0 }];
    let st = unsafe { hb_classify(f.store, f.clf, bad.as_ptr(), 1, preds.as_mut_ptr(), preds.len()) };
    assert_eq!(st, HbStatus::Dimension);
}

#[test]
fn audit_recovers_planted_heads() {
    let f = fixture(2000);
    let attribute = CString::new("gender").unwrap();
    let mut report = ptr::null_mut();
    let st = unsafe { hb_audit_run(f.store, f.protos, f.clf, ptr::null(), attribute.as_ptr(), &mut report) };
    assert_eq!(st, HbStatus::Ok, "{}", last_error());
    let n = unsafe { hb_report_suspected_count(report) };
    let mut heads = vec![HbHeadId { layer: 0, head: 0 }; n];
    let mut written = 0usize;
    let st = unsafe { hb_report_suspected(report, heads.as_mut_ptr(), heads.len(), &mut written) };
    assert_eq!(st, HbStatus::Ok);
    assert_eq!(written, n);
    let mut got: Vec<(usize, usize)> = heads.iter().map(|h| (h.layer as usize, h.head as usize)).collect();
    got.sort();
    let mut want: Vec<(usize, usize)> = f.truth.planted.iter().map(|h| (h.layer, h.head)).collect();
    want.sort();
    assert_eq!(got, want);

    let json = unsafe { CStr::from_ptr(hb_report_json(report)) }.to_str().unwrap();
    let v: serde_json::Value = serde_json::from_str(json).unwrap();
    assert_eq!(v["attribute"], "gender");

    let mut copy = ptr::null_mut();
    assert_eq!(unsafe { hb_report_json_copy(report, &mut copy) }, HbStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(copy) }.to_str().unwrap(), json);
    unsafe {
        hb_string_free(copy);
        hb_report_free(report);
    }
}

#[test]
fn audit_with_config_and_unknown_attribute() {
    let f = fixture(300);
    let config = CString::new("attribute = \"ethnicity\"").unwrap();
    let mut report = ptr::null_mut();
    let st = unsafe { hb_audit_run(f.store, f.protos, f.clf, config.as_ptr(), ptr::null(), &mut report) };
    assert_ne!(st, HbStatus::Ok);
    assert!(report.is_null());
    assert!(last_error().contains("ethnicity"), "{}", last_error());

    let st = unsafe { hb_audit_run(f.store, f.protos, f.clf, ptr::null(), ptr::null(), &mut report) };
    assert_eq!(st, HbStatus::Validation);

    let bad = CString::new("attribute = \"gender\"\nalpha = 3.0").unwrap();
    let st = unsafe { hb_audit_run(f.store, f.protos, f.clf, bad.as_ptr(), ptr::null(), &mut report) };
    assert_eq!(st, HbStatus::Validation);
}

#[test]
fn load_errors_map_to_status() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ptr::null_mut();
    let missing = c(&dir.path().join("nope"));
    assert_eq!(unsafe { hb_store_load(missing.as_ptr(), &mut store) }, HbStatus::Io);
    assert!(store.is_null());
    assert!(!last_error().is_empty());

    std::fs::write(dir.path().join("manifest.json"), "{not json").unwrap();
    let path = c(dir.path());
    assert_eq!(unsafe { hb_store_load(path.as_ptr(), &mut store) }, HbStatus::Format);

    assert_eq!(unsafe { hb_store_load(ptr::null(), &mut store) }, HbStatus::NullPointer);
    assert_eq!(unsafe { hb_store_load(path.as_ptr(), ptr::null_mut()) }, HbStatus::NullPointer);
    let invalid = [0xffu8 as std::ffi::c_char, 0];
    assert_eq!(unsafe { hb_store_load(invalid.as_ptr(), &mut store) }, HbStatus::InvalidUtf8);
    unsafe {
        hb_store_free(ptr::null_mut());
        hb_report_free(ptr::null_mut());
        hb_string_free(ptr::null_mut());
    }
}

#[test]
fn chi2_and_v() {
    let counts: [u64; 4] = [10, 20, 30, 40];
    let mut r = HbChi2::default();
    assert_eq!(unsafe { hb_chi2(counts.as_ptr(), 2, 2, &mut r) }, HbStatus::Ok);
    // 2x2 without continuity correction: n (ad - bc)^2 / (row and column products)
    let expected = 100.0 * (400.0f64 - 600.0).powi(2) / (30.0 * 70.0 * 40.0 * 60.0);
    assert!((r.chi2 - expected).abs() < 1e-12);
    assert_eq!(r.dof, 1);
    assert_eq!(r.n, 100);
    let mut v = 0.0;
    assert_eq!(unsafe { hb_cramers_v(r.chi2, r.n, r.rows, r.cols, &mut v) }, HbStatus::Ok);
    assert!((v - (expected / 100.0).sqrt()).abs() < 1e-12);

    let zero_col: [u64; 4] = [5, 0, 7, 0];
    assert_eq!(unsafe { hb_chi2(zero_col.as_ptr(), 2, 2, &mut r) }, HbStatus::Untestable);
    assert_eq!(unsafe { hb_chi2(ptr::null(), 2, 2, &mut r) }, HbStatus::NullPointer);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/headbias.h")).unwrap();
    for name in [
        "hb_last_error_message",
        "hb_version",
        "hb_string_free",
        "hb_store_load",
        "hb_store_free",
        "hb_store_dims",
        "hb_prototypes_load",
        "hb_prototypes_free",
        "hb_classifier_load",
        "hb_classifier_free",
        "hb_classify",
        "hb_audit_run",
        "hb_report_json",
        "hb_report_json_copy",
        "hb_report_suspected_count",
        "hb_report_suspected",
        "hb_report_free",
        "hb_chi2",
        "hb_cramers_v",
        "typedef struct HbStore HbStore",
        "HB_STATUS_PANIC = 9",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}
