// SPDX-License-Identifier: MIT OR Apache-2.0

//! The on-disk containers as an external producer writes them: hand-built
//! JSON manifests and length-prefixed little-endian blobs.

use std::fs;
use std::path::Path;

use headbias::decomposition::{classify, reconstruct, HeadId};
use headbias::store::check_compatible;
use headbias::{load_classifier, load_prototypes, load_store, save_store, StoreError, TextCategory};
use serde_json::json;

fn blob_f32(path: &Path, values: &[f32]) {
    let mut bytes = ((values.len() * 4) as u64).to_le_bytes().to_vec();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).unwrap();
}

fn blob_u32(path: &Path, values: &[u32]) {
    let mut bytes = ((values.len() * 4) as u64).to_le_bytes().to_vec();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).unwrap();
}

// n = 3 images, L = 2, H = 2, d = 2, two classes, one attribute.
fn write_store(dir: &Path, with_reference: bool) {
    fs::create_dir_all(dir).unwrap();
    let manifest = json!({
        "format": "headbias-store",
        "version": 1,
        "endianness": "little",
        "n_images": 3,
        "n_layers": 2,
        "n_heads": 2,
        "embed_dim": 2,
        "class_names": ["doctor", "nurse"],
        "demographic_attributes": [{"name": "gender", "values": ["male", "female"]}],
        "model_tag": "hand-built",
        "has_reference": with_reference
    });
    fs::write(dir.join("manifest.json"), manifest.to_string()).unwrap();
    blob_f32(&dir.join("initial.f32"), &[0.5, 0.0, 0.0, 0.5, 0.1, 0.1]);
    blob_f32(&dir.join("mlp.f32"), &[0.25, 0.0, 0.25, 0.0, 0.0, 0.25, 0.0, 0.25, 0.0, 0.0, 0.0, 0.0]);
    // [n, L, H, d]: image 2 gets its class signal from L1H0 only.
    let mut heads = vec![0.0f32; 3 * 2 * 2 * 2];
    heads[0] = 0.125;
    heads[8 + 1] = 0.125;
    heads[16 + 2 * 2 + 1] = 1.0;
    blob_f32(&dir.join("heads.f32"), &heads);
    blob_u32(&dir.join("labels.u32"), &[0, 1, 1]);
    blob_u32(&dir.join("demographics.u32"), &[0, 1, 2]);
    if with_reference {
        blob_f32(&dir.join("reference.f32"), &[1.125, 0.0, 0.0, 1.125, 0.1, 1.1]);
    }
}

fn write_prototypes(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    let manifest = json!({
        "format": "headbias-prototypes",
        "version": 1,
        "endianness": "little",
        "embed_dim": 2,
        "occupations": ["doctor", "nurse"],
        "demographic_attributes": [{"name": "gender", "values": ["male", "female"]}],
        "dictionary": [
            {"name": "a photo of a doctor", "category": "occupation", "class": "doctor"},
            {"name": "a woman", "category": "demographic", "attribute": "gender", "value": "female"},
            {"name": "a tree", "category": "general"}
        ]
    });
    fs::write(dir.join("manifest.json"), manifest.to_string()).unwrap();
    blob_f32(&dir.join("occupation.f32"), &[1.0, 0.0, 0.0, 1.0]);
    blob_f32(&dir.join("demographic.f32"), &[0.6, 0.8, 0.8, -0.6]);
    blob_f32(&dir.join("dictionary.f32"), &[1.0, 0.0, 0.8, -0.6, 0.0, 1.0]);
}

fn write_classifier(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    let manifest = json!({
        "format": "headbias-classifier",
        "version": 1,
        "endianness": "little",
        "embed_dim": 2,
        "class_names": ["doctor", "nurse"]
    });
    fs::write(dir.join("manifest.json"), manifest.to_string()).unwrap();
    blob_f32(&dir.join("weights.f32"), &[1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn hand_written_containers_load() {
    let tmp = tempfile::tempdir().unwrap();
    write_store(&tmp.path().join("store"), true);
    write_prototypes(&tmp.path().join("protos"));
    write_classifier(&tmp.path().join("clf"));
    let store = load_store(tmp.path().join("store")).unwrap();
    let protos = load_prototypes(tmp.path().join("protos")).unwrap();
    let clf = load_classifier(tmp.path().join("clf")).unwrap();
    check_compatible(&store, Some(&protos), Some(&clf)).unwrap();

    assert_eq!((store.n_images(), store.n_layers(), store.n_heads(), store.embed_dim()), (3, 2, 2, 2));
    assert_eq!(store.head(2, 1, 0), &[0.0, 1.0]);
    assert_eq!(store.demographic(0, 0), Some(0));
    assert_eq!(store.demographic(2, 0), None);
    assert_eq!(protos.dictionary()[1].category, TextCategory::Demographic);
    assert_eq!(protos.demographic_rows("gender"), Some(&[0.6f32, 0.8, 0.8, -0.6][..]));

    for i in 0..3 {
        let r = reconstruct(&store, i, None).unwrap();
        let reference = store.reference(i).unwrap();
        for (a, &b) in r.iter().zip(reference) {
            assert!((a - b as f64).abs() < 1e-6, "image {i}: {r:?} vs {reference:?}");
        }
    }
    let c = classify(&store, &clf, None).unwrap();
    assert_eq!(c.predictions, vec![0, 1, 1]);
    let plan = headbias::head_means(&store, [HeadId::new(1, 0)]).unwrap();
    let c = classify(&store, &clf, Some(&plan)).unwrap();
    // The head's mean over the three images is (0, 1/3).
    let logits = c.logits_of(2);
    assert!((logits[0] - 0.1).abs() < 1e-6);
    assert!((logits[1] - (0.1 + 1.0 / 3.0)).abs() < 1e-6);
}

#[test]
fn saved_store_matches_hand_written_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    write_store(&tmp.path().join("a"), false);
    let store = load_store(tmp.path().join("a")).unwrap();
    save_store(&store, tmp.path().join("b")).unwrap();
    for blob in ["initial.f32", "mlp.f32", "heads.f32", "labels.u32", "demographics.u32"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(blob)).unwrap(),
            fs::read(tmp.path().join("b").join(blob)).unwrap(),
            "{blob}"
        );
    }
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("b/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["format"], "headbias-store");
    assert_eq!(m["version"], 1);
    assert_eq!(m["endianness"], "little");
}

fn expect_err(dir: &Path) -> StoreError {
    load_store(dir).expect_err("corrupted store must be rejected")
}

#[test]
fn malformed_inputs_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("s");

    write_store(&dir, false);
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    m["endianness"] = json!("big");
    fs::write(dir.join("manifest.json"), m.to_string()).unwrap();
    expect_err(&dir);

    write_store(&dir, false);
    m["endianness"] = json!("little");
    m["version"] = json!(2);
    fs::write(dir.join("manifest.json"), m.to_string()).unwrap();
    expect_err(&dir);

    write_store(&dir, false);
    blob_u32(&dir.join("labels.u32"), &[0, 1, 2]);
    expect_err(&dir);

    write_store(&dir, false);
    blob_u32(&dir.join("demographics.u32"), &[0, 1, 3]);
    expect_err(&dir);

    write_store(&dir, false);
    blob_f32(&dir.join("initial.f32"), &[0.5, 0.0, f32::NAN, 0.5, 0.1, 0.1]);
    expect_err(&dir);

    write_store(&dir, false);
    blob_f32(&dir.join("initial.f32"), &[0.5, 0.0, 0.0, 0.5]);
    expect_err(&dir);

    write_store(&dir, false);
    let mut bytes = fs::read(dir.join("mlp.f32")).unwrap();
    bytes.extend_from_slice(&[0, 0, 0, 0]);
    fs::write(dir.join("mlp.f32"), bytes).unwrap();
    expect_err(&dir);

    write_store(&dir, false);
    fs::remove_file(dir.join("heads.f32")).unwrap();
    assert!(matches!(expect_err(&dir), StoreError::Io { .. }));

    let pdir = tmp.path().join("p");
    write_prototypes(&pdir);
    blob_f32(&pdir.join("occupation.f32"), &[2.0, 0.0, 0.0, 1.0]);
    assert!(load_prototypes(&pdir).is_err());
}

#[test]
fn random_corruption_never_panics() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("s");
    let mut r = headbias::rng::seeded(77);
    let files = ["manifest.json", "initial.f32", "mlp.f32", "heads.f32", "labels.u32", "demographics.u32"];
    for trial in 0..300 {
        write_store(&dir, false);
        let file = dir.join(files[trial % files.len()]);
        let mut bytes = fs::read(&file).unwrap();
        match headbias::rng::below(&mut r, 3) {
            0 => {
                let cut = headbias::rng::below(&mut r, bytes.len() as u64) as usize;
                bytes.truncate(cut);
            }
            1 => {
                let at = headbias::rng::below(&mut r, bytes.len() as u64) as usize;
                bytes[at] ^= 1 << headbias::rng::below(&mut r, 8);
            }
            _ => bytes.extend((0..headbias::rng::below(&mut r, 9)).map(|i| i as u8)),
        }
        fs::write(&file, &bytes).unwrap();
        let result = std::panic::catch_unwind(|| load_store(&dir));
        assert!(result.is_ok(), "trial {trial} panicked");
    }
}
