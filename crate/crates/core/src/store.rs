// SPDX-License-Identifier: MIT OR Apache-2.0

//! Head-contribution store: data model, on-disk container, validation.
//!
//! A container is a directory holding a JSON manifest plus raw little-endian
//! blobs. Every blob starts with an 8-byte little-endian unsigned integer
//! giving the payload length in bytes, followed by the payload itself.
//!
//! | file               | element | shape                         |
//! |--------------------|---------|-------------------------------|
//! | `initial.f32`      | f32     | `[n_images, d]`               |
//! | `mlp.f32`          | f32     | `[n_images, L, d]`            |
//! | `heads.f32`        | f32     | `[n_images, L, H, d]`         |
//! | `labels.u32`       | u32     | `[n_images]`                  |
//! | `demographics.u32` | u32     | `[n_images, n_attributes]`    |
//! | `reference.f32`    | f32     | `[n_images, d]` (optional)    |
//!
//! A demographic index equal to the attribute's value count means "unknown".
//! Prototype and classifier files use the same manifest + blob scheme.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::StoreError;

pub const STORE_FORMAT: &str = "headbias-store";
pub const PROTOTYPE_FORMAT: &str = "headbias-prototypes";
pub const CLASSIFIER_FORMAT: &str = "headbias-classifier";
pub const FORMAT_VERSION: u32 = 1;
pub const ENDIANNESS: &str = "little";

/// Maximum deviation from unit Euclidean norm accepted for prototype rows.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

const MANIFEST_FILE: &str = "manifest.json";
const BLOB_HEADER_LEN: usize = 8;

/// A protected attribute and its ordered value names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemographicAttribute {
    pub name: String,
    pub values: Vec<String>,
}

impl DemographicAttribute {
    pub fn new(name: impl Into<String>, values: &[&str]) -> Self {
        Self {
            name: name.into(),
            values: values.iter().map(|v| v.to_string()).collect(),
        }
    }

    /// Index used on disk for an unannotated image.
    pub fn unknown_index(&self) -> u32 {
        self.values.len() as u32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub n_images: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub class_names: Vec<String>,
    pub demographic_attributes: Vec<DemographicAttribute>,
    #[serde(default)]
    pub model_tag: String,
    /// Free-form producer metadata (checkpoint tag, template count, ...).
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl StoreManifest {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_head_slots(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.demographic_attributes.iter().position(|a| a.name == name)
    }

    pub fn attribute(&self, name: &str) -> Result<&DemographicAttribute, StoreError> {
        self.demographic_attributes
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| StoreError::UnknownAttribute(name.to_string()))
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let invalid = |field: &str, message: String| StoreError::Invalid {
            field: field.to_string(),
            message,
        };
        if self.n_layers < 1 {
            return Err(invalid("n_layers", "must be at least 1".into()));
        }
        if self.n_heads < 1 {
            return Err(invalid("n_heads", "must be at least 1".into()));
        }
        if self.embed_dim < 2 {
            return Err(invalid("embed_dim", "must be at least 2".into()));
        }
        if self.class_names.len() < 2 {
            return Err(invalid("class_names", "need at least 2 classes".into()));
        }
        check_unique("class_names", self.class_names.iter())?;
        check_unique(
            "demographic_attributes",
            self.demographic_attributes.iter().map(|a| &a.name),
        )?;
        for attr in &self.demographic_attributes {
            if attr.values.len() < 2 {
                return Err(invalid(
                    "demographic_attributes",
                    format!("attribute `{}` needs at least 2 values", attr.name),
                ));
            }
            check_unique(&format!("demographic_attributes.{}", attr.name), attr.values.iter())?;
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreManifestFile {
    format: String,
    version: u32,
    endianness: String,
    #[serde(flatten)]
    manifest: StoreManifest,
    #[serde(default)]
    has_reference: bool,
}

/// Per-image projected contributions of every component, plus labels.
///
/// Immutable once built; all invariants are checked by [`HeadContributionStore::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadContributionStore {
    manifest: StoreManifest,
    initial: Vec<f32>,
    mlp: Vec<f32>,
    heads: Vec<f32>,
    true_class: Vec<u32>,
    demographics: Vec<u32>,
    reference: Option<Vec<f32>>,
}

impl HeadContributionStore {
    pub fn new(
        manifest: StoreManifest,
        initial: Vec<f32>,
        mlp: Vec<f32>,
        heads: Vec<f32>,
        true_class: Vec<u32>,
        demographics: Vec<u32>,
        reference: Option<Vec<f32>>,
    ) -> Result<Self, StoreError> {
        manifest.validate()?;
        let store = Self {
            manifest,
            initial,
            mlp,
            heads,
            true_class,
            demographics,
            reference,
        };
        store.validate()?;
        Ok(store)
    }

    fn validate(&self) -> Result<(), StoreError> {
        let m = &self.manifest;
        let (n, l, h, d) = (m.n_images, m.n_layers, m.n_heads, m.embed_dim);
        let n_attr = m.demographic_attributes.len();
        check_len("initial", self.initial.len(), n * d)?;
        check_len("mlp", self.mlp.len(), n * l * d)?;
        check_len("heads", self.heads.len(), n * l * h * d)?;
        check_len("labels", self.true_class.len(), n)?;
        check_len("demographics", self.demographics.len(), n * n_attr)?;
        if let Some(reference) = &self.reference {
            check_len("reference", reference.len(), n * d)?;
        }

        check_finite("initial", &self.initial, &[d])?;
        check_finite("mlp", &self.mlp, &[l, d])?;
        check_finite("heads", &self.heads, &[l, h, d])?;
        if let Some(reference) = &self.reference {
            check_finite("reference", reference, &[d])?;
        }

        let k = m.n_classes() as u32;
        if let Some((image, &label)) = self.true_class.iter().enumerate().find(|(_, &c)| c >= k) {
            return Err(StoreError::OutOfRange {
                field: "labels".into(),
                image,
                message: format!("class index {label} >= {k} classes"),
            });
        }
        for image in 0..n {
            for (a, attr) in m.demographic_attributes.iter().enumerate() {
                let value = self.demographics[image * n_attr + a];
                if value > attr.unknown_index() {
                    return Err(StoreError::OutOfRange {
                        field: "demographics".into(),
                        image,
                        message: format!(
                            "attribute `{}` value index {value} exceeds {} values (+ unknown)",
                            attr.name,
                            attr.values.len()
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn n_images(&self) -> usize {
        self.manifest.n_images
    }

    pub fn n_layers(&self) -> usize {
        self.manifest.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.manifest.n_heads
    }

    pub fn embed_dim(&self) -> usize {
        self.manifest.embed_dim
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.n_classes()
    }

    pub fn initial(&self, image: usize) -> &[f32] {
        let d = self.embed_dim();
        &self.initial[image * d..(image + 1) * d]
    }

    pub fn mlp(&self, image: usize, layer: usize) -> &[f32] {
        let d = self.embed_dim();
        let start = (image * self.n_layers() + layer) * d;
        &self.mlp[start..start + d]
    }

    pub fn head(&self, image: usize, layer: usize, head: usize) -> &[f32] {
        let d = self.embed_dim();
        let start = ((image * self.n_layers() + layer) * self.n_heads() + head) * d;
        &self.heads[start..start + d]
    }

    /// All `L * H` head vectors of one image, ordered by (layer, head).
    pub fn image_heads(&self, image: usize) -> &[f32] {
        let stride = self.n_layers() * self.n_heads() * self.embed_dim();
        &self.heads[image * stride..(image + 1) * stride]
    }

    pub fn true_class(&self, image: usize) -> usize {
        self.true_class[image] as usize
    }

    pub fn labels(&self) -> &[u32] {
        &self.true_class
    }

    /// Demographic value of `image` for attribute index `attr`, `None` if unknown.
    pub fn demographic(&self, image: usize, attr: usize) -> Option<usize> {
        let n_attr = self.manifest.demographic_attributes.len();
        let value = self.demographics[image * n_attr + attr] as usize;
        (value < self.manifest.demographic_attributes[attr].values.len()).then_some(value)
    }

    pub fn reference(&self, image: usize) -> Option<&[f32]> {
        let d = self.embed_dim();
        self.reference
            .as_ref()
            .map(|r| &r[image * d..(image + 1) * d])
    }

    pub fn has_reference(&self) -> bool {
        self.reference.is_some()
    }

    /// Number of images whose true class is `class`.
    pub fn class_count(&self, class: usize) -> usize {
        self.true_class.iter().filter(|&&c| c as usize == class).count()
    }
}

/// Unit-norm text embeddings for occupations, demographic values and the
/// general dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    embed_dim: usize,
    occupation_names: Vec<String>,
    occupation: Vec<f32>,
    attributes: Vec<DemographicAttribute>,
    demographic: Vec<f32>,
    dictionary: Vec<DictionaryEntry>,
    dictionary_rows: Vec<f32>,
    metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextCategory {
    General,
    Occupation,
    Demographic,
}

impl TextCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            TextCategory::General => "general",
            TextCategory::Occupation => "occupation",
            TextCategory::Demographic => "demographic",
        }
    }
}

/// Metadata of one dictionary text. Occupation entries name their class,
/// demographic entries their attribute and value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictionaryEntry {
    pub name: String,
    pub category: TextCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

impl DictionaryEntry {
    pub fn general(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            category: TextCategory::General,
            class: None,
            attribute: None,
            value: None,
        }
    }

    pub fn occupation(name: impl Into<String>, class: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            category: TextCategory::Occupation,
            class: Some(class.into()),
            attribute: None,
            value: None,
        }
    }

    pub fn demographic(
        name: impl Into<String>,
        attribute: impl Into<String>,
        value: impl Into<String>,
    ) -> Self {
        Self {
            name: name.into(),
            category: TextCategory::Demographic,
            class: None,
            attribute: Some(attribute.into()),
            value: Some(value.into()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PrototypeManifestFile {
    format: String,
    version: u32,
    endianness: String,
    embed_dim: usize,
    occupations: Vec<String>,
    demographic_attributes: Vec<DemographicAttribute>,
    dictionary: Vec<DictionaryEntry>,
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
}

impl PrototypeSet {
    /// Builds and validates a prototype set. `demographic` holds the rows of
    /// every attribute in `attributes` order.
    pub fn new(
        embed_dim: usize,
        occupation_names: Vec<String>,
        occupation: Vec<f32>,
        attributes: Vec<DemographicAttribute>,
        demographic: Vec<f32>,
        dictionary: Vec<DictionaryEntry>,
        dictionary_rows: Vec<f32>,
    ) -> Result<Self, StoreError> {
        let set = Self {
            embed_dim,
            occupation_names,
            occupation,
            attributes,
            demographic,
            dictionary,
            dictionary_rows,
            metadata: BTreeMap::new(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn with_metadata(mut self, metadata: BTreeMap<String, serde_json::Value>) -> Self {
        self.metadata = metadata;
        self
    }

    fn validate(&self) -> Result<(), StoreError> {
        let d = self.embed_dim;
        if d < 2 {
            return Err(StoreError::Invalid {
                field: "embed_dim".into(),
                message: "must be at least 2".into(),
            });
        }
        let n_demo: usize = self.attributes.iter().map(|a| a.values.len()).sum();
        check_len("occupation", self.occupation.len(), self.occupation_names.len() * d)?;
        check_len("demographic", self.demographic.len(), n_demo * d)?;
        check_len("dictionary", self.dictionary_rows.len(), self.dictionary.len() * d)?;
        check_unique("occupations", self.occupation_names.iter())?;
        check_unique("dictionary", self.dictionary.iter().map(|e| &e.name))?;
        check_unit_rows("occupation", &self.occupation, d)?;
        check_unit_rows("demographic", &self.demographic, d)?;
        check_unit_rows("dictionary", &self.dictionary_rows, d)?;

        for (row, entry) in self.dictionary.iter().enumerate() {
            let linked = match entry.category {
                TextCategory::General => None,
                TextCategory::Occupation => {
                    let class = entry.class.as_deref().ok_or_else(|| StoreError::Invalid {
                        field: format!("dictionary[{row}]"),
                        message: "occupation entry without `class`".into(),
                    })?;
                    let idx = self
                        .occupation_names
                        .iter()
                        .position(|n| n == class)
                        .ok_or_else(|| StoreError::Invalid {
                            field: format!("dictionary[{row}]"),
                            message: format!("unknown occupation `{class}`"),
                        })?;
                    Some(("occupation", self.occupation_row(idx)))
                }
                TextCategory::Demographic => {
                    let (attr, value) = match (&entry.attribute, &entry.value) {
                        (Some(a), Some(v)) => (a, v),
                        _ => {
                            return Err(StoreError::Invalid {
                                field: format!("dictionary[{row}]"),
                                message: "demographic entry needs `attribute` and `value`".into(),
                            })
                        }
                    };
                    let row_vec = self.demographic_row_by_name(attr, value).ok_or_else(|| {
                        StoreError::Invalid {
                            field: format!("dictionary[{row}]"),
                            message: format!("unknown demographic value `{attr}`/`{value}`"),
                        }
                    })?;
                    Some(("demographic", row_vec))
                }
            };
            if let Some((kind, proto)) = linked {
                let dict = self.dictionary_row(row);
                let max_diff = proto
                    .iter()
                    .zip(dict)
                    .map(|(&a, &b)| (a as f64 - b as f64).abs())
                    .fold(0.0, f64::max);
                if max_diff > UNIT_NORM_TOLERANCE {
                    return Err(StoreError::Invalid {
                        field: format!("dictionary[{row}]"),
                        message: format!(
                            "`{}` differs from its {kind} prototype by {max_diff:.3e}",
                            entry.name
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn occupation_names(&self) -> &[String] {
        &self.occupation_names
    }

    pub fn occupation_row(&self, class: usize) -> &[f32] {
        let d = self.embed_dim;
        &self.occupation[class * d..(class + 1) * d]
    }

    pub fn attributes(&self) -> &[DemographicAttribute] {
        &self.attributes
    }

    fn attribute_offset(&self, attr: usize) -> usize {
        self.attributes[..attr].iter().map(|a| a.values.len()).sum()
    }

    /// Prototype rows of one attribute, `[n_values, d]` row-major.
    pub fn demographic_rows(&self, attribute: &str) -> Option<&[f32]> {
        let idx = self.attributes.iter().position(|a| a.name == attribute)?;
        let d = self.embed_dim;
        let start = self.attribute_offset(idx) * d;
        Some(&self.demographic[start..start + self.attributes[idx].values.len() * d])
    }

    /// All demographic rows in attribute order.
    pub fn all_demographic_rows(&self) -> &[f32] {
        &self.demographic
    }

    fn demographic_row_by_name(&self, attribute: &str, value: &str) -> Option<&[f32]> {
        let idx = self.attributes.iter().position(|a| a.name == attribute)?;
        let v = self.attributes[idx].values.iter().position(|x| x == value)?;
        let d = self.embed_dim;
        let start = (self.attribute_offset(idx) + v) * d;
        Some(&self.demographic[start..start + d])
    }

    pub fn dictionary(&self) -> &[DictionaryEntry] {
        &self.dictionary
    }

    pub fn n_texts(&self) -> usize {
        self.dictionary.len()
    }

    pub fn dictionary_row(&self, row: usize) -> &[f32] {
        let d = self.embed_dim;
        &self.dictionary_rows[row * d..(row + 1) * d]
    }

    pub fn dictionary_rows(&self) -> &[f32] {
        &self.dictionary_rows
    }

    pub fn metadata(&self) -> &BTreeMap<String, serde_json::Value> {
        &self.metadata
    }
}

/// Class embedding directions used for zero-shot classification.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierMatrix {
    class_names: Vec<String>,
    embed_dim: usize,
    weights: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassifierManifestFile {
    format: String,
    version: u32,
    endianness: String,
    embed_dim: usize,
    class_names: Vec<String>,
}

impl ClassifierMatrix {
    pub fn new(class_names: Vec<String>, embed_dim: usize, weights: Vec<f32>) -> Result<Self, StoreError> {
        check_len("weights", weights.len(), class_names.len() * embed_dim)?;
        check_unique("class_names", class_names.iter())?;
        check_finite("weights", &weights, &[embed_dim])?;
        Ok(Self {
            class_names,
            embed_dim,
            weights,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn row(&self, class: usize) -> &[f32] {
        &self.weights[class * self.embed_dim..(class + 1) * self.embed_dim]
    }
}

// ---------------------------------------------------------------------------
// Container I/O
// ---------------------------------------------------------------------------

pub fn save_store(store: &HeadContributionStore, dir: impl AsRef<Path>) -> Result<(), StoreError> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let file = StoreManifestFile {
        format: STORE_FORMAT.into(),
        version: FORMAT_VERSION,
        endianness: ENDIANNESS.into(),
        manifest: store.manifest.clone(),
        has_reference: store.reference.is_some(),
    };
    write_manifest(dir, &file)?;
    write_f32_blob(&dir.join("initial.f32"), &store.initial)?;
    write_f32_blob(&dir.join("mlp.f32"), &store.mlp)?;
    write_f32_blob(&dir.join("heads.f32"), &store.heads)?;
    write_u32_blob(&dir.join("labels.u32"), &store.true_class)?;
    write_u32_blob(&dir.join("demographics.u32"), &store.demographics)?;
    if let Some(reference) = &store.reference {
        write_f32_blob(&dir.join("reference.f32"), reference)?;
    }
    Ok(())
}

pub fn load_store(dir: impl AsRef<Path>) -> Result<HeadContributionStore, StoreError> {
    let dir = dir.as_ref();
    let file: StoreManifestFile = read_manifest(dir)?;
    check_header(dir, STORE_FORMAT, &file.format, file.version, &file.endianness)?;
    let m = file.manifest;
    m.validate()?;
    let (n, l, h, d) = (m.n_images, m.n_layers, m.n_heads, m.embed_dim);
    let n_attr = m.demographic_attributes.len();
    let initial = read_f32_blob(&dir.join("initial.f32"), "initial.f32", checked_mul(&[n, d])?)?;
    let mlp = read_f32_blob(&dir.join("mlp.f32"), "mlp.f32", checked_mul(&[n, l, d])?)?;
    let heads = read_f32_blob(&dir.join("heads.f32"), "heads.f32", checked_mul(&[n, l, h, d])?)?;
    let labels = read_u32_blob(&dir.join("labels.u32"), "labels.u32", n)?;
    let demographics = read_u32_blob(
        &dir.join("demographics.u32"),
        "demographics.u32",
        checked_mul(&[n, n_attr])?,
    )?;
    let reference = if file.has_reference {
        Some(read_f32_blob(&dir.join("reference.f32"), "reference.f32", checked_mul(&[n, d])?)?)
    } else {
        None
    };
    HeadContributionStore::new(m, initial, mlp, heads, labels, demographics, reference)
}

pub fn save_prototypes(set: &PrototypeSet, dir: impl AsRef<Path>) -> Result<(), StoreError> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let file = PrototypeManifestFile {
        format: PROTOTYPE_FORMAT.into(),
        version: FORMAT_VERSION,
        endianness: ENDIANNESS.into(),
        embed_dim: set.embed_dim,
        occupations: set.occupation_names.clone(),
        demographic_attributes: set.attributes.clone(),
        dictionary: set.dictionary.clone(),
        metadata: set.metadata.clone(),
    };
    write_manifest(dir, &file)?;
    write_f32_blob(&dir.join("occupation.f32"), &set.occupation)?;
    write_f32_blob(&dir.join("demographic.f32"), &set.demographic)?;
    write_f32_blob(&dir.join("dictionary.f32"), &set.dictionary_rows)?;
    Ok(())
}

pub fn load_prototypes(dir: impl AsRef<Path>) -> Result<PrototypeSet, StoreError> {
    let dir = dir.as_ref();
    let file: PrototypeManifestFile = read_manifest(dir)?;
    check_header(dir, PROTOTYPE_FORMAT, &file.format, file.version, &file.endianness)?;
    let d = file.embed_dim;
    let n_demo: usize = file.demographic_attributes.iter().map(|a| a.values.len()).sum();
    let occupation = read_f32_blob(
        &dir.join("occupation.f32"),
        "occupation.f32",
        checked_mul(&[file.occupations.len(), d])?,
    )?;
    let demographic =
        read_f32_blob(&dir.join("demographic.f32"), "demographic.f32", checked_mul(&[n_demo, d])?)?;
    let dictionary_rows = read_f32_blob(
        &dir.join("dictionary.f32"),
        "dictionary.f32",
        checked_mul(&[file.dictionary.len(), d])?,
    )?;
    Ok(PrototypeSet::new(
        d,
        file.occupations,
        occupation,
        file.demographic_attributes,
        demographic,
        file.dictionary,
        dictionary_rows,
    )?
    .with_metadata(file.metadata))
}

pub fn save_classifier(classifier: &ClassifierMatrix, dir: impl AsRef<Path>) -> Result<(), StoreError> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let file = ClassifierManifestFile {
        format: CLASSIFIER_FORMAT.into(),
        version: FORMAT_VERSION,
        endianness: ENDIANNESS.into(),
        embed_dim: classifier.embed_dim,
        class_names: classifier.class_names.clone(),
    };
    write_manifest(dir, &file)?;
    write_f32_blob(&dir.join("weights.f32"), &classifier.weights)
}

pub fn load_classifier(dir: impl AsRef<Path>) -> Result<ClassifierMatrix, StoreError> {
    let dir = dir.as_ref();
    let file: ClassifierManifestFile = read_manifest(dir)?;
    check_header(dir, CLASSIFIER_FORMAT, &file.format, file.version, &file.endianness)?;
    let weights = read_f32_blob(
        &dir.join("weights.f32"),
        "weights.f32",
        checked_mul(&[file.class_names.len(), file.embed_dim])?,
    )?;
    ClassifierMatrix::new(file.class_names, file.embed_dim, weights)
}

/// Checks that store, prototypes and classifier describe the same space.
pub fn check_compatible(
    store: &HeadContributionStore,
    prototypes: Option<&PrototypeSet>,
    classifier: Option<&ClassifierMatrix>,
) -> Result<(), StoreError> {
    let d = store.embed_dim();
    if let Some(c) = classifier {
        if c.embed_dim() != d || c.n_classes() != store.n_classes() {
            return Err(StoreError::Incompatible(format!(
                "classifier is [{}, {}], store expects [{}, {}]",
                c.n_classes(),
                c.embed_dim(),
                store.n_classes(),
                d
            )));
        }
    }
    if let Some(p) = prototypes {
        if p.embed_dim() != d {
            return Err(StoreError::Incompatible(format!(
                "prototype dimension {} != store dimension {d}",
                p.embed_dim()
            )));
        }
        if p.occupation_names().len() != store.n_classes() {
            return Err(StoreError::Incompatible(format!(
                "{} occupation prototypes for {} classes",
                p.occupation_names().len(),
                store.n_classes()
            )));
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), StoreError> {
    fs::create_dir_all(dir).map_err(|source| StoreError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_manifest<T: Serialize>(dir: &Path, value: &T) -> Result<(), StoreError> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(value).map_err(|e| StoreError::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    fs::write(&path, text + "\n").map_err(|source| StoreError::Io { path, source })
}

fn read_manifest<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<T, StoreError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|source| StoreError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| StoreError::Manifest {
        path,
        message: e.to_string(),
    })
}

fn check_header(
    dir: &Path,
    expected: &str,
    format: &str,
    version: u32,
    endianness: &str,
) -> Result<(), StoreError> {
    let path = dir.join(MANIFEST_FILE);
    if format != expected {
        return Err(StoreError::Manifest {
            path,
            message: format!("format `{format}`, expected `{expected}`"),
        });
    }
    if version != FORMAT_VERSION {
        return Err(StoreError::Manifest {
            path,
            message: format!("unsupported version {version}"),
        });
    }
    if endianness != ENDIANNESS {
        return Err(StoreError::Manifest {
            path,
            message: format!("unsupported endianness `{endianness}`"),
        });
    }
    Ok(())
}

fn checked_mul(dims: &[usize]) -> Result<usize, StoreError> {
    dims.iter()
        .try_fold(1usize, |acc, &x| acc.checked_mul(x))
        .ok_or_else(|| StoreError::Invalid {
            field: "dimensions".into(),
            message: format!("{dims:?} overflows"),
        })
}

fn write_blob(path: &Path, payload: Vec<u8>) -> Result<(), StoreError> {
    let mut bytes = Vec::with_capacity(BLOB_HEADER_LEN + payload.len());
    bytes.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_f32_blob(path: &Path, values: &[f32]) -> Result<(), StoreError> {
    write_blob(path, values.iter().flat_map(|v| v.to_le_bytes()).collect())
}

pub(crate) fn write_u32_blob(path: &Path, values: &[u32]) -> Result<(), StoreError> {
    write_blob(path, values.iter().flat_map(|v| v.to_le_bytes()).collect())
}

/// Reads a length-prefixed blob and checks it holds exactly `n_elements`
/// 4-byte values.
fn read_blob(path: &Path, blob: &str, n_elements: usize) -> Result<Vec<u8>, StoreError> {
    let bytes = fs::read(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < BLOB_HEADER_LEN {
        return Err(StoreError::Truncated {
            blob: blob.into(),
            offset: bytes.len() as u64,
            expected: BLOB_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let declared = u64::from_le_bytes(bytes[..BLOB_HEADER_LEN].try_into().expect("8-byte header"));
    let expected = (n_elements as u64) * 4;
    let available = (bytes.len() - BLOB_HEADER_LEN) as u64;
    if available < declared.min(expected) || declared < expected {
        let found = available.min(declared);
        return Err(StoreError::Truncated {
            blob: blob.into(),
            offset: BLOB_HEADER_LEN as u64 + found,
            expected,
            found,
        });
    }
    if declared > expected {
        return Err(StoreError::LengthMismatch {
            blob: blob.into(),
            declared,
            expected,
        });
    }
    if available > declared {
        return Err(StoreError::TrailingBytes {
            blob: blob.into(),
            offset: BLOB_HEADER_LEN as u64 + declared,
        });
    }
    let mut bytes = bytes;
    bytes.drain(..BLOB_HEADER_LEN);
    Ok(bytes)
}

pub(crate) fn read_f32_blob(path: &Path, blob: &str, n_elements: usize) -> Result<Vec<f32>, StoreError> {
    let bytes = read_blob(path, blob, n_elements)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn read_u32_blob(path: &Path, blob: &str, n_elements: usize) -> Result<Vec<u32>, StoreError> {
    let bytes = read_blob(path, blob, n_elements)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

// ---------------------------------------------------------------------------
// Validation helpers
// ---------------------------------------------------------------------------

fn check_len(field: &str, found: usize, expected: usize) -> Result<(), StoreError> {
    if found != expected {
        return Err(StoreError::DimensionMismatch {
            field: field.into(),
            expected,
            found,
        });
    }
    Ok(())
}

/// `inner` lists the trailing dimensions under the image axis, used to
/// report where a non-finite value sits.
fn check_finite(field: &str, values: &[f32], inner: &[usize]) -> Result<(), StoreError> {
    let Some(pos) = values.iter().position(|v| !v.is_finite()) else {
        return Ok(());
    };
    let stride: usize = inner.iter().product();
    let mut rem = pos % stride.max(1);
    let mut coords = Vec::with_capacity(inner.len());
    for (i, _) in inner.iter().enumerate() {
        let below: usize = inner[i + 1..].iter().product();
        coords.push(rem / below.max(1));
        rem %= below.max(1);
    }
    let names: &[&str] = match inner.len() {
        1 => &["component"],
        2 => &["layer", "component"],
        3 => &["layer", "head", "component"],
        _ => &[],
    };
    let location = names
        .iter()
        .zip(&coords)
        .map(|(n, c)| format!("{n} {c}"))
        .collect::<Vec<_>>()
        .join(", ");
    Err(StoreError::NonFinite {
        field: field.into(),
        row: pos / stride.max(1),
        location,
        value: values[pos],
    })
}

fn check_unit_rows(field: &str, rows: &[f32], d: usize) -> Result<(), StoreError> {
    for (row, chunk) in rows.chunks_exact(d).enumerate() {
        let norm = chunk.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(StoreError::NonUnitRow {
                field: field.into(),
                row,
                norm,
            });
        }
    }
    Ok(())
}

fn check_unique<'a>(field: &str, names: impl Iterator<Item = &'a String>) -> Result<(), StoreError> {
    let mut seen = HashSet::new();
    for name in names {
        if !seen.insert(name.as_str()) {
            return Err(StoreError::DuplicateName {
                field: field.into(),
                name: name.clone(),
            });
        }
    }
    Ok(())
}

/// Path helper used by the CLI when reporting which container failed.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
