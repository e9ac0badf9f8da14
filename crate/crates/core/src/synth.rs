// SPDX-License-Identifier: MIT OR Apache-2.0

//! Planted-bias synthetic stores and brute-force oracles.
//!
//! Coordinates are laid out as `[class axes | demographic axes | free]`.
//! Classifier rows and occupation prototypes are the class axes, demographic
//! prototypes are the demographic axes, so every alignment is exact.
//!
//! - The initial contribution carries isotropic noise, MLP blocks push
//!   toward the true class.
//! - Every head has a constant offset in the free coordinates.
//! - Occupation heads add a constant along all class axes but no
//!   demographic signal.
//! - Demographic heads add demographic noise but nothing on the class axes.
//! - Planted heads add `strength * (u_value + confusion_weight * e_confusion)`
//!   to images of the target group in the affected classes.
//!
//! Non-planted heads never vary along the class axes, so ablating them
//! leaves every logit bit-identical.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomposition::{argmax, HeadId};
use crate::error::SynthError;
use crate::rng;
use crate::store::{
    ClassifierMatrix, DemographicAttribute, DictionaryEntry, HeadContributionStore, PrototypeSet,
    StoreManifest,
};

const OCCUPATION_NAMES: [&str; 12] = [
    "doctor",
    "nurse",
    "craftsman",
    "lawyer",
    "farmer",
    "guard",
    "waiter",
    "judge",
    "painter",
    "sailor",
    "teacher",
    "chef",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub name: String,
    pub values: Vec<String>,
    pub proportions: Vec<f64>,
    #[serde(default)]
    pub unknown_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedHead {
    /// `L<layer>H<head>` or `<layer>:<head>`.
    pub head: String,
    pub attribute: String,
    pub value: String,
    pub strength: f64,
    pub classes: Vec<usize>,
    /// Wrong class per affected class; defaults to `(class + K/2) % K`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Vec<usize>>,
}

impl PlantedHead {
    pub fn head_id(&self) -> Result<HeadId, SynthError> {
        self.head.parse().map_err(SynthError::Invalid)
    }
}

fn d_sigma() -> f64 {
    1.0
}
fn d_margin() -> f64 {
    3.0
}
fn d_offset() -> f64 {
    64.0
}
fn d_free_noise() -> f64 {
    0.5
}
fn d_occ_fraction() -> f64 {
    0.25
}
fn d_occ_range() -> [f64; 2] {
    [0.02, 0.3]
}
fn d_demo_offset() -> f64 {
    1.0
}
fn d_demo_noise() -> f64 {
    0.5
}
fn d_planted_occ() -> f64 {
    0.1
}
fn d_confusion() -> f64 {
    1.0
}
fn d_general() -> usize {
    200
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_images: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
    /// Per-coordinate std of the initial contribution.
    #[serde(default = "d_sigma")]
    pub noise_sigma: f64,
    /// Total push toward the true class, split evenly over the MLP blocks.
    #[serde(default = "d_margin")]
    pub class_margin: f64,
    /// Norm of every head's constant free-coordinate offset.
    #[serde(default = "d_offset")]
    pub head_offset: f64,
    #[serde(default = "d_free_noise")]
    pub free_noise: f64,
    #[serde(default = "d_occ_fraction")]
    pub occupation_head_fraction: f64,
    /// Range of the class-axis constant of occupation heads, relative to
    /// `head_offset`.
    #[serde(default = "d_occ_range")]
    pub occupation_range: [f64; 2],
    #[serde(default = "d_demo_offset")]
    pub demographic_offset: f64,
    #[serde(default = "d_demo_noise")]
    pub demographic_noise: f64,
    /// Class-axis constant of planted heads, relative to `head_offset`.
    #[serde(default = "d_planted_occ")]
    pub planted_occupation: f64,
    #[serde(default = "d_confusion")]
    pub confusion_weight: f64,
    #[serde(default = "d_general")]
    pub n_general_texts: usize,
    #[serde(default = "d_true")]
    pub with_reference: bool,
    pub attributes: Vec<AttributeSpec>,
    #[serde(default)]
    pub planted: Vec<PlantedHead>,
}

impl SynthSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, SynthError> {
        let spec: Self = toml::from_str(text).map_err(|e| SynthError::Invalid(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    fn base(seed: u64) -> Self {
        Self {
            seed,
            n_images: 5000,
            n_layers: 24,
            n_heads: 16,
            embed_dim: 64,
            n_classes: 8,
            noise_sigma: d_sigma(),
            class_margin: d_margin(),
            head_offset: d_offset(),
            free_noise: d_free_noise(),
            occupation_head_fraction: d_occ_fraction(),
            occupation_range: d_occ_range(),
            demographic_offset: d_demo_offset(),
            demographic_noise: d_demo_noise(),
            planted_occupation: d_planted_occ(),
            confusion_weight: d_confusion(),
            n_general_texts: d_general(),
            with_reference: true,
            attributes: vec![
                AttributeSpec {
                    name: "gender".into(),
                    values: vec!["male".into(), "female".into(), "nonbinary".into()],
                    proportions: vec![0.49, 0.49, 0.02],
                    unknown_fraction: 0.03,
                },
                AttributeSpec {
                    name: "age".into(),
                    values: vec!["young".into(), "middle".into(), "older".into()],
                    proportions: vec![0.3, 0.45, 0.25],
                    unknown_fraction: 0.05,
                },
            ],
            planted: Vec::new(),
        }
    }

    /// Four gender heads in layers 21-23, one per affected class, each
    /// routing women to the class `K/2` positions away.
    pub fn concentrated(seed: u64) -> Self {
        let mut spec = Self::base(seed);
        let heads = ["L21H3", "L21H9", "L22H12", "L23H5"];
        spec.planted = heads
            .iter()
            .enumerate()
            .map(|(class, head)| PlantedHead {
                head: head.to_string(),
                attribute: "gender".into(),
                value: "female".into(),
                strength: 4.0,
                classes: vec![class],
                confusion: None,
            })
            .collect();
        spec
    }

    /// The same total routing as [`SynthSpec::concentrated`], spread over
    /// eight heads per class (32 heads in layers 16-23).
    pub fn diffuse(seed: u64) -> Self {
        let mut spec = Self::base(seed);
        let per_class = 8;
        spec.planted = (0..4)
            .flat_map(|class| {
                (0..per_class).map(move |j| PlantedHead {
                    head: format!("L{}H{}", 16 + j, 2 * class + 1),
                    attribute: "gender".into(),
                    value: "female".into(),
                    strength: 4.0 / per_class as f64,
                    classes: vec![class],
                    confusion: None,
                })
            })
            .collect();
        spec
    }

    pub fn free_start(&self) -> usize {
        self.n_classes + self.attributes.iter().map(|a| a.values.len()).sum::<usize>()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.embed_dim == 0 {
            return bad("layers, heads and embed_dim must be positive".into());
        }
        if self.n_classes < 2 {
            return bad("need at least 2 classes".into());
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("class_margin", self.class_margin),
            ("head_offset", self.head_offset),
            ("free_noise", self.free_noise),
            ("demographic_offset", self.demographic_offset),
            ("demographic_noise", self.demographic_noise),
            ("planted_occupation", self.planted_occupation),
            ("confusion_weight", self.confusion_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0 (got {v})"));
            }
        }
        if !(0.0..=1.0).contains(&self.occupation_head_fraction) {
            return bad("occupation_head_fraction must lie in [0, 1]".into());
        }
        let [lo, hi] = self.occupation_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return bad("occupation_range must satisfy 0 <= lo <= hi".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for a in &self.attributes {
            if !names.insert(&a.name) {
                return bad(format!("duplicate attribute `{}`", a.name));
            }
            if a.values.len() < 2 || a.values.len() != a.proportions.len() {
                return bad(format!("attribute `{}` needs >= 2 values with one proportion each", a.name));
            }
            if a.proportions.iter().any(|p| p.is_nan() || *p < 0.0) || (a.proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(format!("proportions of `{}` must be >= 0 and sum to 1", a.name));
            }
            if !(0.0..1.0).contains(&a.unknown_fraction) {
                return bad(format!("unknown_fraction of `{}` must lie in [0, 1)", a.name));
            }
        }
        if self.free_start() >= self.embed_dim {
            return Err(SynthError::Infeasible(format!(
                "{} class axes + {} demographic axes leave no free coordinate in d = {}",
                self.n_classes,
                self.free_start() - self.n_classes,
                self.embed_dim
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.planted {
            let head = p.head_id()?;
            if head.layer >= self.n_layers || head.head >= self.n_heads {
                return bad(format!("planted head {head} outside a {}x{} model", self.n_layers, self.n_heads));
            }
            if !seen.insert(head) {
                return bad(format!("planted head {head} listed twice"));
            }
            if !(p.strength.is_finite() && p.strength >= 0.0) {
                return bad(format!("strength of {head} must be finite and >= 0"));
            }
            let attr = self
                .attributes
                .iter()
                .find(|a| a.name == p.attribute)
                .ok_or_else(|| SynthError::Invalid(format!("{head}: unknown attribute `{}`", p.attribute)))?;
            if !attr.values.contains(&p.value) {
                return bad(format!("{head}: `{}` is not a value of `{}`", p.value, p.attribute));
            }
            if p.classes.iter().any(|&c| c >= self.n_classes) {
                return bad(format!("{head}: affected class out of range"));
            }
            if let Some(conf) = &p.confusion {
                if conf.len() != p.classes.len() {
                    return bad(format!("{head}: one confusion class per affected class"));
                }
                if conf.iter().zip(&p.classes).any(|(&w, &c)| w >= self.n_classes || w == c) {
                    return bad(format!("{head}: confusion class must differ from its class and be in range"));
                }
            }
        }
        Ok(())
    }

    fn confusion_of(&self, planted: &PlantedHead, index: usize) -> usize {
        match &planted.confusion {
            Some(c) => c[index],
            None => (planted.classes[index] + self.n_classes / 2) % self.n_classes,
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes)
            .map(|k| {
                if self.n_classes <= OCCUPATION_NAMES.len() {
                    OCCUPATION_NAMES[k].to_string()
                } else {
                    format!("class_{k:03}")
                }
            })
            .collect()
    }
}

/// What the generator planted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruth {
    /// Sorted planted heads.
    pub planted: Vec<HeadId>,
    pub planted_by_attribute: BTreeMap<String, Vec<HeadId>>,
    /// Predictions with every planted routing term removed exactly.
    pub clean_predictions: Vec<usize>,
    /// Predictions of the generated store (with routing).
    pub predictions: Vec<usize>,
}

impl GroundTruth {
    pub fn layer_profile(&self) -> BTreeMap<usize, usize> {
        let mut profile = BTreeMap::new();
        for h in &self.planted {
            *profile.entry(h.layer).or_insert(0) += 1;
        }
        profile
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub store: HeadContributionStore,
    pub prototypes: PrototypeSet,
    pub classifier: ClassifierMatrix,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum HeadKind {
    Occupation,
    Demographic,
    Planted,
}

struct Routing {
    attr: usize,
    value: usize,
    strength: f64,
    /// class -> confusion class
    classes: Vec<(usize, usize)>,
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput, SynthError> {
    spec.validate()?;
    let (n, l, h, d, k) = (spec.n_images, spec.n_layers, spec.n_heads, spec.embed_dim, spec.n_classes);
    let slots = l * h;
    let free = spec.free_start();
    let n_attr = spec.attributes.len();
    let demo_offsets: Vec<usize> = spec
        .attributes
        .iter()
        .scan(k, |acc, a| {
            let start = *acc;
            *acc += a.values.len();
            Some(start)
        })
        .collect();

    // Per-head constants and kinds from stream 0.
    let mut routing: Vec<Option<Routing>> = (0..slots).map(|_| None).collect();
    for p in &spec.planted {
        let head = p.head_id()?;
        let attr = spec.attributes.iter().position(|a| a.name == p.attribute).expect("validated");
        let value = spec.attributes[attr].values.iter().position(|v| *v == p.value).expect("validated");
        routing[head.layer * h + head.head] = Some(Routing {
            attr,
            value,
            strength: p.strength,
            classes: (0..p.classes.len()).map(|i| (p.classes[i], spec.confusion_of(p, i))).collect(),
        });
    }
    let mut global = rng::stream(spec.seed, 0);
    let mut kinds = Vec::with_capacity(slots);
    let mut constants = vec![0.0f32; slots * d];
    for slot in 0..slots {
        let c = &mut constants[slot * d..(slot + 1) * d];
        let mut dir: Vec<f64> = (free..d).map(|_| gaussian(&mut global)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        dir.iter_mut().for_each(|x| *x *= spec.head_offset / norm);
        for (j, x) in dir.into_iter().enumerate() {
            c[free + j] = x as f32;
        }
        let occupation = rng::unit_f64(&mut global) < spec.occupation_head_fraction;
        let t = spec.occupation_range[0]
            + rng::unit_f64(&mut global) * (spec.occupation_range[1] - spec.occupation_range[0]);
        let kind = if routing[slot].is_some() {
            HeadKind::Planted
        } else if occupation {
            HeadKind::Occupation
        } else {
            HeadKind::Demographic
        };
        match kind {
            HeadKind::Planted => c[..k].fill((spec.planted_occupation * spec.head_offset) as f32),
            HeadKind::Occupation => c[..k].fill((t * spec.head_offset) as f32),
            HeadKind::Demographic => {
                for x in &mut c[k..free] {
                    *x = (spec.demographic_offset * gaussian(&mut global)) as f32;
                }
            }
        }
        kinds.push(kind);
    }

    let mut initial = vec![0.0f32; n * d];
    let mut mlp = vec![0.0f32; n * l * d];
    let mut heads = vec![0.0f32; n * slots * d];
    let mut reference = vec![0.0f32; if spec.with_reference { n * d } else { 0 }];
    let mut ref_chunks: Vec<&mut [f32]> = if spec.with_reference {
        reference.chunks_mut(d).collect()
    } else {
        (0..n).map(|_| &mut [][..]).collect()
    };
    let mlp_push = (spec.class_margin / l as f64) as f32;

    let per_image: Vec<(u32, Vec<u32>, usize, usize)> = heads
        .par_chunks_mut(slots * d)
        .zip(mlp.par_chunks_mut(l * d))
        .zip(initial.par_chunks_mut(d))
        .zip(ref_chunks.par_iter_mut())
        .enumerate()
        .map(|(image, (((hb, mb), ib), rb))| {
            let mut r = rng::stream(spec.seed, image as u64 + 1);
            let class = rng::below(&mut r, k as u64) as usize;
            let demos: Vec<u32> = spec
                .attributes
                .iter()
                .map(|a| {
                    if rng::unit_f64(&mut r) < a.unknown_fraction {
                        a.values.len() as u32
                    } else {
                        rng::categorical(&mut r, &a.proportions) as u32
                    }
                })
                .collect();
            for x in ib.iter_mut() {
                *x = (spec.noise_sigma * gaussian(&mut r)) as f32;
            }
            for layer in 0..l {
                mb[layer * d + class] = mlp_push;
            }
            let mut clean = vec![0.0f64; d];
            let mut routed = vec![0.0f64; d];
            for (a, &x) in clean.iter_mut().zip(ib.iter()) {
                *a += x as f64;
            }
            for layer in 0..l {
                for (a, &x) in clean.iter_mut().zip(&mb[layer * d..(layer + 1) * d]) {
                    *a += x as f64;
                }
            }
            routed.copy_from_slice(&clean);
            for slot in 0..slots {
                let out = &mut hb[slot * d..(slot + 1) * d];
                out.copy_from_slice(&constants[slot * d..(slot + 1) * d]);
                for x in &mut out[free..] {
                    *x += (spec.free_noise * gaussian(&mut r)) as f32;
                }
                if kinds[slot] == HeadKind::Demographic {
                    for x in &mut out[k..free] {
                        *x += (spec.demographic_noise * gaussian(&mut r)) as f32;
                    }
                }
                for (a, &x) in clean.iter_mut().zip(out.iter()) {
                    *a += x as f64;
                }
                if let Some(route) = &routing[slot] {
                    let hit = demos[route.attr] as usize == route.value;
                    if let Some(&(_, wrong)) = route.classes.iter().find(|(c, _)| *c == class).filter(|_| hit) {
                        out[demo_offsets[route.attr] + route.value] += route.strength as f32;
                        out[wrong] += (route.strength * spec.confusion_weight) as f32;
                    }
                }
                for (a, &x) in routed.iter_mut().zip(out.iter()) {
                    *a += x as f64;
                }
            }
            if !rb.is_empty() {
                // Reverse order: heads, MLP blocks, initial token.
                let mut acc = vec![0.0f64; d];
                for slot in (0..slots).rev() {
                    for (a, &x) in acc.iter_mut().zip(&hb[slot * d..(slot + 1) * d]) {
                        *a += x as f64;
                    }
                }
                for layer in (0..l).rev() {
                    for (a, &x) in acc.iter_mut().zip(&mb[layer * d..(layer + 1) * d]) {
                        *a += x as f64;
                    }
                }
                for (a, &x) in acc.iter_mut().zip(ib.iter()) {
                    *a += x as f64;
                }
                for (o, a) in rb.iter_mut().zip(acc) {
                    *o = a as f32;
                }
            }
            // Classifier rows are the class axes.
            (class as u32, demos, argmax(&routed[..k]), argmax(&clean[..k]))
        })
        .collect();
    drop(ref_chunks);

    let labels: Vec<u32> = per_image.iter().map(|p| p.0).collect();
    let mut demographics = Vec::with_capacity(n * n_attr);
    for p in &per_image {
        demographics.extend_from_slice(&p.1);
    }
    let predictions: Vec<usize> = per_image.iter().map(|p| p.2).collect();
    let clean_predictions: Vec<usize> = per_image.iter().map(|p| p.3).collect();

    let class_names = spec.class_names();
    let attributes: Vec<DemographicAttribute> = spec
        .attributes
        .iter()
        .map(|a| DemographicAttribute {
            name: a.name.clone(),
            values: a.values.clone(),
        })
        .collect();
    let mut metadata = BTreeMap::new();
    metadata.insert("generator".to_string(), serde_json::json!("headbias-synth"));
    metadata.insert("seed".to_string(), serde_json::json!(spec.seed));
    let manifest = StoreManifest {
        n_images: n,
        n_layers: l,
        n_heads: h,
        embed_dim: d,
        class_names: class_names.clone(),
        demographic_attributes: attributes.clone(),
        model_tag: "synthetic".into(),
        metadata: metadata.clone(),
    };
    let store = HeadContributionStore::new(
        manifest,
        initial,
        mlp,
        heads,
        labels,
        demographics,
        spec.with_reference.then_some(reference),
    )?;

    let axis = |i: usize| {
        let mut row = vec![0.0f32; d];
        row[i] = 1.0;
        row
    };
    let occupation: Vec<f32> = (0..k).flat_map(axis).collect();
    let n_demo = free - k;
    let demographic: Vec<f32> = (k..free).flat_map(axis).collect();
    let mut dictionary = Vec::new();
    let mut rows = Vec::new();
    for i in 0..spec.n_general_texts {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(&mut global)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        dictionary.push(DictionaryEntry::general(format!("concept_{i:04}")));
        rows.extend(v.iter().map(|&x| x as f32));
    }
    for (c, name) in class_names.iter().enumerate() {
        dictionary.push(DictionaryEntry::occupation(format!("a photo of a {name}"), name.clone()));
        rows.extend(axis(c));
    }
    for (a, attr) in spec.attributes.iter().enumerate() {
        for (v, value) in attr.values.iter().enumerate() {
            dictionary.push(DictionaryEntry::demographic(
                format!("{}_{}", attr.name, value),
                attr.name.clone(),
                value.clone(),
            ));
            rows.extend(axis(demo_offsets[a] + v));
        }
    }
    debug_assert_eq!(demographic.len(), n_demo * d);
    let prototypes = PrototypeSet::new(d, class_names.clone(), occupation.clone(), attributes, demographic, dictionary, rows)?
        .with_metadata(metadata);
    let classifier = ClassifierMatrix::new(class_names, d, occupation)?;

    let mut planted: Vec<HeadId> = Vec::new();
    let mut planted_by_attribute: BTreeMap<String, Vec<HeadId>> = BTreeMap::new();
    for p in &spec.planted {
        let head = p.head_id()?;
        planted.push(head);
        planted_by_attribute.entry(p.attribute.clone()).or_default().push(head);
    }
    planted.sort();
    planted_by_attribute.values_mut().for_each(|v| v.sort());

    Ok(SynthOutput {
        store,
        prototypes,
        classifier,
        truth: GroundTruth {
            planted,
            planted_by_attribute,
            clean_predictions,
            predictions,
        },
    })
}

/// Brute-force per-class statistics, written without the stats module.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleClass {
    pub class: usize,
    pub n: u64,
    pub chi2: f64,
    pub dof: usize,
    /// `None` when fewer than two groups survive; 0 when every prediction
    /// falls in one column.
    pub cramers_v: Option<f64>,
}

pub fn oracle_metrics(
    store: &HeadContributionStore,
    predictions: &[usize],
    attribute: &str,
    min_group_size: usize,
) -> Vec<OracleClass> {
    let attrs = &store.manifest().demographic_attributes;
    let a = attrs.iter().position(|x| x.name == attribute).expect("known attribute");
    let n_values = attrs[a].values.len();
    let k = store.n_classes();
    let mut out = Vec::with_capacity(k);
    for class in 0..k {
        // Group sizes first, by direct scan.
        let mut keep = Vec::new();
        for value in 0..n_values {
            let mut size = 0usize;
            for image in 0..store.n_images() {
                if store.true_class(image) == class && store.demographic(image, a) == Some(value) {
                    size += 1;
                }
            }
            if size >= min_group_size {
                keep.push(value);
            }
        }
        let mut table = vec![vec![0.0f64; k]; keep.len()];
        for image in 0..store.n_images() {
            if store.true_class(image) != class {
                continue;
            }
            if let Some(value) = store.demographic(image, a) {
                if let Some(row) = keep.iter().position(|&v| v == value) {
                    table[row][predictions[image]] += 1.0;
                }
            }
        }
        let cols: Vec<usize> = (0..k).filter(|&c| table.iter().any(|r| r[c] > 0.0)).collect();
        let total: f64 = table.iter().flatten().sum();
        if keep.len() < 2 {
            out.push(OracleClass {
                class,
                n: total as u64,
                chi2: 0.0,
                dof: 0,
                cramers_v: None,
            });
            continue;
        }
        let mut chi2 = 0.0;
        for row in &table {
            let r: f64 = row.iter().sum();
            for &c in &cols {
                let col: f64 = table.iter().map(|x| x[c]).sum();
                let e = r * col / total;
                chi2 += (row[c] - e) * (row[c] - e) / e;
            }
        }
        let dof = (keep.len() - 1) * cols.len().saturating_sub(1);
        let v = if dof == 0 {
            0.0
        } else {
            let m = keep.len().min(cols.len()) as f64 - 1.0;
            (chi2 / (total * m)).sqrt()
        };
        out.push(OracleClass {
            class,
            n: total as u64,
            chi2: if dof == 0 { 0.0 } else { chi2 },
            dof,
            cramers_v: Some(v),
        });
    }
    out
}

/// Mean V over `classes` with undefined classes skipped.
pub fn oracle_mean_v(metrics: &[OracleClass], classes: &[usize]) -> Option<f64> {
    let vs: Vec<f64> = classes.iter().filter_map(|&c| metrics[c].cramers_v).collect();
    (!vs.is_empty()).then(|| vs.iter().sum::<f64>() / vs.len() as f64)
}

/// Change of mean V over `classes` when every planted routing term is
/// removed from the generated predictions.
pub fn analytic_delta_v(
    store: &HeadContributionStore,
    truth: &GroundTruth,
    attribute: &str,
    classes: &[usize],
    min_group_size: usize,
) -> Option<f64> {
    let before = oracle_mean_v(&oracle_metrics(store, &truth.predictions, attribute, min_group_size), classes)?;
    let after = oracle_mean_v(&oracle_metrics(store, &truth.clean_predictions, attribute, min_group_size), classes)?;
    Some(after - before)
}
