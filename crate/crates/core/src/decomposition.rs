// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reconstruction of image representations from additive contributions,
//! zero-shot classification and mean ablation.
//!
//! Summation order is fixed: initial token, then MLP blocks by layer, then
//! heads by (layer, head). All accumulation happens in `f64`, so identical
//! inputs give bit-identical logits.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::DecompositionError;
use crate::store::{ClassifierMatrix, HeadContributionStore};

/// One attention head, addressed by layer and head index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    pub fn check(&self, n_layers: usize, n_heads: usize) -> Result<(), DecompositionError> {
        if self.layer >= n_layers || self.head >= n_heads {
            return Err(DecompositionError::HeadOutOfRange {
                layer: self.layer,
                head: self.head,
                n_layers,
                n_heads,
            });
        }
        Ok(())
    }

    fn slot(&self, n_heads: usize) -> usize {
        self.layer * n_heads + self.head
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = String;

    /// Accepts `L21H4` or `21:4`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let parts = if let Some(rest) = s.strip_prefix(['L', 'l']) {
            rest.split_once(['H', 'h'])
        } else {
            s.split_once(':')
        };
        let (layer, head) = parts.ok_or_else(|| format!("bad head id `{s}` (use L<layer>H<head> or <layer>:<head>)"))?;
        let parse = |x: &str| x.parse::<usize>().map_err(|e| format!("bad head id `{s}`: {e}"));
        Ok(HeadId::new(parse(layer)?, parse(head)?))
    }
}

/// Heads to mean-ablate together with their per-head means over the whole
/// evaluation store.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationPlan {
    shape: (usize, usize, usize),
    heads: Vec<HeadId>,
    means: Vec<f64>,
    /// `slot -> index into heads` for every (layer, head) slot.
    lookup: Vec<Option<usize>>,
}

impl AblationPlan {
    pub fn heads(&self) -> &[HeadId] {
        &self.heads
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn mean(&self, head: HeadId) -> Option<&[f64]> {
        let d = self.shape.2;
        let idx = *self.lookup.get(head.slot(self.shape.1))?;
        idx.map(|i| &self.means[i * d..(i + 1) * d])
    }

    /// `(n_layers, n_heads, embed_dim)` of the store the plan was built from.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    fn check_store(&self, store: &HeadContributionStore) -> Result<(), DecompositionError> {
        let shape = (store.n_layers(), store.n_heads(), store.embed_dim());
        if shape != self.shape {
            return Err(DecompositionError::PlanShape {
                plan: self.shape,
                store: shape,
            });
        }
        Ok(())
    }
}

/// Builds an ablation plan whose rows are the per-head means over all images.
pub fn head_means(
    store: &HeadContributionStore,
    heads: impl IntoIterator<Item = HeadId>,
) -> Result<AblationPlan, DecompositionError> {
    let (l, h, d) = (store.n_layers(), store.n_heads(), store.embed_dim());
    if store.n_images() == 0 {
        return Err(DecompositionError::EmptyStore);
    }
    let heads: BTreeSet<HeadId> = heads.into_iter().collect();
    for head in &heads {
        head.check(l, h)?;
    }
    let heads: Vec<HeadId> = heads.into_iter().collect();
    let n = store.n_images() as f64;
    let mut means = vec![0.0f64; heads.len() * d];
    for image in 0..store.n_images() {
        for (i, head) in heads.iter().enumerate() {
            let row = &mut means[i * d..(i + 1) * d];
            for (acc, &x) in row.iter_mut().zip(store.head(image, head.layer, head.head)) {
                *acc += x as f64;
            }
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    let mut lookup = vec![None; l * h];
    for (i, head) in heads.iter().enumerate() {
        lookup[head.slot(h)] = Some(i);
    }
    Ok(AblationPlan {
        shape: (l, h, d),
        heads,
        means,
        lookup,
    })
}

/// Final representation of one image, with planned heads replaced by their
/// means.
pub fn reconstruct(
    store: &HeadContributionStore,
    image: usize,
    plan: Option<&AblationPlan>,
) -> Result<Vec<f64>, DecompositionError> {
    if image >= store.n_images() {
        return Err(DecompositionError::ImageOutOfRange {
            index: image,
            n_images: store.n_images(),
        });
    }
    if let Some(plan) = plan {
        plan.check_store(store)?;
    }
    Ok(reconstruct_unchecked(store, image, plan))
}

fn reconstruct_unchecked(
    store: &HeadContributionStore,
    image: usize,
    plan: Option<&AblationPlan>,
) -> Vec<f64> {
    let d = store.embed_dim();
    let mut rep: Vec<f64> = store.initial(image).iter().map(|&x| x as f64).collect();
    for layer in 0..store.n_layers() {
        add_f32(&mut rep, store.mlp(image, layer));
    }
    let heads = store.image_heads(image);
    let planned = plan.filter(|p| !p.is_empty());
    for (slot, contrib) in heads.chunks_exact(d).enumerate() {
        match planned.and_then(|p| p.lookup[slot]) {
            Some(i) => {
                let mean = &planned.expect("lookup implies plan").means[i * d..(i + 1) * d];
                rep.iter_mut().zip(mean).for_each(|(r, &m)| *r += m);
            }
            None => add_f32(&mut rep, contrib),
        }
    }
    rep
}

#[inline]
fn add_f32(acc: &mut [f64], x: &[f32]) {
    acc.iter_mut().zip(x).for_each(|(a, &v)| *a += v as f64);
}

/// Predictions and raw logits for every image of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub predictions: Vec<usize>,
    /// Row-major `[n_images, K]`.
    pub logits: Vec<f64>,
    pub n_classes: usize,
}

impl Classification {
    pub fn logits_of(&self, image: usize) -> &[f64] {
        &self.logits[image * self.n_classes..(image + 1) * self.n_classes]
    }

    pub fn accuracy(&self, store: &HeadContributionStore) -> f64 {
        accuracy(&self.predictions, store.labels())
    }
}

pub fn check_classifier(
    store: &HeadContributionStore,
    classifier: &ClassifierMatrix,
) -> Result<(), DecompositionError> {
    if classifier.embed_dim() != store.embed_dim() || classifier.n_classes() != store.n_classes() {
        return Err(DecompositionError::ClassifierShape {
            classes: classifier.n_classes(),
            dim: classifier.embed_dim(),
            expected_classes: store.n_classes(),
            expected_dim: store.embed_dim(),
        });
    }
    Ok(())
}

/// Zero-shot classification of every image: logits are unnormalised dot
/// products with the class rows; ties go to the lowest class index.
pub fn classify(
    store: &HeadContributionStore,
    classifier: &ClassifierMatrix,
    plan: Option<&AblationPlan>,
) -> Result<Classification, DecompositionError> {
    check_classifier(store, classifier)?;
    if let Some(plan) = plan {
        plan.check_store(store)?;
    }
    let k = classifier.n_classes();
    let weights: Vec<Vec<f64>> = (0..k)
        .map(|c| classifier.row(c).iter().map(|&w| w as f64).collect())
        .collect();
    let per_image: Vec<(usize, Vec<f64>)> = (0..store.n_images())
        .into_par_iter()
        .map(|image| {
            let rep = reconstruct_unchecked(store, image, plan);
            let logits: Vec<f64> = weights
                .iter()
                .map(|w| w.iter().zip(&rep).fold(0.0, |acc, (a, b)| acc + a * b))
                .collect();
            (argmax(&logits), logits)
        })
        .collect();
    let mut predictions = Vec::with_capacity(per_image.len());
    let mut logits = Vec::with_capacity(per_image.len() * k);
    for (pred, row) in per_image {
        predictions.push(pred);
        logits.extend(row);
    }
    Ok(Classification {
        predictions,
        logits,
        n_classes: k,
    })
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(predictions: &[usize], labels: &[u32]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| p == l as usize)
        .count();
    correct as f64 / predictions.len() as f64
}
