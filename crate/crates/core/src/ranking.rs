// SPDX-License-Identifier: MIT OR Apache-2.0

//! Zero-shot concept alignment of attention heads and threshold-based
//! candidate selection.
//!
//! For every head and class the per-class centroid of the head's
//! contribution is compared (cosine similarity) with the class's occupation
//! prototype and with each demographic prototype of the audited attribute.
//! A head is a candidate when, for at least one class, its demographic
//! response is directionally specific (gap between the two largest absolute
//! similarities above `tau_gap`) and its occupation alignment is non-negligible
//! (`|S_occ| > tau_occ`).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomposition::{classify, head_means, Classification, HeadId};
use crate::error::RankingError;
use crate::stats::{global_bias, mean_v_over, GlobalBias};
use crate::store::{ClassifierMatrix, HeadContributionStore, PrototypeSet};

/// Which demographic prototypes enter the directional gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapScope {
    /// Only the values of the audited attribute.
    #[default]
    Attribute,
    /// Every demographic prototype of every attribute.
    AllAttributes,
}

/// Cosine alignment of per-class head centroids with occupation and
/// demographic prototypes. `None` marks classes without images.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentTable {
    pub attribute: String,
    pub value_names: Vec<String>,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_classes: usize,
    /// `[L, H, K]`.
    s_occ: Vec<Option<f64>>,
    /// `[L, H, K, n_values]`.
    s_bias: Vec<Option<f64>>,
    pub centroid_counts: Vec<usize>,
}

impl AlignmentTable {
    /// Builds a table from raw scores; used by tests and external producers.
    #[allow(clippy::too_many_arguments)]
    pub fn from_scores(
        attribute: impl Into<String>,
        value_names: Vec<String>,
        n_layers: usize,
        n_heads: usize,
        n_classes: usize,
        s_occ: Vec<Option<f64>>,
        s_bias: Vec<Option<f64>>,
        centroid_counts: Vec<usize>,
    ) -> Result<Self, RankingError> {
        let cells = n_layers * n_heads * n_classes;
        if s_occ.len() != cells || s_bias.len() != cells * value_names.len() || centroid_counts.len() != n_classes {
            return Err(RankingError::Shape("score arrays do not match the declared dimensions".into()));
        }
        if s_occ.iter().chain(&s_bias).flatten().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(RankingError::Shape("cosine scores must lie in [-1, 1]".into()));
        }
        Ok(Self {
            attribute: attribute.into(),
            value_names,
            n_layers,
            n_heads,
            n_classes,
            s_occ,
            s_bias,
            centroid_counts,
        })
    }

    pub fn n_values(&self) -> usize {
        self.value_names.len()
    }

    fn cell(&self, head: HeadId, class: usize) -> usize {
        (head.layer * self.n_heads + head.head) * self.n_classes + class
    }

    pub fn s_occ(&self, head: HeadId, class: usize) -> Option<f64> {
        self.s_occ[self.cell(head, class)]
    }

    /// Similarities with every value of the audited attribute.
    pub fn s_bias(&self, head: HeadId, class: usize) -> &[Option<f64>] {
        let v = self.n_values();
        let start = self.cell(head, class) * v;
        &self.s_bias[start..start + v]
    }

    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.n_layers).flat_map(move |l| (0..self.n_heads).map(move |h| HeadId::new(l, h)))
    }

    /// Gap and occupation alignment for every defined (head, class) pair.
    pub fn scores(&self) -> Vec<HeadClassScore> {
        let mut out = Vec::new();
        for head in self.heads() {
            for class in 0..self.n_classes {
                let Some(s_occ) = self.s_occ(head, class) else {
                    continue;
                };
                let Ok((gap, dominant)) = directional_gap(self.s_bias(head, class)) else {
                    continue;
                };
                out.push(HeadClassScore {
                    head,
                    class,
                    dominant_value: dominant,
                    gap,
                    s_occ_abs: s_occ.abs(),
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeadClassScore {
    pub head: HeadId,
    pub class: usize,
    pub dominant_value: usize,
    pub gap: f64,
    pub s_occ_abs: f64,
}

fn cosine(a: &[f64], b: &[f32]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let y = y as f64;
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Per-class centroids `[K, L*H, d]` of every head, plus image counts.
fn class_centroids(store: &HeadContributionStore) -> (Vec<f64>, Vec<usize>) {
    let k = store.n_classes();
    let slots = store.n_layers() * store.n_heads();
    let d = store.embed_dim();
    let mut sums = vec![0.0f64; k * slots * d];
    let mut counts = vec![0usize; k];
    for image in 0..store.n_images() {
        let class = store.true_class(image);
        counts[class] += 1;
        let block = &mut sums[class * slots * d..(class + 1) * slots * d];
        for (acc, &x) in block.iter_mut().zip(store.image_heads(image)) {
            *acc += x as f64;
        }
    }
    for class in 0..k {
        if counts[class] > 0 {
            let n = counts[class] as f64;
            sums[class * slots * d..(class + 1) * slots * d]
                .iter_mut()
                .for_each(|x| *x /= n);
        }
    }
    (sums, counts)
}

/// Alignment of every head with the occupation prototypes and the
/// prototypes of `attribute`.
pub fn compute_alignment(
    store: &HeadContributionStore,
    prototypes: &PrototypeSet,
    attribute: &str,
) -> Result<AlignmentTable, RankingError> {
    compute_alignment_scoped(store, prototypes, attribute, GapScope::Attribute)
}

pub fn compute_alignment_scoped(
    store: &HeadContributionStore,
    prototypes: &PrototypeSet,
    attribute: &str,
    scope: GapScope,
) -> Result<AlignmentTable, RankingError> {
    if store.manifest().attribute_index(attribute).is_none() {
        return Err(RankingError::UnknownAttribute(attribute.to_string()));
    }
    let (value_names, demo_rows): (Vec<String>, &[f32]) = match scope {
        GapScope::Attribute => {
            let attr = prototypes
                .attributes()
                .iter()
                .find(|a| a.name == attribute)
                .ok_or_else(|| RankingError::UnknownAttribute(attribute.to_string()))?;
            let rows = prototypes
                .demographic_rows(attribute)
                .expect("attribute present in prototypes");
            (attr.values.clone(), rows)
        }
        GapScope::AllAttributes => (
            prototypes
                .attributes()
                .iter()
                .flat_map(|a| a.values.iter().map(move |v| format!("{}_{}", a.name, v)))
                .collect(),
            prototypes.all_demographic_rows(),
        ),
    };
    let d = store.embed_dim();
    if prototypes.embed_dim() != d {
        return Err(RankingError::Shape(format!(
            "prototype dimension {} != store dimension {d}",
            prototypes.embed_dim()
        )));
    }
    let k = store.n_classes();
    if prototypes.occupation_names().len() != k {
        return Err(RankingError::Shape(format!(
            "{} occupation prototypes for {k} classes",
            prototypes.occupation_names().len()
        )));
    }
    let (l, h) = (store.n_layers(), store.n_heads());
    let n_values = value_names.len();
    let (centroids, counts) = class_centroids(store);
    let slots = l * h;

    // One (head, class) cell per work item; output order is fixed by index.
    let cells: Vec<(Option<f64>, Vec<Option<f64>>)> = (0..slots * k)
        .into_par_iter()
        .map(|cell| {
            let slot = cell / k;
            let class = cell % k;
            if counts[class] == 0 {
                return (None, vec![None; n_values]);
            }
            let centroid = &centroids[(class * slots + slot) * d..(class * slots + slot + 1) * d];
            let s_occ = cosine(centroid, prototypes.occupation_row(class));
            let s_bias = demo_rows
                .chunks_exact(d)
                .map(|row| Some(cosine(centroid, row)))
                .collect();
            (Some(s_occ), s_bias)
        })
        .collect();
    let mut s_occ = Vec::with_capacity(slots * k);
    let mut s_bias = Vec::with_capacity(slots * k * n_values);
    for (occ, bias) in cells {
        s_occ.push(occ);
        s_bias.extend(bias);
    }
    Ok(AlignmentTable {
        attribute: attribute.to_string(),
        value_names,
        n_layers: l,
        n_heads: h,
        n_classes: k,
        s_occ,
        s_bias,
        centroid_counts: counts,
    })
}

/// Largest minus second-largest absolute similarity, and the index of the
/// largest (lowest index on ties). Undefined entries are ignored.
pub fn directional_gap(similarities: &[Option<f64>]) -> Result<(f64, usize), RankingError> {
    let defined: Vec<(usize, f64)> = similarities
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|v| (i, v.abs())))
        .collect();
    if defined.len() < 2 {
        return Err(RankingError::TooFewValues(defined.len()));
    }
    let mut first = defined[0];
    let mut second: Option<(usize, f64)> = None;
    for &(i, v) in &defined[1..] {
        if v > first.1 {
            second = Some(first);
            first = (i, v);
        } else if second.is_none_or(|s| v > s.1) {
            second = Some((i, v));
        }
    }
    let second = second.expect("at least two defined values");
    Ok((first.1 - second.1, first.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPair {
    pub tau_gap: f64,
    pub tau_occ: f64,
}

impl ThresholdPair {
    pub fn new(tau_gap: f64, tau_occ: f64) -> Result<Self, RankingError> {
        if !(tau_gap > 0.0 && tau_occ > 0.0) {
            return Err(RankingError::Thresholds(format!(
                "both thresholds must be positive (tau_gap={tau_gap}, tau_occ={tau_occ})"
            )));
        }
        Ok(Self { tau_gap, tau_occ })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evidence {
    pub head: HeadId,
    pub class: usize,
    pub dominant_value: usize,
    pub gap: f64,
    pub s_occ_abs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CandidateSet {
    /// Sorted by (layer, head).
    pub heads: Vec<HeadId>,
    /// Every qualifying (head, class) pair, in (head, class) order.
    pub evidence: Vec<Evidence>,
}

impl CandidateSet {
    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn evidence_for(&self, head: HeadId) -> impl Iterator<Item = &Evidence> {
        self.evidence.iter().filter(move |e| e.head == head)
    }

    /// Per-layer head counts, used to build layer-matched controls.
    pub fn layer_profile(&self) -> BTreeMap<usize, usize> {
        let mut profile = BTreeMap::new();
        for head in &self.heads {
            *profile.entry(head.layer).or_insert(0) += 1;
        }
        profile
    }
}

pub fn select_candidates(table: &AlignmentTable, thresholds: ThresholdPair) -> CandidateSet {
    select_from_scores(&table.scores(), thresholds)
}

pub(crate) fn select_from_scores(scores: &[HeadClassScore], thresholds: ThresholdPair) -> CandidateSet {
    let mut set = CandidateSet::default();
    for s in scores {
        if s.gap > thresholds.tau_gap && s.s_occ_abs > thresholds.tau_occ {
            if set.heads.last() != Some(&s.head) {
                set.heads.push(s.head);
            }
            set.evidence.push(Evidence {
                head: s.head,
                class: s.class,
                dominant_value: s.dominant_value,
                gap: s.gap,
                s_occ_abs: s.s_occ_abs,
            });
        }
    }
    set
}

/// One threshold axis: `start, start + step, ...` up to `stop` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl AxisSpec {
    pub fn values(&self) -> Result<Vec<f64>, RankingError> {
        if !(self.step > 0.0 && self.start > 0.0 && self.stop >= self.start)
            || !(self.start.is_finite() && self.stop.is_finite())
        {
            return Err(RankingError::Grid(format!(
                "need 0 < start <= stop and step > 0 (got {}:{}:{})",
                self.start, self.stop, self.step
            )));
        }
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..n).map(|i| self.start + i as f64 * self.step).collect())
    }
}

impl std::str::FromStr for AxisSpec {
    type Err = String;

    /// Parses `start:stop:step`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("expected start:stop:step, got `{s}`"));
        }
        let p = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}"));
        Ok(Self {
            start: p(parts[0])?,
            stop: p(parts[1])?,
            step: p(parts[2])?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub tau_gap: AxisSpec,
    pub tau_occ: AxisSpec,
}

impl Default for GridSpec {
    /// 40 gap values in [0.005, 0.20] by 60 occupation values in
    /// [0.005, 0.30], both with step 0.005.
    fn default() -> Self {
        Self {
            tau_gap: AxisSpec {
                start: 0.005,
                stop: 0.20,
                step: 0.005,
            },
            tau_occ: AxisSpec {
                start: 0.005,
                stop: 0.30,
                step: 0.005,
            },
        }
    }
}

/// Inputs that stay fixed across the grid.
#[derive(Debug, Clone, Copy)]
pub struct GridContext<'a> {
    pub store: &'a HeadContributionStore,
    pub classifier: &'a ClassifierMatrix,
    pub attribute: &'a str,
    pub alpha: f64,
    pub min_group_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub tau_gap: f64,
    pub tau_occ: f64,
    pub n_selected: usize,
    pub heads: Vec<HeadId>,
    pub accuracy: f64,
    pub mean_v: Option<f64>,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridChoice {
    pub thresholds: ThresholdPair,
    pub cell_index: usize,
    pub selected: CandidateSet,
    pub accuracy: f64,
    pub mean_v: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridOutcome {
    pub baseline_accuracy: f64,
    pub baseline_mean_v: Option<f64>,
    /// Baseline BH-significant classes; the objective is always evaluated
    /// on this set.
    pub significant_classes: Vec<usize>,
    pub n_gap: usize,
    pub n_occ: usize,
    /// `None` when every cell lowers accuracy.
    pub best: Option<GridChoice>,
    /// Cells in row-major (tau_gap, tau_occ) order.
    pub trace: Vec<GridCell>,
    pub distinct_head_sets: usize,
}

impl GridOutcome {
    /// Delimited export of the trace.
    pub fn trace_tsv(&self) -> String {
        let mut out = String::from("tau_gap\ttau_occ\tn_selected\taccuracy\tmean_v\tfeasible\theads\n");
        for cell in &self.trace {
            let heads: Vec<String> = cell.heads.iter().map(|h| h.to_string()).collect();
            out.push_str(&format!(
                "{:.3}\t{:.3}\t{}\t{:.6}\t{}\t{}\t{}\n",
                cell.tau_gap,
                cell.tau_occ,
                cell.n_selected,
                cell.accuracy,
                cell.mean_v.map_or("NA".into(), |v| format!("{v:.6}")),
                cell.feasible,
                heads.join(";")
            ));
        }
        out
    }
}

/// Baseline predictions and significance used by the grid and the audit.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub classification: Classification,
    pub accuracy: f64,
    pub bias: GlobalBias,
}

pub fn baseline(ctx: &GridContext<'_>) -> Result<Baseline, RankingError> {
    let classification = classify(ctx.store, ctx.classifier, None)?;
    let accuracy = classification.accuracy(ctx.store);
    let bias = global_bias(
        &classification.predictions,
        ctx.store,
        ctx.attribute,
        ctx.alpha,
        ctx.min_group_size,
    )?;
    Ok(Baseline {
        classification,
        accuracy,
        bias,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SetMetrics {
    accuracy: f64,
    mean_v: Option<f64>,
}

/// Accuracy and mean V (over `classes`) after mean-ablating `heads`.
pub fn ablation_metrics(
    ctx: &GridContext<'_>,
    heads: &[HeadId],
    classes: &[usize],
) -> Result<(f64, Option<f64>, Classification), RankingError> {
    let plan = head_means(ctx.store, heads.iter().copied())?;
    let c = classify(ctx.store, ctx.classifier, Some(&plan))?;
    let accuracy = c.accuracy(ctx.store);
    let v = mean_v_over(&c.predictions, ctx.store, ctx.attribute, classes, ctx.min_group_size)?;
    Ok((accuracy, v, c))
}

/// Sweeps the threshold grid, ablating each cell's candidate set, and picks
/// the cell with minimal mean V among cells that keep accuracy at or above
/// baseline. Ties prefer fewer heads, then larger `tau_gap`, then larger
/// `tau_occ`.
pub fn grid_search(
    ctx: &GridContext<'_>,
    table: &AlignmentTable,
    spec: &GridSpec,
    baseline: &Baseline,
) -> Result<GridOutcome, RankingError> {
    let gaps = spec.tau_gap.values()?;
    let occs = spec.tau_occ.values()?;
    let scores = table.scores();
    let classes = &baseline.bias.significant_classes;

    let cells: Vec<(ThresholdPair, Vec<HeadId>)> = gaps
        .iter()
        .flat_map(|&g| occs.iter().map(move |&o| (g, o)))
        .map(|(g, o)| {
            let t = ThresholdPair::new(g, o)?;
            Ok((t, select_from_scores(&scores, t).heads))
        })
        .collect::<Result<_, RankingError>>()?;

    let mut distinct: BTreeMap<Vec<HeadId>, Option<SetMetrics>> = BTreeMap::new();
    for (_, heads) in &cells {
        distinct.entry(heads.clone()).or_insert(None);
    }
    let keys: Vec<Vec<HeadId>> = distinct.keys().cloned().collect();
    let metrics: Vec<SetMetrics> = keys
        .par_iter()
        .map(|heads| {
            if heads.is_empty() {
                return Ok(SetMetrics {
                    accuracy: baseline.accuracy,
                    mean_v: baseline_mean_over(baseline, classes),
                });
            }
            let (accuracy, mean_v, _) = ablation_metrics(ctx, heads, classes)?;
            Ok(SetMetrics { accuracy, mean_v })
        })
        .collect::<Result<_, RankingError>>()?;
    for (key, m) in keys.iter().zip(metrics) {
        distinct.insert(key.clone(), Some(m));
    }

    let trace: Vec<GridCell> = cells
        .iter()
        .map(|(t, heads)| {
            let m = distinct[heads].expect("evaluated");
            GridCell {
                tau_gap: t.tau_gap,
                tau_occ: t.tau_occ,
                n_selected: heads.len(),
                heads: heads.clone(),
                accuracy: m.accuracy,
                mean_v: m.mean_v,
                feasible: m.accuracy >= baseline.accuracy,
            }
        })
        .collect();

    // Feasibility filter first, then the objective with its tie-breaks.
    let best_index = trace
        .iter()
        .enumerate()
        .filter(|(_, c)| c.feasible)
        .min_by(|(_, a), (_, b)| {
            let va = a.mean_v.unwrap_or(f64::INFINITY);
            let vb = b.mean_v.unwrap_or(f64::INFINITY);
            va.total_cmp(&vb)
                .then(a.n_selected.cmp(&b.n_selected))
                .then(b.tau_gap.total_cmp(&a.tau_gap))
                .then(b.tau_occ.total_cmp(&a.tau_occ))
        })
        .map(|(i, _)| i);

    let best = best_index.map(|i| {
        let cell = &trace[i];
        let thresholds = cells[i].0;
        GridChoice {
            thresholds,
            cell_index: i,
            selected: select_from_scores(&scores, thresholds),
            accuracy: cell.accuracy,
            mean_v: cell.mean_v,
        }
    });

    Ok(GridOutcome {
        baseline_accuracy: baseline.accuracy,
        baseline_mean_v: baseline.bias.mean_v,
        significant_classes: classes.clone(),
        n_gap: gaps.len(),
        n_occ: occs.len(),
        best,
        trace,
        distinct_head_sets: keys.len(),
    })
}

fn baseline_mean_over(baseline: &Baseline, classes: &[usize]) -> Option<f64> {
    crate::stats::mean(
        classes
            .iter()
            .filter_map(|&c| baseline.bias.per_class[c].cramers_v()),
    )
}

/// Convenience wrapper: alignment, baseline and grid in one call.
pub fn grid_search_full(
    store: &HeadContributionStore,
    prototypes: &PrototypeSet,
    classifier: &ClassifierMatrix,
    attribute: &str,
    spec: &GridSpec,
    alpha: f64,
    min_group_size: usize,
) -> Result<GridOutcome, RankingError> {
    let table = compute_alignment(store, prototypes, attribute)?;
    let ctx = GridContext {
        store,
        classifier,
        attribute,
        alpha,
        min_group_size,
    };
    let base = baseline(&ctx)?;
    grid_search(&ctx, &table, spec, &base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn some(v: &[f64]) -> Vec<Option<f64>> {
        v.iter().copied().map(Some).collect()
    }

    #[test]
    fn gap_examples() {
        let (g, d) = directional_gap(&some(&[0.30, 0.10, 0.05])).unwrap();
        assert_relative_eq!(g, 0.20, max_relative = 1e-12);
        assert_eq!(d, 0);
        assert_eq!(directional_gap(&some(&[0.2, 0.2])).unwrap(), (0.0, 0));
        let (g, d) = directional_gap(&some(&[-0.4, 0.1, 0.35])).unwrap();
        assert_relative_eq!(g, 0.05, max_relative = 1e-12);
        assert_eq!(d, 0);
        assert_eq!(
            directional_gap(&[Some(0.3), None]),
            Err(RankingError::TooFewValues(1))
        );
        let (g, d) = directional_gap(&[None, Some(0.1), Some(-0.5)]).unwrap();
        assert_relative_eq!(g, 0.4, max_relative = 1e-12);
        assert_eq!(d, 2);
    }

    #[test]
    fn axis_values_match_the_default_grid() {
        let spec = GridSpec::default();
        let gaps = spec.tau_gap.values().unwrap();
        let occs = spec.tau_occ.values().unwrap();
        assert_eq!(gaps.len(), 40);
        assert_eq!(occs.len(), 60);
        assert_relative_eq!(gaps[39], 0.20, max_relative = 1e-12);
        assert_relative_eq!(occs[59], 0.30, max_relative = 1e-12);
        assert!(AxisSpec { start: 0.0, stop: 1.0, step: 0.1 }.values().is_err());
        assert_eq!(
            "0.01:0.05:0.01".parse::<AxisSpec>().unwrap().values().unwrap().len(),
            5
        );
    }

    #[test]
    fn thresholds_must_be_positive() {
        assert!(ThresholdPair::new(0.0, 0.1).is_err());
        assert!(ThresholdPair::new(0.1, -1.0).is_err());
        assert!(ThresholdPair::new(0.1, 0.1).is_ok());
    }

    fn table_from(l: usize, h: usize, k: usize, v: usize, occ: Vec<Option<f64>>, bias: Vec<Option<f64>>) -> AlignmentTable {
        AlignmentTable::from_scores(
            "gender",
            (0..v).map(|i| format!("v{i}")).collect(),
            l,
            h,
            k,
            occ,
            bias,
            vec![10; k],
        )
        .unwrap()
    }

    #[test]
    fn single_head_passes_both_thresholds() {
        // 2 layers x 2 heads x 2 classes x 2 values.
        let mut occ = vec![Some(0.05); 8];
        let mut bias = vec![Some(0.1); 16];
        // Head (1,0), class 1: strong gap and occupation alignment.
        occ[(2) * 2 + 1] = Some(-0.4);
        bias[((2) * 2 + 1) * 2] = Some(0.5);
        bias[((2) * 2 + 1) * 2 + 1] = Some(0.1);
        // Head (0,1), class 0: gap only.
        bias[2] = Some(0.6);
        let table = table_from(2, 2, 2, 2, occ, bias);

        // Brute-force scan of the table.
        let t = ThresholdPair::new(0.2, 0.2).unwrap();
        let mut expected = Vec::new();
        for head in table.heads() {
            for class in 0..2 {
                let s = table.s_bias(head, class);
                let a: Vec<f64> = s.iter().map(|x| x.unwrap().abs()).collect();
                let gap = (a[0] - a[1]).abs();
                if gap > t.tau_gap && table.s_occ(head, class).unwrap().abs() > t.tau_occ {
                    expected.push((head, class));
                }
            }
        }
        let set = select_candidates(&table, t);
        assert_eq!(set.heads, vec![HeadId::new(1, 0)]);
        assert_eq!(expected, vec![(HeadId::new(1, 0), 1)]);
        assert_eq!(set.evidence.len(), 1);
        assert_eq!(set.evidence[0].class, 1);
        assert_eq!(set.evidence[0].dominant_value, 0);
        assert_relative_eq!(set.evidence[0].gap, 0.4, max_relative = 1e-12);
        assert_relative_eq!(set.evidence[0].s_occ_abs, 0.4);
    }

    #[test]
    fn high_gap_threshold_selects_nothing_and_tiny_selects_all_defined() {
        let occ = vec![Some(0.3), None, Some(0.2), Some(0.1)];
        let bias = some(&[0.5, 0.1, 0.0, 0.0, 0.3, 0.2, 0.4, 0.1]);
        let mut bias = bias;
        bias[2] = None;
        bias[3] = None;
        let table = table_from(1, 2, 2, 2, occ, bias);
        assert!(select_candidates(&table, ThresholdPair::new(0.9, 0.01).unwrap()).is_empty());
        let all = select_candidates(&table, ThresholdPair::new(1e-12, 1e-12).unwrap());
        assert_eq!(all.heads, vec![HeadId::new(0, 0), HeadId::new(0, 1)]);
        // Class 1 of head (0,0) is undefined and never appears.
        assert!(all.evidence.iter().all(|e| !(e.head == HeadId::new(0, 0) && e.class == 1)));
    }

    fn arb_table() -> impl Strategy<Value = AlignmentTable> {
        (1usize..3, 1usize..4, 2usize..4, 2usize..4).prop_flat_map(|(l, h, k, v)| {
            let cells = l * h * k;
            (
                prop::collection::vec(prop::option::weighted(0.9, -1.0f64..1.0), cells),
                prop::collection::vec(prop::option::weighted(0.9, -1.0f64..1.0), cells * v),
            )
                .prop_map(move |(occ, bias)| table_from(l, h, k, v, occ, bias))
        })
    }

    proptest! {
        #[test]
        fn raising_thresholds_never_enlarges(table in arb_table(), g in 0.001f64..0.5, o in 0.001f64..0.5, dg in 0.0f64..0.3, dop in 0.0f64..0.3) {
            let base = select_candidates(&table, ThresholdPair::new(g, o).unwrap());
            for t in [
                ThresholdPair::new(g + dg, o).unwrap(),
                ThresholdPair::new(g, o + dop).unwrap(),
                ThresholdPair::new(g + dg, o + dop).unwrap(),
            ] {
                let raised = select_candidates(&table, t);
                prop_assert!(raised.heads.iter().all(|h| base.heads.contains(h)));
            }
        }

        #[test]
        fn gap_invariant_to_sign_flip_and_permutation(values in prop::collection::vec(-1.0f64..1.0, 2..7), seed in any::<u64>()) {
            let s = some(&values);
            let (g, dom) = directional_gap(&s).unwrap();
            let flipped: Vec<Option<f64>> = s.iter().map(|x| x.map(|v| -v)).collect();
            prop_assert_eq!(directional_gap(&flipped).unwrap(), (g, dom));
            // Rotate the non-dominant values among themselves.
            let mut others: Vec<usize> = (0..values.len()).filter(|&i| i != dom).collect();
            let shift = (seed as usize) % others.len();
            let original = others.clone();
            others.rotate_left(shift);
            let mut permuted = s.clone();
            for (dst, src) in original.iter().zip(&others) {
                permuted[*dst] = s[*src];
            }
            let (g2, dom2) = directional_gap(&permuted).unwrap();
            prop_assert!((g - g2).abs() <= 1e-15);
            // Ties with the dominant value may legitimately move the index.
            let tied = values.iter().enumerate().any(|(i, v)| i != dom && v.abs() == values[dom].abs());
            if !tied {
                prop_assert_eq!(dom2, dom);
            }
        }
    }
}
