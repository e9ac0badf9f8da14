// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end audit: baseline, alignment, threshold grid, text labels,
//! suspected-set ablation, per-head attribution and layer-matched random
//! controls.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomposition::{classify, head_means, Classification, HeadId};
use crate::error::{AuditError, StatsError};
use crate::ranking::{
    baseline, compute_alignment_scoped, grid_search, Evidence, GapScope, GridContext, GridOutcome, GridSpec,
    ThresholdPair,
};
use crate::rng;
use crate::stats::{
    build_contingency, chi2_test, cramers_v, global_bias, mean_v_over, ClassOutcome, GlobalBias, DEFAULT_ALPHA,
    DEFAULT_MIN_GROUP_SIZE,
};
use crate::store::{check_compatible, ClassifierMatrix, HeadContributionStore, PrototypeSet};
use crate::textspan::{corroborate, textspan, TextSpanResult, DEFAULT_K, DEFAULT_RANK};

fn d_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn d_min_group() -> usize {
    DEFAULT_MIN_GROUP_SIZE
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextSpanParams {
    pub k: usize,
    pub rank: usize,
}

impl Default for TextSpanParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            rank: DEFAULT_RANK,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlParams {
    pub n_seeds: usize,
    pub seed_base: u64,
}

impl Default for ControlParams {
    fn default() -> Self {
        Self {
            n_seeds: 10,
            seed_base: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub attribute: String,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_min_group")]
    pub min_group_size: usize,
    #[serde(default)]
    pub gap_scope: GapScope,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub textspan: TextSpanParams,
    #[serde(default)]
    pub control: ControlParams,
    /// Classes for per-head attribution, by name; defaults to the
    /// baseline-significant classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exemplar_classes: Option<Vec<String>>,
    /// Attributes for the cross-effect section; defaults to every other
    /// attribute in the store.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_attributes: Option<Vec<String>>,
}

impl AuditConfig {
    pub fn new(attribute: impl Into<String>) -> Self {
        Self {
            attribute: attribute.into(),
            alpha: DEFAULT_ALPHA,
            min_group_size: DEFAULT_MIN_GROUP_SIZE,
            gap_scope: GapScope::default(),
            grid: GridSpec::default(),
            textspan: TextSpanParams::default(),
            control: ControlParams::default(),
            exemplar_classes: None,
            cross_attributes: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, AuditError> {
        let config: Self = toml::from_str(text).map_err(|e| AuditError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), AuditError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(AuditError::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.min_group_size == 0 {
            return Err(AuditError::Config("min_group_size must be at least 1".into()));
        }
        if self.textspan.k == 0 || self.textspan.rank == 0 {
            return Err(AuditError::Config("textspan k and rank must be positive".into()));
        }
        if self.control.n_seeds == 0 {
            return Err(AuditError::Config("control needs at least one seed".into()));
        }
        self.grid.tau_gap.values()?;
        self.grid.tau_occ.values()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StoreSummary {
    pub n_images: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub model_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRate {
    pub class: usize,
    pub name: String,
    pub rate: f64,
}

/// Baseline summary of one tested class: V plus the three most frequent
/// predictions with their per-group rates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassSummary {
    pub class: usize,
    pub name: String,
    pub cramers_v: f64,
    pub p_adjusted: f64,
    pub significant: bool,
    pub groups: Vec<String>,
    pub group_sizes: Vec<u64>,
    /// `[prediction][group]` rates for the top predictions.
    pub top_predictions: Vec<(usize, String, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineSection {
    pub accuracy: f64,
    pub bias: GlobalBias,
    pub classes: Vec<ClassSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSummary {
    pub n_cells: usize,
    pub n_gap: usize,
    pub n_occ: usize,
    pub distinct_head_sets: usize,
    pub feasible: bool,
    pub thresholds: Option<ThresholdPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvidenceRow {
    pub class: usize,
    pub class_name: String,
    pub dominant_value: String,
    pub gap: f64,
    pub s_occ_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateReport {
    pub head: HeadId,
    pub evidence: Vec<EvidenceRow>,
    pub textspan: TextSpanResult,
    pub corroborated: bool,
    pub matched_texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSummary {
    pub heads: Vec<HeadId>,
    pub accuracy: f64,
    pub delta_accuracy: f64,
    pub mean_v: Option<f64>,
    pub delta_v: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRedistribution {
    pub group: String,
    pub n: u64,
    /// True class first, then the group's two most frequent wrong
    /// predictions at baseline.
    pub before: Vec<ClassRate>,
    pub after: Vec<ClassRate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionRow {
    /// Head id, or `combined`.
    pub label: String,
    pub heads: Vec<HeadId>,
    pub cramers_v: f64,
    pub delta_v: f64,
    pub redistribution: Vec<GroupRedistribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionTable {
    pub class: usize,
    pub name: String,
    pub baseline_v: f64,
    /// Single-head rows by ascending ΔV, then the combined row.
    pub rows: Vec<AttributionRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlRun {
    pub seed: u64,
    pub heads: Vec<HeadId>,
    pub accuracy: f64,
    pub mean_v: Option<f64>,
    pub delta_v: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlSummary {
    pub layer_profile: BTreeMap<usize, usize>,
    pub n_seeds: usize,
    pub seed_base: u64,
    pub runs: Vec<ControlRun>,
    pub mean_delta_v: Option<f64>,
    pub std_delta_v: Option<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_delta_accuracy: f64,
    pub std_delta_accuracy: f64,
    /// Standard deviations divide by the number of seeds.
    pub std_kind: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAccuracyDelta {
    pub class: usize,
    pub name: String,
    pub n: usize,
    pub baseline: f64,
    pub ablated: f64,
    /// Percentage points.
    pub delta_pp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RedistributionTable {
    pub class: usize,
    pub name: String,
    pub groups: Vec<GroupRedistribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossEffect {
    pub attribute: String,
    pub significant_classes: Vec<usize>,
    pub baseline_mean_v: Option<f64>,
    pub ablated_mean_v: Option<f64>,
    pub delta_v: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub attribute: String,
    pub config: AuditConfig,
    pub store: StoreSummary,
    pub baseline: BaselineSection,
    pub grid: GridSummary,
    pub candidates: Vec<CandidateReport>,
    pub suspected: Option<AblationSummary>,
    pub per_head: Vec<AttributionTable>,
    pub control: Option<ControlSummary>,
    pub per_class_accuracy: Vec<ClassAccuracyDelta>,
    pub redistribution: Vec<RedistributionTable>,
    pub cross_attribute: Vec<CrossEffect>,
    pub notes: Vec<String>,
}

impl AuditReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn suspected_heads(&self) -> &[HeadId] {
        self.suspected.as_ref().map_or(&[], |s| &s.heads)
    }
}

/// Report plus the full grid trace, which is exported separately.
#[derive(Debug, Clone)]
pub struct AuditOutput {
    pub report: AuditReport,
    pub grid: GridOutcome,
}

fn group_rates(counts: &[u64], columns: &[usize], names: &[String]) -> Vec<ClassRate> {
    let n: u64 = counts.iter().sum();
    columns
        .iter()
        .map(|&c| ClassRate {
            class: c,
            name: names[c].clone(),
            rate: if n == 0 { 0.0 } else { counts[c] as f64 / n as f64 },
        })
        .collect()
}

/// Columns for one group: its true class then the two most frequent wrong
/// predictions (lowest index on ties).
fn confusion_columns(counts: &[u64], true_class: usize) -> Vec<usize> {
    let mut wrong: Vec<usize> = (0..counts.len()).filter(|&c| c != true_class && counts[c] > 0).collect();
    wrong.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    std::iter::once(true_class).chain(wrong.into_iter().take(2)).collect()
}

fn redistribution(
    store: &HeadContributionStore,
    attribute: &str,
    class: usize,
    before: &[usize],
    after: &[usize],
    min_group_size: usize,
) -> Result<Vec<GroupRedistribution>, StatsError> {
    let names = &store.manifest().class_names;
    let t0 = build_contingency(before, store, class, attribute, min_group_size)?;
    let t1 = build_contingency(after, store, class, attribute, min_group_size)?;
    Ok(t0
        .counts
        .iter()
        .zip(&t1.counts)
        .zip(&t0.group_names)
        .map(|((c0, c1), group)| {
            let columns = confusion_columns(c0, class);
            GroupRedistribution {
                group: group.clone(),
                n: c0.iter().sum(),
                before: group_rates(c0, &columns, names),
                after: group_rates(c1, &columns, names),
            }
        })
        .collect())
}

/// Cramér's V of one class; a single surviving prediction column scores 0.
fn class_v(
    predictions: &[usize],
    store: &HeadContributionStore,
    attribute: &str,
    class: usize,
    min_group_size: usize,
) -> Result<f64, StatsError> {
    let table = build_contingency(predictions, store, class, attribute, min_group_size)?;
    match chi2_test(&table) {
        Ok(t) => cramers_v(t.chi2, t.n, t.rows, t.cols),
        Err(StatsError::Untestable(crate::error::Untestable::ZeroDegreesOfFreedom)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

fn ablate(
    store: &HeadContributionStore,
    classifier: &ClassifierMatrix,
    heads: &[HeadId],
) -> Result<Classification, AuditError> {
    let plan = head_means(store, heads.iter().copied())?;
    Ok(classify(store, classifier, Some(&plan))?)
}

/// One ablation per head plus the combined set, for `focus_class`.
pub fn per_head_attribution(
    store: &HeadContributionStore,
    classifier: &ClassifierMatrix,
    heads: &[HeadId],
    focus_class: usize,
    attribute: &str,
    min_group_size: usize,
) -> Result<AttributionTable, AuditError> {
    let base = classify(store, classifier, None)?;
    per_head_attribution_with(store, classifier, heads, focus_class, attribute, min_group_size, &base.predictions)
}

fn per_head_attribution_with(
    store: &HeadContributionStore,
    classifier: &ClassifierMatrix,
    heads: &[HeadId],
    focus_class: usize,
    attribute: &str,
    min_group_size: usize,
    base: &[usize],
) -> Result<AttributionTable, AuditError> {
    let baseline_v = class_v(base, store, attribute, focus_class, min_group_size)?;
    let mut sets: Vec<(String, Vec<HeadId>)> = heads.iter().map(|h| (h.to_string(), vec![*h])).collect();
    sets.push(("combined".into(), heads.to_vec()));
    let mut rows: Vec<AttributionRow> = sets
        .into_par_iter()
        .map(|(label, set)| {
            let ablated = ablate(store, classifier, &set)?;
            let v = class_v(&ablated.predictions, store, attribute, focus_class, min_group_size)?;
            Ok(AttributionRow {
                label,
                heads: set,
                cramers_v: v,
                delta_v: v - baseline_v,
                redistribution: redistribution(store, attribute, focus_class, base, &ablated.predictions, min_group_size)?,
            })
        })
        .collect::<Result<_, AuditError>>()?;
    let combined = rows.pop().expect("combined row");
    rows.sort_by(|a, b| a.delta_v.total_cmp(&b.delta_v).then(a.heads.cmp(&b.heads)));
    rows.push(combined);
    Ok(AttributionTable {
        class: focus_class,
        name: store.manifest().class_names[focus_class].clone(),
        baseline_v,
        rows,
    })
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Draws the control heads of one seed: layers ascending, each layer's
/// non-excluded heads shuffled and the first `count` taken, then sorted.
pub fn draw_control_heads(
    store: &HeadContributionStore,
    layer_profile: &BTreeMap<usize, usize>,
    exclude: &[HeadId],
    seed: u64,
) -> Result<Vec<HeadId>, AuditError> {
    let mut r = rng::seeded(seed);
    let mut heads = Vec::new();
    for (&layer, &count) in layer_profile {
        if layer >= store.n_layers() {
            return Err(AuditError::InfeasibleProfile {
                layer,
                requested: count,
                available: 0,
            });
        }
        let pool: Vec<HeadId> = (0..store.n_heads())
            .map(|h| HeadId::new(layer, h))
            .filter(|h| !exclude.contains(h))
            .collect();
        if count > pool.len() {
            return Err(AuditError::InfeasibleProfile {
                layer,
                requested: count,
                available: pool.len(),
            });
        }
        heads.extend(rng::sample_sorted(&mut r, &pool, count));
    }
    heads.sort();
    Ok(heads)
}

/// Layer-matched random control over `n_seeds` seeds.
#[allow(clippy::too_many_arguments)]
pub fn random_control(
    store: &HeadContributionStore,
    classifier: &ClassifierMatrix,
    layer_profile: &BTreeMap<usize, usize>,
    params: ControlParams,
    exclude: &[HeadId],
    attribute: &str,
    classes: &[usize],
    min_group_size: usize,
) -> Result<ControlSummary, AuditError> {
    if params.n_seeds == 0 {
        return Err(AuditError::Config("control needs at least one seed".into()));
    }
    let base = classify(store, classifier, None)?;
    let base_acc = base.accuracy(store);
    let base_v = mean_v_over(&base.predictions, store, attribute, classes, min_group_size)?;
    // Validate the profile once before spending work.
    draw_control_heads(store, layer_profile, exclude, params.seed_base)?;
    let runs: Vec<ControlRun> = (0..params.n_seeds as u64)
        .into_par_iter()
        .map(|i| {
            let seed = params.seed_base + i;
            let heads = draw_control_heads(store, layer_profile, exclude, seed)?;
            debug_assert!(heads.iter().all(|h| !exclude.contains(h)));
            let c = ablate(store, classifier, &heads)?;
            let mean_v = mean_v_over(&c.predictions, store, attribute, classes, min_group_size)?;
            Ok(ControlRun {
                seed,
                heads,
                accuracy: c.accuracy(store),
                mean_v,
                delta_v: mean_v.zip(base_v).map(|(a, b)| a - b),
            })
        })
        .collect::<Result<_, AuditError>>()?;
    let accs: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let dacc: Vec<f64> = accs.iter().map(|a| a - base_acc).collect();
    let dvs: Option<Vec<f64>> = runs.iter().map(|r| r.delta_v).collect();
    Ok(ControlSummary {
        layer_profile: layer_profile.clone(),
        n_seeds: params.n_seeds,
        seed_base: params.seed_base,
        mean_delta_v: dvs.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64),
        std_delta_v: dvs.as_ref().map(|v| population_std(v)),
        mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
        std_accuracy: population_std(&accs),
        mean_delta_accuracy: dacc.iter().sum::<f64>() / dacc.len() as f64,
        std_delta_accuracy: population_std(&dacc),
        std_kind: "population",
        runs,
    })
}

fn class_accuracy(predictions: &[usize], store: &HeadContributionStore, class: usize) -> (usize, f64) {
    let mut n = 0;
    let mut correct = 0;
    for (i, &p) in predictions.iter().enumerate() {
        if store.true_class(i) == class {
            n += 1;
            correct += (p == class) as usize;
        }
    }
    (n, if n == 0 { 0.0 } else { correct as f64 / n as f64 })
}

fn class_summaries(
    store: &HeadContributionStore,
    predictions: &[usize],
    bias: &GlobalBias,
) -> Result<Vec<ClassSummary>, StatsError> {
    let names = &store.manifest().class_names;
    let mut out = Vec::new();
    for outcome in &bias.per_class {
        let ClassOutcome::Tested(r) = outcome else {
            continue;
        };
        let table = build_contingency(predictions, store, r.class, &bias.attribute, bias.min_group_size)?;
        let k = store.n_classes();
        let mut totals: Vec<(usize, u64)> = (0..k).map(|c| (c, table.counts.iter().map(|row| row[c]).sum())).collect();
        totals.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let top = totals
            .iter()
            .take(3)
            .filter(|(_, t)| *t > 0)
            .map(|&(c, _)| {
                let rates = table
                    .counts
                    .iter()
                    .map(|row| {
                        let n: u64 = row.iter().sum();
                        row[c] as f64 / n as f64
                    })
                    .collect();
                (c, names[c].clone(), rates)
            })
            .collect();
        out.push(ClassSummary {
            class: r.class,
            name: names[r.class].clone(),
            cramers_v: r.cramers_v,
            p_adjusted: r.p_adjusted,
            significant: r.significant,
            groups: table.group_names.clone(),
            group_sizes: table.counts.iter().map(|row| row.iter().sum()).collect(),
            top_predictions: top,
        });
    }
    out.sort_by(|a, b| b.cramers_v.total_cmp(&a.cramers_v).then(a.class.cmp(&b.class)));
    Ok(out)
}

pub fn run_audit(
    store: &HeadContributionStore,
    prototypes: &PrototypeSet,
    classifier: &ClassifierMatrix,
    config: &AuditConfig,
) -> Result<AuditOutput, AuditError> {
    config.validate()?;
    check_compatible(store, Some(prototypes), Some(classifier))?;
    let manifest = store.manifest();
    let attribute = config.attribute.as_str();
    manifest.attribute(attribute)?;
    let names = &manifest.class_names;
    let mut notes = Vec::new();

    let ctx = GridContext {
        store,
        classifier,
        attribute,
        alpha: config.alpha,
        min_group_size: config.min_group_size,
    };
    let base = baseline(&ctx)?;
    let base_preds = base.classification.predictions.clone();
    let classes = base.bias.significant_classes.clone();
    if classes.is_empty() {
        notes.push("no class is significant at baseline; the grid objective is constant".into());
    }

    let table = compute_alignment_scoped(store, prototypes, attribute, config.gap_scope)?;
    let grid = grid_search(&ctx, &table, &config.grid, &base)?;
    let grid_summary = GridSummary {
        n_cells: grid.trace.len(),
        n_gap: grid.n_gap,
        n_occ: grid.n_occ,
        distinct_head_sets: grid.distinct_head_sets,
        feasible: grid.best.is_some(),
        thresholds: grid.best.as_ref().map(|b| b.thresholds),
    };
    let selected = match &grid.best {
        Some(best) => best.selected.clone(),
        None => {
            notes.push("no threshold cell keeps accuracy at baseline; suspected set is empty".into());
            Default::default()
        }
    };
    if grid.best.is_some() && selected.is_empty() {
        notes.push("the optimal cell selects no heads; ablation sections are omitted".into());
    }

    let value_name = |e: &Evidence| table.value_names[e.dominant_value].clone();
    let candidates: Vec<CandidateReport> = selected
        .heads
        .par_iter()
        .map(|&head| {
            let ts = textspan(store, head, prototypes, config.textspan.k, config.textspan.rank)?;
            let matched: Vec<String> = ts
                .texts
                .iter()
                .filter(|t| t.category == crate::store::TextCategory::Demographic && t.attribute.as_deref() == Some(attribute))
                .map(|t| t.name.clone())
                .collect();
            Ok(CandidateReport {
                head,
                evidence: selected
                    .evidence_for(head)
                    .map(|e| EvidenceRow {
                        class: e.class,
                        class_name: names[e.class].clone(),
                        dominant_value: value_name(e),
                        gap: e.gap,
                        s_occ_abs: e.s_occ_abs,
                    })
                    .collect(),
                corroborated: corroborate(&ts, attribute),
                matched_texts: matched,
                textspan: ts,
            })
        })
        .collect::<Result<_, AuditError>>()?;

    let mut suspected = None;
    let mut per_head = Vec::new();
    let mut control = None;
    let mut per_class_accuracy = Vec::new();
    let mut redistribution_tables = Vec::new();
    let mut cross_attribute = Vec::new();

    if !selected.is_empty() {
        let heads = selected.heads.clone();
        let ablated = ablate(store, classifier, &heads)?;
        let acc = ablated.accuracy(store);
        let mean_v = mean_v_over(&ablated.predictions, store, attribute, &classes, config.min_group_size)?;
        let base_v = base.bias.mean_v;
        suspected = Some(AblationSummary {
            heads: heads.clone(),
            accuracy: acc,
            delta_accuracy: acc - base.accuracy,
            mean_v,
            delta_v: mean_v.zip(base_v).map(|(a, b)| a - b),
        });

        let exemplars: Vec<usize> = match &config.exemplar_classes {
            Some(list) => list
                .iter()
                .map(|n| {
                    manifest
                        .class_index(n)
                        .ok_or_else(|| AuditError::Config(format!("unknown exemplar class `{n}`")))
                })
                .collect::<Result<_, _>>()?,
            None => classes.clone(),
        };
        for &class in &exemplars {
            match per_head_attribution_with(store, classifier, &heads, class, attribute, config.min_group_size, &base_preds) {
                Ok(t) => per_head.push(t),
                Err(AuditError::Stats(StatsError::Untestable(reason))) => {
                    notes.push(format!("exemplar class `{}` untestable: {reason}", names[class]))
                }
                Err(e) => return Err(e),
            }
        }

        control = Some(random_control(
            store,
            classifier,
            &selected.layer_profile(),
            config.control,
            &heads,
            attribute,
            &classes,
            config.min_group_size,
        )?);

        for (class, name) in names.iter().enumerate() {
            let (n, before) = class_accuracy(&base_preds, store, class);
            let (_, after) = class_accuracy(&ablated.predictions, store, class);
            per_class_accuracy.push(ClassAccuracyDelta {
                class,
                name: name.clone(),
                n,
                baseline: before,
                ablated: after,
                delta_pp: 100.0 * (after - before),
            });
        }

        for &class in &classes {
            redistribution_tables.push(RedistributionTable {
                class,
                name: names[class].clone(),
                groups: redistribution(store, attribute, class, &base_preds, &ablated.predictions, config.min_group_size)?,
            });
        }

        let others: Vec<String> = match &config.cross_attributes {
            Some(list) => list.clone(),
            None => manifest
                .demographic_attributes
                .iter()
                .map(|a| a.name.clone())
                .filter(|n| n != attribute)
                .collect(),
        };
        for other in others {
            manifest.attribute(&other)?;
            let other_bias = global_bias(&base_preds, store, &other, config.alpha, config.min_group_size)?;
            let after = mean_v_over(
                &ablated.predictions,
                store,
                &other,
                &other_bias.significant_classes,
                config.min_group_size,
            )?;
            cross_attribute.push(CrossEffect {
                attribute: other,
                significant_classes: other_bias.significant_classes.clone(),
                baseline_mean_v: other_bias.mean_v,
                ablated_mean_v: after,
                delta_v: after.zip(other_bias.mean_v).map(|(a, b)| a - b),
            });
        }
    }

    let report = AuditReport {
        attribute: attribute.to_string(),
        config: config.clone(),
        store: StoreSummary {
            n_images: store.n_images(),
            n_layers: store.n_layers(),
            n_heads: store.n_heads(),
            embed_dim: store.embed_dim(),
            n_classes: store.n_classes(),
            model_tag: manifest.model_tag.clone(),
        },
        baseline: BaselineSection {
            accuracy: base.accuracy,
            classes: class_summaries(store, &base_preds, &base.bias)?,
            bias: base.bias,
        },
        grid: grid_summary,
        candidates,
        suspected,
        per_head,
        control,
        per_class_accuracy,
        redistribution: redistribution_tables,
        cross_attribute,
        notes,
    };
    Ok(AuditOutput { report, grid })
}

/// Sections of the plain-text rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Section {
    Baseline,
    Candidates,
    Global,
    PerHead,
    Accuracy,
    Redistribution,
    Cross,
}

impl Section {
    pub const ALL: [Section; 7] = [
        Section::Baseline,
        Section::Candidates,
        Section::Global,
        Section::PerHead,
        Section::Accuracy,
        Section::Redistribution,
        Section::Cross,
    ];
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("NA".to_string(), |x| format!("{x:+.digits$}"))
}

fn fmt_v(v: Option<f64>) -> String {
    v.map_or("NA".to_string(), |x| format!("{x:.3}"))
}

/// Plain-text tables for the selected sections.
pub fn render_text(report: &AuditReport, sections: &[Section]) -> String {
    let mut s = String::new();
    let want = |x: Section| sections.contains(&x);
    let b = &report.baseline;
    if want(Section::Baseline) {
        let _ = writeln!(
            s,
            "== Baseline ({}) ==\naccuracy {:.2}%  mean V {}  significant {}/{} tested classes",
            report.attribute,
            100.0 * b.accuracy,
            fmt_v(b.bias.mean_v),
            b.bias.n_significant,
            b.bias.n_tested
        );
        let _ = writeln!(s, "{:<16} {:>6} {:>10}  top predictions (rate per group)", "class", "V", "p_adj");
        for c in &b.classes {
            let preds: Vec<String> = c
                .top_predictions
                .iter()
                .map(|(_, name, rates)| {
                    let r: Vec<String> = c
                        .groups
                        .iter()
                        .zip(rates)
                        .map(|(g, x)| format!("{g} {:.1}", 100.0 * x))
                        .collect();
                    format!("{name} [{}]", r.join(", "))
                })
                .collect();
            let _ = writeln!(
                s,
                "{:<16} {:>6.3} {:>10.2e}{} {}",
                c.name,
                c.cramers_v,
                c.p_adjusted,
                if c.significant { "*" } else { " " },
                preds.join("; ")
            );
        }
        s.push('\n');
    }
    if want(Section::Candidates) {
        let _ = writeln!(s, "== Candidate heads ==");
        match report.grid.thresholds {
            Some(t) => {
                let _ = writeln!(
                    s,
                    "thresholds tau_gap {:.3}  tau_occ {:.3}  ({} cells, {} distinct sets)",
                    t.tau_gap, t.tau_occ, report.grid.n_cells, report.grid.distinct_head_sets
                );
            }
            None => {
                let _ = writeln!(s, "no feasible threshold ({} cells)", report.grid.n_cells);
            }
        }
        for c in &report.candidates {
            let ev: Vec<String> = c
                .evidence
                .iter()
                .map(|e| format!("{} ({}, G {:.3}, |S_occ| {:.3})", e.class_name, e.dominant_value, e.gap, e.s_occ_abs))
                .collect();
            let texts: Vec<&str> = c.textspan.texts.iter().take(5).map(|t| t.name.as_str()).collect();
            let _ = writeln!(
                s,
                "{:<8} corroborated {:<5} evidence: {}\n         texts: {}",
                c.head.to_string(),
                c.corroborated,
                ev.join("; "),
                texts.join(", ")
            );
        }
        s.push('\n');
    }
    if want(Section::Global) {
        let _ = writeln!(s, "== Global ablation ==");
        let _ = writeln!(s, "{:<18} {:>8} {:>8} {:>10}", "condition", "V", "dV", "accuracy");
        let _ = writeln!(s, "{:<18} {:>8} {:>8} {:>9.2}%", "baseline", fmt_v(b.bias.mean_v), "", 100.0 * b.accuracy);
        if let Some(sp) = &report.suspected {
            let _ = writeln!(
                s,
                "{:<18} {:>8} {:>8} {:>9.2}%",
                format!("suspected ({})", sp.heads.len()),
                fmt_v(sp.mean_v),
                fmt_opt(sp.delta_v, 3),
                100.0 * sp.accuracy
            );
        }
        if let Some(c) = &report.control {
            let n: usize = c.layer_profile.values().sum();
            let _ = writeln!(
                s,
                "{:<18} {:>8} {:>8} {:>9.2}% +/- {:.2} (dV std {})",
                format!("random avg ({n})"),
                "",
                fmt_opt(c.mean_delta_v, 3),
                100.0 * c.mean_accuracy,
                100.0 * c.std_accuracy,
                c.std_delta_v.map_or("NA".into(), |x| format!("{x:.3}"))
            );
        }
        s.push('\n');
    }
    if want(Section::PerHead) {
        for t in &report.per_head {
            let _ = writeln!(s, "== Per-head ablation: {} (baseline V {:.3}) ==", t.name, t.baseline_v);
            for r in &t.rows {
                let redis: Vec<String> = r
                    .redistribution
                    .iter()
                    .map(|g| {
                        let pairs: Vec<String> = g
                            .before
                            .iter()
                            .zip(&g.after)
                            .map(|(x, y)| format!("{} {:.1}->{:.1}", x.name, 100.0 * x.rate, 100.0 * y.rate))
                            .collect();
                        format!("{}: {}", g.group, pairs.join(", "))
                    })
                    .collect();
                let _ = writeln!(s, "{:<10} V {:.3} dV {:+.3}  {}", r.label, r.cramers_v, r.delta_v, redis.join(" | "));
            }
            s.push('\n');
        }
    }
    if want(Section::Accuracy) && !report.per_class_accuracy.is_empty() {
        let _ = writeln!(s, "== Per-class accuracy change (pp) ==");
        for a in &report.per_class_accuracy {
            let _ = writeln!(s, "{:<16} {:>6} {:>7.2}% -> {:>7.2}%  {:+.2}", a.name, a.n, 100.0 * a.baseline, 100.0 * a.ablated, a.delta_pp);
        }
        s.push('\n');
    }
    if want(Section::Redistribution) {
        for t in &report.redistribution {
            let _ = writeln!(s, "== Redistribution: {} ==", t.name);
            for g in &t.groups {
                let pairs: Vec<String> = g
                    .before
                    .iter()
                    .zip(&g.after)
                    .map(|(x, y)| format!("{} {:.1}->{:.1}", x.name, 100.0 * x.rate, 100.0 * y.rate))
                    .collect();
                let _ = writeln!(s, "{:<12} n={:<5} {}", g.group, g.n, pairs.join(", "));
            }
            s.push('\n');
        }
    }
    if want(Section::Cross) && !report.cross_attribute.is_empty() {
        let _ = writeln!(s, "== Cross-attribute effect ==");
        for c in &report.cross_attribute {
            let _ = writeln!(
                s,
                "{:<10} V {} -> {}  dV {}",
                c.attribute,
                fmt_v(c.baseline_mean_v),
                fmt_v(c.ablated_mean_v),
                fmt_opt(c.delta_v, 3)
            );
        }
        s.push('\n');
    }
    for note in &report.notes {
        let _ = writeln!(s, "note: {note}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    fn small(seed: u64) -> SynthSpec {
        let mut spec = SynthSpec::concentrated(seed);
        spec.n_images = 2000;
        spec.n_layers = 24;
        spec
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = AuditConfig::from_toml_str("attribute = \"gender\"").unwrap();
        assert_eq!(c.alpha, 0.05);
        assert_eq!(c.min_group_size, 20);
        assert_eq!(c.textspan, TextSpanParams { k: 20, rank: 80 });
        assert_eq!(c.control.n_seeds, 10);
        assert!(AuditConfig::from_toml_str("attribute = \"gender\"\nalpha = 2.0").is_err());
        assert!(AuditConfig::from_toml_str("attribute = \"gender\"\nunknown = 1").is_err());
        let c = AuditConfig::from_toml_str(
            "attribute = \"age\"\ngap_scope = \"all_attributes\"\n[grid.tau_gap]\nstart = 0.01\nstop = 0.02\nstep = 0.01\n[grid.tau_occ]\nstart = 0.01\nstop = 0.01\nstep = 0.01",
        )
        .unwrap();
        assert_eq!(c.gap_scope, GapScope::AllAttributes);
        assert_eq!(c.grid.tau_gap.values().unwrap().len(), 2);
    }

    #[test]
    fn confusion_columns_pick_top_two_wrong() {
        assert_eq!(confusion_columns(&[5, 9, 0, 9, 1], 0), vec![0, 1, 3]);
        assert_eq!(confusion_columns(&[5, 0, 0], 0), vec![0]);
    }

    #[test]
    fn population_std_of_constant_is_zero() {
        assert_eq!(population_std(&[0.3]), 0.0);
        assert!((population_std(&[1.0, 3.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn control_draws_respect_profile_and_exclusion() {
        let out = generate(&small(1)).unwrap();
        let profile: BTreeMap<usize, usize> = [(21, 2), (22, 1), (23, 1)].into();
        for seed in 0..10 {
            let heads = draw_control_heads(&out.store, &profile, &out.truth.planted, seed).unwrap();
            assert_eq!(heads.len(), 4);
            assert!(heads.iter().all(|h| !out.truth.planted.contains(h)));
            assert_eq!(heads.iter().filter(|h| h.layer == 21).count(), 2);
        }
        let too_many: BTreeMap<usize, usize> = [(21, 17)].into();
        assert!(matches!(
            draw_control_heads(&out.store, &too_many, &[], 0),
            Err(AuditError::InfeasibleProfile { layer: 21, requested: 17, available: 16 })
        ));
        let crowded: BTreeMap<usize, usize> = [(21, 15)].into();
        assert!(draw_control_heads(&out.store, &crowded, &out.truth.planted, 0).is_err());
    }

    #[test]
    fn single_seed_control_has_zero_std() {
        let out = generate(&small(2)).unwrap();
        let profile: BTreeMap<usize, usize> = [(21, 2)].into();
        let c = random_control(
            &out.store,
            &out.classifier,
            &profile,
            ControlParams { n_seeds: 1, seed_base: 4 },
            &out.truth.planted,
            "gender",
            &[0, 1],
            20,
        )
        .unwrap();
        assert_eq!(c.std_accuracy, 0.0);
        assert_eq!(c.std_delta_v, Some(0.0));
    }

    #[test]
    fn audit_recovers_planted_heads_and_is_pure() {
        let out = generate(&small(3)).unwrap();
        let config = AuditConfig::new("gender");
        let a = run_audit(&out.store, &out.prototypes, &out.classifier, &config).unwrap();
        assert_eq!(a.report.suspected_heads(), out.truth.planted.as_slice());
        assert!(a.report.candidates.iter().all(|c| c.corroborated));
        let control = a.report.control.as_ref().unwrap();
        assert_eq!(control.mean_delta_v, Some(0.0));
        let b = run_audit(&out.store, &out.prototypes, &out.classifier, &config).unwrap();
        assert_eq!(a.report.to_json(), b.report.to_json());
        let text = render_text(&a.report, &Section::ALL);
        assert!(text.contains("suspected (4)"));
    }

    #[test]
    fn zero_candidate_grid_omits_ablation_sections() {
        let out = generate(&small(4)).unwrap();
        let mut config = AuditConfig::new("gender");
        config.grid.tau_gap = crate::ranking::AxisSpec { start: 0.9, stop: 0.9, step: 0.1 };
        let a = run_audit(&out.store, &out.prototypes, &out.classifier, &config).unwrap();
        assert!(a.report.suspected.is_none());
        assert!(a.report.control.is_none());
        assert!(a.report.per_head.is_empty());
        assert!(!a.report.notes.is_empty());
    }

    #[test]
    fn single_planted_head_carries_the_combined_effect() {
        let mut spec = small(6);
        spec.planted.truncate(1);
        let out = generate(&spec).unwrap();
        let heads = [out.truth.planted[0], HeadId::new(5, 5), HeadId::new(12, 0)];
        let t = per_head_attribution(&out.store, &out.classifier, &heads, 0, "gender", 20).unwrap();
        let combined = t.rows.last().unwrap();
        assert_eq!(combined.label, "combined");
        assert_eq!(t.rows[0].heads, vec![out.truth.planted[0]]);
        assert!((t.rows[0].delta_v - combined.delta_v).abs() < 1e-12);
        assert!(t.rows[1].delta_v == 0.0 && t.rows[2].delta_v == 0.0);
    }
}
