// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bias quantification: contingency tables, chi-squared test of homogeneity,
//! Benjamini–Hochberg correction and Cramér's V.

use serde::Serialize;

use crate::error::{StatsError, Untestable};
use crate::store::HeadContributionStore;

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_MIN_GROUP_SIZE: usize = 20;

/// Demographic-group × predicted-class counts for one true class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContingencyTable {
    pub true_class: usize,
    pub attribute: String,
    /// `[groups used, K]`, one row per included group.
    pub counts: Vec<Vec<u64>>,
    pub group_names: Vec<String>,
    pub group_values: Vec<usize>,
    pub excluded_groups: Vec<ExcludedGroup>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExcludedGroup {
    pub name: String,
    pub value: usize,
    pub count: u64,
}

impl ContingencyTable {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_total(&self, row: usize) -> u64 {
        self.counts[row].iter().sum()
    }
}

/// Per-class tallies `[class][value][predicted]` for one attribute.
/// Images with an unknown value are skipped.
#[derive(Debug, Clone)]
pub struct GroupTally {
    n_values: usize,
    n_classes: usize,
    counts: Vec<u64>,
}

impl GroupTally {
    pub fn new(
        predictions: &[usize],
        store: &HeadContributionStore,
        attribute: usize,
    ) -> Result<Self, StatsError> {
        if predictions.len() != store.n_images() {
            return Err(StatsError::Misaligned {
                predictions: predictions.len(),
                images: store.n_images(),
            });
        }
        let n_values = store.manifest().demographic_attributes[attribute].values.len();
        let k = store.n_classes();
        let mut counts = vec![0u64; k * n_values * k];
        for (image, &pred) in predictions.iter().enumerate() {
            if let Some(value) = store.demographic(image, attribute) {
                let class = store.true_class(image);
                counts[(class * n_values + value) * k + pred] += 1;
            }
        }
        Ok(Self {
            n_values,
            n_classes: k,
            counts,
        })
    }

    pub fn row(&self, class: usize, value: usize) -> &[u64] {
        let k = self.n_classes;
        let start = (class * self.n_values + value) * k;
        &self.counts[start..start + k]
    }

    pub fn group_size(&self, class: usize, value: usize) -> u64 {
        self.row(class, value).iter().sum()
    }
}

/// Contingency table of one class; groups below `min_group_size` (and
/// images with unknown value) are excluded and listed.
pub fn build_contingency(
    predictions: &[usize],
    store: &HeadContributionStore,
    true_class: usize,
    attribute: &str,
    min_group_size: usize,
) -> Result<ContingencyTable, StatsError> {
    let attr = store
        .manifest()
        .attribute_index(attribute)
        .ok_or_else(|| StatsError::UnknownAttribute(attribute.to_string()))?;
    let tally = GroupTally::new(predictions, store, attr)?;
    contingency_from_tally(&tally, store, true_class, attr, min_group_size)
}

pub(crate) fn contingency_from_tally(
    tally: &GroupTally,
    store: &HeadContributionStore,
    true_class: usize,
    attr: usize,
    min_group_size: usize,
) -> Result<ContingencyTable, StatsError> {
    let attribute = &store.manifest().demographic_attributes[attr];
    let mut table = ContingencyTable {
        true_class,
        attribute: attribute.name.clone(),
        counts: Vec::new(),
        group_names: Vec::new(),
        group_values: Vec::new(),
        excluded_groups: Vec::new(),
    };
    for (value, name) in attribute.values.iter().enumerate() {
        let size = tally.group_size(true_class, value);
        if size >= min_group_size as u64 && size > 0 {
            table.counts.push(tally.row(true_class, value).to_vec());
            table.group_names.push(name.clone());
            table.group_values.push(value);
        } else {
            table.excluded_groups.push(ExcludedGroup {
                name: name.clone(),
                value,
                count: size,
            });
        }
    }
    if table.counts.len() < 2 {
        return Err(StatsError::Untestable(Untestable::TooFewGroups {
            surviving: table.counts.len(),
        }));
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Chi2Result {
    pub chi2: f64,
    /// Degrees of freedom after dropping all-zero columns.
    pub dof: usize,
    pub dof_before_drop: usize,
    pub p_value: f64,
    pub rows: usize,
    /// Columns left after dropping all-zero columns.
    pub cols: usize,
    pub n: u64,
}

pub fn chi2_test(table: &ContingencyTable) -> Result<Chi2Result, StatsError> {
    chi2_counts(&table.counts)
}

/// Pearson chi-squared test of homogeneity on raw counts. Columns whose
/// total is zero are dropped before expected counts are formed.
pub fn chi2_counts(counts: &[Vec<u64>]) -> Result<Chi2Result, StatsError> {
    let rows = counts.len();
    if rows < 2 {
        return Err(StatsError::Untestable(Untestable::TooFewGroups { surviving: rows }));
    }
    let k = counts[0].len();
    let col_totals: Vec<u64> = (0..k).map(|c| counts.iter().map(|r| r[c]).sum()).collect();
    let kept: Vec<usize> = (0..k).filter(|&c| col_totals[c] > 0).collect();
    let row_totals: Vec<u64> = counts.iter().map(|r| kept.iter().map(|&c| r[c]).sum()).collect();
    let n: u64 = row_totals.iter().sum();
    let dof_before_drop = (rows - 1) * k.saturating_sub(1);
    if kept.len() < 2 {
        return Err(StatsError::Untestable(Untestable::ZeroDegreesOfFreedom));
    }
    if row_totals.contains(&0) {
        return Err(StatsError::Untestable(Untestable::TooFewGroups {
            surviving: row_totals.iter().filter(|&&r| r > 0).count(),
        }));
    }
    let nf = n as f64;
    let mut chi2 = 0.0;
    for (g, row) in counts.iter().enumerate() {
        for &c in &kept {
            let expected = row_totals[g] as f64 * col_totals[c] as f64 / nf;
            let diff = row[c] as f64 - expected;
            chi2 += diff * diff / expected;
        }
    }
    let dof = (rows - 1) * (kept.len() - 1);
    Ok(Chi2Result {
        chi2,
        dof,
        dof_before_drop,
        p_value: chi2_sf(chi2, dof as f64),
        rows,
        cols: kept.len(),
        n,
    })
}

/// Cramér's V for a table of `rows × cols` (dimensions after column dropping).
pub fn cramers_v(chi2: f64, n: u64, rows: usize, cols: usize) -> Result<f64, StatsError> {
    if n == 0 {
        return Err(StatsError::EmptySample);
    }
    let m = rows.min(cols);
    if m < 2 {
        return Err(StatsError::DegenerateTable { rows, cols });
    }
    Ok((chi2 / (n as f64 * (m - 1) as f64)).sqrt())
}

/// Benjamini–Hochberg step-up adjustment. Returns adjusted p-values in input
/// order and the flags `adjusted < alpha`.
pub fn bh_correct(p_values: &[f64], alpha: f64) -> Result<(Vec<f64>, Vec<bool>), StatsError> {
    if let Some(&bad) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::InvalidPValue(bad));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let idx = order[rank];
        let candidate = p_values[idx] * (m as f64 / (rank + 1) as f64);
        running = running.min(candidate).min(1.0);
        adjusted[idx] = running;
    }
    let flags = adjusted.iter().map(|&q| q < alpha).collect();
    Ok((adjusted, flags))
}

// ---------------------------------------------------------------------------
// Chi-squared upper tail
// ---------------------------------------------------------------------------

/// Upper tail `P(X > x)` of the chi-squared distribution with `dof` degrees
/// of freedom.
pub fn chi2_sf(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_q(dof / 2.0, x / 2.0)
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `a > 0`.
pub fn ln_gamma(a: f64) -> f64 {
    if a < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * a).sin()).ln() - ln_gamma(1.0 - a);
    }
    // Exact for small integers and half-integers, which is every chi-squared case.
    if a <= 171.0 && (2.0 * a).fract() == 0.0 {
        return ln_gamma_half_integer(a);
    }
    let x = a - 1.0;
    let mut sum = LANCZOS_COEF[0];
    for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        sum += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + sum.ln()
}

/// `ln Γ(a)` for `a ∈ {1/2, 1, 3/2, ...}` via the recurrence `Γ(a+1) = aΓ(a)`.
fn ln_gamma_half_integer(a: f64) -> f64 {
    let (mut value, mut z) = if a.fract() == 0.0 {
        (0.0f64, 1.0)
    } else {
        (0.5 * std::f64::consts::PI.ln(), 0.5)
    };
    // Multiply in chunks to keep the product in range while staying exact-ish.
    let mut product = 1.0f64;
    while z < a {
        product *= z;
        if product > 1e280 {
            value += product.ln();
            product = 1.0;
        }
        z += 1.0;
    }
    value + product.ln()
}

/// Regularised upper incomplete gamma function `Q(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0, "gamma_q needs a > 0");
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_continued_fraction(a, x)
    }
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..10_000 {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * 1e-17 {
            break;
        }
    }
    sum * (a * x.ln() - x - ln_gamma(a)).exp()
}

/// Modified Lentz evaluation of the continued fraction for `Q(a, x)`.
fn gamma_q_continued_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-17 {
            break;
        }
    }
    (a * x.ln() - x - ln_gamma(a)).exp() * h
}

// ---------------------------------------------------------------------------
// Per-class and global bias
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassBiasResult {
    pub class: usize,
    pub chi2: f64,
    pub dof: usize,
    pub dof_before_drop: usize,
    pub p_value: f64,
    pub p_adjusted: f64,
    pub significant: bool,
    pub cramers_v: f64,
    pub n: u64,
    pub group_sizes: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ClassOutcome {
    Tested(ClassBiasResult),
    Untestable {
        class: usize,
        #[serde(flatten)]
        reason: Untestable,
        group_sizes: Vec<u64>,
    },
}

impl ClassOutcome {
    pub fn class(&self) -> usize {
        match self {
            ClassOutcome::Tested(r) => r.class,
            ClassOutcome::Untestable { class, .. } => *class,
        }
    }

    pub fn tested(&self) -> Option<&ClassBiasResult> {
        match self {
            ClassOutcome::Tested(r) => Some(r),
            ClassOutcome::Untestable { .. } => None,
        }
    }

    pub fn cramers_v(&self) -> Option<f64> {
        self.tested().map(|r| r.cramers_v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalBias {
    pub attribute: String,
    pub alpha: f64,
    pub min_group_size: usize,
    /// Unweighted mean V over BH-significant classes; `None` when no class
    /// is significant.
    pub mean_v: Option<f64>,
    pub n_significant: usize,
    pub n_tested: usize,
    pub significant_classes: Vec<usize>,
    pub per_class: Vec<ClassOutcome>,
}

/// Per-class tests for every class, BH correction across the testable ones,
/// and the mean V over the significant set.
pub fn global_bias(
    predictions: &[usize],
    store: &HeadContributionStore,
    attribute: &str,
    alpha: f64,
    min_group_size: usize,
) -> Result<GlobalBias, StatsError> {
    let attr = store
        .manifest()
        .attribute_index(attribute)
        .ok_or_else(|| StatsError::UnknownAttribute(attribute.to_string()))?;
    let tally = GroupTally::new(predictions, store, attr)?;
    let n_values = store.manifest().demographic_attributes[attr].values.len();
    let mut per_class = Vec::with_capacity(store.n_classes());
    for class in 0..store.n_classes() {
        let group_sizes: Vec<u64> = (0..n_values).map(|v| tally.group_size(class, v)).collect();
        let outcome = contingency_from_tally(&tally, store, class, attr, min_group_size)
            .and_then(|table| {
                let test = chi2_test(&table)?;
                let v = cramers_v(test.chi2, test.n, test.rows, test.cols)?;
                Ok(ClassBiasResult {
                    class,
                    chi2: test.chi2,
                    dof: test.dof,
                    dof_before_drop: test.dof_before_drop,
                    p_value: test.p_value,
                    p_adjusted: f64::NAN,
                    significant: false,
                    cramers_v: v,
                    n: test.n,
                    group_sizes: group_sizes.clone(),
                })
            });
        per_class.push(match outcome {
            Ok(result) => ClassOutcome::Tested(result),
            Err(StatsError::Untestable(reason)) => ClassOutcome::Untestable {
                class,
                reason,
                group_sizes,
            },
            Err(other) => return Err(other),
        });
    }
    let p_values: Vec<f64> = per_class
        .iter()
        .filter_map(|o| o.tested().map(|r| r.p_value))
        .collect();
    let (adjusted, flags) = bh_correct(&p_values, alpha)?;
    let mut next = 0;
    for outcome in per_class.iter_mut() {
        if let ClassOutcome::Tested(r) = outcome {
            r.p_adjusted = adjusted[next];
            r.significant = flags[next];
            next += 1;
        }
    }
    let significant_classes: Vec<usize> = per_class
        .iter()
        .filter_map(|o| o.tested().filter(|r| r.significant).map(|r| r.class))
        .collect();
    let mean_v = mean(
        per_class
            .iter()
            .filter_map(|o| o.tested().filter(|r| r.significant).map(|r| r.cramers_v)),
    );
    Ok(GlobalBias {
        attribute: attribute.to_string(),
        alpha,
        min_group_size,
        mean_v,
        n_significant: significant_classes.len(),
        n_tested: p_values.len(),
        significant_classes,
        per_class,
    })
}

/// Cramér's V of each listed class under `predictions`. A class whose table
/// collapses to a single predicted column carries no association and scores 0.
pub fn class_v_values(
    predictions: &[usize],
    store: &HeadContributionStore,
    attribute: &str,
    classes: &[usize],
    min_group_size: usize,
) -> Result<Vec<Option<f64>>, StatsError> {
    let attr = store
        .manifest()
        .attribute_index(attribute)
        .ok_or_else(|| StatsError::UnknownAttribute(attribute.to_string()))?;
    let tally = GroupTally::new(predictions, store, attr)?;
    classes
        .iter()
        .map(|&class| {
            match contingency_from_tally(&tally, store, class, attr, min_group_size)
                .and_then(|t| chi2_test(&t))
            {
                Ok(test) => cramers_v(test.chi2, test.n, test.rows, test.cols).map(Some),
                Err(StatsError::Untestable(Untestable::ZeroDegreesOfFreedom)) => Ok(Some(0.0)),
                Err(StatsError::Untestable(Untestable::TooFewGroups { .. })) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Unweighted mean V over a fixed class set (the baseline-significant set).
pub fn mean_v_over(
    predictions: &[usize],
    store: &HeadContributionStore,
    attribute: &str,
    classes: &[usize],
    min_group_size: usize,
) -> Result<Option<f64>, StatsError> {
    let values = class_v_values(predictions, store, attribute, classes, min_group_size)?;
    Ok(mean(values.into_iter().flatten()))
}

pub(crate) fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}
