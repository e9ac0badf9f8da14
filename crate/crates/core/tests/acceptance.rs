// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use headbias::audit::{run_audit, AuditConfig};
use headbias::decomposition::{classify, head_means, reconstruct, HeadId};
use headbias::ranking::{
    baseline, compute_alignment, grid_search, select_candidates, AlignmentTable, GridContext, GridSpec, ThresholdPair,
};
use headbias::rng;
use headbias::stats::{bh_correct, chi2_counts, cramers_v};
use headbias::synth::{analytic_delta_v, generate, SynthSpec};
use headbias::textspan::{centered_low_rank, greedy_select};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

#[derive(Deserialize)]
struct FixtureTable {
    counts: Vec<Vec<u64>>,
    chi2: f64,
    dof: usize,
    dof_before_drop: usize,
    p_value: f64,
    cramers_v: f64,
}

#[derive(Deserialize)]
struct FixtureBh {
    p_values: Vec<f64>,
    adjusted: Vec<f64>,
    significant: Vec<bool>,
}

#[derive(Deserialize)]
struct Fixture {
    tables: Vec<FixtureTable>,
    bh: Vec<FixtureBh>,
}

fn stats_oracle() -> Outcome {
    let text = include_str!("fixtures/stats_reference.json");
    let fixture: Fixture = serde_json::from_str(text).expect("fixture parses");
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut mismatches = Vec::new();
    for (i, t) in fixture.tables.iter().enumerate() {
        let r = chi2_counts(&t.counts).expect("fixture tables are testable");
        let v = cramers_v(r.chi2, r.n, r.rows, r.cols).expect("valid V");
        if r.dof != t.dof || r.dof_before_drop != t.dof_before_drop {
            mismatches.push(format!("table {i} dof"));
        }
        for (got, want) in [(r.chi2, t.chi2), (r.p_value, t.p_value), (v, t.cramers_v)] {
            worst = worst.max(rel(got, want));
        }
    }
    for (g, b) in fixture.bh.iter().enumerate() {
        let (adjusted, significant) = bh_correct(&b.p_values, 0.05).expect("valid p-values");
        for (got, want) in adjusted.iter().zip(&b.adjusted) {
            worst = worst.max(rel(*got, *want));
        }
        if significant != b.significant {
            mismatches.push(format!("bh group {g} decisions"));
        }
    }
    let hand_a = chi2_counts(&[vec![30, 10], vec![10, 30]]).unwrap();
    let v_a = cramers_v(hand_a.chi2, hand_a.n, hand_a.rows, hand_a.cols).unwrap();
    let hand_b = chi2_counts(&[vec![10, 0], vec![0, 10]]).unwrap();
    let v_b = cramers_v(hand_b.chi2, hand_b.n, hand_b.rows, hand_b.cols).unwrap();
    let hand_c = chi2_counts(&[vec![15, 15, 15], vec![15, 15, 15]]).unwrap();
    let hand_ok = hand_a.chi2 == 20.0 && v_a == 0.5 && v_b == 1.0 && hand_c.chi2 == 0.0;
    if !hand_ok {
        mismatches.push(format!(
            "hand cases: chi2 {} V {} V {} chi2 {}",
            hand_a.chi2, v_a, v_b, hand_c.chi2
        ));
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-10 && mismatches.is_empty() && elapsed < Duration::from_secs(1);
    outcome(
        pass,
        format!(
            "{} tables, {} BH groups, max rel err {worst:.2e} (tol 1e-10), hand cases exact: {hand_ok}, {:.1} ms{}",
            fixture.tables.len(),
            fixture.bh.len(),
            elapsed.as_secs_f64() * 1e3,
            if mismatches.is_empty() { String::new() } else { format!(", mismatches: {mismatches:?}") }
        ),
    )
}

fn additivity() -> Outcome {
    let mut spec = SynthSpec::concentrated(11);
    spec.n_images = 5000;
    let out = generate(&spec).expect("spec is valid");
    let store = &out.store;
    let start = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..store.n_images() {
        let r = reconstruct(store, i, None).unwrap();
        let reference = store.reference(i).expect("reference emitted");
        let diff: f64 = r.iter().zip(reference).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = reference.iter().map(|&b| (b as f64).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
    }
    let per_10k = start.elapsed().as_secs_f64() * 10_000.0 / store.n_images() as f64;

    let plain = classify(store, &out.classifier, None).unwrap();
    let empty = head_means(store, std::iter::empty::<HeadId>()).unwrap();
    let ablated = classify(store, &out.classifier, Some(&empty)).unwrap();
    let identical = plain.predictions == ablated.predictions
        && plain.logits.iter().zip(&ablated.logits).all(|(a, b)| a.to_bits() == b.to_bits());
    outcome(
        worst <= 1e-6 && identical && per_10k < 1.0,
        format!(
            "{} images, max rel err {worst:.2e} (tol 1e-6), empty ablation bit-identical: {identical}, {per_10k:.3} s per 10k images",
            store.n_images()
        ),
    )
}

struct PlantedRun {
    delta_v: f64,
}

fn planted_recovery() -> (Outcome, Option<f64>) {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut ratios = Vec::new();
    let mut control_ratios = Vec::new();
    let mut runs = Vec::new();
    for seed in 1..=10u64 {
        let spec = SynthSpec::concentrated(seed);
        let out = generate(&spec).expect("spec is valid");
        let config = AuditConfig::new("gender");
        let audit = run_audit(&out.store, &out.prototypes, &out.classifier, &config).expect("audit runs");
        let report = &audit.report;
        let got: BTreeSet<HeadId> = report.suspected_heads().iter().copied().collect();
        let want: BTreeSet<HeadId> = out.truth.planted.iter().copied().collect();
        if got != want {
            failures.push(format!("seed {seed}: selected {got:?}"));
            continue;
        }
        let observed = report.suspected.as_ref().and_then(|s| s.delta_v).unwrap_or(0.0);
        let analytic = analytic_delta_v(
            &out.store,
            &out.truth,
            "gender",
            &audit.grid.significant_classes,
            config.min_group_size,
        )
        .unwrap_or(0.0);
        let ratio = if analytic < 0.0 { observed / analytic } else { 0.0 };
        ratios.push(ratio);
        if ratio < 0.9 {
            failures.push(format!("seed {seed}: ablation dV {observed:.4} vs analytic {analytic:.4}"));
        }
        let control = report.control.as_ref().and_then(|c| c.mean_delta_v).unwrap_or(f64::NAN);
        let control_ratio = control.abs() / observed.abs();
        control_ratios.push(control_ratio);
        if control_ratio.is_nan() || control_ratio >= 0.1 {
            failures.push(format!("seed {seed}: control dV {control:.4} vs planted {observed:.4}"));
        }
        runs.push(PlantedRun { delta_v: observed });
    }
    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(300) {
        failures.push(format!("runtime {:.0} s", elapsed.as_secs_f64()));
    }
    let min_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let max_control = control_ratios.iter().copied().fold(0.0, f64::max);
    let mean_dv = (!runs.is_empty()).then(|| runs.iter().map(|r| r.delta_v).sum::<f64>() / runs.len() as f64);
    (
        outcome(
            failures.is_empty(),
            format!(
                "10 seeds x 384 heads x 5000 images: exact planted set {}/10, min ablation/analytic dV {min_ratio:.3} (need >= 0.90), max |control dV|/|planted dV| {max_control:.3} (need < 0.10), {:.0} s{}",
                ratios.len(),
                elapsed.as_secs_f64(),
                if failures.is_empty() { String::new() } else { format!(", failures: {failures:?}") }
            ),
        ),
        mean_dv,
    )
}

fn diffuse_control(concentrated_dv: Option<f64>) -> Outcome {
    let spec = SynthSpec::diffuse(1);
    let out = generate(&spec).expect("spec is valid");
    let audit = run_audit(&out.store, &out.prototypes, &out.classifier, &AuditConfig::new("gender")).expect("audit runs");
    let diffuse_dv = audit.report.suspected.as_ref().and_then(|s| s.delta_v).unwrap_or(0.0);
    let n_suspected = audit.report.suspected_heads().len();
    let Some(conc) = concentrated_dv else {
        return outcome(false, "no concentrated dV to compare against".into());
    };
    let ratio = diffuse_dv.abs() / conc.abs();
    outcome(
        ratio < 0.2,
        format!(
            "32 planted heads at 1/8 strength: {n_suspected} suspected, dV {diffuse_dv:.4} vs concentrated {conc:.4}, ratio {ratio:.3} (need < 0.20)"
        ),
    )
}

fn normal(r: &mut impl Rng) -> f64 {
    StandardNormal.sample(r)
}

fn random_orthonormal(r: &mut impl Rng, d: usize, k: usize) -> Vec<DVector<f64>> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    while basis.len() < k {
        let mut v = DVector::from_fn(d, |_, _| normal(r));
        for b in &basis {
            let p = b.dot(&v);
            v -= b * p;
        }
        if v.norm() > 1e-6 {
            basis.push(v.normalize());
        }
    }
    basis
}

/// Best rank-`rank` approximation of the column-centered `c` by one-sided
/// Jacobi rotations: columns of `c V` end up mutually orthogonal, their norms
/// are the singular values, and `c = (c V) V^T`.
fn svd_truncate(c: &DMatrix<f64>, rank: usize) -> DMatrix<f64> {
    let mean = c.row_mean();
    let mut a = c.clone();
    for mut row in a.row_iter_mut() {
        row -= &mean;
    }
    let d = a.ncols();
    let mut v = DMatrix::<f64>::identity(d, d);
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..d {
            for q in p + 1..d {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dot(&a.column(q));
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for m in [&mut a, &mut v] {
                    for i in 0..m.nrows() {
                        let (x, y) = (m[(i, p)], m[(i, q)]);
                        m[(i, p)] = cs * x - sn * y;
                        m[(i, q)] = sn * x + cs * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&x, &y| a.column(y).norm().total_cmp(&a.column(x).norm()));
    let mut out = DMatrix::zeros(a.nrows(), d);
    for &i in order.iter().take(rank) {
        out += a.column(i) * v.column(i).transpose();
    }
    out
}

fn textspan_checks() -> Outcome {
    let mut r = rng::seeded(5);
    let d = 16;
    let mut notes = Vec::new();

    // Planted texts with variances 3:2:1 hidden among orthogonal distractors.
    let basis = random_orthonormal(&mut r, d, 8);
    let scales = [3.0f64.sqrt(), 2.0f64.sqrt(), 1.0];
    let mut rows = Vec::new();
    for (j, s) in scales.iter().enumerate() {
        rows.push((&basis[j] * *s).transpose());
        rows.push((&basis[j] * -*s).transpose());
    }
    let c = DMatrix::from_rows(&rows);
    let order = [5usize, 2, 7, 0, 3, 6, 1, 4];
    let dict = DMatrix::from_rows(&order.iter().map(|&j| basis[j].transpose()).collect::<Vec<_>>());
    let sel = greedy_select(&c, &dict, 3, d).unwrap();
    let picked: Vec<usize> = sel.indices.iter().map(|&i| order[i]).collect();
    let ratios = (sel.variances[0] / sel.variances[2], sel.variances[1] / sel.variances[2]);
    let order_ok = picked == [0, 1, 2] && (ratios.0 - 3.0).abs() < 1e-9 && (ratios.1 - 2.0).abs() < 1e-9;
    if !order_ok {
        notes.push(format!("picked {picked:?}, variance ratios {ratios:?}"));
    }

    // Deflating C by the chosen directions removes every selected text.
    let mut worst_orth = 0.0f64;
    for trial in 0..20 {
        let n = 30 + trial;
        let c = DMatrix::from_fn(n, 12, |_, _| normal(&mut r));
        let dict = DMatrix::from_fn(25, 12, |_, _| normal(&mut r));
        let mut dict = dict;
        for mut row in dict.row_iter_mut() {
            let norm = row.norm();
            row /= norm;
        }
        let sel = greedy_select(&c, &dict, 6, 12).unwrap();
        let mut projector = DMatrix::<f64>::identity(12, 12);
        for u in &sel.directions {
            projector -= u * u.transpose();
        }
        let mean = c.row_mean();
        let mut centered = c.clone();
        for mut row in centered.row_iter_mut() {
            row -= &mean;
        }
        let deflated = &centered * projector;
        let scale = centered.norm();
        for &i in &sel.indices {
            let t = dict.row(i).transpose();
            worst_orth = worst_orth.max((&deflated * t).norm() / scale);
        }
    }
    if worst_orth > 1e-6 {
        notes.push(format!("post-deflation residual {worst_orth:.2e}"));
    }

    // Rank step is exact when the requested rank covers rank(C).
    let mut worst_rank = 0.0f64;
    for _ in 0..50 {
        let n = r.random_range(2..=20);
        let d = r.random_range(2..=20);
        let true_rank = r.random_range(1..=n.min(d));
        let a = DMatrix::from_fn(n, true_rank, |_, _| normal(&mut r));
        let b = DMatrix::from_fn(true_rank, d, |_, _| normal(&mut r));
        let c = a * b;
        let rank = r.random_range(true_rank..=d);
        let ours = centered_low_rank(&c, rank);
        let oracle = svd_truncate(&c, rank);
        let scale = oracle.norm().max(1.0);
        worst_rank = worst_rank.max((ours - oracle).norm() / scale);
    }
    if worst_rank > 1e-9 {
        notes.push(format!("rank step error {worst_rank:.2e}"));
    }
    outcome(
        notes.is_empty(),
        format!(
            "variance-order recovery: {order_ok}, post-deflation orthogonality {worst_orth:.2e} (tol 1e-6), rank-r vs SVD oracle max err {worst_rank:.2e} on 50 matrices <= 20x20{}",
            if notes.is_empty() { String::new() } else { format!(", issues: {notes:?}") }
        ),
    )
}

fn random_table(r: &mut impl Rng) -> AlignmentTable {
    let (l, h, k, nv) = (
        r.random_range(1..=4),
        r.random_range(1..=6),
        r.random_range(2..=6),
        r.random_range(2..=4),
    );
    let s_occ = (0..l * h * k)
        .map(|_| (r.random::<f64>() > 0.05).then(|| r.random_range(-0.4..0.4)))
        .collect();
    let s_bias = (0..l * h * k * nv)
        .map(|_| (r.random::<f64>() > 0.05).then(|| r.random_range(-0.3..0.3)))
        .collect();
    let names = (0..nv).map(|v| format!("v{v}")).collect();
    AlignmentTable::from_scores("attr", names, l, h, k, s_occ, s_bias, vec![1; k]).unwrap()
}

fn monotonicity() -> Outcome {
    let mut r = rng::seeded(9);
    let taus: Vec<f64> = (1..=25).map(|i| i as f64 * 0.0125).collect();
    let mut violations = 0usize;
    let mut checked = 0usize;
    for _ in 0..50 {
        let table = random_table(&mut r);
        let sets: Vec<Vec<BTreeSet<HeadId>>> = taus
            .iter()
            .map(|&g| {
                taus.iter()
                    .map(|&o| {
                        let t = ThresholdPair::new(g, o).unwrap();
                        select_candidates(&table, t).heads.into_iter().collect()
                    })
                    .collect()
            })
            .collect();
        for i in 0..taus.len() {
            for j in 0..taus.len() {
                if i + 1 < taus.len() {
                    checked += 1;
                    violations += usize::from(!sets[i + 1][j].is_subset(&sets[i][j]));
                }
                if j + 1 < taus.len() {
                    checked += 1;
                    violations += usize::from(!sets[i][j + 1].is_subset(&sets[i][j]));
                }
            }
        }
    }

    let mut spec = SynthSpec::concentrated(2);
    spec.n_images = 600;
    let out = generate(&spec).expect("spec is valid");
    let table = compute_alignment(&out.store, &out.prototypes, "gender").unwrap();
    let ctx = GridContext {
        store: &out.store,
        classifier: &out.classifier,
        attribute: "gender",
        alpha: 0.05,
        min_group_size: 20,
    };
    let base = baseline(&ctx).unwrap();
    let grid = grid_search(&ctx, &table, &GridSpec::default(), &base).unwrap();
    let cells = grid.trace.len();
    outcome(
        violations == 0 && cells == 2400 && grid.n_gap == 40 && grid.n_occ == 60,
        format!(
            "50 random tables, {checked} neighbouring threshold pairs, {violations} inclusion violations; default grid trace {cells} cells ({} x {})",
            grid.n_gap, grid.n_occ
        ),
    )
}

fn main() {
    // Accept and ignore libtest arguments such as --nocapture.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str()));

    let mut results: Vec<(&str, Outcome)> = Vec::new();
    if wanted("statistics") {
        results.push(("statistics oracle equivalence", stats_oracle()));
    }
    if wanted("additivity") {
        results.push(("additivity", additivity()));
    }
    let mut concentrated_dv = None;
    if wanted("planted") || wanted("diffuse") {
        let (o, dv) = planted_recovery();
        concentrated_dv = dv;
        if wanted("planted") {
            results.push(("planted-head recovery", o));
        }
    }
    if wanted("diffuse") {
        results.push(("diffuse-bias negative control", diffuse_control(concentrated_dv)));
    }
    if wanted("textspan") {
        results.push(("textspan correctness", textspan_checks()));
    }
    if wanted("monotonicity") {
        results.push(("threshold monotonicity", monotonicity()));
    }
    for (name, o) in &results {
        println!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if filter.is_empty() {
        println!(
            "[INFO] real-data headline numbers: not reproducible here; they need the pretrained image-text model and the annotated photo set, which this suite does not use"
        );
    }
    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
