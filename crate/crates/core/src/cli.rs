// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end. Exit codes: 0 success, 1 invalid input or
//! configuration, 2 runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::audit::{random_control, render_text, run_audit, AuditConfig, ControlParams, Section};
use crate::decomposition::{classify, head_means, HeadId};
use crate::error::{AuditError, RankingError, StatsError, SynthError};
use crate::ranking::{
    baseline, compute_alignment_scoped, grid_search, select_candidates, AxisSpec, GapScope, GridContext,
    ThresholdPair,
};
use crate::stats::{global_bias, mean_v_over};
use crate::store::{
    check_compatible, load_classifier, load_prototypes, load_store, save_classifier, save_prototypes, save_store,
};
use crate::synth::{generate, SynthSpec};
use crate::textspan::textspan;

#[derive(Debug, Parser)]
#[command(name = "headbias", version, about = "Locate demographic bias in attention heads from cached head contributions")]
pub struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Print the execution plan and exit without computing.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check store, prototype and classifier files and their compatibility.
    Validate(ValidateArgs),
    /// Per-class chi-squared tests and global V at baseline.
    Baseline(BaselineArgs),
    /// Head alignment and threshold grid search.
    Rank(RankArgs),
    /// Greedy text labels for one head.
    Textspan(TextspanArgs),
    /// Mean-ablate a set of heads and report accuracy and V.
    Ablate(AblateArgs),
    /// Layer-matched random-head control.
    Control(ControlArgs),
    /// Full pipeline with report files.
    Audit(AuditArgs),
    /// Generate a planted-bias synthetic store.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub prototypes: Option<PathBuf>,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
}

/// Options shared by the analysis subcommands; flags override the config
/// file.
#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub classifier: PathBuf,
    /// TOML audit configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub attribute: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub min_group_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// JSON output file (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-class delimited table.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    Attribute,
    AllAttributes,
}

impl From<ScopeArg> for GapScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Attribute => GapScope::Attribute,
            ScopeArg::AllAttributes => GapScope::AllAttributes,
        }
    }
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub prototypes: PathBuf,
    /// Gap axis as start:stop:step.
    #[arg(long)]
    pub grid_gap: Option<AxisSpec>,
    /// Occupation axis as start:stop:step.
    #[arg(long)]
    pub grid_occ: Option<AxisSpec>,
    #[arg(long, value_enum)]
    pub gap_scope: Option<ScopeArg>,
    /// Skip the grid and select at these thresholds (needs --tau-occ).
    #[arg(long, requires = "tau_occ")]
    pub tau_gap: Option<f64>,
    #[arg(long, requires = "tau_gap")]
    pub tau_occ: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TextspanArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub prototypes: PathBuf,
    /// Head as L<layer>H<head> or <layer>:<head>.
    #[arg(long)]
    pub head: HeadId,
    #[arg(long, default_value_t = crate::textspan::DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = crate::textspan::DEFAULT_RANK)]
    pub rank: usize,
    /// JSON output file (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-head delimited table.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated heads.
    #[arg(long, value_delimiter = ',', required = true)]
    pub heads: Vec<HeadId>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ControlArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Heads per layer as layer:count pairs, e.g. 21:2,22:1.
    #[arg(long, value_delimiter = ',', required = true)]
    pub profile: Vec<String>,
    /// Heads excluded from sampling.
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<HeadId>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub seed_base: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub prototypes: PathBuf,
    #[arg(long)]
    pub grid_gap: Option<AxisSpec>,
    #[arg(long)]
    pub grid_occ: Option<AxisSpec>,
    #[arg(long, value_enum)]
    pub gap_scope: Option<ScopeArg>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub seed_base: Option<u64>,
    /// Sections of the text report (default: all).
    #[arg(long, value_enum, value_delimiter = ',')]
    pub sections: Vec<Section>,
    /// Output directory for report.json, report.txt and grid_trace.tsv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Concentrated,
    Diffuse,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML generator spec.
    #[arg(long, conflicts_with = "preset")]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_images: Option<usize>,
    /// Output directory; receives store/, prototypes/, classifier/,
    /// truth.json and spec.toml.
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn invalid(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<crate::error::StoreError> for CliError {
    fn from(e: crate::error::StoreError) -> Self {
        Self::invalid(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        Self::invalid(e.to_string())
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::UnknownAttribute(_) => Self::invalid(e.to_string()),
            other => Self::runtime(other.to_string()),
        }
    }
}

impl From<RankingError> for CliError {
    fn from(e: RankingError) -> Self {
        match e {
            RankingError::UnknownAttribute(_) | RankingError::Thresholds(_) | RankingError::Grid(_) | RankingError::Shape(_) => {
                Self::invalid(e.to_string())
            }
            RankingError::Stats(s) => s.into(),
            other => Self::runtime(other.to_string()),
        }
    }
}

impl From<crate::error::TextSpanError> for CliError {
    fn from(e: crate::error::TextSpanError) -> Self {
        use crate::error::TextSpanError as T;
        match e {
            T::Decomposition(_) | T::ZeroK | T::ZeroRank | T::EmptyDictionary | T::Dimension { .. } => {
                Self::invalid(e.to_string())
            }
        }
    }
}

impl From<crate::error::DecompositionError> for CliError {
    fn from(e: crate::error::DecompositionError) -> Self {
        Self::invalid(e.to_string())
    }
}

impl From<AuditError> for CliError {
    fn from(e: AuditError) -> Self {
        match e {
            AuditError::Store(s) => s.into(),
            AuditError::Ranking(r) => r.into(),
            AuditError::Stats(s) => s.into(),
            AuditError::TextSpan(t) => t.into(),
            AuditError::Decomposition(d) => d.into(),
            AuditError::Config(_) | AuditError::InfeasibleProfile { .. } => Self::invalid(e.to_string()),
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, contents: &str) -> Result<(), CliError> {
    match out {
        Some(path) => write_file(path, contents),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(contents.as_bytes())
                .and_then(|_| stdout.write_all(b"\n"))
                .map_err(|e| CliError::runtime(format!("stdout: {e}")))
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable output")
}

/// Config file (if any) with flag overrides applied.
fn resolve_config(common: &CommonArgs) -> Result<AuditConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
            AuditConfig::from_toml_str(&text).map_err(CliError::from)?
        }
        None => AuditConfig::new(
            common
                .attribute
                .clone()
                .ok_or_else(|| CliError::invalid("--attribute is required without --config"))?,
        ),
    };
    if let Some(a) = &common.attribute {
        config.attribute = a.clone();
    }
    if let Some(a) = common.alpha {
        config.alpha = a;
    }
    if let Some(m) = common.min_group_size {
        config.min_group_size = m;
    }
    Ok(config)
}

fn plan(lines: &[String]) -> Result<(), CliError> {
    emit(None, &lines.join("\n"))
}

fn cmd_validate(args: &ValidateArgs, dry_run: bool) -> Result<(), CliError> {
    if dry_run {
        return plan(&[format!("validate store {}", args.store.display())]);
    }
    let store = load_store(&args.store)?;
    let prototypes = args.prototypes.as_ref().map(load_prototypes).transpose()?;
    let classifier = args.classifier.as_ref().map(load_classifier).transpose()?;
    check_compatible(&store, prototypes.as_ref(), classifier.as_ref())?;
    let summary = serde_json::json!({
        "status": "ok",
        "n_images": store.n_images(),
        "n_layers": store.n_layers(),
        "n_heads": store.n_heads(),
        "embed_dim": store.embed_dim(),
        "n_classes": store.n_classes(),
        "attributes": store.manifest().demographic_attributes,
        "has_reference": store.has_reference(),
        "n_texts": prototypes.as_ref().map(|p| p.n_texts()),
    });
    emit(None, &to_json(&summary))
}

fn cmd_baseline(args: &BaselineArgs, dry_run: bool) -> Result<(), CliError> {
    let config = resolve_config(&args.common)?;
    config.validate()?;
    if dry_run {
        return plan(&[
            format!("load store {} and classifier {}", args.common.store.display(), args.common.classifier.display()),
            format!(
                "classify, then per-class chi-squared for `{}` (alpha {}, min group {})",
                config.attribute, config.alpha, config.min_group_size
            ),
        ]);
    }
    let store = load_store(&args.common.store)?;
    let classifier = load_classifier(&args.common.classifier)?;
    check_compatible(&store, None, Some(&classifier))?;
    let c = classify(&store, &classifier, None)?;
    let bias = global_bias(&c.predictions, &store, &config.attribute, config.alpha, config.min_group_size)?;
    if let Some(path) = &args.table {
        let names = &store.manifest().class_names;
        let mut t = String::from("class\tstatus\tn\tchi2\tdof\tdof_before_drop\tp_value\tp_adjusted\tsignificant\tcramers_v\n");
        for o in &bias.per_class {
            match o.tested() {
                Some(r) => t.push_str(&format!(
                    "{}\ttested\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                    names[r.class], r.n, r.chi2, r.dof, r.dof_before_drop, r.p_value, r.p_adjusted, r.significant, r.cramers_v
                )),
                None => t.push_str(&format!("{}\tuntestable\t\t\t\t\t\t\t\t\n", names[o.class()])),
            }
        }
        write_file(path, &t)?;
    }
    let out = serde_json::json!({ "accuracy": c.accuracy(&store), "bias": bias });
    emit(args.out.as_deref(), &to_json(&out))
}

fn cmd_rank(args: &RankArgs, dry_run: bool) -> Result<(), CliError> {
    let mut config = resolve_config(&args.common)?;
    if let Some(g) = args.grid_gap {
        config.grid.tau_gap = g;
    }
    if let Some(o) = args.grid_occ {
        config.grid.tau_occ = o;
    }
    if let Some(s) = args.gap_scope {
        config.gap_scope = s.into();
    }
    config.validate()?;
    let fixed = match (args.tau_gap, args.tau_occ) {
        (Some(g), Some(o)) => Some(ThresholdPair::new(g, o)?),
        _ => None,
    };
    if dry_run {
        let what = match fixed {
            Some(t) => format!("select at tau_gap {} tau_occ {}", t.tau_gap, t.tau_occ),
            None => format!(
                "grid search over {} x {} cells",
                config.grid.tau_gap.values()?.len(),
                config.grid.tau_occ.values()?.len()
            ),
        };
        return plan(&[
            format!("align heads with prototypes {} for `{}`", args.prototypes.display(), config.attribute),
            what,
            format!("write {}", args.out.display()),
        ]);
    }
    let store = load_store(&args.common.store)?;
    let prototypes = load_prototypes(&args.prototypes)?;
    let classifier = load_classifier(&args.common.classifier)?;
    check_compatible(&store, Some(&prototypes), Some(&classifier))?;
    let table = compute_alignment_scoped(&store, &prototypes, &config.attribute, config.gap_scope)?;
    if let Some(t) = fixed {
        let set = select_candidates(&table, t);
        return write_file(&args.out.join("selection.json"), &to_json(&set));
    }
    let ctx = GridContext {
        store: &store,
        classifier: &classifier,
        attribute: &config.attribute,
        alpha: config.alpha,
        min_group_size: config.min_group_size,
    };
    let base = baseline(&ctx)?;
    let grid = grid_search(&ctx, &table, &config.grid, &base)?;
    write_file(&args.out.join("grid_trace.tsv"), &grid.trace_tsv())?;
    let summary = serde_json::json!({
        "baseline_accuracy": grid.baseline_accuracy,
        "baseline_mean_v": grid.baseline_mean_v,
        "significant_classes": grid.significant_classes,
        "n_cells": grid.trace.len(),
        "distinct_head_sets": grid.distinct_head_sets,
        "best": grid.best,
        "no_feasible_threshold": grid.best.is_none(),
    });
    write_file(&args.out.join("selection.json"), &to_json(&summary))
}

fn cmd_textspan(args: &TextspanArgs, dry_run: bool) -> Result<(), CliError> {
    if dry_run {
        return plan(&[format!("textspan {} with K = {}, rank = {}", args.head, args.k, args.rank)]);
    }
    let store = load_store(&args.store)?;
    let prototypes = load_prototypes(&args.prototypes)?;
    check_compatible(&store, Some(&prototypes), None)?;
    let result = textspan(&store, args.head, &prototypes, args.k, args.rank)?;
    if let Some(path) = &args.table {
        let mut t = String::from("rank\ttext\tcategory\tvariance\n");
        for (i, s) in result.texts.iter().enumerate() {
            t.push_str(&format!("{}\t{}\t{}\t{}\n", i + 1, s.name, s.category.as_str(), s.variance));
        }
        write_file(path, &t)?;
    }
    emit(args.out.as_deref(), &to_json(&result))
}

fn cmd_ablate(args: &AblateArgs, dry_run: bool) -> Result<(), CliError> {
    let config = resolve_config(&args.common)?;
    config.validate()?;
    let heads: Vec<String> = args.heads.iter().map(|h| h.to_string()).collect();
    if dry_run {
        return plan(&[format!("mean-ablate {} and compare `{}` V with baseline", heads.join(","), config.attribute)]);
    }
    let store = load_store(&args.common.store)?;
    let classifier = load_classifier(&args.common.classifier)?;
    check_compatible(&store, None, Some(&classifier))?;
    let base = classify(&store, &classifier, None)?;
    let bias = global_bias(&base.predictions, &store, &config.attribute, config.alpha, config.min_group_size)?;
    let plan = head_means(&store, args.heads.iter().copied())?;
    let ablated = classify(&store, &classifier, Some(&plan))?;
    let v = mean_v_over(
        &ablated.predictions,
        &store,
        &config.attribute,
        &bias.significant_classes,
        config.min_group_size,
    )?;
    let out = serde_json::json!({
        "heads": heads,
        "baseline_accuracy": base.accuracy(&store),
        "accuracy": ablated.accuracy(&store),
        "significant_classes": bias.significant_classes,
        "baseline_mean_v": bias.mean_v,
        "mean_v": v,
        "delta_v": v.zip(bias.mean_v).map(|(a, b)| a - b),
    });
    emit(args.out.as_deref(), &to_json(&out))
}

fn parse_profile(items: &[String]) -> Result<BTreeMap<usize, usize>, CliError> {
    let mut profile = BTreeMap::new();
    for item in items {
        let (l, c) = item
            .split_once(':')
            .ok_or_else(|| CliError::invalid(format!("profile entry `{item}` is not layer:count")))?;
        let parse = |x: &str| x.trim().parse::<usize>().map_err(|e| CliError::invalid(format!("`{item}`: {e}")));
        *profile.entry(parse(l)?).or_insert(0) += parse(c)?;
    }
    Ok(profile)
}

fn cmd_control(args: &ControlArgs, dry_run: bool) -> Result<(), CliError> {
    let mut config = resolve_config(&args.common)?;
    if let Some(s) = args.seeds {
        config.control.n_seeds = s;
    }
    if let Some(b) = args.seed_base {
        config.control.seed_base = b;
    }
    config.validate()?;
    let profile = parse_profile(&args.profile)?;
    if dry_run {
        return plan(&[format!(
            "random control with profile {:?}, {} seeds from {}",
            profile, config.control.n_seeds, config.control.seed_base
        )]);
    }
    let store = load_store(&args.common.store)?;
    let classifier = load_classifier(&args.common.classifier)?;
    check_compatible(&store, None, Some(&classifier))?;
    let base = classify(&store, &classifier, None)?;
    let bias = global_bias(&base.predictions, &store, &config.attribute, config.alpha, config.min_group_size)?;
    let summary = random_control(
        &store,
        &classifier,
        &profile,
        ControlParams {
            n_seeds: config.control.n_seeds,
            seed_base: config.control.seed_base,
        },
        &args.exclude,
        &config.attribute,
        &bias.significant_classes,
        config.min_group_size,
    )?;
    emit(args.out.as_deref(), &to_json(&summary))
}

fn cmd_audit(args: &AuditArgs, dry_run: bool) -> Result<(), CliError> {
    let mut config = resolve_config(&args.common)?;
    if let Some(g) = args.grid_gap {
        config.grid.tau_gap = g;
    }
    if let Some(o) = args.grid_occ {
        config.grid.tau_occ = o;
    }
    if let Some(s) = args.gap_scope {
        config.gap_scope = s.into();
    }
    if let Some(k) = args.k {
        config.textspan.k = k;
    }
    if let Some(r) = args.rank {
        config.textspan.rank = r;
    }
    if let Some(s) = args.seeds {
        config.control.n_seeds = s;
    }
    if let Some(b) = args.seed_base {
        config.control.seed_base = b;
    }
    config.validate()?;
    if dry_run {
        return plan(&[
            format!("audit `{}` on {}", config.attribute, args.common.store.display()),
            "1. classify and test every class at baseline".into(),
            format!(
                "2. align heads, grid search over {} x {} cells",
                config.grid.tau_gap.values()?.len(),
                config.grid.tau_occ.values()?.len()
            ),
            format!("3. textspan on selected heads (K = {}, rank = {})", config.textspan.k, config.textspan.rank),
            "4. suspected-set and per-head ablations".into(),
            format!("5. random control over {} seeds", config.control.n_seeds),
            format!("write report.json, report.txt, grid_trace.tsv to {}", args.out.display()),
        ]);
    }
    let store = load_store(&args.common.store)?;
    let prototypes = load_prototypes(&args.prototypes)?;
    let classifier = load_classifier(&args.common.classifier)?;
    let output = run_audit(&store, &prototypes, &classifier, &config)?;
    let sections: Vec<Section> = if args.sections.is_empty() {
        Section::ALL.to_vec()
    } else {
        args.sections.clone()
    };
    write_file(&args.out.join("report.json"), &output.report.to_json())?;
    write_file(&args.out.join("report.txt"), &render_text(&output.report, &sections))?;
    write_file(&args.out.join("grid_trace.tsv"), &output.grid.trace_tsv())
}

fn cmd_synth(args: &SynthArgs, dry_run: bool) -> Result<(), CliError> {
    let mut spec = match (&args.spec, args.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
            SynthSpec::from_toml_str(&text)?
        }
        (None, Some(Preset::Concentrated)) => SynthSpec::concentrated(0),
        (None, Some(Preset::Diffuse)) => SynthSpec::diffuse(0),
        (None, None) => return Err(CliError::invalid("pass --spec or --preset")),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.n_images {
        spec.n_images = n;
    }
    spec.validate()?;
    if dry_run {
        return plan(&[format!(
            "generate {} images, {}x{} heads, d = {}, {} planted heads into {}",
            spec.n_images,
            spec.n_layers,
            spec.n_heads,
            spec.embed_dim,
            spec.planted.len(),
            args.out.display()
        )]);
    }
    let out = generate(&spec)?;
    save_store(&out.store, args.out.join("store"))?;
    save_prototypes(&out.prototypes, args.out.join("prototypes"))?;
    save_classifier(&out.classifier, args.out.join("classifier"))?;
    write_file(&args.out.join("spec.toml"), &spec.to_toml_string())?;
    let truth = serde_json::json!({
        "planted": out.truth.planted,
        "planted_by_attribute": out.truth.planted_by_attribute,
        "layer_profile": out.truth.layer_profile(),
    });
    write_file(&args.out.join("truth.json"), &to_json(&truth))
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Validate(a) => cmd_validate(a, cli.dry_run),
        Command::Baseline(a) => cmd_baseline(a, cli.dry_run),
        Command::Rank(a) => cmd_rank(a, cli.dry_run),
        Command::Textspan(a) => cmd_textspan(a, cli.dry_run),
        Command::Ablate(a) => cmd_ablate(a, cli.dry_run),
        Command::Control(a) => cmd_control(a, cli.dry_run),
        Command::Audit(a) => cmd_audit(a, cli.dry_run),
        Command::Synth(a) => cmd_synth(a, cli.dry_run),
    }
}

/// Parses `args`, runs the subcommand and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match cli.workers {
        Some(0) => {
            eprintln!("error: --workers must be at least 1");
            return 1;
        }
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 2;
        }
    };
    match pool.install(|| execute(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
