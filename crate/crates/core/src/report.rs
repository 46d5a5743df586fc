//! Aggregate tables, bootstrap comparisons and figure series from result files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::allocators::VariantKind;
use crate::error::{AvmpError, Result};
use crate::simulator::{CellResult, SCHEMA_VERSION};
use crate::stats::{
    aggregate_mean_sigma, mean, paired_bootstrap_delta, paired_bootstrap_ratio, BootstrapReport,
    CellKey,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportMode {
    Tables,
    Bootstrap,
    Figures,
}

impl std::str::FromStr for ReportMode {
    type Err = AvmpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tables" => Ok(ReportMode::Tables),
            "bootstrap" => Ok(ReportMode::Bootstrap),
            "figures" => Ok(ReportMode::Figures),
            other => Err(AvmpError::InvalidArgument(format!("unknown report mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapOptions {
    pub baseline: String,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            baseline: "fixed_dual_mr05".into(),
            resamples: crate::stats::DEFAULT_BOOTSTRAP_RESAMPLES,
            seed: crate::stats::DEFAULT_BOOTSTRAP_SEED,
        }
    }
}

/// Results indexed by variant name, then by cell key.
pub struct ResultSet {
    cells: BTreeMap<String, BTreeMap<CellKey, CellResult>>,
    variant_order: Vec<String>,
    workload_order: Vec<String>,
}

impl ResultSet {
    pub fn new(results: Vec<CellResult>) -> Result<Self> {
        let mut cells: BTreeMap<String, BTreeMap<CellKey, CellResult>> = BTreeMap::new();
        let mut variant_order = Vec::new();
        let mut workload_order = Vec::new();
        for r in results {
            if r.schema_version != SCHEMA_VERSION {
                return Err(AvmpError::Schema {
                    expected: SCHEMA_VERSION.into(),
                    found: r.schema_version,
                });
            }
            if !variant_order.contains(&r.variant) {
                variant_order.push(r.variant.clone());
            }
            if !workload_order.contains(&r.key.workload) {
                workload_order.push(r.key.workload.clone());
            }
            let by_key = cells.entry(r.variant.clone()).or_default();
            if by_key.insert(r.key.clone(), r).is_some() {
                return Err(AvmpError::Pairing("duplicate cell in result set".into()));
            }
        }
        if cells.is_empty() {
            return Err(AvmpError::Stats("no results to report".into()));
        }
        Ok(ResultSet {
            cells,
            variant_order,
            workload_order,
        })
    }

    pub fn variants(&self) -> &[String] {
        &self.variant_order
    }

    pub fn workloads(&self) -> &[String] {
        &self.workload_order
    }

    pub fn cells(&self, variant: &str) -> Result<&BTreeMap<CellKey, CellResult>> {
        self.cells
            .get(variant)
            .ok_or_else(|| AvmpError::Pairing(format!("variant `{variant}` has no results")))
    }

    /// One metric per cell, optionally restricted to a workload.
    pub fn metric(
        &self,
        variant: &str,
        workload: Option<&str>,
        f: impl Fn(&CellResult) -> f64,
    ) -> Result<BTreeMap<CellKey, f64>> {
        Ok(self
            .cells(variant)?
            .iter()
            .filter(|(k, _)| workload.is_none_or(|w| k.workload == w))
            .map(|(k, r)| (k.clone(), f(r)))
            .collect())
    }

    /// Per-workload sum over (model, budget) of the across-seed mean, with
    /// sigma propagated as `sqrt(sum sigma_i^2)`.
    pub fn workload_totals(
        &self,
        variant: &str,
        f: impl Fn(&CellResult) -> f64,
    ) -> Result<BTreeMap<String, (f64, f64)>> {
        let mut by_workload: BTreeMap<String, BTreeMap<(String, u64), Vec<f64>>> = BTreeMap::new();
        for (k, r) in self.cells(variant)? {
            by_workload
                .entry(k.workload.clone())
                .or_default()
                .entry((k.model.clone(), k.pool_budget))
                .or_default()
                .push(f(r));
        }
        by_workload
            .into_iter()
            .map(|(w, groups)| {
                let agg = aggregate_mean_sigma(&groups)?;
                Ok((w, (agg.total_mean, agg.total_sigma)))
            })
            .collect()
    }
}

fn oom(r: &CellResult) -> f64 {
    r.events.oom_count as f64
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| AvmpError::Parse(format!("{}: {e}", path.display())))
}

fn finish<W: std::io::Write>(mut w: csv::Writer<W>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| AvmpError::io(path, e))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> AvmpError + '_ {
    move |e| AvmpError::Parse(format!("{}: {e}", path.display()))
}

fn fmt(x: f64) -> String {
    format!("{x:.4}")
}

/// Writes the report files for `mode` into `out_dir` and returns their paths.
pub fn write_report(
    set: &ResultSet,
    mode: ReportMode,
    out_dir: &Path,
    opts: &BootstrapOptions,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| AvmpError::io(out_dir, e))?;
    match mode {
        ReportMode::Tables => write_tables(set, out_dir),
        ReportMode::Bootstrap => write_bootstrap(set, out_dir, opts),
        ReportMode::Figures => write_figures(set, out_dir, opts),
    }
}

/// Variant, per-workload (total, sigma), overall total, overall sigma.
pub type OomRow = (String, BTreeMap<String, (f64, f64)>, f64, f64);

/// Variant by workload OOM totals with propagated sigma.
pub fn oom_table(set: &ResultSet) -> Result<Vec<OomRow>> {
    set.variants()
        .iter()
        .map(|v| {
            let per = set.workload_totals(v, oom)?;
            let total = per.values().map(|x| x.0).sum();
            let sigma = per.values().map(|x| x.1.powi(2)).sum::<f64>().sqrt();
            Ok((v.clone(), per, total, sigma))
        })
        .collect()
}

fn write_tables(set: &ResultSet, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();

    let path = dir.join("oom_totals.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["schema_version".to_string(), "variant".to_string()];
    for wl in set.workloads() {
        header.push(format!("{wl}_mean"));
        header.push(format!("{wl}_sigma"));
    }
    header.extend(["total".into(), "total_sigma".into(), "delta_pct_vs_padded_unified".into()]);
    w.write_record(&header).map_err(csv_err(&path))?;
    let table = oom_table(set)?;
    let padded = table.iter().find(|row| row.0 == "padded_unified").map(|row| row.2);
    for (variant, per, total, sigma) in &table {
        let mut row = vec![SCHEMA_VERSION.to_string(), variant.clone()];
        for wl in set.workloads() {
            let (m, s) = per.get(wl).copied().unwrap_or((f64::NAN, f64::NAN));
            row.push(fmt(m));
            row.push(fmt(s));
        }
        row.push(fmt(*total));
        row.push(fmt(*sigma));
        row.push(match padded {
            Some(p) if p > 0.0 && variant != "padded_unified" => fmt(100.0 * (total - p) / p),
            _ => String::new(),
        });
        w.write_record(&row).map_err(csv_err(&path))?;
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join("variant_summary.csv");
    let mut w = csv_writer(&path)?;
    w.write_record([
        "schema_version",
        "variant",
        "workload",
        "cells",
        "oom_mean",
        "rebalance_mean",
        "migrated_bytes_mean",
        "waste_bytes_mean",
        "batch_p50_mean",
        "completed_mean",
        "preemptions_mean",
        "goodput_mean",
        "peak_reserved_bytes_mean",
    ])
    .map_err(csv_err(&path))?;
    for v in set.variants() {
        for wl in set.workloads() {
            let cells: Vec<&CellResult> = set
                .cells(v)?
                .iter()
                .filter(|(k, _)| &k.workload == wl)
                .map(|(_, r)| r)
                .collect();
            if cells.is_empty() {
                continue;
            }
            let m = |f: &dyn Fn(&CellResult) -> f64| fmt(mean(&cells.iter().map(|r| f(r)).collect::<Vec<_>>()));
            w.write_record([
                SCHEMA_VERSION.to_string(),
                v.clone(),
                wl.clone(),
                cells.len().to_string(),
                m(&oom),
                m(&|r| r.events.rebalance_count as f64),
                m(&|r| r.events.migrated_bytes as f64),
                m(&|r| r.events.waste_bytes as f64),
                m(&|r| r.events.effective_batch_size_p50 as f64),
                m(&|r| r.events.completed_requests as f64),
                m(&|r| r.events.preemptions as f64),
                m(&|r| r.timing.goodput),
                m(&|r| r.peak_reserved_bytes as f64),
            ])
            .map_err(csv_err(&path))?;
        }
    }
    finish(w, &path)?;
    written.push(path);

    // rebalancer parameter sensitivity, one row per dynamic variant
    let path = dir.join("rebalance_sensitivity.csv");
    let mut w = csv_writer(&path)?;
    w.write_record([
        "schema_version",
        "variant",
        "migration_batch_size",
        "threshold_low",
        "threshold_high",
        "oom_total",
        "oom_sigma",
        "rebalance_total",
        "migrated_bytes_total",
        "waste_bytes_total",
    ])
    .map_err(csv_err(&path))?;
    for (variant, _, total, sigma) in &table {
        let cells = set.cells(variant)?;
        let Some(any) = cells.values().next() else { continue };
        if any.config.allocator.variant != VariantKind::AvmpDynamic {
            continue;
        }
        let rb = &any.config.allocator.rebalance;
        let totals = set.workload_totals(variant, |r| r.events.rebalance_count as f64)?;
        let migrated = set.workload_totals(variant, |r| r.events.migrated_bytes as f64)?;
        let waste = set.workload_totals(variant, |r| r.events.waste_bytes as f64)?;
        let sum = |m: &BTreeMap<String, (f64, f64)>| m.values().map(|x| x.0).sum::<f64>();
        w.write_record([
            SCHEMA_VERSION.to_string(),
            variant.clone(),
            rb.migration_batch_size.to_string(),
            rb.threshold_low.to_string(),
            rb.threshold_high.to_string(),
            fmt(*total),
            fmt(*sigma),
            fmt(sum(&totals)),
            fmt(sum(&migrated)),
            fmt(sum(&waste)),
        ])
        .map_err(csv_err(&path))?;
    }
    finish(w, &path)?;
    written.push(path);
    Ok(written)
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub comparison: String,
    pub workload: String,
    #[serde(flatten)]
    pub report: BootstrapReport,
}

/// Paired comparisons of every variant against the baseline.
pub fn bootstrap_rows(set: &ResultSet, opts: &BootstrapOptions) -> Result<Vec<ComparisonRow>> {
    let base = &opts.baseline;
    set.cells(base)?;
    let mut rows = Vec::new();
    let mut push = |comparison: String, workload: &str, report: BootstrapReport| {
        rows.push(ComparisonRow {
            comparison,
            workload: workload.to_string(),
            report,
        });
    };
    for v in set.variants().iter().filter(|v| *v != base) {
        let mut scopes: Vec<Option<&str>> = set.workloads().iter().map(|w| Some(w.as_str())).collect();
        scopes.push(None);
        for scope in &scopes {
            let label = scope.unwrap_or("cross_workload");
            let a = set.metric(v, *scope, oom)?;
            let b = set.metric(base, *scope, oom)?;
            let name = format!("{v} - {base} (oom_count)");
            push(name.clone(), label, paired_bootstrap_delta(&name, &a, &b, opts.resamples, opts.seed)?);
        }
        for scope in scopes.iter().filter(|s| s.is_some()) {
            let label = scope.unwrap_or_default();
            let a = set.metric(v, *scope, |r| r.timing.goodput)?;
            let b = set.metric(base, *scope, |r| r.timing.goodput)?;
            let name = format!("{v} / {base} (goodput ratio)");
            match paired_bootstrap_ratio(&name, &a, &b, opts.resamples, opts.seed) {
                Ok(report) => push(name, label, report),
                // a baseline that never completes anything has no ratio
                Err(AvmpError::Stats(_)) => {}
                Err(e) => return Err(e),
            }
            let a = set.metric(v, *scope, |r| r.events.effective_batch_size_p50 as f64)?;
            let b = set.metric(base, *scope, |r| r.events.effective_batch_size_p50 as f64)?;
            let name = format!("{v} - {base} (effective_batch_size_p50)");
            push(name.clone(), label, paired_bootstrap_delta(&name, &a, &b, opts.resamples, opts.seed)?);
        }
    }
    Ok(rows)
}

fn write_bootstrap(set: &ResultSet, dir: &Path, opts: &BootstrapOptions) -> Result<Vec<PathBuf>> {
    let path = dir.join("bootstrap.csv");
    let mut w = csv_writer(&path)?;
    w.write_record([
        "schema_version",
        "comparison",
        "workload",
        "n",
        "point",
        "ci_low",
        "ci_high",
        "significant",
        "resamples",
        "seed",
    ])
    .map_err(csv_err(&path))?;
    for row in bootstrap_rows(set, opts)? {
        let r = &row.report;
        w.write_record([
            SCHEMA_VERSION.to_string(),
            row.comparison.clone(),
            row.workload.clone(),
            r.n.to_string(),
            fmt(r.point),
            fmt(r.ci_low),
            fmt(r.ci_high),
            if r.significant { "yes" } else { "no" }.to_string(),
            r.resamples.to_string(),
            opts.seed.to_string(),
        ])
        .map_err(csv_err(&path))?;
    }
    finish(w, &path)?;
    Ok(vec![path])
}

/// Mean phase fractions per (variant, workload); each row sums to one.
pub fn phase_series(set: &ResultSet) -> Result<Vec<(String, String, [f64; 4])>> {
    let mut out = Vec::new();
    for v in set.variants() {
        for wl in set.workloads() {
            let fractions: Vec<[f64; 4]> = set
                .cells(v)?
                .iter()
                .filter(|(k, _)| &k.workload == wl)
                .map(|(_, r)| r.timing.phase.fractions())
                .collect();
            if fractions.is_empty() {
                continue;
            }
            let mut avg = [0.0; 4];
            for f in &fractions {
                for (a, x) in avg.iter_mut().zip(f) {
                    *a += x / fractions.len() as f64;
                }
            }
            out.push((v.clone(), wl.clone(), avg));
        }
    }
    Ok(out)
}

fn write_figures(set: &ResultSet, dir: &Path, opts: &BootstrapOptions) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();

    let path = dir.join("fig_oom_by_workload.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["schema_version", "variant", "workload", "oom_total", "oom_sigma"])
        .map_err(csv_err(&path))?;
    for (variant, per, _, _) in oom_table(set)? {
        for (wl, (m, s)) in per {
            w.write_record([SCHEMA_VERSION.to_string(), variant.clone(), wl, fmt(m), fmt(s)])
                .map_err(csv_err(&path))?;
        }
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join("fig_phase_fractions.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["schema_version", "variant", "workload", "service", "oom_retry", "migration", "idle"])
        .map_err(csv_err(&path))?;
    for (v, wl, f) in phase_series(set)? {
        w.write_record([SCHEMA_VERSION.to_string(), v, wl, fmt(f[0]), fmt(f[1]), fmt(f[2]), fmt(f[3])])
            .map_err(csv_err(&path))?;
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join("fig_goodput_ratio.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["schema_version", "comparison", "workload", "ratio", "ci_low", "ci_high"])
        .map_err(csv_err(&path))?;
    if set.cells(&opts.baseline).is_ok() {
        for row in bootstrap_rows(set, opts)?
            .into_iter()
            .filter(|r| r.comparison.contains("goodput ratio"))
        {
            let r = &row.report;
            w.write_record([
                SCHEMA_VERSION.to_string(),
                row.comparison.clone(),
                row.workload.clone(),
                fmt(r.point),
                fmt(r.ci_low),
                fmt(r.ci_high),
            ])
            .map_err(csv_err(&path))?;
        }
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join("fig_oom_vs_batch_size.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["schema_version", "variant", "migration_batch_size", "oom_total", "oom_sigma"])
        .map_err(csv_err(&path))?;
    for (variant, _, total, sigma) in oom_table(set)? {
        let any = set.cells(&variant)?.values().next().expect("variant has cells");
        if any.config.allocator.variant == VariantKind::AvmpDynamic {
            w.write_record([
                SCHEMA_VERSION.to_string(),
                variant.clone(),
                any.config.allocator.rebalance.migration_batch_size.to_string(),
                fmt(total),
                fmt(sigma),
            ])
            .map_err(csv_err(&path))?;
        }
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join("fig_reserved_bytes.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["schema_version", "variant", "model", "budget_bytes", "peak_reserved_bytes"])
        .map_err(csv_err(&path))?;
    for v in set.variants() {
        let mut seen = BTreeSet::new();
        for r in set.cells(v)?.values() {
            if seen.insert((r.key.model.clone(), r.key.pool_budget)) {
                w.write_record([
                    SCHEMA_VERSION.to_string(),
                    v.clone(),
                    r.key.model.clone(),
                    r.key.pool_budget.to_string(),
                    r.peak_reserved_bytes.to_string(),
                ])
                .map_err(csv_err(&path))?;
            }
        }
    }
    finish(w, &path)?;
    written.push(path);
    Ok(written)
}
