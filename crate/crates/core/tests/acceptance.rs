//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Structural criteria (handle-layer equivalence, determinism, migration
//! arithmetic, throttle and gate placement, reserved footprint, bootstrap
//! oracle, trace ingestion) must hold and fail the test otherwise.
//! Empirical criteria (baseline ordering, dynamic benefit, batch-size trend,
//! threshold null) depend on the tuned workload parameters; they always print
//! their verdict and only fail the test when `AVMP_ACCEPTANCE_STRICT=1`.
//!
//! The report goes to stdout even when test output is captured;
//! `cargo test --release -p avmp-core --test acceptance` is the quick way to run it.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use avmp_core::allocators::{Allocator, AllocatorEvent, VariantKind};
use avmp_core::rebalancer::RebalanceEvent;
use avmp_core::rng;
use avmp_core::simulator::{run_cell_logged, CellConfig, CellResult, LoggedEvent};
use avmp_core::stats::{
    paired_bootstrap_delta, paired_bootstrap_ratio, CellKey, DEFAULT_BOOTSTRAP_RESAMPLES,
    DEFAULT_BOOTSTRAP_SEED,
};
use avmp_core::sweep::{self, expand_grid, SweepConfig, VariantEntry};
use avmp_core::workloads::ingest_sharegpt;
use rand::RngExt;
use serde_json::Value;

const DUAL: [&str; 2] = ["mixed_long", "agentic_burst"];

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Structural,
    Empirical,
}

struct Verdict {
    id: u32,
    name: &'static str,
    kind: Kind,
    pass: bool,
    detail: String,
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn desk() -> SweepConfig {
    SweepConfig::load(&configs_dir().join("desk.toml")).expect("desk config loads")
}

fn with_variants(mut cfg: SweepConfig, names: &[&str]) -> SweepConfig {
    cfg.variants = names.iter().map(|n| VariantEntry::Preset(n.to_string())).collect();
    cfg
}

/// Throttle and gate audit of one cell's event log.
#[derive(Default, Clone, Copy)]
struct GateAudit {
    rebalances: u64,
    spacing_violations: u64,
    ungated: u64,
}

impl GateAudit {
    fn of(log: &[LoggedEvent], interval: u64) -> Self {
        let mut audit = GateAudit::default();
        let mut last_effective: Option<u64> = None;
        let mut capacity_ops = BTreeSet::new();
        for logged in log {
            match &logged.event {
                AllocatorEvent::CapacityError { op, .. } => {
                    capacity_ops.insert(*op);
                }
                AllocatorEvent::Rebalance(e) => {
                    audit.rebalances += 1;
                    if !capacity_ops.contains(&e.at_op) {
                        audit.ungated += 1;
                    }
                    if !e.rolled_back {
                        if last_effective.is_some_and(|prev| e.at_op - prev < interval) {
                            audit.spacing_violations += 1;
                        }
                        last_effective = Some(e.at_op);
                    }
                }
                AllocatorEvent::FailureHandled { .. } => {}
            }
        }
        audit
    }
}

struct Run {
    result: CellResult,
    audit: GateAudit,
}

// Logs are audited as each cell finishes; overloaded cells log millions of
// events and holding them all would dominate memory.
fn run_grid(cfg: &SweepConfig) -> Vec<Run> {
    expand_grid(cfg)
        .expect("grid expands")
        .iter()
        .map(|cell: &CellConfig| {
            let run = run_cell_logged(cell).expect("cell runs");
            let interval = cell.allocator.rebalance.min_rebalance_interval_ops;
            Run {
                audit: GateAudit::of(&run.log, interval),
                result: run.result,
            }
        })
        .collect()
}

/// variant -> key -> oom_count
fn oom_table(runs: &[Run]) -> BTreeMap<String, BTreeMap<CellKey, u64>> {
    let mut out: BTreeMap<String, BTreeMap<CellKey, u64>> = BTreeMap::new();
    for r in runs {
        out.entry(r.result.variant.clone())
            .or_default()
            .insert(r.result.key.clone(), r.result.events.oom_count);
    }
    out
}

fn total(table: &BTreeMap<CellKey, u64>, workloads: &[&str], seed: Option<u64>) -> u64 {
    table
        .iter()
        .filter(|(k, _)| workloads.contains(&k.workload.as_str()))
        .filter(|(k, _)| seed.is_none_or(|s| k.seed == s))
        .map(|(_, v)| v)
        .sum()
}

fn as_f64(table: &BTreeMap<CellKey, u64>, workloads: &[&str]) -> BTreeMap<CellKey, f64> {
    table
        .iter()
        .filter(|(k, _)| workloads.contains(&k.workload.as_str()))
        .map(|(k, &v)| (k.clone(), v as f64))
        .collect()
}

fn c1_equivalence(runs: &[Run]) -> Verdict {
    let by_key = |variant: &str| -> BTreeMap<CellKey, (u64, u64, u64)> {
        runs.iter()
            .filter(|r| r.result.variant == variant)
            .map(|r| {
                let e = &r.result.events;
                (r.result.key.clone(), (e.oom_count, e.rebalance_count, e.migrated_bytes))
            })
            .collect()
    };
    let stat = by_key("avmp_static_mr05");
    let fixed = by_key("fixed_dual_mr05");
    let mismatched = stat
        .iter()
        .filter(|(k, v)| fixed.get(*k) != Some(v) || v.1 != 0 || v.2 != 0)
        .count();
    let oom = |m: &BTreeMap<CellKey, (u64, u64, u64)>| -> BTreeMap<CellKey, f64> {
        m.iter().map(|(k, v)| (k.clone(), v.0 as f64)).collect()
    };
    let ci = paired_bootstrap_delta(
        "static-fixed",
        &oom(&stat),
        &oom(&fixed),
        DEFAULT_BOOTSTRAP_RESAMPLES,
        DEFAULT_BOOTSTRAP_SEED,
    )
    .expect("bootstrap");
    let pass = stat.len() == 18 && mismatched == 0 && ci.ci_low == 0.0 && ci.ci_high == 0.0;
    Verdict {
        id: 1,
        name: "handle-layer equivalence",
        kind: Kind::Structural,
        pass,
        detail: format!(
            "{} cells, {mismatched} mismatched, delta CI [{}, {}]",
            stat.len(),
            ci.ci_low,
            ci.ci_high
        ),
    }
}

/// Result records with the wall-clock dependent fields removed.
fn deterministic_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .expect("results readable")
        .lines()
        .map(|line| {
            let mut v: Value = serde_json::from_str(line).expect("json line");
            v.as_object_mut().expect("record object").remove("timing");
            serde_json::to_string(&v).expect("reserialise")
        })
        .collect()
}

fn c2_determinism() -> Verdict {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut lines = Vec::new();
    for (i, parallelism) in [1usize, 1, 4].into_iter().enumerate() {
        let mut cfg = desk();
        cfg.parallelism = parallelism;
        cfg.output_dir = dir.path().join(format!("run{i}"));
        let out = sweep::run_sweep(&cfg, false).expect("sweep runs");
        lines.push(deterministic_lines(&out.results_path));
    }
    let identical = lines.windows(2).all(|w| w[0] == w[1]);
    Verdict {
        id: 2,
        name: "determinism",
        kind: Kind::Structural,
        pass: identical && !lines[0].is_empty(),
        detail: format!(
            "{} records, reruns at parallelism 1/1/4 {}",
            lines[0].len(),
            if identical { "identical" } else { "differ" }
        ),
    }
}

fn c3_ordering(ooms: &BTreeMap<String, BTreeMap<CellKey, u64>>) -> Verdict {
    let order = ["padded_unified", "fixed_dual_mr09", "fixed_dual_mr05", "avmp_dynamic_b128"];
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let t: Vec<u64> = order.iter().map(|v| total(&ooms[*v], &DUAL, Some(seed))).collect();
        let ok = t[0] > t[1] && t[1] > t[2] && t[2] >= t[3];
        pass &= ok;
        parts.push(format!("seed {seed}: {}/{}/{}/{}", t[0], t[1], t[2], t[3]));
    }
    Verdict {
        id: 3,
        name: "baseline ordering padded > mr09 > mr05 >= dynamic",
        kind: Kind::Empirical,
        pass,
        detail: parts.join("; "),
    }
}

fn c4_dynamic_benefit(ooms: &BTreeMap<String, BTreeMap<CellKey, u64>>) -> Verdict {
    let dynamic = &ooms["avmp_dynamic_b128"];
    let stat = &ooms["avmp_static_mr05"];
    let ci = paired_bootstrap_delta(
        "dynamic-static",
        &as_f64(dynamic, &DUAL),
        &as_f64(stat, &DUAL),
        DEFAULT_BOOTSTRAP_RESAMPLES,
        DEFAULT_BOOTSTRAP_SEED,
    )
    .expect("bootstrap");
    let (td, ts) = (total(dynamic, &DUAL, None), total(stat, &DUAL, None));
    let max_gap = stat
        .iter()
        .filter(|(k, _)| k.workload == "uniform_short")
        .map(|(k, &s)| dynamic[k].abs_diff(s))
        .max()
        .unwrap_or(0);
    let pass = td < ts && ci.n >= 12 && ci.ci_high < 0.0 && max_gap <= 5;
    Verdict {
        id: 4,
        name: "dynamic benefit",
        kind: Kind::Empirical,
        pass,
        detail: format!(
            "dual totals {td} vs {ts}, delta CI [{:.2}, {:.2}] over {} pairs, uniform_short max gap {max_gap}",
            ci.ci_low, ci.ci_high, ci.n
        ),
    }
}

fn c5_migration_arithmetic() -> Verdict {
    let mut rng = rng::stream(5, "acceptance-migration");
    let mut violations = 0u64;
    const TRIPLES: u64 = 100_000;
    for _ in 0..TRIPLES {
        let donor_stride = rng.random_range(16..=(1u64 << 22));
        let recipient_stride = rng.random_range(16..=(1u64 << 22));
        let pages = rng.random_range(1..=1024u32);
        let donor = if rng.random_bool(0.5) {
            avmp_core::handle_space::PoolId::Kv
        } else {
            avmp_core::handle_space::PoolId::Ssm
        };
        let e = RebalanceEvent::plan(0, donor, donor_stride, pages, recipient_stride);
        let freed = pages as u128 * donor_stride as u128;
        let gained = e.recipient_pages_gained as u128 * recipient_stride as u128;
        let ok = e.bytes_migrated as u128 == freed
            && gained + e.waste_bytes as u128 == freed
            && e.waste_bytes < recipient_stride
            && e.donor_pages_freed == pages;
        violations += u64::from(!ok);
    }
    Verdict {
        id: 5,
        name: "migration arithmetic",
        kind: Kind::Structural,
        pass: violations == 0,
        detail: format!("{TRIPLES} random triples, {violations} violations"),
    }
}

fn c6_throttle_and_gate(runs: &[Run]) -> Verdict {
    let (mut rebalances, mut spacing, mut ungated) = (0, 0, 0);
    for run in runs {
        rebalances += run.audit.rebalances;
        spacing += run.audit.spacing_violations;
        ungated += run.audit.ungated;
    }
    Verdict {
        id: 6,
        name: "throttle and gate placement",
        kind: Kind::Structural,
        pass: spacing == 0 && ungated == 0,
        detail: format!(
            "{} logs, {rebalances} rebalances, {spacing} spacing and {ungated} gate violations",
            runs.len()
        ),
    }
}

fn c7_batch_trend(ooms: &BTreeMap<String, BTreeMap<CellKey, u64>>) -> Verdict {
    let all = ["uniform_short", "mixed_long", "agentic_burst"];
    let t = |b: u32| total(&ooms[&format!("avmp_dynamic_b{b}")], &all, None);
    let (t1, t8, t128, t256) = (t(1), t(8), t(128), t(256));
    let spread = t128.abs_diff(t256) as f64 / t128.max(t256).max(1) as f64;
    Verdict {
        id: 7,
        name: "batch-size trend",
        kind: Kind::Empirical,
        pass: t128 <= t1 && spread <= 0.05,
        detail: format!(
            "B=1 {t1}, B=8 {t8}, B=128 {t128}, B=256 {t256}, 128 vs 256 spread {:.1}%",
            spread * 100.0
        ),
    }
}

fn c8_threshold_null(runs: &[Run]) -> Verdict {
    let mut by: BTreeMap<String, BTreeMap<CellKey, (u64, u64)>> = BTreeMap::new();
    for r in runs {
        let e = &r.result.events;
        by.entry(r.result.variant.clone())
            .or_default()
            .insert(r.result.key.clone(), (e.oom_count, e.rebalance_count));
    }
    let reference = &by["avmp_dynamic_b128"];
    let mut parts = Vec::new();
    let mut pass = true;
    for (variant, cells) in &by {
        if variant == "avmp_dynamic_b128" {
            continue;
        }
        let differing: Vec<String> = cells
            .iter()
            .filter(|(k, v)| reference.get(*k) != Some(*v))
            .map(|(k, v)| format!("{k} {v:?} vs {:?}", reference[k]))
            .collect();
        pass &= differing.is_empty();
        if differing.is_empty() {
            parts.push(format!("{variant}: identical"));
        } else {
            parts.push(format!("{variant}: {} cells differ ({})", differing.len(), differing.join(", ")));
        }
    }
    Verdict {
        id: 8,
        name: "threshold null",
        kind: Kind::Empirical,
        pass,
        detail: parts.join("; "),
    }
}

fn c9_reserved_footprint(cfg: &SweepConfig) -> Verdict {
    let mut budgets: Vec<u64> = cfg.budgets.iter().map(|b| b.0).collect();
    let mut r = rng::stream(9, "acceptance-budgets");
    budgets.extend((0..200).map(|_| r.random_range((64u64 << 20)..(8u64 << 30))));
    let mut checked = 0;
    let mut violations = 0;
    for model in &cfg.model_specs {
        for &budget in &budgets {
            let reserved = |name: &str| {
                let a = Allocator::new(sweep::preset(name).unwrap(), budget, model.clone()).unwrap();
                (a.reserved_bytes(), a.kv_store().stride(), a.ssm_store().stride())
            };
            let ((fk, fs), kv_stride, ssm_stride) = reserved("fixed_dual_mr05");
            for avmp in ["avmp_static_mr05", "avmp_dynamic_b128"] {
                let ((ak, as_), _, _) = reserved(avmp);
                checked += 1;
                if ak.abs_diff(2 * fk) > kv_stride || as_.abs_diff(2 * fs) > ssm_stride {
                    violations += 1;
                }
            }
        }
    }
    Verdict {
        id: 9,
        name: "reserved footprint 2x",
        kind: Kind::Structural,
        pass: violations == 0 && checked > 0,
        detail: format!("{checked} (model, budget, variant) checks, {violations} outside one stride per pool"),
    }
}

/// Every resample of `n` indices, as a statistic of the chosen multiset.
fn enumerate(n: usize, stat: impl Fn(&[usize]) -> Option<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    let mut idx = vec![0usize; n];
    loop {
        if let Some(s) = stat(&idx) {
            out.push(s);
        }
        let mut pos = 0;
        loop {
            if pos == n {
                return out;
            }
            idx[pos] += 1;
            if idx[pos] < n {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

fn c10_bootstrap_oracle() -> Verdict {
    let mut violations = Vec::new();
    let close = |x: f64, support: &[f64]| support.iter().any(|s| (s - x).abs() <= 1e-12 * (1.0 + s.abs()));
    let mut r = rng::stream(10, "acceptance-bootstrap");
    let mut cases: Vec<(Vec<f64>, Vec<f64>)> = vec![
        (vec![3.0, 5.0], vec![1.0, 2.0]),
        (vec![2.0, 4.0], vec![1.0, 2.0]),
        (vec![7.0], vec![7.0]),
    ];
    for n in 1..=3 {
        for _ in 0..20 {
            let a = (0..n).map(|_| r.random_range(0..50) as f64).collect();
            let b = (0..n).map(|_| r.random_range(1..50) as f64).collect();
            cases.push((a, b));
        }
    }
    for (case, (a, b)) in cases.iter().enumerate() {
        let n = a.len();
        let key = |i: usize| CellKey {
            workload: "w".into(),
            model: "m".into(),
            pool_budget: 1,
            seed: i as u64,
        };
        let ma: BTreeMap<CellKey, f64> = a.iter().enumerate().map(|(i, &x)| (key(i), x)).collect();
        let mb: BTreeMap<CellKey, f64> = b.iter().enumerate().map(|(i, &x)| (key(i), x)).collect();

        let deltas: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let delta_support = enumerate(n, |idx| Some(idx.iter().map(|&i| deltas[i]).sum::<f64>() / n as f64));
        let d = paired_bootstrap_delta("d", &ma, &mb, 2000, 1).expect("delta");
        let point = deltas.iter().sum::<f64>() / n as f64;
        if (d.point - point).abs() > 1e-12 || !close(d.ci_low, &delta_support) || !close(d.ci_high, &delta_support) {
            violations.push(format!("delta case {case}"));
        }

        let ratio_support = enumerate(n, |idx| {
            let sb: f64 = idx.iter().map(|&i| b[i]).sum();
            (sb != 0.0).then(|| idx.iter().map(|&i| a[i]).sum::<f64>() / sb)
        });
        let q = paired_bootstrap_ratio("r", &ma, &mb, 2000, 1).expect("ratio");
        let point = a.iter().sum::<f64>() / b.iter().sum::<f64>();
        if q.point != point || !close(q.ci_low, &ratio_support) || !close(q.ci_high, &ratio_support) {
            violations.push(format!("ratio case {case}"));
        }
    }
    // worked n = 2 examples: deltas {2, 3} and ratio 2 under any resample
    let worked = {
        let key = |i: u64| CellKey { workload: "w".into(), model: "m".into(), pool_budget: 1, seed: i };
        let a: BTreeMap<_, _> = [(key(0), 3.0), (key(1), 5.0)].into_iter().collect();
        let b: BTreeMap<_, _> = [(key(0), 1.0), (key(1), 2.0)].into_iter().collect();
        let d = paired_bootstrap_delta("d", &a, &b, 10_000, DEFAULT_BOOTSTRAP_SEED).unwrap();
        let a2: BTreeMap<_, _> = [(key(0), 2.0), (key(1), 4.0)].into_iter().collect();
        let q = paired_bootstrap_ratio("r", &a2, &b, 10_000, DEFAULT_BOOTSTRAP_SEED).unwrap();
        d.point == 2.5 && d.ci_low == 2.0 && d.ci_high == 3.0 && q.ci_low == 2.0 && q.ci_high == 2.0
    };
    if !worked {
        violations.push("worked n=2 examples".into());
    }
    Verdict {
        id: 10,
        name: "bootstrap oracle",
        kind: Kind::Structural,
        pass: violations.is_empty(),
        detail: format!("{} cases against exhaustive n^n enumeration, violations: {violations:?}", cases.len()),
    }
}

fn c11_ingestion() -> Verdict {
    let word_counts: Vec<usize> = vec![0, 1, 5, 12, 13, 100, 101, 617, 1000, 3150, 3151, 5160, 9000];
    let mut convs = Vec::new();
    for &w in &word_counts {
        let text = (0..w).map(|i| format!("w{i}")).collect::<Vec<_>>().join(if w % 2 == 0 { " " } else { "\n\t " });
        convs.push(serde_json::json!({
            "conversations": [
                {"from": "gpt", "value": "ignored reply"},
                {"from": "human", "value": text},
                {"from": "human", "value": "second turn is ignored"}
            ]
        }));
    }
    convs.push(serde_json::json!({"conversations": [{"from": "gpt", "value": "no human turn"}]}));
    let corpus = serde_json::to_string(&convs).unwrap();
    let ingest = ingest_sharegpt(&corpus).expect("synthetic corpus ingests");
    let expected: Vec<u64> = word_counts
        .iter()
        .map(|&w| ((1.3 * w as f64).round() as u64).clamp(16, 4096))
        .collect();
    let mut pass = ingest.prompt_tokens == expected && ingest.skipped == 1;
    let mut detail = format!(
        "synthetic corpus: {} prompts exact, {} skipped",
        if ingest.prompt_tokens == expected { "all" } else { "NOT all" },
        ingest.skipped
    );
    match std::env::var_os("AVMP_SHAREGPT_PATH") {
        Some(path) => {
            let real = avmp_core::workloads::load_sharegpt(Path::new(&path)).expect("real corpus ingests");
            let within = |x: f64, target: f64| (x - target).abs() <= 0.15 * target;
            let (floor, median, p95) = (real.floor_rate(), real.median() as f64, real.p95() as f64);
            let ok = within(floor, 0.36) && within(median, 25.0) && within(p95, 810.0);
            pass &= ok;
            detail += &format!(
                "; real corpus: floor rate {:.1}%, median {median}, p95 {p95} ({})",
                floor * 100.0,
                if ok { "within 15%" } else { "outside 15%" }
            );
        }
        None => detail += "; real corpus not supplied (set AVMP_SHAREGPT_PATH), skipped",
    }
    Verdict {
        id: 11,
        name: "trace ingestion contract",
        kind: Kind::Structural,
        pass,
        detail,
    }
}

#[test]
fn acceptance() {
    let strict = std::env::var("AVMP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let base = desk();
    let defaults = [
        "padded_unified",
        "fixed_dual_mr05",
        "fixed_dual_mr09",
        "avmp_static_mr05",
        "avmp_dynamic_b128",
    ];
    let main = run_grid(&with_variants(base.clone(), &defaults));
    let batch = run_grid(&with_variants(
        base.clone(),
        &["avmp_dynamic_b1", "avmp_dynamic_b8", "avmp_dynamic_b256"],
    ));
    let thresholds = run_grid(&with_variants(
        base.clone(),
        &[
            "avmp_dynamic_b128_th_high_010",
            "avmp_dynamic_b128_th_high_020",
            "avmp_dynamic_b128_th_low_002",
            "avmp_dynamic_b128_th_low_010",
        ],
    ));

    let mut ooms = oom_table(&main);
    ooms.extend(oom_table(&batch));
    let stage2: Vec<Run> = thresholds
        .into_iter()
        .chain(
            main.iter()
                .filter(|r| r.result.variant == "avmp_dynamic_b128")
                .map(|r| Run { result: r.result.clone(), audit: r.audit }),
        )
        .collect();

    let verdicts = vec![
        c1_equivalence(&main),
        c2_determinism(),
        c3_ordering(&ooms),
        c4_dynamic_benefit(&ooms),
        c5_migration_arithmetic(),
        c6_throttle_and_gate(&main),
        c7_batch_trend(&ooms),
        c8_threshold_null(&stage2),
        c9_reserved_footprint(&base),
        c10_bootstrap_oracle(),
        c11_ingestion(),
    ];

    let mut hard_failures = Vec::new();
    for v in &verdicts {
        let tag = match v.kind {
            Kind::Structural => "structural",
            Kind::Empirical => "empirical",
        };
        // Written to the raw handle so the report survives libtest capture.
        writeln!(
            std::io::stdout().lock(),
            "{} criterion {:>2} [{tag}] {}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.id,
            v.name,
            v.detail
        )
        .expect("stdout writable");
        if !v.pass && (v.kind == Kind::Structural || strict) {
            hard_failures.push(v.id);
        }
    }
    assert!(hard_failures.is_empty(), "criteria failed: {hard_failures:?}");
}

#[test]
fn padded_variant_tags_every_handle_kv() {
    // the unified pool hands out KV-tagged handles even for SSM blocks
    let cfg = desk();
    let model = cfg.model_specs[0].clone();
    let mut a = Allocator::new(sweep::preset("padded_unified").unwrap(), 64 << 20, model).unwrap();
    let alloc = a.admit(1, 100).unwrap();
    assert!(alloc
        .kv_handles
        .iter()
        .chain(alloc.ssm_handles.iter())
        .all(|h| h.pool() == avmp_core::handle_space::PoolId::Kv));
    assert_eq!(sweep::preset("padded_unified").unwrap().variant, VariantKind::PaddedUnified);
}
