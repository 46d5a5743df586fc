//! Cross-seed aggregation and paired-bootstrap confidence intervals.

use std::collections::BTreeMap;
use std::fmt;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{AvmpError, Result};
use crate::rng;

pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 10_000;
pub const DEFAULT_BOOTSTRAP_SEED: u64 = 20_260_520;
/// Largest share of zero-denominator resamples a ratio report tolerates.
pub const MAX_SKIPPED_FRACTION: f64 = 0.01;

/// Identifies one cell within a variant's results; pairing matches on all fields.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub workload: String,
    pub model: String,
    pub pool_budget: u64,
    pub seed: u64,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.workload, self.model, self.pool_budget, self.seed
        )
    }
}

/// Nearest-rank percentile: the element at `ceil(p/100 * n) - 1` of the sorted values.
pub fn nearest_rank<T: Copy + PartialOrd>(values: &[T], percent: f64) -> T {
    assert!(!values.is_empty(), "percentile of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("unordered sample value"));
    sorted[rank_index(sorted.len(), percent)]
}

fn rank_index(n: usize, percent: f64) -> usize {
    let rank = (percent / 100.0 * n as f64).ceil() as usize;
    rank.clamp(1, n) - 1
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator); zero for a single value.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSigma {
    pub mean: f64,
    pub sigma: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate<K> {
    pub groups: BTreeMap<K, MeanSigma>,
    /// Sum of the group means.
    pub total_mean: f64,
    /// `sqrt(sum sigma_i^2)` over the groups.
    pub total_sigma: f64,
}

/// Mean and across-seed sigma per group plus the propagated total.
pub fn aggregate_mean_sigma<K: Ord + Clone + fmt::Debug>(
    groups: &BTreeMap<K, Vec<f64>>,
) -> Result<Aggregate<K>> {
    if groups.is_empty() {
        return Err(AvmpError::Stats("no groups to aggregate".into()));
    }
    let mut out = BTreeMap::new();
    for (key, values) in groups {
        if values.is_empty() {
            return Err(AvmpError::Stats(format!("group {key:?} has no cells")));
        }
        out.insert(
            key.clone(),
            MeanSigma {
                mean: mean(values),
                sigma: sample_std(values),
                n: values.len(),
            },
        );
    }
    let total_mean = out.values().map(|g| g.mean).sum();
    let total_sigma = out.values().map(|g| g.sigma.powi(2)).sum::<f64>().sqrt();
    Ok(Aggregate {
        groups: out,
        total_mean,
        total_sigma,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub label: String,
    pub n: usize,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub significant: bool,
    pub resamples: usize,
    pub skipped: usize,
}

/// Lines the two metric maps up by key, refusing any mismatch.
pub fn pair<K: Ord + fmt::Display>(
    a: &BTreeMap<K, f64>,
    b: &BTreeMap<K, f64>,
) -> Result<Vec<(f64, f64)>> {
    if let Some(k) = a.keys().find(|k| !b.contains_key(*k)) {
        return Err(AvmpError::Pairing(format!("key {k} missing from the second series")));
    }
    if let Some(k) = b.keys().find(|k| !a.contains_key(*k)) {
        return Err(AvmpError::Pairing(format!("key {k} missing from the first series")));
    }
    if a.is_empty() {
        return Err(AvmpError::Pairing("no pairs".into()));
    }
    Ok(a.iter().map(|(k, &x)| (x, b[k])).collect())
}

fn percentile_ci(stats: &mut [f64]) -> (f64, f64) {
    stats.sort_by(f64::total_cmp);
    let n = stats.len();
    (stats[rank_index(n, 2.5)], stats[rank_index(n, 97.5)])
}

/// Draws `resamples` index vectors of length `n` from the bootstrap stream.
fn for_each_resample(n: usize, resamples: usize, seed: u64, mut f: impl FnMut(&[usize])) {
    let mut rng = rng::stream(seed, "bootstrap");
    let mut idx = vec![0usize; n];
    for _ in 0..resamples {
        for slot in idx.iter_mut() {
            *slot = rng.random_range(0..n);
        }
        f(&idx);
    }
}

fn check_resamples(resamples: usize) -> Result<()> {
    if resamples == 0 {
        return Err(AvmpError::InvalidArgument("bootstrap needs B >= 1".into()));
    }
    Ok(())
}

/// CI on the mean of per-key differences `a - b`.
pub fn paired_bootstrap_delta<K: Ord + fmt::Display>(
    label: &str,
    a: &BTreeMap<K, f64>,
    b: &BTreeMap<K, f64>,
    resamples: usize,
    seed: u64,
) -> Result<BootstrapReport> {
    check_resamples(resamples)?;
    let deltas: Vec<f64> = pair(a, b)?.into_iter().map(|(x, y)| x - y).collect();
    let n = deltas.len();
    let mut stats = Vec::with_capacity(resamples);
    for_each_resample(n, resamples, seed, |idx| {
        stats.push(idx.iter().map(|&i| deltas[i]).sum::<f64>() / n as f64);
    });
    let (ci_low, ci_high) = percentile_ci(&mut stats);
    Ok(BootstrapReport {
        label: label.to_string(),
        n,
        point: mean(&deltas),
        ci_low,
        ci_high,
        significant: ci_low > 0.0 || ci_high < 0.0,
        resamples,
        skipped: 0,
    })
}

/// CI on `mean(a) / mean(b)` under paired resampling of the key tuples.
pub fn paired_bootstrap_ratio<K: Ord + fmt::Display>(
    label: &str,
    a: &BTreeMap<K, f64>,
    b: &BTreeMap<K, f64>,
    resamples: usize,
    seed: u64,
) -> Result<BootstrapReport> {
    check_resamples(resamples)?;
    let pairs = pair(a, b)?;
    let n = pairs.len();
    let sum_b: f64 = pairs.iter().map(|p| p.1).sum();
    if sum_b == 0.0 {
        return Err(AvmpError::Stats(format!("{label}: denominator series has zero mean")));
    }
    let point = pairs.iter().map(|p| p.0).sum::<f64>() / sum_b;
    let mut stats = Vec::with_capacity(resamples);
    let mut skipped = 0usize;
    for_each_resample(n, resamples, seed, |idx| {
        let (sa, sb) = idx
            .iter()
            .fold((0.0, 0.0), |(sa, sb), &i| (sa + pairs[i].0, sb + pairs[i].1));
        if sb == 0.0 {
            skipped += 1;
        } else {
            stats.push(sa / sb);
        }
    });
    if skipped as f64 > MAX_SKIPPED_FRACTION * resamples as f64 || stats.is_empty() {
        return Err(AvmpError::Stats(format!(
            "{label}: {skipped} of {resamples} resamples had a zero denominator"
        )));
    }
    let (ci_low, ci_high) = percentile_ci(&mut stats);
    Ok(BootstrapReport {
        label: label.to_string(),
        n,
        point,
        ci_low,
        ci_high,
        significant: ci_low > 1.0 || ci_high < 1.0,
        resamples,
        skipped,
    })
}
