//! Bootstrap step-down testing with k-familywise error rate control.
//!
//! Hypotheses `H_j: μ_j ≤ 0` are tested with `T_j = n^{-1/2} Σ_i U_ij`.
//! Critical values for every index set `K` come from one shared matrix of
//! centered empirical-bootstrap statistics: `ĉ_K` is the `⌈(1-α)B⌉`-th
//! smallest per-replicate k-th largest value over `K`. Because one matrix
//! serves all `K`, `ĉ_K ≥ ĉ_I` holds exactly whenever `K ⊇ I`.

use std::collections::HashMap;

use itertools::Itertools;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anticonc::estimate_e_max_norm;
use crate::exec::{self, derive_seed, domain, stream_rng};
use crate::gauss::{CovarianceModel, GaussianSampler};
use crate::order_stats::n_subsets;
use crate::{Error, Estimate, Result};

/// Per-step cap on the number of `(k-1)`-subsets of the rejected set.
pub const STEP_SUBSET_CAP: f64 = 1e5;

/// `n × p` observations, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    u: Vec<f64>,
    n: usize,
    p: usize,
}

impl DataMatrix {
    pub fn new(u: Vec<f64>, n: usize, p: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::param("n", format!("need at least 2 observations, got {n}")));
        }
        if p == 0 {
            return Err(Error::param("p", "need at least one hypothesis"));
        }
        if u.len() != n * p {
            return Err(Error::param("u", format!("expected {} entries, got {}", n * p, u.len())));
        }
        if let Some(i) = u.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(DataMatrix { u, n, p })
    }

    /// `n` rows of `μ + L z`.
    pub fn gaussian(sampler: &GaussianSampler, mu: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let p = sampler.p();
        if mu.len() != p {
            return Err(Error::param("mu", format!("length {} does not match p = {p}", mu.len())));
        }
        let mut u = vec![0.0; n * p];
        let mut z = vec![0.0; sampler.factor().rank()];
        for row in u.chunks_exact_mut(p) {
            sampler.draw_into(rng, &mut z, row);
            for (x, m) in row.iter_mut().zip(mu) {
                *x += m;
            }
        }
        DataMatrix::new(u, n, p)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.u[i * self.p..(i + 1) * self.p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.u.chunks_exact(self.p)
    }

    /// Column means computed as the first row plus the mean deviation from
    /// it, which is exact when all rows are equal.
    pub fn column_means(&self) -> Vec<f64> {
        let first = self.row(0).to_vec();
        let mut dev = vec![0.0; self.p];
        for r in self.rows().skip(1) {
            for j in 0..self.p {
                dev[j] += r[j] - first[j];
            }
        }
        first.iter().zip(dev).map(|(f, d)| f + d / self.n as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestStatistics {
    pub t: Vec<f64>,
}

/// `t_j = n^{-1/2} Σ_i u_ij`
pub fn compute_test_statistics(data: &DataMatrix) -> TestStatistics {
    let mut t = vec![0.0; data.p];
    for r in data.rows() {
        for (a, v) in t.iter_mut().zip(r) {
            *a += v;
        }
    }
    let scale = (data.n as f64).sqrt();
    TestStatistics { t: t.into_iter().map(|s| s / scale).collect() }
}

/// `B × p` bootstrap statistics, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapMatrix {
    stats: Vec<f64>,
    b: usize,
    p: usize,
}

impl BootstrapMatrix {
    pub fn from_rows(stats: Vec<f64>, b: usize, p: usize) -> Result<Self> {
        if stats.len() != b * p || b == 0 || p == 0 {
            return Err(Error::param("stats", format!("expected a nonempty {b} × {p} matrix")));
        }
        Ok(BootstrapMatrix { stats, b, p })
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.stats[r * self.p..(r + 1) * self.p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.stats.chunks_exact(self.p)
    }
}

/// Centered empirical-bootstrap statistics
/// `T*_j = n^{-1/2} Σ_i (U*_ij - ū_j)`.
///
/// Replicate `r` resamples with the stream `(seed, r)`.
pub fn bootstrap_statistics(data: &DataMatrix, b: usize, seed: u64) -> Result<BootstrapMatrix> {
    if b < 100 {
        return Err(Error::param("b", format!("need at least 100 bootstrap replicates, got {b}")));
    }
    let (n, p) = (data.n, data.p);
    let means = data.column_means();
    let centered: Vec<f64> = data.rows().flat_map(|r| r.iter().zip(&means).map(|(u, m)| u - m)).collect();
    let scale = (n as f64).sqrt();
    let rows = exec::map_indexed(b, |r| {
        let mut rng = stream_rng(seed, domain::BOOTSTRAP, r as u64);
        let mut acc = vec![0.0; p];
        for _ in 0..n {
            let i = rng.random_range(0..n);
            for (a, v) in acc.iter_mut().zip(&centered[i * p..(i + 1) * p]) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= scale);
        acc
    });
    BootstrapMatrix::from_rows(rows.concat(), b, p)
}

/// Index of the `(1-α)` empirical quantile: the `⌈(1-α)B⌉`-th smallest value
/// (1-based), clamped to `[1, B]`.
pub fn quantile_rank(alpha: f64, b: usize) -> usize {
    // the offset keeps e.g. (1 - 0.05) * 100 from rounding up to 96
    (((1.0 - alpha) * b as f64 - 1e-9).ceil() as usize).clamp(1, b)
}

/// Source of critical values `ĉ_K(1-α, k)`.
pub trait CriticalValues {
    fn k(&self) -> usize;
    fn alpha(&self) -> f64;
    fn critical_value(&mut self, set: &[usize]) -> Result<f64>;
}

/// Bootstrap critical values, cached per index set.
#[derive(Debug, Clone)]
pub struct CriticalValueOracle {
    alpha: f64,
    k: usize,
    boot: BootstrapMatrix,
    cache: HashMap<Vec<usize>, f64>,
}

impl CriticalValueOracle {
    pub fn new(boot: BootstrapMatrix, alpha: f64, k: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::param("alpha", format!("must lie in (0, 1), got {alpha}")));
        }
        if k == 0 || k > boot.p {
            return Err(Error::KOutOfRange { k, len: boot.p });
        }
        Ok(CriticalValueOracle { alpha, k, boot, cache: HashMap::new() })
    }

    pub fn bootstrap(&self) -> &BootstrapMatrix {
        &self.boot
    }

    pub fn b(&self) -> usize {
        self.boot.b
    }

    pub fn cached(&self) -> usize {
        self.cache.len()
    }

    fn compute(&self, set: &[usize]) -> f64 {
        let k = self.k;
        let mut sub = Vec::with_capacity(set.len());
        let mut per_row: Vec<f64> = self
            .boot
            .rows()
            .map(|row| {
                sub.clear();
                sub.extend(set.iter().map(|&j| row[j]));
                *sub.select_nth_unstable_by(k - 1, |a: &f64, b: &f64| b.total_cmp(a)).1
            })
            .collect();
        let r = quantile_rank(self.alpha, self.boot.b);
        *per_row.select_nth_unstable_by(r - 1, f64::total_cmp).1
    }
}

impl CriticalValues for CriticalValueOracle {
    fn k(&self) -> usize {
        self.k
    }

    fn alpha(&self) -> f64 {
        self.alpha
    }

    fn critical_value(&mut self, set: &[usize]) -> Result<f64> {
        let mut key = set.to_vec();
        key.sort_unstable();
        key.dedup();
        if key.len() < self.k {
            return Err(Error::param("K", format!("|K| = {} is smaller than k = {}", key.len(), self.k)));
        }
        if let Some(&j) = key.iter().find(|&&j| j >= self.boot.p) {
            return Err(Error::param("K", format!("index {j} out of range for p = {}", self.boot.p)));
        }
        if let Some(&c) = self.cache.get(&key) {
            return Ok(c);
        }
        let c = self.compute(&key);
        self.cache.insert(key, c);
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Reject,
    FailToReject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub critical_value: f64,
    pub newly_rejected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDownResult {
    /// Sorted indices of rejected hypotheses.
    pub rejected: Vec<usize>,
    pub trace: Vec<StepRecord>,
    pub decisions: Vec<Decision>,
}

/// Generic k-FWER step-down.
///
/// Step 1 rejects every `t_j > ĉ_{all}`. Each later step, with rejected set
/// `R`, uses `d = max ĉ_{Rᶜ ∪ I}` over `I ⊆ R`, `|I| = min(k-1, |R|)`, and
/// rejects every remaining `t_j > d`. Stops when a step rejects nothing or
/// everything is rejected.
pub fn stepdown_kfwer<C: CriticalValues>(t: &TestStatistics, oracle: &mut C) -> Result<StepDownResult> {
    let p = t.t.len();
    let k = oracle.k();
    if k == 0 || k > p {
        return Err(Error::KOutOfRange { k, len: p });
    }
    let mut is_rejected = vec![false; p];
    let mut rejected: Vec<usize> = Vec::new();
    let mut trace: Vec<StepRecord> = Vec::new();
    let all: Vec<usize> = (0..p).collect();
    loop {
        let step = trace.len() + 1;
        let d = if rejected.is_empty() {
            oracle.critical_value(&all)?
        } else {
            let m = (k - 1).min(rejected.len());
            let count = n_subsets(rejected.len(), m);
            if count > STEP_SUBSET_CAP {
                return Err(Error::CapExceeded { what: "step-down subsets", count, cap: STEP_SUBSET_CAP });
            }
            let remaining: Vec<usize> = (0..p).filter(|&j| !is_rejected[j]).collect();
            let mut d = f64::NEG_INFINITY;
            for extra in rejected.iter().copied().combinations(m) {
                let mut set = remaining.clone();
                set.extend(extra);
                d = d.max(oracle.critical_value(&set)?);
            }
            d
        };
        if let Some(prev) = trace.last() {
            if d > prev.critical_value {
                return Err(Error::param(
                    "oracle",
                    format!("critical value increased from {} to {d} at step {step}", prev.critical_value),
                ));
            }
        }
        let newly: Vec<usize> = (0..p).filter(|&j| !is_rejected[j] && t.t[j] > d).collect();
        for &j in &newly {
            is_rejected[j] = true;
        }
        rejected.extend_from_slice(&newly);
        let done = newly.is_empty() || rejected.len() == p;
        trace.push(StepRecord { step, critical_value: d, newly_rejected: newly });
        if done {
            break;
        }
    }
    rejected.sort_unstable();
    let decisions = is_rejected.iter().map(|&r| if r { Decision::Reject } else { Decision::FailToReject }).collect();
    Ok(StepDownResult { rejected, trace, decisions })
}

/// `α + 2kγ(1 + E‖U‖∞) + δ`
pub fn kfwer_upper_bound(alpha: f64, k: usize, gamma: f64, e_max_norm: f64, delta: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param("alpha", format!("must lie in (0, 1), got {alpha}")));
    }
    for (name, v) in [("gamma", gamma), ("e_max_norm", e_max_norm), ("delta", delta)] {
        if !(v >= 0.0) {
            return Err(Error::param(name, format!("must be nonnegative, got {v}")));
        }
    }
    Ok(alpha + 2.0 * k as f64 * gamma * (1.0 + e_max_norm) + delta)
}

/// Draws `pairs` random nested pairs `I ⊂ K` with `|I| ≥ k` and counts how
/// often `ĉ_K < ĉ_I`.
pub fn nested_pair_violations(oracle: &mut CriticalValueOracle, pairs: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
    let p = oracle.boot.p;
    let k = oracle.k;
    let mut violations = 0;
    for _ in 0..pairs {
        let size_k = rng.random_range(k.max(2).min(p)..=p);
        let outer = sample_indices(rng, p, size_k).into_vec();
        let size_i = if size_k > k { rng.random_range(k..size_k) } else { size_k };
        let inner: Vec<usize> = outer[..size_i].to_vec();
        let ck = oracle.critical_value(&outer)?;
        let ci = oracle.critical_value(&inner)?;
        if ck < ci {
            violations += 1;
        }
    }
    Ok(violations)
}

/// γ and δ estimation for the error-rate bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSettings {
    /// Direct draws of `T` used for the true quantile and `E‖X‖∞`.
    pub direct_draws: usize,
    /// Target exceedance rate used to pick γ from the observed gaps.
    pub delta_target: f64,
}

impl Default for BoundSettings {
    fn default() -> Self {
        BoundSettings { direct_draws: 1_000_000, delta_target: 0.05 }
    }
}

#[derive(Debug, Clone)]
pub struct KfwerScenario {
    pub mu: Vec<f64>,
    pub model: CovarianceModel,
    pub n: usize,
    pub k: usize,
    pub alpha: f64,
    pub b: usize,
    pub n_sim: usize,
    pub seed: u64,
    pub bound: Option<BoundSettings>,
}

impl KfwerScenario {
    pub fn validate(&self) -> Result<()> {
        let p = self.model.p();
        if self.mu.len() != p {
            return Err(Error::param("mu", format!("length {} does not match p = {p}", self.mu.len())));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::param("alpha", format!("must lie in (0, 1), got {}", self.alpha)));
        }
        if self.k == 0 || self.k > p {
            return Err(Error::KOutOfRange { k: self.k, len: p });
        }
        if self.n < 2 {
            return Err(Error::param("n", "need at least 2 observations"));
        }
        if self.b < 100 {
            return Err(Error::param("b", "need at least 100 bootstrap replicates"));
        }
        if self.n_sim == 0 {
            return Err(Error::param("n_sim", "need at least one simulation"));
        }
        if let Some(bs) = &self.bound {
            if bs.direct_draws < 10_000 || !(bs.delta_target > 0.0 && bs.delta_target < 1.0) {
                return Err(Error::param("bound", "need ≥ 10^4 direct draws and δ target in (0, 1)"));
            }
        }
        Ok(())
    }

    /// True nulls `{j : μ_j ≤ 0}`.
    pub fn true_nulls(&self) -> Vec<usize> {
        (0..self.mu.len()).filter(|&j| self.mu[j] <= 0.0).collect()
    }

    /// Seed of the bootstrap for simulation `sim`.
    pub fn bootstrap_seed(&self, sim: usize) -> u64 {
        derive_seed(derive_seed(self.seed, domain::KFWER_BOOTSTRAP), sim as u64)
    }

    /// Dataset of simulation `sim`.
    pub fn dataset(&self, sampler: &GaussianSampler, sim: usize) -> Result<DataMatrix> {
        let mut rng = stream_rng(self.seed, domain::KFWER_DATA, sim as u64);
        DataMatrix::gaussian(sampler, &self.mu, self.n, &mut rng)
    }

    /// Bootstrap oracle for simulation `sim`, with its data.
    pub fn oracle(&self, sampler: &GaussianSampler, sim: usize) -> Result<(DataMatrix, CriticalValueOracle)> {
        let data = self.dataset(sampler, sim)?;
        let boot = bootstrap_statistics(&data, self.b, self.bootstrap_seed(sim))?;
        Ok((data, CriticalValueOracle::new(boot, self.alpha, self.k)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub sim: usize,
    pub rejections: usize,
    pub false_rejections: usize,
    pub critical_values: Vec<f64>,
    /// `ĉ_I` over the true nulls, when the bound is estimated.
    pub c_true_nulls: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfwerBound {
    /// `(1-α)` quantile of `k-max(T_j : j ∈ I)` from direct draws.
    pub true_quantile: f64,
    pub gamma: f64,
    pub delta: f64,
    pub e_max_norm: Estimate,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfwerSimulation {
    /// Fraction of simulations with at least k false rejections.
    pub kfwer: Estimate,
    /// Binomial SE at the nominal level, `sqrt(α(1-α)/n_sim)`.
    pub level_se: f64,
    pub mean_rejections: f64,
    pub mean_false_rejections: f64,
    pub records: Vec<SimRecord>,
    pub bound: Option<KfwerBound>,
}

/// Repeats data generation, bootstrap, and step-down `n_sim` times.
pub fn simulate_kfwer(scenario: &KfwerScenario) -> Result<KfwerSimulation> {
    scenario.validate()?;
    let sampler = GaussianSampler::new(scenario.model.clone(), scenario.seed)?;
    let nulls = scenario.true_nulls();
    let is_null: Vec<bool> = scenario.mu.iter().map(|&m| m <= 0.0).collect();
    let want_bound = scenario.bound.is_some() && nulls.len() >= scenario.k;
    let records = exec::map_indexed(scenario.n_sim, |sim| -> Result<SimRecord> {
        let (data, mut oracle) = scenario.oracle(&sampler, sim)?;
        let t = compute_test_statistics(&data);
        let res = stepdown_kfwer(&t, &mut oracle)?;
        let c_true_nulls = if want_bound { Some(oracle.critical_value(&nulls)?) } else { None };
        Ok(SimRecord {
            sim,
            rejections: res.rejected.len(),
            false_rejections: res.rejected.iter().filter(|&&j| is_null[j]).count(),
            critical_values: res.trace.iter().map(|s| s.critical_value).collect(),
            c_true_nulls,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let ns = scenario.n_sim as f64;
    let hits = records.iter().filter(|r| r.false_rejections >= scenario.k).count();
    let bound = if want_bound {
        let settings = scenario.bound.expect("checked");
        Some(estimate_bound(scenario, &sampler, &nulls, &records, settings)?)
    } else {
        None
    };
    Ok(KfwerSimulation {
        kfwer: Estimate::proportion(hits as u64, scenario.n_sim as u64),
        level_se: (scenario.alpha * (1.0 - scenario.alpha) / ns).sqrt(),
        mean_rejections: records.iter().map(|r| r.rejections as f64).sum::<f64>() / ns,
        mean_false_rejections: records.iter().map(|r| r.false_rejections as f64).sum::<f64>() / ns,
        records,
        bound,
    })
}

/// γ is the `(1 - δ_target)` empirical quantile of the gaps
/// `q_{1-α}(k-max(T_I)) - ĉ_I` (floored at 0) and δ the observed rate of
/// gaps at or above γ. `T` is exactly `N(√n μ, Σ)` for Gaussian data, so the
/// true quantile comes from direct draws.
fn estimate_bound(
    scenario: &KfwerScenario,
    sampler: &GaussianSampler,
    nulls: &[usize],
    records: &[SimRecord],
    settings: BoundSettings,
) -> Result<KfwerBound> {
    let k = scenario.k;
    let shift: Vec<f64> = scenario.mu.iter().map(|m| m * (scenario.n as f64).sqrt()).collect();
    let direct = sampler.reseeded(derive_seed(scenario.seed, domain::KFWER_DIRECT));
    let mut values: Vec<f64> = direct
        .fold_draws(
            settings.direct_draws,
            domain::KFWER_DIRECT,
            || (Vec::new(), Vec::new()),
            |(vals, sub): &mut (Vec<f64>, Vec<f64>), x, _| {
                sub.clear();
                sub.extend(nulls.iter().map(|&j| x[j] + shift[j]));
                vals.push(*sub.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a)).1);
            },
        )
        .into_iter()
        .flat_map(|(v, _)| v)
        .collect();
    let r = quantile_rank(scenario.alpha, values.len());
    let q = *values.select_nth_unstable_by(r - 1, f64::total_cmp).1;
    let mut gaps: Vec<f64> = records.iter().map(|rec| q - rec.c_true_nulls.expect("bound requested")).collect();
    gaps.sort_unstable_by(f64::total_cmp);
    let gr = quantile_rank(settings.delta_target, gaps.len());
    let gamma = gaps[gr - 1].max(0.0);
    let delta = gaps.iter().filter(|&&g| g >= gamma).count() as f64 / gaps.len() as f64;
    let e_max_norm = estimate_e_max_norm(&direct, settings.direct_draws)?.estimate;
    let value = kfwer_upper_bound(scenario.alpha, k, gamma, e_max_norm.value, delta)?;
    Ok(KfwerBound { true_quantile: q, gamma, delta, e_max_norm, value })
}
