//! Anticoncentration bounds and the Monte Carlo estimators that check them.

use itertools::Itertools;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::exec::{self, domain};
use crate::gauss::{GaussianSampler, ModelMeta};
use crate::isotonic::pava;
use crate::normal;
use crate::order_stats::{n_subsets, TopKScratch};
use crate::{Error, Estimate, Result};

/// Largest number of size-k subsets for which `min var(W)` is estimated.
pub const SUBSET_CAP: f64 = 2e5;
/// Data-anchored windows are scanned only up to this many draws.
pub const DATA_ANCHORED_MAX_N: usize = 1_000_000;
/// Minimum expected count per histogram bin.
pub const MIN_BIN_COUNT: u64 = 50;
const W_BATCHES: usize = 20;

/// `2 ε k (1 + E‖X‖∞)`
pub fn theorem1_bound(epsilon: f64, k: usize, e_max_norm: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::param("epsilon", format!("must be positive, got {epsilon}")));
    }
    if k == 0 {
        return Err(Error::param("k", "must be at least 1"));
    }
    if !(e_max_norm >= 0.0) {
        return Err(Error::param("e_max_norm", format!("must be nonnegative, got {e_max_norm}")));
    }
    Ok(2.0 * epsilon * k as f64 * (1.0 + e_max_norm))
}

/// `ln C(p, k)`, exact while `C(p, k)` fits in 53 bits and via log-gamma
/// beyond that.
pub fn ln_binomial(p: usize, k: usize) -> f64 {
    let c = n_subsets(p, k);
    if c < 9.0e15 {
        return c.ln();
    }
    ln_gamma(p as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((p - k) as f64 + 1.0)
}

/// `(ε / sqrt(min var W)) (sqrt(2 ln C(p, k)) + 2)`
pub fn nazarov_bound(epsilon: f64, p: usize, k: usize, min_var_w: f64) -> Result<f64> {
    if !(min_var_w > 0.0) {
        return Err(Error::param("min_var_w", format!("must be positive, got {min_var_w}")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::param("epsilon", format!("must be positive, got {epsilon}")));
    }
    if k == 0 || k > p {
        return Err(Error::KOutOfRange { k, len: p });
    }
    let ln_c = ln_binomial(p, k);
    Ok(epsilon / min_var_w.sqrt() * ((2.0 * ln_c).sqrt() + 2.0))
}

/// Evaluation grid for the supremum over window positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub y_min: f64,
    pub y_max: f64,
    pub step: f64,
}

impl Grid {
    /// Half-width `sqrt(2 ln 2p) + 2` of the range any grid must cover.
    pub fn required_half_width(p: usize) -> f64 {
        (2.0 * (2.0 * p as f64).ln()).sqrt() + 2.0
    }

    /// The minimal admissible grid: `±(sqrt(2 ln 2p) + 2)` with step `ε/4`.
    pub fn default_for(p: usize, epsilon: f64) -> Self {
        let h = Self::required_half_width(p);
        Grid { y_min: -h, y_max: h, step: epsilon / 4.0 }
    }

    pub fn validate(&self, p: usize, epsilon: f64) -> Result<()> {
        let h = Self::required_half_width(p);
        if !(self.step > 0.0) || self.step > epsilon / 4.0 {
            return Err(Error::Grid(format!("step {} must lie in (0, ε/4 = {}]", self.step, epsilon / 4.0)));
        }
        if self.y_min > -h || self.y_max < h {
            return Err(Error::Grid(format!(
                "range [{}, {}] must cover [{:.6}, {:.6}]",
                self.y_min, self.y_max, -h, h
            )));
        }
        Ok(())
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        let n = ((self.y_max - self.y_min) / self.step).floor() as usize;
        (0..=n).map(move |i| self.y_min + i as f64 * self.step)
    }
}

/// Estimated concentration function `sup_y P(k-max ∈ [y, y + ε])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationEstimate {
    pub sup_hat: f64,
    pub argmax_y: f64,
    pub epsilon: f64,
    pub k: usize,
    pub grid: Grid,
    pub n_draws: usize,
    /// Binomial SE at the maximizing window.
    pub se: f64,
    /// Whether windows anchored at sample points were scanned as well.
    pub data_anchored: bool,
}

/// Sorted k-max values from one sampler, reusable for several window widths.
#[derive(Debug, Clone)]
pub struct KMaxSample {
    pub k: usize,
    pub p: usize,
    sorted: Vec<f64>,
}

impl KMaxSample {
    pub fn draw(sampler: &GaussianSampler, k: usize, n: usize) -> Result<Self> {
        if k == 0 || k > sampler.p() {
            return Err(Error::KOutOfRange { k, len: sampler.p() });
        }
        let parts = sampler.fold_draws(
            n,
            domain::SUP_INTERVAL,
            || (Vec::new(), Vec::new()),
            |(vals, scratch): &mut (Vec<f64>, Vec<f64>), x, _| {
                scratch.clear();
                scratch.extend_from_slice(x);
                vals.push(*scratch.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a)).1);
            },
        );
        Ok(Self::from_values(parts.into_iter().flat_map(|(v, _)| v).collect(), k, sampler.p()))
    }

    pub fn from_values(mut values: Vec<f64>, k: usize, p: usize) -> Self {
        values.sort_unstable_by(f64::total_cmp);
        KMaxSample { k, p, sorted: values }
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Empirical fraction of values `<= y`.
    pub fn ecdf(&self, y: f64) -> f64 {
        self.sorted.partition_point(|&v| v <= y) as f64 / self.len() as f64
    }

    /// Maximum empirical probability of a closed window of width `epsilon`,
    /// scanning the grid by a sliding window over the sorted values, plus
    /// every window starting at a sample point inside the grid range when
    /// `n ≤ DATA_ANCHORED_MAX_N`.
    pub fn sup_interval(&self, epsilon: f64, grid: Grid) -> Result<ConcentrationEstimate> {
        grid.validate(self.p, epsilon)?;
        let v = &self.sorted;
        let n = v.len();
        let mut best = (0usize, grid.y_min);
        let (mut lo, mut hi) = (0usize, 0usize);
        for y in grid.points() {
            while lo < n && v[lo] < y {
                lo += 1;
            }
            while hi < n && v[hi] <= y + epsilon {
                hi += 1;
            }
            let c = hi.max(lo) - lo;
            if c > best.0 {
                best = (c, y);
            }
        }
        let data_anchored = n <= DATA_ANCHORED_MAX_N;
        if data_anchored {
            let start = v.partition_point(|&x| x < grid.y_min);
            let mut hi = start;
            let mut i = start;
            while i < n && v[i] <= grid.y_max {
                // first index holding this value
                let y = v[i];
                while hi < n && v[hi] <= y + epsilon {
                    hi += 1;
                }
                let c = hi - i;
                if c > best.0 {
                    best = (c, y);
                }
                while i < n && v[i] == y {
                    i += 1;
                }
            }
        }
        let est = Estimate::proportion(best.0 as u64, n as u64);
        Ok(ConcentrationEstimate {
            sup_hat: est.value,
            argmax_y: best.1,
            epsilon,
            k: self.k,
            grid,
            n_draws: n,
            se: est.se,
            data_anchored,
        })
    }
}

/// Monte Carlo estimate of `sup_y P(k-max(X) ∈ [y, y + ε])`.
pub fn estimate_sup_interval_prob(
    sampler: &GaussianSampler,
    k: usize,
    epsilon: f64,
    grid: Option<Grid>,
    n: usize,
) -> Result<ConcentrationEstimate> {
    if !(epsilon > 0.0) {
        return Err(Error::param("epsilon", format!("must be positive, got {epsilon}")));
    }
    if n < 10_000 {
        return Err(Error::param("n", format!("need at least 10^4 draws, got {n}")));
    }
    let grid = grid.unwrap_or_else(|| Grid::default_for(sampler.p(), epsilon));
    grid.validate(sampler.p(), epsilon)?;
    KMaxSample::draw(sampler, k, n)?.sup_interval(epsilon, grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EMaxNorm {
    pub estimate: Estimate,
    /// Gaussian maximal-inequality ceiling `sqrt(2 ln 2p)`.
    pub ceiling: f64,
    /// Estimate exceeds the ceiling by more than 3 SE.
    pub exceeds_ceiling: bool,
}

/// Monte Carlo mean of `max_j |X_j|`.
pub fn estimate_e_max_norm(sampler: &GaussianSampler, n: usize) -> Result<EMaxNorm> {
    if n < 10_000 {
        return Err(Error::param("n", format!("need at least 10^4 draws, got {n}")));
    }
    let parts = sampler.fold_draws(
        n,
        domain::E_MAX_NORM,
        || (0.0f64, 0.0f64),
        |(s, ss), x, _| {
            let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            *s += m;
            *ss += m * m;
        },
    );
    let (s, ss) = parts.iter().fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
    let nf = n as f64;
    let mean = s / nf;
    let var = ((ss - s * s / nf) / (nf - 1.0)).max(0.0);
    let estimate = Estimate::new(mean, (var / nf).sqrt());
    let ceiling = (2.0 * (2.0 * sampler.p() as f64).ln()).sqrt();
    Ok(EMaxNorm { estimate, ceiling, exceeds_ceiling: mean - ceiling > 3.0 * estimate.se })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WMinVar {
    /// `min_A var(min_{j∈A} X_j)` and its batch-means SE.
    pub estimate: Estimate,
    /// The minimizing subset.
    pub argmin: Vec<usize>,
    pub n_subsets: usize,
}

/// Smallest variance of `min_{j∈A} X_j` over all `|A| = k`.
///
/// The SE comes from the spread of the minimizing subset's variance across
/// 20 disjoint batches of draws.
pub fn estimate_w_min_var(sampler: &GaussianSampler, k: usize, n: usize) -> Result<WMinVar> {
    let p = sampler.p();
    if k == 0 || k > p {
        return Err(Error::KOutOfRange { k, len: p });
    }
    let count = n_subsets(p, k);
    if count > SUBSET_CAP {
        return Err(Error::CapExceeded { what: "min var(W)", count, cap: SUBSET_CAP });
    }
    if n < 10_000 {
        return Err(Error::param("n", format!("need at least 10^4 draws, got {n}")));
    }
    let rows: Vec<f64> = sampler
        .fold_draws(n, domain::W_MIN_VAR, Vec::new, |acc: &mut Vec<f64>, x, _| acc.extend_from_slice(x))
        .concat();
    // column-major, so each subset streams through k contiguous columns
    let mut cols = vec![0.0; n * p];
    for (i, row) in rows.chunks_exact(p).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            cols[j * n + i] = v;
        }
    }
    drop(rows);
    let subsets: Vec<Vec<usize>> = (0..p).combinations(k).collect();
    let batch_len = n / W_BATCHES;
    let var_of = |s: f64, ss: f64, m: usize| (ss - s * s / m as f64) / (m as f64 - 1.0);
    let stats = exec::map_indexed(subsets.len(), |si| {
        let a: Vec<&[f64]> = subsets[si].iter().map(|&j| &cols[j * n..(j + 1) * n]).collect();
        let mut mins = a[0].to_vec();
        for c in &a[1..] {
            for (m, &v) in mins.iter_mut().zip(c.iter()) {
                *m = m.min(v);
            }
        }
        let mut batch = [(0.0f64, 0.0f64); W_BATCHES];
        for (b, chunk) in mins.chunks(batch_len).take(W_BATCHES).enumerate() {
            batch[b] = chunk.iter().fold((0.0, 0.0), |(s, ss), &m| (s + m, ss + m * m));
        }
        let (mut s, mut ss) = batch.iter().fold((0.0, 0.0), |(s, ss), &(a, b)| (s + a, ss + b));
        for &m in &mins[W_BATCHES * batch_len..] {
            s += m;
            ss += m * m;
        }
        let total = var_of(s, ss, n);
        let bvars: Vec<f64> = batch.iter().map(|&(s, ss)| var_of(s, ss, batch_len)).collect();
        let bm = bvars.iter().sum::<f64>() / W_BATCHES as f64;
        let bsd = (bvars.iter().map(|v| (v - bm).powi(2)).sum::<f64>() / (W_BATCHES as f64 - 1.0)).sqrt();
        (total, bsd / (W_BATCHES as f64).sqrt())
    });
    let (best, &(value, se)) =
        stats.iter().enumerate().min_by(|a, b| a.1 .0.total_cmp(&b.1 .0)).expect("at least one subset");
    Ok(WMinVar { estimate: Estimate::new(value, se), argmin: subsets[best].clone(), n_subsets: subsets.len() })
}

/// Theorem-style bound evaluated at a Monte Carlo estimate of `E‖X‖∞`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub theorem1: f64,
    pub nazarov: Option<f64>,
    pub e_max_norm_hat: Estimate,
    pub epsilon: f64,
    pub k: usize,
    pub p: usize,
    pub model: ModelMeta,
}

impl BoundReport {
    pub fn new(
        sampler: &GaussianSampler,
        epsilon: f64,
        k: usize,
        e_max_norm: Estimate,
        min_var_w: Option<f64>,
    ) -> Result<Self> {
        let p = sampler.p();
        Ok(BoundReport {
            theorem1: theorem1_bound(epsilon, k, e_max_norm.value)?,
            nazarov: min_var_w.map(|v| nazarov_bound(epsilon, p, k, v)).transpose()?,
            e_max_norm_hat: e_max_norm,
            epsilon,
            k,
            p,
            model: sampler.model().meta().clone(),
        })
    }
}

/// One histogram bin of the density diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
    /// Density of the randomized statistic averaged over the bin.
    pub f_hat: f64,
    pub f_se: f64,
    /// `f̂ / φ`, as the ratio of bin probability to standard normal bin mass.
    pub g_hat: f64,
    pub g_se: f64,
    pub g_iso: f64,
    /// `M(hi) · P̂(max(X) ≥ lo)`, an upper bound for the density on the bin.
    pub mills_rhs: f64,
    pub mills_rhs_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub k: usize,
    pub m_draws: usize,
    pub q_lo: f64,
    pub q_hi: f64,
    /// Largest `|Ĝ - iso(Ĝ)|` over bins.
    pub max_violation: f64,
    /// Largest `|Ĝ - iso(Ĝ)| / (3 SE)`; the check passes when this is ≤ 1.
    pub max_violation_ratio: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MillsReport {
    pub k: usize,
    pub m_draws: usize,
    /// Smallest `rhs - f̂` over bins.
    pub worst_margin: f64,
    /// Largest `(f̂ - rhs) / (3 (SE_f + SE_rhs))`; passes when ≤ 1.
    pub worst_ratio: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityDiagnostics {
    pub bins: Vec<DensityBin>,
    pub monotonicity: MonotonicityReport,
    pub mills: MillsReport,
}

/// Normal probability of `[a, b]`, computed on the side with less
/// cancellation.
fn normal_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        normal::sf(a) - normal::sf(b)
    } else {
        normal::cdf(b) - normal::cdf(a)
    }
}

fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Histogram diagnostics of the randomized statistic's density.
///
/// Draws `m` vectors, records the randomized statistic and `max(X)` of each,
/// and bins the former on `bins` equal-width bins spanning its empirical
/// 1% and 99% quantiles. Two checks are then made per bin:
///
/// * the density divided by the normal density, estimated as bin count over
///   normal bin mass, is compared with its weighted isotonic fit and every
///   deviation must stay within 3 SE;
/// * the bin density must not exceed `M(hi) P̂(max(X) ≥ lo)` by more than
///   3 combined SE.
pub fn density_diagnostics(sampler: &GaussianSampler, k: usize, m: usize, bins: usize) -> Result<DensityDiagnostics> {
    let p = sampler.p();
    if k == 0 || k > p {
        return Err(Error::KOutOfRange { k, len: p });
    }
    if m < 100_000 {
        return Err(Error::param("m", format!("need at least 10^5 draws, got {m}")));
    }
    if bins < 2 {
        return Err(Error::param("bins", "need at least two bins"));
    }
    let parts = sampler.fold_draws(
        m,
        domain::DENSITY,
        || (Vec::new(), Vec::new(), TopKScratch::default()),
        |(tilde, maxes, scratch): &mut (Vec<f64>, Vec<f64>, TopKScratch), x, ctx| {
            let (iota, _, _) = scratch.select(x, k, ctx.rng);
            tilde.push(x[iota]);
            maxes.push(x.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        },
    );
    let mut tilde = Vec::with_capacity(m);
    let mut maxes = Vec::with_capacity(m);
    for (t, mx, _) in parts {
        tilde.extend(t);
        maxes.extend(mx);
    }
    tilde.sort_unstable_by(f64::total_cmp);
    maxes.sort_unstable_by(f64::total_cmp);
    let q_lo = empirical_quantile(&tilde, 0.01);
    let q_hi = empirical_quantile(&tilde, 0.99);
    if !(q_hi > q_lo) {
        return Err(Error::Grid(format!("degenerate quantile range [{q_lo}, {q_hi}]")));
    }
    let h = (q_hi - q_lo) / bins as f64;
    let mf = m as f64;
    let mut out = Vec::with_capacity(bins);
    for b in 0..bins {
        let lo = q_lo + b as f64 * h;
        let hi = if b + 1 == bins { q_hi } else { q_lo + (b + 1) as f64 * h };
        let start = tilde.partition_point(|&v| v < lo);
        let end = if b + 1 == bins { tilde.partition_point(|&v| v <= hi) } else { tilde.partition_point(|&v| v < hi) };
        let count = (end - start) as u64;
        if count < MIN_BIN_COUNT {
            return Err(Error::SparseBin { bin: b, count, min: MIN_BIN_COUNT });
        }
        let pi = count as f64 / mf;
        let pi_se = (pi * (1.0 - pi) / mf).sqrt();
        let mass = normal_mass(lo, hi);
        let tail = (m - maxes.partition_point(|&v| v < lo)) as f64 / mf;
        let mills = normal::mills_ratio(hi);
        out.push(DensityBin {
            lo,
            hi,
            count,
            f_hat: pi / (hi - lo),
            f_se: pi_se / (hi - lo),
            g_hat: pi / mass,
            g_se: pi_se / mass,
            g_iso: 0.0,
            mills_rhs: mills * tail,
            mills_rhs_se: mills * (tail * (1.0 - tail) / mf).sqrt(),
        });
    }
    let g: Vec<f64> = out.iter().map(|b| b.g_hat).collect();
    let w: Vec<f64> = out.iter().map(|b| 1.0 / (b.g_se * b.g_se)).collect();
    for (b, iso) in out.iter_mut().zip(pava(&g, &w)) {
        b.g_iso = iso;
    }
    let max_violation = out.iter().map(|b| (b.g_hat - b.g_iso).abs()).fold(0.0, f64::max);
    let max_violation_ratio = out.iter().map(|b| (b.g_hat - b.g_iso).abs() / (3.0 * b.g_se)).fold(0.0, f64::max);
    let worst_margin = out.iter().map(|b| b.mills_rhs - b.f_hat).fold(f64::INFINITY, f64::min);
    let worst_ratio = out
        .iter()
        .map(|b| (b.f_hat - b.mills_rhs) / (3.0 * (b.f_se + b.mills_rhs_se)))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(DensityDiagnostics {
        bins: out,
        monotonicity: MonotonicityReport {
            k,
            m_draws: m,
            q_lo,
            q_hi,
            max_violation,
            max_violation_ratio,
            pass: max_violation_ratio <= 1.0,
        },
        mills: MillsReport { k, m_draws: m, worst_margin, worst_ratio, pass: worst_ratio <= 1.0 },
    })
}

/// Checks that the randomized statistic's density over the normal density is
/// nondecreasing, up to Monte Carlo noise.
pub fn gtilde_monotonicity_check(
    sampler: &GaussianSampler,
    k: usize,
    m: usize,
    bins: usize,
) -> Result<MonotonicityReport> {
    Ok(density_diagnostics(sampler, k, m, bins)?.monotonicity)
}

/// Checks the density bound `f̃(y) ≤ M(y) P(max(X) ≥ y)` bin by bin.
pub fn density_mills_check(sampler: &GaussianSampler, k: usize, m: usize, bins: usize) -> Result<MillsReport> {
    Ok(density_diagnostics(sampler, k, m, bins)?.mills)
}
