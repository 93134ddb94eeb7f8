//! k-th order statistics, the randomized top-k statistic, and its
//! exhaustive subset oracle.

use std::cmp::Ordering;

use itertools::Itertools;
use rand::Rng;

use crate::exec::domain;
use crate::gauss::GaussianSampler;
use crate::{Error, Estimate, Result};

/// Largest input length accepted by [`brute_force_astar`].
pub const ORACLE_MAX_LEN: usize = 20;
/// Largest number of subsets [`brute_force_astar`] will enumerate.
pub const ORACLE_MAX_SUBSETS: f64 = 2e5;

/// `C(n, k)` as a float (exact while it fits in 53 bits).
pub fn n_subsets(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64).round()
}

fn check(x: &[f64], k: usize) -> Result<()> {
    if k == 0 || k > x.len() {
        return Err(Error::KOutOfRange { k, len: x.len() });
    }
    if let Some(i) = x.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite(i));
    }
    Ok(())
}

#[inline]
fn desc(a: &f64, b: &f64) -> Ordering {
    b.total_cmp(a)
}

/// k-th largest value of `scratch`, which is reordered.
#[inline]
fn kth_in_place(scratch: &mut [f64], k: usize) -> f64 {
    *scratch.select_nth_unstable_by(k - 1, desc).1
}

/// The k-th largest component of `x`, counting multiplicity.
pub fn k_max(x: &[f64], k: usize) -> Result<f64> {
    check(x, k)?;
    let mut s = x.to_vec();
    Ok(kth_in_place(&mut s, k))
}

/// The argmax-average set `A*` and the randomly chosen member `ι*`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKSelection {
    /// Sorted indices of `A*`.
    pub a_star: Vec<usize>,
    pub iota_star: usize,
    /// The k-th largest value of the input.
    pub kth_value: f64,
    /// Whether `A*` had to be chosen among several maximizers.
    pub tie_broken: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KTildeMaxDraw {
    pub value: f64,
    pub selection: TopKSelection,
}

/// Reusable buffers for repeated top-k selection.
#[derive(Debug, Default, Clone)]
pub struct TopKScratch {
    values: Vec<f64>,
    chosen: Vec<usize>,
    boundary: Vec<usize>,
}

impl TopKScratch {
    /// Selects `A*` into the scratch and returns `(ι*, kth value, tie_broken)`.
    ///
    /// Every size-k subset maximizing the average consists of all components
    /// strictly above the k-th largest value plus enough components equal to
    /// it, so a uniform draw among those boundary indices gives a uniform
    /// maximizer without enumerating subsets.
    pub fn select<R: Rng + ?Sized>(&mut self, x: &[f64], k: usize, rng: &mut R) -> (usize, f64, bool) {
        self.values.clear();
        self.values.extend_from_slice(x);
        let kth = kth_in_place(&mut self.values, k);
        self.chosen.clear();
        self.boundary.clear();
        for (i, &v) in x.iter().enumerate() {
            if v > kth {
                self.chosen.push(i);
            } else if v == kth {
                self.boundary.push(i);
            }
        }
        let need = k - self.chosen.len();
        let tie_broken = self.boundary.len() > need;
        if tie_broken {
            for i in 0..need {
                let j = rng.random_range(i..self.boundary.len());
                self.boundary.swap(i, j);
            }
        }
        self.chosen.extend_from_slice(&self.boundary[..need]);
        let iota = self.chosen[rng.random_range(0..k)];
        (iota, kth, tie_broken)
    }

    /// `A*` from the last [`select`](Self::select), in selection order.
    pub fn a_star(&self) -> &[usize] {
        &self.chosen
    }
}

/// The randomized statistic `X_{ι*}`: a uniform member of a uniformly chosen
/// size-k subset with maximal average.
pub fn k_tilde_max<R: Rng + ?Sized>(x: &[f64], k: usize, rng: &mut R) -> Result<KTildeMaxDraw> {
    check(x, k)?;
    let mut scratch = TopKScratch::default();
    let (iota, kth, tie_broken) = scratch.select(x, k, rng);
    let mut a_star = scratch.a_star().to_vec();
    a_star.sort_unstable();
    Ok(KTildeMaxDraw {
        value: x[iota],
        selection: TopKSelection { a_star, iota_star: iota, kth_value: kth, tie_broken },
    })
}

/// Every size-k index set maximizing the subset average, by enumeration.
///
/// Subset sums are accumulated in descending value order so that subsets
/// holding the same multiset of values compare exactly equal.
pub fn brute_force_astar(x: &[f64], k: usize) -> Result<Vec<Vec<usize>>> {
    check(x, k)?;
    let count = n_subsets(x.len(), k);
    if x.len() > ORACLE_MAX_LEN || count > ORACLE_MAX_SUBSETS {
        return Err(Error::CapExceeded { what: "brute-force A*", count, cap: ORACLE_MAX_SUBSETS });
    }
    let mut best = f64::NEG_INFINITY;
    let mut winners: Vec<Vec<usize>> = Vec::new();
    let mut vals = Vec::with_capacity(k);
    for subset in (0..x.len()).combinations(k) {
        vals.clear();
        vals.extend(subset.iter().map(|&i| x[i]));
        vals.sort_unstable_by(desc);
        let avg = vals.iter().sum::<f64>() / k as f64;
        match avg.total_cmp(&best) {
            Ordering::Greater => {
                best = avg;
                winners.clear();
                winners.push(subset);
            }
            Ordering::Equal => winners.push(subset),
            Ordering::Less => {}
        }
    }
    Ok(winners)
}

/// Fraction of draws where the randomized statistic equals the k-th order
/// statistic, with binomial standard error.
pub fn coupling_rate(sampler: &GaussianSampler, k: usize, n: usize) -> Result<Estimate> {
    if k == 0 || k > sampler.p() {
        return Err(Error::KOutOfRange { k, len: sampler.p() });
    }
    if n < 1000 {
        return Err(Error::param("n", format!("coupling needs at least 1000 draws, got {n}")));
    }
    let parts = sampler.fold_draws(
        n,
        domain::COUPLING,
        || (0u64, TopKScratch::default()),
        |(hits, scratch), x, ctx| {
            let (iota, kth, _) = scratch.select(x, k, ctx.rng);
            if x[iota] == kth {
                *hits += 1;
            }
        },
    );
    let hits: u64 = parts.iter().map(|(h, _)| h).sum();
    Ok(Estimate::proportion(hits, n as u64))
}
