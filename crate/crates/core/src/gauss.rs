//! Unit-diagonal covariance models, PSD-tolerant factorization, and seeded
//! sampling of correlated Gaussian vectors.

use std::fmt;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::exec::{self, domain};
use crate::{Error, Result};

/// Smallest eigenvalue still accepted as positive semidefinite.
pub const PSD_TOL: f64 = -1e-10;

/// Relative Frobenius tolerance on `L Lᵀ - Σ`.
pub const RECONSTRUCTION_TOL: f64 = 1e-8;

const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Identity,
    Equicorrelated,
    Ar1,
    Block,
    Explicit,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Identity => "identity",
            Family::Equicorrelated => "equicorrelated",
            Family::Ar1 => "ar1",
            Family::Block => "block",
            Family::Explicit => "explicit",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Serializable description of a covariance model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub family: Family,
    pub p: usize,
    pub params: Vec<f64>,
}

impl ModelMeta {
    /// Compact label such as `ar1(rho=0.7)` or `block(size=4,rho=0.5)`.
    pub fn params_label(&self) -> String {
        match self.family {
            Family::Identity => String::new(),
            Family::Equicorrelated | Family::Ar1 => format!("rho={}", self.params[0]),
            Family::Block => format!("size={};rho={}", self.params[0], self.params[1]),
            Family::Explicit => "matrix".to_string(),
        }
    }

    pub fn label(&self) -> String {
        match self.family {
            Family::Identity => format!("identity(p={})", self.p),
            _ => format!("{}(p={};{})", self.family, self.p, self.params_label()),
        }
    }
}

/// A `p × p` symmetric PSD covariance matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceModel {
    p: usize,
    entries: Vec<f64>,
    meta: ModelMeta,
}

impl CovarianceModel {
    pub fn identity(p: usize) -> Result<Self> {
        build_covariance(Family::Identity, p, &[])
    }

    pub fn equicorrelated(p: usize, rho: f64) -> Result<Self> {
        build_covariance(Family::Equicorrelated, p, &[rho])
    }

    pub fn ar1(p: usize, rho: f64) -> Result<Self> {
        build_covariance(Family::Ar1, p, &[rho])
    }

    pub fn block(p: usize, block_size: usize, rho: f64) -> Result<Self> {
        build_covariance(Family::Block, p, &[block_size as f64, rho])
    }

    /// Row-major `p × p` matrix supplied by the caller.
    pub fn explicit(p: usize, entries: &[f64]) -> Result<Self> {
        build_covariance(Family::Explicit, p, entries)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.p + j]
    }

    /// Row-major entries.
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn family(&self) -> Family {
        self.meta.family
    }

    /// True when two distinct components are perfectly correlated, i.e. the
    /// model produces exact ties with probability one.
    pub fn has_perfect_correlation(&self) -> bool {
        (0..self.p).any(|i| (0..i).any(|j| self.get(i, j) == 1.0))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(self.p, &self.entries)
    }
}

fn min_eigenvalue(p: usize, entries: &[f64]) -> f64 {
    let m = DMatrix::from_row_slice(p, p, entries);
    m.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

fn check_rho(rho: f64, lower: f64, lower_open: bool, upper_open: bool) -> Result<()> {
    let low_ok = if lower_open { rho > lower } else { rho >= lower };
    let high_ok = if upper_open { rho < 1.0 } else { rho <= 1.0 };
    if !rho.is_finite() || !low_ok || !high_ok {
        let (lb, ub) = (if lower_open { "(" } else { "[" }, if upper_open { ")" } else { "]" });
        return Err(Error::param("rho", format!("{rho} outside {lb}{lower}, 1{ub}")));
    }
    Ok(())
}

fn single_param(family: Family, params: &[f64], want: usize) -> Result<()> {
    if params.len() != want {
        return Err(Error::param("params", format!("{family} takes {want} parameter(s), got {}", params.len())));
    }
    Ok(())
}

/// Builds a covariance model from a named family.
///
/// `params` is empty for `identity`, `[rho]` for `equicorrelated` and `ar1`,
/// `[block_size, rho]` for `block`, and the row-major `p × p` matrix for
/// `explicit`.
pub fn build_covariance(family: Family, p: usize, params: &[f64]) -> Result<CovarianceModel> {
    if p == 0 {
        return Err(Error::param("p", "dimension must be at least 1"));
    }
    let mut entries = vec![0.0; p * p];
    let set = |entries: &mut Vec<f64>, f: &dyn Fn(usize, usize) -> f64| {
        for i in 0..p {
            for j in 0..p {
                entries[i * p + j] = if i == j { 1.0 } else { f(i.min(j), i.max(j)) };
            }
        }
    };
    match family {
        Family::Identity => {
            single_param(family, params, 0)?;
            set(&mut entries, &|_, _| 0.0);
        }
        Family::Equicorrelated => {
            single_param(family, params, 1)?;
            let rho = params[0];
            let lower = if p > 1 { -1.0 / (p as f64 - 1.0) } else { -1.0 };
            check_rho(rho, lower, false, false)?;
            set(&mut entries, &|_, _| rho);
        }
        Family::Ar1 => {
            single_param(family, params, 1)?;
            let rho = params[0];
            check_rho(rho, -1.0, true, true)?;
            set(&mut entries, &|i, j| rho.powi((j - i) as i32));
        }
        Family::Block => {
            single_param(family, params, 2)?;
            let bs = params[0];
            if !(bs >= 1.0 && bs.fract() == 0.0) || !p.is_multiple_of(bs as usize) {
                return Err(Error::param("block_size", format!("{bs} must be a positive divisor of p = {p}")));
            }
            let bs = bs as usize;
            let rho = params[1];
            let lower = if bs > 1 { -1.0 / (bs as f64 - 1.0) } else { -1.0 };
            check_rho(rho, lower, false, false)?;
            set(&mut entries, &|i, j| if i / bs == j / bs { rho } else { 0.0 });
        }
        Family::Explicit => {
            if params.len() != p * p {
                return Err(Error::param("matrix", format!("expected {} entries, got {}", p * p, params.len())));
            }
            if let Some(i) = params.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(i));
            }
            for i in 0..p {
                let d = params[i * p + i];
                if d != 1.0 {
                    return Err(Error::NonUnitDiagonal { index: i, value: d });
                }
                for j in 0..i {
                    if params[i * p + j] != params[j * p + i] {
                        return Err(Error::NotSymmetric { row: i, col: j });
                    }
                }
            }
            entries.copy_from_slice(params);
        }
    }
    let min_eig = min_eigenvalue(p, &entries);
    if min_eig < PSD_TOL {
        return Err(Error::NotPsd { min_eigenvalue: min_eig });
    }
    let stored = if family == Family::Explicit { Vec::new() } else { params.to_vec() };
    Ok(CovarianceModel { p, entries, meta: ModelMeta { family, p, params: stored } })
}

/// A `p × rank` factor `L` with `L Lᵀ ≈ Σ`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    p: usize,
    rank: usize,
    entries: Vec<f64>,
}

impl Factor {
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.entries[i * self.rank + c]
    }

    /// `L Lᵀ` as a row-major `p × p` matrix.
    pub fn gram(&self) -> Vec<f64> {
        let (p, r) = (self.p, self.rank);
        let mut out = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..p {
                out[i * p + j] = (0..r).map(|c| self.get(i, c) * self.get(j, c)).sum();
            }
        }
        out
    }

    /// `out = L z`
    #[inline]
    pub fn apply(&self, z: &[f64], out: &mut [f64]) {
        for (row, o) in self.entries.chunks_exact(self.rank.max(1)).zip(out.iter_mut()) {
            *o = row.iter().zip(z).map(|(a, b)| a * b).sum();
        }
        if self.rank == 0 {
            out.fill(0.0);
        }
    }

    fn relative_residual(&self, sigma: &[f64]) -> f64 {
        let g = self.gram();
        let diff: f64 = g.iter().zip(sigma).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = sigma.iter().map(|v| v * v).sum::<f64>().sqrt();
        diff / norm.max(1.0)
    }
}

/// Diagonally pivoted Cholesky; trailing pivots below tolerance are zeroed,
/// so perfectly correlated components get bit-identical factor rows.
fn pivoted_cholesky(p: usize, sigma: &[f64]) -> Factor {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut resid: Vec<f64> = (0..p).map(|i| sigma[i * p + i]).collect();
    let mut done = vec![false; p];
    let scale = resid.iter().copied().fold(1.0, f64::max);
    for _ in 0..p {
        let Some(j) = (0..p).filter(|&i| !done[i]).fold(None, |best: Option<usize>, i| match best {
            Some(b) if resid[b] >= resid[i] => Some(b),
            _ => Some(i),
        }) else {
            break;
        };
        if resid[j] <= PIVOT_TOL * scale {
            break;
        }
        let piv = resid[j].sqrt();
        let mut col = vec![0.0; p];
        col[j] = piv;
        for i in 0..p {
            if done[i] || i == j {
                continue;
            }
            let dot: f64 = cols.iter().map(|c| c[i] * c[j]).sum();
            col[i] = (sigma[i * p + j] - dot) / piv;
            resid[i] -= col[i] * col[i];
        }
        done[j] = true;
        cols.push(col);
    }
    let rank = cols.len();
    let mut entries = vec![0.0; p * rank];
    for (c, col) in cols.iter().enumerate() {
        for i in 0..p {
            entries[i * rank + c] = col[i];
        }
    }
    Factor { p, rank, entries }
}

/// Symmetric square root `V diag(sqrt(λ)) ` with eigenvalues in
/// `[PSD_TOL, 0]` clamped to zero.
fn eigen_factor(p: usize, sigma: &[f64]) -> Result<Factor> {
    let eig = DMatrix::from_row_slice(p, p, sigma).symmetric_eigen();
    let mut entries = vec![0.0; p * p];
    for c in 0..p {
        let lambda = eig.eigenvalues[c];
        if lambda < PSD_TOL {
            return Err(Error::NotPsd { min_eigenvalue: lambda });
        }
        let s = lambda.max(0.0).sqrt();
        for i in 0..p {
            entries[i * p + c] = eig.eigenvectors[(i, c)] * s;
        }
    }
    Ok(Factor { p, rank: p, entries })
}

/// Computes `L` with `L Lᵀ = Σ` within [`RECONSTRUCTION_TOL`].
///
/// Pivoted Cholesky is tried first; an eigendecomposition square root is the
/// fallback for numerically awkward inputs.
pub fn factorize(model: &CovarianceModel) -> Result<Factor> {
    let (p, sigma) = (model.p, &model.entries[..]);
    let chol = pivoted_cholesky(p, sigma);
    let residual = chol.relative_residual(sigma);
    if residual <= RECONSTRUCTION_TOL {
        return Ok(chol);
    }
    let eig = eigen_factor(p, sigma)?;
    let residual = eig.relative_residual(sigma);
    if residual <= RECONSTRUCTION_TOL {
        Ok(eig)
    } else {
        Err(Error::Factorization { residual })
    }
}

/// Seeded sampler of `X ~ N(0, Σ)`.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    model: CovarianceModel,
    factor: Factor,
    seed: u64,
}

/// Per-block scratch space handed to draw callbacks.
pub struct DrawCtx<'a> {
    pub rng: &'a mut ChaCha8Rng,
    /// Index of the draw within the whole run.
    pub index: usize,
}

impl GaussianSampler {
    pub fn new(model: CovarianceModel, seed: u64) -> Result<Self> {
        let factor = factorize(&model)?;
        Ok(GaussianSampler { model, factor, seed })
    }

    pub fn model(&self) -> &CovarianceModel {
        &self.model
    }

    pub fn factor(&self) -> &Factor {
        &self.factor
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn p(&self) -> usize {
        self.model.p
    }

    /// Same model, different seed.
    pub fn reseeded(&self, seed: u64) -> Self {
        GaussianSampler { seed, ..self.clone() }
    }

    /// Draws one vector into `out`, using `z` (length `rank`) as scratch.
    #[inline]
    pub fn draw_into(&self, rng: &mut ChaCha8Rng, z: &mut [f64], out: &mut [f64]) {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        self.factor.apply(z, out);
    }

    /// Draws `n` vectors in blocks on stream `domain`. `init` creates a
    /// per-block accumulator and `step` folds each draw into it. Returns the
    /// accumulators in block order.
    pub fn fold_draws<T, I, F>(&self, n: usize, domain: u64, init: I, step: F) -> Vec<T>
    where
        T: Send,
        I: Fn() -> T + Sync + Send,
        F: Fn(&mut T, &[f64], &mut DrawCtx<'_>) + Sync + Send,
    {
        let (p, rank) = (self.model.p, self.factor.rank);
        exec::map_blocks(n, |b, start, len| {
            let mut rng = exec::stream_rng(self.seed, domain, b as u64);
            let mut z = vec![0.0; rank];
            let mut x = vec![0.0; p];
            let mut acc = init();
            for i in 0..len {
                self.draw_into(&mut rng, &mut z, &mut x);
                let mut ctx = DrawCtx { rng: &mut rng, index: start + i };
                step(&mut acc, &x, &mut ctx);
            }
            acc
        })
    }

    /// Materializes `n` draws.
    pub fn sample(&self, n: usize) -> Result<SampleBatch> {
        if n == 0 {
            return Err(Error::param("n", "at least one draw is required"));
        }
        let parts = self.fold_draws(n, domain::SAMPLE, Vec::new, |acc: &mut Vec<f64>, x, _| acc.extend_from_slice(x));
        Ok(SampleBatch { draws: parts.concat(), n_draws: n, p: self.model.p, model: self.model.meta.clone() })
    }
}

/// `N × p` matrix of draws, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub draws: Vec<f64>,
    pub n_draws: usize,
    pub p: usize,
    pub model: ModelMeta,
}

impl SampleBatch {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.draws[i * self.p..(i + 1) * self.p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.draws.chunks_exact(self.p)
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.p];
        for r in self.rows() {
            for (a, v) in m.iter_mut().zip(r) {
                *a += v;
            }
        }
        m.iter().map(|s| s / self.n_draws as f64).collect()
    }

    /// Sample covariance (divisor `N`, means subtracted), row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let p = self.p;
        let mean = self.column_means();
        let mut c = vec![0.0; p * p];
        for r in self.rows() {
            for i in 0..p {
                let di = r[i] - mean[i];
                for j in i..p {
                    c[i * p + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..p {
            for j in i..p {
                let v = c[i * p + j] / self.n_draws as f64;
                c[i * p + j] = v;
                c[j * p + i] = v;
            }
        }
        c
    }
}
