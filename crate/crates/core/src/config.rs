//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//! workers = 4
//!
//! [[scenario]]
//! id = "iid-4"
//! kind = "anticonc"
//! family = "identity"
//! p = 4
//! k = 2
//! epsilon = 0.1
//! n = 100000
//! ```
//!
//! `n` is the number of Monte Carlo draws for every kind except `kfwer`,
//! where it is the sample size of each simulated dataset.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anticonc::{Grid, SUBSET_CAP};
use crate::exec::derive_seed;
use crate::gauss::{build_covariance, CovarianceModel, Family};
use crate::order_stats::n_subsets;
use crate::testing::{BoundSettings, KfwerScenario};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Anticonc,
    Coupling,
    Density,
    Nazarov,
    Kfwer,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Anticonc => "anticonc",
            Kind::Coupling => "coupling",
            Kind::Density => "density",
            Kind::Nazarov => "nazarov",
            Kind::Kfwer => "kfwer",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One `[[scenario]]` table as written in the file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub kind: Option<Kind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<Family>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_sim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound_draws: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nazarov: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(rename = "scenario", default)]
    pub scenarios: Vec<ScenarioSpec>,
}

/// Default bin count of density scenarios.
pub const DEFAULT_BINS: usize = 40;

#[derive(Debug, Clone)]
pub enum Task {
    Anticonc { epsilon: f64, n: usize, grid: Grid, nazarov: bool },
    Coupling { n: usize },
    Density { m: usize, bins: usize },
    Nazarov { epsilon: f64, n: usize },
    Kfwer(KfwerScenario),
}

/// A validated scenario, ready to run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub id: String,
    pub kind: Kind,
    pub model: CovarianceModel,
    pub k: usize,
    pub seed: u64,
    pub task: Task,
}

/// Stable 64-bit FNV-1a hash of a scenario id.
fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

struct Ctx<'a> {
    id: &'a str,
    spec: &'a ScenarioSpec,
}

impl Ctx<'_> {
    fn err(&self, key: &str, msg: impl fmt::Display) -> Error {
        Error::Config(format!("scenario `{}`: key `{key}`: {msg}", self.id))
    }

    fn need<T: Copy>(&self, key: &str, v: Option<T>) -> Result<T> {
        v.ok_or_else(|| self.err(key, "missing required key"))
    }

    /// Rejects keys that have no meaning for this kind.
    fn only(&self, allowed: &[&str]) -> Result<()> {
        let s = self.spec;
        let present = [
            ("rho", s.rho.is_some()),
            ("block_size", s.block_size.is_some()),
            ("matrix", s.matrix.is_some()),
            ("epsilon", s.epsilon.is_some()),
            ("b", s.b.is_some()),
            ("n_sim", s.n_sim.is_some()),
            ("alpha", s.alpha.is_some()),
            ("mu", s.mu.is_some()),
            ("bound_draws", s.bound_draws.is_some()),
            ("delta_target", s.delta_target.is_some()),
            ("bins", s.bins.is_some()),
            ("y_min", s.y_min.is_some()),
            ("y_max", s.y_max.is_some()),
            ("step", s.step.is_some()),
            ("nazarov", s.nazarov.is_some()),
        ];
        let model_keys = ["rho", "block_size", "matrix"];
        for (key, set) in present {
            if set && !allowed.contains(&key) && !model_keys.contains(&key) {
                let kind = s.kind.map(Kind::name).unwrap_or("?");
                return Err(self.err(key, format!("not applicable to kind `{kind}`")));
            }
        }
        Ok(())
    }

    fn model(&self) -> Result<CovarianceModel> {
        let s = self.spec;
        let family = self.need("family", s.family)?;
        let p = self.need("p", s.p)?;
        let expect = |key: &str, wanted: bool, got: bool| -> Result<()> {
            match (wanted, got) {
                (true, false) => Err(self.err(key, format!("required by family `{family}`"))),
                (false, true) => Err(self.err(key, format!("not used by family `{family}`"))),
                _ => Ok(()),
            }
        };
        let uses_rho = matches!(family, Family::Equicorrelated | Family::Ar1 | Family::Block);
        expect("rho", uses_rho, s.rho.is_some())?;
        expect("block_size", family == Family::Block, s.block_size.is_some())?;
        expect("matrix", family == Family::Explicit, s.matrix.is_some())?;
        let params: Vec<f64> = match family {
            Family::Identity => vec![],
            Family::Equicorrelated | Family::Ar1 => vec![s.rho.unwrap()],
            Family::Block => vec![s.block_size.unwrap() as f64, s.rho.unwrap()],
            Family::Explicit => {
                let m = s.matrix.as_ref().unwrap();
                if m.len() != p || m.iter().any(|r| r.len() != p) {
                    return Err(self.err("matrix", format!("must be {p} × {p}")));
                }
                m.concat()
            }
        };
        build_covariance(family, p, &params).map_err(|e| self.err("family", e))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Scenario ids, with `<kind>-<position>` for scenarios without one.
    pub fn ids(&self) -> Vec<String> {
        self.scenarios
            .iter()
            .enumerate()
            .map(|(i, s)| match &s.id {
                Some(id) => id.clone(),
                None => format!("{}-{}", s.kind.map(Kind::name).unwrap_or("scenario"), i + 1),
            })
            .collect()
    }

    /// Checks every scenario before anything runs.
    pub fn validate(&self) -> Result<Vec<Scenario>> {
        if self.scenarios.is_empty() {
            return Err(Error::Config("no [[scenario]] tables".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("key `workers`: must be at least 1".into()));
        }
        let ids = self.ids();
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Config(format!("duplicate scenario id `{id}`")));
            }
        }
        self.scenarios.iter().zip(&ids).map(|(spec, id)| self.validate_one(spec, id)).collect()
    }

    fn validate_one(&self, spec: &ScenarioSpec, id: &str) -> Result<Scenario> {
        let cx = Ctx { id, spec };
        let kind = cx.need("kind", spec.kind)?;
        let model = cx.model()?;
        let p = model.p();
        let k = cx.need("k", spec.k)?;
        if k == 0 || k > p {
            return Err(cx.err("k", format!("must satisfy 1 ≤ k ≤ p = {p}, got {k}")));
        }
        let n = cx.need("n", spec.n)?;
        let seed = spec.seed.unwrap_or_else(|| derive_seed(self.seed, id_hash(id)));
        let epsilon = |cx: &Ctx| -> Result<f64> {
            let e = cx.need("epsilon", spec.epsilon)?;
            if !(e > 0.0 && e.is_finite()) {
                return Err(cx.err("epsilon", format!("must be positive, got {e}")));
            }
            Ok(e)
        };
        let min_n = |min: usize| -> Result<()> {
            if n < min {
                return Err(cx.err("n", format!("must be at least {min}, got {n}")));
            }
            Ok(())
        };
        let task = match kind {
            Kind::Anticonc => {
                cx.only(&["epsilon", "y_min", "y_max", "step", "nazarov"])?;
                let eps = epsilon(&cx)?;
                min_n(10_000)?;
                let d = Grid::default_for(p, eps);
                let grid = Grid {
                    y_min: spec.y_min.unwrap_or(d.y_min),
                    y_max: spec.y_max.unwrap_or(d.y_max),
                    step: spec.step.unwrap_or(d.step),
                };
                grid.validate(p, eps).map_err(|e| cx.err("step/y_min/y_max", e))?;
                let nazarov = spec.nazarov.unwrap_or(true) && n_subsets(p, k) <= SUBSET_CAP;
                Task::Anticonc { epsilon: eps, n, grid, nazarov }
            }
            Kind::Coupling => {
                cx.only(&[])?;
                min_n(1000)?;
                Task::Coupling { n }
            }
            Kind::Density => {
                cx.only(&["bins"])?;
                min_n(100_000)?;
                let bins = spec.bins.unwrap_or(DEFAULT_BINS);
                if bins < 2 {
                    return Err(cx.err("bins", "must be at least 2"));
                }
                Task::Density { m: n, bins }
            }
            Kind::Nazarov => {
                cx.only(&["epsilon"])?;
                let eps = epsilon(&cx)?;
                min_n(10_000)?;
                let c = n_subsets(p, k);
                if c > SUBSET_CAP {
                    return Err(cx.err("k", format!("C(p, k) = {c} exceeds the subset cap {SUBSET_CAP}")));
                }
                Task::Nazarov { epsilon: eps, n }
            }
            Kind::Kfwer => {
                cx.only(&["b", "n_sim", "alpha", "mu", "bound_draws", "delta_target"])?;
                let mu = spec.mu.clone().unwrap_or_else(|| vec![0.0; p]);
                if mu.len() != p {
                    return Err(cx.err("mu", format!("length {} does not match p = {p}", mu.len())));
                }
                let bound = match spec.bound_draws {
                    None | Some(0) => None,
                    Some(d) => Some(BoundSettings {
                        direct_draws: d,
                        delta_target: spec.delta_target.unwrap_or(BoundSettings::default().delta_target),
                    }),
                };
                if spec.delta_target.is_some() && bound.is_none() {
                    return Err(cx.err("delta_target", "requires `bound_draws`"));
                }
                let sc = KfwerScenario {
                    mu,
                    model: model.clone(),
                    n,
                    k,
                    alpha: cx.need("alpha", spec.alpha)?,
                    b: cx.need("b", spec.b)?,
                    n_sim: cx.need("n_sim", spec.n_sim)?,
                    seed,
                    bound,
                };
                sc.validate().map_err(|e| cx.err("kfwer", e))?;
                Task::Kfwer(sc)
            }
        };
        Ok(Scenario { id: id.to_string(), kind, model, k, seed, task })
    }
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<(RunConfig, Vec<Scenario>)> {
    let text = std::fs::read_to_string(path)?;
    let config = RunConfig::from_toml(&text)?;
    let scenarios = config.validate()?;
    Ok((config, scenarios))
}

pub fn write_config(config: &RunConfig, path: &Path) -> Result<()> {
    std::fs::write(path, config.to_toml()?)?;
    Ok(())
}
