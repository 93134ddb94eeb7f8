//! Acceptance suite. Runs as a plain binary (no libtest harness) so that it
//! prints exactly one PASS/FAIL line per criterion; exits nonzero if any
//! criterion fails.
//!
//! Criteria 1, 3, 4, 7 and 8 are read off one report run of the acceptance
//! scenario set; criterion 10 reruns that set with a different worker count.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use gaussorder::anticonc::{estimate_sup_interval_prob, estimate_w_min_var, nazarov_bound};
use gaussorder::config::{Kind, RunConfig, ScenarioSpec, Task};
use gaussorder::gauss::{build_covariance, Family, GaussianSampler};
use gaussorder::order_stats::{brute_force_astar, k_tilde_max};
use gaussorder::report::{run, ReportBundle, RunOptions, ANTICONC_FILE, DIAGNOSTICS_FILE, KFWER_FILE};
use gaussorder::testing::{
    bootstrap_statistics, compute_test_statistics, stepdown_kfwer, CriticalValueOracle, DataMatrix,
};
use gaussorder::verify::verify_reports;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SEED: u64 = 20_240_601;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- oracles -------------------------------------------------------------

fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// ∫_a^b φ by composite Simpson.
fn normal_mass(a: f64, b: f64) -> f64 {
    let n = 2000;
    let h = (b - a) / n as f64;
    let mut s = phi(a) + phi(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * phi(a + i as f64 * h);
    }
    s * h / 3.0
}

/// k-th largest of `set` within `row`.
fn kth_largest(row: &[f64], set: &[usize], k: usize) -> f64 {
    let mut v: Vec<f64> = set.iter().map(|&j| row[j]).collect();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v[k - 1]
}

/// The ⌈(1-α)B⌉-th smallest of the per-replicate k-th maxima over `set`.
fn bootstrap_quantile(rows: &[Vec<f64>], set: &[usize], k: usize, alpha: f64) -> f64 {
    let mut m: Vec<f64> = rows.iter().map(|r| kth_largest(r, set, k)).collect();
    m.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let b = rows.len();
    let mut rank = b;
    while rank > 1 && (rank - 1) as f64 >= (1.0 - alpha) * b as f64 - 1e-9 {
        rank -= 1;
    }
    m[rank - 1]
}

/// Plain max-T step-down: reject every active hypothesis whose statistic
/// exceeds the bootstrap quantile of the max over the active set; repeat.
fn max_t_stepdown(t: &[f64], rows: &[Vec<f64>], alpha: f64) -> Vec<usize> {
    let p = t.len();
    let mut active: Vec<usize> = (0..p).collect();
    loop {
        if active.is_empty() {
            break;
        }
        let c = bootstrap_quantile(rows, &active, 1, alpha);
        let before = active.len();
        active.retain(|&j| t[j] <= c);
        if active.len() == before {
            break;
        }
    }
    (0..p).filter(|j| !active.contains(j)).collect()
}

// ---- the acceptance scenario set ------------------------------------------

fn spec(kind: Kind, family: Family, rho: Option<f64>, p: usize, k: usize) -> ScenarioSpec {
    ScenarioSpec { kind: Some(kind), family: Some(family), rho, p: Some(p), k: Some(k), ..Default::default() }
}

fn acceptance_config() -> RunConfig {
    let mut scenarios = Vec::new();
    let families: [(Family, Option<f64>, &str); 5] = [
        (Family::Identity, None, "id"),
        (Family::Equicorrelated, Some(0.5), "eq0.5"),
        (Family::Equicorrelated, Some(0.9), "eq0.9"),
        (Family::Equicorrelated, Some(1.0), "eq1.0"),
        (Family::Ar1, Some(0.7), "ar0.7"),
    ];
    for &(fam, rho, tag) in &families {
        for p in [2usize, 8, 64] {
            for k in [1usize, 2, 5].into_iter().filter(|&k| k <= p) {
                for eps in [0.01, 0.1] {
                    scenarios.push(ScenarioSpec {
                        id: Some(format!("grid-{tag}-p{p}-k{k}-e{eps}")),
                        epsilon: Some(eps),
                        n: Some(200_000),
                        ..spec(Kind::Anticonc, fam, rho, p, k)
                    });
                }
            }
        }
    }
    for (fam, rho, p, tag) in [(Family::Identity, None, 4, "id4"), (Family::Ar1, Some(0.7), 8, "ar8")] {
        for k in [1usize, 2, 4] {
            scenarios.push(ScenarioSpec {
                id: Some(format!("coupling-{tag}-k{k}")),
                n: Some(100_000),
                ..spec(Kind::Coupling, fam, rho, p, k)
            });
        }
    }
    for (fam, rho, tag) in [(Family::Identity, None, "id8"), (Family::Equicorrelated, Some(0.9), "eq0.9")] {
        for k in [2usize, 3] {
            scenarios.push(ScenarioSpec {
                id: Some(format!("density-{tag}-k{k}")),
                n: Some(1_000_000),
                bins: Some(30),
                ..spec(Kind::Density, fam, rho, 8, k)
            });
        }
    }
    for (fam, rho, tag) in [(Family::Equicorrelated, Some(0.5), "eq0.5"), (Family::Identity, None, "id10")] {
        scenarios.push(ScenarioSpec {
            id: Some(format!("kfwer-{tag}")),
            n: Some(100),
            b: Some(500),
            n_sim: Some(2000),
            alpha: Some(0.1),
            mu: Some(vec![0.0; 10]),
            ..spec(Kind::Kfwer, fam, rho, 10, 2)
        });
    }
    RunConfig { seed: SEED, out_dir: None, workers: None, scenarios }
}

struct Runs {
    bundle: ReportBundle,
    dir_a: tempfile::TempDir,
    dir_b: tempfile::TempDir,
    workers: (usize, usize),
}

fn run_all() -> Runs {
    let cfg = acceptance_config();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let workers = (1, 4);
    let bundle = run(&cfg, &RunOptions { out_dir: Some(dir_a.path().into()), seed: None, workers: Some(workers.0) })
        .expect("acceptance run");
    run(&cfg, &RunOptions { out_dir: Some(dir_b.path().into()), seed: None, workers: Some(workers.1) })
        .expect("acceptance rerun");
    Runs { bundle, dir_a, dir_b, workers }
}

fn no_scenario_errors(bundle: &ReportBundle, prefix: &str) -> Result<(), String> {
    for o in bundle.outcomes.iter().filter(|o| o.id.starts_with(prefix)) {
        if let Err(e) = &o.result {
            return Err(format!("{}: {e}", o.id));
        }
    }
    Ok(())
}

// ---- criteria ------------------------------------------------------------

fn c1_domination(runs: &Runs) -> Outcome {
    no_scenario_errors(&runs.bundle, "grid-")?;
    let rows: Vec<_> = runs.bundle.anticonc_rows().filter(|r| r.scenario_id.starts_with("grid-")).collect();
    ensure(rows.len() == 80, || format!("expected 80 grid rows, got {}", rows.len()))?;
    let mut worst = f64::NEG_INFINITY;
    for r in &rows {
        let ek = 2.0 * r.epsilon * r.k as f64;
        let bound = ek * (1.0 + r.e_max_norm_hat);
        ensure((bound - r.bound_theorem1).abs() <= 1e-12 * bound, || {
            format!("{}: bound column {} != 2εk(1+E) = {bound}", r.scenario_id, r.bound_theorem1)
        })?;
        let slack = 3.0 * (r.sup_se + ek * r.e_max_norm_se);
        worst = worst.max((r.sup_hat - bound) / slack.max(f64::MIN_POSITIVE));
        ensure(r.sup_hat <= bound + slack, || {
            format!("{}: sup_hat {} > bound {bound} + {slack}", r.scenario_id, r.sup_hat)
        })?;
        ensure(r.pass, || format!("{}: pass column false", r.scenario_id))?;
    }
    let v = verify_reports(runs.dir_a.path()).map_err(|e| e.to_string())?;
    ensure(v.pass(), || format!("verifier findings: {:?}", v.findings))?;
    Ok(format!("80 grid cells dominated; max (sup_hat - bound)/tolerance = {worst:.3}; verifier clean"))
}

fn c2_univariate() -> Outcome {
    let oracle = normal_mass(-0.05, 0.05);
    ensure((oracle - 0.039878).abs() < 5e-7, || format!("oracle {oracle} disagrees with 0.039878"))?;
    let model = build_covariance(Family::Identity, 1, &[]).map_err(|e| e.to_string())?;
    let s = GaussianSampler::new(model, SEED).map_err(|e| e.to_string())?;
    let est = estimate_sup_interval_prob(&s, 1, 0.1, None, 1_000_000).map_err(|e| e.to_string())?;
    let z = (est.sup_hat - oracle) / est.se;
    ensure(z.abs() <= 3.0, || format!("sup_hat {} vs {oracle}: {z:.2} SE", est.sup_hat))?;
    Ok(format!("sup_hat {:.6} (SE {:.2e}), oracle {oracle:.6}, z = {z:.2}", est.sup_hat, est.se))
}

fn c3_coupling(runs: &Runs) -> Outcome {
    no_scenario_errors(&runs.bundle, "coupling-")?;
    let mut n = 0;
    let mut notes = Vec::new();
    for d in runs.bundle.diagnostic_rows().filter(|d| d.scenario_id.starts_with("coupling-")) {
        let k: usize = d.scenario_id.rsplit("-k").next().unwrap().parse().unwrap();
        if k == 1 {
            ensure(d.estimate == 1.0, || format!("{}: k = 1 rate {}", d.scenario_id, d.estimate))?;
        } else {
            let z = (d.estimate - 1.0 / k as f64) / d.se;
            ensure(z.abs() <= 3.0, || format!("{}: rate {} is {z:.2} SE from 1/{k}", d.scenario_id, d.estimate))?;
            notes.push(format!("{}={:.4}", d.scenario_id.trim_start_matches("coupling-"), d.estimate));
        }
        ensure(d.pass, || format!("{}: pass column false", d.scenario_id))?;
        n += 1;
    }
    ensure(n == 6, || format!("expected 6 coupling rows, got {n}"))?;
    Ok(format!("k=1 rates exactly 1; {}", notes.join(" ")))
}

fn c4_density(runs: &Runs) -> Outcome {
    no_scenario_errors(&runs.bundle, "density-")?;
    let mut n = 0;
    let mut worst = (0.0f64, f64::NEG_INFINITY);
    for o in runs.bundle.outcomes.iter().filter(|o| o.id.starts_with("density-")) {
        let est = &o.result.as_ref().unwrap().estimates;
        let bins = est["bins"].as_array().ok_or("no bins")?;
        ensure(bins.len() >= 30, || format!("{}: {} bins", o.id, bins.len()))?;
        let get = |b: &serde_json::Value, key: &str| b[key].as_f64().unwrap();
        let mut prev = f64::NEG_INFINITY;
        for b in bins {
            let (g, se, iso) = (get(b, "g_hat"), get(b, "g_se"), get(b, "g_iso"));
            ensure(iso >= prev - 1e-12, || format!("{}: isotonic fit decreases", o.id))?;
            prev = iso;
            ensure((g - iso).abs() <= 3.0 * se, || format!("{}: |G - iso| = {} > 3 SE", o.id, (g - iso).abs()))?;
            worst.0 = worst.0.max((g - iso).abs() / (3.0 * se));
            let (f, fse, rhs, rse) = (get(b, "f_hat"), get(b, "f_se"), get(b, "mills_rhs"), get(b, "mills_rhs_se"));
            ensure(f <= rhs + 3.0 * (fse + rse), || format!("{}: density {f} above Mills bound {rhs}", o.id))?;
            worst.1 = worst.1.max((f - rhs) / (3.0 * (fse + rse)));
            // G = f/φ on the bin, so f ≈ G · (normal mass / width)
            let mass = normal_mass(get(b, "lo"), get(b, "hi")) / (get(b, "hi") - get(b, "lo"));
            ensure((f - g * mass).abs() <= 1e-9 * f.max(1e-300) + 1e-12, || format!("{}: f != G φ", o.id))?;
        }
        n += 1;
    }
    ensure(n == 4, || format!("expected 4 density scenarios, got {n}"))?;
    for d in runs.bundle.diagnostic_rows().filter(|d| d.scenario_id.starts_with("density-")) {
        ensure(d.pass, || format!("{} {}: pass column false", d.scenario_id, d.check))?;
    }
    Ok(format!("4 scenarios; worst |G-iso|/3SE = {:.3}, worst Mills margin ratio = {:.3}", worst.0, worst.1))
}

fn c5_subset_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 5);
    let mut violations = 0;
    let mut ties = 0;
    for i in 0..10_000 {
        let p = rng.random_range(1..=8usize);
        let k = rng.random_range(1..=p.min(3));
        let mut x: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        // a quarter of the vectors get exact ties, as from a rank-deficient Σ
        if i % 4 == 0 && p > 1 {
            for j in 1..p {
                if rng.random_bool(0.5) {
                    x[j] = x[rng.random_range(0..j)];
                }
            }
        }
        let draw = k_tilde_max(&x, k, &mut rng).map_err(|e| e.to_string())?;
        let family = brute_force_astar(&x, k).map_err(|e| e.to_string())?;
        ties += usize::from(family.len() > 1);
        if !family.contains(&draw.selection.a_star) || !draw.selection.a_star.contains(&draw.selection.iota_star) {
            violations += 1;
        }
    }
    ensure(violations == 0, || format!("{violations} violations"))?;
    Ok(format!("10000 vectors ({ties} with several maximizing subsets), 0 violations"))
}

fn c6_nazarov() -> Outcome {
    let oracle = 1.0 - 1.0 / std::f64::consts::PI;
    let model = build_covariance(Family::Identity, 2, &[]).map_err(|e| e.to_string())?;
    let s = GaussianSampler::new(model, SEED).map_err(|e| e.to_string())?;
    let w = estimate_w_min_var(&s, 2, 1_000_000).map_err(|e| e.to_string())?;
    let z = (w.estimate.value - oracle) / w.estimate.se;
    ensure(z.abs() <= 3.0, || format!("min var W {} vs {oracle}: {z:.2} SE", w.estimate.value))?;
    let nb = nazarov_bound(0.1, 5, 1, 1.0).map_err(|e| e.to_string())?;
    let by_hand = 0.1 * ((2.0 * 5f64.ln()).sqrt() + 2.0);
    ensure((nb - 0.379412).abs() <= 1e-6, || format!("nazarov_bound = {nb}"))?;
    ensure((nb - by_hand).abs() <= 1e-14, || format!("nazarov_bound {nb} != {by_hand}"))?;
    Ok(format!("min var W {:.6} (oracle {oracle:.6}, z = {z:.2}); nazarov_bound {nb:.7}", w.estimate.value))
}

fn c7_kfwer(runs: &Runs) -> Outcome {
    no_scenario_errors(&runs.bundle, "kfwer-")?;
    let rows: Vec<_> = runs.bundle.kfwer_rows().collect();
    ensure(rows.len() == 2, || format!("expected 2 kfwer rows, got {}", rows.len()))?;
    let mut notes = Vec::new();
    for r in rows {
        let tol = 0.1 + 3.0 * (0.1f64 * 0.9 / 2000.0).sqrt();
        ensure(r.kfwer_hat <= 0.13 && r.kfwer_hat <= tol, || {
            format!("{}: k-FWER {} above {tol}", r.scenario_id, r.kfwer_hat)
        })?;
        ensure(r.pass, || format!("{}: pass column false", r.scenario_id))?;
        notes.push(format!("{}={:.4}", r.scenario_id, r.kfwer_hat));
    }
    Ok(notes.join(" "))
}

fn c8_monotonicity(runs: &Runs) -> Outcome {
    no_scenario_errors(&runs.bundle, "kfwer-")?;
    let rows: Vec<_> = runs.bundle.diagnostic_rows().filter(|d| d.check == "critical_value_monotonicity").collect();
    ensure(rows.len() == 2, || format!("expected 2 monotonicity rows, got {}", rows.len()))?;
    for d in &rows {
        ensure(d.statistic == 0.0 && d.pass, || format!("{}: {} violations", d.scenario_id, d.statistic))?;
    }
    // second route: fresh nested pairs, critical values recomputed here
    let scenarios = acceptance_config().validate().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 8);
    let mut checked = 0;
    for sc in scenarios.iter().filter(|s| s.kind == Kind::Kfwer) {
        let Task::Kfwer(ks) = &sc.task else { unreachable!() };
        let sampler = GaussianSampler::new(sc.model.clone(), sc.seed).map_err(|e| e.to_string())?;
        let (_, oracle) = ks.oracle(&sampler, 0).map_err(|e| e.to_string())?;
        let mut oracle: CriticalValueOracle = oracle;
        let rows: Vec<Vec<f64>> = oracle.bootstrap().rows().map(<[f64]>::to_vec).collect();
        let p = sc.model.p();
        for _ in 0..100 {
            let mut idx: Vec<usize> = (0..p).collect();
            for i in (1..p).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            let big = rng.random_range(ks.k + 1..=p);
            let small = rng.random_range(ks.k..big);
            let kset = &idx[..big];
            let iset = &idx[..small];
            let (ck, ci) =
                (bootstrap_quantile(&rows, kset, ks.k, ks.alpha), bootstrap_quantile(&rows, iset, ks.k, ks.alpha));
            use gaussorder::testing::CriticalValues;
            let lib_k = oracle.critical_value(kset).map_err(|e| e.to_string())?;
            let lib_i = oracle.critical_value(iset).map_err(|e| e.to_string())?;
            ensure(ck == lib_k && ci == lib_i, || format!("{}: library critical value differs", sc.id))?;
            ensure(ck >= ci, || format!("{}: ĉ_K {ck} < ĉ_I {ci}", sc.id))?;
            checked += 1;
        }
    }
    Ok(format!("report: 0 violations in 2x100 pairs; recomputed {checked} further pairs, 0 violations"))
}

fn c9_k1_reduction() -> Outcome {
    let model = build_covariance(Family::Equicorrelated, 5, &[0.3]).map_err(|e| e.to_string())?;
    let sampler = GaussianSampler::new(model, SEED).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 9);
    let mut total = 0;
    for d in 0..100 {
        let mu: Vec<f64> =
            (0..5).map(|_| if rng.random_bool(0.4) { rng.random_range(0.1..0.6) } else { 0.0 }).collect();
        let data = DataMatrix::gaussian(&sampler, &mu, 50, &mut rng).map_err(|e| e.to_string())?;
        let t = compute_test_statistics(&data);
        let boot = bootstrap_statistics(&data, 500, SEED + d).map_err(|e| e.to_string())?;
        let rows: Vec<Vec<f64>> = boot.rows().map(<[f64]>::to_vec).collect();
        let expected = max_t_stepdown(&t.t, &rows, 0.1);
        let mut oracle = CriticalValueOracle::new(boot, 0.1, 1).map_err(|e| e.to_string())?;
        let got = stepdown_kfwer(&t, &mut oracle).map_err(|e| e.to_string())?.rejected;
        ensure(got == expected, || format!("dataset {d}: step-down {got:?} vs max-T {expected:?}"))?;
        total += got.len();
    }
    Ok(format!("100 datasets identical ({total} rejections in total)"))
}

fn c10_determinism(runs: &Runs) -> Outcome {
    for f in [ANTICONC_FILE, KFWER_FILE, DIAGNOSTICS_FILE] {
        let read = |d: &Path| std::fs::read(d.join(f)).map_err(|e| e.to_string());
        let (a, b) = (read(runs.dir_a.path())?, read(runs.dir_b.path())?);
        ensure(!a.is_empty() && a == b, || format!("{f} differs between worker counts"))?;
    }
    Ok(format!(
        "{} scenarios; CSVs byte-identical with {} and {} workers",
        runs.bundle.outcomes.len(),
        runs.workers.0,
        runs.workers.1
    ))
}

fn main() {
    let start = Instant::now();
    let runs = run_all();
    let run_secs = start.elapsed().as_secs_f64();
    type Criterion<'a> = (u32, &'static str, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        (1, "bound domination grid", Box::new(|| c1_domination(&runs))),
        (2, "univariate exact check", Box::new(c2_univariate)),
        (3, "coupling rate", Box::new(|| c3_coupling(&runs))),
        (4, "density diagnostics", Box::new(|| c4_density(&runs))),
        (5, "subset-oracle equivalence", Box::new(c5_subset_oracle)),
        (6, "Nazarov inputs", Box::new(c6_nazarov)),
        (7, "k-FWER control", Box::new(|| c7_kfwer(&runs))),
        (8, "critical value monotonicity", Box::new(|| c8_monotonicity(&runs))),
        (9, "k = 1 max-T reduction", Box::new(c9_k1_reduction)),
        (10, "worker-count determinism", Box::new(|| c10_determinism(&runs))),
    ];
    let mut failed = BTreeMap::new();
    for (n, name, f) in &criteria {
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or(e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(msg) => println!("criterion {n:>2} PASS  {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                println!("criterion {n:>2} FAIL  {name}: {msg} [{secs:.1}s]");
                failed.insert(*n, msg);
            }
        }
    }
    println!(
        "acceptance: {}/{} passed (report runs {run_secs:.1}s, total {:.1}s)",
        criteria.len() - failed.len(),
        criteria.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
