//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use onlinepm::backtest::{run_backtest, run_benchmark, sharpe_ratio, Benchmark, HyperParams};
use onlinepm::blend::mixed_estimate;
use onlinepm::evaluate::{cscv_pbo, deflated_sr, probabilistic_sr};
use onlinepm::filters::{RlsInit, RlsState};
use onlinepm::portfolio::{constrained_mv, decompose, mv_closed_form, ConstraintSet};
use onlinepm::synth::{generate, GeneratorSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;
use statrs::distribution::{Binomial, DiscreteCDF};

type Outcome = Result<String, String>;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * normal(rng))
}

/// Covariance with eigenvalues spread over two orders of magnitude.
fn random_pd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let q = random_matrix(rng, n, n).qr().q();
    let eig = DVector::from_fn(n, |i, _| 1e-4 * (1.0 + 99.0 * i as f64 / n.max(2) as f64));
    let mut s = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    s = (&s + s.transpose()) * 0.5;
    s
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let t0 = Instant::now();
    let res = f();
    let took = t0.elapsed();
    match (res, limit) {
        (Ok(m), Some(l)) if took > l => Err(format!("{m}; took {took:.2?}, limit {l:?}")),
        (Ok(m), _) => Ok(format!("{m}; {took:.2?}")),
        (Err(m), _) => Err(format!("{m}; {took:.2?}")),
    }
}

fn filter_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(1..=10);
        let t = rng.random_range(3 * d.max(4)..=500);
        let x = random_matrix(&mut rng, t, d);
        let beta = random_vector(&mut rng, d, 1.0);
        let y = &x * &beta + random_vector(&mut rng, t, 0.5);
        let mut rls = RlsState::new(d, 1.0, RlsInit::Exact).map_err(|e| e.to_string())?;
        for i in 0..t {
            rls.update(&x.row(i).transpose(), y[i]).map_err(|e| e.to_string())?;
        }
        let ols = x.clone().svd(true, true).solve(&y, 1e-14)?;
        worst = worst.max((rls.coef() - ols).amax());
    }
    if worst <= 1e-8 {
        Ok(format!("max |rls - ols| = {worst:.2e}"))
    } else {
        Err(format!("max |rls - ols| = {worst:.2e} > 1e-8"))
    }
}

fn optimizer_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst_kkt, mut worst_gap): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let n = rng.random_range(2..=50);
        let sigma = random_pd(&mut rng, n);
        let mu = random_vector(&mut rng, n, 0.002);
        let gamma = rng.random_range(1.0..20.0);
        let w = mv_closed_form(&mu, &sigma, gamma).map_err(|e| e.to_string())?;
        // stationarity γΣw - μ = ν1 and the budget
        let r = &sigma * &w * gamma - &mu;
        let nu = r.mean();
        let stat = r.map(|v| v - nu).amax() / mu.amax().max(1e-12);
        worst_kkt = worst_kkt.max(stat).max((w.sum() - 1.0).abs());
        let slack = ConstraintSet::leverage(2.0 * w.lp_norm(1) + 1.0).map_err(|e| e.to_string())?;
        let c = constrained_mv(&mu, &sigma, gamma, &slack, None).map_err(|e| e.to_string())?;
        worst_gap = worst_gap.max((&c.weights - &w).amax());
    }
    if worst_kkt <= 1e-6 && worst_gap <= 1e-6 {
        Ok(format!("KKT residual {worst_kkt:.2e}, solver gap {worst_gap:.2e}"))
    } else {
        Err(format!("KKT residual {worst_kkt:.2e}, solver gap {worst_gap:.2e} (tol 1e-6)"))
    }
}

fn decomposition_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=50);
        let sigma = random_pd(&mut rng, n);
        let pi = random_vector(&mut rng, n, 0.002);
        let alpha = random_vector(&mut rng, n, 0.001);
        let gamma = rng.random_range(1.0..20.0);
        let d = decompose(&pi, &alpha, &sigma, &sigma, gamma, gamma).map_err(|e| e.to_string())?;
        let w = mv_closed_form(&(&pi + &alpha), &sigma, gamma).map_err(|e| e.to_string())?;
        worst = worst.max((&d.total - &w).amax());
    }
    if worst <= 1e-10 {
        Ok(format!("max gap {worst:.2e}"))
    } else {
        Err(format!("max gap {worst:.2e} > 1e-10"))
    }
}

fn black_litterman_limits() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut worst_ratio, mut worst_mid): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let n = rng.random_range(1..=30);
        let pi = random_vector(&mut rng, n, 0.002);
        let mu = random_vector(&mut rng, n, 0.002);
        let omega = random_pd(&mut rng, n);
        let omega_diag = DMatrix::from_diagonal(&omega.diagonal());
        for om in [&omega, &omega_diag] {
            let far = mixed_estimate(&pi, &mu, om, &(om * 1e6)).map_err(|e| e.to_string())?;
            worst_ratio = worst_ratio.max(far.alpha_bl.norm() / (&mu - &pi).norm());
            let mid = mixed_estimate(&pi, &mu, om, om).map_err(|e| e.to_string())?;
            worst_mid = worst_mid.max((mid.mu_bl - (&pi + &mu) * 0.5).amax());
        }
    }
    if worst_ratio < 1e-4 && worst_mid <= 1e-10 {
        Ok(format!("max ‖α‖/‖μ-π‖ {worst_ratio:.2e}, midpoint gap {worst_mid:.2e}"))
    } else {
        Err(format!("max ‖α‖/‖μ-π‖ {worst_ratio:.2e} (< 1e-4), midpoint gap {worst_mid:.2e} (<= 1e-10)"))
    }
}

fn no_look_ahead() -> Outcome {
    let (panel, factors, _) = generate(&GeneratorSpec::new(30, 300, 505)).map_err(|e| e.to_string())?;
    let hp = HyperParams {
        universe_size: 30,
        ..HyperParams::default()
    };
    let start = hp.burn_in + 1;
    let full = run_backtest(&panel, &factors, &hp, start, 300).map_err(|e| e.to_string())?;
    for cut in [start + 2, 120, 200, 299] {
        let part = run_backtest(&panel.truncated(cut), &factors.truncated(cut), &hp, start, cut)
            .map_err(|e| e.to_string())?;
        let k = part.len();
        let same_returns = part.period_returns.iter().zip(&full.period_returns).all(|(a, b)| a.to_bits() == b.to_bits());
        let same_weights = (0..k).all(|r| {
            part.weights.row(r).iter().zip(full.weights.row(r).iter()).all(|(a, b)| a.to_bits() == b.to_bits())
        });
        if !(same_returns && same_weights) {
            return Err(format!("prefix of length {k} differs"));
        }
    }
    Ok("prefixes at 4 cut points bitwise identical".into())
}

/// One-sided sign-test p-value P(X >= wins) under Binomial(n, 1/2).
fn sign_test(wins: u64, n: u64) -> f64 {
    let b = Binomial::new(0.5, n).expect("valid binomial");
    if wins == 0 {
        1.0
    } else {
        b.sf(wins - 1)
    }
}

fn alpha_capture() -> Outcome {
    let hp = HyperParams {
        universe_size: 50,
        ..HyperParams::default()
    };
    let start = hp.burn_in + 1;
    let (mut wins, mut sum_a, mut sum_n) = (0, 0.0, 0.0);
    for seed in 0..50 {
        let (panel, factors, _) = generate(&GeneratorSpec::new(50, 500, 6000 + seed)).map_err(|e| e.to_string())?;
        let algo = run_backtest(&panel, &factors, &hp, start, 500).map_err(|e| e.to_string())?;
        let nd = run_benchmark(&panel, Benchmark::Nd, 50, start, 500).map_err(|e| e.to_string())?;
        let a = sharpe_ratio(&algo.period_returns).map_err(|e| e.to_string())?;
        let b = sharpe_ratio(&nd.period_returns).map_err(|e| e.to_string())?;
        wins += u64::from(a > b);
        sum_a += a;
        sum_n += b;
    }
    let p = sign_test(wins, 50);
    let msg = format!("algo mean SR {:.4} vs ND {:.4}, wins {wins}/50, sign-test p {p:.2e}", sum_a / 50.0, sum_n / 50.0);
    if sum_a > sum_n && p < 0.05 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn cscv_null() -> Outcome {
    let mut total = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let m = random_matrix(&mut rng, 1000, 100) * 0.01;
        total += cscv_pbo(&m, 16).map_err(|e| e.to_string())?.pbo;
    }
    let mean = total / 20.0;
    let mut rng = ChaCha8Rng::seed_from_u64(7100);
    let noise = random_vector(&mut rng, 1000, 0.01);
    let dominated = DMatrix::from_fn(1000, 100, |t, j| noise[t] + 1e-4 * j as f64);
    let dom = cscv_pbo(&dominated, 16).map_err(|e| e.to_string())?.pbo;
    let msg = format!("null mean PBO {mean:.4}, dominated PBO {dom}");
    if (0.4..=0.6).contains(&mean) && dom == 0.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn dsr_reductions() -> Outcome {
    let e = |e: onlinepm::Error| e.to_string();
    let (sr, t, skew, kurt) = (0.12, 520, -0.4, 5.0);
    let psr = probabilistic_sr(sr, 0.0, t, skew, kurt).map_err(e)?;
    let one = deflated_sr(sr, t, skew, kurt, 1, 0.0004).map_err(e)?;
    let many = deflated_sr(sr, t, skew, kurt, 100, 0.0004).map_err(e)?;
    let msg = format!("PSR {psr:.6}, DSR(1) {one:.6}, DSR(100) {many:.6}");
    if (one - psr).abs() <= 1e-12 && many < psr {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn single_backtest_throughput() -> Outcome {
    let (panel, factors, _) = generate(&GeneratorSpec::new(100, 1200, 808)).map_err(|e| e.to_string())?;
    let hp = HyperParams::default();
    let t0 = Instant::now();
    let r = run_backtest(&panel, &factors, &hp, hp.burn_in + 1, 1200).map_err(|e| e.to_string())?;
    let took = t0.elapsed();
    let msg = format!("{} periods in {took:.2?}", r.len());
    if took < Duration::from_secs(2) {
        Ok(msg)
    } else {
        Err(format!("{msg} (limit 2s)"))
    }
}

fn onlinepm(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_onlinepm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

const GRID_CONFIG: &str = r#"
seed = 909
[synthetic]
n_assets = 100
n_periods = 1200
[calibration.grid]
active_models = ["full"]
"#;

fn grid_throughput(dir: &Path) -> Outcome {
    std::fs::write(dir.join("grid.toml"), GRID_CONFIG).map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    onlinepm(&["calibrate", "--config", "grid.toml", "--out", "grid", "--parallel", "8"], dir)?;
    let took = t0.elapsed();
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("grid/report.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let n = report["n_trials"].as_u64().unwrap_or(0) + report["n_failed"].as_u64().unwrap_or(0);
    let msg = format!("{n} configs over 100 x 1200 in {took:.1?}");
    if n == 2700 && took < Duration::from_secs(30 * 60) {
        Ok(msg)
    } else {
        Err(format!("{msg} (need 2700 in < 30 min)"))
    }
}

const SHAPE_CONFIG: &str = r#"
seed = 1010
[synthetic]
n_assets = 40
n_periods = 400
[hyper]
universe_size = 40
[calibration.grid]
active_models = ["full", "momentum"]
lambda_s = [0.97, 0.99]
lambda_a = [0.95]
kappa_s = [0.0, 0.5]
kappa_a = [0.5]
gamma_s = [5.0, 20.0]
gamma_a = [1.0, 10.0]
"#;

/// Checks `value` against a JSON-Schema subset: type, required, properties,
/// items, minItems, maxItems, minimum, maximum.
fn check_schema(value: &Value, schema: &Value, at: &str) -> Result<(), String> {
    if let Some(types) = schema.get("type") {
        let allowed: Vec<&str> = match types {
            Value::String(s) => vec![s.as_str()],
            Value::Array(a) => a.iter().filter_map(Value::as_str).collect(),
            _ => return Err(format!("{at}: bad schema type")),
        };
        let ok = allowed.iter().any(|t| match *t {
            "object" => value.is_object(),
            "array" => value.is_array(),
            "string" => value.is_string(),
            "number" => value.is_number(),
            "integer" => value.is_u64() || value.is_i64(),
            "boolean" => value.is_boolean(),
            "null" => value.is_null(),
            _ => false,
        });
        if !ok {
            return Err(format!("{at}: expected {allowed:?}, found {value}"));
        }
    }
    if let (Some(x), Some(lo)) = (value.as_f64(), schema.get("minimum").and_then(Value::as_f64)) {
        if x < lo {
            return Err(format!("{at}: {x} below {lo}"));
        }
    }
    if let (Some(x), Some(hi)) = (value.as_f64(), schema.get("maximum").and_then(Value::as_f64)) {
        if x > hi {
            return Err(format!("{at}: {x} above {hi}"));
        }
    }
    if let Some(obj) = value.as_object() {
        for key in schema.get("required").and_then(Value::as_array).into_iter().flatten() {
            let key = key.as_str().unwrap_or_default();
            if !obj.contains_key(key) {
                return Err(format!("{at}: missing field {key}"));
            }
        }
        if let Some(props) = schema.get("properties").and_then(Value::as_object) {
            for (k, sub) in props {
                if let Some(v) = obj.get(k) {
                    check_schema(v, sub, &format!("{at}.{k}"))?;
                }
            }
        }
    }
    if let Some(arr) = value.as_array() {
        if let Some(n) = schema.get("minItems").and_then(Value::as_u64) {
            if (arr.len() as u64) < n {
                return Err(format!("{at}: {} items, need {n}", arr.len()));
            }
        }
        if let Some(n) = schema.get("maxItems").and_then(Value::as_u64) {
            if (arr.len() as u64) > n {
                return Err(format!("{at}: {} items, at most {n}", arr.len()));
            }
        }
        if let Some(items) = schema.get("items") {
            for (i, v) in arr.iter().enumerate() {
                check_schema(v, items, &format!("{at}[{i}]"))?;
            }
        }
    }
    Ok(())
}

fn report_shape(dir: &Path) -> Outcome {
    std::fs::write(dir.join("shape.toml"), SHAPE_CONFIG).map_err(|e| e.to_string())?;
    onlinepm(&["calibrate", "--config", "shape.toml", "--out", "shape"], dir)?;
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("shape/report.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let schema: Value = serde_json::from_str(include_str!("report.schema.json")).map_err(|e| e.to_string())?;
    check_schema(&report, &schema, "report")?;
    let table = std::fs::read_to_string(dir.join("shape/table.csv")).map_err(|e| e.to_string())?;
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    let expected = ["is,algo", "is,nd", "is,cap", "oos,algo", "oos,nd", "oos,cap"];
    if rows.first() != Some(&"segment,strategy,sr,psr,dsr,turnover")
        || rows.len() != 7
        || !rows[1..].iter().zip(expected).all(|(r, e)| r.starts_with(e))
    {
        return Err(format!("table.csv rows {rows:?}"));
    }
    Ok(format!(
        "report.json matches schema; PBO {:.3}, {} trials",
        report["pbo"]["value"].as_f64().unwrap_or(f64::NAN),
        report["n_trials"]
    ))
}

fn main() {
    // Let `cargo test -- <filter>` runs for other targets skip this suite quietly.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let dir = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome>)> = vec![
        ("filter-oracle equivalence", Box::new(|| timed(Some(Duration::from_secs(5)), filter_oracle))),
        ("optimizer correctness", Box::new(|| timed(Some(Duration::from_secs(30)), optimizer_correctness))),
        ("decomposition identity", Box::new(|| timed(None, decomposition_identity))),
        ("black-litterman limits", Box::new(|| timed(None, black_litterman_limits))),
        ("no look-ahead", Box::new(|| timed(None, no_look_ahead))),
        ("alpha capture", Box::new(|| timed(Some(Duration::from_secs(600)), alpha_capture))),
        ("cscv null calibration", Box::new(|| timed(None, cscv_null))),
        ("dsr/psr reductions", Box::new(|| timed(None, dsr_reductions))),
        ("full-scale throughput: single backtest", Box::new(|| timed(None, single_backtest_throughput))),
        ("full-scale throughput: 2700-config grid", Box::new(|| timed(None, || grid_throughput(dir.path())))),
        ("report-shape reproduction", Box::new(|| timed(None, || report_shape(dir.path())))),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(msg) => println!("PASS  {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {name}: {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
