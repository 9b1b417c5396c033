use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use onlinepm::backtest::{
    performance_stats, run_backtest, run_benchmark, write_components, write_equity_curves, write_weights,
    Benchmark, BacktestWarning, PerformanceStats,
};
use onlinepm::data::{
    build_factor_portfolios, compute_momentum, load_panel, write_panel_csv, AssetPanel, FactorSeries,
};
use onlinepm::evaluate::{
    calibrate, combinations, cscv_pbo, deflated_sr, haircut_sr, probabilistic_sr, read_return_matrix,
    return_moments, write_logits_csv, write_report_json, write_table_csv, write_trial_matrix_csv,
    write_trials_csv, ReturnMoments,
};
use onlinepm::synth::{generate, GeneratorSpec};
use onlinepm::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, SyntheticConfig};
use crate::{Cli, CliError, Command};

const DEFAULT_OUT: &str = "out";

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Ingest => ingest(cli),
        Command::Generate => cmd_generate(cli),
        Command::Backtest => backtest(cli),
        Command::Calibrate => cmd_calibrate(cli),
        Command::Evaluate {
            returns,
            n_trials,
            var_trial_sr,
            benchmark_sr,
        } => evaluate(cli, returns, *n_trials, *var_trial_sr, *benchmark_sr),
        Command::Pbo { returns, blocks } => pbo(cli, returns, *blocks),
    }
}

struct Prepared {
    cfg: RunConfig,
    out: PathBuf,
    digest: String,
}

fn sha256_file(path: &Path) -> Result<String, Error> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digest_of(value: &impl Serialize) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("serializable")))
}

/// Digest over everything that determines results: the config without its
/// output and threading settings, and the contents (not locations) of input files.
fn run_digest(cfg: &RunConfig) -> Result<String, Error> {
    let mut keyed = cfg.clone();
    keyed.out = None;
    keyed.parallel = None;
    let mut inputs = Vec::new();
    if let Some(d) = keyed.data.as_mut() {
        for p in [&mut d.prices, &mut d.characteristics, &mut d.rf] {
            inputs.push(sha256_file(p)?);
            *p = PathBuf::new();
        }
        if let Some(f) = d.factors.as_mut() {
            inputs.push(sha256_file(f)?);
            *f = PathBuf::new();
        }
    }
    Ok(digest_of(&(keyed, inputs)))
}

fn init_pool(parallel: Option<usize>) {
    let threads = parallel.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    // a second initialisation in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
}

fn prepare(cli: &Cli, name: &str, config_required: bool, needs_grid: bool) -> Result<Prepared, CliError> {
    let (mut cfg, path) = match &cli.config {
        Some(p) => (RunConfig::load(p)?, p.clone()),
        None if !config_required => (
            RunConfig {
                synthetic: Some(SyntheticConfig::default()),
                ..RunConfig::default()
            },
            PathBuf::from("<defaults>"),
        ),
        None => return Err(CliError::Usage(format!("`{name}` needs --config <FILE>"))),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.parallel.is_some() {
        cfg.parallel = cli.parallel;
    }
    cfg.validate(&path, needs_grid)?;
    let out = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    init_pool(cfg.parallel);
    let digest = run_digest(&cfg)?;
    Ok(Prepared { cfg, out, digest })
}

fn load_market(cfg: &RunConfig) -> Result<(AssetPanel, FactorSeries), Error> {
    if let Some(s) = &cfg.synthetic {
        let (panel, factors, _) = generate(&s.generator(cfg.seed))?;
        return Ok((panel, factors));
    }
    let d = cfg.data.as_ref().expect("validated config has a data source");
    let panel = compute_momentum(&load_panel(&d.prices, &d.characteristics, &d.rf)?)?;
    let factors = match &d.factors {
        Some(path) => {
            let (names, m) = read_return_matrix(path)?;
            if m.nrows() != panel.n_periods() {
                return Err(Error::Dimension(format!(
                    "{}: {} factor rows for {} panel periods",
                    path.display(),
                    m.nrows(),
                    panel.n_periods()
                )));
            }
            FactorSeries::from_matrix(names, m)?
        }
        None => build_factor_portfolios(&panel, &d.factor_construction)?,
    };
    Ok((panel, factors))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Prepends a `# config_digest=` comment line to a CSV written elsewhere.
fn stamp(path: &Path, digest: &str) -> Result<(), Error> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let body = fs::read(path).map_err(io)?;
    let mut f = fs::File::create(path).map_err(io)?;
    writeln!(f, "# config_digest={digest}").map_err(io)?;
    f.write_all(&body).map_err(io)
}

fn write_factors(path: &Path, digest: &str, panel: &AssetPanel, factors: &FactorSeries) -> Result<(), Error> {
    let mut text = format!("# config_digest={digest}\ndate,{}\n", factors.names().join(","));
    let m = factors.matrix();
    for (t, d) in panel.dates().iter().enumerate() {
        let row: Vec<String> = m.row(t).iter().map(|v| v.to_string()).collect();
        text.push_str(&format!("{},{}\n", d.format("%Y-%m-%d"), row.join(",")));
    }
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Serialize)]
struct PanelSummary<'a> {
    config_digest: &'a str,
    n_periods: usize,
    n_assets: usize,
    first_date: NaiveDate,
    last_date: NaiveDate,
    characteristics: &'a [String],
    factors: &'a [String],
    available_cells: usize,
}

fn summarize<'a>(digest: &'a str, panel: &'a AssetPanel, factors: &'a FactorSeries) -> PanelSummary<'a> {
    let available_cells = (0..panel.n_periods())
        .map(|t| panel.available_row(t).iter().filter(|&&a| a).count())
        .sum();
    PanelSummary {
        config_digest: digest,
        n_periods: panel.n_periods(),
        n_assets: panel.n_assets(),
        first_date: panel.dates()[0],
        last_date: *panel.dates().last().expect("panel has periods"),
        characteristics: panel.characteristic_names(),
        factors: factors.names(),
        available_cells,
    }
}

fn ingest(cli: &Cli) -> Result<(), CliError> {
    let p = prepare(cli, "ingest", true, false)?;
    let (panel, factors) = load_market(&p.cfg)?;
    create_dir(&p.out)?;
    write_factors(&p.out.join("factors.csv"), &p.digest, &panel, &factors)?;
    write_json(&p.out.join("panel.json"), &summarize(&p.digest, &panel, &factors))?;
    println!(
        "ingested {} assets x {} periods ({} .. {})",
        panel.n_assets(),
        panel.n_periods(),
        panel.dates()[0],
        panel.dates()[panel.n_periods() - 1]
    );
    Ok(())
}

#[derive(Serialize)]
struct GeneratorManifest<'a> {
    config_digest: &'a str,
    spec: &'a GeneratorSpec,
    files: Vec<String>,
}

fn cmd_generate(cli: &Cli) -> Result<(), CliError> {
    let p = prepare(cli, "generate", false, false)?;
    let s = p.cfg.synthetic.as_ref().ok_or_else(|| CliError::Usage("`generate` needs a [synthetic] section".into()))?;
    let spec = s.generator(p.cfg.seed);
    let (panel, factors, _) = generate(&spec)?;
    create_dir(&p.out)?;
    let mut files = Vec::new();
    for path in write_panel_csv(&panel, &p.out)? {
        stamp(&path, &p.digest)?;
        files.push(path.file_name().unwrap().to_string_lossy().into_owned());
    }
    write_factors(&p.out.join("factors.csv"), &p.digest, &panel, &factors)?;
    files.push("factors.csv".into());
    write_json(
        &p.out.join("generator.json"),
        &GeneratorManifest {
            config_digest: &p.digest,
            spec: &spec,
            files,
        },
    )?;
    println!("generated {} assets x {} periods in {}", spec.n_assets, spec.n_periods, p.out.display());
    Ok(())
}

#[derive(Serialize)]
struct SeriesStats {
    label: String,
    stats: PerformanceStats,
    final_wealth: f64,
}

#[derive(Serialize)]
struct BacktestStats<'a> {
    config_digest: &'a str,
    hyper_digest: String,
    first_date: NaiveDate,
    last_date: NaiveDate,
    n_periods: usize,
    series: Vec<SeriesStats>,
    warnings: &'a [BacktestWarning],
}

fn backtest(cli: &Cli) -> Result<(), CliError> {
    let p = prepare(cli, "backtest", true, false)?;
    let (panel, factors) = load_market(&p.cfg)?;
    let hp = &p.cfg.hyper;
    let (start, end) = (hp.burn_in + 1, panel.n_periods());
    let mut algo = run_backtest(&panel, &factors, hp, start, end)?;
    let benches = [Benchmark::Nd, Benchmark::Cap, Benchmark::Rfr]
        .into_iter()
        .map(|b| run_benchmark(&panel, b, hp.universe_size, start, end))
        .collect::<Result<Vec<_>, _>>()?;
    let hyper_digest = std::mem::replace(&mut algo.config_digest, p.digest.clone());

    create_dir(&p.out)?;
    let all: Vec<_> = std::iter::once(&algo).chain(benches.iter()).collect();
    write_equity_curves(&p.out.join("equity_curve.csv"), &p.digest, &all)?;
    write_components(&p.out.join("components.csv"), &algo)?;
    write_weights(&p.out.join("weights.csv"), &algo)?;
    let series = all
        .iter()
        .map(|r| {
            Ok(SeriesStats {
                label: r.label.clone(),
                stats: performance_stats(r)?,
                final_wealth: *r.equity_curve.last().expect("equity curve starts at inception"),
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    for s in &series {
        println!(
            "{:<5} SR {:>8.4}  ann.ret {:>8.4}  ann.vol {:>7.4}  MDD {:>6.4}  TO {:>6.4}",
            s.label, s.stats.sharpe, s.stats.ann_return, s.stats.ann_vol, s.stats.max_drawdown, s.stats.mean_turnover
        );
    }
    write_json(
        &p.out.join("stats.json"),
        &BacktestStats {
            config_digest: &p.digest,
            hyper_digest,
            first_date: algo.dates[0],
            last_date: *algo.dates.last().expect("non-empty window"),
            n_periods: algo.len(),
            series,
            warnings: &algo.warnings,
        },
    )?;
    Ok(())
}

fn cmd_calibrate(cli: &Cli) -> Result<(), CliError> {
    let p = prepare(cli, "calibrate", true, true)?;
    let (panel, factors) = load_market(&p.cfg)?;
    let spec = p.cfg.calibration_spec();
    let mut out = calibrate(&panel, &factors, &spec)?;
    out.report.config_digest = p.digest.clone();
    let r = &out.report;

    create_dir(&p.out)?;
    write_report_json(&p.out.join("report.json"), r)?;
    write_trials_csv(&p.out.join("trials.csv"), &p.digest, &out.grid)?;
    write_logits_csv(&p.out.join("logits.csv"), &p.digest, &r.logits)?;
    write_table_csv(&p.out.join("table.csv"), r)?;
    write_trial_matrix_csv(&p.out.join("trial_returns.csv"), &p.digest, &out.grid.in_sample)?;
    write_trial_matrix_csv(&p.out.join("trial_returns_oos.csv"), &p.digest, &out.grid.out_of_sample)?;

    println!("trials {} ({} failed), selected {}", r.n_trials, r.n_failed, r.selected_digest);
    for (seg, row) in [("IS", &r.table.is), ("OOS", &r.table.oos)] {
        for (name, c) in [("algo", &row.algo), ("nd", &row.nd), ("cap", &row.cap)] {
            println!("{seg:<3} {name:<4} SR {:>8.4}  PSR {:>6.4}  TO {:>6.4}", c.sr, c.psr, c.turnover);
        }
    }
    println!("DSR {:.4}  HSR {:.4}  PBO {:.4}{}", r.dsr, r.hsr, r.pbo.value, if r.pbo.degenerate { " (degenerate)" } else { "" });
    if let Some(g) = &r.regression {
        println!("SR_OOS = {:.4} + {:.4} * SR_IS (R2 {:.4})", g.intercept, g.slope, g.r2);
    }
    Ok(())
}

#[derive(Serialize)]
struct SeriesEvaluation {
    name: String,
    #[serde(flatten)]
    moments: ReturnMoments,
    psr: f64,
    dsr: f64,
    hsr: f64,
}

#[derive(Serialize)]
struct Evaluation<'a> {
    config_digest: &'a str,
    n_trials: usize,
    var_trial_sr: f64,
    benchmark_sr: f64,
    series: Vec<SeriesEvaluation>,
}

fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

fn evaluate(
    cli: &Cli,
    returns: &Path,
    n_trials: Option<usize>,
    var_trial_sr: Option<f64>,
    benchmark_sr: f64,
) -> Result<(), CliError> {
    if n_trials == Some(0) || var_trial_sr.is_some_and(|v| !(v >= 0.0)) || !benchmark_sr.is_finite() {
        return Err(CliError::Usage("n_trials must be positive, var_trial_sr non-negative".into()));
    }
    let digest = digest_of(&(sha256_file(returns)?, n_trials, var_trial_sr, benchmark_sr));
    let (names, m) = read_return_matrix(returns)?;
    let moments = (0..m.ncols())
        .map(|j| return_moments(&m.column(j).iter().copied().collect::<Vec<_>>()))
        .collect::<Result<Vec<_>, _>>()?;
    let srs: Vec<f64> = moments.iter().map(|x| x.sr).collect();
    let n_trials = n_trials.unwrap_or(names.len());
    let var_trial_sr = var_trial_sr.unwrap_or_else(|| sample_variance(&srs));
    let series = names
        .into_iter()
        .zip(moments)
        .map(|(name, x)| {
            Ok(SeriesEvaluation {
                name,
                psr: probabilistic_sr(x.sr, benchmark_sr, x.n, x.skew, x.kurt)?,
                dsr: deflated_sr(x.sr, x.n, x.skew, x.kurt, n_trials, var_trial_sr)?,
                hsr: haircut_sr(x.sr, x.n, n_trials),
                moments: x,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    create_dir(&out)?;
    for s in &series {
        println!("{:<20} SR {:>8.4}  PSR {:>6.4}  DSR {:>6.4}  HSR {:>8.4}", s.name, s.moments.sr, s.psr, s.dsr, s.hsr);
    }
    write_json(
        &out.join("evaluate.json"),
        &Evaluation {
            config_digest: &digest,
            n_trials,
            var_trial_sr,
            benchmark_sr,
            series,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct PboReport<'a> {
    config_digest: &'a str,
    pbo: f64,
    degenerate: bool,
    blocks: usize,
    combinations: usize,
    n_trials: usize,
    n_periods: usize,
}

fn pbo(cli: &Cli, returns: &Path, blocks: usize) -> Result<(), CliError> {
    init_pool(cli.parallel);
    let digest = digest_of(&(sha256_file(returns)?, blocks));
    let (_, m) = read_return_matrix(returns)?;
    let r = cscv_pbo(&m, blocks)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    create_dir(&out)?;
    write_logits_csv(&out.join("logits.csv"), &digest, &r.logits)?;
    write_json(
        &out.join("pbo.json"),
        &PboReport {
            config_digest: &digest,
            pbo: r.pbo,
            degenerate: r.degenerate,
            blocks,
            combinations: combinations(blocks, blocks / 2).len(),
            n_trials: m.ncols(),
            n_periods: m.nrows(),
        },
    )?;
    println!("PBO {:.4}{} over {} splits", r.pbo, if r.degenerate { " (degenerate)" } else { "" }, r.logits.len());
    Ok(())
}
