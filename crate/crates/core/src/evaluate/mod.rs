//! Calibration and process-level evaluation: walk-forward validation,
//! hyper-parameter grid search, Sharpe-ratio inference and the probability
//! of backtest overfitting.
//!
//! The backtest is an online algorithm that never reads ahead, so one run
//! over the whole panel yields every fold's validation returns, the full
//! in-sample trial column and the out-of-sample tail. Selection only ever
//! looks at in-sample folds.

pub mod pbo;
pub mod stats;

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backtest::{run_benchmark, run_group, sharpe_ratio, Benchmark, BacktestResult, HyperParams};
use crate::data::{AssetPanel, FactorSeries};
use crate::error::{Error, Result};
use crate::pricing::ActiveModel;

pub use pbo::{combinations, cscv_pbo, pbo_from_scores, PboResult, DEFAULT_BLOCKS};
pub use stats::{
    deflated_sr, expected_max_sr, haircut_sr, is_oos_regression, probabilistic_sr, return_moments, Regression,
    ReturnMoments, EULER_MASCHERONI,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Range<usize>,
    pub validate: Range<usize>,
}

/// Expanding-window splits over periods `0..t`. Fold `k` trains on
/// `0..min_train + k·step` and validates on the next `step` periods, where
/// `step = (t - min_train) / n_folds`; the last fold absorbs the remainder.
pub fn walk_forward_splits(t: usize, n_folds: usize, min_train: usize) -> Result<Vec<Split>> {
    if n_folds == 0 {
        return Err(Error::invalid("walk-forward needs at least one fold"));
    }
    if t < min_train + n_folds {
        return Err(Error::invalid(format!(
            "{t} periods cannot hold {n_folds} folds after {min_train} training periods"
        )));
    }
    let step = (t - min_train) / n_folds;
    Ok((0..n_folds)
        .map(|k| {
            let lo = min_train + k * step;
            let hi = if k + 1 == n_folds { t } else { lo + step };
            Split {
                train: 0..lo,
                validate: lo..hi,
            }
        })
        .collect())
}

/// Candidate values per tuned hyper-parameter; every other setting comes
/// from `base`. Configurations enumerate model-major, then `lambda_s`,
/// `lambda_a`, `kappa_s`, `kappa_a`, `gamma_s`, `gamma_a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub base: HyperParams,
    pub active_models: Vec<ActiveModel>,
    pub lambda_s: Vec<f64>,
    pub lambda_a: Vec<f64>,
    pub kappa_s: Vec<f64>,
    pub kappa_a: Vec<f64>,
    pub gamma_s: Vec<f64>,
    pub gamma_a: Vec<f64>,
}

impl Default for GridSpec {
    /// 2700 configurations per model over the four active models.
    fn default() -> Self {
        let k = vec![0.0, 0.25, 0.5, 0.75, 1.0];
        Self {
            base: HyperParams::default(),
            active_models: ActiveModel::ALL.to_vec(),
            lambda_s: vec![0.95, 0.97, 0.99],
            lambda_a: vec![0.9, 0.95, 0.98],
            kappa_s: k.clone(),
            kappa_a: k,
            gamma_s: vec![1.0, 2.0, 5.0, 10.0, 20.0, 50.0],
            gamma_a: vec![1.0, 10.0],
        }
    }
}

impl GridSpec {
    pub fn single(hp: HyperParams) -> Self {
        Self {
            active_models: vec![hp.active_model],
            lambda_s: vec![hp.lambda_s],
            lambda_a: vec![hp.lambda_a],
            kappa_s: vec![hp.kappa_s],
            kappa_a: vec![hp.kappa_a],
            gamma_s: vec![hp.gamma_s],
            gamma_a: vec![hp.gamma_a],
            base: hp,
        }
    }

    pub fn per_model(&self) -> usize {
        self.lambda_s.len()
            * self.lambda_a.len()
            * self.kappa_s.len()
            * self.kappa_a.len()
            * self.gamma_s.len()
            * self.gamma_a.len()
    }

    pub fn size(&self) -> usize {
        self.active_models.len() * self.per_model()
    }

    pub fn configs(&self) -> Vec<HyperParams> {
        let mut out = Vec::with_capacity(self.size());
        for &m in &self.active_models {
            for &ls in &self.lambda_s {
                for &la in &self.lambda_a {
                    for &ks in &self.kappa_s {
                        for &ka in &self.kappa_a {
                            for &gs in &self.gamma_s {
                                for &ga in &self.gamma_a {
                                    out.push(HyperParams {
                                        active_model: m,
                                        lambda_s: ls,
                                        lambda_a: la,
                                        kappa_s: ks,
                                        kappa_a: ka,
                                        gamma_s: gs,
                                        gamma_a: ga,
                                        ..self.base.clone()
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.size() == 0 {
            return Err(Error::invalid("grid has an empty axis"));
        }
        self.configs().iter().try_for_each(HyperParams::validate)
    }
}

/// Per-period returns, one column per successful trial, on shared dates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialMatrix {
    pub dates: Vec<NaiveDate>,
    pub returns: DMatrix<f64>,
    /// Index into the grid's configuration list for each column.
    pub config_index: Vec<usize>,
    pub digests: Vec<String>,
}

impl TrialMatrix {
    pub fn n_trials(&self) -> usize {
        self.returns.ncols()
    }

    pub fn n_periods(&self) -> usize {
        self.returns.nrows()
    }

    /// SHA-256 over dates, column digests and the bit patterns of every return.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for d in &self.dates {
            h.update(d.to_string().as_bytes());
        }
        for d in &self.digests {
            h.update(d.as_bytes());
        }
        for v in self.returns.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.returns.column(j).iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub digest: String,
    pub config: HyperParams,
    pub fold_sr: Vec<f64>,
    pub mean_validation_sr: f64,
    pub is_sr: f64,
    pub oos_sr: Option<f64>,
    /// Column in the trial matrices.
    pub column: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedTrial {
    pub index: usize,
    pub digest: String,
    pub config: HyperParams,
    pub error: String,
}

/// Realized-period window of a calibration: trading starts at `start`, the
/// in-sample segment is `start..is_end` and the out-of-sample one `is_end..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub is_end: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub window: Window,
    /// In-sample returns of successful trials.
    pub in_sample: TrialMatrix,
    /// Out-of-sample returns of the same trials (zero rows when `is_end == end`).
    pub out_of_sample: TrialMatrix,
    /// Successful trials in grid order.
    pub trials: Vec<TrialRecord>,
    /// Indices into `trials`, best mean validation SR first, ties by digest.
    pub ranking: Vec<usize>,
    pub failed: Vec<FailedTrial>,
}

impl GridOutcome {
    pub fn best(&self) -> Option<&TrialRecord> {
        self.ranking.first().map(|&k| &self.trials[k])
    }
}

/// Runs every configuration over `window.start..window.end`, scores each on
/// the validation blocks of `splits` (which must lie in the in-sample
/// segment) and ranks by mean validation SR. Failing configurations are
/// recorded and skipped. Configurations sharing model parameters are run
/// together; groups run on the current rayon pool.
pub fn grid_search(
    panel: &AssetPanel,
    factors: &FactorSeries,
    grid: &GridSpec,
    splits: &[Split],
    window: Window,
) -> Result<GridOutcome> {
    grid.validate()?;
    if !(window.start < window.is_end && window.is_end <= window.end && window.end <= panel.n_periods()) {
        return Err(Error::invalid(format!("malformed calibration window {window:?}")));
    }
    if splits.is_empty() {
        return Err(Error::invalid("grid search needs at least one validation fold"));
    }
    for s in splits {
        if s.validate.start < window.start || s.validate.end > window.is_end || s.validate.len() < 2 {
            return Err(Error::invalid(format!(
                "validation block {:?} must hold 2+ periods inside the in-sample segment {}..{}",
                s.validate, window.start, window.is_end
            )));
        }
    }
    let configs = grid.configs();
    let mut groups: BTreeMap<(usize, String), Vec<usize>> = BTreeMap::new();
    let mut first_seen: BTreeMap<String, usize> = BTreeMap::new();
    for (i, hp) in configs.iter().enumerate() {
        let key = hp.model_key();
        let order = *first_seen.entry(key.clone()).or_insert(i);
        groups.entry((order, key)).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();

    let runs: Vec<Vec<(usize, std::result::Result<BacktestResult, String>)>> = groups
        .par_iter()
        .map(|members| {
            let hps: Vec<HyperParams> = members.iter().map(|&i| configs[i].clone()).collect();
            match run_group(panel, factors, &hps, window.start, window.end, false) {
                Ok(results) => members
                    .iter()
                    .zip(results)
                    .map(|(&i, r)| (i, r.map_err(|e| e.to_string())))
                    .collect(),
                Err(e) => members.iter().map(|&i| (i, Err(e.to_string()))).collect(),
            }
        })
        .collect();
    let mut runs: Vec<(usize, std::result::Result<BacktestResult, String>)> = runs.into_iter().flatten().collect();
    runs.sort_by_key(|r| r.0);

    let n_is = window.is_end - window.start;
    let n_oos = window.end - window.is_end;
    let mut trials = Vec::new();
    let mut failed = Vec::new();
    let mut is_cols: Vec<Vec<f64>> = Vec::new();
    let mut oos_cols: Vec<Vec<f64>> = Vec::new();
    for (i, run) in runs {
        let hp = &configs[i];
        let scored = run.and_then(|r| {
            let fold_sr = splits
                .iter()
                .map(|s| sharpe_ratio(&r.period_returns[s.validate.start - window.start..s.validate.end - window.start]))
                .collect::<Result<Vec<f64>>>()
                .map_err(|e| e.to_string())?;
            let is_sr = sharpe_ratio(&r.period_returns[..n_is]).map_err(|e| e.to_string())?;
            let oos_sr = if n_oos >= 2 {
                Some(sharpe_ratio(&r.period_returns[n_is..]).map_err(|e| e.to_string())?)
            } else {
                None
            };
            Ok((r, fold_sr, is_sr, oos_sr))
        });
        match scored {
            Ok((r, fold_sr, is_sr, oos_sr)) => {
                let mean_validation_sr = fold_sr.iter().sum::<f64>() / fold_sr.len() as f64;
                trials.push(TrialRecord {
                    index: i,
                    digest: hp.digest(),
                    config: hp.clone(),
                    fold_sr,
                    mean_validation_sr,
                    is_sr,
                    oos_sr,
                    column: is_cols.len(),
                });
                is_cols.push(r.period_returns[..n_is].to_vec());
                oos_cols.push(r.period_returns[n_is..].to_vec());
            }
            Err(error) => failed.push(FailedTrial {
                index: i,
                digest: hp.digest(),
                config: hp.clone(),
                error,
            }),
        }
    }
    let mut ranking: Vec<usize> = (0..trials.len()).collect();
    ranking.sort_by(|&a, &b| {
        trials[b]
            .mean_validation_sr
            .total_cmp(&trials[a].mean_validation_sr)
            .then_with(|| trials[a].digest.cmp(&trials[b].digest))
    });
    let dates = panel.dates();
    let digests: Vec<String> = trials.iter().map(|t| t.digest.clone()).collect();
    let config_index: Vec<usize> = trials.iter().map(|t| t.index).collect();
    Ok(GridOutcome {
        window,
        in_sample: TrialMatrix {
            dates: dates[window.start..window.is_end].to_vec(),
            returns: DMatrix::from_fn(n_is, is_cols.len(), |r, c| is_cols[c][r]),
            config_index: config_index.clone(),
            digests: digests.clone(),
        },
        out_of_sample: TrialMatrix {
            dates: dates[window.is_end..window.end].to_vec(),
            returns: DMatrix::from_fn(n_oos, oos_cols.len(), |r, c| oos_cols[c][r]),
            config_index,
            digests,
        },
        trials,
        ranking,
        failed,
    })
}

/// Everything a calibration run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSpec {
    pub grid: GridSpec,
    /// Share of periods in the in-sample segment.
    pub is_fraction: f64,
    pub n_folds: usize,
    /// Periods before the first validation block; defaults to the first
    /// trade period plus one fold length.
    pub min_train: Option<usize>,
    pub pbo_blocks: usize,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            is_fraction: 0.6,
            n_folds: 4,
            min_train: None,
            pbo_blocks: DEFAULT_BLOCKS,
        }
    }
}

impl CalibrationSpec {
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("spec serializes")))
    }

    pub fn window(&self, n_periods: usize) -> Result<Window> {
        if !(self.is_fraction > 0.0 && self.is_fraction < 1.0) {
            return Err(Error::invalid(format!("is_fraction {} must lie in (0, 1)", self.is_fraction)));
        }
        let start = self.grid.base.burn_in + 1;
        let is_end = (n_periods as f64 * self.is_fraction).floor() as usize;
        if is_end <= start + 2 || n_periods < is_end + 2 {
            return Err(Error::InsufficientData(format!(
                "{n_periods} periods leave no room for a {}-period burn-in and both segments",
                self.grid.base.burn_in
            )));
        }
        Ok(Window {
            start,
            is_end,
            end: n_periods,
        })
    }

    pub fn splits(&self, window: Window) -> Result<Vec<Split>> {
        let min_train = self
            .min_train
            .unwrap_or(window.start + (window.is_end - window.start) / (self.n_folds + 1));
        if min_train < window.start {
            return Err(Error::invalid(format!(
                "min_train {min_train} precedes the first trade period {}",
                window.start
            )));
        }
        walk_forward_splits(window.is_end, self.n_folds, min_train)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub sr: f64,
    /// PSR against a zero benchmark.
    pub psr: f64,
    /// Deflated SR, reported for the selected strategy in sample only.
    pub dsr: Option<f64>,
    pub turnover: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub algo: CellStats,
    pub nd: CellStats,
    pub cap: CellStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceTable {
    pub is: SegmentRow,
    pub oos: SegmentRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PboSummary {
    pub value: f64,
    pub degenerate: bool,
    pub blocks: usize,
    pub combinations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub window: Window,
    pub is_dates: (NaiveDate, NaiveDate),
    pub oos_dates: (NaiveDate, NaiveDate),
    pub selected_config: HyperParams,
    pub selected_digest: String,
    pub table: PerformanceTable,
    pub psr: f64,
    pub dsr: f64,
    pub hsr: f64,
    pub n_trials: usize,
    pub n_failed: usize,
    pub var_trial_sr: f64,
    pub pbo: PboSummary,
    pub logits: Vec<f64>,
    /// `None` when fewer than three trials or no spread in in-sample SR.
    pub regression: Option<Regression>,
    pub is_sr: Vec<f64>,
    pub oos_sr: Vec<f64>,
    pub trial_matrix_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutput {
    pub report: EvalReport,
    pub grid: GridOutcome,
}

fn cell(returns: &[f64], turnover: &[f64]) -> Result<CellStats> {
    let m = return_moments(returns)?;
    Ok(CellStats {
        sr: m.sr,
        psr: probabilistic_sr(m.sr, 0.0, m.n, m.skew, m.kurt)?,
        dsr: None,
        turnover: turnover.iter().sum::<f64>() / turnover.len() as f64,
    })
}

fn segment_row(results: [&BacktestResult; 3], range: Range<usize>) -> Result<SegmentRow> {
    let c = |r: &BacktestResult| cell(&r.period_returns[range.clone()], &r.turnover[range.clone()]);
    Ok(SegmentRow {
        algo: c(results[0])?,
        nd: c(results[1])?,
        cap: c(results[2])?,
    })
}

/// Grid search on the in-sample segment, then the selected configuration
/// and the benchmarks on both segments, multiple-testing statistics and
/// CSCV over the in-sample trial matrix.
pub fn calibrate(panel: &AssetPanel, factors: &FactorSeries, spec: &CalibrationSpec) -> Result<CalibrationOutput> {
    let window = spec.window(panel.n_periods())?;
    let splits = spec.splits(window)?;
    let grid = grid_search(panel, factors, &spec.grid, &splits, window)?;
    let best = grid
        .best()
        .ok_or_else(|| Error::InsufficientData(format!("all {} configurations failed", grid.failed.len())))?
        .clone();

    let algo = crate::backtest::run_backtest(panel, factors, &best.config, window.start, window.end)?;
    let u = best.config.universe_size;
    let nd = run_benchmark(panel, Benchmark::Nd, u, window.start, window.end)?;
    let cap = run_benchmark(panel, Benchmark::Cap, u, window.start, window.end)?;
    let n_is = window.is_end - window.start;
    let n_all = window.end - window.start;
    let mut table = PerformanceTable {
        is: segment_row([&algo, &nd, &cap], 0..n_is)?,
        oos: segment_row([&algo, &nd, &cap], n_is..n_all)?,
    };

    let is_sr: Vec<f64> = grid.trials.iter().map(|t| t.is_sr).collect();
    let oos_sr: Vec<f64> = grid.trials.iter().filter_map(|t| t.oos_sr).collect();
    let n_trials = is_sr.len();
    let var_trial_sr = if n_trials > 1 {
        let m = is_sr.iter().sum::<f64>() / n_trials as f64;
        is_sr.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / (n_trials - 1) as f64
    } else {
        0.0
    };
    let m = return_moments(&algo.period_returns[..n_is])?;
    let psr = probabilistic_sr(m.sr, 0.0, m.n, m.skew, m.kurt)?;
    let dsr = deflated_sr(m.sr, m.n, m.skew, m.kurt, n_trials, var_trial_sr)?;
    table.is.algo.dsr = Some(dsr);
    let hsr = haircut_sr(m.sr, m.n, n_trials);

    let pbo = if n_trials >= 2 {
        cscv_pbo(&grid.in_sample.returns, spec.pbo_blocks)?
    } else {
        PboResult {
            pbo: 0.5,
            logits: Vec::new(),
            degenerate: true,
            blocks: spec.pbo_blocks,
        }
    };
    let pairs: Vec<(f64, f64)> = grid.trials.iter().filter_map(|t| t.oos_sr.map(|o| (t.is_sr, o))).collect();
    let regression = match is_oos_regression(&pairs) {
        Ok(r) => Some(r),
        Err(Error::InsufficientData(_)) | Err(Error::ZeroVariance) => None,
        Err(e) => return Err(e),
    };
    let dates = panel.dates();
    let report = EvalReport {
        config_digest: spec.digest(),
        window,
        is_dates: (dates[window.start], dates[window.is_end - 1]),
        oos_dates: (dates[window.is_end], dates[window.end - 1]),
        selected_digest: best.digest.clone(),
        selected_config: best.config.clone(),
        table,
        psr,
        dsr,
        hsr,
        n_trials,
        n_failed: grid.failed.len(),
        var_trial_sr,
        pbo: PboSummary {
            value: pbo.pbo,
            degenerate: pbo.degenerate,
            blocks: pbo.blocks,
            combinations: pbo.logits.len(),
        },
        logits: pbo.logits,
        regression,
        is_sr,
        oos_sr,
        trial_matrix_digest: grid.in_sample.digest(),
    };
    Ok(CalibrationOutput { report, grid })
}

fn writer(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = writer(path)?;
    let e = io(path);
    serde_json::to_writer_pretty(&mut out, report).map_err(|err| e(err.into()))?;
    writeln!(out).map_err(&e)?;
    out.flush().map_err(&e)
}

/// One row per configuration in grid order, failed ones included.
pub fn write_trials_csv(path: &Path, digest: &str, grid: &GridOutcome) -> Result<()> {
    let mut out = writer(path)?;
    let e = io(path);
    writeln!(out, "# config_digest={digest}").map_err(&e)?;
    writeln!(
        out,
        "config_digest,index,active_model,lambda_s,lambda_a,kappa_s,kappa_a,gamma_s,gamma_a,status,rank,mean_validation_sr,is_sr,oos_sr"
    )
    .map_err(&e)?;
    let mut rank = vec![0usize; grid.trials.len()];
    for (r, &k) in grid.ranking.iter().enumerate() {
        rank[k] = r + 1;
    }
    let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut rows: Vec<(usize, String)> = grid
        .trials
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let c = &t.config;
            (
                t.index,
                format!(
                    "{},{},{},{},{},{},{},{},{},ok,{},{},{},{}",
                    t.digest,
                    t.index,
                    c.active_model.id(),
                    c.lambda_s,
                    c.lambda_a,
                    c.kappa_s,
                    c.kappa_a,
                    c.gamma_s,
                    c.gamma_a,
                    rank[k],
                    t.mean_validation_sr,
                    t.is_sr,
                    fmt_opt(t.oos_sr)
                ),
            )
        })
        .collect();
    for f in &grid.failed {
        let c = &f.config;
        rows.push((
            f.index,
            format!(
                "{},{},{},{},{},{},{},{},{},failed,,,,",
                f.digest,
                f.index,
                c.active_model.id(),
                c.lambda_s,
                c.lambda_a,
                c.kappa_s,
                c.kappa_a,
                c.gamma_s,
                c.gamma_a
            ),
        ));
    }
    rows.sort_by_key(|r| r.0);
    for (_, line) in rows {
        writeln!(out, "{line}").map_err(&e)?;
    }
    out.flush().map_err(&e)
}

pub fn write_logits_csv(path: &Path, digest: &str, logits: &[f64]) -> Result<()> {
    let mut out = writer(path)?;
    let e = io(path);
    writeln!(out, "# config_digest={digest}").map_err(&e)?;
    writeln!(out, "split,logit").map_err(&e)?;
    for (i, l) in logits.iter().enumerate() {
        writeln!(out, "{i},{l}").map_err(&e)?;
    }
    out.flush().map_err(&e)
}

/// `segment,strategy,sr,psr,dsr,turnover` in the report's table layout.
pub fn write_table_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = writer(path)?;
    let e = io(path);
    writeln!(out, "# config_digest={}", report.config_digest).map_err(&e)?;
    writeln!(out, "segment,strategy,sr,psr,dsr,turnover").map_err(&e)?;
    for (seg, row) in [("is", &report.table.is), ("oos", &report.table.oos)] {
        for (name, c) in [("algo", &row.algo), ("nd", &row.nd), ("cap", &row.cap)] {
            let dsr = c.dsr.map_or(String::new(), |v| v.to_string());
            writeln!(out, "{seg},{name},{},{},{dsr},{}", c.sr, c.psr, c.turnover).map_err(&e)?;
        }
    }
    out.flush().map_err(&e)
}

/// `date,<digest>...` with one column per trial.
pub fn write_trial_matrix_csv(path: &Path, digest: &str, m: &TrialMatrix) -> Result<()> {
    let mut out = writer(path)?;
    let e = io(path);
    writeln!(out, "# config_digest={digest}").map_err(&e)?;
    writeln!(out, "date,{}", m.digests.join(",")).map_err(&e)?;
    for (r, d) in m.dates.iter().enumerate() {
        let row: Vec<String> = m.returns.row(r).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{},{}", d.format("%Y-%m-%d"), row.join(",")).map_err(&e)?;
    }
    out.flush().map_err(&e)
}

/// Reads a `date,<name>...` return matrix; `#` lines are comments.
pub fn read_return_matrix(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|err| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: err.to_string(),
        })?;
    let headers = rdr
        .headers()
        .map_err(|err| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: err.to_string(),
        })?
        .clone();
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if names.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "expected a date column followed by at least one series".into(),
        });
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|err| Error::Parse {
            path: path.to_path_buf(),
            line: err.position().map_or(0, |p| p.line()),
            message: err.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("'{v}' is not a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != names.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected {} values, found {}", names.len(), vals.len()),
            });
        }
        rows.push(vals);
    }
    let m = DMatrix::from_fn(rows.len(), names.len(), |r, c| rows[r][c]);
    Ok((names, m))
}
