//! The online loop, benchmark strategies and performance statistics.
//!
//! Each period `t` runs in a fixed order: realize the return on holdings
//! formed at `t - 1`, score last period's forecasts and update the
//! uncertainty estimates, update the factor and characteristic models,
//! forecast for `t + 1`, blend, build the covariance stack, construct and
//! project the portfolio, then hold it over `t + 1`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blend::{
    adjust_for_uncertainty, conditional_covariance, mixed_estimate, shrink_covariance_to, ShrinkTarget,
    UncertaintyState,
};
use crate::data::{investible_universe, AssetPanel, FactorSeries, MV};
use crate::error::{Error, Result};
use crate::filters::{EwmaCovState, RlmaConfig};
use crate::linalg::{select, select_square};
use crate::portfolio::qp::QpFactor;
use crate::portfolio::{project, project_leverage, ConstraintSet, MvSolver, PortfolioDecomposition};
use crate::pricing::{
    characteristic_matrix, record_forecast_errors, ActiveModel, CharModelState, FactorModelConfig,
    FactorModelState, ReturnForecast,
};

pub const PERIODS_PER_YEAR: f64 = 52.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub lambda_s: f64,
    pub lambda_a: f64,
    pub kappa_s: f64,
    pub kappa_a: f64,
    pub gamma_s: f64,
    pub gamma_a: f64,
    pub active_model: ActiveModel,
    pub rlma: RlmaConfig,
    /// Variance assigned to a coordinate the first time an EWMA covariance sees it.
    pub cov_ridge: f64,
    pub universe_size: usize,
    pub max_leverage: f64,
    pub burn_in: usize,
    /// Factor-model updates an asset needs before it can be held.
    pub min_obs: u64,
    pub diagonal_uncertainty: bool,
    pub shrink_target: ShrinkTarget,
    pub char_interactions: bool,
    pub macro_interactions: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda_s: 0.98,
            lambda_a: 0.95,
            kappa_s: 0.5,
            kappa_a: 0.5,
            gamma_s: 10.0,
            gamma_a: 10.0,
            active_model: ActiveModel::Full,
            rlma: RlmaConfig::default(),
            cov_ridge: EwmaCovState::DEFAULT_RIDGE,
            universe_size: 100,
            max_leverage: 2.0,
            burn_in: 52,
            min_obs: 26,
            diagonal_uncertainty: true,
            shrink_target: ShrinkTarget::ScaledIdentity,
            char_interactions: false,
            macro_interactions: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} must lie in (0, 1)")))
            }
        };
        let closed_unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} must be positive")))
            }
        };
        open_unit("lambda_s", self.lambda_s)?;
        open_unit("lambda_a", self.lambda_a)?;
        closed_unit("kappa_s", self.kappa_s)?;
        closed_unit("kappa_a", self.kappa_a)?;
        positive("gamma_s", self.gamma_s)?;
        positive("gamma_a", self.gamma_a)?;
        self.rlma.validate()?;
        if !(self.cov_ridge >= 0.0 && self.cov_ridge.is_finite()) {
            return Err(Error::invalid("cov_ridge must be non-negative"));
        }
        if self.universe_size == 0 {
            return Err(Error::invalid("universe_size must be at least 1"));
        }
        if !(self.max_leverage >= 1.0) {
            return Err(Error::invalid(format!("max_leverage = {} must be at least 1", self.max_leverage)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("hyper-parameters serialize");
        hex::encode(Sha256::digest(&json))
    }

    /// Copy with the construction-only parameters cleared; backtests with
    /// equal keys share every model state.
    pub(crate) fn model_key(&self) -> String {
        let mut k = self.clone();
        k.kappa_s = 0.0;
        k.kappa_a = 0.0;
        k.gamma_s = 1.0;
        k.gamma_a = 1.0;
        k.digest()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestWarning {
    pub period: usize,
    pub date: NaiveDate,
    pub message: String,
}

/// Per-period excess-return attribution to the three legs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentReturns {
    pub gmv: Vec<f64>,
    pub systematic: Vec<f64>,
    pub active: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestResult {
    pub label: String,
    /// Realized periods `start..end`.
    pub dates: Vec<NaiveDate>,
    /// Date the first portfolio was formed.
    pub inception: NaiveDate,
    pub asset_ids: Vec<String>,
    /// Excess returns over the risk-free rate.
    pub period_returns: Vec<f64>,
    pub total_returns: Vec<f64>,
    /// Weights held over each realized period (empty unless recorded).
    pub weights: DMatrix<f64>,
    pub component_returns: ComponentReturns,
    pub turnover: Vec<f64>,
    /// Growth of one unit of wealth in total-return terms; one longer than the returns.
    pub equity_curve: Vec<f64>,
    pub config_digest: String,
    pub warnings: Vec<BacktestWarning>,
}

impl BacktestResult {
    pub fn len(&self) -> usize {
        self.period_returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.period_returns.is_empty()
    }
}

struct ModelEngine<'a> {
    panel: &'a AssetPanel,
    factors: &'a FactorSeries,
    names: &'static [&'static str],
    interactions: bool,
    min_obs: u64,
    factor_model: FactorModelState,
    char_model: CharModelState,
    uncertainty: UncertaintyState,
    forecast: Option<ReturnForecast>,
    exposures: Option<DMatrix<f64>>,
    cond_chars: DMatrix<f64>,
    cond_macro: DVector<f64>,
    betas: DMatrix<f64>,
}

impl<'a> ModelEngine<'a> {
    fn new(panel: &'a AssetPanel, factors: &'a FactorSeries, hp: &HyperParams) -> Result<Self> {
        let n = panel.n_assets();
        if factors.n_periods() != panel.n_periods() {
            return Err(Error::Dimension(format!(
                "factor series has {} periods, panel has {}",
                factors.n_periods(),
                panel.n_periods()
            )));
        }
        let names = hp.active_model.characteristics();
        let cfg = FactorModelConfig {
            rlma: hp.rlma,
            char_interactions: hp.char_interactions,
            macro_interactions: hp.macro_interactions,
            ..FactorModelConfig::default()
        };
        let factor_model =
            FactorModelState::new(n, factors.n_factors(), names.len(), panel.n_macro(), hp.lambda_s, cfg)?;
        let mut uncertainty = UncertaintyState::new(n, hp.lambda_s, hp.lambda_a, hp.diagonal_uncertainty)?;
        uncertainty.omega_pi =
            EwmaCovState::with_options(n, hp.lambda_s, hp.cov_ridge, hp.diagonal_uncertainty)?;
        uncertainty.omega_mu =
            EwmaCovState::with_options(n, hp.lambda_a, hp.cov_ridge, hp.diagonal_uncertainty)?;
        Ok(Self {
            panel,
            factors,
            names,
            interactions: hp.char_interactions,
            min_obs: hp.min_obs,
            factor_model,
            char_model: CharModelState::new(names.len(), hp.lambda_a)?,
            uncertainty,
            forecast: None,
            exposures: None,
            cond_chars: DMatrix::zeros(n, if hp.char_interactions { names.len() } else { 0 }),
            cond_macro: DVector::zeros(panel.n_macro()),
            betas: DMatrix::zeros(n, factors.n_factors()),
        })
    }

    /// Scores the forecast made at `t - 1`, updates every model with period
    /// `t` data and forecasts `t + 1`.
    fn step(&mut self, t: usize) -> Result<()> {
        let (excess, mask) = self.panel.excess_row(t);
        if let Some(fc) = self.forecast.take() {
            let errors = record_forecast_errors(&fc, &excess, t, &mask)?;
            self.uncertainty.update(&errors)?;
        }
        let f = self.factors.row(t);
        self.factor_model
            .update(f.as_ref(), &excess, &self.cond_macro, &self.cond_chars, &mask)?;
        if let Some(x) = &self.exposures {
            self.char_model.update(x, &excess, &mask)?;
        }

        let x_t = characteristic_matrix(self.panel, t, self.names, &mask, true)?;
        let cond_t = if self.interactions {
            x_t.clone()
        } else {
            DMatrix::zeros(self.panel.n_assets(), 0)
        };
        let macro_t = self.panel.macro_row(t);
        if self.factor_model.premia().is_initialized() {
            self.betas = self.factor_model.betas(&cond_t, &macro_t)?;
            let pi = self.factor_model.forecast_systematic(&cond_t, &macro_t, &mask)?;
            let (mut mu, mu_defined) = if self.char_model.is_initialized() {
                self.char_model.forecast(&x_t, &mask)?
            } else {
                (pi.clone(), vec![false; pi.len()])
            };
            for i in 0..mu.len() {
                if mask[i] && !mu_defined[i] {
                    mu[i] = pi[i];
                }
            }
            self.forecast = Some(ReturnForecast {
                t,
                pi,
                mu,
                defined: mask,
                mu_defined,
            });
        }
        self.exposures = Some(x_t);
        self.cond_chars = cond_t;
        self.cond_macro = macro_t;
        Ok(())
    }

    fn eligible(&self, i: usize) -> bool {
        self.factor_model.observations(i) >= self.min_obs && self.uncertainty.omega_pi.seen(i)
    }

    fn inputs(&self, t: usize, universe_size: usize) -> Result<Option<PeriodInputs>> {
        let Some(fc) = self.forecast.as_ref().filter(|f| f.t == t) else {
            return Ok(None);
        };
        let idx: Vec<usize> = investible_universe(self.panel, t, universe_size)?
            .into_iter()
            .filter(|&i| fc.defined[i] && self.eligible(i))
            .collect();
        if idx.is_empty() {
            return Ok(None);
        }
        let pi = select(&fc.pi, &idx);
        let mut mu = select(&fc.mu, &idx);
        let omega_pi = select_square(self.uncertainty.omega_pi.cov(), &idx);
        let mut omega_mu = select_square(self.uncertainty.omega_mu.cov(), &idx);
        // Without an active-error history the view carries no information.
        for (k, &i) in idx.iter().enumerate() {
            if !self.uncertainty.omega_mu.seen(i) {
                mu[k] = pi[k];
                omega_mu[(k, k)] = omega_pi[(k, k)];
            }
        }
        let blended = mixed_estimate(&pi, &mu, &omega_pi, &omega_mu)?;
        let betas = DMatrix::from_fn(idx.len(), self.betas.ncols(), |r, c| self.betas[(idx[r], c)]);
        let idio = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.factor_model.idio_var()[i]));
        let sigma_cond = conditional_covariance(&betas, self.factor_model.factor_cov().cov(), &idio)?;
        Ok(Some(PeriodInputs {
            idx,
            pi,
            alpha_bl: blended.alpha_bl,
            sigma_cond,
            omega_pi,
            mixed_uncertainty: blended.uncertainty,
        }))
    }
}

struct PeriodInputs {
    idx: Vec<usize>,
    pi: DVector<f64>,
    alpha_bl: DVector<f64>,
    sigma_cond: DMatrix<f64>,
    omega_pi: DMatrix<f64>,
    mixed_uncertainty: DMatrix<f64>,
}

struct StrategicSide {
    sigma: DMatrix<f64>,
    gmv: DVector<f64>,
    unit_tilt: DVector<f64>,
    factor: Option<QpFactor>,
}

/// Builds the decomposition for every member, sharing the factorizations
/// across members with the same shrinkage intensities.
fn construct(
    inputs: &PeriodInputs,
    members: &[HyperParams],
    seeds: &[Vec<i8>],
    constraints: &ConstraintSet,
    target: ShrinkTarget,
) -> Vec<Result<PortfolioDecomposition>> {
    let mut strategic: BTreeMap<u64, Result<StrategicSide>> = BTreeMap::new();
    let mut active: BTreeMap<u64, Result<DVector<f64>>> = BTreeMap::new();
    members
        .iter()
        .zip(seeds)
        .map(|(hp, seed)| {
            let s = strategic.entry(hp.kappa_s.to_bits()).or_insert_with(|| {
                let sigma = adjust_for_uncertainty(
                    &shrink_covariance_to(&inputs.sigma_cond, hp.kappa_s, target)?,
                    &inputs.omega_pi,
                )?;
                let solver = MvSolver::new(&sigma)?;
                Ok(StrategicSide {
                    gmv: solver.gmv(),
                    unit_tilt: solver.tilt(&inputs.pi, 1.0),
                    sigma,
                    factor: None,
                })
            });
            let s = match s {
                Ok(s) => s,
                Err(e) => return Err(clone_error(e)),
            };
            let a = active.entry(hp.kappa_a.to_bits()).or_insert_with(|| {
                let sigma = adjust_for_uncertainty(
                    &shrink_covariance_to(&inputs.sigma_cond, hp.kappa_a, target)?,
                    &inputs.mixed_uncertainty,
                )?;
                Ok(MvSolver::new(&sigma)?.tilt(&inputs.alpha_bl, 1.0))
            });
            let a = match a {
                Ok(a) => a,
                Err(e) => return Err(clone_error(e)),
            };
            let mut d = PortfolioDecomposition {
                gmv: s.gmv.clone(),
                systematic: &s.unit_tilt / hp.gamma_s,
                active: &*a / hp.gamma_a,
                total: DVector::zeros(0),
                gamma_s: hp.gamma_s,
                gamma_a: hp.gamma_a,
            };
            d.total = &d.gmv + &d.systematic + &d.active;
            if d.total.lp_norm(1) > constraints.max_leverage() + 1e-12 {
                let projected = match project_leverage(&d.total, &s.sigma, constraints.max_leverage(), seed) {
                    Some(w) => w,
                    None => {
                        if s.factor.is_none() {
                            s.factor = Some(QpFactor::new(&s.sigma)?);
                        }
                        project(&d.total, &s.sigma, constraints, s.factor.as_ref().unwrap())?.weights
                    }
                };
                let delta = &projected - &d.total;
                let norms = [d.gmv.lp_norm(1), d.systematic.lp_norm(1), d.active.lp_norm(1)];
                let sum: f64 = norms.iter().sum();
                d.gmv.axpy(norms[0] / sum, &delta, 1.0);
                d.systematic.axpy(norms[1] / sum, &delta, 1.0);
                d.active.axpy(norms[2] / sum, &delta, 1.0);
                d.total = projected;
            }
            Ok(d)
        })
        .collect()
}

fn clone_error(e: &Error) -> Error {
    match e {
        Error::Singular { context, condition } => Error::Singular {
            context,
            condition: *condition,
        },
        Error::NonFinite(w) => Error::NonFinite(w),
        Error::Infeasible(m) => Error::Infeasible(m.clone()),
        Error::NoConvergence(n) => Error::NoConvergence(*n),
        Error::Dimension(m) => Error::Dimension(m.clone()),
        Error::InvalidParameter(m) => Error::InvalidParameter(m.clone()),
        other => Error::InsufficientData(other.to_string()),
    }
}

struct Book {
    n: usize,
    record: bool,
    weights: DVector<f64>,
    legs: [DVector<f64>; 3],
    pending_turnover: Option<f64>,
    period_returns: Vec<f64>,
    total_returns: Vec<f64>,
    components: ComponentReturns,
    turnover: Vec<f64>,
    weight_rows: Vec<DVector<f64>>,
    warnings: Vec<BacktestWarning>,
    failed: Option<Error>,
}

impl Book {
    fn new(n: usize, record: bool) -> Self {
        Self {
            n,
            record,
            weights: DVector::zeros(n),
            legs: [DVector::zeros(n), DVector::zeros(n), DVector::zeros(n)],
            pending_turnover: None,
            period_returns: Vec::new(),
            total_returns: Vec::new(),
            components: ComponentReturns::default(),
            turnover: Vec::new(),
            weight_rows: Vec::new(),
            warnings: Vec::new(),
            failed: None,
        }
    }

    /// Earns period `t` on current holdings and lets them drift. Positions in
    /// assets that stopped trading are moved to cash at the risk-free rate.
    fn realize(&mut self, excess: &DVector<f64>, mask: &[bool], rf: f64) {
        let mut r_ex = 0.0;
        let mut leg_ex = [0.0; 3];
        for i in 0..self.n {
            if mask[i] {
                r_ex += self.weights[i] * excess[i];
                for k in 0..3 {
                    leg_ex[k] += self.legs[k][i] * excess[i];
                }
            }
        }
        let r_tot = rf + r_ex;
        self.period_returns.push(r_ex);
        self.total_returns.push(r_tot);
        self.components.gmv.push(leg_ex[0]);
        self.components.systematic.push(leg_ex[1]);
        self.components.active.push(leg_ex[2]);
        self.turnover.push(self.pending_turnover.take().unwrap_or(0.0));
        if self.record {
            self.weight_rows.push(self.weights.clone());
        }
        let growth = 1.0 + r_tot;
        for i in 0..self.n {
            let g = if mask[i] { (1.0 + rf + excess[i]) / growth } else { 0.0 };
            self.weights[i] *= g;
            for leg in self.legs.iter_mut() {
                leg[i] *= g;
            }
        }
    }

    /// Signs of current holdings on `idx`, the starting guess for the next projection.
    fn signs(&self, idx: &[usize]) -> Vec<i8> {
        idx.iter()
            .map(|&i| {
                let w = self.weights[i];
                if w > 0.0 {
                    1
                } else if w < 0.0 {
                    -1
                } else {
                    0
                }
            })
            .collect()
    }

    fn trade(&mut self, weights: DVector<f64>, legs: [DVector<f64>; 3]) {
        self.pending_turnover = Some((&weights - &self.weights).lp_norm(1));
        self.weights = weights;
        self.legs = legs;
    }

    /// Keeps the drifted holdings, rescaled to a full investment when any remain.
    fn hold(&mut self, t: usize, date: NaiveDate, reason: &str) {
        let sum = self.weights.sum();
        let scale = if sum.abs() > 1e-12 { 1.0 / sum } else { 0.0 };
        let w = &self.weights * scale;
        let legs = [&self.legs[0] * scale, &self.legs[1] * scale, &self.legs[2] * scale];
        self.trade(w, legs);
        self.warnings.push(BacktestWarning {
            period: t,
            date,
            message: format!("{reason}; holding previous weights on surviving names"),
        });
    }

    fn finish(self, panel: &AssetPanel, start: usize, end: usize, label: String, digest: String) -> Result<BacktestResult> {
        if let Some(e) = self.failed {
            return Err(e);
        }
        let mut equity = Vec::with_capacity(self.total_returns.len() + 1);
        equity.push(1.0);
        for r in &self.total_returns {
            equity.push(equity.last().unwrap() * (1.0 + r));
        }
        let weights = if self.record {
            DMatrix::from_fn(self.weight_rows.len(), self.n, |r, c| self.weight_rows[r][c])
        } else {
            DMatrix::zeros(0, self.n)
        };
        Ok(BacktestResult {
            label,
            dates: panel.dates()[start..end].to_vec(),
            inception: panel.dates()[start - 1],
            asset_ids: panel.asset_ids().to_vec(),
            period_returns: self.period_returns,
            total_returns: self.total_returns,
            weights,
            component_returns: self.components,
            turnover: self.turnover,
            equity_curve: equity,
            config_digest: digest,
            warnings: self.warnings,
        })
    }
}

fn check_window(panel: &AssetPanel, burn_in: usize, start: usize, end: usize) -> Result<()> {
    if end > panel.n_periods() {
        return Err(Error::OutOfRange {
            index: end,
            len: panel.n_periods(),
        });
    }
    if start >= end {
        return Err(Error::invalid(format!("empty backtest window {start}..{end}")));
    }
    if start < burn_in + 1 {
        return Err(Error::invalid(format!(
            "start {start} leaves fewer than {burn_in} burn-in periods before the first trade"
        )));
    }
    Ok(())
}

/// Runs the algorithm over realized periods `start..end`. The first portfolio
/// is formed at `start - 1`; every model is updated from period 1 onwards.
pub fn run_backtest(
    panel: &AssetPanel,
    factors: &FactorSeries,
    hp: &HyperParams,
    start: usize,
    end: usize,
) -> Result<BacktestResult> {
    run_group(panel, factors, std::slice::from_ref(hp), start, end, true)?
        .pop()
        .expect("one member")
}

/// Runs several configurations that differ only in shrinkage intensities
/// and risk tolerances. Model states are updated once and shared; results
/// equal independent [`run_backtest`] calls. The outer error covers
/// failures common to every member.
pub fn run_group(
    panel: &AssetPanel,
    factors: &FactorSeries,
    members: &[HyperParams],
    start: usize,
    end: usize,
    record_weights: bool,
) -> Result<Vec<Result<BacktestResult>>> {
    let Some(first) = members.first() else {
        return Ok(Vec::new());
    };
    for hp in members {
        hp.validate()?;
    }
    let key = first.model_key();
    if members.iter().any(|hp| hp.model_key() != key)
        || members.iter().any(|hp| hp.max_leverage != first.max_leverage)
    {
        return Err(Error::invalid("group members must share every model parameter"));
    }
    check_window(panel, first.burn_in, start, end)?;
    let constraints = ConstraintSet::leverage(first.max_leverage)?;
    let mut engine = ModelEngine::new(panel, factors, first)?;
    let n = panel.n_assets();
    let mut books: Vec<Book> = members.iter().map(|_| Book::new(n, record_weights)).collect();

    for t in 1..end {
        if t >= start {
            let (excess, mask) = panel.excess_row(t);
            for b in books.iter_mut() {
                b.realize(&excess, &mask, panel.rf(t));
            }
        }
        if t + 1 >= end {
            break;
        }
        engine.step(t)?;
        if t + 1 < start {
            continue;
        }
        let date = panel.dates()[t];
        match engine.inputs(t, first.universe_size)? {
            None => {
                for b in books.iter_mut() {
                    b.hold(t, date, "no eligible assets");
                }
            }
            Some(inputs) => {
                let seeds: Vec<Vec<i8>> = books.iter().map(|b| b.signs(&inputs.idx)).collect();
                let built = construct(&inputs, members, &seeds, &constraints, first.shrink_target);
                for (b, d) in books.iter_mut().zip(built) {
                    if b.failed.is_some() {
                        continue;
                    }
                    match d {
                        Ok(d) => {
                            let scatter = |v: &DVector<f64>| {
                                let mut out = DVector::zeros(n);
                                for (k, &i) in inputs.idx.iter().enumerate() {
                                    out[i] = v[k];
                                }
                                out
                            };
                            let legs = [scatter(&d.gmv), scatter(&d.systematic), scatter(&d.active)];
                            b.trade(scatter(&d.total), legs);
                        }
                        Err(e) => b.failed = Some(e),
                    }
                }
            }
        }
    }
    Ok(books
        .into_iter()
        .zip(members)
        .map(|(b, hp)| b.finish(panel, start, end, "algo".into(), hp.digest()))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    /// Equal weights over the investible universe.
    Nd,
    /// Market-value weights over the investible universe.
    Cap,
    /// Risk-free accrual.
    Rfr,
}

impl Benchmark {
    pub fn label(self) -> &'static str {
        match self {
            Benchmark::Nd => "nd",
            Benchmark::Cap => "cap",
            Benchmark::Rfr => "rfr",
        }
    }
}

/// Weekly-rebalanced benchmark with the same accounting and window as
/// [`run_backtest`].
pub fn run_benchmark(
    panel: &AssetPanel,
    kind: Benchmark,
    universe_size: usize,
    start: usize,
    end: usize,
) -> Result<BacktestResult> {
    check_window(panel, 0, start, end)?;
    let n = panel.n_assets();
    let mk = panel
        .characteristic_index(MV)
        .ok_or_else(|| Error::InsufficientData("panel has no MV characteristic".into()))?;
    let mut book = Book::new(n, true);
    for t in (start - 1)..end {
        if t >= start {
            let (excess, mask) = panel.excess_row(t);
            book.realize(&excess, &mask, panel.rf(t));
        }
        if t + 1 >= end {
            break;
        }
        let w = match kind {
            Benchmark::Rfr => DVector::zeros(n),
            Benchmark::Nd | Benchmark::Cap => {
                let idx = investible_universe(panel, t, universe_size)?;
                if idx.is_empty() {
                    book.hold(t, panel.dates()[t], "empty investible universe");
                    continue;
                }
                let mut w = DVector::zeros(n);
                for &i in &idx {
                    w[i] = match kind {
                        Benchmark::Nd => 1.0,
                        _ => panel.characteristic(t, i, mk).unwrap_or(0.0),
                    };
                }
                let s = w.sum();
                w / s
            }
        };
        let legs = [w.clone(), DVector::zeros(n), DVector::zeros(n)];
        book.trade(w, legs);
    }
    let digest = hex::encode(Sha256::digest(format!("{}:{universe_size}", kind.label()).as_bytes()));
    book.finish(panel, start, end, kind.label().into(), digest)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceStats {
    /// Per-period mean excess return over its sample standard deviation.
    pub sharpe: f64,
    pub mean_turnover: f64,
    pub ann_return: f64,
    pub ann_vol: f64,
    pub max_drawdown: f64,
}

/// Mean over sample standard deviation. A series of exact zeros has SR 0;
/// any other constant series has no defined SR.
pub fn sharpe_ratio(returns: &[f64]) -> Result<f64> {
    let n = returns.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("sharpe ratio needs 2 returns, got {n}")));
    }
    if returns.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("sharpe_ratio"));
    }
    let mean = returns.iter().sum::<f64>() / n as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var > 0.0 {
        Ok(mean / var.sqrt())
    } else if returns.iter().all(|&r| r == 0.0) {
        Ok(0.0)
    } else {
        Err(Error::ZeroVariance)
    }
}

pub fn max_drawdown(equity: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for &v in equity {
        peak = peak.max(v);
        worst = worst.max(1.0 - v / peak);
    }
    worst
}

pub fn performance_stats(result: &BacktestResult) -> Result<PerformanceStats> {
    let sharpe = sharpe_ratio(&result.period_returns)?;
    let n = result.len() as f64;
    let mean_total = result.total_returns.iter().sum::<f64>() / n;
    let var_total = result.total_returns.iter().map(|r| (r - mean_total).powi(2)).sum::<f64>() / (n - 1.0);
    let growth = *result.equity_curve.last().unwrap();
    Ok(PerformanceStats {
        sharpe,
        mean_turnover: result.turnover.iter().sum::<f64>() / n,
        ann_return: growth.powf(PERIODS_PER_YEAR / n) - 1.0,
        ann_vol: (var_total * PERIODS_PER_YEAR).sqrt(),
        max_drawdown: max_drawdown(&result.equity_curve),
    })
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
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

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `date,<label>...` with one row per equity observation, starting at inception.
pub fn write_equity_curves(path: &Path, digest: &str, series: &[&BacktestResult]) -> Result<()> {
    let first = series.first().ok_or_else(|| Error::invalid("no series to write"))?;
    if series.iter().any(|s| s.dates != first.dates) {
        return Err(Error::Dimension("equity curves cover different periods".into()));
    }
    let mut out = create(path)?;
    let e = io_err(path);
    writeln!(out, "# config_digest={digest}").map_err(&e)?;
    let labels: Vec<&str> = series.iter().map(|s| s.label.as_str()).collect();
    writeln!(out, "date,{}", labels.join(",")).map_err(&e)?;
    for k in 0..first.equity_curve.len() {
        let date = if k == 0 { first.inception } else { first.dates[k - 1] };
        let vals: Vec<String> = series.iter().map(|s| format!("{}", s.equity_curve[k])).collect();
        writeln!(out, "{},{}", date.format("%Y-%m-%d"), vals.join(",")).map_err(&e)?;
    }
    out.flush().map_err(&e)
}

/// `date,gmv,sys,act`: per-period excess-return attribution.
pub fn write_components(path: &Path, result: &BacktestResult) -> Result<()> {
    let mut out = create(path)?;
    let e = io_err(path);
    writeln!(out, "# config_digest={}", result.config_digest).map_err(&e)?;
    writeln!(out, "date,gmv,sys,act").map_err(&e)?;
    let c = &result.component_returns;
    for (k, d) in result.dates.iter().enumerate() {
        writeln!(out, "{},{},{},{}", d.format("%Y-%m-%d"), c.gmv[k], c.systematic[k], c.active[k]).map_err(&e)?;
    }
    out.flush().map_err(&e)
}

/// `date,<asset id>...`: weights held over each realized period.
pub fn write_weights(path: &Path, result: &BacktestResult) -> Result<()> {
    if result.weights.nrows() != result.len() {
        return Err(Error::invalid("weights were not recorded for this backtest"));
    }
    let mut out = create(path)?;
    let e = io_err(path);
    writeln!(out, "# config_digest={}", result.config_digest).map_err(&e)?;
    writeln!(out, "date,{}", result.asset_ids.join(",")).map_err(&e)?;
    for (k, d) in result.dates.iter().enumerate() {
        let row: Vec<String> = result.weights.row(k).iter().map(|w| format!("{w}")).collect();
        writeln!(out, "{},{}", d.format("%Y-%m-%d"), row.join(",")).map_err(&e)?;
    }
    out.flush().map_err(&e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::weekly_dates;
    use crate::synth::{generate, GeneratorSpec};
    use approx::assert_relative_eq;

    fn small_market(seed: u64) -> (AssetPanel, FactorSeries) {
        let (p, f, _) = generate(&GeneratorSpec::new(20, 160, seed)).unwrap();
        (p, f)
    }

    fn fast_hp() -> HyperParams {
        HyperParams {
            burn_in: 60,
            min_obs: 20,
            ..HyperParams::default()
        }
    }

    #[test]
    fn deterministic_and_accounting_identities() {
        let (panel, factors) = small_market(1);
        let hp = fast_hp();
        let a = run_backtest(&panel, &factors, &hp, 61, 160).unwrap();
        let b = run_backtest(&panel, &factors, &hp, 61, 160).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 99);
        assert_eq!(a.equity_curve[0], 1.0);
        let mut eq = 1.0;
        for (k, r) in a.total_returns.iter().enumerate() {
            eq *= 1.0 + r;
            assert!((a.equity_curve[k + 1] - eq).abs() <= 1e-12 * eq);
            assert!(a.equity_curve[k + 1] > 0.0);
        }
        for k in 0..a.len() {
            let c = &a.component_returns;
            assert!((c.gmv[k] + c.systematic[k] + c.active[k] - a.period_returns[k]).abs() < 1e-12);
            assert!(a.turnover[k] >= 0.0);
            assert_relative_eq!(a.weights.row(k).sum(), 1.0, epsilon = 1e-9);
            assert!(a.weights.row(k).iter().map(|w| w.abs()).sum::<f64>() <= hp.max_leverage + 1e-8);
        }
        assert_eq!(panel.masked_reads(), 0);
    }

    #[test]
    fn single_asset_tracks_its_return() {
        let mut spec = GeneratorSpec::new(1, 120, 5);
        spec.planted_payoffs = DVector::from_vec(vec![0.0, 0.0]);
        let (panel, factors, _) = generate(&spec).unwrap();
        let hp = HyperParams {
            burn_in: 40,
            min_obs: 10,
            ..HyperParams::default()
        };
        let r = run_backtest(&panel, &factors, &hp, 41, 120).unwrap();
        let mut eq = 1.0;
        for (k, t) in (41..120).enumerate() {
            assert_relative_eq!(r.weights[(k, 0)], 1.0, epsilon = 1e-12);
            eq *= 1.0 + panel.simple_return(t, 0).unwrap();
            assert_relative_eq!(r.equity_curve[k + 1], eq, max_relative = 1e-12);
        }
    }

    #[test]
    fn rejects_short_burn_in() {
        let (panel, factors) = small_market(2);
        assert!(run_backtest(&panel, &factors, &fast_hp(), 30, 160).is_err());
        assert!(run_backtest(&panel, &factors, &fast_hp(), 61, 161).is_err());
    }

    #[test]
    fn group_equals_individual_runs() {
        let (panel, factors) = small_market(3);
        let base = fast_hp();
        let members: Vec<HyperParams> = [(0.0, 1.0, 2.0, 1.0), (0.5, 0.25, 10.0, 50.0), (1.0, 0.0, 1.0, 1.0)]
            .iter()
            .map(|&(ks, ka, gs, ga)| HyperParams {
                kappa_s: ks,
                kappa_a: ka,
                gamma_s: gs,
                gamma_a: ga,
                ..base.clone()
            })
            .collect();
        let group = run_group(&panel, &factors, &members, 61, 160, true).unwrap();
        for (hp, g) in members.iter().zip(group) {
            assert_eq!(g.unwrap(), run_backtest(&panel, &factors, hp, 61, 160).unwrap());
        }
        let mut other = members.clone();
        other[1].lambda_s = 0.9;
        assert!(run_group(&panel, &factors, &other, 61, 160, false).is_err());
    }

    #[test]
    fn truncation_does_not_change_prefix() {
        let (panel, factors) = small_market(4);
        let hp = fast_hp();
        let full = run_backtest(&panel, &factors, &hp, 61, 160).unwrap();
        let cut = panel.truncated(120);
        let cut_f = factors.truncated(120);
        let part = run_backtest(&cut, &cut_f, &hp, 61, 120).unwrap();
        let k = part.len();
        assert_eq!(part.period_returns, full.period_returns[..k]);
        assert_eq!(part.weights, full.weights.rows(0, k).into_owned());
    }

    #[test]
    fn benchmarks() {
        let dates = weekly_dates(NaiveDate::from_ymd_opt(2001, 1, 5).unwrap(), 4);
        let prices = DMatrix::from_row_slice(4, 3, &[
            1.0, 1.0, 1.0, 1.1, 1.2, 0.9, 1.21, 1.2, 0.99, 1.0, 1.32, 0.99,
        ]);
        let mv = DMatrix::from_fn(4, 3, |_, i| [50.0, 30.0, 20.0][i]);
        let bv = DMatrix::from_element(4, 3, 1.0);
        let panel = AssetPanel::from_prices(
            dates,
            vec!["A".into(), "B".into(), "C".into()],
            prices,
            vec![0.001; 4],
            vec![(MV.into(), mv), ("BVTP".into(), bv)],
            None,
        )
        .unwrap();
        let cap = run_benchmark(&panel, Benchmark::Cap, 10, 2, 4).unwrap();
        assert_relative_eq!(cap.weights.row(0).transpose(), DVector::from_vec(vec![0.5, 0.3, 0.2]), epsilon = 1e-15);
        let nd = run_benchmark(&panel, Benchmark::Nd, 10, 2, 4).unwrap();
        assert_relative_eq!(nd.period_returns[0], 0.2 / 3.0 - 0.001, epsilon = 1e-12);
        let rfr = run_benchmark(&panel, Benchmark::Rfr, 10, 2, 4).unwrap();
        assert_relative_eq!(*rfr.equity_curve.last().unwrap(), 1.001_f64.powi(2), epsilon = 1e-15);
        assert!(rfr.turnover.iter().all(|&t| t == 0.0));
        assert_eq!(nd.turnover[0], 1.0);
    }

    #[test]
    fn identical_assets_make_nd_and_cap_coincide() {
        let dates = weekly_dates(NaiveDate::from_ymd_opt(2001, 1, 5).unwrap(), 5);
        let prices = DMatrix::from_fn(5, 2, |t, _| 1.0 + 0.1 * t as f64);
        let mv = DMatrix::from_fn(5, 2, |t, _| 1.0 + t as f64);
        let panel = AssetPanel::from_prices(
            dates,
            vec!["A".into(), "B".into()],
            prices,
            vec![0.0; 5],
            vec![(MV.into(), mv)],
            None,
        )
        .unwrap();
        let nd = run_benchmark(&panel, Benchmark::Nd, 10, 2, 5).unwrap();
        let cap = run_benchmark(&panel, Benchmark::Cap, 10, 2, 5).unwrap();
        assert_eq!(nd.period_returns, cap.period_returns);
    }

    #[test]
    fn liquidated_position_earns_cash() {
        let dates = weekly_dates(NaiveDate::from_ymd_opt(2001, 1, 5).unwrap(), 4);
        let prices = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 1.1, 1.0, f64::NAN, 1.1, f64::NAN, 1.1]);
        let mv = DMatrix::from_element(4, 2, 1.0);
        let panel = AssetPanel::from_prices(
            dates,
            vec!["A".into(), "B".into()],
            prices,
            vec![0.01; 4],
            vec![(MV.into(), mv)],
            None,
        )
        .unwrap();
        let nd = run_benchmark(&panel, Benchmark::Nd, 10, 2, 4).unwrap();
        // A disappears at t = 2: half the book earns rf, B earns 10%.
        assert_relative_eq!(nd.total_returns[0], 0.5 * 0.01 + 0.5 * 0.1, epsilon = 1e-12);
        assert_eq!(panel.masked_reads(), 0);
    }

    #[test]
    fn sharpe_examples() {
        assert_eq!(sharpe_ratio(&[0.0; 10]).unwrap(), 0.0);
        assert_eq!(sharpe_ratio(&[0.01, -0.01, 0.01, -0.01]).unwrap(), 0.0);
        assert_relative_eq!(sharpe_ratio(&[0.02, 0.0, 0.04]).unwrap(), 1.0, epsilon = 1e-12);
        assert!(matches!(sharpe_ratio(&[0.01; 5]), Err(Error::ZeroVariance)));
        assert!(sharpe_ratio(&[0.01]).is_err());
        assert_relative_eq!(max_drawdown(&[1.0, 1.2, 0.9, 1.3]), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn digest_tracks_every_field() {
        let a = HyperParams::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.gamma_a = 11.0;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.model_key(), b.model_key());
        b.lambda_a = 0.9;
        assert_ne!(a.model_key(), b.model_key());
    }

    #[test]
    fn csv_outputs_carry_digest() {
        let (panel, factors) = small_market(6);
        let r = run_backtest(&panel, &factors, &fast_hp(), 61, 100).unwrap();
        let nd = run_benchmark(&panel, Benchmark::Nd, 100, 61, 100).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("equity_curve.csv");
        write_equity_curves(&p, &r.config_digest, &[&r, &nd]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), format!("# config_digest={}", r.config_digest));
        assert_eq!(lines.next().unwrap(), "date,algo,nd");
        assert_eq!(text.lines().count(), 2 + r.len() + 1);
        write_components(&dir.path().join("c.csv"), &r).unwrap();
        write_weights(&dir.path().join("w.csv"), &r).unwrap();
    }
}
