//! Conditional factor model and characteristic model.
//!
//! Risk premia come from time-series filters on factor returns; active
//! returns come from cross-sectional characteristic payoffs. Alpha is always
//! the characteristic forecast minus the systematic one and is never stored
//! on its own.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{AssetPanel, BVTP, MOML, MOMS, MV};
use crate::error::{Error, Result};
use crate::filters::{
    cross_sectional_regress, EwmaCovState, EwmaMeanState, RlmaConfig, RlmaState,
};

/// The four characteristic-model variants searched during calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActiveModel {
    /// BVTP, MV, MOMS, MOML
    Full,
    /// BVTP, MV
    ValueSize,
    /// MOMS, MOML
    Momentum,
    /// BVTP, MOML
    ValueMomentum,
}

impl ActiveModel {
    pub const ALL: [ActiveModel; 4] = [
        ActiveModel::Full,
        ActiveModel::ValueSize,
        ActiveModel::Momentum,
        ActiveModel::ValueMomentum,
    ];

    pub fn characteristics(self) -> &'static [&'static str] {
        match self {
            ActiveModel::Full => &[BVTP, MV, MOMS, MOML],
            ActiveModel::ValueSize => &[BVTP, MV],
            ActiveModel::Momentum => &[MOMS, MOML],
            ActiveModel::ValueMomentum => &[BVTP, MOML],
        }
    }

    pub fn id(self) -> usize {
        Self::ALL.iter().position(|&m| m == self).unwrap()
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }
}

/// N×M exposure matrix for period `t`. MV enters as its logarithm; with
/// `standardize`, each column is z-scored over the rows in `mask` that have
/// a value. Missing exposures are NaN.
pub fn characteristic_matrix(
    panel: &AssetPanel,
    t: usize,
    names: &[&str],
    mask: &[bool],
    standardize: bool,
) -> Result<DMatrix<f64>> {
    let n = panel.n_assets();
    let mut out = DMatrix::from_element(n, names.len(), f64::NAN);
    for (c, name) in names.iter().enumerate() {
        let k = panel
            .characteristic_index(name)
            .ok_or_else(|| Error::InsufficientData(format!("panel has no {name} characteristic")))?;
        for i in (0..n).filter(|&i| mask[i]) {
            if let Some(v) = panel.characteristic(t, i, k) {
                out[(i, c)] = if *name == MV { v.ln() } else { v };
            }
        }
        if standardize {
            let vals: Vec<f64> = (0..n)
                .map(|i| out[(i, c)])
                .filter(|v| v.is_finite())
                .collect();
            if vals.len() >= 2 {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                    / (vals.len() - 1) as f64;
                let sd = var.sqrt();
                for i in 0..n {
                    let v = out[(i, c)];
                    if v.is_finite() {
                        out[(i, c)] = if sd > 0.0 { (v - mean) / sd } else { 0.0 };
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorModelConfig {
    pub rlma: RlmaConfig,
    /// Add `f ⊗ θ` terms to the loadings.
    pub char_interactions: bool,
    /// Add `f ⊗ z` terms to the loadings.
    pub macro_interactions: bool,
    /// Memory of the factor second-moment estimate used to normalize features.
    pub feature_scale_lambda: f64,
}

impl Default for FactorModelConfig {
    fn default() -> Self {
        Self {
            rlma: RlmaConfig::default(),
            char_interactions: false,
            macro_interactions: false,
            feature_scale_lambda: 0.98,
        }
    }
}

/// Per-asset time-varying alphas and loadings, idiosyncratic variances, and
/// factor premia and covariance.
///
/// Each asset's filter sees `[1, f̃, f̃⊗θ, f̃⊗z]` where `f̃ = f / s` and `s` is
/// the running RMS of each factor, so the normalized step treats the
/// intercept and the loadings on a comparable scale.
#[derive(Debug, Clone)]
pub struct FactorModelState {
    config: FactorModelConfig,
    n_factors: usize,
    n_chars: usize,
    n_macro: usize,
    filters: Vec<RlmaState>,
    idio_var: Vec<f64>,
    observations: Vec<u64>,
    idio_lambda: f64,
    premia: EwmaMeanState,
    factor_cov: EwmaCovState,
    feature_scale: EwmaMeanState,
}

impl FactorModelState {
    /// `strategic_lambda` drives the premia, factor covariance and idiosyncratic variances.
    pub fn new(
        n_assets: usize,
        n_factors: usize,
        n_chars: usize,
        n_macro: usize,
        strategic_lambda: f64,
        config: FactorModelConfig,
    ) -> Result<Self> {
        let n_chars = if config.char_interactions { n_chars } else { 0 };
        let n_macro = if config.macro_interactions { n_macro } else { 0 };
        let dim = 1 + n_factors * (1 + n_chars + n_macro);
        let filter = RlmaState::new(dim, config.rlma)?;
        Ok(Self {
            config,
            n_factors,
            n_chars,
            n_macro,
            filters: vec![filter; n_assets],
            idio_var: vec![0.0; n_assets],
            observations: vec![0; n_assets],
            idio_lambda: strategic_lambda,
            premia: EwmaMeanState::new(n_factors, strategic_lambda)?,
            factor_cov: EwmaCovState::new(n_factors, strategic_lambda)?,
            feature_scale: EwmaMeanState::new(n_factors, config.feature_scale_lambda)?,
        })
    }

    pub fn config(&self) -> &FactorModelConfig {
        &self.config
    }

    pub fn n_assets(&self) -> usize {
        self.filters.len()
    }

    pub fn n_factors(&self) -> usize {
        self.n_factors
    }

    fn scales(&self) -> DVector<f64> {
        self.feature_scale
            .mean()
            .map(|m| if m > 0.0 { m.sqrt() } else { 1.0 })
    }

    fn features(
        &self,
        f_scaled: &DVector<f64>,
        theta: Option<nalgebra::DVectorView<'_, f64>>,
        z: &DVector<f64>,
    ) -> DVector<f64> {
        let p = self.n_factors;
        let mut phi = DVector::zeros(1 + p * (1 + self.n_chars + self.n_macro));
        phi[0] = 1.0;
        let mut k = 1;
        for j in 0..p {
            phi[k] = f_scaled[j];
            k += 1;
        }
        for j in 0..p {
            for m in 0..self.n_chars {
                let th = theta.as_ref().map(|v| v[m]).filter(|v| v.is_finite()).unwrap_or(0.0);
                phi[k] = f_scaled[j] * th;
                k += 1;
            }
            for q in 0..self.n_macro {
                phi[k] = f_scaled[j] * z[q];
                k += 1;
            }
        }
        phi
    }

    fn check_conditioning(&self, chars: &DMatrix<f64>, macro_t: &DVector<f64>) -> Result<()> {
        if self.n_chars > 0 && (chars.nrows() != self.n_assets() || chars.ncols() < self.n_chars) {
            return Err(Error::Dimension(format!(
                "conditioning characteristics are {:?}, need ({}, {})",
                chars.shape(),
                self.n_assets(),
                self.n_chars
            )));
        }
        if self.n_macro > 0 && macro_t.len() < self.n_macro {
            return Err(Error::Dimension("macro vector too short".into()));
        }
        Ok(())
    }

    /// Folds in period `t`. `chars` and `macro_t` are the conditioning
    /// information from `t - 1`. A missing factor return freezes every state.
    pub fn update(
        &mut self,
        factor_returns: Option<&DVector<f64>>,
        excess_returns: &DVector<f64>,
        macro_t: &DVector<f64>,
        chars: &DMatrix<f64>,
        mask: &[bool],
    ) -> Result<()> {
        let Some(f) = factor_returns else {
            return Ok(());
        };
        if f.len() != self.n_factors
            || excess_returns.len() != self.n_assets()
            || mask.len() != self.n_assets()
        {
            return Err(Error::Dimension("factor model update inputs misaligned".into()));
        }
        self.check_conditioning(chars, macro_t)?;
        if !self.feature_scale.is_initialized() {
            self.feature_scale.update(&f.component_mul(f))?;
        }
        let f_scaled = f.component_div(&self.scales());
        for i in (0..self.n_assets()).filter(|&i| mask[i]) {
            let theta = (self.n_chars > 0).then(|| chars.row(i).transpose());
            let phi = self.features(
                &f_scaled,
                theta.as_ref().map(|v| v.rows(0, self.n_chars)),
                macro_t,
            );
            let e = self.filters[i].update(&phi, excess_returns[i])?;
            self.idio_var[i] = if self.observations[i] == 0 {
                e * e
            } else {
                self.idio_lambda * self.idio_var[i] + (1.0 - self.idio_lambda) * e * e
            };
            self.observations[i] += 1;
        }
        self.premia.update(f)?;
        self.factor_cov.update(f)?;
        self.feature_scale.update(&f.component_mul(f))?;
        Ok(())
    }

    /// N×P loadings assembled from the current coefficients and conditioning
    /// information.
    pub fn betas(&self, chars: &DMatrix<f64>, macro_t: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_conditioning(chars, macro_t)?;
        let p = self.n_factors;
        let s = self.scales();
        let per_factor = self.n_chars + self.n_macro;
        Ok(DMatrix::from_fn(self.n_assets(), p, |i, j| {
            let c = self.filters[i].coef();
            let mut b = c[1 + j];
            let base = 1 + p + j * per_factor;
            for m in 0..self.n_chars {
                let th = chars[(i, m)];
                if th.is_finite() {
                    b += c[base + m] * th;
                }
            }
            for q in 0..self.n_macro {
                b += c[base + self.n_chars + q] * macro_t[q];
            }
            b / s[j]
        }))
    }

    /// Time-varying intercepts (the asset-level alpha terms). These are kept
    /// out of the systematic forecast.
    pub fn intercepts(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_assets(), self.filters.iter().map(|f| f.coef()[0]))
    }

    /// `π_i = Σ_p β_ip · E[f_p]` on masked-in assets; zero elsewhere.
    pub fn forecast_systematic(
        &self,
        chars: &DMatrix<f64>,
        macro_t: &DVector<f64>,
        mask: &[bool],
    ) -> Result<DVector<f64>> {
        if !self.premia.is_initialized() {
            return Err(Error::Uninitialized("factor premia"));
        }
        let b = self.betas(chars, macro_t)?;
        let mut pi = &b * self.premia.mean();
        for i in 0..pi.len() {
            if !mask[i] {
                pi[i] = 0.0;
            }
        }
        Ok(pi)
    }

    pub fn idio_var(&self) -> &[f64] {
        &self.idio_var
    }

    pub fn observations(&self, i: usize) -> u64 {
        self.observations[i]
    }

    pub fn premia(&self) -> &EwmaMeanState {
        &self.premia
    }

    pub fn factor_cov(&self) -> &EwmaCovState {
        &self.factor_cov
    }

    pub fn filter(&self, i: usize) -> &RlmaState {
        &self.filters[i]
    }
}

/// EWMA-smoothed cross-sectional payoffs `δ` (intercept first).
#[derive(Debug, Clone)]
pub struct CharModelState {
    payoff_ewma: EwmaMeanState,
    last_exposures: Option<DMatrix<f64>>,
}

impl CharModelState {
    pub fn new(n_chars: usize, active_lambda: f64) -> Result<Self> {
        Ok(Self {
            payoff_ewma: EwmaMeanState::new(n_chars + 1, active_lambda)?,
            last_exposures: None,
        })
    }

    /// Regresses period-`t` excess returns on `t - 1` exposures. Returns the
    /// raw payoffs, or `None` when the cross-section was too thin (the
    /// smoothed payoffs are then left as they were).
    pub fn update(
        &mut self,
        exposures: &DMatrix<f64>,
        excess_returns: &DVector<f64>,
        mask: &[bool],
    ) -> Result<Option<DVector<f64>>> {
        let rows: Vec<bool> = (0..mask.len())
            .map(|i| mask[i] && exposures.row(i).iter().all(|v| v.is_finite()))
            .collect();
        match cross_sectional_regress(exposures, excess_returns, &rows) {
            Ok(delta) => {
                self.payoff_ewma.update(&delta)?;
                Ok(Some(delta))
            }
            Err(Error::InsufficientData(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// `μ_i = [1, θ_i] · δ̄` and a flag per asset telling whether its
    /// exposures were complete. Incomplete or masked rows get 0.
    pub fn forecast(
        &mut self,
        exposures: &DMatrix<f64>,
        mask: &[bool],
    ) -> Result<(DVector<f64>, Vec<bool>)> {
        if !self.payoff_ewma.is_initialized() {
            return Err(Error::Uninitialized("characteristic payoffs"));
        }
        let delta = self.payoff_ewma.mean();
        if exposures.ncols() + 1 != delta.len() {
            return Err(Error::Dimension("exposures do not match payoff dimension".into()));
        }
        let n = exposures.nrows();
        let mut mu = DVector::zeros(n);
        let mut ok = vec![false; n];
        for i in 0..n {
            let row = exposures.row(i);
            if mask[i] && row.iter().all(|v| v.is_finite()) {
                mu[i] = delta[0] + row.iter().zip(delta.iter().skip(1)).map(|(a, b)| a * b).sum::<f64>();
                ok[i] = true;
            }
        }
        self.last_exposures = Some(exposures.clone());
        Ok((mu, ok))
    }

    pub fn payoffs(&self) -> &DVector<f64> {
        self.payoff_ewma.mean()
    }

    pub fn is_initialized(&self) -> bool {
        self.payoff_ewma.is_initialized()
    }

    pub fn last_exposures(&self) -> Option<&DMatrix<f64>> {
        self.last_exposures.as_ref()
    }
}

/// Forecasts emitted at period `t` for period `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnForecast {
    pub t: usize,
    pub pi: DVector<f64>,
    pub mu: DVector<f64>,
    /// Assets the forecast covers (investible at `t`).
    pub defined: Vec<bool>,
    /// Subset of `defined` whose characteristic forecast is genuine; elsewhere
    /// `mu` equals `pi`.
    pub mu_defined: Vec<bool>,
}

impl ReturnForecast {
    pub fn alpha(&self) -> DVector<f64> {
        &self.mu - &self.pi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastErrors {
    pub e_pi: DVector<f64>,
    pub e_mu: DVector<f64>,
    pub valid_pi: Vec<bool>,
    pub valid_mu: Vec<bool>,
}

/// Realized minus forecast, on assets that were both forecast and observed.
/// Other entries are 0 and flagged invalid.
pub fn record_forecast_errors(
    forecast: &ReturnForecast,
    realized: &DVector<f64>,
    realized_t: usize,
    mask: &[bool],
) -> Result<ForecastErrors> {
    if forecast.t + 1 != realized_t {
        return Err(Error::PeriodMismatch {
            forecast: forecast.t,
            realized: realized_t,
        });
    }
    let n = forecast.pi.len();
    if realized.len() != n || mask.len() != n {
        return Err(Error::Dimension("forecast errors: length mismatch".into()));
    }
    let valid_pi: Vec<bool> = (0..n).map(|i| forecast.defined[i] && mask[i]).collect();
    let valid_mu: Vec<bool> = (0..n).map(|i| valid_pi[i] && forecast.mu_defined[i]).collect();
    let e_pi = DVector::from_fn(n, |i, _| if valid_pi[i] { realized[i] - forecast.pi[i] } else { 0.0 });
    let e_mu = DVector::from_fn(n, |i, _| if valid_mu[i] { realized[i] - forecast.mu[i] } else { 0.0 });
    Ok(ForecastErrors {
        e_pi,
        e_mu,
        valid_pi,
        valid_mu,
    })
}
