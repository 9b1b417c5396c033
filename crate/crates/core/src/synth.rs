//! Synthetic markets with known factor loadings and characteristic payoffs.
//!
//! Excess returns are composed as
//! `r_{i,t} = α_i + Σ_p β_ip f_{p,t} + δ_t · [1, θ_{i,t-1}] + ε_{i,t}`
//! where `θ` are persistent characteristic scores and `δ_t` are the planted
//! payoffs, optionally decaying with a half-life.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::data::{compute_momentum, weekly_dates, AssetPanel, FactorSeries, BVTP, MV};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Innovations {
    Gaussian,
    /// Student-t scaled to unit variance.
    StudentT { df: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_assets: usize,
    pub n_periods: usize,
    /// Loadings, N×P.
    pub true_betas: DMatrix<f64>,
    /// Per-asset constant alpha.
    pub true_alphas: DVector<f64>,
    pub factor_premia: DVector<f64>,
    pub factor_vol: DVector<f64>,
    pub idio_vol: DVector<f64>,
    /// Intercept followed by one payoff per characteristic score.
    pub planted_payoffs: DVector<f64>,
    pub payoff_half_life: Option<f64>,
    /// AR(1) coefficient of the characteristic scores.
    pub char_persistence: f64,
    pub rf: f64,
    /// Probability that a price observation is missing.
    pub missing_prob: f64,
    pub innovations: Innovations,
    pub start_date: NaiveDate,
    pub seed: u64,
}

impl GeneratorSpec {
    /// Two factors, one BVTP score with a weekly payoff of 0.004, loadings
    /// drawn from the seed.
    pub fn new(n_assets: usize, n_periods: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let p = 2;
        let true_betas = DMatrix::from_fn(n_assets, p, |_, _| 0.5 + 0.5 * rng.sample::<f64, _>(StandardNormal));
        Self {
            n_assets,
            n_periods,
            true_betas,
            true_alphas: DVector::zeros(n_assets),
            factor_premia: DVector::from_element(p, 0.001),
            factor_vol: DVector::from_element(p, 0.02),
            idio_vol: DVector::from_element(n_assets, 0.03),
            planted_payoffs: DVector::from_vec(vec![0.0, 0.004]),
            payoff_half_life: None,
            char_persistence: 0.98,
            rf: 0.0005,
            missing_prob: 0.0,
            innovations: Innovations::Gaussian,
            start_date: NaiveDate::from_ymd_opt(2000, 1, 7).unwrap(),
            seed,
        }
    }

    pub fn n_factors(&self) -> usize {
        self.true_betas.ncols()
    }

    /// Number of characteristic scores.
    pub fn n_chars(&self) -> usize {
        self.planted_payoffs.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, p) = (self.n_assets, self.n_factors());
        if n == 0 || self.n_periods < 2 {
            return Err(Error::invalid("generator needs at least one asset and two periods"));
        }
        if self.true_betas.nrows() != n
            || self.true_alphas.len() != n
            || self.idio_vol.len() != n
            || self.factor_vol.len() != p
            || self.factor_premia.len() != p
        {
            return Err(Error::Dimension("generator spec dimensions disagree".into()));
        }
        if self.planted_payoffs.is_empty() {
            return Err(Error::invalid("planted payoffs need at least the intercept"));
        }
        if self.factor_vol.iter().chain(self.idio_vol.iter()).any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("volatilities must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.char_persistence.abs()) {
            return Err(Error::invalid("characteristic persistence must lie in (-1, 1)"));
        }
        if !(0.0..1.0).contains(&self.missing_prob) {
            return Err(Error::invalid("missing probability must lie in [0, 1)"));
        }
        if let Innovations::StudentT { df } = self.innovations {
            if !(df > 2.0) {
                return Err(Error::invalid("Student-t innovations need df > 2"));
            }
        }
        if self.payoff_half_life.is_some_and(|h| !(h > 0.0)) {
            return Err(Error::invalid("payoff half-life must be positive"));
        }
        Ok(())
    }

    pub fn payoff_at(&self, t: usize) -> DVector<f64> {
        match self.payoff_half_life {
            Some(h) => &self.planted_payoffs * 0.5_f64.powf(t as f64 / h),
            None => self.planted_payoffs.clone(),
        }
    }
}

/// What the generator actually drew.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub betas: DMatrix<f64>,
    pub alphas: DVector<f64>,
    /// T×P factor realizations (row 0 unused).
    pub factor_returns: DMatrix<f64>,
    /// T×(M+1) payoffs applied in each period.
    pub payoffs: DMatrix<f64>,
    /// T×N characteristic scores per score index.
    pub scores: Vec<DMatrix<f64>>,
    /// T×N excess returns before any masking.
    pub excess_returns: DMatrix<f64>,
}

/// Names of the generated score characteristics; the first is BVTP.
pub fn score_names(m: usize) -> Vec<String> {
    (0..m)
        .map(|k| if k == 0 { BVTP.to_string() } else { format!("SCORE{}", k + 1) })
        .collect()
}

struct Draw {
    rng: ChaCha8Rng,
    innovations: Innovations,
    t_dist: Option<(StudentT<f64>, f64)>,
}

impl Draw {
    fn shock(&mut self) -> f64 {
        match (self.innovations, &self.t_dist) {
            (Innovations::StudentT { .. }, Some((d, scale))) => d.sample(&mut self.rng) * scale,
            _ => self.rng.sample(StandardNormal),
        }
    }
}

/// Panel (with MV, score and momentum characteristics), true factor series
/// and the truth record.
pub fn generate(spec: &GeneratorSpec) -> Result<(AssetPanel, FactorSeries, Truth)> {
    spec.validate()?;
    let (n, t_len, p, m) = (spec.n_assets, spec.n_periods, spec.n_factors(), spec.n_chars());
    let t_dist = match spec.innovations {
        Innovations::StudentT { df } => Some((
            StudentT::new(df).map_err(|e| Error::invalid(e.to_string()))?,
            ((df - 2.0) / df).sqrt(),
        )),
        Innovations::Gaussian => None,
    };
    let mut draw = Draw {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        innovations: spec.innovations,
        t_dist,
    };

    let shares: Vec<f64> = (0..n).map(|_| (1.0 + 0.5 * draw.shock()).exp() * 1e6).collect();
    let rho = spec.char_persistence;
    let innov_scale = (1.0 - rho * rho).sqrt();
    let mut scores = vec![DMatrix::zeros(t_len, n); m];
    for score in scores.iter_mut() {
        for i in 0..n {
            score[(0, i)] = draw.shock();
        }
    }
    let mut factors = DMatrix::from_element(t_len, p, f64::NAN);
    let mut payoffs = DMatrix::zeros(t_len, m + 1);
    let mut excess = DMatrix::zeros(t_len, n);
    let mut prices = DMatrix::zeros(t_len, n);
    for i in 0..n {
        prices[(0, i)] = 100.0;
    }
    for t in 1..t_len {
        for k in 0..p {
            factors[(t, k)] = spec.factor_premia[k] + spec.factor_vol[k] * draw.shock();
        }
        let delta = spec.payoff_at(t);
        payoffs.set_row(t, &delta.transpose());
        for i in 0..n {
            let mut r = spec.true_alphas[i] + delta[0];
            for k in 0..p {
                r += spec.true_betas[(i, k)] * factors[(t, k)];
            }
            for (k, score) in scores.iter().enumerate() {
                r += delta[k + 1] * score[(t - 1, i)];
            }
            r += spec.idio_vol[i] * draw.shock();
            // Keep prices strictly positive under extreme draws.
            let r = r.max(-0.95 - spec.rf);
            excess[(t, i)] = r;
            prices[(t, i)] = prices[(t - 1, i)] * (1.0 + spec.rf + r);
        }
        for score in scores.iter_mut() {
            for i in 0..n {
                score[(t, i)] = rho * score[(t - 1, i)] + innov_scale * draw.shock();
            }
        }
    }
    if spec.missing_prob > 0.0 {
        for t in 1..t_len {
            for i in 0..n {
                if draw.rng.random::<f64>() < spec.missing_prob {
                    prices[(t, i)] = f64::NAN;
                }
            }
        }
    }
    let mv = DMatrix::from_fn(t_len, n, |t, i| prices[(t, i)] * shares[i]);
    let mut chars = vec![(MV.to_string(), mv)];
    for (name, score) in score_names(m).into_iter().zip(scores.iter()) {
        chars.push((name, score.clone()));
    }
    let panel = AssetPanel::from_prices(
        weekly_dates(spec.start_date, t_len),
        (0..n).map(|i| format!("S{i:04}")).collect(),
        prices,
        vec![spec.rf; t_len],
        chars,
        None,
    )?;
    let panel = compute_momentum(&panel)?;
    let names = if p == 2 {
        vec!["SMB".to_string(), "HML".to_string()]
    } else {
        (0..p).map(|k| format!("F{}", k + 1)).collect()
    };
    let factor_series = FactorSeries::from_matrix(names, factors.clone())?;
    Ok((
        panel,
        factor_series,
        Truth {
            betas: spec.true_betas.clone(),
            alphas: spec.true_alphas.clone(),
            factor_returns: factors,
            payoffs,
            scores,
            excess_returns: excess,
        },
    ))
}
