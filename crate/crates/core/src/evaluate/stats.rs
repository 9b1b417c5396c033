//! Sharpe-ratio inference under non-normal returns and multiple testing.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};

pub const EULER_MASCHERONI: f64 = 0.577_215_664_901_532_9;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Per-period Sharpe ratio with its sample size and higher moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReturnMoments {
    pub sr: f64,
    pub n: usize,
    pub skew: f64,
    /// Non-excess kurtosis (3 for a normal distribution).
    pub kurt: f64,
}

/// SR uses the sample standard deviation; skewness and kurtosis use
/// population central moments.
pub fn return_moments(returns: &[f64]) -> Result<ReturnMoments> {
    let sr = crate::backtest::sharpe_ratio(returns)?;
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for r in returns {
        let d = r - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    let (skew, kurt) = if m2 > 0.0 { (m3 / m2.powf(1.5), m4 / (m2 * m2)) } else { (0.0, 3.0) };
    Ok(ReturnMoments {
        sr,
        n: returns.len(),
        skew,
        kurt,
    })
}

/// Probability that the true SR exceeds `sr_benchmark`, correcting for
/// sample length, skewness and kurtosis.
pub fn probabilistic_sr(sr_hat: f64, sr_benchmark: f64, t: usize, skew: f64, kurt: f64) -> Result<f64> {
    if t < 2 {
        return Err(Error::InsufficientData(format!("probabilistic SR needs 2 periods, got {t}")));
    }
    if ![sr_hat, sr_benchmark, skew, kurt].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("probabilistic_sr"));
    }
    let denom = 1.0 - skew * sr_hat + (kurt - 1.0) / 4.0 * sr_hat * sr_hat;
    if !(denom > 0.0) {
        return Err(Error::invalid(format!(
            "probabilistic SR denominator {denom} is not positive (sr {sr_hat}, skew {skew}, kurt {kurt})"
        )));
    }
    let z = (sr_hat - sr_benchmark) * ((t - 1) as f64).sqrt() / denom.sqrt();
    Ok(std_normal().cdf(z))
}

/// Expected maximum SR among `n_trials` unskilled trials whose SR estimates
/// have variance `var_trial_sr`.
pub fn expected_max_sr(n_trials: usize, var_trial_sr: f64) -> Result<f64> {
    if n_trials == 0 {
        return Err(Error::invalid("n_trials must be at least 1"));
    }
    if !(var_trial_sr >= 0.0 && var_trial_sr.is_finite()) {
        return Err(Error::invalid(format!("trial SR variance {var_trial_sr} must be non-negative")));
    }
    if n_trials == 1 || var_trial_sr == 0.0 {
        return Ok(0.0);
    }
    let n = n_trials as f64;
    let z = std_normal();
    let a = z.inverse_cdf(1.0 - 1.0 / n);
    let b = z.inverse_cdf(1.0 - 1.0 / (n * std::f64::consts::E));
    Ok(var_trial_sr.sqrt() * ((1.0 - EULER_MASCHERONI) * a + EULER_MASCHERONI * b))
}

/// PSR against the expected maximum SR of `n_trials` unskilled trials.
pub fn deflated_sr(
    sr_hat: f64,
    t: usize,
    skew: f64,
    kurt: f64,
    n_trials: usize,
    var_trial_sr: f64,
) -> Result<f64> {
    probabilistic_sr(sr_hat, expected_max_sr(n_trials, var_trial_sr)?, t, skew, kurt)
}

/// Bonferroni-adjusted SR: the SR whose two-sided p-value equals
/// `min(1, p·n_trials)`. Zero when no significance survives.
pub fn haircut_sr(sr_hat: f64, t: usize, n_trials: usize) -> f64 {
    if t < 2 || n_trials == 0 || !sr_hat.is_finite() {
        return 0.0;
    }
    let scale = ((t - 1) as f64).sqrt();
    let stat = sr_hat.abs() * scale;
    let p = erfc(stat / std::f64::consts::SQRT_2);
    if n_trials == 1 {
        return sr_hat;
    }
    let adjusted = (p * n_trials as f64).min(1.0);
    if adjusted >= 1.0 {
        return 0.0;
    }
    if adjusted == 0.0 {
        return sr_hat;
    }
    sr_hat.signum() * std::f64::consts::SQRT_2 * erfc_inv(adjusted) / scale
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// OLS of out-of-sample SR on in-sample SR.
pub fn is_oos_regression(pairs: &[(f64, f64)]) -> Result<Regression> {
    if pairs.len() < 3 {
        return Err(Error::InsufficientData(format!("regression needs 3 pairs, got {}", pairs.len())));
    }
    if pairs.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::NonFinite("is_oos_regression"));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if !(sxx > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok(Regression {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}
