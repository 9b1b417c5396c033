//! Mixing of systematic and active forecasts, and the covariance stack.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::EwmaCovState;
use crate::linalg::{cholesky, symmetrize, SOLVE_RIDGE};
use crate::pricing::ForecastErrors;

/// Floor on the smallest eigenvalue after shrinkage, relative to `trace / N`.
pub const EIGEN_FLOOR: f64 = 1e-8;

/// Running covariances of the two forecast-error streams.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyState {
    pub omega_pi: EwmaCovState,
    pub omega_mu: EwmaCovState,
}

impl UncertaintyState {
    /// `diagonal` keeps only variances, which is the stable choice when the
    /// memory is short relative to the number of assets.
    pub fn new(n_assets: usize, lambda_pi: f64, lambda_mu: f64, diagonal: bool) -> Result<Self> {
        Ok(Self {
            omega_pi: EwmaCovState::with_options(n_assets, lambda_pi, EwmaCovState::DEFAULT_RIDGE, diagonal)?,
            omega_mu: EwmaCovState::with_options(n_assets, lambda_mu, EwmaCovState::DEFAULT_RIDGE, diagonal)?,
        })
    }

    pub fn update(&mut self, errors: &ForecastErrors) -> Result<()> {
        self.omega_pi.update_masked(&errors.e_pi, &errors.valid_pi)?;
        self.omega_mu.update_masked(&errors.e_mu, &errors.valid_mu)?;
        Ok(())
    }

    /// True once both error streams have been observed for asset `i`.
    pub fn seen(&self, i: usize) -> bool {
        self.omega_pi.seen(i) && self.omega_mu.seen(i)
    }
}

pub fn update_uncertainty(state: &mut UncertaintyState, errors: &ForecastErrors) -> Result<()> {
    state.update(errors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendedForecast {
    pub mu_bl: DVector<f64>,
    pub psi: DMatrix<f64>,
    pub alpha_bl: DVector<f64>,
    /// Uncertainty of the mixed estimate, `[Ω_π⁻¹ + Ω_μ⁻¹]⁻¹`.
    pub uncertainty: DMatrix<f64>,
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    (0..n).all(|i| (0..n).all(|j| i == j || m[(i, j)] == 0.0))
}

/// Precision-weighted mix of `pi` and `mu`.
///
/// With `A = Ω_π` and `C = Ω_μ`, `Ψ = A(A + C)⁻¹`, the mix is
/// `π + Ψ(μ - π)` and its uncertainty is `Ψ·C`.
pub fn mixed_estimate(
    pi: &DVector<f64>,
    mu: &DVector<f64>,
    omega_pi: &DMatrix<f64>,
    omega_mu: &DMatrix<f64>,
) -> Result<BlendedForecast> {
    let n = pi.len();
    if mu.len() != n || omega_pi.shape() != (n, n) || omega_mu.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "mixed estimate: pi {n}, mu {}, omega_pi {:?}, omega_mu {:?}",
            mu.len(),
            omega_pi.shape(),
            omega_mu.shape()
        )));
    }
    if pi.iter().chain(mu.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mixed_estimate"));
    }
    let alpha = mu - pi;
    let (psi, uncertainty) = if is_diagonal(omega_pi) && is_diagonal(omega_mu) {
        let mut psi = DMatrix::zeros(n, n);
        let mut unc = DMatrix::zeros(n, n);
        for i in 0..n {
            let (mut a, mut c) = (omega_pi[(i, i)], omega_mu[(i, i)]);
            if !(a + c > 0.0) {
                a += SOLVE_RIDGE;
                c += SOLVE_RIDGE;
            }
            let s = a + c;
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Singular {
                    context: "mixed estimate",
                    condition: f64::INFINITY,
                });
            }
            psi[(i, i)] = a / s;
            unc[(i, i)] = a * c / s;
        }
        (psi, unc)
    } else {
        let chol = cholesky(&(omega_pi + omega_mu), "mixed estimate")?;
        // (A + C)⁻¹ A = Ψᵀ
        let psi = chol.solve(omega_pi).transpose();
        let mut unc = &psi * omega_mu;
        symmetrize(&mut unc);
        (psi, unc)
    };
    let alpha_bl = &psi * alpha;
    Ok(BlendedForecast {
        mu_bl: pi + &alpha_bl,
        psi,
        alpha_bl,
        uncertainty,
    })
}

/// `B Σ_f Bᵀ + diag(ε)`.
pub fn conditional_covariance(
    betas: &DMatrix<f64>,
    sigma_f: &DMatrix<f64>,
    idio_var: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let (n, p) = betas.shape();
    if sigma_f.shape() != (p, p) || idio_var.len() != n {
        return Err(Error::Dimension(format!(
            "conditional covariance: B {:?}, sigma_f {:?}, idio {}",
            betas.shape(),
            sigma_f.shape(),
            idio_var.len()
        )));
    }
    let mut s = betas * sigma_f * betas.transpose();
    for i in 0..n {
        s[(i, i)] += idio_var[i];
    }
    symmetrize(&mut s);
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShrinkTarget {
    /// Average variance times the identity.
    #[default]
    ScaledIdentity,
    /// Own variances with the average pairwise correlation.
    ConstantCorrelation,
}

pub fn shrinkage_target(sigma: &DMatrix<f64>, target: ShrinkTarget) -> DMatrix<f64> {
    let n = sigma.nrows();
    match target {
        ShrinkTarget::ScaledIdentity => {
            let avg = if n == 0 { 0.0 } else { sigma.trace() / n as f64 };
            DMatrix::from_diagonal_element(n, n, avg)
        }
        ShrinkTarget::ConstantCorrelation => {
            let sd: Vec<f64> = (0..n).map(|i| sigma[(i, i)].max(0.0).sqrt()).collect();
            let mut sum = 0.0;
            let mut count = 0usize;
            for i in 0..n {
                for j in (i + 1)..n {
                    if sd[i] > 0.0 && sd[j] > 0.0 {
                        sum += sigma[(i, j)] / (sd[i] * sd[j]);
                        count += 1;
                    }
                }
            }
            let rbar = if count == 0 { 0.0 } else { sum / count as f64 };
            DMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    sigma[(i, i)]
                } else {
                    rbar * sd[i] * sd[j]
                }
            })
        }
    }
}

/// Adds the smallest multiple of the identity that lifts the minimum
/// eigenvalue to `EIGEN_FLOOR * trace / N`.
pub fn floor_eigenvalues(sigma: &mut DMatrix<f64>) {
    let n = sigma.nrows();
    if n == 0 {
        return;
    }
    let floor = EIGEN_FLOOR * (sigma.trace() / n as f64).max(f64::MIN_POSITIVE);
    let mut shifted = sigma.clone();
    for i in 0..n {
        shifted[(i, i)] -= floor;
    }
    if shifted.cholesky().is_some() {
        return;
    }
    let min = SymmetricEigen::new(sigma.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let lift = floor - min;
    if lift > 0.0 {
        for i in 0..n {
            sigma[(i, i)] += lift;
        }
    }
}

/// `κ Σ* + (1 - κ) Σ`, then floored.
pub fn shrink_covariance_to(sigma: &DMatrix<f64>, kappa: f64, target: ShrinkTarget) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::invalid(format!("shrinkage intensity {kappa} outside [0, 1]")));
    }
    if sigma.nrows() != sigma.ncols() {
        return Err(Error::Dimension("shrinkage needs a square matrix".into()));
    }
    let t = shrinkage_target(sigma, target);
    let mut out = t * kappa + sigma * (1.0 - kappa);
    symmetrize(&mut out);
    floor_eigenvalues(&mut out);
    Ok(out)
}

pub fn shrink_covariance(sigma: &DMatrix<f64>, kappa: f64) -> Result<DMatrix<f64>> {
    shrink_covariance_to(sigma, kappa, ShrinkTarget::ScaledIdentity)
}

/// `Σ + Ω`.
pub fn adjust_for_uncertainty(sigma: &DMatrix<f64>, omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if sigma.shape() != omega.shape() {
        return Err(Error::Dimension(format!(
            "covariance {:?} vs uncertainty {:?}",
            sigma.shape(),
            omega.shape()
        )));
    }
    let mut out = sigma + omega;
    symmetrize(&mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceStack {
    pub sigma_cond: DMatrix<f64>,
    pub sigma_target: DMatrix<f64>,
    pub sigma_strategic: DMatrix<f64>,
    pub sigma_active: DMatrix<f64>,
    pub kappa_s: f64,
    pub kappa_a: f64,
}

impl CovarianceStack {
    /// Strategic side: shrink(κ_s) + Ω_π. Active side: shrink(κ_a) plus the
    /// mixed-estimate uncertainty.
    pub fn build(
        sigma_cond: DMatrix<f64>,
        omega_pi: &DMatrix<f64>,
        mixed_uncertainty: &DMatrix<f64>,
        kappa_s: f64,
        kappa_a: f64,
        target: ShrinkTarget,
    ) -> Result<Self> {
        let sigma_strategic = adjust_for_uncertainty(&shrink_covariance_to(&sigma_cond, kappa_s, target)?, omega_pi)?;
        let sigma_active =
            adjust_for_uncertainty(&shrink_covariance_to(&sigma_cond, kappa_a, target)?, mixed_uncertainty)?;
        Ok(Self {
            sigma_target: shrinkage_target(&sigma_cond, target),
            sigma_cond,
            sigma_strategic,
            sigma_active,
            kappa_s,
            kappa_a,
        })
    }
}
