//! Online estimators.
//!
//! Every state here is a plain value: updates take `&mut self`, run in O(d²) or
//! better, and keep no per-step history.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};
use crate::linalg::symmetrize;

fn check_finite(x: &DVector<f64>, what: &'static str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_memory(lambda: f64) -> Result<()> {
    if (0.0..1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::invalid(format!("memory factor {lambda} outside [0, 1)")))
    }
}

/// Exponentially weighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EwmaMeanState {
    mean: DVector<f64>,
    lambda: f64,
    initialized: bool,
}

impl EwmaMeanState {
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        check_memory(lambda)?;
        Ok(Self {
            mean: DVector::zeros(dim),
            lambda,
            initialized: false,
        })
    }

    pub fn update(&mut self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "ewma mean of dim {} fed vector of dim {}",
                self.mean.len(),
                x.len()
            )));
        }
        check_finite(x, "ewma_update")?;
        if self.initialized {
            let l = self.lambda;
            self.mean.zip_apply(x, |m, xi| *m = l * *m + (1.0 - l) * xi);
        } else {
            self.mean.copy_from(x);
            self.initialized = true;
        }
        Ok(())
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }
}

/// Exponentially weighted covariance with per-coordinate initialization.
///
/// Coordinates may be observed on some steps and not others; an unobserved
/// coordinate keeps its mean and variance. In diagonal mode off-diagonal terms
/// are never formed.
#[derive(Debug, Clone, PartialEq)]
pub struct EwmaCovState {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    lambda: f64,
    ridge: f64,
    seen: Vec<bool>,
    diagonal: bool,
}

impl EwmaCovState {
    pub const DEFAULT_RIDGE: f64 = 1e-6;

    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        Self::with_options(dim, lambda, Self::DEFAULT_RIDGE, false)
    }

    pub fn with_options(dim: usize, lambda: f64, ridge: f64, diagonal: bool) -> Result<Self> {
        check_memory(lambda)?;
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::invalid(format!("covariance ridge {ridge} must be >= 0")));
        }
        Ok(Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::zeros(dim, dim),
            lambda,
            ridge,
            seen: vec![false; dim],
            diagonal,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, x: &DVector<f64>) -> Result<()> {
        let all = vec![true; self.dim()];
        self.update_masked(x, &all)
    }

    /// Updates the coordinates where `observed` is true.
    ///
    /// The observed block becomes `λ·C + (1-λ)·d·dᵀ` with `d = x - mean'`. In
    /// full mode the cross terms between observed and unobserved coordinates are
    /// scaled by `√λ`, which is the congruence that keeps the matrix PSD.
    pub fn update_masked(&mut self, x: &DVector<f64>, observed: &[bool]) -> Result<()> {
        let d = self.dim();
        if x.len() != d || observed.len() != d {
            return Err(Error::Dimension(format!(
                "ewma covariance of dim {d} fed vector of dim {} and mask of len {}",
                x.len(),
                observed.len()
            )));
        }
        for i in 0..d {
            if observed[i] && !x[i].is_finite() {
                return Err(Error::NonFinite("ewma_cov_update"));
            }
        }
        let l = self.lambda;
        // 0: unobserved, 1: first observation, 2: regular update
        let mut kind = vec![0u8; d];
        let mut dev = vec![0.0; d];
        for i in 0..d {
            if !observed[i] {
                continue;
            }
            if self.seen[i] {
                self.mean[i] = l * self.mean[i] + (1.0 - l) * x[i];
                dev[i] = x[i] - self.mean[i];
                kind[i] = 2;
            } else {
                self.mean[i] = x[i];
                self.seen[i] = true;
                kind[i] = 1;
            }
        }
        if self.diagonal {
            for i in 0..d {
                match kind[i] {
                    1 => self.cov[(i, i)] = self.ridge,
                    2 => self.cov[(i, i)] = l * self.cov[(i, i)] + (1.0 - l) * dev[i] * dev[i],
                    _ => {}
                }
            }
            return Ok(());
        }
        let sl = l.sqrt();
        for i in 0..d {
            for j in 0..=i {
                let v = match (kind[i], kind[j]) {
                    (0, 0) => continue,
                    (1, _) | (_, 1) => {
                        if i == j {
                            self.ridge
                        } else {
                            0.0
                        }
                    }
                    (2, 2) => l * self.cov[(i, j)] + (1.0 - l) * dev[i] * dev[j],
                    _ => sl * self.cov[(i, j)],
                };
                self.cov[(i, j)] = v;
                self.cov[(j, i)] = v;
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    pub fn is_initialized(&self) -> bool {
        self.seen.iter().any(|&s| s)
    }

    pub fn seen(&self, i: usize) -> bool {
        self.seen[i]
    }
}

/// How the inverse-Gram recursion is started.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RlsInit {
    /// `P₀ = I / ridge`, `coef₀ = 0`; equivalent to a ridge prior of that size.
    Ridge(f64),
    /// Accumulate the weighted Gram matrix until it is well conditioned, then
    /// start from the exact least-squares solution.
    Exact,
}

impl Default for RlsInit {
    fn default() -> Self {
        RlsInit::Ridge(1e-4)
    }
}

/// Exponentially weighted recursive least squares.
#[derive(Debug, Clone, PartialEq)]
pub struct RlsState {
    coef: DVector<f64>,
    precision_proxy: DMatrix<f64>,
    lambda: f64,
    init: RlsInit,
    // exact-init accumulators, dropped once the recursion starts
    warmup: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl RlsState {
    pub fn new(dim: usize, lambda: f64, init: RlsInit) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::invalid(format!("RLS forgetting factor {lambda} outside (0, 1]")));
        }
        let (p, warmup) = match init {
            RlsInit::Ridge(r) => {
                if !(r > 0.0 && r.is_finite()) {
                    return Err(Error::invalid(format!("RLS ridge {r} must be > 0")));
                }
                (DMatrix::identity(dim, dim) / r, None)
            }
            RlsInit::Exact => (
                DMatrix::zeros(dim, dim),
                Some((DMatrix::zeros(dim, dim), DVector::zeros(dim))),
            ),
        };
        Ok(Self {
            coef: DVector::zeros(dim),
            precision_proxy: p,
            lambda,
            init,
            warmup,
        })
    }

    /// One step; returns the innovation `target - φᵀcoef` computed before the update.
    pub fn update(&mut self, features: &DVector<f64>, target: f64) -> Result<f64> {
        let d = self.coef.len();
        if features.len() != d {
            return Err(Error::Dimension(format!(
                "RLS of dim {d} fed features of dim {}",
                features.len()
            )));
        }
        check_finite(features, "rls_update")?;
        if !target.is_finite() {
            return Err(Error::NonFinite("rls_update"));
        }
        let innovation = target - features.dot(&self.coef);
        let lambda = self.lambda;

        if let Some((gram, rhs)) = self.warmup.as_mut() {
            *gram *= lambda;
            gram.ger(1.0, features, features, 1.0);
            *rhs *= lambda;
            rhs.axpy(target, features, 1.0);
            let eig = SymmetricEigen::new(gram.clone());
            let max = eig.eigenvalues.max();
            let min = eig.eigenvalues.min();
            if max > 0.0 && min > 1e-10 * max {
                let inv = eig.eigenvectors.clone()
                    * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v))
                    * eig.eigenvectors.transpose();
                self.coef = &inv * &*rhs;
                self.precision_proxy = inv;
                symmetrize(&mut self.precision_proxy);
                self.warmup = None;
            }
            return Ok(innovation);
        }

        let p_phi = &self.precision_proxy * features;
        let denom = lambda + features.dot(&p_phi);
        if !(denom > 0.0) || !denom.is_finite() {
            return Err(Error::RlsCorrupted(denom));
        }
        let gain = &p_phi / denom;
        self.coef.axpy(innovation, &gain, 1.0);
        // P' = (P - k (Pφ)ᵀ) / λ, using the symmetry of P
        self.precision_proxy.ger(-1.0, &gain, &p_phi, 1.0);
        self.precision_proxy /= lambda;
        symmetrize(&mut self.precision_proxy);
        Ok(innovation)
    }

    pub fn coef(&self) -> &DVector<f64> {
        &self.coef
    }

    pub fn precision_proxy(&self) -> &DMatrix<f64> {
        &self.precision_proxy
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn init(&self) -> RlsInit {
        self.init
    }

    /// False while an exact-init state is still accumulating its first samples.
    pub fn is_recursing(&self) -> bool {
        self.warmup.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RlmaConfig {
    pub step: f64,
    pub huber_c: f64,
    /// Memory of the EWMA of absolute residuals.
    pub scale_lambda: f64,
    /// Regularizer in the normalized step denominator.
    pub eps: f64,
}

impl Default for RlmaConfig {
    fn default() -> Self {
        Self {
            step: 0.05,
            huber_c: 2.0,
            scale_lambda: 0.97,
            eps: 1e-8,
        }
    }
}

impl RlmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step < 2.0) {
            return Err(Error::invalid(format!("RLMA step {} outside (0, 2)", self.step)));
        }
        if !(self.huber_c > 0.0 && self.huber_c.is_finite()) {
            return Err(Error::invalid(format!("RLMA huber_c {} must be > 0", self.huber_c)));
        }
        check_memory(self.scale_lambda)?;
        if !(self.eps > 0.0) {
            return Err(Error::invalid("RLMA eps must be > 0"));
        }
        Ok(())
    }
}

/// Robust least-M adaptive filter: a normalized gradient step on the
/// Huber-clipped residual, with the clip threshold tracking the EWMA of |e|.
#[derive(Debug, Clone, PartialEq)]
pub struct RlmaState {
    coef: DVector<f64>,
    config: RlmaConfig,
    resid_scale: f64,
    updates: u64,
}

impl RlmaState {
    const SCALE_FLOOR: f64 = 1e-12;

    pub fn new(dim: usize, config: RlmaConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            coef: DVector::zeros(dim),
            config,
            resid_scale: 0.0,
            updates: 0,
        })
    }

    pub fn with_coef(coef: DVector<f64>, config: RlmaConfig) -> Result<Self> {
        config.validate()?;
        check_finite(&coef, "rlma coefficients")?;
        Ok(Self {
            coef,
            config,
            resid_scale: 0.0,
            updates: 0,
        })
    }

    /// One step; returns the pre-update residual.
    pub fn update(&mut self, features: &DVector<f64>, target: f64) -> Result<f64> {
        if features.len() != self.coef.len() {
            return Err(Error::Dimension(format!(
                "RLMA of dim {} fed features of dim {}",
                self.coef.len(),
                features.len()
            )));
        }
        check_finite(features, "rlma_update")?;
        if !target.is_finite() {
            return Err(Error::NonFinite("rlma_update"));
        }
        let e = target - features.dot(&self.coef);
        let psi = if self.updates == 0 {
            e
        } else {
            let bound = self.config.huber_c * self.resid_scale;
            e.clamp(-bound, bound)
        };
        let norm = self.config.eps + features.norm_squared();
        self.coef.axpy(self.config.step * psi / norm, features, 1.0);
        self.resid_scale = if self.updates == 0 {
            e.abs().max(Self::SCALE_FLOOR)
        } else {
            let l = self.config.scale_lambda;
            l * self.resid_scale + (1.0 - l) * e.abs()
        };
        self.updates += 1;
        Ok(e)
    }

    pub fn coef(&self) -> &DVector<f64> {
        &self.coef
    }

    pub fn resid_scale(&self) -> f64 {
        self.resid_scale
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn config(&self) -> &RlmaConfig {
        &self.config
    }
}

/// Least-squares regression of `targets` on `[1, characteristics]` over the
/// rows where `mask` is true. Rank-deficient designs get the minimum-norm
/// solution. Returns the intercept followed by the M characteristic payoffs.
pub fn cross_sectional_regress(
    characteristics: &DMatrix<f64>,
    targets: &DVector<f64>,
    mask: &[bool],
) -> Result<DVector<f64>> {
    let (n, m) = characteristics.shape();
    if targets.len() != n || mask.len() != n {
        return Err(Error::Dimension(format!(
            "cross-section of {n} rows with {} targets and mask of {}",
            targets.len(),
            mask.len()
        )));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if rows.len() < m + 2 {
        return Err(Error::InsufficientData(format!(
            "cross-sectional regression needs {} assets, have {}",
            m + 2,
            rows.len()
        )));
    }
    let design = DMatrix::from_fn(rows.len(), m + 1, |r, c| {
        if c == 0 {
            1.0
        } else {
            characteristics[(rows[r], c - 1)]
        }
    });
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| targets[i]));
    if design.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cross_sectional_regress"));
    }
    let svd = SVD::new(design, true, true);
    let smax = svd.singular_values.max();
    let eps = smax * (rows.len().max(m + 1) as f64) * f64::EPSILON * 16.0;
    svd.solve(&y, eps)
        .map_err(|e| Error::Dimension(format!("least-squares solve failed: {e}")))
}
