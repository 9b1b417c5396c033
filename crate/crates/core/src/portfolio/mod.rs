//! Mean-variance construction: closed forms, the benchmark/active
//! decomposition, and the leverage-constrained optimizer.

pub mod qp;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, ones, select_square};
use qp::{ConstraintKind, QpFactor, QpProblem};

/// A factored covariance matrix with the pieces every closed form needs.
pub struct MvSolver {
    chol: Cholesky<f64, Dyn>,
    inv_ones: DVector<f64>,
    ones_inv_ones: f64,
}

impl MvSolver {
    pub fn new(sigma: &DMatrix<f64>) -> Result<Self> {
        let chol = cholesky(sigma, "mean-variance")?;
        let inv_ones = chol.solve(&ones(sigma.nrows()));
        let ones_inv_ones = inv_ones.sum();
        if !(ones_inv_ones > 0.0 && ones_inv_ones.is_finite()) {
            return Err(Error::Singular {
                context: "mean-variance",
                condition: crate::linalg::condition_estimate(sigma),
            });
        }
        Ok(Self {
            chol,
            inv_ones,
            ones_inv_ones,
        })
    }

    pub fn gmv(&self) -> DVector<f64> {
        &self.inv_ones / self.ones_inv_ones
    }

    /// `Σ⁻¹(x - 1·(1ᵀΣ⁻¹x)/(1ᵀΣ⁻¹1)) / γ`, a zero-sum tilt.
    pub fn tilt(&self, x: &DVector<f64>, gamma: f64) -> DVector<f64> {
        let inv_x = self.chol.solve(x);
        let c = inv_x.sum() / self.ones_inv_ones;
        (inv_x - &self.inv_ones * c) / gamma
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("risk tolerance {gamma} must be positive")))
    }
}

fn check_dims(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<()> {
    if sigma.shape() != (mu.len(), mu.len()) {
        return Err(Error::Dimension(format!(
            "expected returns of length {} against covariance {:?}",
            mu.len(),
            sigma.shape()
        )));
    }
    Ok(())
}

pub fn gmv_weights(sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(MvSolver::new(sigma)?.gmv())
}

pub fn mv_closed_form(mu: &DVector<f64>, sigma: &DMatrix<f64>, gamma: f64) -> Result<DVector<f64>> {
    check_gamma(gamma)?;
    check_dims(mu, sigma)?;
    let s = MvSolver::new(sigma)?;
    Ok(s.gmv() + s.tilt(mu, gamma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioDecomposition {
    pub gmv: DVector<f64>,
    pub systematic: DVector<f64>,
    pub active: DVector<f64>,
    pub total: DVector<f64>,
    pub gamma_s: f64,
    pub gamma_a: f64,
}

/// Global minimum variance and systematic legs from the strategic matrix,
/// active leg from the active one.
pub fn decompose(
    pi: &DVector<f64>,
    alpha_bl: &DVector<f64>,
    sigma_strategic: &DMatrix<f64>,
    sigma_active: &DMatrix<f64>,
    gamma_s: f64,
    gamma_a: f64,
) -> Result<PortfolioDecomposition> {
    check_gamma(gamma_s)?;
    check_gamma(gamma_a)?;
    check_dims(pi, sigma_strategic)?;
    check_dims(alpha_bl, sigma_active)?;
    let s = MvSolver::new(sigma_strategic)?;
    let a = MvSolver::new(sigma_active)?;
    Ok(decompose_with(pi, alpha_bl, &s, &a, gamma_s, gamma_a))
}

pub fn decompose_with(
    pi: &DVector<f64>,
    alpha_bl: &DVector<f64>,
    strategic: &MvSolver,
    active: &MvSolver,
    gamma_s: f64,
    gamma_a: f64,
) -> PortfolioDecomposition {
    let gmv = strategic.gmv();
    let systematic = strategic.tilt(pi, gamma_s);
    let active_w = active.tilt(alpha_bl, gamma_a);
    let total = &gmv + &systematic + &active_w;
    PortfolioDecomposition {
        gmv,
        systematic,
        active: active_w,
        total,
        gamma_s,
        gamma_a,
    }
}

/// Budget (fixed at 1), gross leverage and optional per-asset bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    max_leverage: f64,
    lower: Option<DVector<f64>>,
    upper: Option<DVector<f64>>,
}

impl ConstraintSet {
    pub fn leverage(max_leverage: f64) -> Result<Self> {
        Self::new(max_leverage, None, None)
    }

    /// Fails when no fully invested portfolio satisfies every constraint.
    pub fn new(max_leverage: f64, lower: Option<DVector<f64>>, upper: Option<DVector<f64>>) -> Result<Self> {
        if !(max_leverage >= 1.0) {
            return Err(Error::Infeasible(format!(
                "leverage bound {max_leverage} is below 1, budget cannot be met"
            )));
        }
        if let (Some(lo), Some(hi)) = (&lower, &upper) {
            if lo.len() != hi.len() {
                return Err(Error::Dimension("lower and upper bounds differ in length".into()));
            }
        }
        let set = Self {
            max_leverage,
            lower,
            upper,
        };
        if let Some(n) = set.bounds_len() {
            set.min_leverage(n)?;
        }
        Ok(set)
    }

    pub fn max_leverage(&self) -> f64 {
        self.max_leverage
    }

    pub fn lower(&self) -> Option<&DVector<f64>> {
        self.lower.as_ref()
    }

    pub fn upper(&self) -> Option<&DVector<f64>> {
        self.upper.as_ref()
    }

    fn bounds_len(&self) -> Option<usize> {
        self.lower.as_ref().or(self.upper.as_ref()).map(|v| v.len())
    }

    fn lo(&self, i: usize) -> f64 {
        self.lower.as_ref().map_or(f64::NEG_INFINITY, |v| v[i])
    }

    fn hi(&self, i: usize) -> f64 {
        self.upper.as_ref().map_or(f64::INFINITY, |v| v[i])
    }

    /// Smallest gross leverage of a budget-feasible point within bounds.
    pub fn min_leverage(&self, n: usize) -> Result<f64> {
        if n == 0 {
            return Err(Error::Infeasible("budget: no assets".into()));
        }
        if self.bounds_len().is_some_and(|len| len != n) {
            return Err(Error::Dimension(format!("bounds of length {:?} for {n} assets", self.bounds_len())));
        }
        let mut sum = 0.0;
        let mut l1 = 0.0;
        let mut room_up = 0.0;
        let mut room_down = 0.0;
        for i in 0..n {
            let (lo, hi) = (self.lo(i), self.hi(i));
            if lo > hi || lo.is_nan() || hi.is_nan() {
                return Err(Error::Infeasible(format!("bounds: lower exceeds upper for asset {i}")));
            }
            let c = 0.0_f64.clamp(lo, hi);
            sum += c;
            l1 += c.abs();
            room_up += hi - c;
            room_down += c - lo;
        }
        let gap = 1.0 - sum;
        if gap > room_up || -gap > room_down {
            return Err(Error::Infeasible("budget: bounds do not admit weights summing to 1".into()));
        }
        let need = l1 + gap.abs();
        if need > self.max_leverage * (1.0 + 1e-12) {
            return Err(Error::Infeasible(format!(
                "leverage: bounds force gross exposure {need} above {}",
                self.max_leverage
            )));
        }
        Ok(need)
    }

    pub fn is_satisfied(&self, w: &DVector<f64>, tol: f64) -> bool {
        (w.sum() - 1.0).abs() <= tol
            && w.lp_norm(1) <= self.max_leverage + tol
            && (0..w.len()).all(|i| w[i] >= self.lo(i) - tol && w[i] <= self.hi(i) + tol)
    }
}

/// First-order optimality residuals of a constrained solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal_feasibility: f64,
    pub complementarity: f64,
    pub dual_feasibility: f64,
}

impl KktReport {
    pub fn within(&self, stationarity: f64, primal: f64, complementarity: f64) -> bool {
        self.stationarity <= stationarity
            && self.primal_feasibility <= primal
            && self.complementarity <= complementarity
            && self.dual_feasibility <= complementarity
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedSolution {
    pub weights: DVector<f64>,
    pub objective: f64,
    pub kkt: KktReport,
    pub active: Vec<(ConstraintKind, f64)>,
    pub iterations: usize,
}

/// Closest point to `target` in the `sigma` metric that satisfies the constraints.
pub fn project(
    target: &DVector<f64>,
    sigma: &DMatrix<f64>,
    constraints: &ConstraintSet,
    factor: &QpFactor,
) -> Result<ConstrainedSolution> {
    check_dims(target, sigma)?;
    constrained_mv_factored(&(sigma * target), sigma, 1.0, constraints, None, factor)
}

/// Leverage-only projection `min ½(w-t)ᵀΣ(w-t)` s.t. `1ᵀw = 1`, `‖w‖₁ ≤ L`,
/// by a primal-dual active-set iteration over the support and signs of `w`,
/// seeded with `guess` (zeros mean "not in the support").
///
/// Each pass solves the equality-constrained problem on the current support
/// and re-signs every coordinate from its KKT residual. Returns `None` when
/// the iteration cycles or degenerates; [`project`] is the exact fallback.
pub fn project_leverage(
    target: &DVector<f64>,
    sigma: &DMatrix<f64>,
    max_leverage: f64,
    guess: &[i8],
) -> Option<DVector<f64>> {
    const MAX_PASSES: usize = 30;
    let n = target.len();
    if guess.len() != n || sigma.shape() != (n, n) || target.lp_norm(1) <= max_leverage {
        return None;
    }
    let b = sigma * target;
    let cold: Vec<i8> = target.iter().map(|&v| if v > 0.0 { 1 } else if v < 0.0 { -1 } else { 0 }).collect();
    let mut signs = if guess.iter().all(|&s| s == 0) { cold.clone() } else { guess.to_vec() };
    let mut restarted = signs == cold;
    let mut visited: Vec<Vec<i8>> = Vec::new();
    for _ in 0..MAX_PASSES {
        let Some((w, next)) = support_pass(sigma, &b, max_leverage, &signs) else {
            if restarted {
                return None;
            }
            restarted = true;
            visited.clear();
            signs = cold.clone();
            continue;
        };
        if next == signs {
            return Some(w);
        }
        if visited.contains(&next) {
            return None;
        }
        visited.push(std::mem::replace(&mut signs, next));
    }
    None
}

/// Solves on the support of `signs` and returns the weights with the
/// re-signed pattern, or `None` when the leverage bound cannot be active there.
fn support_pass(sigma: &DMatrix<f64>, b: &DVector<f64>, max_leverage: f64, signs: &[i8]) -> Option<(DVector<f64>, Vec<i8>)> {
    let n = signs.len();
    let support: Vec<usize> = (0..n).filter(|&i| signs[i] != 0).collect();
    let m = support.len();
    if m == 0 {
        return None;
    }
    let chol = cholesky(&select_square(sigma, &support), "leverage projection").ok()?;
    let sg = DVector::from_iterator(m, support.iter().map(|&i| signs[i] as f64));
    let y1 = chol.solve(&DVector::from_iterator(m, support.iter().map(|&i| b[i])));
    let y2 = chol.solve(&DVector::from_element(m, 1.0));
    let y3 = chol.solve(&sg);
    // [1ᵀy2  -1ᵀy3; σᵀy2  -σᵀy3] [ν; η] = [1 - 1ᵀy1; L - σᵀy1]
    let (a11, a12, a21, a22) = (y2.sum(), -y3.sum(), sg.dot(&y2), -sg.dot(&y3));
    let (r1, r2) = (1.0 - y1.sum(), max_leverage - sg.dot(&y1));
    let det = a11 * a22 - a12 * a21;
    if !(det.abs() > 1e-12 * (a11 * a22).abs()) {
        return None;
    }
    let nu = (r1 * a22 - a12 * r2) / det;
    let eta = (a11 * r2 - a21 * r1) / det;
    if !(eta > 0.0) {
        return None;
    }
    let mut w = DVector::zeros(n);
    for (k, &i) in support.iter().enumerate() {
        w[i] = y1[k] + nu * y2[k] - eta * y3[k];
    }
    let tol = 1e-10 * eta;
    let mut next = vec![0i8; n];
    for i in 0..n {
        if signs[i] != 0 {
            if w[i] * signs[i] as f64 > 0.0 {
                next[i] = signs[i];
            }
        } else {
            let mut sw = 0.0;
            for &j in &support {
                sw += sigma[(i, j)] * w[j];
            }
            let c = b[i] + nu - sw;
            if c.abs() > eta + tol {
                next[i] = if c > 0.0 { 1 } else { -1 };
            }
        }
    }
    Some((w, next))
}

pub fn mv_objective(w: &DVector<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>, gamma: f64) -> f64 {
    mu.dot(w) - 0.5 * gamma * w.dot(&(sigma * w))
}

/// Maximizes `μᵀw - (γ/2) wᵀΣw` under the constraint set.
///
/// The dual active-set method starts from the unconstrained optimum, so
/// `warm_start` does not change the result; it is accepted for interface
/// symmetry with primal methods.
pub fn constrained_mv(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    gamma: f64,
    constraints: &ConstraintSet,
    warm_start: Option<&DVector<f64>>,
) -> Result<ConstrainedSolution> {
    check_dims(mu, sigma)?;
    constrained_mv_factored(mu, sigma, gamma, constraints, warm_start, &QpFactor::new(sigma)?)
}

/// [`constrained_mv`] with a precomputed factor of `sigma`.
pub fn constrained_mv_factored(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    gamma: f64,
    constraints: &ConstraintSet,
    warm_start: Option<&DVector<f64>>,
    factor: &QpFactor,
) -> Result<ConstrainedSolution> {
    check_gamma(gamma)?;
    check_dims(mu, sigma)?;
    let n = mu.len();
    if warm_start.is_some_and(|w| w.len() != n) {
        return Err(Error::Dimension("warm start has the wrong length".into()));
    }
    constraints.min_leverage(n)?;
    // Same minimizer as ½γwᵀΣw - μᵀw, scaled so the ridge matches the closed forms.
    let linear = -mu / gamma;
    let problem = QpProblem {
        hessian: sigma,
        linear: &linear,
        equalities: vec![(ones(n), 1.0)],
        lower: constraints.lower.as_ref(),
        upper: constraints.upper.as_ref(),
        l1_bound: Some(constraints.max_leverage),
    };
    let sol = qp::solve_with(&problem, factor)?;
    let w = sol.x;

    let mut grad = sigma * &w * gamma - mu;
    let mut complementarity: f64 = 0.0;
    let mut dual: f64 = 0.0;
    for (kind, m) in &sol.active {
        let (normal, rhs) = qp::constraint_row(kind, &problem, n);
        let m = m * gamma;
        grad.axpy(-m, &normal, 1.0);
        if !matches!(kind, ConstraintKind::Equality(_)) {
            complementarity = complementarity.max((m * (normal.dot(&w) - rhs)).abs());
            dual = dual.max(-m);
        }
    }
    let mut primal = (w.sum() - 1.0).abs().max(w.lp_norm(1) - constraints.max_leverage);
    for i in 0..n {
        primal = primal.max(constraints.lo(i) - w[i]).max(w[i] - constraints.hi(i));
    }
    let kkt = KktReport {
        stationarity: grad.amax(),
        primal_feasibility: primal.max(0.0),
        complementarity,
        dual_feasibility: dual.max(0.0),
    };
    Ok(ConstrainedSolution {
        objective: mv_objective(&w, mu, sigma, gamma),
        weights: w,
        kkt,
        active: sol.active,
        iterations: sol.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_pd(n: usize, rng: &mut ChaCha8Rng, scale: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        (&a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.05) * scale
    }

    #[test]
    fn gmv_examples() {
        let w = gmv_weights(&DMatrix::identity(4, 4)).unwrap();
        assert!(w.iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let w = gmv_weights(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]))).unwrap();
        assert_relative_eq!(w[0], 0.8, epsilon = 1e-9);
        assert_relative_eq!(w[1], 0.2, epsilon = 1e-9);
        assert!(gmv_weights(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
    }

    #[test]
    fn closed_form_examples() {
        let mu = DVector::from_vec(vec![0.02, 0.0]);
        let w = mv_closed_form(&mu, &DMatrix::identity(2, 2), 1.0).unwrap();
        assert_relative_eq!(w[0], 0.51, epsilon = 1e-9);
        assert_relative_eq!(w[1], 0.49, epsilon = 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_pd(5, &mut rng, 1e-3);
        let w = mv_closed_form(&DVector::from_element(5, 0.01), &s, 3.0).unwrap();
        assert!((w - gmv_weights(&s).unwrap()).amax() < 1e-9);
        let mu = DVector::from_fn(5, |i, _| 0.001 * i as f64);
        let far = mv_closed_form(&mu, &s, 1e12).unwrap();
        assert!((far - gmv_weights(&s).unwrap()).amax() < 1e-9);
    }

    #[test]
    fn closed_form_satisfies_lagrange_conditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_pd(6, &mut rng, 1e-3);
        let mu = DVector::from_fn(6, |_, _| 0.002 * rng.sample::<f64, _>(StandardNormal));
        let g = 7.0;
        let w = mv_closed_form(&mu, &s, g).unwrap();
        assert_relative_eq!(w.sum(), 1.0, epsilon = 1e-12);
        // μ - γΣw must be parallel to 1.
        let r = &mu - &s * &w * g;
        assert!((r.add_scalar(-r.mean())).amax() < 1e-9);
    }

    #[test]
    fn decomposition_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_pd(5, &mut rng, 1e-3);
        let a = random_pd(5, &mut rng, 1e-3);
        let pi = DVector::from_fn(5, |_, _| 0.002 * rng.sample::<f64, _>(StandardNormal));
        let al = DVector::from_fn(5, |_, _| 0.002 * rng.sample::<f64, _>(StandardNormal));
        let d = decompose(&pi, &al, &s, &a, 4.0, 2.0).unwrap();
        assert!((&d.total - (&d.gmv + &d.systematic + &d.active)).amax() < 1e-12);
        assert_relative_eq!(d.total.sum(), 1.0, epsilon = 1e-10);
        assert!(d.systematic.sum().abs() < 1e-10 && d.active.sum().abs() < 1e-10);

        let zero = decompose(&pi, &DVector::zeros(5), &s, &a, 4.0, 2.0).unwrap();
        assert!(zero.active.amax() < 1e-15);

        let same = decompose(&pi, &al, &s, &s, 5.0, 5.0).unwrap();
        let cf = mv_closed_form(&(&pi + &al), &s, 5.0).unwrap();
        assert!((same.total - cf).amax() < 1e-10);

        let doubled = decompose(&pi, &al, &s, &a, 4.0, 4.0).unwrap();
        assert!((&doubled.active * 2.0 - &d.active).amax() < 1e-12);

        let perturbed = decompose(&pi, &(&al * 3.0), &s, &a, 4.0, 2.0).unwrap();
        assert_eq!(perturbed.gmv, d.gmv);
        assert_eq!(perturbed.systematic, d.systematic);
    }

    #[test]
    fn slack_constraints_match_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_pd(8, &mut rng, 1e-3);
        let mu = DVector::from_fn(8, |_, _| 1e-4 * rng.sample::<f64, _>(StandardNormal));
        let cs = ConstraintSet::leverage(100.0).unwrap();
        let sol = constrained_mv(&mu, &s, 10.0, &cs, None).unwrap();
        let cf = mv_closed_form(&mu, &s, 10.0).unwrap();
        assert!((&sol.weights - cf).amax() < 1e-6);
        assert!(sol.kkt.within(1e-6, 1e-8, 1e-8), "{:?}", sol.kkt);
    }

    /// Long-only minimum variance by enumerating supports.
    fn simplex_min_variance(s: &DMatrix<f64>) -> DVector<f64> {
        let n = s.nrows();
        let mut best: Option<(f64, DVector<f64>)> = None;
        for mask in 1u32..(1 << n) {
            let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let sub = crate::linalg::select_square(s, &idx);
            let inv = sub.try_inverse().unwrap();
            let v = &inv * DVector::from_element(idx.len(), 1.0);
            let w_sub = &v / v.sum();
            if w_sub.iter().any(|&x| x < -1e-12) {
                continue;
            }
            let mut w = DVector::zeros(n);
            for (k, &i) in idx.iter().enumerate() {
                w[i] = w_sub[k];
            }
            let var = w.dot(&(s * &w));
            if best.as_ref().is_none_or(|(b, _)| var < *b) {
                best = Some((var, w));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn unit_leverage_projects_gmv_to_simplex() {
        let s = DMatrix::from_row_slice(3, 3, &[1.0, 1.1, 0.3, 1.1, 2.0, 0.2, 0.3, 0.2, 2.0]);
        assert!(gmv_weights(&s).unwrap().iter().any(|&v| v < 0.0));
        let cs = ConstraintSet::leverage(1.0).unwrap();
        let sol = constrained_mv(&DVector::from_element(3, 0.01), &s, 2.0, &cs, None).unwrap();
        assert!(sol.weights.iter().all(|&v| v >= -1e-10));
        assert_relative_eq!(sol.weights.lp_norm(1), 1.0, epsilon = 1e-9);
        let oracle = simplex_min_variance(&s);
        assert!((&sol.weights - oracle).amax() < 1e-8, "{}", sol.weights);
        assert!(sol.kkt.within(1e-6, 1e-8, 1e-8), "{:?}", sol.kkt);
    }

    #[test]
    fn bounded_corner_solution() {
        let lo = DVector::zeros(3);
        let hi = DVector::from_element(3, 1.0);
        let cs = ConstraintSet::new(2.0, Some(lo), Some(hi)).unwrap();
        let mu = DVector::from_vec(vec![10.0, 0.0, 0.0]);
        let sol = constrained_mv(&mu, &DMatrix::identity(3, 3), 1.0, &cs, None).unwrap();
        assert!((sol.weights - DVector::from_vec(vec![1.0, 0.0, 0.0])).amax() < 1e-9);
    }

    #[test]
    fn leverage_binding_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..200 {
            let n = 2 + trial % 30;
            let s = random_pd(n, &mut rng, 1e-3);
            let mu = DVector::from_fn(n, |_, _| 0.01 * rng.sample::<f64, _>(StandardNormal));
            let cs = ConstraintSet::leverage(1.0 + (trial % 4) as f64 * 0.5).unwrap();
            let sol = constrained_mv(&mu, &s, 1.0 + (trial % 7) as f64, &cs, None).unwrap();
            assert!(sol.kkt.within(1e-6, 1e-8, 1e-8), "trial {trial}: {:?}", sol.kkt);
            // No feasible perturbation along a random budget-neutral direction improves it.
            let gamma = 1.0 + (trial % 7) as f64;
            for _ in 0..5 {
                let mut d = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                d.add_scalar_mut(-d.mean());
                for step in [1e-3, 1e-5] {
                    let cand = &sol.weights + &d * step;
                    if cs.is_satisfied(&cand, 0.0) {
                        assert!(mv_objective(&cand, &mu, &s, gamma) <= sol.objective + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn infeasible_sets_name_constraint() {
        assert!(matches!(ConstraintSet::leverage(0.5), Err(Error::Infeasible(m)) if m.contains("leverage")));
        let hi = DVector::from_vec(vec![-0.6, f64::INFINITY]);
        assert!(matches!(ConstraintSet::new(2.0, None, Some(hi)), Err(Error::Infeasible(m)) if m.contains("leverage")));
        let hi = DVector::from_element(2, 0.3);
        assert!(matches!(ConstraintSet::new(2.0, None, Some(hi)), Err(Error::Infeasible(m)) if m.contains("budget")));
    }

    #[test]
    fn warm_start_does_not_change_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_pd(10, &mut rng, 1e-3);
        let mu = DVector::from_fn(10, |_, _| 0.01 * rng.sample::<f64, _>(StandardNormal));
        let cs = ConstraintSet::leverage(1.5).unwrap();
        let a = constrained_mv(&mu, &s, 2.0, &cs, None).unwrap();
        let b = constrained_mv(&mu, &s, 2.0, &cs, Some(&DVector::from_element(10, 0.1))).unwrap();
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn leverage_projection_matches_dual_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut settled = 0;
        for trial in 0..200 {
            let n = 2 + trial % 40;
            let s = random_pd(n, &mut rng, 1e-3);
            let mut t = DVector::from_fn(n, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
            let shift = (1.0 - t.sum()) / n as f64;
            t.add_scalar_mut(shift);
            let cs = ConstraintSet::leverage(1.0 + 2.0 * rng.random::<f64>()).unwrap();
            let guess: Vec<i8> = if trial % 2 == 0 { vec![0; n] } else { (0..n).map(|_| rng.random_range(-1..=1)).collect() };
            let exact = project(&t, &s, &cs, &QpFactor::new(&s).unwrap());
            let fast = project_leverage(&t, &s, cs.max_leverage(), &guess);
            if t.lp_norm(1) <= cs.max_leverage() {
                assert!(fast.is_none());
                continue;
            }
            if let Some(w) = fast {
                settled += 1;
                let exact = exact.unwrap().weights;
                assert!((&w - &exact).amax() < 1e-8, "trial {trial}: {}", (&w - &exact).amax());
                assert!((w.sum() - 1.0).abs() < 1e-10);
                assert!(w.lp_norm(1) <= cs.max_leverage() + 1e-10);
            }
        }
        assert!(settled > 180, "{settled}");
    }
}
