//! Gaussian (Laplace) posterior over the feature weights.
//!
//! With `f(x) = beta . psi(x)`, `beta ~ N(0, I)` and intensity
//! `(f(x) + alpha)^2`, the log joint density (additive constant dropped) is
//!
//! ```text
//! sum_i log (beta . psi_i + alpha)^2 - [beta' M beta + 2 alpha beta' m + alpha^2 |X|] - beta' beta / 2
//! ```
//!
//! Its Hessian is negative definite everywhere, so the joint is strictly
//! concave inside each region where the signs of `beta . psi_i + alpha` are
//! fixed. The mode search is a guarded Newton ascent that never lets an event
//! cross its nodal line.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::integrals::IntegralStats;
use crate::window::PointPattern;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 40;
const DECREMENT_FLOOR: f64 = 4.0 * f64::EPSILON;
const STALL_STEPS: usize = 3;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Everything the weight posterior depends on: the feature matrix at the
/// events, the window integrals, and the offset.
#[derive(Debug, Clone)]
pub struct DesignCache {
    /// `N x R`, row `i` is `psi(x_i)`.
    pub phi: DMatrix<f64>,
    pub stats: IntegralStats,
    pub alpha: f64,
}

impl DesignCache {
    /// Build from a map and events already expressed in the map's frame.
    pub fn new(
        map: &FeatureMap,
        events: &PointPattern,
        stats: IntegralStats,
        alpha: f64,
    ) -> Result<Self> {
        if map.in_dim() != events.dim() {
            return Err(Error::DimensionMismatch {
                expected: map.in_dim(),
                got: events.dim(),
            });
        }
        let r = map.out_dim();
        let n = events.len();
        let mut phi = DMatrix::zeros(n, r);
        for (i, x) in events.points().enumerate() {
            let psi = map.eval(x);
            for (j, v) in psi.into_iter().enumerate() {
                phi[(i, j)] = v;
            }
        }
        Self::from_parts(phi, stats, alpha)
    }

    pub fn from_parts(phi: DMatrix<f64>, stats: IntegralStats, alpha: f64) -> Result<Self> {
        if phi.ncols() != stats.dim() {
            return Err(Error::DimensionMismatch {
                expected: stats.dim(),
                got: phi.ncols(),
            });
        }
        if !alpha.is_finite() || phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "design matrix and offset must be finite".into(),
            ));
        }
        Ok(Self { phi, stats, alpha })
    }

    pub fn width(&self) -> usize {
        self.phi.ncols()
    }

    pub fn n_events(&self) -> usize {
        self.phi.nrows()
    }

    fn check_beta(&self, beta: &DVector<f64>) -> Result<()> {
        if beta.len() != self.width() {
            return Err(Error::DimensionMismatch {
                expected: self.width(),
                got: beta.len(),
            });
        }
        Ok(())
    }

    /// `beta . psi_i + alpha` for every event, rejecting exact zeros.
    pub fn event_values(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_beta(beta)?;
        let e = self.phi.clone() * beta;
        let e = e.add_scalar(self.alpha);
        if let Some(index) = e.iter().position(|v| *v == 0.0) {
            return Err(Error::SingularEvent { index });
        }
        Ok(e)
    }

    /// `2M + I`, the negated Hessian without the data term.
    pub fn prior_precision(&self) -> DMatrix<f64> {
        let r = self.width();
        &self.stats.big_m * 2.0 + DMatrix::identity(r, r)
    }

    /// Zero-event mode `-2 alpha (2M + I)^{-1} m`.
    pub fn default_start(&self) -> Result<DVector<f64>> {
        let chol = self
            .prior_precision()
            .cholesky()
            .ok_or_else(|| Error::Degenerate("2M + I is not positive definite".into()))?;
        Ok(chol.solve(&self.stats.small_m) * (-2.0 * self.alpha))
    }
}

pub fn log_joint(cache: &DesignCache, beta: &DVector<f64>) -> Result<f64> {
    let e = cache.event_values(beta)?;
    let data: f64 = e.iter().map(|v| (v * v).ln()).sum();
    let integral = crate::integrals::intensity_integral(&cache.stats, beta, cache.alpha)?;
    Ok(data - integral - 0.5 * beta.norm_squared())
}

pub fn joint_gradient(cache: &DesignCache, beta: &DVector<f64>) -> Result<DVector<f64>> {
    let e = cache.event_values(beta)?;
    let inv = e.map(|v| 1.0 / v);
    let mut g = cache.phi.tr_mul(&inv) * 2.0;
    g -= cache.prior_precision() * beta;
    g.axpy(-2.0 * cache.alpha, &cache.stats.small_m, 1.0);
    Ok(g)
}

pub fn joint_hessian(cache: &DesignCache, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let e = cache.event_values(beta)?;
    Ok(-negative_hessian(cache, &e))
}

/// `2M + I + 2 sum_i psi_i psi_i^T / e_i^2`.
fn negative_hessian(cache: &DesignCache, e: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = cache.phi.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row /= e[i];
    }
    let mut h = scaled.tr_mul(&scaled) * 2.0;
    h += cache.prior_precision();
    (&h + h.transpose()) * 0.5
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeResult {
    pub beta: DVector<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub log_joint: f64,
}

/// `log_joint(beta + d) - log_joint(beta)` evaluated term by term, so that
/// the sign stays reliable for steps far below the rounding level of the
/// objective itself. `e` holds the event values at `beta` and `de = Phi d`
/// their change.
fn log_joint_increment(
    cache: &DesignCache,
    beta: &DVector<f64>,
    e: &DVector<f64>,
    d: &DVector<f64>,
    de: &DVector<f64>,
) -> f64 {
    let data: f64 = e
        .iter()
        .zip(de.iter())
        .map(|(a, b)| 2.0 * (b / a).ln_1p())
        .sum();
    let two_beta_d = beta * 2.0 + d;
    let quad = d.dot(&(&cache.stats.big_m * &two_beta_d));
    let linear = 2.0 * cache.alpha * d.dot(&cache.stats.small_m);
    let prior = 0.5 * d.dot(&two_beta_d);
    data - quad - linear - prior
}

/// Guarded damped Newton ascent on [`log_joint`].
pub fn find_mode(
    cache: &DesignCache,
    beta0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<ModeResult> {
    if beta0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("initial weights must be finite".into()));
    }
    let mut beta = beta0.clone();
    let mut f = log_joint(cache, &beta)?;
    let mut e = cache.event_values(&beta)?;
    let mut stalled = 0;
    for iter in 0..=max_iter {
        let g = joint_gradient(cache, &beta)?;
        let grad_norm = g.amax();
        let converged = |beta| ModeResult {
            beta,
            iterations: iter,
            grad_norm,
            log_joint: f,
        };
        if grad_norm <= tol {
            return Ok(converged(beta));
        }
        let neg_h = negative_hessian(cache, &e);
        let chol = neg_h
            .cholesky()
            .ok_or_else(|| Error::Degenerate("negative Hessian lost definiteness".into()))?;
        let dir = chol.solve(&g);
        // Half the Newton decrement predicts the remaining ascent. When it
        // stays below the rounding level of the objective for several steps,
        // the gradient has hit its floor (badly scaled features can leave
        // that floor above `tol`).
        let at_floor = 0.5 * g.dot(&dir) <= DECREMENT_FLOOR * (1.0 + f.abs());
        stalled = if at_floor { stalled + 1 } else { 0 };
        if stalled >= STALL_STEPS || (at_floor && iter == max_iter) {
            return Ok(converged(beta));
        }
        if iter == max_iter {
            return Err(Error::NonConvergence {
                iterations: max_iter,
                grad_norm,
            });
        }
        let delta = &cache.phi * &dir;

        // largest step keeping every event on its side of the nodal line
        let mut t: f64 = 1.0;
        for (ei, di) in e.iter().zip(delta.iter()) {
            if ei * di < 0.0 && -ei / di <= 1.0 {
                t = t.min(0.5 * (-ei / di));
            }
        }
        if t <= 0.0 || !t.is_finite() {
            return Err(Error::SingularEvent {
                index: e.iter().position(|v| v.abs() == e.amin()).unwrap_or(0),
            });
        }

        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = &beta + &dir * t;
            match cache.event_values(&cand) {
                Ok(ce)
                    if ce
                        .iter()
                        .zip(e.iter())
                        .all(|(a, b)| a.signum() == b.signum()) =>
                {
                    let gain = log_joint_increment(cache, &beta, &e, &(&dir * t), &(&delta * t));
                    if gain >= 0.0 {
                        accepted = Some((cand, f + gain, ce));
                        break;
                    }
                }
                _ => {}
            }
            t *= 0.5;
        }
        match accepted {
            Some((b, fc, ce)) => {
                beta = b;
                f = fc;
                e = ce;
            }
            None if at_floor => return Ok(converged(beta)),
            None => {
                return Err(Error::NonConvergence {
                    iterations: iter,
                    grad_norm,
                });
            }
        }
    }
    unreachable!()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplacePosterior {
    pub mode: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub log_det_cov: f64,
    pub log_joint: f64,
    pub grad_norm: f64,
}

impl LaplacePosterior {
    pub fn width(&self) -> usize {
        self.mode.len()
    }
}

/// Gaussian approximation at a mode: `Q^{-1} = -Hessian`.
pub fn laplace_posterior(cache: &DesignCache, mode: &DVector<f64>) -> Result<LaplacePosterior> {
    let e = cache.event_values(mode)?;
    let precision = negative_hessian(cache, &e);
    let chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Degenerate("posterior precision is not positive definite".into()))?;
    let log_det_precision: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let cov = chol.inverse();
    let cov = (&cov + cov.transpose()) * 0.5;
    let grad_norm = joint_gradient(cache, mode)?.amax();
    Ok(LaplacePosterior {
        mode: mode.clone(),
        covariance: cov,
        log_det_cov: -log_det_precision,
        log_joint: log_joint(cache, mode)?,
        grad_norm,
    })
}

/// `log p(x, beta_hat) + log|Q| / 2 + (R / 2) log 2 pi`.
pub fn log_marginal(posterior: &LaplacePosterior) -> f64 {
    posterior.log_joint + 0.5 * posterior.log_det_cov + 0.5 * posterior.width() as f64 * LN_2PI
}

/// Mode search followed by the Gaussian approximation.
pub fn fit_posterior(
    cache: &DesignCache,
    beta0: Option<&DVector<f64>>,
    tol: f64,
    max_iter: usize,
) -> Result<LaplacePosterior> {
    let start = match beta0 {
        Some(b) => b.clone(),
        None => cache.default_start()?,
    };
    let mode = find_mode(cache, &start, tol, max_iter)?;
    laplace_posterior(cache, &mode.beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{init_map, LayerSpec};
    use crate::integrals::{analytic_stats, StatsMethod};
    use crate::window::Window;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn stats(big_m: DMatrix<f64>, small_m: DVector<f64>, volume: f64) -> IntegralStats {
        IntegralStats {
            big_m,
            small_m,
            volume,
            method: StatsMethod::Analytic,
        }
    }

    fn random_instance(seed: u64, n: usize, r: usize) -> DesignCache {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let map = init_map(&[LayerSpec::new(r)], 1, seed).unwrap();
        let w = Window::centered_box(&[5.0]).unwrap();
        let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-5.0..5.0)]).collect();
        let pattern = PointPattern::new(w.clone(), &pts).unwrap();
        let s = analytic_stats(&map, &w).unwrap();
        DesignCache::new(&map, &pattern, s, 1.0 + rng.random::<f64>()).unwrap()
    }

    fn scalar_log_joint(c: &DesignCache, beta: &DVector<f64>) -> f64 {
        let (n, r) = c.phi.shape();
        let mut total = 0.0;
        for i in 0..n {
            let mut e = c.alpha;
            for j in 0..r {
                e += c.phi[(i, j)] * beta[j];
            }
            total += (e * e).ln();
        }
        for i in 0..r {
            for j in 0..r {
                total -= beta[i] * c.stats.big_m[(i, j)] * beta[j];
            }
            total -= 2.0 * c.alpha * beta[i] * c.stats.small_m[i];
            total -= 0.5 * beta[i] * beta[i];
        }
        total - c.alpha * c.alpha * c.stats.volume
    }

    #[test]
    fn empty_pattern_at_zero_weights() {
        let c = DesignCache::from_parts(
            DMatrix::zeros(0, 3),
            stats(DMatrix::identity(3, 3), DVector::zeros(3), 7.0),
            2.0,
        )
        .unwrap();
        assert_eq!(log_joint(&c, &DVector::zeros(3)).unwrap(), -28.0);
    }

    #[test]
    fn empty_pattern_symbolic_value() {
        let c = DesignCache::from_parts(
            DMatrix::zeros(0, 2),
            stats(DMatrix::identity(2, 2), DVector::zeros(2), 1.0),
            1.0,
        )
        .unwrap();
        let beta = DVector::from_vec(vec![0.6, -1.2]);
        let want = -1.5 * beta.norm_squared() - 1.0;
        assert!((log_joint(&c, &beta).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn log_joint_matches_scalar_loop() {
        let c = random_instance(1, 15, 6);
        let beta = DVector::from_fn(6, |i, _| 0.1 * i as f64 - 0.2);
        let a = log_joint(&c, &beta).unwrap();
        let b = scalar_log_joint(&c, &beta);
        assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
    }

    #[test]
    fn increment_matches_difference_and_resolves_tiny_steps() {
        let c = random_instance(3, 25, 6);
        let beta = DVector::from_fn(6, |i, _| 0.1 * i as f64 - 0.25);
        let e = c.event_values(&beta).unwrap();
        let d = DVector::from_fn(6, |i, _| 0.03 * (i as f64 - 2.5));
        let de = &c.phi * &d;
        let inc = log_joint_increment(&c, &beta, &e, &d, &de);
        let diff = log_joint(&c, &(&beta + &d)).unwrap() - log_joint(&c, &beta).unwrap();
        assert!((inc - diff).abs() < 1e-12 * (1.0 + diff.abs()));
        // first-order behaviour far below the objective's rounding level
        let g = joint_gradient(&c, &beta).unwrap();
        let tiny = &d * 1e-12;
        let inc = log_joint_increment(&c, &beta, &e, &tiny, &(&c.phi * &tiny));
        let lin = g.dot(&tiny);
        assert!((inc - lin).abs() < 1e-6 * lin.abs(), "{inc} vs {lin}");
    }

    #[test]
    fn singular_event_is_reported() {
        let phi = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let c = DesignCache::from_parts(
            phi,
            stats(DMatrix::zeros(1, 1), DVector::zeros(1), 1.0),
            1.0,
        )
        .unwrap();
        let beta = DVector::from_vec(vec![-0.5]);
        assert!(matches!(
            log_joint(&c, &beta),
            Err(Error::SingularEvent { index: 1 })
        ));
        assert!(matches!(
            joint_gradient(&c, &beta),
            Err(Error::SingularEvent { .. })
        ));
        assert!(matches!(
            joint_hessian(&c, &beta),
            Err(Error::SingularEvent { .. })
        ));
    }

    #[test]
    fn zero_event_gradient_and_hessian() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let c = DesignCache::from_parts(
            DMatrix::zeros(0, 2),
            stats(m.clone(), DVector::zeros(2), 3.0),
            1.0,
        )
        .unwrap();
        let beta = DVector::from_vec(vec![0.3, -0.7]);
        let g = joint_gradient(&c, &beta).unwrap();
        let want = -(&m * 2.0 + DMatrix::identity(2, 2)) * &beta;
        assert!((g - want).amax() < 1e-15);
        assert_eq!(
            joint_gradient(&c, &DVector::zeros(2)).unwrap(),
            DVector::zeros(2)
        );
        let h = joint_hessian(&c, &beta).unwrap();
        assert_eq!(h, -(&m * 2.0 + DMatrix::identity(2, 2)));
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        for seed in 0..5 {
            let c = random_instance(seed, 20, 5);
            let beta = DVector::from_fn(5, |i, _| 0.05 * (i as f64 - 2.0));
            let g = joint_gradient(&c, &beta).unwrap();
            let h = joint_hessian(&c, &beta).unwrap();
            for k in 0..5 {
                let step = 1e-6 * (1.0 + beta[k].abs());
                let mut up = beta.clone();
                up[k] += step;
                let mut down = beta.clone();
                down[k] -= step;
                let fd =
                    (log_joint(&c, &up).unwrap() - log_joint(&c, &down).unwrap()) / (2.0 * step);
                assert!((fd - g[k]).abs() <= 1e-5 * (1.0 + g[k].abs()));
                let fdg = (joint_gradient(&c, &up).unwrap() - joint_gradient(&c, &down).unwrap())
                    / (2.0 * step);
                for j in 0..5 {
                    assert!((fdg[j] - h[(j, k)]).abs() <= 1e-4 * (1.0 + h[(j, k)].abs()));
                }
            }
        }
    }

    #[test]
    fn hessian_eigenvalues_below_minus_one() {
        let c = random_instance(9, 30, 8);
        let beta = DVector::from_element(8, 0.02);
        let h = joint_hessian(&c, &beta).unwrap();
        let eig = h.symmetric_eigenvalues();
        assert!(eig.max() <= -1.0 + 1e-10);
    }

    #[test]
    fn zero_event_mode_is_linear_solve() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let small_m = DVector::from_vec(vec![0.4, -0.3]);
        let c = DesignCache::from_parts(
            DMatrix::zeros(0, 2),
            stats(m.clone(), small_m.clone(), 2.0),
            1.5,
        )
        .unwrap();
        let res = find_mode(&c, &DVector::zeros(2), 1e-10, 50).unwrap();
        let a = &m * 2.0 + DMatrix::identity(2, 2);
        let want = a.lu().solve(&small_m).unwrap() * (-3.0);
        assert!((res.beta - want).amax() < 1e-10);
        let c0 =
            DesignCache::from_parts(DMatrix::zeros(0, 2), stats(m, DVector::zeros(2), 2.0), 1.5)
                .unwrap();
        let res = find_mode(&c0, &DVector::from_vec(vec![1.0, -1.0]), 1e-10, 50).unwrap();
        assert_eq!(res.iterations, 1);
        assert!(res.beta.amax() < 1e-12);
    }

    /// Plain gradient ascent with an adaptive step, kept on the starting side
    /// of every nodal line.
    fn gradient_ascent_oracle(c: &DesignCache, start: &DVector<f64>) -> DVector<f64> {
        let signs = c.event_values(start).unwrap().map(f64::signum);
        let mut beta = start.clone();
        let mut step = 1e-3;
        let mut f = log_joint(c, &beta).unwrap();
        for _ in 0..1_000_000 {
            let g = joint_gradient(c, &beta).unwrap();
            if g.amax() < 1e-11 {
                break;
            }
            loop {
                let cand = &beta + &g * step;
                let same_side = c
                    .event_values(&cand)
                    .map(|e| e.map(f64::signum) == signs)
                    .unwrap_or(false);
                if same_side {
                    let fc = log_joint(c, &cand).unwrap();
                    if fc >= f {
                        beta = cand;
                        f = fc;
                        step *= 1.1;
                        break;
                    }
                }
                step *= 0.5;
            }
        }
        beta
    }

    #[test]
    fn mode_matches_gradient_ascent_oracle() {
        let c = random_instance(4, 20, 6);
        let start = c.default_start().unwrap();
        let newton = find_mode(&c, &start, 1e-10, 100).unwrap();
        let oracle = gradient_ascent_oracle(&c, &start);
        let diff = (&newton.beta - &oracle).amax();
        assert!(diff < 1e-6, "max difference {diff}");
    }

    #[test]
    fn restart_from_mode_is_stationary() {
        let c = random_instance(5, 25, 7);
        let m = find_mode(&c, &c.default_start().unwrap(), 1e-8, 100).unwrap();
        let again = find_mode(&c, &m.beta, 1e-8, 100).unwrap();
        assert_eq!(again.iterations, 0);
        assert_eq!(again.beta, m.beta);
    }

    #[test]
    fn posterior_special_cases() {
        let c = DesignCache::from_parts(DMatrix::zeros(0, 3), IntegralStats::zeros(3, 1.0), 1.0)
            .unwrap();
        let p = laplace_posterior(&c, &DVector::zeros(3)).unwrap();
        assert!((p.covariance.clone() - DMatrix::identity(3, 3)).amax() < 1e-15);
        assert!(p.log_det_cov.abs() < 1e-15);
        let c = DesignCache::from_parts(
            DMatrix::zeros(0, 3),
            stats(DMatrix::identity(3, 3), DVector::zeros(3), 1.0),
            1.0,
        )
        .unwrap();
        let p = laplace_posterior(&c, &DVector::zeros(3)).unwrap();
        assert!((p.covariance - DMatrix::identity(3, 3) / 3.0).amax() < 1e-15);
    }

    #[test]
    fn covariance_inverts_precision() {
        let c = random_instance(12, 40, 10);
        let p = fit_posterior(&c, None, 1e-8, 100).unwrap();
        let prec = -joint_hessian(&c, &p.mode).unwrap();
        let resid = &p.covariance * prec - DMatrix::identity(10, 10);
        assert!(resid.amax() < 1e-10);
        assert!(p.grad_norm <= 1e-8);
    }

    #[test]
    fn marginal_of_empty_prior_only_model() {
        let c = DesignCache::from_parts(DMatrix::zeros(0, 4), IntegralStats::zeros(4, 2.0), 0.5)
            .unwrap();
        let p = fit_posterior(&c, None, 1e-10, 10).unwrap();
        let want = -0.25 * 2.0 + 2.0 * LN_2PI;
        assert!((log_marginal(&p) - want).abs() < 1e-14);
    }

    #[test]
    fn marginal_shifts_with_log_joint() {
        let c = random_instance(2, 10, 4);
        let p = fit_posterior(&c, None, 1e-8, 100).unwrap();
        let mut shifted = p.clone();
        shifted.log_joint += 3.25;
        assert!((log_marginal(&shifted) - log_marginal(&p) - 3.25).abs() < 1e-12);
    }

    #[test]
    fn marginal_matches_evidence_quadrature_in_two_dimensions() {
        // R = 2 weights: integrate exp(log_joint) over a wide box with the
        // trapezoid rule and compare with the Laplace estimate.
        let c = random_instance(21, 40, 2);
        let p = fit_posterior(&c, None, 1e-10, 100).unwrap();
        let sd: Vec<f64> = (0..2).map(|i| p.covariance[(i, i)].sqrt()).collect();
        let n = 801;
        let half = 12.0;
        let mut total = 0.0;
        let shift = p.log_joint;
        for a in 0..n {
            for b in 0..n {
                let u = -half + 2.0 * half * a as f64 / (n - 1) as f64;
                let v = -half + 2.0 * half * b as f64 / (n - 1) as f64;
                let beta = DVector::from_vec(vec![p.mode[0] + u * sd[0], p.mode[1] + v * sd[1]]);
                let wa = if a == 0 || a == n - 1 { 0.5 } else { 1.0 };
                let wb = if b == 0 || b == n - 1 { 0.5 } else { 1.0 };
                if let Ok(f) = log_joint(&c, &beta) {
                    total += wa * wb * (f - shift).exp();
                }
            }
        }
        let cell = (2.0 * half / (n - 1) as f64).powi(2) * sd[0] * sd[1];
        let evidence = (total * cell).ln() + shift;
        let laplace = log_marginal(&p);
        assert!(
            (evidence - laplace).abs() < 0.02 * evidence.abs(),
            "{evidence} vs {laplace}"
        );
    }

    #[test]
    fn badly_scaled_features_converge_at_working_precision() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let base = init_map(&[LayerSpec::new(50)], 1, 4).unwrap();
        let l = &base.layers()[0];
        let layer = crate::features::SpectralLayer::new(
            1,
            l.omega(0).to_vec(),
            l.omega(1).to_vec(),
            l.bias(0).to_vec(),
            l.bias(1).to_vec(),
            2e5,
            false,
        )
        .unwrap();
        let map = crate::features::FeatureMap::new(vec![layer]).unwrap();
        let w = Window::centered_box(&[5.0]).unwrap();
        let pts: Vec<Vec<f64>> = (0..2000)
            .map(|_| vec![rng.random_range(-5.0..5.0)])
            .collect();
        let pattern = PointPattern::new(w.clone(), &pts).unwrap();
        let cache =
            DesignCache::new(&map, &pattern, analytic_stats(&map, &w).unwrap(), 2.3).unwrap();
        let start = DVector::zeros(50);
        let m = find_mode(&cache, &start, 1e-8, 100).unwrap();
        // the absolute tolerance is out of reach, but the remaining predicted
        // ascent is below the rounding level of the objective
        assert!(m.grad_norm > 1e-8);
        let g = joint_gradient(&cache, &m.beta).unwrap();
        let step = negative_hessian(&cache, &cache.event_values(&m.beta).unwrap())
            .cholesky()
            .unwrap()
            .solve(&g);
        let decrement = 0.5 * g.dot(&step);
        assert!(
            decrement <= 1e-14 * m.log_joint.abs(),
            "{decrement} at {}",
            m.log_joint
        );
        assert!(m.iterations < 100);
    }
}
