//! Bi-level fitting: an inner Laplace solve for the weights and an outer
//! gradient ascent on the approximate log marginal likelihood over the feature
//! parameters and the offset.
//!
//! Parameters are packed layer by layer as `Omega1` rows, `Omega2` rows, `b1`,
//! `b2`, `log sigma`, with `alpha` in the final slot.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{init_map, FeatureMap, LayerSpec};
use crate::integrals::{compute_stats, default_order, stats_vjp, IntegralStats};
use crate::laplace::{self, DesignCache, LaplacePosterior};
use crate::window::{PointPattern, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Weights and covariance held at the current inner solution.
    #[default]
    Frozen,
    /// Central differences through the full inner solve. Costs two inner
    /// solves per parameter, so only practical for small models.
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub layers: Vec<LayerSpec>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Gauss–Legendre order per axis for deep maps; defaults by dimension.
    pub quadrature_order: Option<usize>,
    pub seed: u64,
    pub alpha_init: f64,
    pub gradient: GradientMode,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            layers: vec![LayerSpec::new(50)],
            epochs: 100,
            learning_rate: 1e-2,
            tol: laplace::DEFAULT_TOL,
            max_iter: laplace::DEFAULT_MAX_ITER,
            quadrature_order: None,
            seed: 0,
            alpha_init: 1.0,
            gradient: GradientMode::Frozen,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.iter().any(|l| l.width == 0) {
            return Err(Error::Validation(
                "layers must be non-empty with widths >= 1".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be >= 1".into()));
        }
        if self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
            || !self.learning_rate.is_finite()
        {
            return Err(Error::Validation(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.tol.is_nan() || self.tol <= 0.0 || self.max_iter == 0 {
            return Err(Error::Validation(
                "inner solver needs tol > 0 and max_iter >= 1".into(),
            ));
        }
        if matches!(self.quadrature_order, Some(o) if o < 2) {
            return Err(Error::Validation("quadrature order must be >= 2".into()));
        }
        if !self.alpha_init.is_finite() {
            return Err(Error::Validation("alpha_init must be finite".into()));
        }
        Ok(())
    }

    pub fn order_for(&self, dim: usize) -> usize {
        self.quadrature_order.unwrap_or_else(|| default_order(dim))
    }
}

/// A trained model. The feature map operates on coordinates relative to the
/// window center; every public prediction entry point takes coordinates in
/// the original frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub map: FeatureMap,
    pub alpha: f64,
    pub posterior: LaplacePosterior,
    /// Window integrals over the centered window.
    pub stats: IntegralStats,
    pub window: Window,
    /// Log marginal likelihood per epoch.
    pub trace: Vec<f64>,
    pub best_epoch: usize,
}

impl FittedModel {
    pub fn log_marginal(&self) -> f64 {
        laplace::log_marginal(&self.posterior)
    }

    /// Shift an original-frame location into the map's frame.
    pub fn to_model_frame(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.window.center())
            .map(|(v, c)| v - c)
            .collect()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: FittedModel = serde_json::from_str(&text)?;
        if model.posterior.width() != model.map.out_dim()
            || model.stats.dim() != model.map.out_dim()
        {
            return Err(Error::Validation(
                "model file has inconsistent widths".into(),
            ));
        }
        Ok(model)
    }
}

pub fn pack_params(map: &FeatureMap, alpha: f64) -> Vec<f64> {
    let mut out = vec![0.0; map.param_len() + 1];
    let mut off = 0;
    for layer in map.layers() {
        let n = layer.param_len();
        layer.write_params(&mut out[off..off + n]);
        off += n;
    }
    out[off] = alpha;
    out
}

pub fn packed_len(specs: &[LayerSpec], input_dim: usize) -> usize {
    let mut d = input_dim;
    let mut total = 1;
    for s in specs {
        total += 2 * s.width * d + 2 * s.width + 1;
        d = s.width;
    }
    total
}

pub fn unpack_params(
    params: &[f64],
    specs: &[LayerSpec],
    input_dim: usize,
) -> Result<(FeatureMap, f64)> {
    let expected = packed_len(specs, input_dim);
    if params.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: params.len(),
        });
    }
    // any map of the right shape works as a template; every slot is overwritten
    let mut map = init_map(specs, input_dim, 0)?;
    write_into(&mut map, params)?;
    Ok((map, params[expected - 1]))
}

fn write_into(map: &mut FeatureMap, params: &[f64]) -> Result<()> {
    let mut off = 0;
    for layer in map.layers_mut() {
        let n = layer.param_len();
        layer.read_params(&params[off..off + n])?;
        off += n;
    }
    Ok(())
}

/// Put the summed gradient of both halves of a tied layer into each slot, so
/// a step keeps them equal.
fn tie_gradient(map: &FeatureMap, grad: &mut [f64]) {
    let mut off = 0;
    for layer in map.layers() {
        if layer.is_tied() {
            let rd = layer.width() * layer.in_dim();
            let r = layer.width();
            for k in 0..rd {
                let s = grad[off + k] + grad[off + rd + k];
                grad[off + k] = s;
                grad[off + rd + k] = s;
            }
            for k in 0..r {
                let (a, b) = (off + 2 * rd + k, off + 2 * rd + r + k);
                let s = grad[a] + grad[b];
                grad[a] = s;
                grad[b] = s;
            }
        }
        off += layer.param_len();
    }
}

/// Everything needed to evaluate the objective for one parameter setting, on
/// centered events.
struct Problem<'a> {
    events: &'a PointPattern,
    window: Window,
    config: &'a FitConfig,
}

impl<'a> Problem<'a> {
    fn new(events: &'a PointPattern, config: &'a FitConfig) -> Result<Self> {
        if !events.window().is_centered() {
            return Err(Error::Validation(
                "events must be in the centered frame".into(),
            ));
        }
        Ok(Self {
            window: events.window().clone(),
            events,
            config,
        })
    }

    fn cache(&self, map: &FeatureMap, alpha: f64) -> Result<DesignCache> {
        let stats = compute_stats(map, &self.window, self.config.order_for(self.window.dim()))?;
        DesignCache::new(map, self.events, stats, alpha)
    }

    fn solve(
        &self,
        map: &FeatureMap,
        alpha: f64,
        warm: Option<&DVector<f64>>,
    ) -> Result<(DesignCache, LaplacePosterior)> {
        let cache = self.cache(map, alpha)?;
        let post = laplace::fit_posterior(&cache, warm, self.config.tol, self.config.max_iter)?;
        Ok((cache, post))
    }
}

/// Approximate log marginal likelihood at `params`, with the inner mode
/// search started from `warm_start` (or the default start when `None`).
/// `events` must already be centered.
pub fn marginal_objective(
    params: &[f64],
    events: &PointPattern,
    config: &FitConfig,
    warm_start: Option<&DVector<f64>>,
) -> Result<(f64, LaplacePosterior)> {
    let problem = Problem::new(events, config)?;
    let (map, alpha) = unpack_params(params, &config.layers, events.dim())?;
    let (_, post) = problem.solve(&map, alpha, warm_start)?;
    Ok((laplace::log_marginal(&post), post))
}

/// `log p(x, beta) + log|Q(beta)| / 2 + (R/2) log 2 pi` at a fixed `beta`, with
/// `Q(beta)` the inverse negative Hessian at that `beta`. Equals the log
/// marginal when `beta` is the mode; its gradient in `params` is what
/// [`hyper_gradient`] computes.
pub fn frozen_objective(
    params: &[f64],
    events: &PointPattern,
    config: &FitConfig,
    beta: &DVector<f64>,
) -> Result<f64> {
    let problem = Problem::new(events, config)?;
    let (map, alpha) = unpack_params(params, &config.layers, events.dim())?;
    let cache = problem.cache(&map, alpha)?;
    let post = laplace::laplace_posterior(&cache, beta)?;
    Ok(laplace::log_marginal(&post))
}

/// Gradient of [`frozen_objective`] at `posterior.mode`, with the covariance
/// taken from `posterior`. Tied layers receive the summed gradient of both
/// halves in each slot.
pub fn hyper_gradient(
    map: &FeatureMap,
    alpha: f64,
    events: &PointPattern,
    stats: &IntegralStats,
    posterior: &LaplacePosterior,
) -> Result<Vec<f64>> {
    let window = events.window();
    let beta = &posterior.mode;
    let q = &posterior.covariance;
    let r = map.out_dim();
    if beta.len() != r || stats.dim() != r {
        return Err(Error::DimensionMismatch {
            expected: r,
            got: beta.len(),
        });
    }
    let p = map.param_len();
    let mut grad = vec![0.0; p + 1];
    let mut d_alpha = 0.0;

    for (i, x) in events.points().enumerate() {
        let psi = DVector::from_vec(map.eval(x));
        let e = beta.dot(&psi) + alpha;
        if e == 0.0 {
            return Err(Error::SingularEvent { index: i });
        }
        let q_psi = q * &psi;
        let s = psi.dot(&q_psi);
        let e2 = e * e;
        let e3 = e2 * e;
        // d/dpsi of [log e^2 - log|H|/2] with beta and Q fixed
        let up = beta * (2.0 / e + 2.0 * s / e3) - q_psi * (2.0 / e2);
        map.backward(x, up.as_slice(), &mut grad[..p]);
        d_alpha += 2.0 / e + 2.0 * s / e3;
    }
    d_alpha -= 2.0 * beta.dot(&stats.small_m) + 2.0 * alpha * stats.volume;

    // -beta^T M beta - 2 alpha beta^T m - tr(Q M)
    let g_big: DMatrix<f64> = -(beta * beta.transpose()) - q;
    let g_small: DVector<f64> = beta * (-2.0 * alpha);
    stats_vjp(map, window, stats.method, &g_big, &g_small, &mut grad[..p])?;

    grad[p] = d_alpha;
    tie_gradient(map, &mut grad[..p]);
    Ok(grad)
}

/// Slots that move together: both halves of a tied layer share one
/// parameter.
fn param_groups(map: &FeatureMap) -> Vec<Vec<usize>> {
    let mut groups = Vec::new();
    let mut off = 0;
    for layer in map.layers() {
        let rd = layer.width() * layer.in_dim();
        let r = layer.width();
        if layer.is_tied() {
            groups.extend((0..rd).map(|k| vec![off + k, off + rd + k]));
            groups.extend((0..r).map(|k| vec![off + 2 * rd + k, off + 2 * rd + r + k]));
            groups.push(vec![off + 2 * rd + 2 * r]);
        } else {
            groups.extend((off..off + layer.param_len()).map(|k| vec![k]));
        }
        off += layer.param_len();
    }
    groups.push(vec![off]);
    groups
}

/// Central differences of [`marginal_objective`], every evaluation
/// warm-started from `warm_start`.
pub fn finite_difference_gradient(
    params: &[f64],
    events: &PointPattern,
    config: &FitConfig,
    warm_start: &DVector<f64>,
) -> Result<Vec<f64>> {
    let (map, _) = unpack_params(params, &config.layers, events.dim())?;
    let mut grad = vec![0.0; params.len()];
    let mut work = params.to_vec();
    for group in param_groups(&map) {
        let h = 1e-5 * (1.0 + params[group[0]].abs());
        group.iter().for_each(|&k| work[k] = params[k] + h);
        let (fp, _) = marginal_objective(&work, events, config, Some(warm_start))?;
        group.iter().for_each(|&k| work[k] = params[k] - h);
        let (fm, _) = marginal_objective(&work, events, config, Some(warm_start))?;
        group.iter().for_each(|&k| work[k] = params[k]);
        let g = (fp - fm) / (2.0 * h);
        group.iter().for_each(|&k| grad[k] = g);
    }
    Ok(grad)
}

/// Run the fitting loop. Each epoch computes the window integrals, finds the
/// weight mode, forms the Laplace covariance, records the log marginal and
/// takes one gradient-ascent step on the hyperparameters. The model from the
/// best epoch is returned.
pub fn fit(events: &PointPattern, config: &FitConfig) -> Result<FittedModel> {
    config.validate()?;
    let centered = events.centered();
    let problem = Problem::new(&centered, config)?;
    let dim = events.dim();
    let mut map = init_map(&config.layers, dim, config.seed)?;
    let mut alpha = config.alpha_init;
    let mut warm: Option<DVector<f64>> = None;
    let mut trace = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, FeatureMap, f64, LaplacePosterior, IntegralStats)> = None;

    for epoch in 0..config.epochs {
        let wrap = |e: Error, trace: &[f64]| Error::Fit {
            epoch,
            trace: trace.to_vec(),
            source: Box::new(e),
        };
        let (cache, post) = problem
            .solve(&map, alpha, warm.as_ref())
            .map_err(|e| wrap(e, &trace))?;
        let value = laplace::log_marginal(&post);
        trace.push(value);

        let grad = match config.gradient {
            GradientMode::Frozen => hyper_gradient(&map, alpha, &centered, &cache.stats, &post),
            GradientMode::FiniteDifference => {
                finite_difference_gradient(&pack_params(&map, alpha), &centered, config, &post.mode)
            }
        }
        .map_err(|e| wrap(e, &trace))?;

        if best
            .as_ref()
            .is_none_or(|b| value > laplace::log_marginal(&b.3))
        {
            best = Some((epoch, map.clone(), alpha, post.clone(), cache.stats.clone()));
        }

        let mut params = pack_params(&map, alpha);
        for (p, g) in params.iter_mut().zip(&grad) {
            *p += config.learning_rate * g;
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(wrap(
                Error::Degenerate("hyperparameter step produced non-finite values".into()),
                &trace,
            ));
        }
        write_into(&mut map, &params[..params.len() - 1]).map_err(|e| wrap(e, &trace))?;
        alpha = params[params.len() - 1];
        warm = Some(post.mode);
    }

    let (best_epoch, map, alpha, posterior, stats) = best.expect("at least one epoch ran");
    Ok(FittedModel {
        map,
        alpha,
        posterior,
        stats,
        window: events.window().clone(),
        trace,
        best_epoch,
    })
}
