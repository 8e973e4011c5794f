//! Window integrals of the feature map: `M = int psi psi^T dx` and
//! `m = int psi dx`.
//!
//! Single-layer maps have closed forms. Every product of two cosine features
//! expands into cosines of `(w_a +/- w_b) . x + phase`, and the integral of a
//! shifted cosine over a box is separable. Deeper maps fall back to
//! tensor-product Gauss–Legendre quadrature.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, SpectralLayer};
use crate::quadrature::TensorRule;
use crate::window::Window;

/// Below this value of `|eta * d|` the sinc factor uses its Taylor series.
pub const SINC_SERIES_THRESHOLD: f64 = 1e-8;

/// Default quadrature orders per dimension for deep maps.
pub const DEFAULT_ORDER_1D: usize = 64;
pub const DEFAULT_ORDER_2D: usize = 48;

pub fn default_order(dim: usize) -> usize {
    if dim == 1 {
        DEFAULT_ORDER_1D
    } else {
        DEFAULT_ORDER_2D
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsMethod {
    Analytic,
    Quadrature { order: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegralStats {
    pub big_m: DMatrix<f64>,
    pub small_m: DVector<f64>,
    pub volume: f64,
    pub method: StatsMethod,
}

impl IntegralStats {
    pub fn dim(&self) -> usize {
        self.small_m.len()
    }

    /// Stats of the zero map on a window of the given volume (used for
    /// prior-only checks).
    pub fn zeros(width: usize, volume: f64) -> Self {
        Self {
            big_m: DMatrix::zeros(width, width),
            small_m: DVector::zeros(width),
            volume,
            method: StatsMethod::Analytic,
        }
    }
}

/// `int_{-d}^{d} cos(eta x) dx` as `2 d sinc(eta d)`.
pub fn sinc_factor(eta: f64, d: f64) -> f64 {
    let t = eta * d;
    if t.abs() > SINC_SERIES_THRESHOLD {
        2.0 * t.sin() / eta
    } else {
        let t2 = t * t;
        2.0 * d * (1.0 - t2 / 6.0 + t2 * t2 / 120.0)
    }
}

/// Derivative of [`sinc_factor`] with respect to `eta`.
fn sinc_factor_deriv(eta: f64, d: f64) -> f64 {
    let t = eta * d;
    let dsinc = if t.abs() < 1e-2 {
        let t2 = t * t;
        t * (-1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0)
    } else {
        (t * t.cos() - t.sin()) / (t * t)
    };
    2.0 * d * d * dsinc
}

/// `int_window cos(eta . x + c) dx`.
///
/// The window is translated to its center so the integral becomes
/// `cos(c + eta . center) * prod_k 2 d_k sinc(eta_k d_k)`; the odd sine part
/// vanishes on the symmetric box.
pub fn box_cosine_integral(eta: &[f64], c: f64, window: &Window) -> f64 {
    assert_eq!(
        eta.len(),
        window.dim(),
        "frequency/window dimension mismatch"
    );
    assert!(
        c.is_finite() && eta.iter().all(|v| v.is_finite()),
        "non-finite frequency or phase"
    );
    let mut phase = c;
    let mut prod = 1.0;
    for (e, [lo, hi]) in eta.iter().zip(window.bounds()) {
        phase += e * 0.5 * (lo + hi);
        prod *= sinc_factor(*e, 0.5 * (hi - lo));
    }
    phase.cos() * prod
}

/// `int_window sin(eta . x + c) dx`.
pub fn box_sine_integral(eta: &[f64], c: f64, window: &Window) -> f64 {
    box_cosine_integral(eta, c - std::f64::consts::FRAC_PI_2, window)
}

/// Value, eta-gradient and phase-derivative of [`box_cosine_integral`].
fn box_cosine_integral_grad(eta: &[f64], c: f64, window: &Window, d_eta: &mut [f64]) -> (f64, f64) {
    let dim = eta.len();
    let mut phase = c;
    let mut s = [0.0; 2];
    let mut ds = [0.0; 2];
    let mut centers = [0.0; 2];
    for (k, (e, [lo, hi])) in eta.iter().zip(window.bounds()).enumerate() {
        centers[k] = 0.5 * (lo + hi);
        phase += e * centers[k];
        let d = 0.5 * (hi - lo);
        s[k] = sinc_factor(*e, d);
        ds[k] = sinc_factor_deriv(*e, d);
    }
    let (sp, cp) = phase.sin_cos();
    let prod: f64 = s[..dim].iter().product();
    for k in 0..dim {
        let others: f64 = (0..dim).filter(|&l| l != k).map(|l| s[l]).product();
        d_eta[k] = cp * ds[k] * others - sp * centers[k] * prod;
    }
    (cp * prod, -sp * prod)
}

fn single_layer(map: &FeatureMap) -> Result<&SpectralLayer> {
    if map.depth() != 1 {
        return Err(Error::Unsupported(format!(
            "closed-form integrals need a single-layer map (depth {}); use quadrature_stats",
            map.depth()
        )));
    }
    Ok(&map.layers()[0])
}

fn check_dims(map: &FeatureMap, window: &Window) -> Result<()> {
    if map.in_dim() != window.dim() {
        return Err(Error::DimensionMismatch {
            expected: window.dim(),
            got: map.in_dim(),
        });
    }
    Ok(())
}

/// Closed-form `M` and `m` for a single-layer map.
pub fn analytic_stats(map: &FeatureMap, window: &Window) -> Result<IntegralStats> {
    let layer = single_layer(map)?;
    check_dims(map, window)?;
    let r = layer.width();
    let dim = layer.in_dim();
    let s = layer.scale();
    let mut big_m = DMatrix::zeros(r, r);
    let mut small_m = DVector::zeros(r);
    let mut eta = vec![0.0; dim];
    for i in 0..r {
        small_m[i] = s
            * (0..2)
                .map(|a| box_cosine_integral(row(layer, a, i), layer.bias(a)[i], window))
                .sum::<f64>();
        for j in i..r {
            let mut acc = 0.0;
            for a in 0..2 {
                let wa = row(layer, a, i);
                let ba = layer.bias(a)[i];
                for b in 0..2 {
                    let wb = row(layer, b, j);
                    let bb = layer.bias(b)[j];
                    for k in 0..dim {
                        eta[k] = wa[k] - wb[k];
                    }
                    acc += box_cosine_integral(&eta, ba - bb, window);
                    for k in 0..dim {
                        eta[k] = wa[k] + wb[k];
                    }
                    acc += box_cosine_integral(&eta, ba + bb, window);
                }
            }
            let v = 0.5 * s * s * acc;
            big_m[(i, j)] = v;
            big_m[(j, i)] = v;
        }
    }
    Ok(IntegralStats {
        big_m,
        small_m,
        volume: window.volume(),
        method: StatsMethod::Analytic,
    })
}

fn row(layer: &SpectralLayer, half: usize, r: usize) -> &[f64] {
    if half == 0 {
        layer.omega1_row(r)
    } else {
        layer.omega2_row(r)
    }
}

/// Tensor Gauss–Legendre estimate of `M` and `m` with `order` nodes per axis.
pub fn quadrature_stats(map: &FeatureMap, window: &Window, order: usize) -> Result<IntegralStats> {
    if order < 2 {
        return Err(Error::Validation(format!(
            "quadrature order must be >= 2, got {order}"
        )));
    }
    check_dims(map, window)?;
    let rule = TensorRule::new(window, order);
    let r = map.out_dim();
    let mut big_m = DMatrix::zeros(r, r);
    let mut small_m = DVector::zeros(r);
    for q in 0..rule.len() {
        let w = rule.weights[q];
        let psi = DVector::from_vec(map.eval(rule.node(q)));
        small_m.axpy(w, &psi, 1.0);
        big_m.ger(w, &psi, &psi, 1.0);
    }
    let big_m = (&big_m + big_m.transpose()) * 0.5;
    Ok(IntegralStats {
        big_m,
        small_m,
        volume: window.volume(),
        method: StatsMethod::Quadrature { order },
    })
}

/// Analytic stats for depth one, quadrature otherwise.
pub fn compute_stats(map: &FeatureMap, window: &Window, order: usize) -> Result<IntegralStats> {
    if map.depth() == 1 {
        analytic_stats(map, window)
    } else {
        quadrature_stats(map, window, order)
    }
}

/// `beta^T M beta + 2 alpha beta^T m + alpha^2 |X|`, i.e. `int (beta.psi + alpha)^2`.
pub fn intensity_integral(stats: &IntegralStats, beta: &DVector<f64>, alpha: f64) -> Result<f64> {
    if beta.len() != stats.dim() {
        return Err(Error::DimensionMismatch {
            expected: stats.dim(),
            got: beta.len(),
        });
    }
    let quad = beta.dot(&(&stats.big_m * beta));
    Ok(quad + 2.0 * alpha * beta.dot(&stats.small_m) + alpha * alpha * stats.volume)
}

/// Pull back `sum_ij G_ij dM_ij + sum_i g_i dm_i` onto the map parameters,
/// accumulating into `grad` (layout of [`FeatureMap::param_len`]). `g_big`
/// must be symmetric.
pub(crate) fn stats_vjp(
    map: &FeatureMap,
    window: &Window,
    method: StatsMethod,
    g_big: &DMatrix<f64>,
    g_small: &DVector<f64>,
    grad: &mut [f64],
) -> Result<()> {
    match method {
        StatsMethod::Analytic => analytic_vjp(single_layer(map)?, window, g_big, g_small, grad)?,
        StatsMethod::Quadrature { order } => {
            let rule = TensorRule::new(window, order);
            for q in 0..rule.len() {
                let x = rule.node(q);
                let psi = DVector::from_vec(map.eval(x));
                let up = (g_big * &psi) * (2.0 * rule.weights[q]) + g_small * rule.weights[q];
                map.backward(x, up.as_slice(), grad);
            }
        }
    }
    Ok(())
}

fn analytic_vjp(
    layer: &SpectralLayer,
    window: &Window,
    g_big: &DMatrix<f64>,
    g_small: &DVector<f64>,
    grad: &mut [f64],
) -> Result<()> {
    let r = layer.width();
    let dim = layer.in_dim();
    let rd = r * dim;
    let s = layer.scale();
    let w_off = |half: usize, i: usize| half * rd + i * dim;
    let b_off = |half: usize, i: usize| 2 * rd + half * r + i;
    let sig_off = 2 * rd + 2 * r;
    let mut eta = vec![0.0; dim];
    let mut d_eta = vec![0.0; dim];

    for i in 0..r {
        let gi = g_small[i];
        if gi != 0.0 {
            for a in 0..2 {
                let (v, dc) = box_cosine_integral_grad(
                    row(layer, a, i),
                    layer.bias(a)[i],
                    window,
                    &mut d_eta,
                );
                for k in 0..dim {
                    grad[w_off(a, i) + k] += gi * s * d_eta[k];
                }
                grad[b_off(a, i)] += gi * s * dc;
                grad[sig_off] += gi * s * v;
            }
        }
    }

    let half_s2 = 0.5 * s * s;
    for i in 0..r {
        for j in 0..r {
            let g = g_big[(i, j)];
            if g == 0.0 {
                continue;
            }
            let c = g * half_s2;
            for a in 0..2 {
                let wa = row(layer, a, i);
                let ba = layer.bias(a)[i];
                for b in 0..2 {
                    let wb = row(layer, b, j);
                    let bb = layer.bias(b)[j];
                    // difference term
                    for k in 0..dim {
                        eta[k] = wa[k] - wb[k];
                    }
                    let (v, dc) = box_cosine_integral_grad(&eta, ba - bb, window, &mut d_eta);
                    for k in 0..dim {
                        grad[w_off(a, i) + k] += c * d_eta[k];
                        grad[w_off(b, j) + k] -= c * d_eta[k];
                    }
                    grad[b_off(a, i)] += c * dc;
                    grad[b_off(b, j)] -= c * dc;
                    grad[sig_off] += 2.0 * c * v;
                    // sum term
                    for k in 0..dim {
                        eta[k] = wa[k] + wb[k];
                    }
                    let (v, dc) = box_cosine_integral_grad(&eta, ba + bb, window, &mut d_eta);
                    for k in 0..dim {
                        grad[w_off(a, i) + k] += c * d_eta[k];
                        grad[w_off(b, j) + k] += c * d_eta[k];
                    }
                    grad[b_off(a, i)] += c * dc;
                    grad[b_off(b, j)] += c * dc;
                    grad[sig_off] += 2.0 * c * v;
                }
            }
        }
    }
    Ok(())
}
