//! Expected log of a squared Gaussian.
//!
//! For `y ~ N(mu, s2)`,
//!
//! ```text
//! E[log y^2] = -G(-mu^2 / (2 s2)) + log(s2 / 2) - C
//! ```
//!
//! with `C` the Euler–Mascheroni constant and
//! `G(z) = 2z sum_j j! z^j / ((2)_j (3/2)_j)`, i.e. `2z 2F2(1, 1; 2, 3/2; z)`.
//! The power series alternates for `z < 0` and loses all precision once `|z|`
//! reaches a few tens, so large arguments use the equivalent Poisson mixture of digamma values that comes
//! from writing `y^2 / s2` as a noncentral chi-square:
//!
//! ```text
//! -G(z) = 2 log 2 + C + sum_j Pois(j; -z) psi(j + 1/2)
//! ```

use std::sync::OnceLock;

use crate::error::{Error, Result};

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const LN_2: f64 = std::f64::consts::LN_2;
/// psi(1/2) = -C - 2 log 2
const DIGAMMA_HALF: f64 = -EULER_GAMMA - 2.0 * LN_2;

pub const DEFAULT_SERIES_TOL: f64 = 1e-12;
/// Arguments below this use the digamma mixture instead of the power series.
pub const SERIES_SWITCH: f64 = -10.0;
pub const DEFAULT_TABLE_NODES: usize = 4096;
pub const DEFAULT_TABLE_ZMIN: f64 = -50.0;

/// Power series for `G(z)`, summed until the next term drops below
/// `tol * (1 + |sum|)`.
pub fn g_tilde_series(z: f64, tol: f64) -> f64 {
    if z == 0.0 {
        return 0.0;
    }
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut j = 1.0;
    loop {
        term *= j * z / ((j + 1.0) * (j + 0.5));
        sum += term;
        if term.abs() < tol * (1.0 + sum.abs()) || j > 10_000.0 {
            break;
        }
        j += 1.0;
    }
    2.0 * z * sum
}

fn digamma(x: f64) -> f64 {
    // recurrence up to x >= 6, then the asymptotic series
    let mut acc = 0.0;
    let mut x = x;
    while x < 6.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + x.ln()
        - 0.5 * inv
        - inv2
            * (1.0 / 12.0
                - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 / 132.0))))
}

/// `G(z)` through the Poisson–digamma mixture with rate `lambda = -z`.
pub fn g_tilde_mixture(z: f64) -> f64 {
    let lambda = -z;
    if lambda == 0.0 {
        return 0.0;
    }
    if lambda > 1e7 {
        return -((4.0 * lambda).ln() + EULER_GAMMA - 0.5 / lambda - 0.375 / (lambda * lambda));
    }
    let mode = lambda.floor();
    let psi_mode = if mode == 0.0 {
        DIGAMMA_HALF
    } else {
        digamma(mode + 0.5)
    };
    // unnormalized weights relative to the mode, walked outward
    let mut total_w = 1.0;
    let mut total = psi_mode;
    let mut w = 1.0;
    let mut psi = psi_mode;
    let mut j = mode;
    loop {
        w *= lambda / (j + 1.0);
        psi += 1.0 / (j + 0.5);
        j += 1.0;
        total_w += w;
        total += w * psi;
        if w < 1e-18 * total_w {
            break;
        }
    }
    let mut w = 1.0;
    let mut psi = psi_mode;
    let mut j = mode;
    while j > 0.0 {
        w *= j / lambda;
        psi -= 1.0 / (j - 0.5);
        j -= 1.0;
        total_w += w;
        total += w * psi;
        if w < 1e-18 * total_w {
            break;
        }
    }
    -(2.0 * LN_2 + EULER_GAMMA + total / total_w)
}

/// `G(z)` for `z <= 0`.
pub fn g_tilde(z: f64, tol: f64) -> Result<f64> {
    if z.is_nan() || z > 0.0 {
        return Err(Error::Domain(format!(
            "G is only used at non-positive arguments, got {z}"
        )));
    }
    if z >= SERIES_SWITCH {
        Ok(g_tilde_series(z, tol))
    } else {
        Ok(g_tilde_mixture(z))
    }
}

/// Linear-interpolation table of `G` on `[z_min, 0]`, nodes stored in
/// descending order from `0`.
#[derive(Debug, Clone)]
pub struct GTildeTable {
    z: Vec<f64>,
    values: Vec<f64>,
    z_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lookup {
    pub value: f64,
    /// The argument fell below the table range and was evaluated directly.
    pub out_of_range: bool,
}

impl GTildeTable {
    /// Nodes are denser near zero: `z_k = z_min (e^{a t_k} - 1) / (e^a - 1)`.
    pub fn build(z_min: f64, nodes: usize) -> Result<Self> {
        if z_min.is_nan() || z_min >= 0.0 || nodes < 2 {
            return Err(Error::Validation(format!(
                "table needs z_min < 0 and at least 2 nodes (got {z_min}, {nodes})"
            )));
        }
        let a: f64 = 4.0;
        let denom = a.exp_m1();
        let z: Vec<f64> = (0..nodes)
            .map(|k| {
                if k == nodes - 1 {
                    z_min
                } else {
                    let t = k as f64 / (nodes - 1) as f64;
                    z_min * (a * t).exp_m1() / denom
                }
            })
            .collect();
        let values = z
            .iter()
            .map(|&zk| g_tilde(zk, DEFAULT_SERIES_TOL))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { z, values, z_min })
    }

    pub fn z_min(&self) -> f64 {
        self.z_min
    }

    pub fn nodes(&self) -> &[f64] {
        &self.z
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn lookup(&self, z: f64) -> Result<Lookup> {
        if z.is_nan() || z > 0.0 {
            return Err(Error::Domain(format!("G lookup needs z <= 0, got {z}")));
        }
        if z < self.z_min {
            return Ok(Lookup {
                value: g_tilde_mixture(z),
                out_of_range: true,
            });
        }
        // z is descending: find k with z[k] >= z >= z[k+1]
        let k = self.z.partition_point(|&node| node > z);
        let value = if k == 0 {
            self.values[0]
        } else if self.z[k] == z {
            self.values[k]
        } else {
            let (z0, z1) = (self.z[k - 1], self.z[k]);
            let t = (z0 - z) / (z0 - z1);
            self.values[k - 1] + t * (self.values[k] - self.values[k - 1])
        };
        Ok(Lookup {
            value,
            out_of_range: false,
        })
    }
}

/// Process-wide table with the default grid.
pub fn default_table() -> &'static GTildeTable {
    static TABLE: OnceLock<GTildeTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        GTildeTable::build(DEFAULT_TABLE_ZMIN, DEFAULT_TABLE_NODES)
            .expect("default table parameters are valid")
    })
}

/// `E[log y^2]` for `y ~ N(mu, s2)`, with `G` from the default table.
pub fn expected_log_squared(mu: f64, s2: f64) -> Result<f64> {
    check_variance(s2)?;
    let z = -mu * mu / (2.0 * s2);
    let g = default_table().lookup(z)?.value;
    Ok(-g + (0.5 * s2).ln() - EULER_GAMMA)
}

/// Same as [`expected_log_squared`] but evaluating `G` directly.
pub fn expected_log_squared_exact(mu: f64, s2: f64) -> Result<f64> {
    check_variance(s2)?;
    let z = -mu * mu / (2.0 * s2);
    Ok(-g_tilde(z, DEFAULT_SERIES_TOL)? + (0.5 * s2).ln() - EULER_GAMMA)
}

fn check_variance(s2: f64) -> Result<()> {
    if s2.is_nan() || s2 <= 0.0 || !s2.is_finite() {
        return Err(Error::Domain(format!(
            "variance must be positive, got {s2}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_argument() {
        assert_eq!(g_tilde(0.0, 1e-14).unwrap(), 0.0);
        assert_eq!(default_table().lookup(0.0).unwrap().value, 0.0);
    }

    #[test]
    fn positive_argument_is_rejected() {
        assert!(matches!(g_tilde(0.5, 1e-12), Err(Error::Domain(_))));
        assert!(default_table().lookup(1e-3).is_err());
        assert!(expected_log_squared(1.0, 0.0).is_err());
        assert!(expected_log_squared(1.0, -1.0).is_err());
    }

    #[test]
    fn series_value_at_minus_one() {
        // direct partial sums of j! z^j / ((2)_j (3/2)_j), 60 terms
        let mut sum = 0.0;
        let mut fact = 1.0;
        let mut p2 = 1.0;
        let mut phalf = 1.0; // (3/2)_j
        for j in 0..60 {
            if j > 0 {
                let jf = j as f64;
                fact *= jf;
                p2 *= 1.0 + jf;
                phalf *= jf + 0.5;
            }
            sum += fact * (-1.0f64).powi(j) / (p2 * phalf);
        }
        let oracle = -2.0 * sum;
        assert!((g_tilde(-1.0, 1e-14).unwrap() - oracle).abs() < 1e-13);
    }

    #[test]
    fn series_and_mixture_agree() {
        for z in [-0.01, -0.5, -1.0, -3.0, -7.5, -10.0, -14.0] {
            let a = g_tilde_series(z, 1e-15);
            let b = g_tilde_mixture(z);
            assert!((a - b).abs() < 1e-9, "z={z}: series {a} mixture {b}");
        }
    }

    #[test]
    fn mixture_matches_large_argument_expansion() {
        for lambda in [1e5, 5e6] {
            let direct = g_tilde_mixture(-lambda);
            let asym =
                -((4.0 * lambda).ln() + EULER_GAMMA - 0.5 / lambda - 0.375 / (lambda * lambda));
            assert!((direct - asym).abs() < 1e-9, "{lambda}");
        }
    }

    #[test]
    fn centered_value_is_minus_gamma_minus_log_two() {
        let v = expected_log_squared(0.0, 1.0).unwrap();
        assert!((v - (-EULER_GAMMA - LN_2)).abs() < 1e-15);
        assert!((v + 1.270_362_845_461_478).abs() < 1e-12);
    }

    #[test]
    fn small_argument_expansion() {
        // the noncentral chi-square mixture gives G(z) = 2z + 2z^2/3 + O(z^3)
        let z = -1e-4;
        let g = g_tilde(z, 1e-15).unwrap();
        assert!((g - (2.0 * z + 2.0 * z * z / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn matches_monte_carlo() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        for (mu, s2) in [(0.3, 1.0), (1.5, 0.5), (-2.0, 2.0)] {
            let n = 400_000;
            let sd = f64::sqrt(s2);
            let draws: Vec<f64> = (0..n)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    (mu + sd * g).powi(2).ln()
                })
                .collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            let v = expected_log_squared_exact(mu, s2).unwrap();
            assert!(
                (v - mean).abs() < 4.0 * se,
                "mu={mu} s2={s2}: {v} vs {mean} +- {se}"
            );
        }
    }

    #[test]
    fn concentrated_limit() {
        let v = expected_log_squared(100.0, 1.0).unwrap();
        assert!((v - 2.0 * 100f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn table_nodes_are_exact_and_monotone() {
        let t = default_table();
        for k in [0, 1, 17, 2048, 4095] {
            let z = t.nodes()[k];
            assert_eq!(t.lookup(z).unwrap().value, t.values()[k]);
        }
        assert!(t.values().windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(t.nodes()[4095], -50.0);
    }

    #[test]
    fn table_midpoints_within_tolerance() {
        let t = default_table();
        let mut worst: f64 = 0.0;
        for pair in t.nodes().windows(2) {
            let mid = 0.5 * (pair[0] + pair[1]);
            let err = (t.lookup(mid).unwrap().value - g_tilde(mid, 1e-14).unwrap()).abs();
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst midpoint error {worst}");
    }

    #[test]
    fn below_range_is_flagged_but_accurate() {
        let t = default_table();
        let l = t.lookup(-80.0).unwrap();
        assert!(l.out_of_range);
        assert!((l.value - g_tilde(-80.0, 1e-12).unwrap()).abs() < 1e-12);
        assert!(!t.lookup(-49.0).unwrap().out_of_range);
    }

    #[test]
    fn table_rejects_bad_parameters() {
        assert!(GTildeTable::build(0.0, 10).is_err());
        assert!(GTildeTable::build(-1.0, 1).is_err());
    }
}
