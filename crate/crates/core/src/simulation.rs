//! Synthetic ground truth: Gaussian-process latent functions on a grid,
//! squared-offset intensities and thinning.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::lattice::Lattice;
use crate::predict::IntensityGrid;
use crate::window::{PointPattern, Window};

const BASE_JITTER: f64 = 1e-8;
const JITTER_ESCALATIONS: usize = 3;
/// Largest grid the dense factorization accepts.
pub const MAX_GRID_NODES: usize = 5000;
pub const LAMBDA_MAX_FACTOR: f64 = 1.05;
pub const INTENSITY_OFFSET: f64 = 2.0;
pub const TRUTH_NODES_1D: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `exp(-|x1 - x2|^2 / (2 l^2))`
    Gaussian { length_scale: f64 },
    /// `((x1 . x2) / scale + 1)^degree` times the Gaussian kernel.
    PolyTimesGaussian {
        length_scale: f64,
        scale: f64,
        degree: i32,
    },
    /// Inner product of a feature map.
    FeatureMap { map: FeatureMap },
    /// Identically zero.
    Zero,
}

impl KernelSpec {
    pub fn stationary() -> Self {
        KernelSpec::Gaussian { length_scale: 1.0 }
    }

    pub fn nonstationary() -> Self {
        KernelSpec::PolyTimesGaussian {
            length_scale: 1.0,
            scale: 100.0,
            degree: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            KernelSpec::Gaussian { length_scale } => *length_scale > 0.0,
            KernelSpec::PolyTimesGaussian {
                length_scale,
                scale,
                degree,
            } => *length_scale > 0.0 && *scale > 0.0 && *degree >= 0,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "invalid kernel parameters: {self:?}"
            )))
        }
    }

    pub fn eval(&self, x1: &[f64], x2: &[f64]) -> f64 {
        let gauss = |l: f64| {
            let d2: f64 = x1.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum();
            (-0.5 * d2 / (l * l)).exp()
        };
        match self {
            KernelSpec::Gaussian { length_scale } => gauss(*length_scale),
            KernelSpec::PolyTimesGaussian {
                length_scale,
                scale,
                degree,
            } => {
                let dot: f64 = x1.iter().zip(x2).map(|(a, b)| a * b).sum();
                (dot / scale + 1.0).powi(*degree) * gauss(*length_scale)
            }
            KernelSpec::FeatureMap { map } => map.kernel(x1, x2).unwrap_or(f64::NAN),
            KernelSpec::Zero => 0.0,
        }
    }
}

/// Draw `f ~ N(0, K + jitter I)` at the lattice nodes.
pub fn gp_sample_grid(spec: &KernelSpec, lattice: &Lattice, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    gp_sample_with(spec, lattice, &mut rng)
}

fn gp_sample_with(spec: &KernelSpec, lattice: &Lattice, rng: &mut ChaCha20Rng) -> Result<Vec<f64>> {
    spec.validate()?;
    let n = lattice.len();
    if n > MAX_GRID_NODES {
        return Err(Error::Validation(format!(
            "grid has {n} nodes; dense sampling supports at most {MAX_GRID_NODES}"
        )));
    }
    let d = lattice.dim();
    let nodes = lattice.nodes();
    let k = DMatrix::from_fn(n, n, |i, j| {
        spec.eval(&nodes[i * d..(i + 1) * d], &nodes[j * d..(j + 1) * d])
    });
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate(
            "kernel produced non-finite values".into(),
        ));
    }
    let mean_diag = k.diagonal().mean();
    let base = if mean_diag > 0.0 {
        BASE_JITTER * mean_diag
    } else {
        BASE_JITTER
    };
    let mut jitter = base;
    for _ in 0..=JITTER_ESCALATIONS {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(chol) = kj.cholesky() {
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            return Ok((chol.l() * z).as_slice().to_vec());
        }
        jitter *= 10.0;
    }
    Err(Error::Degenerate(format!(
        "kernel matrix not positive definite with jitter up to {:e}",
        jitter / 10.0
    )))
}

/// Inhomogeneous Poisson sample by thinning a homogeneous process of rate
/// `lambda_max`. Any evaluated intensity above `lambda_max` is an error.
pub fn thinning_sample(
    intensity: impl Fn(&[f64]) -> f64,
    window: &Window,
    lambda_max: f64,
    seed: u64,
) -> Result<PointPattern> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    thinning_with(intensity, window, lambda_max, &mut rng)
}

fn thinning_with(
    intensity: impl Fn(&[f64]) -> f64,
    window: &Window,
    lambda_max: f64,
    rng: &mut ChaCha20Rng,
) -> Result<PointPattern> {
    if lambda_max.is_nan() || lambda_max <= 0.0 || !lambda_max.is_finite() {
        return Err(Error::Validation(format!(
            "lambda_max must be positive, got {lambda_max}"
        )));
    }
    let rate = lambda_max * window.volume();
    let count = Poisson::new(rate)
        .map_err(|e| Error::Validation(format!("bad Poisson rate {rate}: {e}")))?
        .sample(rng) as usize;
    let d = window.dim();
    let mut kept = Vec::new();
    let mut x = vec![0.0; d];
    for _ in 0..count {
        for (k, [lo, hi]) in window.bounds().iter().enumerate() {
            x[k] = rng.random_range(*lo..*hi);
        }
        let lam = intensity(&x);
        if lam.is_nan() || lam < 0.0 {
            return Err(Error::Domain(format!(
                "intensity {lam} at {x:?} is negative or undefined"
            )));
        }
        if lam > lambda_max {
            return Err(Error::Domain(format!(
                "intensity {lam} at {x:?} exceeds the thinning bound {lambda_max}"
            )));
        }
        let u: f64 = rng.random();
        if u * lambda_max < lam {
            kept.extend_from_slice(&x);
        }
    }
    PointPattern::from_flat(window.clone(), kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Stationary,
    Nonstationary,
}

impl DatasetKind {
    pub fn kernel(self) -> KernelSpec {
        match self {
            DatasetKind::Stationary => KernelSpec::stationary(),
            DatasetKind::Nonstationary => KernelSpec::nonstationary(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Stationary => "stationary",
            DatasetKind::Nonstationary => "nonstationary",
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stationary" => Ok(DatasetKind::Stationary),
            "nonstationary" => Ok(DatasetKind::Nonstationary),
            other => Err(Error::Validation(format!("unknown dataset kind '{other}'"))),
        }
    }
}

/// A sampled latent function and its intensity on a lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub lattice: Lattice,
    pub latent: Vec<f64>,
    pub intensity: Vec<f64>,
    pub lambda_max: f64,
}

impl GroundTruth {
    /// `lambda = (f + 2)^2` at the nodes, bound `1.05 * max lambda`.
    pub fn from_latent(lattice: Lattice, latent: Vec<f64>) -> Result<Self> {
        if latent.len() != lattice.len() {
            return Err(Error::DimensionMismatch {
                expected: lattice.len(),
                got: latent.len(),
            });
        }
        let intensity: Vec<f64> = latent
            .iter()
            .map(|f| (f + INTENSITY_OFFSET).powi(2))
            .collect();
        let max = intensity.iter().cloned().fold(0.0, f64::max);
        Ok(Self {
            lattice,
            latent,
            intensity,
            lambda_max: LAMBDA_MAX_FACTOR * max,
        })
    }

    /// Linear interpolation of the node intensities.
    pub fn intensity_at(&self, x: &[f64]) -> f64 {
        self.lattice.interpolate(&self.intensity, x)
    }

    pub fn window(&self) -> &Window {
        &self.lattice.window
    }

    /// Trapezoid rule on the node intensities (exact for the interpolant).
    pub fn integral(&self) -> f64 {
        let d = self.lattice.dim();
        let axes: Vec<Vec<f64>> = (0..d)
            .map(|k| trapezoid_weights(&self.lattice.axis(k)))
            .collect();
        let res = &self.lattice.resolution;
        let mut total = 0.0;
        for (flat, v) in self.intensity.iter().enumerate() {
            let mut rem = flat;
            let mut w = 1.0;
            for k in (0..d).rev() {
                w *= axes[k][rem % res[k]];
                rem /= res[k];
            }
            total += w * v;
        }
        total
    }

    pub fn as_grid(&self) -> IntensityGrid {
        IntensityGrid {
            lattice: self.lattice.clone(),
            mean: self.intensity.clone(),
            variance: vec![0.0; self.intensity.len()],
        }
    }

    /// Thin a fresh event set from this truth.
    pub fn sample_events(&self, seed: u64) -> Result<PointPattern> {
        thinning_sample(
            |x| self.intensity_at(x),
            self.window(),
            self.lambda_max,
            seed,
        )
    }
}

fn trapezoid_weights(axis: &[f64]) -> Vec<f64> {
    let n = axis.len();
    let mut w = vec![0.0; n];
    for i in 0..n - 1 {
        let h = axis[i + 1] - axis[i];
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    w
}

/// The synthetic domain, `[0, 10]`.
pub fn synth_window() -> Window {
    Window::interval(0.0, 10.0).expect("static window is valid")
}

/// Sample a latent function of the given kind on 1000 nodes over `[0, 10]`.
pub fn synth_truth(kind: DatasetKind, seed: u64) -> Result<GroundTruth> {
    let lattice = Lattice::uniform(synth_window(), TRUTH_NODES_1D)?;
    let latent = gp_sample_grid(&kind.kernel(), &lattice, seed)?;
    GroundTruth::from_latent(lattice, latent)
}

/// Seed for the `j`-th event set thinned from the truth drawn with `seed`.
pub fn event_seed(seed: u64, j: u64) -> u64 {
    // splitmix64 finalizer keeps the streams unrelated to the latent draw
    let mut z = seed ^ (j.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One latent draw and one thinned event set.
pub fn synth_dataset(kind: DatasetKind, seed: u64) -> Result<(PointPattern, GroundTruth)> {
    let truth = synth_truth(kind, seed)?;
    let events = truth.sample_events(event_seed(seed, 0))?;
    Ok((events, truth))
}

/// One latent draw and `n` independent event sets thinned from it.
pub fn synth_protocol(
    kind: DatasetKind,
    seed: u64,
    n: usize,
) -> Result<(GroundTruth, Vec<PointPattern>)> {
    let truth = synth_truth(kind, seed)?;
    let sets = (0..n as u64)
        .map(|j| truth.sample_events(event_seed(seed, j)))
        .collect::<Result<Vec<_>>>()?;
    Ok((truth, sets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: DatasetKind,
    pub seed: u64,
    pub lambda_max: f64,
    pub window: Window,
    pub truth_file: String,
    pub event_files: Vec<String>,
    pub event_counts: Vec<usize>,
}

/// Write `truth.csv`, `events_<j>.csv` and `manifest.json` into `dir`.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    kind: DatasetKind,
    seed: u64,
    truth: &GroundTruth,
    sets: &[PointPattern],
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let truth_file = "truth.csv".to_string();
    truth.as_grid().save_csv(dir.join(&truth_file))?;
    let mut event_files = Vec::with_capacity(sets.len());
    for (j, s) in sets.iter().enumerate() {
        let name = format!("events_{j}.csv");
        s.save(dir.join(&name))?;
        event_files.push(name);
    }
    let manifest = DatasetManifest {
        kind,
        seed,
        lambda_max: truth.lambda_max,
        window: truth.window().clone(),
        truth_file,
        event_files,
        event_counts: sets.iter().map(|s| s.len()).collect(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_se(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }

    #[test]
    fn zero_kernel_gives_jitter_scale_values() {
        let lat = Lattice::uniform(synth_window(), 50).unwrap();
        let f = gp_sample_grid(&KernelSpec::Zero, &lat, 1).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn gaussian_marginal_variance() {
        let lat = Lattice::uniform(synth_window(), 500).unwrap();
        let draws: Vec<f64> = (0..200)
            .map(|s| gp_sample_grid(&KernelSpec::stationary(), &lat, s).unwrap()[250].powi(2))
            .collect();
        let (m, se) = mean_se(&draws);
        assert!((m - 1.0).abs() < 3.0 * se, "{m} +- {se}");
    }

    #[test]
    fn nonstationary_marginal_variance_at_ten() {
        let k = KernelSpec::nonstationary();
        assert!((k.eval(&[10.0], &[10.0]) - 8.0).abs() < 1e-12);
        let lat = Lattice::uniform(synth_window(), 200).unwrap();
        let draws: Vec<f64> = (0..300)
            .map(|s| gp_sample_grid(&k, &lat, s).unwrap()[199].powi(2))
            .collect();
        let (m, se) = mean_se(&draws);
        assert!((m - 8.0).abs() < 3.0 * se, "{m} +- {se}");
    }

    #[test]
    fn invalid_kernel_and_oversized_grid() {
        let lat = Lattice::uniform(synth_window(), 10).unwrap();
        assert!(gp_sample_grid(&KernelSpec::Gaussian { length_scale: 0.0 }, &lat, 0).is_err());
        let big = Lattice::uniform(synth_window(), MAX_GRID_NODES + 1).unwrap();
        assert!(gp_sample_grid(&KernelSpec::Zero, &big, 0).is_err());
    }

    #[test]
    fn thinning_zero_and_constant() {
        let w = synth_window();
        assert!(thinning_sample(|_| 0.0, &w, 3.0, 1).unwrap().is_empty());
        let counts: Vec<f64> = (0..500)
            .map(|s| thinning_sample(|_| 2.0, &w, 2.0, s).unwrap().len() as f64)
            .collect();
        let (m, se) = mean_se(&counts);
        assert!((m - 20.0).abs() < 3.0 * se);
    }

    #[test]
    fn thinning_linear_intensity() {
        let w = synth_window();
        let mut locs = Vec::new();
        let mut counts = Vec::new();
        for s in 0..400 {
            let p = thinning_sample(|x| x[0], &w, 10.0, s).unwrap();
            counts.push(p.len() as f64);
            locs.extend(p.coords().iter().cloned());
        }
        let (m, se) = mean_se(&counts);
        assert!((m - 50.0).abs() < 3.0 * se);
        // Kolmogorov–Smirnov against F(x) = x^2 / 100 at the 1% level
        locs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = locs.len() as f64;
        let d = locs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let f = x * x / 100.0;
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.628 / n.sqrt(), "KS statistic {d}");
    }

    #[test]
    fn thinning_two_level_counts() {
        let w = synth_window();
        let lam = |x: &[f64]| if x[0] < 4.0 { 0.5 } else { 3.0 };
        let (mut left, mut right) = (0.0, 0.0);
        let runs = 300;
        for s in 0..runs {
            let p = thinning_sample(lam, &w, 3.0, s).unwrap();
            for x in p.points() {
                if x[0] < 4.0 {
                    left += 1.0;
                } else {
                    right += 1.0;
                }
            }
        }
        let (el, er) = (0.5 * 4.0 * runs as f64, 3.0 * 6.0 * runs as f64);
        let chi2 = (left - el).powi(2) / el + (right - er).powi(2) / er;
        // chi-square with 2 degrees of freedom, 1% critical value
        assert!(chi2 < 9.21, "chi2 = {chi2}");
    }

    #[test]
    fn thinning_bound_violation_is_an_error() {
        let w = synth_window();
        assert!(matches!(
            thinning_sample(|x| x[0], &w, 5.0, 2),
            Err(Error::Domain(_))
        ));
        assert!(thinning_sample(|_| 1.0, &w, 0.0, 2).is_err());
    }

    #[test]
    fn datasets_are_deterministic() {
        let (a, ta) = synth_dataset(DatasetKind::Stationary, 4).unwrap();
        let (b, tb) = synth_dataset(DatasetKind::Stationary, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert!(ta.intensity.iter().all(|v| *v >= 0.0));
        let max = ta.intensity.iter().cloned().fold(0.0, f64::max);
        assert!(ta.lambda_max >= max);
        let (_, sets) = synth_protocol(DatasetKind::Nonstationary, 4, 10).unwrap();
        assert_eq!(sets.len(), 10);
        assert_ne!(sets[0], sets[1]);
    }

    #[test]
    fn campbell_check() {
        let mut diffs = Vec::new();
        for s in 0..100 {
            let (events, truth) = synth_dataset(DatasetKind::Stationary, s).unwrap();
            diffs.push(events.len() as f64 - truth.integral());
        }
        let (m, se) = mean_se(&diffs);
        assert!(m.abs() < 3.0 * se, "{m} +- {se}");
    }

    #[test]
    fn dataset_writer_round_trip() {
        let (truth, sets) = synth_protocol(DatasetKind::Stationary, 1, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let man = write_dataset(dir.path(), DatasetKind::Stationary, 1, &truth, &sets).unwrap();
        assert_eq!(man.event_files.len(), 2);
        let back =
            crate::window::load_events(dir.path().join(&man.event_files[1]), man.window.clone())
                .unwrap();
        assert_eq!(back, sets[1]);
        let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let parsed: DatasetManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, man);
    }
}
