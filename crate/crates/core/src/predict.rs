//! Posterior predictions and evaluation metrics.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gtilde::expected_log_squared;
use crate::lattice::Lattice;
use crate::training::FittedModel;
use crate::window::PointPattern;

/// Predictive distribution of `f(x) + alpha` at one location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentPrediction {
    pub mean: f64,
    pub variance: f64,
    /// The location lies outside the training window.
    pub extrapolated: bool,
}

/// `mu = beta_hat . psi(x) + alpha`, `s2 = psi(x)^T Q psi(x)`, for `x` in the
/// original frame.
pub fn predictive_f(model: &FittedModel, x: &[f64]) -> Result<LatentPrediction> {
    let local = model.to_model_frame(x);
    let psi = DVector::from_vec(model.map.forward(&local)?);
    let mean = model.posterior.mode.dot(&psi) + model.alpha;
    let variance = psi.dot(&(&model.posterior.covariance * &psi)).max(0.0);
    Ok(LatentPrediction {
        mean,
        variance,
        extrapolated: !model.window.contains(x),
    })
}

/// Mean and variance of `y^2` for `y ~ N(mu, s2)`.
pub fn predictive_intensity(mu: f64, s2: f64) -> (f64, f64) {
    (mu * mu + s2, 2.0 * s2 * s2 + 4.0 * mu * mu * s2)
}

/// Expected test log-likelihood under the weight posterior:
/// `-E[int lambda] + sum_i E[log lambda(x_i)]`.
pub fn expected_test_loglik(model: &FittedModel, test: &PointPattern) -> Result<f64> {
    if test.window() != &model.window {
        return Err(Error::Validation(format!(
            "test window {:?} differs from the model window {:?}",
            test.window().bounds(),
            model.window.bounds()
        )));
    }
    let mut total = -expected_integral(model);
    for x in test.points() {
        let p = predictive_f(model, x)?;
        total += expected_log_squared(p.mean, p.variance)?;
    }
    Ok(total)
}

/// `beta^T M beta + tr(Q M) + 2 alpha beta^T m + alpha^2 |X|`.
pub fn expected_integral(model: &FittedModel) -> f64 {
    let beta = &model.posterior.mode;
    let big_m = &model.stats.big_m;
    let trace_qm = model.posterior.covariance.component_mul(big_m).sum();
    beta.dot(&(big_m * beta))
        + trace_qm
        + 2.0 * model.alpha * beta.dot(&model.stats.small_m)
        + model.alpha * model.alpha * model.stats.volume
}

/// Node-wise intensity moments on a lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityGrid {
    pub lattice: Lattice,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl IntensityGrid {
    pub fn new(lattice: Lattice, mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != lattice.len() || variance.len() != lattice.len() {
            return Err(Error::DimensionMismatch {
                expected: lattice.len(),
                got: mean.len().min(variance.len()),
            });
        }
        Ok(Self {
            lattice,
            mean,
            variance,
        })
    }

    /// Columns `x0, x1, ..., mean, variance`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let d = self.lattice.dim();
        let mut header: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
        header.push("mean".into());
        header.push("variance".into());
        w.write_record(&header).map_err(csv_err)?;
        for (i, node) in self.lattice.nodes().chunks(d).enumerate() {
            let mut row: Vec<String> = node.iter().map(|v| v.to_string()).collect();
            row.push(self.mean[i].to_string());
            row.push(self.variance[i].to_string());
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()
            .map_err(|e| Error::Validation(format!("csv write failed: {e}")))?;
        Ok(())
    }

    /// Read a grid written by [`write_csv`](Self::write_csv). The lattice is
    /// recovered from the node coordinates, which must form a full regular
    /// grid in the written order.
    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::Parse {
            row: 0,
            message: e.to_string(),
        })?;
        let d = header
            .len()
            .checked_sub(2)
            .filter(|d| *d >= 1)
            .ok_or_else(|| Error::Parse {
                row: 0,
                message: "expected coordinate columns followed by mean and variance".into(),
            })?;
        let mut coords = Vec::new();
        let mut mean = Vec::new();
        let mut variance = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| Error::Parse {
                row,
                message: e.to_string(),
            })?;
            let vals = rec
                .iter()
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    row,
                    message: e.to_string(),
                })?;
            if vals.len() != d + 2 {
                return Err(Error::Parse {
                    row,
                    message: format!("expected {} fields, found {}", d + 2, vals.len()),
                });
            }
            coords.extend_from_slice(&vals[..d]);
            mean.push(vals[d]);
            variance.push(vals[d + 1]);
        }
        let mut bounds = Vec::with_capacity(d);
        let mut resolution = Vec::with_capacity(d);
        for k in 0..d {
            let mut axis: Vec<f64> = coords.iter().skip(k).step_by(d).cloned().collect();
            axis.sort_by(|a, b| a.total_cmp(b));
            axis.dedup();
            if axis.len() < 2 {
                return Err(Error::Validation(format!(
                    "grid axis {k} has fewer than two distinct values"
                )));
            }
            bounds.push([axis[0], axis[axis.len() - 1]]);
            resolution.push(axis.len());
        }
        let lattice = Lattice::new(crate::window::Window::new(bounds)?, resolution)?;
        let expected = lattice.nodes();
        let scale = lattice
            .window
            .bounds()
            .iter()
            .map(|[lo, hi]| hi.abs().max(lo.abs()))
            .fold(1.0, f64::max);
        if expected.len() != coords.len()
            || expected
                .iter()
                .zip(&coords)
                .any(|(a, b)| (a - b).abs() > 1e-9 * scale)
        {
            return Err(Error::Validation(
                "grid nodes do not form a regular lattice".into(),
            ));
        }
        Self::new(lattice, mean, variance)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let g: IntensityGrid = serde_json::from_str(&text)?;
        Self::new(g.lattice, g.mean, g.variance)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Validation(format!("csv write failed: {e}"))
}

/// Posterior intensity moments at every node of a `resolution`-per-axis
/// lattice over the model window.
pub fn intensity_grid(model: &FittedModel, resolution: usize) -> Result<IntensityGrid> {
    let lattice = Lattice::uniform(model.window.clone(), resolution)?;
    intensity_on(model, lattice)
}

pub fn intensity_on(model: &FittedModel, lattice: Lattice) -> Result<IntensityGrid> {
    let d = lattice.dim();
    let mut mean = Vec::with_capacity(lattice.len());
    let mut variance = Vec::with_capacity(lattice.len());
    for node in lattice.nodes().chunks(d) {
        let p = predictive_f(model, node)?;
        let (m, v) = predictive_intensity(p.mean, p.variance);
        mean.push(m);
        variance.push(v);
    }
    IntensityGrid::new(lattice, mean, variance)
}

/// Root mean square difference of the node-wise means.
pub fn rmse(predicted: &IntensityGrid, truth: &IntensityGrid) -> Result<f64> {
    if predicted.lattice != truth.lattice {
        return Err(Error::Validation(
            "grids differ in window or resolution".into(),
        ));
    }
    let n = predicted.mean.len() as f64;
    let ss: f64 = predicted
        .mean
        .iter()
        .zip(&truth.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((ss / n).sqrt())
}
