//! Regular grids over a window, with multilinear interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::window::Window;

/// `resolution[k]` equally spaced nodes per axis, endpoints included. Nodes
/// are ordered with the last axis varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub window: Window,
    pub resolution: Vec<usize>,
}

impl Lattice {
    pub fn new(window: Window, resolution: Vec<usize>) -> Result<Self> {
        if resolution.len() != window.dim() {
            return Err(Error::DimensionMismatch {
                expected: window.dim(),
                got: resolution.len(),
            });
        }
        if resolution.iter().any(|&r| r < 2) {
            return Err(Error::Validation(
                "grid resolution must be >= 2 per axis".into(),
            ));
        }
        Ok(Self { window, resolution })
    }

    /// Same resolution on every axis.
    pub fn uniform(window: Window, per_axis: usize) -> Result<Self> {
        let d = window.dim();
        Self::new(window, vec![per_axis; d])
    }

    pub fn dim(&self) -> usize {
        self.resolution.len()
    }

    pub fn len(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn axis(&self, k: usize) -> Vec<f64> {
        let [lo, hi] = self.window.bounds()[k];
        let n = self.resolution[k];
        (0..n)
            .map(|i| {
                if i == n - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect()
    }

    /// Flat node coordinates, `dim` per node.
    pub fn nodes(&self) -> Vec<f64> {
        let axes: Vec<Vec<f64>> = (0..self.dim()).map(|k| self.axis(k)).collect();
        let mut out = Vec::with_capacity(self.len() * self.dim());
        for flat in 0..self.len() {
            let idx = self.unflatten(flat);
            out.extend(idx.iter().enumerate().map(|(k, &i)| axes[k][i]));
        }
        out
    }

    fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for k in (0..self.dim()).rev() {
            idx[k] = flat % self.resolution[k];
            flat /= self.resolution[k];
        }
        idx
    }

    fn flatten(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.resolution)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    /// Multilinear interpolation of node values; points outside the window
    /// are clamped to it.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        let d = self.dim();
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for k in 0..d {
            let [lo, hi] = self.window.bounds()[k];
            let n = self.resolution[k];
            let t = ((x[k] - lo) / (hi - lo)).clamp(0.0, 1.0) * (n - 1) as f64;
            let i = (t.floor() as usize).min(n - 2);
            base[k] = i;
            frac[k] = t - i as f64;
        }
        let mut acc = 0.0;
        let mut idx = vec![0usize; d];
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            for k in 0..d {
                let up = (corner >> k) & 1 == 1;
                idx[k] = base[k] + up as usize;
                w *= if up { frac[k] } else { 1.0 - frac[k] };
            }
            if w != 0.0 {
                acc += w * values[self.flatten(&idx)];
            }
        }
        acc
    }
}
