//! Observation windows and event patterns.
//!
//! A [`Window`] is an axis-aligned box in one or two dimensions. The integral
//! formulas downstream all work on the centered box `[-d_1, d_1] x [-d_2, d_2]`,
//! so a [`PointPattern`] can be translated into that frame with
//! [`PointPattern::centered`]. Coordinates are never rescaled.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box with one `(lo, hi)` pair per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct Window {
    bounds: Vec<[f64; 2]>,
}

impl Window {
    pub fn new(bounds: Vec<[f64; 2]>) -> Result<Self> {
        if bounds.is_empty() || bounds.len() > 2 {
            return Err(Error::Validation(format!(
                "window dimension must be 1 or 2, got {}",
                bounds.len()
            )));
        }
        for (k, [lo, hi]) in bounds.iter().enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::Validation(format!(
                    "window bound {k} must satisfy lo < hi with finite ends, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { bounds })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![[lo, hi]])
    }

    pub fn rect(x: [f64; 2], y: [f64; 2]) -> Result<Self> {
        Self::new(vec![x, y])
    }

    /// Centered box `[-d_k, d_k]` from half-widths.
    pub fn centered_box(half_widths: &[f64]) -> Result<Self> {
        Self::new(half_widths.iter().map(|&d| [-d, d]).collect())
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[[f64; 2]] {
        &self.bounds
    }

    pub fn center(&self) -> Vec<f64> {
        self.bounds.iter().map(|[lo, hi]| 0.5 * (lo + hi)).collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.bounds.iter().map(|[lo, hi]| 0.5 * (hi - lo)).collect()
    }

    pub fn volume(&self) -> f64 {
        self.bounds.iter().map(|[lo, hi]| hi - lo).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(&self.bounds)
                .all(|(v, [lo, hi])| *v >= *lo && *v <= *hi)
    }

    pub fn is_centered(&self) -> bool {
        self.bounds.iter().all(|[lo, hi]| *lo == -*hi)
    }

    /// The same window translated so its center sits at the origin.
    pub fn centered(&self) -> Window {
        let bounds = self.half_widths().into_iter().map(|d| [-d, d]).collect();
        Window { bounds }
    }
}

impl TryFrom<Vec<[f64; 2]>> for Window {
    type Error = Error;

    fn try_from(bounds: Vec<[f64; 2]>) -> Result<Self> {
        Window::new(bounds)
    }
}

impl From<Window> for Vec<[f64; 2]> {
    fn from(w: Window) -> Self {
        w.bounds
    }
}

/// Events observed inside a window, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointPattern {
    window: Window,
    coords: Vec<f64>,
}

impl PointPattern {
    pub fn new(window: Window, points: &[Vec<f64>]) -> Result<Self> {
        let dim = window.dim();
        let mut coords = Vec::with_capacity(points.len() * dim);
        for p in points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.len(),
                });
            }
            coords.extend_from_slice(p);
        }
        Self::from_flat(window, coords)
    }

    pub fn from_flat(window: Window, coords: Vec<f64>) -> Result<Self> {
        let dim = window.dim();
        if !coords.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: coords.len() % dim,
            });
        }
        for p in coords.chunks_exact(dim) {
            if !window.contains(p) {
                return Err(Error::Validation(format!(
                    "point {p:?} lies outside window {:?}",
                    window.bounds()
                )));
            }
        }
        Ok(Self { window, coords })
    }

    pub fn empty(window: Window) -> Self {
        Self {
            window,
            coords: Vec::new(),
        }
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn dim(&self) -> usize {
        self.window.dim()
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.coords[i * d..(i + 1) * d]
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim())
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Translate into the centered frame: every point becomes `x - c` and the
    /// window becomes `[-d_k, d_k]`.
    pub fn centered(&self) -> PointPattern {
        let c = self.window.center();
        let coords = self
            .coords
            .chunks_exact(self.dim())
            .flat_map(|p| p.iter().zip(&c).map(|(x, ck)| x - ck).collect::<Vec<_>>())
            .collect();
        PointPattern {
            window: self.window.centered(),
            coords,
        }
    }

    /// Parse events from CSV text. One event per row, one column per
    /// dimension; a first row starting with a non-numeric token is a header.
    pub fn read_csv<R: Read>(reader: R, window: Window) -> Result<Self> {
        let dim = window.dim();
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let mut coords = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| Error::Parse {
                row,
                message: e.to_string(),
            })?;
            if record.iter().all(str::is_empty) {
                continue;
            }
            let first = record.get(0).unwrap_or("");
            if row == 0 && first.parse::<f64>().is_err() {
                continue;
            }
            if record.len() != dim {
                return Err(Error::Parse {
                    row,
                    message: format!("expected {dim} columns, found {}", record.len()),
                });
            }
            let start = coords.len();
            for field in record.iter() {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    row,
                    message: format!("not a number: {field:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        message: format!("non-finite coordinate {field:?}"),
                    });
                }
                coords.push(v);
            }
            if !window.contains(&coords[start..]) {
                return Err(Error::Validation(format!(
                    "row {row}: point {:?} lies outside window {:?}",
                    &coords[start..],
                    window.bounds()
                )));
            }
        }
        Ok(Self { window, coords })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().from_writer(writer);
        for p in self.points() {
            wtr.write_record(p.iter().map(|v| v.to_string()))
                .map_err(|e| Error::Validation(e.to_string()))?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Read an event CSV from disk and validate it against `window`.
pub fn load_events(path: impl AsRef<Path>, window: Window) -> Result<PointPattern> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    PointPattern::read_csv(std::io::BufReader::new(file), window)
}
