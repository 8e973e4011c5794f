//! Sparse spectral feature maps.
//!
//! A [`SpectralLayer`] of width `R` maps a `D_in`-vector to an `R`-vector with
//! entries
//!
//! ```text
//! phi_r(x) = sigma / sqrt(2R) * [cos(w1_r . x + b1_r) + cos(w2_r . x + b2_r)]
//! ```
//!
//! and a [`FeatureMap`] composes layers. The induced kernel is the inner
//! product of feature vectors. When a layer is tied (`w1 = w2`, `b1 = b2`) it
//! reduces to ordinary random Fourier features of a stationary kernel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    #[serde(default)]
    pub tie: bool,
}

impl LayerSpec {
    pub fn new(width: usize) -> Self {
        Self { width, tie: false }
    }

    pub fn tied(width: usize) -> Self {
        Self { width, tie: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerRepr")]
pub struct SpectralLayer {
    in_dim: usize,
    width: usize,
    /// `width x in_dim`, row-major.
    omega1: Vec<f64>,
    omega2: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
    sigma: f64,
    tied: bool,
}

#[derive(Deserialize)]
struct LayerRepr {
    in_dim: usize,
    width: usize,
    omega1: Vec<f64>,
    omega2: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
    sigma: f64,
    #[serde(default)]
    tied: bool,
}

impl TryFrom<LayerRepr> for SpectralLayer {
    type Error = Error;

    fn try_from(r: LayerRepr) -> Result<Self> {
        if r.width != r.b1.len() {
            return Err(Error::Validation(format!(
                "layer width {} disagrees with {} phases",
                r.width,
                r.b1.len()
            )));
        }
        SpectralLayer::new(r.in_dim, r.omega1, r.omega2, r.b1, r.b2, r.sigma, r.tied)
    }
}

impl SpectralLayer {
    pub fn new(
        in_dim: usize,
        omega1: Vec<f64>,
        omega2: Vec<f64>,
        b1: Vec<f64>,
        b2: Vec<f64>,
        sigma: f64,
        tied: bool,
    ) -> Result<Self> {
        let width = b1.len();
        if width == 0 || in_dim == 0 {
            return Err(Error::Validation(
                "layer width and input dimension must be >= 1".into(),
            ));
        }
        for (name, len, want) in [
            ("omega1", omega1.len(), width * in_dim),
            ("omega2", omega2.len(), width * in_dim),
            ("b2", b2.len(), width),
        ] {
            if len != want {
                return Err(Error::Validation(format!(
                    "{name} has {len} entries, expected {want}"
                )));
            }
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Validation(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        if omega1
            .iter()
            .chain(&omega2)
            .chain(&b1)
            .chain(&b2)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Validation("layer parameters must be finite".into()));
        }
        if tied && (omega1 != omega2 || b1 != b2) {
            return Err(Error::Validation(
                "tied layer requires omega1 == omega2 and b1 == b2".into(),
            ));
        }
        Ok(Self {
            in_dim,
            width,
            omega1,
            omega2,
            b1,
            b2,
            sigma,
            tied,
        })
    }

    /// Tied layer: a single frequency/phase set used for both halves.
    pub fn new_tied(in_dim: usize, omega: Vec<f64>, b: Vec<f64>, sigma: f64) -> Result<Self> {
        Self::new(in_dim, omega.clone(), omega, b.clone(), b, sigma, true)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn is_tied(&self) -> bool {
        self.tied
    }

    pub fn omega1_row(&self, r: usize) -> &[f64] {
        &self.omega1[r * self.in_dim..(r + 1) * self.in_dim]
    }

    pub fn omega2_row(&self, r: usize) -> &[f64] {
        &self.omega2[r * self.in_dim..(r + 1) * self.in_dim]
    }

    pub fn omega(&self, half: usize) -> &[f64] {
        if half == 0 {
            &self.omega1
        } else {
            &self.omega2
        }
    }

    pub fn bias(&self, half: usize) -> &[f64] {
        if half == 0 {
            &self.b1
        } else {
            &self.b2
        }
    }

    /// `sigma / sqrt(2R)`, the common prefactor of every entry.
    pub fn scale(&self) -> f64 {
        self.sigma / (2.0 * self.width as f64).sqrt()
    }

    /// Number of scalar parameters in the packed representation:
    /// `omega1`, `omega2`, `b1`, `b2`, `log sigma`.
    pub fn param_len(&self) -> usize {
        2 * self.width * self.in_dim + 2 * self.width + 1
    }

    pub(crate) fn write_params(&self, out: &mut [f64]) {
        let rd = self.width * self.in_dim;
        let r = self.width;
        out[..rd].copy_from_slice(&self.omega1);
        out[rd..2 * rd].copy_from_slice(&self.omega2);
        out[2 * rd..2 * rd + r].copy_from_slice(&self.b1);
        out[2 * rd + r..2 * rd + 2 * r].copy_from_slice(&self.b2);
        out[2 * rd + 2 * r] = self.sigma.ln();
    }

    pub(crate) fn read_params(&mut self, src: &[f64]) -> Result<()> {
        let rd = self.width * self.in_dim;
        let r = self.width;
        if src.len() != self.param_len() {
            return Err(Error::DimensionMismatch {
                expected: self.param_len(),
                got: src.len(),
            });
        }
        let sigma = src[2 * rd + 2 * r].exp();
        let layer = SpectralLayer::new(
            self.in_dim,
            src[..rd].to_vec(),
            src[rd..2 * rd].to_vec(),
            src[2 * rd..2 * rd + r].to_vec(),
            src[2 * rd + r..2 * rd + 2 * r].to_vec(),
            sigma,
            self.tied,
        )?;
        *self = layer;
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    #[inline]
    fn phase(&self, half: usize, r: usize, x: &[f64]) -> f64 {
        let (w, b) = if half == 0 {
            (self.omega1_row(r), self.b1[r])
        } else {
            (self.omega2_row(r), self.b2[r])
        };
        w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut out = vec![0.0; self.width];
        self.forward_into(x, &mut out);
        Ok(out)
    }

    pub(crate) fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        let s = self.scale();
        for (r, o) in out.iter_mut().enumerate() {
            *o = s * (self.phase(0, r, x).cos() + self.phase(1, r, x).cos());
        }
    }

    /// Accumulate parameter gradients into `grad` (layout of
    /// [`param_len`](Self::param_len)) and, when requested, the input gradient.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        grad_out: &[f64],
        grad: &mut [f64],
        mut grad_x: Option<&mut [f64]>,
    ) {
        let d = self.in_dim;
        let rd = self.width * d;
        let r_total = self.width;
        let s = self.scale();
        if let Some(gx) = grad_x.as_deref_mut() {
            gx.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut dlog_sigma = 0.0;
        for r in 0..r_total {
            let g = grad_out[r];
            if g == 0.0 {
                continue;
            }
            let u1 = self.phase(0, r, x);
            let u2 = self.phase(1, r, x);
            let (s1, c1) = u1.sin_cos();
            let (s2, c2) = u2.sin_cos();
            dlog_sigma += g * s * (c1 + c2);
            let g1 = -g * s * s1;
            let g2 = -g * s * s2;
            for k in 0..d {
                grad[r * d + k] += g1 * x[k];
                grad[rd + r * d + k] += g2 * x[k];
            }
            grad[2 * rd + r] += g1;
            grad[2 * rd + r_total + r] += g2;
            if let Some(gx) = grad_x.as_deref_mut() {
                let w1 = self.omega1_row(r);
                let w2 = self.omega2_row(r);
                for k in 0..d {
                    gx[k] += g1 * w1[k] + g2 * w2[k];
                }
            }
        }
        grad[2 * rd + 2 * r_total] += dlog_sigma;
    }

    /// The `2R` cosine/sine representation: entries
    /// `sigma/(2 sqrt R) [cos(w1_r.x) + cos(w2_r.x)]` followed by the sine
    /// analogues. Phases are ignored.
    pub fn trig_pair_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let r_total = self.width;
        let s = self.sigma / (2.0 * (r_total as f64).sqrt());
        let mut out = vec![0.0; 2 * r_total];
        for r in 0..r_total {
            let u1: f64 = self.omega1_row(r).iter().zip(x).map(|(a, b)| a * b).sum();
            let u2: f64 = self.omega2_row(r).iter().zip(x).map(|(a, b)| a * b).sum();
            out[r] = s * (u1.cos() + u2.cos());
            out[r_total + r] = s * (u1.sin() + u2.sin());
        }
        Ok(out)
    }
}

/// Composition of spectral layers, first layer applied first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MapRepr")]
pub struct FeatureMap {
    layers: Vec<SpectralLayer>,
}

#[derive(Deserialize)]
struct MapRepr {
    layers: Vec<SpectralLayer>,
}

impl TryFrom<MapRepr> for FeatureMap {
    type Error = Error;

    fn try_from(r: MapRepr) -> Result<Self> {
        FeatureMap::new(r.layers)
    }
}

impl FeatureMap {
    pub fn new(layers: Vec<SpectralLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation(
                "feature map needs at least one layer".into(),
            ));
        }
        for pair in layers.windows(2) {
            if pair[1].in_dim != pair[0].width {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].width,
                    got: pair[1].in_dim,
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[SpectralLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [SpectralLayer] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].width
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| LayerSpec {
                width: l.width,
                tie: l.tied,
            })
            .collect()
    }

    pub fn param_len(&self) -> usize {
        self.layers.iter().map(SpectralLayer::param_len).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.layers[0].check_input(x)?;
        Ok(self.eval(x))
    }

    /// Forward pass without the input-length check.
    pub(crate) fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let mut next = vec![0.0; layer.width];
            layer.forward_into(&cur, &mut next);
            cur = next;
        }
        cur
    }

    /// Forward pass returning every layer's input followed by the output.
    fn eval_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.layers {
            let mut next = vec![0.0; layer.width];
            layer.forward_into(acts.last().unwrap(), &mut next);
            acts.push(next);
        }
        acts
    }

    /// Accumulate `d(g . psi(x)) / d(params)` into `grad`, laid out layer by
    /// layer as in [`SpectralLayer::param_len`].
    pub(crate) fn backward(&self, x: &[f64], grad_out: &[f64], grad: &mut [f64]) {
        let acts = self.eval_trace(x);
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.param_len();
        }
        let mut upstream = grad_out.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let block = &mut grad[offsets[idx]..offsets[idx] + layer.param_len()];
            if idx == 0 {
                layer.backward(&acts[0], &upstream, block, None);
            } else {
                let mut gx = vec![0.0; layer.in_dim];
                layer.backward(&acts[idx], &upstream, block, Some(&mut gx));
                upstream = gx;
            }
        }
    }

    /// `psi(x1) . psi(x2)`.
    pub fn kernel(&self, x1: &[f64], x2: &[f64]) -> Result<f64> {
        let a = self.forward(x1)?;
        let b = self.forward(x2)?;
        Ok(a.iter().zip(&b).map(|(p, q)| p * q).sum())
    }
}

/// Random initial feature map: frequencies i.i.d. standard normal, phases
/// uniform on `[0, 2pi]`, `sigma = 1`.
pub fn init_map(specs: &[LayerSpec], input_dim: usize, seed: u64) -> Result<FeatureMap> {
    if specs.is_empty() {
        return Err(Error::Validation("at least one layer is required".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(specs.len());
    let mut in_dim = input_dim;
    for spec in specs {
        if spec.width == 0 {
            return Err(Error::Validation("layer widths must be >= 1".into()));
        }
        let n = spec.width * in_dim;
        let omega1: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let b1: Vec<f64> = (0..spec.width)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        let layer = if spec.tie {
            SpectralLayer::new_tied(in_dim, omega1, b1, 1.0)?
        } else {
            let omega2: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let b2: Vec<f64> = (0..spec.width)
                .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                .collect();
            SpectralLayer::new(in_dim, omega1, omega2, b1, b2, 1.0, false)?
        };
        layers.push(layer);
        in_dim = spec.width;
    }
    FeatureMap::new(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn zero_layer(width: usize, in_dim: usize) -> SpectralLayer {
        SpectralLayer::new(
            in_dim,
            vec![0.0; width * in_dim],
            vec![0.0; width * in_dim],
            vec![0.0; width],
            vec![0.0; width],
            1.0,
            false,
        )
        .unwrap()
    }

    #[test]
    fn zero_frequency_is_constant() {
        let layer = zero_layer(1, 1);
        for x in [-3.0, 0.0, 17.5] {
            let v = layer.forward(&[x]).unwrap();
            assert!((v[0] - 2f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn opposite_phases_cancel() {
        let layer =
            SpectralLayer::new(1, vec![1.3], vec![1.3], vec![0.0], vec![PI], 1.0, false).unwrap();
        for x in [-2.0, 0.1, 4.4] {
            assert!(layer.forward(&[x]).unwrap()[0].abs() < 1e-15);
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn forward_matches_scalar_loop() {
        let map = init_map(&[LayerSpec::new(7)], 2, 11).unwrap();
        let layer = &map.layers()[0];
        let x = [0.4, -1.7];
        let got = layer.forward(&x).unwrap();
        let r = layer.width() as f64;
        for i in 0..layer.width() {
            let mut u1 = layer.bias(0)[i];
            let mut u2 = layer.bias(1)[i];
            for k in 0..2 {
                u1 += layer.omega(0)[i * 2 + k] * x[k];
                u2 += layer.omega(1)[i * 2 + k] * x[k];
            }
            let want = layer.sigma() / (2.0 * r).sqrt() * (u1.cos() + u2.cos());
            assert!((got[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn entries_are_bounded() {
        let map = init_map(&[LayerSpec::new(5)], 1, 3).unwrap();
        let layer = &map.layers()[0];
        let bound = layer.sigma() * (2.0 / layer.width() as f64).sqrt();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        for _ in 0..200 {
            let x = [rng.random_range(-50.0..50.0)];
            for v in layer.forward(&x).unwrap() {
                assert!(v.abs() <= bound + 1e-15);
            }
        }
    }

    #[test]
    fn wrong_input_length_is_rejected() {
        let map = init_map(&[LayerSpec::new(3)], 2, 0).unwrap();
        assert!(matches!(
            map.forward(&[1.0]),
            Err(Error::DimensionMismatch {
                expected: 2,
                got: 1
            })
        ));
    }

    #[test]
    fn single_layer_map_equals_layer() {
        let map = init_map(&[LayerSpec::new(4)], 1, 5).unwrap();
        assert_eq!(
            map.forward(&[0.3]).unwrap(),
            map.layers()[0].forward(&[0.3]).unwrap()
        );
    }

    #[test]
    fn constant_second_layer_gives_constant_output() {
        let first = init_map(&[LayerSpec::new(6)], 1, 9).unwrap().layers()[0].clone();
        let map = FeatureMap::new(vec![first, zero_layer(3, 6)]).unwrap();
        let a = map.forward(&[0.1]).unwrap();
        let b = map.forward(&[8.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn depth_two_matches_manual_composition() {
        let map = init_map(&[LayerSpec::new(6), LayerSpec::new(4)], 2, 21).unwrap();
        let x = [0.7, -0.2];
        let h = map.layers()[0].forward(&x).unwrap();
        let y = map.layers()[1].forward(&h).unwrap();
        assert_eq!(map.forward(&x).unwrap(), y);
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let a = zero_layer(3, 1);
        let b = zero_layer(2, 4);
        assert!(FeatureMap::new(vec![a, b]).is_err());
    }

    #[test]
    fn kernel_is_symmetric_and_nonnegative_on_diagonal() {
        let map = init_map(&[LayerSpec::new(8), LayerSpec::new(5)], 1, 2).unwrap();
        let (x, y) = ([0.3], [-2.2]);
        assert_eq!(map.kernel(&x, &y).unwrap(), map.kernel(&y, &x).unwrap());
        let kxx = map.kernel(&x, &x).unwrap();
        let psi = map.forward(&x).unwrap();
        assert!(kxx >= 0.0);
        assert!((kxx - psi.iter().map(|v| v * v).sum::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn trig_pair_zero_frequency() {
        let layer = zero_layer(4, 1);
        let v = layer.trig_pair_features(&[2.5]).unwrap();
        for r in 0..4 {
            assert!((v[r] - 0.5).abs() < 1e-15); // sigma / sqrt(R)
            assert_eq!(v[4 + r], 0.0);
        }
    }

    #[test]
    fn trig_pair_sine_block_vanishes_at_origin() {
        let map = init_map(&[LayerSpec::new(5)], 2, 8).unwrap();
        let v = map.layers()[0].trig_pair_features(&[0.0, 0.0]).unwrap();
        assert!(v[5..].iter().all(|s| *s == 0.0));
    }

    #[test]
    fn init_is_deterministic() {
        let specs = [LayerSpec::new(50), LayerSpec::new(30)];
        assert_eq!(
            init_map(&specs, 1, 42).unwrap(),
            init_map(&specs, 1, 42).unwrap()
        );
        assert_ne!(
            init_map(&specs, 1, 42).unwrap(),
            init_map(&specs, 1, 43).unwrap()
        );
    }

    #[test]
    fn init_shapes() {
        let map = init_map(&[LayerSpec::new(50), LayerSpec::new(30)], 1, 0).unwrap();
        assert_eq!(map.depth(), 2);
        assert_eq!(map.layers()[0].width(), 50);
        assert_eq!(map.layers()[1].width(), 30);
        assert_eq!(map.layers()[1].in_dim(), 50);
        assert_eq!(map.out_dim(), 30);
        assert!(map.layers().iter().all(|l| l.sigma() == 1.0));
    }

    #[test]
    fn tied_init_has_equal_halves() {
        let map = init_map(&[LayerSpec::tied(10)], 2, 4).unwrap();
        let l = &map.layers()[0];
        assert!(l.is_tied());
        assert_eq!(l.omega(0), l.omega(1));
        assert_eq!(l.bias(0), l.bias(1));
    }

    #[test]
    fn tied_layer_with_unequal_halves_is_rejected() {
        let err = SpectralLayer::new(1, vec![1.0], vec![2.0], vec![0.0], vec![0.0], 1.0, true);
        assert!(err.is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let map = init_map(&[LayerSpec::new(4), LayerSpec::new(3)], 2, 17).unwrap();
        let x = [0.35, -0.8];
        let g = [0.3, -1.1, 0.7];
        let mut grad = vec![0.0; map.param_len()];
        map.backward(&x, &g, &mut grad);

        let objective = |m: &FeatureMap| -> f64 {
            m.forward(&x)
                .unwrap()
                .iter()
                .zip(&g)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut params = vec![0.0; map.param_len()];
        let mut off = 0;
        for l in map.layers() {
            l.write_params(&mut params[off..off + l.param_len()]);
            off += l.param_len();
        }
        let rebuild = |p: &[f64]| {
            let mut m = map.clone();
            let mut off = 0;
            for l in m.layers_mut() {
                let n = l.param_len();
                l.read_params(&p[off..off + n]).unwrap();
                off += n;
            }
            m
        };
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..20 {
            let k = rng.random_range(0..params.len());
            let h = 1e-6;
            let mut p = params.clone();
            p[k] += h;
            let up = objective(&rebuild(&p));
            p[k] -= 2.0 * h;
            let down = objective(&rebuild(&p));
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - grad[k]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {k}: fd {fd} vs analytic {}",
                grad[k]
            );
        }
    }

    #[test]
    fn layer_serde_round_trip_is_exact() {
        let map = init_map(&[LayerSpec::new(6), LayerSpec::tied(3)], 2, 99).unwrap();
        let text = serde_json::to_string(&map).unwrap();
        let back: FeatureMap = serde_json::from_str(&text).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn deserializing_bad_shapes_fails() {
        let text = r#"{"layers":[{"in_dim":1,"width":2,"omega1":[0.0],"omega2":[0.0,1.0],
            "b1":[0.0,0.0],"b2":[0.0,0.0],"sigma":1.0}]}"#;
        assert!(serde_json::from_str::<FeatureMap>(text).is_err());
    }
}
