//! Probabilistic voxel grid.
//!
//! Every cell stores raw (pre-activation) parameters for the density or
//! occupancy Gaussian and for the per-channel color Gaussian. Cells are
//! activated first and then blended trilinearly, so interpolated values stay
//! inside the convex hull of the eight surrounding cells.

use std::io::{Read, Write};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound on every activated spread.
pub const SIGMA_FLOOR: f64 = 1e-4;

pub const RAW_DENSITY_INIT: f64 = -5.0;
pub const RAW_SPREAD_INIT: f64 = -2.0;
pub const RAW_COLOR_INIT: f64 = 0.0;

const CHECKPOINT_MAGIC: &[u8; 4] = b"BNRF";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Density,
    Spread,
    Color,
}

/// How the density slot is mapped to a non-negative value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityActivation {
    /// Bounded to (0, 1).
    #[default]
    Sigmoid,
    /// Unbounded, for probing where the small-optical-depth linearization fails.
    Softplus,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Maps a raw parameter to its valid range.
pub fn activate(raw: f64, kind: ActivationKind) -> f64 {
    match kind {
        ActivationKind::Density | ActivationKind::Color => sigmoid(raw),
        ActivationKind::Spread => softplus(raw) + SIGMA_FLOOR,
    }
}

/// Derivative of [`activate`] with respect to `raw`.
pub fn activate_derivative(raw: f64, kind: ActivationKind) -> f64 {
    match kind {
        ActivationKind::Density | ActivationKind::Color => {
            let s = sigmoid(raw);
            s * (1.0 - s)
        }
        // d/dx softplus(x) = sigmoid(x)
        ActivationKind::Spread => sigmoid(raw),
    }
}

#[inline]
fn activate_density(raw: f64, act: DensityActivation) -> (f64, f64) {
    match act {
        DensityActivation::Sigmoid => {
            let s = sigmoid(raw);
            (s, s * (1.0 - s))
        }
        DensityActivation::Softplus => (softplus(raw), sigmoid(raw)),
    }
}

#[inline]
fn activate_spread(raw: f64) -> (f64, f64) {
    (softplus(raw) + SIGMA_FLOOR, sigmoid(raw))
}

#[inline]
fn activate_color(raw: f64) -> (f64, f64) {
    let s = sigmoid(raw);
    (s, s * (1.0 - s))
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn cube(half: f64) -> Self {
        Self::new([-half; 3], [half; 3])
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }
}

/// Activated Gaussian parameters at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub position: Vector3<f64>,
    /// Mean of the density (or occupancy, in the Markov modes).
    pub density_mean: f64,
    pub density_spread: f64,
    pub color_mean: [f64; 3],
    pub color_spread: [f64; 3],
}

impl FieldSample {
    /// Empty space: zero density, floor spreads, black.
    pub fn vacuum(position: Vector3<f64>) -> Self {
        Self {
            position,
            density_mean: 0.0,
            density_spread: SIGMA_FLOOR,
            color_mean: [0.0; 3],
            color_spread: [SIGMA_FLOOR; 3],
        }
    }
}

/// Gradient of a scalar with respect to the entries of a [`FieldSample`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FieldSampleGrad {
    pub density_mean: f64,
    pub density_spread: f64,
    pub color_mean: [f64; 3],
    pub color_spread: [f64; 3],
}

impl FieldSampleGrad {
    pub fn is_zero(&self) -> bool {
        self.density_mean == 0.0
            && self.density_spread == 0.0
            && self.color_mean.iter().all(|g| *g == 0.0)
            && self.color_spread.iter().all(|g| *g == 0.0)
    }

    pub fn add_assign(&mut self, other: &FieldSampleGrad) {
        self.density_mean += other.density_mean;
        self.density_spread += other.density_spread;
        for c in 0..3 {
            self.color_mean[c] += other.color_mean[c];
            self.color_spread[c] += other.color_spread[c];
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.density_mean *= s;
        self.density_spread *= s;
        for c in 0..3 {
            self.color_mean[c] *= s;
            self.color_spread[c] *= s;
        }
    }
}

/// Raw per-cell arrays, in C order over the resolution triple. Color arrays
/// carry three interleaved channels per cell. Also used for gradients and
/// optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams {
    pub density: Vec<f64>,
    pub density_spread: Vec<f64>,
    pub color: Vec<f64>,
    pub color_spread: Vec<f64>,
}

impl FieldParams {
    pub fn filled(cells: usize, density: f64, spread: f64, color: f64) -> Self {
        Self {
            density: vec![density; cells],
            density_spread: vec![spread; cells],
            color: vec![color; 3 * cells],
            color_spread: vec![spread; 3 * cells],
        }
    }

    pub fn zeros(cells: usize) -> Self {
        Self::filled(cells, 0.0, 0.0, 0.0)
    }

    pub fn cells(&self) -> usize {
        self.density.len()
    }

    pub fn slices(&self) -> [&[f64]; 4] {
        [
            &self.density,
            &self.density_spread,
            &self.color,
            &self.color_spread,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.density,
            &mut self.density_spread,
            &mut self.color,
            &mut self.color_spread,
        ]
    }

    pub fn fill(&mut self, value: f64) {
        for s in self.slices_mut() {
            s.fill(value);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Eight interpolation corners and their trilinear weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Footprint {
    pub cells: [usize; 8],
    pub weights: [f64; 8],
}

/// The scene: a grid of Gaussian parameters inside `bounds`.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertainField {
    pub resolution: [usize; 3],
    pub bounds: Aabb,
    pub density_activation: DensityActivation,
    pub params: FieldParams,
}

impl UncertainField {
    /// A grid at the default initialization (sparse density, mid-grey color).
    pub fn new(resolution: [usize; 3], bounds: Aabb) -> Result<Self> {
        if resolution.iter().any(|&n| n == 0) {
            return Err(Error::invalid("field resolution must be positive on every axis"));
        }
        if (0..3).any(|a| bounds.max[a] <= bounds.min[a]) {
            return Err(Error::invalid("field bounds must have positive extent"));
        }
        let cells = resolution.iter().product();
        Ok(Self {
            resolution,
            bounds,
            density_activation: DensityActivation::Sigmoid,
            params: FieldParams::filled(cells, RAW_DENSITY_INIT, RAW_SPREAD_INIT, RAW_COLOR_INIT),
        })
    }

    pub fn with_density_activation(mut self, act: DensityActivation) -> Self {
        self.density_activation = act;
        self
    }

    pub fn cells(&self) -> usize {
        self.params.cells()
    }

    #[inline]
    pub fn cell_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.resolution[1] + iy) * self.resolution[2] + iz
    }

    pub fn cell_size(&self) -> [f64; 3] {
        let e = self.bounds.extent();
        [
            e[0] / self.resolution[0] as f64,
            e[1] / self.resolution[1] as f64,
            e[2] / self.resolution[2] as f64,
        ]
    }

    pub fn cell_center(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        let h = self.cell_size();
        Vector3::new(
            self.bounds.min[0] + (ix as f64 + 0.5) * h[0],
            self.bounds.min[1] + (iy as f64 + 0.5) * h[1],
            self.bounds.min[2] + (iz as f64 + 0.5) * h[2],
        )
    }

    /// Interpolation corners for `position`. Between the outermost cell
    /// centers and the boundary the edge cell value is held constant.
    pub fn footprint(&self, position: &Vector3<f64>) -> Result<Footprint> {
        if !position.iter().all(|v| v.is_finite()) || !self.bounds.contains(position) {
            return Err(Error::OutOfBounds([position.x, position.y, position.z]));
        }
        let h = self.cell_size();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            let u = ((position[a] - self.bounds.min[a]) / h[a] - 0.5).clamp(0.0, (n - 1) as f64);
            // u >= 0, so truncation is floor
            let i0 = (u as usize).min(n.saturating_sub(2));
            lo[a] = i0;
            hi[a] = (i0 + 1).min(n - 1);
            frac[a] = if hi[a] == lo[a] { 0.0 } else { u - i0 as f64 };
        }
        let mut cells = [0usize; 8];
        let mut weights = [0.0f64; 8];
        for corner in 0..8 {
            let bx = corner & 1;
            let by = (corner >> 1) & 1;
            let bz = (corner >> 2) & 1;
            let ix = if bx == 1 { hi[0] } else { lo[0] };
            let iy = if by == 1 { hi[1] } else { lo[1] };
            let iz = if bz == 1 { hi[2] } else { lo[2] };
            let wx = if bx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if by == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if bz == 1 { frac[2] } else { 1.0 - frac[2] };
            cells[corner] = self.cell_index(ix, iy, iz);
            weights[corner] = wx * wy * wz;
        }
        Ok(Footprint { cells, weights })
    }

    /// Activated, trilinearly interpolated parameters at `position`.
    pub fn sample_field(&self, position: &Vector3<f64>) -> Result<FieldSample> {
        let fp = self.footprint(position)?;
        let p = &self.params;
        let mut s = FieldSample {
            position: *position,
            density_mean: 0.0,
            density_spread: 0.0,
            color_mean: [0.0; 3],
            color_spread: [0.0; 3],
        };
        for (&cell, &w) in fp.cells.iter().zip(&fp.weights) {
            if w == 0.0 {
                continue;
            }
            s.density_mean += w * activate_density(p.density[cell], self.density_activation).0;
            s.density_spread += w * activate_spread(p.density_spread[cell]).0;
            for c in 0..3 {
                s.color_mean[c] += w * activate_color(p.color[3 * cell + c]).0;
                s.color_spread[c] += w * activate_spread(p.color_spread[3 * cell + c]).0;
            }
        }
        Ok(s)
    }

    /// Samples `position`, treating anything outside the bounds as vacuum.
    pub fn sample_or_vacuum(&self, position: &Vector3<f64>) -> FieldSample {
        self.sample_field(position)
            .unwrap_or_else(|_| FieldSample::vacuum(*position))
    }

    /// Backward pass of [`Self::sample_field`]: adds the raw-parameter
    /// gradients for `upstream` into `grad`. Points outside the bounds carry
    /// no parameters and contribute nothing.
    pub fn accumulate_field_gradient(
        &self,
        position: &Vector3<f64>,
        upstream: &FieldSampleGrad,
        grad: &mut FieldParams,
    ) {
        if upstream.is_zero() {
            return;
        }
        let Ok(fp) = self.footprint(position) else {
            return;
        };
        let p = &self.params;
        for (&cell, &w) in fp.cells.iter().zip(&fp.weights) {
            if w == 0.0 {
                continue;
            }
            grad.density[cell] += upstream.density_mean
                * w
                * activate_density(p.density[cell], self.density_activation).1;
            grad.density_spread[cell] +=
                upstream.density_spread * w * activate_spread(p.density_spread[cell]).1;
            for c in 0..3 {
                let k = 3 * cell + c;
                grad.color[k] += upstream.color_mean[c] * w * activate_color(p.color[k]).1;
                grad.color_spread[k] +=
                    upstream.color_spread[c] * w * activate_spread(p.color_spread[k]).1;
            }
        }
    }

    /// Writes the binary checkpoint: `BNRF`, version, resolution, bounds,
    /// then the four raw arrays as little-endian f32.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for &n in &self.resolution {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        for v in self.bounds.min.iter().chain(&self.bounds.max) {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(8 * 4 * self.cells());
        for s in self.params.slices() {
            for v in s {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut resolution = [0usize; 3];
        for n in &mut resolution {
            *n = read_u32(&mut r)? as usize;
        }
        let mut b = [0.0f64; 6];
        for v in &mut b {
            let mut bytes = [0u8; 8];
            r.read_exact(&mut bytes)
                .map_err(|_| Error::Checkpoint("truncated bounds".into()))?;
            *v = f64::from_le_bytes(bytes);
        }
        let bounds = Aabb::new([b[0], b[1], b[2]], [b[3], b[4], b[5]]);
        let mut field = Self::new(resolution, bounds)
            .map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;
        let mut bytes = [0u8; 4];
        for s in field.params.slices_mut() {
            for v in s.iter_mut() {
                r.read_exact(&mut bytes)
                    .map_err(|_| Error::Checkpoint("truncated parameter arrays".into()))?;
                *v = f32::from_le_bytes(bytes) as f64;
            }
        }
        Ok(field)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut bytes = [0u8; 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    Ok(u32::from_le_bytes(bytes))
}

/// A field with every cell activated once, for many samples against fixed
/// parameters. Samples and gradients match [`UncertainField`] exactly.
#[derive(Clone, Debug)]
pub struct ActivatedField<'a> {
    pub field: &'a UncertainField,
    /// Per cell: density, density spread, three colors, three color spreads.
    value: Vec<[f64; 8]>,
    slope: Vec<[f64; 8]>,
}

impl<'a> ActivatedField<'a> {
    pub fn new(field: &'a UncertainField) -> Self {
        let p = &field.params;
        let cells = p.cells();
        let mut value = vec![[0.0; 8]; cells];
        let mut slope = vec![[0.0; 8]; cells];
        for k in 0..cells {
            let (v, d) = (&mut value[k], &mut slope[k]);
            (v[0], d[0]) = activate_density(p.density[k], field.density_activation);
            (v[1], d[1]) = activate_spread(p.density_spread[k]);
            for c in 0..3 {
                (v[2 + c], d[2 + c]) = activate_color(p.color[3 * k + c]);
                (v[5 + c], d[5 + c]) = activate_spread(p.color_spread[3 * k + c]);
            }
        }
        Self { field, value, slope }
    }

    pub fn sample_or_vacuum(&self, position: &Vector3<f64>) -> FieldSample {
        let Ok(fp) = self.field.footprint(position) else {
            return FieldSample::vacuum(*position);
        };
        let mut s = FieldSample {
            position: *position,
            density_mean: 0.0,
            density_spread: 0.0,
            color_mean: [0.0; 3],
            color_spread: [0.0; 3],
        };
        for (&cell, &w) in fp.cells.iter().zip(&fp.weights) {
            if w == 0.0 {
                continue;
            }
            let v = &self.value[cell];
            s.density_mean += w * v[0];
            s.density_spread += w * v[1];
            for c in 0..3 {
                s.color_mean[c] += w * v[2 + c];
                s.color_spread[c] += w * v[5 + c];
            }
        }
        s
    }

    /// Same contract as [`UncertainField::accumulate_field_gradient`].
    pub fn accumulate_field_gradient(&self, position: &Vector3<f64>, upstream: &FieldSampleGrad, grad: &mut FieldParams) {
        if upstream.is_zero() {
            return;
        }
        let Ok(fp) = self.field.footprint(position) else {
            return;
        };
        for (&cell, &w) in fp.cells.iter().zip(&fp.weights) {
            if w == 0.0 {
                continue;
            }
            let d = &self.slope[cell];
            grad.density[cell] += upstream.density_mean * w * d[0];
            grad.density_spread[cell] += upstream.density_spread * w * d[1];
            for c in 0..3 {
                let k = 3 * cell + c;
                grad.color[k] += upstream.color_mean[c] * w * d[2 + c];
                grad.color_spread[k] += upstream.color_spread[c] * w * d[5 + c];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(seed: u64, res: [usize; 3]) -> UncertainField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = UncertainField::new(res, Aabb::new([-1.0, -2.0, 0.0], [1.0, 1.0, 2.5])).unwrap();
        for s in f.params.slices_mut() {
            for v in s.iter_mut() {
                *v = rng.random_range(-3.0..3.0);
            }
        }
        f
    }

    fn random_interior(rng: &mut ChaCha8Rng, b: &Aabb) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(b.min[0]..b.max[0]),
            rng.random_range(b.min[1]..b.max[1]),
            rng.random_range(b.min[2]..b.max[2]),
        )
    }

    #[test]
    fn activation_examples() {
        assert_eq!(activate(0.0, ActivationKind::Density), 0.5);
        assert_abs_diff_eq!(
            activate(0.0, ActivationKind::Spread),
            std::f64::consts::LN_2 + SIGMA_FLOOR,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(activate(-50.0, ActivationKind::Spread), SIGMA_FLOOR, epsilon = 1e-12);
        assert!(activate(-800.0, ActivationKind::Color) >= 0.0);
        assert!(activate(800.0, ActivationKind::Spread).is_finite());
    }

    #[test]
    fn spread_floor_holds_over_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100_000 {
            let raw = rng.random_range(-100.0..100.0);
            assert!(activate(raw, ActivationKind::Spread) >= SIGMA_FLOOR);
        }
    }

    #[test]
    fn constant_field_interpolates_to_constant() {
        let mut f = UncertainField::new([4, 4, 4], Aabb::cube(1.0)).unwrap();
        f.params.density.fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = random_interior(&mut rng, &f.bounds);
            let s = f.sample_field(&p).unwrap();
            assert_abs_diff_eq!(s.density_mean, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn cell_center_returns_cell_values() {
        let f = random_field(5, [3, 4, 5]);
        for (ix, iy, iz) in [(0, 0, 0), (1, 2, 3), (2, 3, 4)] {
            let s = f.sample_field(&f.cell_center(ix, iy, iz)).unwrap();
            let k = f.cell_index(ix, iy, iz);
            assert_abs_diff_eq!(s.density_mean, sigmoid(f.params.density[k]), epsilon = 1e-12);
            assert_abs_diff_eq!(
                s.color_spread[2],
                activate(f.params.color_spread[3 * k + 2], ActivationKind::Spread),
                epsilon = 1e-12
            );
        }
    }

    /// Independent trilinear blend: walk all 8 corners via per-axis weights.
    fn reference_density(f: &UncertainField, p: &Vector3<f64>) -> f64 {
        let h = f.cell_size();
        let mut axes = Vec::new();
        for a in 0..3 {
            let n = f.resolution[a] as f64;
            let u = ((p[a] - f.bounds.min[a]) / h[a] - 0.5).max(0.0).min(n - 1.0);
            let i0 = u.floor().min((n - 2.0).max(0.0));
            let t = (u - i0).min(1.0);
            let i1 = (i0 + 1.0).min(n - 1.0);
            axes.push([(i0 as usize, 1.0 - t), (i1 as usize, t)]);
        }
        let mut acc = 0.0;
        for &(ix, wx) in &axes[0] {
            for &(iy, wy) in &axes[1] {
                for &(iz, wz) in &axes[2] {
                    let k = (ix * f.resolution[1] + iy) * f.resolution[2] + iz;
                    acc += wx * wy * wz * sigmoid(f.params.density[k]);
                }
            }
        }
        acc
    }

    #[test]
    fn trilinear_matches_reference() {
        let f = random_field(7, [5, 6, 7]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let p = random_interior(&mut rng, &f.bounds);
            let s = f.sample_field(&p).unwrap();
            assert_abs_diff_eq!(s.density_mean, reference_density(&f, &p), epsilon = 1e-12);
        }
    }

    #[test]
    fn weights_sum_to_one_and_hull_holds() {
        let f = random_field(9, [4, 3, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..1000 {
            let p = random_interior(&mut rng, &f.bounds);
            let fp = f.footprint(&p).unwrap();
            let sum: f64 = fp.weights.iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-14);
            let vals: Vec<f64> = fp.cells.iter().map(|&c| sigmoid(f.params.density[c])).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s = f.sample_field(&p).unwrap();
            assert!(s.density_mean >= lo - 1e-14 && s.density_mean <= hi + 1e-14);
        }
    }

    #[test]
    fn lipschitz_inside_cell() {
        let f = random_field(12, [6, 6, 6]);
        let h = f.cell_size();
        let hmin = h.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..500 {
            let p = random_interior(&mut rng, &f.bounds);
            let fp = f.footprint(&p).unwrap();
            let vals: Vec<f64> = fp.cells.iter().map(|&c| sigmoid(f.params.density[c])).collect();
            let range = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let eps = 1e-6;
            let mut q = p;
            q[rng.random_range(0..3)] += eps;
            let Ok(fq) = f.footprint(&q) else { continue };
            if fq.cells != fp.cells {
                continue;
            }
            let ds = (f.sample_field(&q).unwrap().density_mean - f.sample_field(&p).unwrap().density_mean).abs();
            assert!(ds <= eps * range / hmin + 1e-15, "{ds} vs {}", eps * range / hmin);
        }
    }

    #[test]
    fn outside_bounds_is_signalled() {
        let f = UncertainField::new([2, 2, 2], Aabb::cube(1.0)).unwrap();
        assert!(matches!(
            f.sample_field(&Vector3::new(1.5, 0.0, 0.0)),
            Err(Error::OutOfBounds(_))
        ));
        let v = f.sample_or_vacuum(&Vector3::new(0.0, -3.0, 0.0));
        assert_eq!(v.density_mean, 0.0);
        assert_eq!(v.density_spread, SIGMA_FLOOR);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let f = random_field(1, [3, 3, 3]);
        let mut g = FieldParams::zeros(f.cells());
        f.accumulate_field_gradient(&Vector3::new(0.1, 0.2, 0.3), &FieldSampleGrad::default(), &mut g);
        assert!(g.slices().iter().all(|s| s.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn constant_field_gradient_sums_to_sigmoid_prime() {
        let mut f = UncertainField::new([4, 4, 4], Aabb::cube(1.0)).unwrap();
        f.params.density.fill(0.7);
        let mut g = FieldParams::zeros(f.cells());
        let up = FieldSampleGrad {
            density_mean: 1.0,
            ..Default::default()
        };
        f.accumulate_field_gradient(&Vector3::new(0.13, -0.42, 0.77), &up, &mut g);
        let total: f64 = g.density.iter().sum();
        assert_abs_diff_eq!(total, activate_derivative(0.7, ActivationKind::Density), epsilon = 1e-14);
    }

    fn weighted_sum(f: &UncertainField, p: &Vector3<f64>, up: &FieldSampleGrad) -> f64 {
        let s = f.sample_field(p).unwrap();
        let mut acc = up.density_mean * s.density_mean + up.density_spread * s.density_spread;
        for c in 0..3 {
            acc += up.color_mean[c] * s.color_mean[c] + up.color_spread[c] * s.color_spread[c];
        }
        acc
    }

    #[test]
    fn field_gradient_matches_finite_differences() {
        let step = 1e-4;
        for case in 0..100u64 {
            let mut f = random_field(100 + case, [3, 4, 3]);
            if case % 2 == 1 {
                f.density_activation = DensityActivation::Softplus;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(case);
            let p = random_interior(&mut rng, &f.bounds);
            let up = FieldSampleGrad {
                density_mean: rng.random_range(-1.0..1.0),
                density_spread: rng.random_range(-1.0..1.0),
                color_mean: [rng.random_range(-1.0..1.0), 0.3, -0.8],
                color_spread: [0.5, rng.random_range(-1.0..1.0), 1.0],
            };
            let mut g = FieldParams::zeros(f.cells());
            f.accumulate_field_gradient(&p, &up, &mut g);
            let fp = f.footprint(&p).unwrap();
            for slot in 0..4 {
                for &cell in &fp.cells {
                    let width = if slot >= 2 { 3 } else { 1 };
                    for c in 0..width {
                        let k = width * cell + c;
                        let orig = f.params.slices()[slot][k];
                        f.params.slices_mut()[slot][k] = orig + step;
                        let plus = weighted_sum(&f, &p, &up);
                        f.params.slices_mut()[slot][k] = orig - step;
                        let minus = weighted_sum(&f, &p, &up);
                        f.params.slices_mut()[slot][k] = orig;
                        let fd = (plus - minus) / (2.0 * step);
                        let an = g.slices()[slot][k];
                        let rel = (an - fd).abs() / an.abs().max(1e-6);
                        assert!(rel < 1e-4, "slot {slot} cell {cell}: {an} vs {fd}");
                    }
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let f = random_field(21, [3, 2, 4]);
        let mut buf = Vec::new();
        f.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"BNRF");
        assert_eq!(buf.len(), 4 + 4 + 12 + 48 + 4 * 8 * 24);
        let g = UncertainField::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(g.resolution, f.resolution);
        assert_eq!(g.bounds, f.bounds);
        for (a, b) in g.params.density.iter().zip(&f.params.density) {
            assert_eq!(*a, *b as f32 as f64);
        }

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(UncertainField::read_checkpoint(&bad[..]), Err(Error::Checkpoint(_))));
        let mut bad = buf.clone();
        bad[4] = 9;
        let err = UncertainField::read_checkpoint(&bad[..]).unwrap_err();
        assert!(err.to_string().contains("version"));
        assert!(UncertainField::read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn activated_view_matches_direct_sampling() {
        let mut f = UncertainField::new([5, 4, 6], Aabb::cube(2.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for buf in f.params.slices_mut() {
            for v in buf.iter_mut() {
                *v = rng.random_range(-3.0..3.0);
            }
        }
        let view = ActivatedField::new(&f);
        let mut g1 = FieldParams::zeros(f.cells());
        let mut g2 = FieldParams::zeros(f.cells());
        for _ in 0..200 {
            let p = Vector3::from_fn(|_, _| rng.random_range(-2.5..2.5));
            assert_eq!(view.sample_or_vacuum(&p), f.sample_or_vacuum(&p));
            let up = FieldSampleGrad {
                density_mean: rng.random(),
                density_spread: rng.random(),
                color_mean: [rng.random(), rng.random(), rng.random()],
                color_spread: [rng.random(), rng.random(), rng.random()],
            };
            view.accumulate_field_gradient(&p, &up, &mut g1);
            f.accumulate_field_gradient(&p, &up, &mut g2);
        }
        assert_eq!(g1, g2);
    }
}
