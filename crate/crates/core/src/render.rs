//! Rays, stratified sampling and front-to-back alpha compositing with its
//! analytic backward pass.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ActivatedField, FieldSample, FieldSampleGrad, UncertainField};

/// Transmittance below which early termination (when enabled) stops a ray.
pub const EARLY_TERMINATION_T: f64 = 1e-4;

/// Pinhole camera. The pose follows the usual radiance-field convention:
/// camera looks down its local −z axis, +y is up, image rows grow downward.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// World-from-camera rotation.
    pub rotation: Matrix3<f64>,
    /// Camera center in world coordinates.
    pub center: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: u32,
        height: u32,
        focal: f64,
        near: f64,
        far: f64,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let true_up = right.cross(&forward);
        let rotation = Matrix3::from_columns(&[right, true_up, -forward]);
        Self {
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            center: eye,
            near,
            far,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::invalid(format!(
                "camera bounds must satisfy far > near > 0 (near={}, far={})",
                self.near, self.far
            )));
        }
        if !(self.focal > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera intrinsics must be positive"));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if err > 1e-9 {
            return Err(Error::invalid(format!(
                "camera rotation is not orthonormal (deviation {err:e})"
            )));
        }
        Ok(())
    }

    pub fn forward(&self) -> Vector3<f64> {
        -self.rotation.column(2).into_owned()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Unit direction through continuous pixel coordinates `(u, v)`.
    pub fn direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let local = Vector3::new((u - self.cx) / self.focal, -(v - self.cy) / self.focal, -1.0);
        (self.rotation * local).normalize()
    }

    pub fn ray(&self, u: f64, v: f64) -> Ray {
        Ray {
            origin: self.center,
            direction: self.direction(u, v),
        }
    }

    /// Ray through the center of pixel `(x, y)`.
    pub fn pixel_ray(&self, x: u32, y: u32) -> Ray {
        let (u, v) = pixel_center(x, y);
        self.ray(u, v)
    }
}

#[inline]
pub fn pixel_center(x: u32, y: u32) -> (f64, f64) {
    (x as f64 + 0.5, y as f64 + 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

pub fn generate_rays(camera: &Camera, pixels: &[(f64, f64)]) -> Vec<Ray> {
    pixels.iter().map(|&(u, v)| camera.ray(u, v)).collect()
}

/// SplitMix64 finalizer, used to derive independent per-ray and per-chunk seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Jitter {
    /// Samples sit at bin midpoints.
    None,
    /// One uniform draw per bin from a generator seeded with this value.
    Seeded(u64),
}

/// Samples along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySampleBatch {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    /// Bin edges, `n + 1` ascending values from near to far.
    pub t_values: Vec<f64>,
    pub deltas: Vec<f64>,
    /// Bin midpoints; the depth weights.
    pub midpoints: Vec<f64>,
    /// Where the field is evaluated: jittered inside each bin, or the midpoint.
    pub sample_t: Vec<f64>,
    pub samples: Vec<FieldSample>,
}

impl RaySampleBatch {
    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.sample_t
            .iter()
            .map(|&t| self.origin + self.direction * t)
    }

    /// Fills `samples` from `source`.
    pub fn populate<S: SampleSource + ?Sized>(&mut self, source: &S) {
        self.samples = self.positions().map(|p| source.sample(&p)).collect();
    }
}

/// Anything that yields activated Gaussian parameters at a point.
pub trait SampleSource: Sync {
    fn sample(&self, position: &Vector3<f64>) -> FieldSample;
}

impl SampleSource for UncertainField {
    fn sample(&self, position: &Vector3<f64>) -> FieldSample {
        self.sample_or_vacuum(position)
    }
}

impl SampleSource for ActivatedField<'_> {
    fn sample(&self, position: &Vector3<f64>) -> FieldSample {
        self.sample_or_vacuum(position)
    }
}

pub fn stratified_sample(
    ray: &Ray,
    near: f64,
    far: f64,
    n_samples: usize,
    jitter: Jitter,
) -> Result<RaySampleBatch> {
    if n_samples == 0 {
        return Err(Error::invalid("stratified sampling needs at least one sample"));
    }
    if !(far > near) {
        return Err(Error::invalid(format!("far ({far}) must exceed near ({near})")));
    }
    let width = (far - near) / n_samples as f64;
    let mut t_values: Vec<f64> = (0..=n_samples).map(|i| near + i as f64 * width).collect();
    t_values[n_samples] = far;
    let deltas: Vec<f64> = t_values.windows(2).map(|w| w[1] - w[0]).collect();
    let midpoints: Vec<f64> = t_values.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let sample_t = match jitter {
        Jitter::None => midpoints.clone(),
        Jitter::Seeded(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            t_values
                .windows(2)
                .map(|w| w[0] + rng.random::<f64>() * (w[1] - w[0]))
                .collect()
        }
    };
    Ok(RaySampleBatch {
        origin: ray.origin,
        direction: ray.direction,
        t_values,
        deltas,
        midpoints,
        sample_t,
        samples: Vec::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    Rgb,
    Depth,
}

impl RenderMode {
    pub fn channels(self) -> usize {
        match self {
            RenderMode::Rgb => 3,
            RenderMode::Depth => 1,
        }
    }
}

/// How per-sample opacity is formed from the density slot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaModel {
    /// `alpha_i = T_i (1 - exp(-delta_i rho_i))`.
    #[default]
    Density,
    /// The slot holds the occupancy directly: `alpha_i = T_i o_i`.
    Occupancy,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompositeOptions {
    pub background: [f64; 3],
    pub alpha_model: AlphaModel,
    pub early_termination: bool,
}

impl Default for CompositeOptions {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            alpha_model: AlphaModel::Density,
            early_termination: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    /// Three channels in RGB mode, one in depth mode.
    pub value: Vec<f64>,
    pub variance: Vec<f64>,
    pub opacity: f64,
    pub per_sample_alpha: Vec<f64>,
    /// `T_i` for every sample; `T_1 = 1`.
    pub per_sample_t: Vec<f64>,
    /// Transmittance past the last sample.
    pub final_t: f64,
}

impl RenderOutput {
    /// Depth divided by opacity; rays with no opacity report 0.
    pub fn normalized_depth(&self) -> f64 {
        if self.opacity > 0.0 {
            self.value[0] / self.opacity
        } else {
            0.0
        }
    }
}

/// Per-sample weight of channel `c`: the color mean, or the bin midpoint.
#[inline]
pub fn sample_weight(batch: &RaySampleBatch, mode: RenderMode, i: usize, c: usize) -> f64 {
    match mode {
        RenderMode::Rgb => batch.samples[i].color_mean[c],
        RenderMode::Depth => batch.midpoints[i],
    }
}

/// Alpha and transmittance along the ray. Returns `(alpha, T, T_final)`.
pub fn alphas(batch: &RaySampleBatch, opts: &CompositeOptions) -> (Vec<f64>, Vec<f64>, f64) {
    let n = batch.len();
    let mut alpha = vec![0.0; n];
    let mut trans = vec![0.0; n];
    let mut t = 1.0;
    for i in 0..n {
        trans[i] = t;
        if opts.early_termination && t < EARLY_TERMINATION_T {
            continue;
        }
        let m = batch.samples[i].density_mean;
        let (a, keep) = match opts.alpha_model {
            AlphaModel::Density => {
                let x = batch.deltas[i] * m;
                (-(-x).exp_m1(), (-x).exp())
            }
            AlphaModel::Occupancy => (m, 1.0 - m),
        };
        alpha[i] = t * a;
        t *= keep;
    }
    (alpha, trans, t)
}

pub fn composite(batch: &RaySampleBatch, mode: RenderMode, opts: &CompositeOptions) -> RenderOutput {
    let (alpha, trans, final_t) = alphas(batch, opts);
    let channels = mode.channels();
    let mut value = vec![0.0; channels];
    for (i, a) in alpha.iter().enumerate() {
        for (c, v) in value.iter_mut().enumerate() {
            *v += a * sample_weight(batch, mode, i, c);
        }
    }
    if mode == RenderMode::Rgb {
        for (c, v) in value.iter_mut().enumerate() {
            *v += final_t * opts.background[c];
        }
    }
    RenderOutput {
        value,
        variance: vec![0.0; channels],
        opacity: alpha.iter().sum(),
        per_sample_alpha: alpha,
        per_sample_t: trans,
        final_t,
    }
}

/// Chain rule from `dL/d alpha_i` and `dL/d T_final` to `dL/d density_mean_i`.
///
/// Walks the ray back to front carrying `Q_k = dL/dT_{k+1}`, so that
/// `dL/dm_k = T_k * (d a_k / d m_k) * (g_k - Q_k)` with `a_k` the local
/// opacity; no division by `1 - a_k` is needed.
pub fn alpha_backward(
    batch: &RaySampleBatch,
    opts: &CompositeOptions,
    trans: &[f64],
    grad_alpha: &[f64],
    grad_final_t: f64,
) -> Vec<f64> {
    let n = batch.len();
    let mut out = vec![0.0; n];
    let mut q = grad_final_t;
    for k in (0..n).rev() {
        if opts.early_termination && trans[k] < EARLY_TERMINATION_T {
            continue;
        }
        let m = batch.samples[k].density_mean;
        let (local, keep, dlocal) = match opts.alpha_model {
            AlphaModel::Density => {
                let d = batch.deltas[k];
                let e = (-d * m).exp();
                (1.0 - e, e, d * e)
            }
            AlphaModel::Occupancy => (m, 1.0 - m, 1.0),
        };
        out[k] = trans[k] * dlocal * (grad_alpha[k] - q);
        q = grad_alpha[k] * local + keep * q;
    }
    out
}

/// Backward pass of [`composite`] for an upstream gradient on `value`.
pub fn composite_backward(
    batch: &RaySampleBatch,
    mode: RenderMode,
    opts: &CompositeOptions,
    out: &RenderOutput,
    upstream: &[f64],
) -> Vec<FieldSampleGrad> {
    let n = batch.len();
    let mut grads = vec![FieldSampleGrad::default(); n];
    let mut grad_alpha = vec![0.0; n];
    for i in 0..n {
        for (c, u) in upstream.iter().enumerate() {
            grad_alpha[i] += u * sample_weight(batch, mode, i, c);
            if mode == RenderMode::Rgb {
                grads[i].color_mean[c] += u * out.per_sample_alpha[i];
            }
        }
    }
    let grad_final_t = match mode {
        RenderMode::Rgb => upstream
            .iter()
            .zip(&opts.background)
            .map(|(u, b)| u * b)
            .sum(),
        RenderMode::Depth => 0.0,
    };
    let dm = alpha_backward(batch, opts, &out.per_sample_t, &grad_alpha, grad_final_t);
    for (g, d) in grads.iter_mut().zip(dm) {
        g.density_mean += d;
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use crate::field::SIGMA_FLOOR;

    fn batch_from(deltas: &[f64], densities: &[f64]) -> RaySampleBatch {
        let mut t = vec![1.0];
        for d in deltas {
            t.push(t.last().unwrap() + d);
        }
        let mid: Vec<f64> = t.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        RaySampleBatch {
            origin: Vector3::zeros(),
            direction: Vector3::z(),
            deltas: deltas.to_vec(),
            sample_t: mid.clone(),
            midpoints: mid.clone(),
            samples: densities
                .iter()
                .zip(&mid)
                .map(|(&m, &tm)| FieldSample {
                    position: Vector3::new(0.0, 0.0, tm),
                    density_mean: m,
                    density_spread: SIGMA_FLOOR,
                    color_mean: [0.8, 0.5, 0.1],
                    color_spread: [SIGMA_FLOOR; 3],
                })
                .collect(),
            t_values: t,
        }
    }

    fn test_camera() -> Camera {
        Camera::look_at(
            Vector3::new(3.0, 1.0, 4.0),
            Vector3::zeros(),
            Vector3::y(),
            64,
            48,
            55.0,
            0.5,
            10.0,
        )
    }

    #[test]
    fn principal_point_looks_forward() {
        let cam = test_camera();
        cam.validate().unwrap();
        let rays = generate_rays(&cam, &[(cam.cx, cam.cy)]);
        assert_abs_diff_eq!((rays[0].direction - cam.forward()).norm(), 0.0, epsilon = 1e-12);
        assert_eq!(rays[0].origin, cam.center);
    }

    #[test]
    fn mirrored_pixels_mirror_directions() {
        let cam = test_camera();
        let (u, v) = (cam.cx + 13.3, 20.0);
        let a = cam.rotation.transpose() * cam.direction(u, v);
        let b = cam.rotation.transpose() * cam.direction(2.0 * cam.cx - u, v);
        assert_abs_diff_eq!(a.x, -b.x, epsilon = 1e-12);
        assert_abs_diff_eq!(a.y, b.y, epsilon = 1e-12);
        assert_abs_diff_eq!(a.z, b.z, epsilon = 1e-12);
    }

    #[test]
    fn reprojection_recovers_pixel() {
        let cam = test_camera();
        for (u, v) in [(0.5, 0.5), (63.5, 47.5), (17.25, 30.125)] {
            let d = cam.direction(u, v);
            assert_abs_diff_eq!(d.norm(), 1.0, epsilon = 1e-12);
            let local = cam.rotation.transpose() * d;
            let pu = cam.focal * local.x / -local.z + cam.cx;
            let pv = -cam.focal * local.y / -local.z + cam.cy;
            assert_abs_diff_eq!(pu, u, epsilon = 1e-9);
            assert_abs_diff_eq!(pv, v, epsilon = 1e-9);
        }
    }

    #[test]
    fn validate_rejects_bad_cameras() {
        let mut cam = test_camera();
        cam.near = 0.0;
        assert!(cam.validate().is_err());
        let mut cam = test_camera();
        cam.rotation[(0, 0)] += 1e-6;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn stratified_examples() {
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: Vector3::x(),
        };
        let b = stratified_sample(&ray, 2.0, 5.0, 1, Jitter::Seeded(3)).unwrap();
        assert_eq!(b.deltas, vec![3.0]);
        let b = stratified_sample(&ray, 2.0, 6.0, 8, Jitter::None).unwrap();
        assert!(b.deltas.iter().all(|d| (d - 0.5).abs() < 1e-15));
        assert_eq!(b.sample_t, b.midpoints);
        assert_abs_diff_eq!(b.deltas.iter().sum::<f64>(), 4.0, epsilon = 1e-12);
        assert!(matches!(
            stratified_sample(&ray, 2.0, 6.0, 0, Jitter::None),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn stratified_draws_stay_in_their_bins() {
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: Vector3::y(),
        };
        for seed in 0..10_000u64 {
            let b = stratified_sample(&ray, 0.7, 3.9, 7, Jitter::Seeded(seed)).unwrap();
            for (i, t) in b.sample_t.iter().enumerate() {
                assert!(*t >= b.t_values[i] && *t <= b.t_values[i + 1]);
            }
            assert!(b.midpoints.windows(2).all(|w| w[1] > w[0]));
        }
        let a = stratified_sample(&ray, 0.7, 3.9, 7, Jitter::Seeded(42)).unwrap();
        let b = stratified_sample(&ray, 0.7, 3.9, 7, Jitter::Seeded(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn composite_examples() {
        let b = batch_from(&[1.0], &[std::f64::consts::LN_2]);
        let out = composite(&b, RenderMode::Rgb, &CompositeOptions::default());
        assert_abs_diff_eq!(out.per_sample_alpha[0], 0.5, epsilon = 1e-15);
        assert_eq!(out.per_sample_t[0], 1.0);

        let b = batch_from(&[0.3, 0.2, 0.5], &[0.0, 0.0, 0.0]);
        let out = composite(&b, RenderMode::Rgb, &CompositeOptions::default());
        assert!(out.value.iter().all(|v| *v == 0.0));
        assert_eq!(out.opacity, 0.0);
        assert!(out.per_sample_t.iter().all(|t| *t == 1.0));

        // one bin over [1.0, 1.2] with optical depth 20
        let b = batch_from(&[0.2], &[100.0]);
        let out = composite(&b, RenderMode::Depth, &CompositeOptions::default());
        assert_abs_diff_eq!(out.value[0], 1.1, epsilon = 1e-6);
    }

    #[test]
    fn background_fills_remaining_transmittance() {
        let b = batch_from(&[0.5, 0.5], &[0.4, 0.9]);
        let opts = CompositeOptions {
            background: [1.0, 0.5, 0.25],
            ..Default::default()
        };
        let plain = composite(&b, RenderMode::Rgb, &CompositeOptions::default());
        let out = composite(&b, RenderMode::Rgb, &opts);
        for c in 0..3 {
            assert_abs_diff_eq!(
                out.value[c],
                plain.value[c] + (1.0 - plain.opacity) * opts.background[c],
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn order_matters_unless_densities_equal() {
        let mut b = batch_from(&[0.5, 0.5], &[0.2, 1.5]);
        b.samples[1].color_mean = [0.1, 0.1, 0.1];
        let fwd = composite(&b, RenderMode::Rgb, &CompositeOptions::default());
        b.samples.swap(0, 1);
        let rev = composite(&b, RenderMode::Rgb, &CompositeOptions::default());
        assert!((fwd.value[0] - rev.value[0]).abs() > 1e-3);
    }

    #[test]
    fn single_sample_density_gradient_closed_form() {
        let b = batch_from(&[0.7], &[0.9]);
        let opts = CompositeOptions::default();
        let out = composite(&b, RenderMode::Rgb, &opts);
        let g = composite_backward(&b, RenderMode::Rgb, &opts, &out, &[1.0, 0.0, 0.0]);
        let expected = 0.8 * 0.7 * (-0.7f64 * 0.9).exp();
        assert_abs_diff_eq!(g[0].density_mean, expected, epsilon = 1e-14);
        assert_abs_diff_eq!(g[0].color_mean[0], out.per_sample_alpha[0], epsilon = 1e-15);

        let zero = composite_backward(&b, RenderMode::Rgb, &opts, &out, &[0.0; 3]);
        assert!(zero[0].is_zero());
    }

    #[test]
    fn early_termination_keeps_telescoping() {
        let b = batch_from(&[1.0; 10], &[5.0; 10]);
        let opts = CompositeOptions {
            early_termination: true,
            ..Default::default()
        };
        let out = composite(&b, RenderMode::Rgb, &opts);
        assert_abs_diff_eq!(out.opacity + out.final_t, 1.0, epsilon = 1e-12);
        assert_eq!(*out.per_sample_alpha.last().unwrap(), 0.0);
    }
}
