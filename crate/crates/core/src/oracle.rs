//! Monte Carlo and finite-difference checks for the moment propagation and
//! the hand-written gradients.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldSample, FieldSampleGrad};
use crate::render::{
    composite, composite_backward, derive_seed, stratified_sample, AlphaModel, CompositeOptions, Jitter, Ray,
    RaySampleBatch, RenderMode,
};
use crate::uncertainty::{
    loss_backward, moments_backward, occupancy_transmittance, predict_raw, ray_loss_frozen, GaussianMoment, LossMode,
    PropagationOptions,
};

pub const MIN_DRAWS: usize = 10_000;
/// Floor of relative-error denominators.
pub const REL_EPS: f64 = 1e-12;
/// Floor of the finite-difference comparison, per unit of `max(1, |f|)`:
/// differences of a large `f` carry roundoff proportional to `|f|`.
pub const FD_FLOOR: f64 = 1e-6;
const DRAW_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub empirical_mean: f64,
    pub empirical_variance: f64,
    pub predicted_mean: f64,
    pub predicted_variance: f64,
    pub relative_mean_error: f64,
    pub relative_variance_error: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub jarque_bera: f64,
    /// Chi-square (2 dof) tail probability of the Jarque-Bera statistic.
    pub normality_p: f64,
    /// Negative draws clamped to zero.
    pub truncated: usize,
    pub n_draws: usize,
    pub seed: u64,
}

impl MonteCarloReport {
    pub fn truncation_fraction(&self) -> f64 {
        self.truncated as f64 / self.n_draws as f64
    }

    fn from_draws(values: &[f64], predicted: GaussianMoment, truncated: usize, seed: u64) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for v in values {
            let d = v - mean;
            let d2 = d * d;
            m2 += d2;
            m3 += d2 * d;
            m4 += d2 * d2;
        }
        let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
        let (skewness, excess_kurtosis) = if m2 > 0.0 {
            (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
        } else {
            (0.0, 0.0)
        };
        let jarque_bera = n / 6.0 * (skewness * skewness + excess_kurtosis * excess_kurtosis / 4.0);
        let rel = |emp: f64, pred: f64| (emp - pred).abs() / emp.abs().max(REL_EPS);
        Self {
            empirical_mean: mean,
            empirical_variance: m2,
            predicted_mean: predicted.mean,
            predicted_variance: predicted.variance,
            relative_mean_error: rel(mean, predicted.mean),
            relative_variance_error: rel(m2, predicted.variance),
            skewness,
            excess_kurtosis,
            jarque_bera,
            normality_p: (-jarque_bera / 2.0).exp(),
            truncated,
            n_draws: values.len(),
            seed,
        }
    }
}

/// Which per-sample variables are random in a Monte Carlo render.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawSpec {
    Density,
    Color,
    Both,
    /// Occupancies are random, transmittance is held at its mean value.
    OccupancyFrozenT,
}

impl DrawSpec {
    /// The propagation rule this draw spec is checked against.
    pub fn loss_mode(self, kind: RenderMode) -> LossMode {
        match (self, kind) {
            (DrawSpec::Color, _) => LossMode::Color,
            (DrawSpec::Both, _) => LossMode::ColorDensity,
            (DrawSpec::Density, RenderMode::Rgb) => LossMode::DensityRgb,
            (DrawSpec::Density, RenderMode::Depth) => LossMode::DensityDepth,
            (DrawSpec::OccupancyFrozenT, RenderMode::Rgb) => LossMode::OccupancyRgb,
            (DrawSpec::OccupancyFrozenT, RenderMode::Depth) => LossMode::OccupancyDepth,
        }
    }
}

fn check_draws(n_draws: usize) -> Result<()> {
    if n_draws < MIN_DRAWS {
        return Err(Error::invalid(format!("n_draws must be at least {MIN_DRAWS}, got {n_draws}")));
    }
    Ok(())
}

/// Runs `draw` `n_draws` times in fixed-size chunks, each with its own
/// generator, and returns the values in draw order plus the truncation count.
fn run_draws<F>(n_draws: usize, seed: u64, draw: F) -> (Vec<f64>, usize)
where
    F: Fn(&mut ChaCha8Rng, &mut usize) -> f64 + Sync,
{
    let chunks: Vec<(Vec<f64>, usize)> = (0..n_draws.div_ceil(DRAW_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, chunk as u64));
            let len = DRAW_CHUNK.min(n_draws - chunk * DRAW_CHUNK);
            let mut truncated = 0;
            let values = (0..len).map(|_| draw(&mut rng, &mut truncated)).collect();
            (values, truncated)
        })
        .collect();
    let truncated = chunks.iter().map(|c| c.1).sum();
    (chunks.into_iter().flat_map(|c| c.0).collect(), truncated)
}

fn gaussian(rng: &mut ChaCha8Rng, mean: f64, spread: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    mean + spread * z
}

fn clamp_nonnegative(x: f64, truncated: &mut usize) -> f64 {
    if x < 0.0 {
        *truncated += 1;
        0.0
    } else {
        x
    }
}

/// Draws the variables named by `draw` from their Gaussians, renders each draw
/// exactly, and compares the empirical moments of channel `channel` with the
/// matching propagation rule. The background is black.
pub fn mc_render_distribution(
    batch: &RaySampleBatch,
    draw: DrawSpec,
    kind: RenderMode,
    channel: usize,
    n_draws: usize,
    seed: u64,
) -> Result<MonteCarloReport> {
    check_draws(n_draws)?;
    if channel >= kind.channels() {
        return Err(Error::invalid(format!("channel {channel} does not exist in {kind:?} renders")));
    }
    if kind == RenderMode::Depth && matches!(draw, DrawSpec::Color | DrawSpec::Both) {
        return Err(Error::invalid("color draws need an RGB render"));
    }
    let opts = PropagationOptions::default();
    let predicted = predict_raw(draw.loss_mode(kind), batch, kind, &opts, None)[channel];
    let weight = |i: usize, color: f64| match kind {
        RenderMode::Rgb => color,
        RenderMode::Depth => batch.midpoints[i],
    };
    let mean_alpha = composite(batch, kind, &CompositeOptions::default()).per_sample_alpha;
    let frozen_t = occupancy_transmittance(&batch.samples);
    let samples = &batch.samples;

    let (values, truncated) = run_draws(n_draws, seed, |rng, truncated| {
        let mut t = 1.0;
        let mut value = 0.0;
        for (i, s) in samples.iter().enumerate() {
            let c = s.color_mean[channel.min(2)];
            match draw {
                DrawSpec::Color => {
                    value += mean_alpha[i] * gaussian(rng, c, s.color_spread[channel]);
                }
                DrawSpec::Density | DrawSpec::Both => {
                    let rho = clamp_nonnegative(gaussian(rng, s.density_mean, s.density_spread), truncated);
                    let c = if draw == DrawSpec::Both {
                        gaussian(rng, c, s.color_spread[channel])
                    } else {
                        c
                    };
                    let x = batch.deltas[i] * rho;
                    value += t * -(-x).exp_m1() * weight(i, c);
                    t *= (-x).exp();
                }
                DrawSpec::OccupancyFrozenT => {
                    let o = clamp_nonnegative(gaussian(rng, s.density_mean, s.density_spread), truncated);
                    value += frozen_t[i] * o * weight(i, c);
                }
            }
        }
        value
    });
    Ok(MonteCarloReport::from_draws(&values, predicted, truncated, seed))
}

/// Moments of `ln T_i = -sum_{j<i} delta_j rho_j` (`i` counts from 1) under
/// untruncated Gaussian densities, against the lognormal parameters.
pub fn lognormal_check(
    deltas: &[f64],
    density: &[GaussianMoment],
    i: usize,
    n_draws: usize,
    seed: u64,
) -> Result<MonteCarloReport> {
    check_draws(n_draws)?;
    if deltas.len() != density.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} deltas but {} density moments",
            deltas.len(),
            density.len()
        )));
    }
    if i < 2 || i > deltas.len() + 1 {
        return Err(Error::invalid(format!("sample index {i} must lie in 2..={}", deltas.len() + 1)));
    }
    let upstream = i - 1;
    let predicted = GaussianMoment::new(
        -(0..upstream).map(|j| deltas[j] * density[j].mean).sum::<f64>(),
        (0..upstream).map(|j| deltas[j] * deltas[j] * density[j].variance).sum(),
    );
    let (values, _) = run_draws(n_draws, seed, |rng, _| {
        -(0..upstream)
            .map(|j| deltas[j] * gaussian(rng, density[j].mean, density[j].variance.sqrt()))
            .sum::<f64>()
    });
    Ok(MonteCarloReport::from_draws(&values, predicted, 0, seed))
}

/// Distribution of a single alpha `1 - exp(-delta rho)` against its linearised
/// Gaussian `N(delta mu, delta^2 sigma^2)`; shows where the linearisation stops
/// holding.
pub fn alpha_distribution(delta: f64, density: GaussianMoment, n_draws: usize, seed: u64) -> Result<MonteCarloReport> {
    check_draws(n_draws)?;
    let sd = density.variance.sqrt();
    let predicted = GaussianMoment::new(delta * density.mean, delta * delta * density.variance);
    let (values, truncated) = run_draws(n_draws, seed, |rng, truncated| {
        let rho = clamp_nonnegative(gaussian(rng, density.mean, sd), truncated);
        -(-delta * rho).exp_m1()
    });
    Ok(MonteCarloReport::from_draws(&values, predicted, truncated, seed))
}

/// One scalar input of a [`FieldSample`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    DensityMean,
    DensitySpread,
    ColorMean(usize),
    ColorSpread(usize),
}

impl Slot {
    pub const ALL: [Slot; 8] = [
        Slot::DensityMean,
        Slot::DensitySpread,
        Slot::ColorMean(0),
        Slot::ColorMean(1),
        Slot::ColorMean(2),
        Slot::ColorSpread(0),
        Slot::ColorSpread(1),
        Slot::ColorSpread(2),
    ];

    fn get_mut(self, s: &mut FieldSample) -> &mut f64 {
        match self {
            Slot::DensityMean => &mut s.density_mean,
            Slot::DensitySpread => &mut s.density_spread,
            Slot::ColorMean(c) => &mut s.color_mean[c],
            Slot::ColorSpread(c) => &mut s.color_spread[c],
        }
    }

    fn grad(self, g: &FieldSampleGrad) -> f64 {
        match self {
            Slot::DensityMean => g.density_mean,
            Slot::DensitySpread => g.density_spread,
            Slot::ColorMean(c) => g.color_mean[c],
            Slot::ColorSpread(c) => g.color_spread[c],
        }
    }
}

/// A differentiable operation, reduced to a scalar where it is vector valued.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum GradientTarget {
    /// Deterministic composite, projected onto a seeded random direction.
    Composite { kind: RenderMode, alpha_model: AlphaModel },
    /// The propagation rule of `mode`, with mean and variance each projected
    /// onto a seeded random direction.
    Propagate { mode: LossMode, kind: RenderMode },
    /// Per-ray loss of `mode`. With `frozen_t` the finite differences hold the
    /// occupancy transmittance at its unperturbed value.
    Loss { mode: LossMode, kind: RenderMode, frozen_t: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdInputs {
    pub batch: RaySampleBatch,
    pub target: Vec<f64>,
    pub opts: PropagationOptions,
    /// Slots to perturb; all of them when `None`.
    pub slots: Option<Vec<Slot>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_relative_error: f64,
    /// (sample, slot) with the worst error.
    pub worst: Option<(usize, Slot)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Central differences on every selected (sample, slot) coordinate against
/// the analytic gradient. Errors are relative to
/// `max(|analytic|, FD_FLOOR * max(1, |f|))`.
pub fn fd_gradient_check(target: &GradientTarget, inputs: &FdInputs, step: f64, seed: u64) -> Result<FdReport> {
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let kind = match *target {
        GradientTarget::Composite { kind, .. } | GradientTarget::Propagate { kind, .. } | GradientTarget::Loss { kind, .. } => kind,
    };
    let channels = kind.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<f64> = (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect();
    let opts = &inputs.opts;
    let frozen = occupancy_transmittance(&inputs.batch.samples);

    let eval = |batch: &RaySampleBatch| -> f64 {
        match *target {
            GradientTarget::Composite { kind, alpha_model } => {
                let copts = CompositeOptions {
                    background: opts.background,
                    alpha_model,
                    early_termination: false,
                };
                composite(batch, kind, &copts).value.iter().zip(&u).map(|(x, w)| x * w).sum()
            }
            GradientTarget::Propagate { mode, kind } => {
                let t = (mode.is_occupancy() && !opts.gradient_through_t).then_some(frozen.as_slice());
                predict_raw(mode, batch, kind, opts, t)
                    .iter()
                .enumerate()
                    .map(|(c, m)| u[c] * m.mean + v[c] * m.variance)
                    .sum()
            }
            GradientTarget::Loss { mode, kind, frozen_t } => {
                let t = frozen_t.then_some(frozen.as_slice());
                ray_loss_frozen(mode, batch, &inputs.target, kind, opts, t)
            }
        }
    };
    let analytic: Vec<FieldSampleGrad> = match *target {
        GradientTarget::Composite { kind, alpha_model } => {
            let copts = CompositeOptions {
                background: opts.background,
                alpha_model,
                early_termination: false,
            };
            let out = composite(&inputs.batch, kind, &copts);
            composite_backward(&inputs.batch, kind, &copts, &out, &u)
        }
        GradientTarget::Propagate { mode, kind } => moments_backward(mode, &inputs.batch, kind, opts, &u, &v),
        GradientTarget::Loss { mode, kind, .. } => loss_backward(mode, &inputs.batch, &inputs.target, kind, opts).1,
    };

    let slots = inputs.slots.clone().unwrap_or_else(|| Slot::ALL.to_vec());
    let mut report = FdReport {
        max_relative_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let floor = FD_FLOOR * eval(&inputs.batch).abs().max(1.0);
    let mut probe = inputs.batch.clone();
    for i in 0..inputs.batch.len() {
        for &slot in &slots {
            let original = *slot.get_mut(&mut probe.samples[i]);
            let mut at = |offset: f64| {
                *slot.get_mut(&mut probe.samples[i]) = original + offset;
                eval(&probe)
            };
            // Fourth-order central stencil.
            let numeric = (8.0 * (at(step) - at(-step)) - (at(2.0 * step) - at(-2.0 * step))) / (12.0 * step);
            *slot.get_mut(&mut probe.samples[i]) = original;
            let a = slot.grad(&analytic[i]);
            let err = (a - numeric).abs() / a.abs().max(floor);
            report.coordinates += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((i, slot));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Recipe for random synthetic rays used by the oracle suites.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRay {
    pub n_samples: usize,
    pub near: f64,
    pub far: f64,
    /// Range of the per-sample optical depth `delta * mu`, or of the occupancy
    /// mean when `occupancy` is set.
    pub depth_range: (f64, f64),
    /// Range of the density spread as a fraction of its mean.
    pub spread_ratio: (f64, f64),
    pub color_spread: (f64, f64),
    pub occupancy: bool,
}

impl Default for SyntheticRay {
    fn default() -> Self {
        Self {
            n_samples: 16,
            near: 2.0,
            far: 6.0,
            depth_range: (0.01, 0.3),
            spread_ratio: (0.05, 0.5),
            color_spread: (0.01, 0.2),
            occupancy: false,
        }
    }
}

impl SyntheticRay {
    pub fn build<R: Rng>(&self, rng: &mut R) -> Result<RaySampleBatch> {
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: Vector3::z(),
        };
        let mut batch = stratified_sample(&ray, self.near, self.far, self.n_samples, Jitter::None)?;
        let range = |rng: &mut R, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
        batch.samples = batch
            .positions()
            .zip(batch.deltas.clone())
            .map(|(position, delta)| {
                let x = range(rng, self.depth_range);
                let density_mean = if self.occupancy { x } else { x / delta };
                let ratio = range(rng, self.spread_ratio);
                FieldSample {
                    position,
                    density_mean,
                    density_spread: ratio * density_mean,
                    color_mean: std::array::from_fn(|_| rng.random_range(0.1..0.9)),
                    color_spread: std::array::from_fn(|_| range(rng, self.color_spread)),
                }
            })
            .collect();
        Ok(batch)
    }
}
