//! Moment propagation through compositing and the Gaussian likelihood losses.
//!
//! Each [`LossMode`] turns the per-sample Gaussians on a ray into a predicted
//! (mean, variance) per output channel. Training minimises
//! `ln var + (target - mean)^2 / var`, summed over channels. Gradients are
//! written out by hand and flow back to every [`FieldSample`] entry.
//!
//! In the RGB modes a non-black background enters every linear form as
//! `bg + sum_i w_i (c_i - bg)`; with the default black background this is
//! exactly the plain weighted sum.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::field::{FieldSample, FieldSampleGrad, SIGMA_FLOOR};
use crate::render::{
    alpha_backward, alphas, composite, composite_backward, AlphaModel, CompositeOptions,
    RaySampleBatch, RenderMode,
};

pub const VARIANCE_FLOOR: f64 = SIGMA_FLOOR * SIGMA_FLOOR;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianMoment {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianMoment {
    pub fn new(mean: f64, variance: f64) -> Self {
        Self { mean, variance }
    }

    pub fn floored(self) -> Self {
        Self {
            mean: self.mean,
            variance: self.variance.max(VARIANCE_FLOOR),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Baseline,
    Color,
    DensityRgb,
    DensityDepth,
    ColorDensity,
    OccupancyRgb,
    OccupancyDepth,
}

impl LossMode {
    pub const ALL: [LossMode; 7] = [
        LossMode::Baseline,
        LossMode::Color,
        LossMode::DensityRgb,
        LossMode::DensityDepth,
        LossMode::ColorDensity,
        LossMode::OccupancyRgb,
        LossMode::OccupancyDepth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Baseline => "baseline",
            LossMode::Color => "color",
            LossMode::DensityRgb => "density_rgb",
            LossMode::DensityDepth => "density_depth",
            LossMode::ColorDensity => "color_density",
            LossMode::OccupancyRgb => "occupancy_rgb",
            LossMode::OccupancyDepth => "occupancy_depth",
        }
    }

    /// Whether this mode can be trained on targets of kind `kind`.
    pub fn accepts(self, kind: RenderMode) -> bool {
        match self {
            LossMode::Baseline => true,
            LossMode::Color | LossMode::DensityRgb | LossMode::ColorDensity | LossMode::OccupancyRgb => {
                kind == RenderMode::Rgb
            }
            LossMode::DensityDepth | LossMode::OccupancyDepth => kind == RenderMode::Depth,
        }
    }

    pub fn check_target(self, kind: RenderMode) -> Result<(), Error> {
        if self.accepts(kind) {
            Ok(())
        } else {
            Err(Error::ModeMismatch {
                mode: self.name().into(),
                kind: match kind {
                    RenderMode::Rgb => "rgb".into(),
                    RenderMode::Depth => "depth".into(),
                },
            })
        }
    }

    pub fn is_occupancy(self) -> bool {
        matches!(self, LossMode::OccupancyRgb | LossMode::OccupancyDepth)
    }

    /// How the density slot turns into opacity when rendering this mode.
    pub fn alpha_model(self) -> AlphaModel {
        if self.is_occupancy() {
            AlphaModel::Occupancy
        } else {
            AlphaModel::Density
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown loss mode `{s}` (expected one of: {})",
                    LossMode::ALL.map(|m| m.name()).join(", ")
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropagationOptions {
    pub background: [f64; 3],
    /// Differentiate the occupancy transmittance instead of holding it fixed.
    pub gradient_through_t: bool,
}

impl Default for PropagationOptions {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            gradient_through_t: false,
        }
    }
}

impl PropagationOptions {
    fn composite_options(&self, alpha_model: AlphaModel) -> CompositeOptions {
        CompositeOptions {
            background: self.background,
            alpha_model,
            early_termination: false,
        }
    }

    fn offset(&self, kind: RenderMode, c: usize) -> f64 {
        match kind {
            RenderMode::Rgb => self.background[c],
            RenderMode::Depth => 0.0,
        }
    }
}

/// Linear weight of sample `i` on channel `c`: `c_i - bg` or `d_i`.
#[inline]
fn linear_weight(batch: &RaySampleBatch, kind: RenderMode, opts: &PropagationOptions, i: usize, c: usize) -> f64 {
    match kind {
        RenderMode::Rgb => batch.samples[i].color_mean[c] - opts.background[c],
        RenderMode::Depth => batch.midpoints[i],
    }
}

/// Occupancy transmittance `T_{i+1} = T_i (1 - mu_o_i)` with `T_1 = 1`.
pub fn occupancy_transmittance(samples: &[FieldSample]) -> Vec<f64> {
    let mut t = 1.0;
    samples
        .iter()
        .map(|s| {
            let here = t;
            t *= 1.0 - s.density_mean;
            here
        })
        .collect()
}

/// Color-only propagation: alpha from the deterministic pass, color Gaussian.
/// Variance is not floored.
pub fn propagate_color_raw(batch: &RaySampleBatch, opts: &PropagationOptions) -> [GaussianMoment; 3] {
    let (alpha, _, final_t) = alphas(batch, &opts.composite_options(AlphaModel::Density));
    std::array::from_fn(|c| {
        let mut mean = final_t * opts.background[c];
        let mut var = 0.0;
        for (s, a) in batch.samples.iter().zip(&alpha) {
            mean += s.color_mean[c] * a;
            var += s.color_spread[c] * s.color_spread[c] * a * a;
        }
        GaussianMoment::new(mean, var)
    })
}

pub fn propagate_color(batch: &RaySampleBatch, opts: &PropagationOptions) -> [GaussianMoment; 3] {
    propagate_color_raw(batch, opts).map(GaussianMoment::floored)
}

/// Linearised density propagation: `alpha_i ~= delta_i rho_i`. Variance is not floored.
pub fn propagate_density_linearized_raw(batch: &RaySampleBatch, weights: &[f64]) -> GaussianMoment {
    let mut mean = 0.0;
    let mut var = 0.0;
    for ((s, d), w) in batch.samples.iter().zip(&batch.deltas).zip(weights) {
        mean += w * d * s.density_mean;
        let k = w * d * s.density_spread;
        var += k * k;
    }
    GaussianMoment::new(mean, var)
}

pub fn propagate_density_linearized(batch: &RaySampleBatch, weights: &[f64]) -> GaussianMoment {
    propagate_density_linearized_raw(batch, weights).floored()
}

/// Product-of-Gaussians propagation for density times color. Variance is not floored.
pub fn propagate_color_density_raw(batch: &RaySampleBatch, opts: &PropagationOptions) -> [GaussianMoment; 3] {
    std::array::from_fn(|c| {
        let bg = opts.background[c];
        let mut mean = bg;
        let mut var = 0.0;
        for (s, d) in batch.samples.iter().zip(&batch.deltas) {
            let (mu, sd) = (s.density_mean, s.density_spread);
            let (mc, sc) = (s.color_mean[c] - bg, s.color_spread[c]);
            mean += d * mu * mc;
            var += d * d * (sd * sd * mc * mc + sc * sc * mu * mu + sd * sd * sc * sc);
        }
        GaussianMoment::new(mean, var)
    })
}

pub fn propagate_color_density(batch: &RaySampleBatch, opts: &PropagationOptions) -> [GaussianMoment; 3] {
    propagate_color_density_raw(batch, opts).map(GaussianMoment::floored)
}

/// Markov occupancy propagation with transmittance held fixed. `trans` defaults
/// to the value implied by the current occupancy means. Variance is not floored.
pub fn propagate_occupancy_raw(batch: &RaySampleBatch, weights: &[f64], trans: Option<&[f64]>) -> GaussianMoment {
    let owned;
    let trans = match trans {
        Some(t) => t,
        None => {
            owned = occupancy_transmittance(&batch.samples);
            &owned
        }
    };
    let mut mean = 0.0;
    let mut var = 0.0;
    for ((s, t), w) in batch.samples.iter().zip(trans).zip(weights) {
        mean += w * t * s.density_mean;
        let k = w * t * s.density_spread;
        var += k * k;
    }
    GaussianMoment::new(mean, var)
}

pub fn propagate_occupancy(batch: &RaySampleBatch, weights: &[f64]) -> GaussianMoment {
    propagate_occupancy_raw(batch, weights, None).floored()
}

/// `ln var + (target - mean)^2 / var` for one scalar channel.
pub fn nll_loss(predicted: GaussianMoment, target: f64) -> f64 {
    let r = target - predicted.mean;
    predicted.variance.ln() + r * r / predicted.variance
}

/// Gradient of [`nll_loss`] with respect to (mean, variance).
pub fn nll_grad(predicted: GaussianMoment, target: f64) -> (f64, f64) {
    let r = target - predicted.mean;
    let v = predicted.variance;
    (-2.0 * r / v, 1.0 / v - r * r / (v * v))
}

fn channel_weights(batch: &RaySampleBatch, kind: RenderMode, opts: &PropagationOptions, c: usize) -> Vec<f64> {
    (0..batch.len()).map(|i| linear_weight(batch, kind, opts, i, c)).collect()
}

/// Unfloored predicted moments of `mode` on one ray, one per output channel.
/// `frozen_t` overrides the occupancy transmittance.
pub fn predict_raw(
    mode: LossMode,
    batch: &RaySampleBatch,
    kind: RenderMode,
    opts: &PropagationOptions,
    frozen_t: Option<&[f64]>,
) -> Vec<GaussianMoment> {
    let channels = kind.channels();
    match mode {
        LossMode::Baseline => {
            let out = composite(batch, kind, &opts.composite_options(AlphaModel::Density));
            out.value.iter().map(|&m| GaussianMoment::new(m, 0.0)).collect()
        }
        LossMode::Color => propagate_color_raw(batch, opts).to_vec(),
        LossMode::ColorDensity => propagate_color_density_raw(batch, opts).to_vec(),
        LossMode::DensityRgb | LossMode::DensityDepth => (0..channels)
            .map(|c| {
                let w = channel_weights(batch, kind, opts, c);
                let m = propagate_density_linearized_raw(batch, &w);
                GaussianMoment::new(m.mean + opts.offset(kind, c), m.variance)
            })
            .collect(),
        LossMode::OccupancyRgb | LossMode::OccupancyDepth => (0..channels)
            .map(|c| {
                let w = channel_weights(batch, kind, opts, c);
                let m = propagate_occupancy_raw(batch, &w, frozen_t);
                GaussianMoment::new(m.mean + opts.offset(kind, c), m.variance)
            })
            .collect(),
    }
}

/// Floored predicted moments. Baseline reports the floor as its variance.
pub fn predict(mode: LossMode, batch: &RaySampleBatch, kind: RenderMode, opts: &PropagationOptions) -> Vec<GaussianMoment> {
    predict_raw(mode, batch, kind, opts, None)
        .into_iter()
        .map(GaussianMoment::floored)
        .collect()
}

/// Per-ray loss: squared error for the baseline, summed NLL otherwise.
pub fn ray_loss(mode: LossMode, batch: &RaySampleBatch, target: &[f64], kind: RenderMode, opts: &PropagationOptions) -> f64 {
    ray_loss_frozen(mode, batch, target, kind, opts, None)
}

/// [`ray_loss`] with the occupancy transmittance optionally pinned.
pub fn ray_loss_frozen(
    mode: LossMode,
    batch: &RaySampleBatch,
    target: &[f64],
    kind: RenderMode,
    opts: &PropagationOptions,
    frozen_t: Option<&[f64]>,
) -> f64 {
    let pred = predict_raw(mode, batch, kind, opts, frozen_t);
    match mode {
        LossMode::Baseline => baseline_loss_from(&pred, target),
        _ => pred
            .iter()
            .zip(target)
            .map(|(p, &y)| nll_loss(p.floored(), y))
            .sum(),
    }
}

fn baseline_loss_from(pred: &[GaussianMoment], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, y)| (p.mean - y) * (p.mean - y))
        .sum()
}

/// Squared error between the deterministic composite and `target`.
pub fn baseline_loss(batch: &RaySampleBatch, target: &[f64], kind: RenderMode, opts: &PropagationOptions) -> f64 {
    ray_loss(LossMode::Baseline, batch, target, kind, opts)
}

/// Loss and its gradient with respect to every sample on the ray.
pub fn loss_backward(
    mode: LossMode,
    batch: &RaySampleBatch,
    target: &[f64],
    kind: RenderMode,
    opts: &PropagationOptions,
) -> (f64, Vec<FieldSampleGrad>) {
    if mode == LossMode::Baseline {
        let copts = opts.composite_options(AlphaModel::Density);
        let out = composite(batch, kind, &copts);
        let upstream: Vec<f64> = out.value.iter().zip(target).map(|(m, y)| 2.0 * (m - y)).collect();
        let loss = out.value.iter().zip(target).map(|(m, y)| (m - y) * (m - y)).sum();
        return (loss, composite_backward(batch, kind, &copts, &out, &upstream));
    }

    let pred = predict_raw(mode, batch, kind, opts, None);
    let mut loss = 0.0;
    let mut dmean = vec![0.0; pred.len()];
    let mut dvar = vec![0.0; pred.len()];
    for (c, (p, &y)) in pred.iter().zip(target).enumerate() {
        let f = p.floored();
        loss += nll_loss(f, y);
        let (gm, gv) = nll_grad(f, y);
        dmean[c] = gm;
        dvar[c] = if p.variance >= VARIANCE_FLOOR { gv } else { 0.0 };
    }

    (loss, moments_backward(mode, batch, kind, opts, &dmean, &dvar))
}

/// Gradient of `sum_c dmean[c] * mean_c + dvar[c] * var_c` over the unfloored
/// moments that [`predict_raw`] returns for `mode`.
pub fn moments_backward(
    mode: LossMode,
    batch: &RaySampleBatch,
    kind: RenderMode,
    opts: &PropagationOptions,
    dmean: &[f64],
    dvar: &[f64],
) -> Vec<FieldSampleGrad> {
    match mode {
        LossMode::Baseline => {
            let copts = opts.composite_options(AlphaModel::Density);
            let out = composite(batch, kind, &copts);
            composite_backward(batch, kind, &copts, &out, dmean)
        }
        LossMode::Color => color_backward(batch, opts, dmean, dvar),
        LossMode::DensityRgb | LossMode::DensityDepth => density_backward(batch, kind, opts, dmean, dvar),
        LossMode::ColorDensity => color_density_backward(batch, opts, dmean, dvar),
        LossMode::OccupancyRgb | LossMode::OccupancyDepth => occupancy_backward(batch, kind, opts, dmean, dvar),
    }
}

fn color_backward(batch: &RaySampleBatch, opts: &PropagationOptions, dmean: &[f64], dvar: &[f64]) -> Vec<FieldSampleGrad> {
    let copts = opts.composite_options(AlphaModel::Density);
    let (alpha, trans, _) = alphas(batch, &copts);
    let n = batch.len();
    let mut grads = vec![FieldSampleGrad::default(); n];
    let mut grad_alpha = vec![0.0; n];
    for i in 0..n {
        let s = &batch.samples[i];
        let a = alpha[i];
        for c in 0..3 {
            let sc = s.color_spread[c];
            grad_alpha[i] += dmean[c] * s.color_mean[c] + dvar[c] * 2.0 * sc * sc * a;
            grads[i].color_mean[c] = dmean[c] * a;
            grads[i].color_spread[c] = dvar[c] * 2.0 * sc * a * a;
        }
    }
    let grad_final_t: f64 = (0..3).map(|c| dmean[c] * opts.background[c]).sum();
    let dm = alpha_backward(batch, &copts, &trans, &grad_alpha, grad_final_t);
    for (g, d) in grads.iter_mut().zip(dm) {
        g.density_mean = d;
    }
    grads
}

fn density_backward(
    batch: &RaySampleBatch,
    kind: RenderMode,
    opts: &PropagationOptions,
    dmean: &[f64],
    dvar: &[f64],
) -> Vec<FieldSampleGrad> {
    let mut grads = vec![FieldSampleGrad::default(); batch.len()];
    for (i, g) in grads.iter_mut().enumerate() {
        let s = &batch.samples[i];
        let d = batch.deltas[i];
        for c in 0..kind.channels() {
            let w = linear_weight(batch, kind, opts, i, c);
            g.density_mean += dmean[c] * w * d;
            g.density_spread += dvar[c] * 2.0 * w * w * d * d * s.density_spread;
            if kind == RenderMode::Rgb {
                g.color_mean[c] += dmean[c] * d * s.density_mean
                    + dvar[c] * 2.0 * w * d * d * s.density_spread * s.density_spread;
            }
        }
    }
    grads
}

fn color_density_backward(batch: &RaySampleBatch, opts: &PropagationOptions, dmean: &[f64], dvar: &[f64]) -> Vec<FieldSampleGrad> {
    let mut grads = vec![FieldSampleGrad::default(); batch.len()];
    for (i, g) in grads.iter_mut().enumerate() {
        let s = &batch.samples[i];
        let d = batch.deltas[i];
        let d2 = d * d;
        let (mu, sd) = (s.density_mean, s.density_spread);
        for c in 0..3 {
            let mc = s.color_mean[c] - opts.background[c];
            let sc = s.color_spread[c];
            g.density_mean += dmean[c] * d * mc + dvar[c] * d2 * 2.0 * sc * sc * mu;
            g.density_spread += dvar[c] * d2 * 2.0 * sd * (mc * mc + sc * sc);
            g.color_mean[c] += dmean[c] * d * mu + dvar[c] * d2 * 2.0 * sd * sd * mc;
            g.color_spread[c] += dvar[c] * d2 * 2.0 * sc * (mu * mu + sd * sd);
        }
    }
    grads
}

fn occupancy_backward(
    batch: &RaySampleBatch,
    kind: RenderMode,
    opts: &PropagationOptions,
    dmean: &[f64],
    dvar: &[f64],
) -> Vec<FieldSampleGrad> {
    let n = batch.len();
    let trans = occupancy_transmittance(&batch.samples);
    let mut grads = vec![FieldSampleGrad::default(); n];
    let mut grad_t = vec![0.0; n];
    for i in 0..n {
        let s = &batch.samples[i];
        let t = trans[i];
        let (mo, so) = (s.density_mean, s.density_spread);
        let g = &mut grads[i];
        for c in 0..kind.channels() {
            let w = linear_weight(batch, kind, opts, i, c);
            g.density_mean += dmean[c] * w * t;
            g.density_spread += dvar[c] * 2.0 * w * w * t * t * so;
            if kind == RenderMode::Rgb {
                g.color_mean[c] += dmean[c] * t * mo + dvar[c] * 2.0 * w * t * t * so * so;
            }
            grad_t[i] += dmean[c] * w * mo + dvar[c] * 2.0 * w * w * t * so * so;
        }
    }
    if opts.gradient_through_t && n > 1 {
        // carry = dL/dT_{k+1} accumulated over all downstream T_i
        let mut carry = 0.0;
        for k in (0..n - 1).rev() {
            carry = grad_t[k + 1] + (1.0 - batch.samples[k + 1].density_mean) * carry;
            grads[k].density_mean -= trans[k] * carry;
        }
    }
    grads
}
