//! Glue between rays and the field: per-ray sampling, batched loss and
//! gradient evaluation with a deterministic reduction, and full-view renders.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::{ActivatedField, FieldParams, FieldSampleGrad, UncertainField};
use crate::render::{
    composite, derive_seed, stratified_sample, AlphaModel, CompositeOptions, Camera, Jitter, Ray,
    RaySampleBatch, RenderMode, SampleSource,
};
use crate::uncertainty::{loss_backward, predict, GaussianMoment, LossMode, PropagationOptions};

/// Rays per parallel work unit. Fixed so the reduction order never depends on
/// the number of worker threads.
pub const RAY_CHUNK: usize = 64;

/// Sampling settings shared by every ray of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaySettings {
    pub near: f64,
    pub far: f64,
    pub n_samples: usize,
    pub jitter: bool,
}

impl RaySettings {
    /// Bin width; all bins of a ray share it.
    pub fn delta(&self) -> f64 {
        (self.far - self.near) / self.n_samples as f64
    }
}

pub fn sample_ray<S: SampleSource + ?Sized>(
    source: &S,
    ray: &Ray,
    settings: &RaySettings,
    seed: u64,
) -> RaySampleBatch {
    let jitter = if settings.jitter {
        Jitter::Seeded(seed)
    } else {
        Jitter::None
    };
    let mut batch = stratified_sample(ray, settings.near, settings.far, settings.n_samples, jitter)
        .expect("ray settings are validated up front");
    batch.populate(source);
    batch
}

/// One supervised ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RayTarget {
    pub ray: Ray,
    pub target: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchResult {
    /// Mean loss over accepted rays.
    pub loss: f64,
    /// Rays skipped because their target was not finite.
    pub rejected: Vec<usize>,
    /// Rays whose loss came out non-finite.
    pub non_finite: Vec<usize>,
    /// Predicted means, per accepted ray, for monitoring.
    pub predictions: Vec<(usize, Vec<f64>)>,
}

struct RayGrad {
    index: usize,
    loss: f64,
    prediction: Vec<f64>,
    samples: Vec<(nalgebra::Vector3<f64>, FieldSampleGrad)>,
}

/// Mean per-ray loss over `rays` and its gradient, added into `grad`.
/// Per-ray jitter seeds come from `(seed, ray index)`.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_and_gradient(
    field: &UncertainField,
    rays: &[RayTarget],
    mode: LossMode,
    kind: RenderMode,
    settings: &RaySettings,
    opts: &PropagationOptions,
    seed: u64,
    grad: &mut FieldParams,
) -> BatchResult {
    let mut result = BatchResult::default();
    let view = ActivatedField::new(field);
    let per_chunk: Vec<Vec<Result<RayGrad, usize>>> = rays
        .par_chunks(RAY_CHUNK)
        .enumerate()
        .map(|(chunk, group)| {
            group
                .iter()
                .enumerate()
                .map(|(j, rt)| {
                    let index = chunk * RAY_CHUNK + j;
                    if !rt.target.iter().all(|v| v.is_finite()) {
                        return Err(index);
                    }
                    let batch = sample_ray(&view, &rt.ray, settings, derive_seed(seed, index as u64));
                    let (loss, grads) = loss_backward(mode, &batch, &rt.target, kind, opts);
                    let prediction = predict(mode, &batch, kind, opts).iter().map(|m| m.mean).collect();
                    let samples = batch
                        .positions()
                        .zip(grads)
                        .filter(|(_, g)| !g.is_zero())
                        .collect();
                    Ok(RayGrad {
                        index,
                        loss,
                        prediction,
                        samples,
                    })
                })
                .collect()
        })
        .collect();

    let accepted: Vec<RayGrad> = per_chunk
        .into_iter()
        .flatten()
        .filter_map(|r| match r {
            Ok(g) => Some(g),
            Err(i) => {
                result.rejected.push(i);
                None
            }
        })
        .collect();
    if accepted.is_empty() {
        return result;
    }
    let scale = 1.0 / accepted.len() as f64;
    let mut total = 0.0;
    for rg in accepted {
        if !rg.loss.is_finite() {
            result.non_finite.push(rg.index);
            continue;
        }
        total += rg.loss;
        for (p, mut g) in rg.samples {
            g.scale(scale);
            view.accumulate_field_gradient(&p, &g, grad);
        }
        result.predictions.push((rg.index, rg.prediction));
    }
    result.loss = total * scale;
    result
}

/// A rendered view: the mean and variance of the mode's predicted Gaussian per
/// pixel, plus its opacity.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRender {
    pub width: u32,
    pub height: u32,
    pub kind: RenderMode,
    /// Row-major, channels interleaved.
    pub value: Vec<f64>,
    pub variance: Vec<f64>,
    pub opacity: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewOptions {
    pub mode: LossMode,
    pub kind: RenderMode,
    pub alpha_model: AlphaModel,
    pub background: [f64; 3],
    pub normalized_depth: bool,
    pub early_termination: bool,
}

impl ViewOptions {
    /// The mode whose prediction is rendered. A field that does not carry the
    /// requested mode's parameterization yet (e.g. before the occupancy
    /// switch) is rendered with the deterministic mode of its alpha model.
    pub fn effective_mode(&self) -> LossMode {
        if self.alpha_model == self.mode.alpha_model() {
            return self.mode;
        }
        match (self.alpha_model, self.kind) {
            (AlphaModel::Density, _) => LossMode::Baseline,
            (AlphaModel::Occupancy, RenderMode::Rgb) => LossMode::OccupancyRgb,
            (AlphaModel::Occupancy, RenderMode::Depth) => LossMode::OccupancyDepth,
        }
    }
}

/// Total weight the mode's prediction puts on the ray: the composite opacity,
/// or the linear optical depth for the linearised modes.
fn predicted_opacity(mode: LossMode, batch: &RaySampleBatch, copts: &CompositeOptions) -> f64 {
    match mode {
        LossMode::DensityRgb | LossMode::DensityDepth | LossMode::ColorDensity => batch
            .samples
            .iter()
            .zip(&batch.deltas)
            .map(|(s, d)| d * s.density_mean)
            .sum(),
        _ => composite(batch, RenderMode::Depth, copts).opacity,
    }
}

pub fn render_view(field: &UncertainField, camera: &Camera, settings: &RaySettings, opts: &ViewOptions) -> ViewRender {
    let mode = opts.effective_mode();
    let copts = CompositeOptions {
        background: opts.background,
        alpha_model: mode.alpha_model(),
        early_termination: opts.early_termination,
    };
    let popts = PropagationOptions {
        background: opts.background,
        gradient_through_t: false,
    };
    let ch = opts.kind.channels();
    let view = ActivatedField::new(field);
    let width = camera.width as usize;
    let no_jitter = RaySettings {
        jitter: false,
        ..*settings
    };
    let pixels: Vec<(Vec<GaussianMoment>, f64)> = (0..camera.pixel_count())
        .into_par_iter()
        .with_min_len(RAY_CHUNK)
        .map(|k| {
            let ray = camera.pixel_ray((k % width) as u32, (k / width) as u32);
            let batch = sample_ray(&view, &ray, &no_jitter, 0);
            let mut pred = predict(mode, &batch, opts.kind, &popts);
            let opacity = predicted_opacity(mode, &batch, &copts);
            if opts.kind == RenderMode::Depth && opts.normalized_depth {
                pred[0].mean = if opacity > 0.0 { pred[0].mean / opacity } else { 0.0 };
            }
            (pred, opacity)
        })
        .collect();
    let mut out = ViewRender {
        width: camera.width,
        height: camera.height,
        kind: opts.kind,
        value: Vec::with_capacity(pixels.len() * ch),
        variance: Vec::with_capacity(pixels.len() * ch),
        opacity: Vec::with_capacity(pixels.len()),
    };
    for (pred, o) in pixels {
        out.value.extend(pred.iter().map(|m| m.mean));
        out.variance.extend(pred.iter().map(|m| m.variance));
        out.opacity.push(o);
    }
    out
}
