//! Training loop: ray batches, Adam, the baseline warm-up and the divergence
//! guard.

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::field::{logit, sigmoid, softplus, DensityActivation, FieldParams, UncertainField, SIGMA_FLOOR};
use crate::metrics::{self, MetricReport};
use crate::pipeline::{batch_loss_and_gradient, render_view, RaySettings, RayTarget, ViewOptions};
use crate::render::{derive_seed, AlphaModel, RenderMode};
use crate::uncertainty::{LossMode, PropagationOptions};

/// Stream labels mixed into the run seed.
pub const STREAM_TRAIN: u64 = 0x7472_6169_6e;
const STREAM_JITTER: u64 = 0x6a69_7474_6572;

/// Consecutive iterations above the divergence threshold before the learning
/// rate is halved.
pub const DIVERGENCE_PATIENCE: usize = 200;
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Post-warm-up iterations averaged to form the divergence reference loss.
const REFERENCE_WINDOW: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_rays: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub warmup_iterations: usize,
    pub loss_mode: LossMode,
    pub seed: u64,
    pub n_samples: usize,
    pub background_color: [f64; 3],
    pub resolution: [usize; 3],
    pub density_activation: DensityActivation,
    /// Jitter sample positions inside their bins while training.
    pub jitter: bool,
    pub normalized_depth: bool,
    pub gradient_through_t: bool,
    pub early_termination: bool,
    /// Evaluate on the test split every this many iterations (0: only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_rays: 1024,
            learning_rate: 5e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            warmup_iterations: 2_000,
            loss_mode: LossMode::Baseline,
            seed: 0,
            n_samples: 64,
            background_color: [0.0; 3],
            resolution: [64; 3],
            density_activation: DensityActivation::Sigmoid,
            jitter: true,
            normalized_depth: false,
            gradient_through_t: false,
            early_termination: false,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_iterations > self.iterations {
            return Err(Error::invalid("warmup_iterations must not exceed iterations"));
        }
        if self.batch_rays == 0 {
            return Err(Error::invalid("batch_rays must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.n_samples == 0 {
            return Err(Error::invalid("n_samples must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if self.loss_mode.is_occupancy() && self.density_activation != DensityActivation::Sigmoid {
            return Err(Error::invalid("occupancy modes need the sigmoid density activation"));
        }
        Ok(())
    }
}

/// Bias-corrected Adam over every field parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first: FieldParams,
    pub second: FieldParams,
    pub step: u64,
}

impl Adam {
    pub fn new(cells: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            first: FieldParams::zeros(cells),
            second: FieldParams::zeros(cells),
            step: 0,
        }
    }

    pub fn adam_step(&mut self, params: &mut FieldParams, grads: &FieldParams, learning_rate: f64) {
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let p = params.slices_mut();
        let g = grads.slices();
        let m = self.first.slices_mut();
        let v = self.second.slices_mut();
        for (((p, g), m), v) in p.into_iter().zip(g).zip(m).zip(v) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Forgets the moments of the density and density-spread slots.
    fn reset_density_moments(&mut self) {
        for buf in [&mut self.first, &mut self.second] {
            buf.density.fill(0.0);
            buf.density_spread.fill(0.0);
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub last: f64,
    pub ema: f64,
    pub count: usize,
}

impl LossStats {
    fn push(&mut self, loss: f64) {
        self.ema = if self.count == 0 { loss } else { 0.98 * self.ema + 0.02 * loss };
        self.last = loss;
        self.count += 1;
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub field: UncertainField,
    pub adam: Adam,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
    pub loss_stats: LossStats,
    /// How the density slot is currently interpreted.
    pub alpha_model: AlphaModel,
    pub learning_rate: f64,
    pub lr_halved: bool,
}

impl TrainState {
    pub fn new(config: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        let field = UncertainField::new(config.resolution, dataset.scene.bounds)?
            .with_density_activation(config.density_activation);
        let cells = field.cells();
        Ok(Self {
            field,
            adam: Adam::new(cells, config.adam_beta1, config.adam_beta2, config.adam_eps),
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_TRAIN)),
            loss_stats: LossStats::default(),
            alpha_model: AlphaModel::Density,
            learning_rate: config.learning_rate,
            lr_halved: false,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub psnr_train: f64,
    pub wall_ms: u128,
}

/// Test-split metrics at one iteration, averaged over views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub iteration: usize,
    pub report: MetricReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
    pub evals: Vec<EvalRow>,
}

/// Which training pixel to supervise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PixelRef {
    pub image: usize,
    pub pixel: usize,
}

/// Uniform draw over every pixel of every training image.
pub fn select_ray_batch<R: Rng>(
    dataset: &Dataset,
    batch_rays: usize,
    rng: &mut R,
    without_replacement: bool,
) -> Result<Vec<PixelRef>> {
    let total = dataset.train_pixels();
    if total == 0 {
        return Err(Error::invalid("dataset has no training pixels"));
    }
    let offsets: Vec<usize> = dataset
        .train
        .iter()
        .scan(0usize, |acc, img| {
            let start = *acc;
            *acc += img.camera.pixel_count();
            Some(start)
        })
        .collect();
    let locate = |flat: usize| {
        let image = offsets.partition_point(|&o| o <= flat) - 1;
        PixelRef {
            image,
            pixel: flat - offsets[image],
        }
    };
    if without_replacement {
        if batch_rays > total {
            return Err(Error::invalid(format!(
                "cannot draw {batch_rays} distinct pixels from {total}"
            )));
        }
        Ok(sample_indices(rng, total, batch_rays).into_iter().map(locate).collect())
    } else {
        Ok((0..batch_rays).map(|_| locate(rng.random_range(0..total))).collect())
    }
}

pub fn ray_targets(dataset: &Dataset, pixels: &[PixelRef]) -> Vec<RayTarget> {
    pixels
        .iter()
        .map(|p| {
            let img = &dataset.train[p.image];
            let w = img.camera.width;
            let ray = img.camera.pixel_ray(p.pixel as u32 % w, p.pixel as u32 / w);
            RayTarget {
                ray,
                target: img.pixel(p.pixel).to_vec(),
            }
        })
        .collect()
}

/// Ray sampling settings for a dataset: near/far come from the first camera.
pub fn ray_settings(config: &TrainConfig, dataset: &Dataset) -> Result<RaySettings> {
    let cam = &dataset
        .train
        .first()
        .ok_or_else(|| Error::invalid("dataset has no training images"))?
        .camera;
    Ok(RaySettings {
        near: cam.near,
        far: cam.far,
        n_samples: config.n_samples,
        jitter: config.jitter,
    })
}

/// Rewrites the density slot as a per-bin occupancy `o = 1 - exp(-delta rho)`
/// and maps the spread through the same function to first order.
pub fn convert_to_occupancy(field: &mut UncertainField, delta: f64) {
    let act = field.density_activation;
    let p = &mut field.params;
    for (raw, raw_spread) in p.density.iter_mut().zip(p.density_spread.iter_mut()) {
        let rho = match act {
            DensityActivation::Sigmoid => sigmoid(*raw),
            DensityActivation::Softplus => softplus(*raw),
        };
        let o = (-(-delta * rho).exp_m1()).clamp(1e-9, 1.0 - 1e-9);
        *raw = logit(o);
        let spread = softplus(*raw_spread) + SIGMA_FLOOR;
        let target = (delta * spread * (-delta * rho).exp()).max(1e-12);
        *raw_spread = inverse_softplus(target);
    }
    field.density_activation = DensityActivation::Sigmoid;
}

fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn view_options(config: &TrainConfig, alpha_model: AlphaModel, kind: RenderMode) -> ViewOptions {
    ViewOptions {
        mode: config.loss_mode,
        kind,
        alpha_model,
        background: config.background_color,
        normalized_depth: config.normalized_depth,
        early_termination: config.early_termination,
    }
}

/// Renders every test view and averages the metrics.
pub fn evaluate(state: &TrainState, config: &TrainConfig, dataset: &Dataset) -> Result<MetricReport> {
    let settings = ray_settings(config, dataset)?;
    let opts = view_options(config, state.alpha_model, dataset.kind);
    let mut reports = Vec::new();
    for img in &dataset.test {
        let view = render_view(&state.field, &img.camera, &settings, &opts);
        reports.push(score_view(&view.value, img)?);
    }
    Ok(average_reports(&reports))
}

pub fn score_view(pred: &[f64], gt: &crate::data::PosedImage) -> Result<MetricReport> {
    let (w, h) = (gt.camera.width as usize, gt.camera.height as usize);
    Ok(match gt.kind {
        RenderMode::Rgb => MetricReport {
            psnr: Some(metrics::psnr(pred, &gt.pixels)?),
            ssim: Some(metrics::ssim(pred, &gt.pixels, w, h, 3)?),
            depth: None,
        },
        RenderMode::Depth => MetricReport {
            psnr: None,
            ssim: None,
            depth: Some(metrics::depth_metrics(pred, &gt.pixels, None)?),
        },
    })
}

pub fn average_reports(reports: &[MetricReport]) -> MetricReport {
    let n = reports.len().max(1) as f64;
    let avg = |f: &dyn Fn(&MetricReport) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = reports.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let depth = (reports.iter().all(|r| r.depth.is_some()) && !reports.is_empty()).then(|| {
        let d = |f: &dyn Fn(&metrics::DepthMetrics) -> f64| -> f64 {
            reports.iter().map(|r| f(r.depth.as_ref().unwrap())).sum::<f64>() / n
        };
        metrics::DepthMetrics {
            absrel: d(&|m| m.absrel),
            rmse_log: d(&|m| m.rmse_log),
            log10_err: d(&|m| m.log10_err),
            delta1: d(&|m| m.delta1),
            delta2: d(&|m| m.delta2),
            delta3: d(&|m| m.delta3),
            n_valid_pixels: reports.iter().map(|r| r.depth.unwrap().n_valid_pixels).sum(),
        }
    });
    MetricReport {
        psnr: avg(&|r| r.psnr),
        ssim: avg(&|r| r.ssim),
        depth,
    }
}

fn batch_psnr(dataset: &Dataset, rays: &[RayTarget], predictions: &[(usize, Vec<f64>)], far: f64) -> f64 {
    let scale = match dataset.kind {
        RenderMode::Rgb => 1.0,
        RenderMode::Depth => far,
    };
    let (mut se, mut n) = (0.0, 0usize);
    for (i, pred) in predictions {
        for (p, t) in pred.iter().zip(&rays[*i].target) {
            se += ((p - t) / scale).powi(2);
            n += 1;
        }
    }
    if n == 0 || se == 0.0 {
        return metrics::PSNR_CAP_DB;
    }
    (10.0 * (n as f64 / se).log10()).min(metrics::PSNR_CAP_DB)
}

/// Optional per-iteration hook, e.g. for checkpoints.
pub type IterationHook<'a> = dyn FnMut(&TrainState) -> Result<()> + 'a;

pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    train_with_hook(config, dataset, &mut |_| Ok(()))
}

pub fn train_with_hook(config: &TrainConfig, dataset: &Dataset, hook: &mut IterationHook<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    config.loss_mode.check_target(dataset.kind)?;
    let settings = ray_settings(config, dataset)?;
    let mut state = TrainState::new(config, dataset)?;
    let popts = PropagationOptions {
        background: config.background_color,
        gradient_through_t: config.gradient_through_t,
    };
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.iterations);
    let mut evals = Vec::new();
    let mut grad = FieldParams::zeros(state.field.cells());
    let mut reference: Option<f64> = None;
    let mut reference_acc = Vec::new();
    let mut over_threshold = 0usize;

    for it in 0..config.iterations {
        let in_warmup = it < config.warmup_iterations;
        let mode = if in_warmup { LossMode::Baseline } else { config.loss_mode };
        if !in_warmup && config.loss_mode.is_occupancy() && state.alpha_model != AlphaModel::Occupancy {
            convert_to_occupancy(&mut state.field, settings.delta());
            state.adam.reset_density_moments();
            state.alpha_model = AlphaModel::Occupancy;
        }

        let pixels = select_ray_batch(dataset, config.batch_rays, &mut state.rng, false)?;
        let rays = ray_targets(dataset, &pixels);
        grad.fill(0.0);
        let jitter_seed = derive_seed(derive_seed(config.seed, STREAM_JITTER), it as u64);
        let res = batch_loss_and_gradient(&state.field, &rays, mode, dataset.kind, &settings, &popts, jitter_seed, &mut grad);
        if !res.non_finite.is_empty() || !res.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                rays: res.non_finite,
            });
        }
        state.adam.adam_step(&mut state.field.params, &grad, state.learning_rate);
        if !state.field.params.all_finite() {
            return Err(Error::NonFiniteParameter { iteration: it });
        }
        state.iteration = it + 1;
        state.loss_stats.push(res.loss);

        if !in_warmup {
            match reference {
                None => {
                    reference_acc.push(res.loss);
                    if reference_acc.len() == REFERENCE_WINDOW {
                        reference = Some(reference_acc.iter().sum::<f64>() / REFERENCE_WINDOW as f64);
                    }
                }
                Some(r) if !state.lr_halved => {
                    let threshold = r + (DIVERGENCE_FACTOR - 1.0) * r.abs();
                    over_threshold = if res.loss > threshold { over_threshold + 1 } else { 0 };
                    if over_threshold >= DIVERGENCE_PATIENCE {
                        state.learning_rate *= 0.5;
                        state.lr_halved = true;
                    }
                }
                Some(_) => {}
            }
        }

        log.push(LogRow {
            iteration: it,
            loss: res.loss,
            psnr_train: batch_psnr(dataset, &rays, &res.predictions, settings.far),
            wall_ms: start.elapsed().as_millis(),
        });
        if config.eval_every > 0 && (it + 1) % config.eval_every == 0 && it + 1 < config.iterations {
            evals.push(EvalRow {
                iteration: it + 1,
                report: evaluate(&state, config, dataset)?,
            });
        }
        hook(&state)?;
    }
    if !dataset.test.is_empty() {
        evals.push(EvalRow {
            iteration: state.iteration,
            report: evaluate(&state, config, dataset)?,
        });
    }
    Ok(TrainOutcome { state, log, evals })
}
