use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use bnrf::data::{
    load_dataset, read_png, read_raw_f32, save_dataset, write_image_pair, write_raw_f32, Dataset, PoseFile, RigKind,
    RigSpec, SceneSpec,
};
use bnrf::field::{DensityActivation, UncertainField};
use bnrf::metrics::MetricReport;
use bnrf::optim::{average_reports, ray_settings, score_view, train_with_hook, TrainConfig, TrainState};
use bnrf::pipeline::{render_view, ViewOptions};
use bnrf::render::{AlphaModel, RenderMode};
use bnrf::uncertainty::LossMode;

use crate::config::Settings;
use crate::suites;

/// Exit status 2 for bad input, 1 for failed checks or runtime faults.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<bnrf::Error> for Failure {
    fn from(e: bnrf::Error) -> Self {
        match e {
            bnrf::Error::NonFiniteLoss { .. } | bnrf::Error::NonFiniteParameter { .. } | bnrf::Error::UndefinedMetric(_) => {
                Failure::Runtime(e.into())
            }
            other => Failure::Usage(other.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type CmdResult = Result<ExitCode, Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

pub fn report(f: Failure) -> ExitCode {
    match f {
        Failure::Usage(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Failure::Runtime(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn require<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T, Failure> {
    value.as_ref().ok_or_else(|| usage(format!("missing required flag --{flag}")))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Content hash of the inputs: every file's blob hash (git style, keyed by
/// relative path) plus the config echo.
fn input_hash(dataset: Option<&Path>, config: &serde_json::Value) -> std::io::Result<String> {
    let mut listing = String::new();
    if let Some(dir) = dataset {
        let mut files = Vec::new();
        files_under(dir, &mut files)?;
        for f in files {
            let bytes = fs::read(&f)?;
            let mut h = Sha256::new();
            h.update(format!("blob {}\0", bytes.len()).as_bytes());
            h.update(&bytes);
            let rel = f.strip_prefix(dir).unwrap_or(&f);
            listing += &format!("{} {}\n", hex(&h.finalize()), rel.display());
        }
    }
    listing += &config.to_string();
    Ok(hex(&Sha256::digest(listing.as_bytes())))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub input_hash: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<String>,
}

fn write_manifest(out: &Path, command: &str, config: serde_json::Value, dataset: Option<&Path>, seed: u64, started: u64, outputs: Vec<String>) -> Result<(), Failure> {
    let manifest = RunManifest {
        command: command.into(),
        input_hash: input_hash(dataset, &config)?,
        config,
        seed,
        started_unix: started,
        finished_unix: unix_now(),
        outputs,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn gen_data(s: &Settings) -> CmdResult {
    let started = unix_now();
    let rig: RigKind = s.rig.as_deref().unwrap_or("orbit_unobserved").parse()?;
    let train_count = s.train_count.unwrap_or(match rig {
        RigKind::OrbitUnobserved => 2,
        RigKind::ForwardObserved | RigKind::OrbitDepth => 8,
    });
    if train_count == 0 {
        return Err(usage("--train-count must be at least 1"));
    }
    let out = require(&s.out, "out")?;
    let mut spec = RigSpec::new(rig, train_count);
    spec.seed = s.seed();
    spec.split = s.split.unwrap_or_default();
    spec.test_count = s.test_count;
    let scene = SceneSpec::named(s.scene.as_deref().unwrap_or("toy"))?;
    let kind = match rig {
        RigKind::OrbitDepth => RenderMode::Depth,
        _ => RenderMode::Rgb,
    };
    let dataset = Dataset::generate(&scene, &spec, kind)?;
    save_dataset(out, &dataset)?;
    fs::write(out.join("rig.json"), serde_json::to_string_pretty(&spec)?)?;
    let config = serde_json::json!({ "rig": spec, "scene": scene.name, "kind": kind });
    let outputs = vec!["scene.json".into(), "poses.json".into(), "rig.json".into(), "train/".into(), "test/".into()];
    write_manifest(out, "gen-data", config, None, s.seed(), started, outputs)?;
    println!(
        "wrote {} train and {} test {:?} views of `{}` to {}",
        dataset.train.len(),
        dataset.test.len(),
        kind,
        scene.name,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// JSON sidecar next to every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub iteration: usize,
    pub seed: u64,
    pub alpha_model: AlphaModel,
    pub density_activation: DensityActivation,
    pub kind: RenderMode,
    pub dataset: PathBuf,
    pub scene: String,
    pub train_count: usize,
    pub image_size: [u32; 2],
}

fn write_checkpoint(stem: &Path, state: &TrainState, meta: &CheckpointMeta) -> Result<(), Failure> {
    let file = fs::File::create(stem.with_extension("bnrf"))?;
    state.field.write_checkpoint(std::io::BufWriter::new(file))?;
    fs::write(stem.with_extension("json"), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

fn load_dataset_arg(dir: &Path) -> Result<Dataset, Failure> {
    if !dir.join("poses.json").is_file() {
        return Err(usage(format!("dataset {} not found (no poses.json)", dir.display())));
    }
    Ok(load_dataset(dir)?)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| x.to_string())
}

pub const METRIC_HEADER: &str =
    "PSNR,SSIM,LPIPS,delta<1.25,delta<1.25^2,delta<1.25^3,AbsRel,RMSE(log),log10,n_valid_pixels";

/// Metric columns in table order; LPIPS is never computed.
pub fn metric_columns(r: &MetricReport) -> String {
    let d = r.depth.as_ref();
    [
        opt(r.psnr),
        opt(r.ssim),
        "n/a".into(),
        opt(d.map(|m| m.delta1)),
        opt(d.map(|m| m.delta2)),
        opt(d.map(|m| m.delta3)),
        opt(d.map(|m| m.absrel)),
        opt(d.map(|m| m.rmse_log)),
        opt(d.map(|m| m.log10_err)),
        d.map_or_else(|| "n/a".into(), |m| m.n_valid_pixels.to_string()),
    ]
    .join(",")
}

pub fn train(s: &Settings) -> CmdResult {
    let started = unix_now();
    let dataset_dir = require(&s.dataset, "dataset")?;
    let out = require(&s.out, "out")?.clone();
    let config = s.train_config().map_err(Failure::Usage)?;
    let dataset = load_dataset_arg(dataset_dir)?;
    config.loss_mode.check_target(dataset.kind)?;
    config.validate()?;
    fs::create_dir_all(&out)?;

    let cam = &dataset.train.first().ok_or_else(|| usage("dataset has no training images"))?.camera;
    let meta_for = |state: &TrainState| CheckpointMeta {
        config: config.clone(),
        iteration: state.iteration,
        seed: config.seed,
        alpha_model: state.alpha_model,
        density_activation: state.field.density_activation,
        kind: dataset.kind,
        dataset: dataset_dir.clone(),
        scene: dataset.scene.name.clone(),
        train_count: dataset.train.len(),
        image_size: [cam.width, cam.height],
    };
    let every = s.checkpoint_every.unwrap_or(0);
    let mut outputs = Vec::new();
    let mut hook = |state: &TrainState| -> bnrf::Result<()> {
        if every > 0 && state.iteration.is_multiple_of(every) && state.iteration < config.iterations {
            let dir = out.join("checkpoints");
            fs::create_dir_all(&dir)?;
            let stem = dir.join(format!("iter_{:06}", state.iteration));
            let file = fs::File::create(stem.with_extension("bnrf"))?;
            state.field.write_checkpoint(std::io::BufWriter::new(file))?;
            fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&meta_for(state))?)?;
        }
        Ok(())
    };
    let outcome = train_with_hook(&config, &dataset, &mut hook)?;
    if every > 0 {
        for it in (every..config.iterations).step_by(every) {
            outputs.push(format!("checkpoints/iter_{it:06}.bnrf"));
        }
    }

    write_checkpoint(&out.join("field"), &outcome.state, &meta_for(&outcome.state))?;
    let mut log = String::from("iteration,loss,psnr_train,wall_ms\n");
    for r in &outcome.log {
        log += &format!("{},{},{},{}\n", r.iteration, r.loss, r.psnr_train, r.wall_ms);
    }
    fs::write(out.join("train_log.csv"), log)?;
    let mut metrics = format!("iteration,{METRIC_HEADER}\n");
    for e in &outcome.evals {
        metrics += &format!("{},{}\n", e.iteration, metric_columns(&e.report));
    }
    fs::write(out.join("eval_metrics.csv"), metrics)?;
    outputs.extend(["field.bnrf", "field.json", "train_log.csv", "eval_metrics.csv"].map(String::from));
    let config_echo = serde_json::to_value(&config)?;
    write_manifest(&out, "train", config_echo, Some(dataset_dir), config.seed, started, outputs)?;

    let last = outcome.log.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained {} for {} iterations: final loss {last}{}",
        config.loss_mode,
        outcome.state.iteration,
        if outcome.state.lr_halved { " (learning rate halved once)" } else { "" }
    );
    if let Some(e) = outcome.evals.last() {
        println!("test metrics: {METRIC_HEADER}\n              {}", metric_columns(&e.report));
    }
    Ok(ExitCode::SUCCESS)
}

/// Test-split file stems, in the order `load_dataset` returns the views.
fn test_stems(dataset_dir: &Path) -> Result<(Vec<String>, PoseFile), Failure> {
    let path = dataset_dir.join("poses.json");
    let poses = PoseFile::parse(&fs::read_to_string(&path)?, &path)?;
    let stems = poses
        .frames
        .iter()
        .filter(|f| f.is_test())
        .map(|f| {
            Path::new(&f.file_path)
                .file_name()
                .map_or_else(|| f.file_path.clone(), |n| n.to_string_lossy().into_owned())
        })
        .collect();
    Ok((stems, poses))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RenderMeta {
    pub scene: String,
    pub mode: LossMode,
    pub kind: RenderMode,
    pub train_count: usize,
    pub seed: u64,
    pub dataset: PathBuf,
    pub run: PathBuf,
    pub views: Vec<String>,
}

pub fn render(s: &Settings, run: &Path) -> CmdResult {
    let meta_path = run.join("field.json");
    let meta: CheckpointMeta = serde_json::from_str(
        &fs::read_to_string(&meta_path).map_err(|e| usage(format!("{}: {e}", meta_path.display())))?,
    )
    .map_err(|e| usage(format!("{}: {e}", meta_path.display())))?;
    let ckpt = run.join("field.bnrf");
    let file = fs::File::open(&ckpt).map_err(|e| usage(format!("{}: {e}", ckpt.display())))?;
    let mut field = UncertainField::read_checkpoint(std::io::BufReader::new(file))?;
    field.density_activation = meta.density_activation;

    let dataset_dir = s.dataset.clone().unwrap_or_else(|| meta.dataset.clone());
    let dataset = load_dataset_arg(&dataset_dir)?;
    let (stems, poses) = test_stems(&dataset_dir)?;
    let out = require(&s.out, "out")?;
    fs::create_dir_all(out)?;
    if [poses.width, poses.height] != meta.image_size {
        eprintln!(
            "warning: dataset images are {}x{}, the run was trained on {}x{}",
            poses.width, poses.height, meta.image_size[0], meta.image_size[1]
        );
    }
    let mode = match &s.loss_mode {
        Some(m) => m.parse()?,
        None => meta.config.loss_mode,
    };
    let mut config = meta.config.clone();
    config.n_samples = s.n_samples.unwrap_or(config.n_samples);
    let settings = ray_settings(&config, &dataset)?;
    let opts = ViewOptions {
        mode,
        kind: dataset.kind,
        alpha_model: meta.alpha_model,
        background: config.background_color,
        normalized_depth: s.normalized_depth.unwrap_or(config.normalized_depth),
        early_termination: config.early_termination,
    };
    for (stem, img) in stems.iter().zip(&dataset.test) {
        let view = render_view(&field, &img.camera, &settings, &opts);
        write_image_pair(&out.join(stem), view.width, view.height, view.kind, &view.value, poses.depth_scale)?;
        let var_stem = out.join(format!("{stem}_var"));
        write_raw_f32(&var_stem.with_extension("f32"), &view.variance)?;
        let peak = view.variance.iter().cloned().fold(0.0, f64::max);
        let preview: Vec<f64> = view.variance.iter().map(|v| if peak > 0.0 { v / peak } else { 0.0 }).collect();
        match view.kind {
            RenderMode::Rgb => bnrf::data::write_rgb_png(&var_stem.with_extension("png"), view.width, view.height, &preview)?,
            RenderMode::Depth => {
                bnrf::data::write_gray16_png(&var_stem.with_extension("png"), view.width, view.height, &preview, 1.0 / 65535.0)?
            }
        }
    }
    let render_meta = RenderMeta {
        scene: meta.scene.clone(),
        mode,
        kind: dataset.kind,
        train_count: meta.train_count,
        seed: meta.seed,
        dataset: dataset_dir.clone(),
        run: run.to_path_buf(),
        views: stems.clone(),
    };
    fs::write(out.join("render.json"), serde_json::to_string_pretty(&render_meta)?)?;
    println!("rendered {} test views with {mode} to {}", stems.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn eval(s: &Settings, renders: &Path) -> CmdResult {
    let meta: Option<RenderMeta> = fs::read_to_string(renders.join("render.json"))
        .ok()
        .map(|t| serde_json::from_str(&t))
        .transpose()?;
    let dataset_dir = s
        .dataset
        .clone()
        .or_else(|| meta.as_ref().map(|m| m.dataset.clone()))
        .ok_or_else(|| usage("missing required flag --dataset"))?;
    let dataset = load_dataset_arg(&dataset_dir)?;
    let (stems, poses) = test_stems(&dataset_dir)?;

    let mut missing = Vec::new();
    let mut sources = Vec::new();
    for stem in &stems {
        let raw = renders.join(format!("{stem}.f32"));
        let png = renders.join(format!("{stem}.png"));
        if raw.is_file() {
            sources.push(raw);
        } else if png.is_file() {
            sources.push(png);
        } else {
            missing.push(raw.display().to_string());
        }
    }
    if !missing.is_empty() {
        return Err(usage(format!("missing renders: {}", missing.join(", "))));
    }
    let mut reports = Vec::new();
    for (src, gt) in sources.iter().zip(&dataset.test) {
        let pred = if src.extension().is_some_and(|e| e == "f32") {
            read_raw_f32(src)?
        } else {
            read_png(src, dataset.kind, poses.depth_scale)?
        };
        let report = score_view(&pred, gt).map_err(|e| Failure::Usage(anyhow::Error::from(e).context(src.display().to_string())))?;
        reports.push(report);
    }
    let avg = average_reports(&reports);

    let mode = s
        .loss_mode
        .clone()
        .or_else(|| meta.as_ref().map(|m| m.mode.to_string()))
        .unwrap_or_else(|| "n/a".into());
    let seed = s
        .seed
        .or_else(|| meta.as_ref().map(|m| m.seed))
        .map_or_else(|| "n/a".into(), |v| v.to_string());
    let train_count = meta.as_ref().map_or(dataset.train.len(), |m| m.train_count);
    let row = format!("{},{mode},{train_count},{seed},{}", dataset.scene.name, metric_columns(&avg));

    let csv = s.out.clone().unwrap_or_else(|| renders.join("metrics.csv"));
    let fresh = !csv.is_file();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv)
        .with_context(|| format!("opening {}", csv.display()))
        .map_err(Failure::Runtime)?;
    if fresh {
        writeln!(f, "scene,mode,train_count,seed,{METRIC_HEADER}")?;
    }
    writeln!(f, "{row}")?;
    println!("scene,mode,train_count,seed,{METRIC_HEADER}\n{row}");
    Ok(ExitCode::SUCCESS)
}

pub fn oracle(s: &Settings, positional: Option<&str>) -> CmdResult {
    let suite = positional
        .or(s.suite.as_deref())
        .ok_or_else(|| usage(format!("name a suite: {}", suites::SUITES.join(", "))))?;
    let mode = match s.loss_mode.as_deref() {
        None | Some("all") => None,
        Some(m) => Some(m.parse::<LossMode>()?),
    };
    let seed = s.seed();
    let report = match suite {
        "moments" => suites::moments(seed, s.tolerance),
        "gradients" => suites::gradients(mode, seed, s.tolerance),
        "lognormal" => suites::lognormal(seed, s.tolerance),
        "breakdown" => suites::breakdown(seed, s.tolerance),
        other => {
            return Err(usage(format!(
                "unknown suite `{other}` (expected one of {})",
                suites::SUITES.join(", ")
            )))
        }
    }
    .map_err(Failure::Runtime)?;
    print!("{}", report.table());
    let json = serde_json::to_string_pretty(&report)?;
    match &s.out {
        Some(path) => fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
