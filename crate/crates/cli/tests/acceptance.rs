//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `BNRF_ACCEPTANCE=1,2,10` runs a subset; the default is all eleven. The
//! trend criteria (7-9) train 39 fields and take a few hours on one core.

use std::fmt::Write as _;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bnrf::data::{Dataset, RigKind, RigSpec, SceneSpec};
use bnrf::metrics::{depth_metrics, psnr, ssim, MetricReport};
use bnrf::optim::{train, TrainConfig};
use bnrf::oracle::SyntheticRay;
use bnrf::render::{composite, CompositeOptions, RenderMode};
use bnrf::uncertainty::LossMode;
use bnrf_cli::suites::{self, SuiteReport};

const TELESCOPE_RAYS: usize = 10_000;
const TELESCOPE_TOL: f64 = 1e-12;
const FD_TOL: f64 = 1e-4;
const EXACT_MOMENT_TOL: f64 = 0.01;
const LINEAR_MOMENT_TOL: f64 = 0.02;
const FROZEN_MOMENT_TOL: f64 = 0.01;
const BREAKDOWN_MIN_ERROR: f64 = 0.05;
const LOGNORMAL_TOL: f64 = 0.01;
const RGB_GAIN_DB: f64 = 0.5;
const ABSREL_SLACK: f64 = 0.02;
const FULL_DATA_SLACK_DB: f64 = 0.5;
const ABSREL_TOL: f64 = 1e-9;
const PSNR_TOL: f64 = 1e-12;

const TREND_SEEDS: [u64; 3] = [0, 1, 2];
const TREND_ITERATIONS: usize = 20_000;
const TREND_RUN_LIMIT: Duration = Duration::from_secs(600);
const SUITE_SEED: u64 = 0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    let _ = write!(o.detail, "; {:.2}s (limit {}s)", took.as_secs_f64(), limit.as_secs());
    o.pass &= took < limit;
    o
}

fn suite_outcome(r: anyhow::Result<SuiteReport>) -> Outcome {
    match r {
        Ok(r) => {
            let worst = r
                .checks
                .iter()
                .map(|c| format!("{} {:.3e}", c.name, c.value))
                .collect::<Vec<_>>()
                .join(", ");
            outcome(r.pass, worst)
        }
        Err(e) => outcome(false, format!("error: {e:#}")),
    }
}

fn telescoping() -> Outcome {
    let recipe = SyntheticRay {
        depth_range: (0.0, 3.0),
        ..SyntheticRay::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(SUITE_SEED);
    let mut worst = 0.0f64;
    for _ in 0..TELESCOPE_RAYS {
        let batch = recipe.build(&mut rng).expect("synthetic ray");
        let out = composite(&batch, RenderMode::Rgb, &CompositeOptions::default());
        let sum: f64 = out.per_sample_alpha.iter().sum();
        worst = worst.max((sum + out.final_t - 1.0).abs());
    }
    outcome(worst <= TELESCOPE_TOL, format!("max |sum alpha + T - 1| = {worst:.3e} over {TELESCOPE_RAYS} rays"))
}

fn gradients() -> Outcome {
    suite_outcome(suites::gradients(None, SUITE_SEED, Some(FD_TOL)))
}

fn exact_moments() -> Outcome {
    let r = (|| -> anyhow::Result<SuiteReport> {
        let batch = SyntheticRay::default().build(&mut ChaCha8Rng::seed_from_u64(SUITE_SEED))?;
        let mut checks = Vec::new();
        for c in 0..3 {
            let r = bnrf::oracle::mc_render_distribution(
                &batch,
                bnrf::oracle::DrawSpec::Color,
                RenderMode::Rgb,
                c,
                suites::MC_DRAWS,
                SUITE_SEED + c as u64,
            )?;
            checks.push((format!("channel {c} mean"), r.relative_mean_error));
            checks.push((format!("channel {c} variance"), r.relative_variance_error));
        }
        Ok(manual_report("color", checks, EXACT_MOMENT_TOL))
    })();
    suite_outcome(r)
}

fn manual_report(name: &str, checks: Vec<(String, f64)>, tol: f64) -> SuiteReport {
    let checks: Vec<suites::Check> = checks
        .into_iter()
        .map(|(n, v)| suites::Check {
            name: n,
            value: v,
            tolerance: tol,
            inverted: false,
            pass: v < tol,
            report: None,
        })
        .collect();
    SuiteReport {
        suite: name.into(),
        seed: SUITE_SEED,
        pass: checks.iter().all(|c| c.pass),
        checks,
    }
}

fn approximate_moments() -> Outcome {
    // The shared suite applies 2% to the linearised modes and 1% to the
    // frozen-T occupancy mode; only the color check (criterion 3) is dropped.
    let r = suites::moments(SUITE_SEED, None).map(|mut r| {
        r.checks.retain(|c| !c.name.starts_with("color"));
        for c in &r.checks {
            let tol = if c.name.starts_with("occupancy") { FROZEN_MOMENT_TOL } else { LINEAR_MOMENT_TOL };
            assert_eq!(c.tolerance, tol, "{}", c.name);
        }
        r.pass = r.checks.iter().all(|c| c.pass);
        r
    });
    suite_outcome(r)
}

fn breakdown() -> Outcome {
    suite_outcome(suites::breakdown(SUITE_SEED, Some(BREAKDOWN_MIN_ERROR)))
}

fn lognormal() -> Outcome {
    suite_outcome(suites::lognormal(SUITE_SEED, Some(LOGNORMAL_TOL)))
}

struct TrendRun {
    mode: LossMode,
    report: MetricReport,
    seconds: f64,
}

fn trend_config(mode: LossMode, seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: TREND_ITERATIONS,
        warmup_iterations: TREND_ITERATIONS / 10,
        batch_rays: 256,
        resolution: [32; 3],
        loss_mode: mode,
        seed,
        ..TrainConfig::default()
    }
}

fn trend_runs(rig: RigKind, train_count: usize, kind: RenderMode, modes: &[LossMode], log: &mut String) -> Result<Vec<TrendRun>, String> {
    let scene = SceneSpec::named("toy").map_err(|e| e.to_string())?;
    let dataset = Dataset::generate(&scene, &RigSpec::new(rig, train_count), kind).map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for &mode in modes {
        for seed in TREND_SEEDS {
            let start = Instant::now();
            let out = train(&trend_config(mode, seed), &dataset).map_err(|e| format!("{mode} seed {seed}: {e}"))?;
            let report = out.evals.last().map(|e| e.report.clone()).ok_or("no evaluation")?;
            let seconds = start.elapsed().as_secs_f64();
            let _ = writeln!(
                log,
                "    {rig:?} n={train_count} {mode} seed {seed}: psnr {:?} ssim {:?} depth {:?} ({seconds:.0}s)",
                report.psnr,
                report.ssim,
                report.depth.as_ref().map(|d| (d.absrel, d.delta1)),
            );
            eprint!("{}", log.lines().last().map(|l| format!("{l}\n")).unwrap_or_default());
            runs.push(TrendRun { mode, report, seconds });
        }
    }
    Ok(runs)
}

fn mean_of(runs: &[TrendRun], mode: LossMode, f: impl Fn(&MetricReport) -> Option<f64>) -> f64 {
    let v: Vec<f64> = runs.iter().filter(|r| r.mode == mode).filter_map(|r| f(&r.report)).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn slowest(runs: &[TrendRun]) -> f64 {
    runs.iter().map(|r| r.seconds).fold(0.0, f64::max)
}

fn rgb_trend(log: &mut String) -> Outcome {
    let modes = [LossMode::Baseline, LossMode::OccupancyRgb, LossMode::ColorDensity];
    match trend_runs(RigKind::OrbitUnobserved, 2, RenderMode::Rgb, &modes, log) {
        Ok(runs) => {
            let [base, occ, cd] = modes.map(|m| mean_of(&runs, m, |r| r.psnr));
            let slow = slowest(&runs);
            let pass = occ >= base + RGB_GAIN_DB && cd >= base && slow <= TREND_RUN_LIMIT.as_secs_f64();
            outcome(
                pass,
                format!(
                    "mean PSNR baseline {base:.3}, occupancy_rgb {occ:.3} (need >= {:.3}), color_density {cd:.3} (need >= {base:.3}); slowest run {slow:.0}s",
                    base + RGB_GAIN_DB
                ),
            )
        }
        Err(e) => outcome(false, e),
    }
}

fn depth_trend(log: &mut String) -> Outcome {
    let modes = [LossMode::Baseline, LossMode::DensityDepth, LossMode::OccupancyDepth];
    match trend_runs(RigKind::OrbitDepth, 8, RenderMode::Depth, &modes, log) {
        Ok(runs) => {
            let [base, dens, occ] = modes.map(|m| mean_of(&runs, m, |r| r.depth.as_ref().map(|d| d.absrel)));
            let [_, d1_dens, d1_occ] = modes.map(|m| mean_of(&runs, m, |r| r.depth.as_ref().map(|d| d.delta1)));
            let slow = slowest(&runs);
            let pass = occ <= dens && dens <= base + ABSREL_SLACK && d1_occ >= d1_dens && slow <= TREND_RUN_LIMIT.as_secs_f64();
            outcome(
                pass,
                format!(
                    "mean AbsRel occupancy {occ:.4} <= density {dens:.4} <= baseline {base:.4} + {ABSREL_SLACK}; delta<1.25 occupancy {d1_occ:.4} >= density {d1_dens:.4}; slowest run {slow:.0}s"
                ),
            )
        }
        Err(e) => outcome(false, e),
    }
}

fn full_data(log: &mut String) -> Outcome {
    let modes = [LossMode::Baseline, LossMode::OccupancyRgb];
    match trend_runs(RigKind::OrbitUnobserved, 36, RenderMode::Rgb, &modes, log) {
        Ok(runs) => {
            let [base, occ] = modes.map(|m| mean_of(&runs, m, |r| r.psnr));
            outcome(
                occ >= base - FULL_DATA_SLACK_DB,
                format!("mean PSNR baseline {base:.3}, occupancy_rgb {occ:.3} (need >= {:.3})", base - FULL_DATA_SLACK_DB),
            )
        }
        Err(e) => outcome(false, e),
    }
}

fn metric_units() -> Outcome {
    let mut failures = Vec::new();
    // 0.1^2 rounds to 0.010000000000000002, so "exactly" means to rounding.
    let p = psnr(&[0.1; 100], &[0.0; 100]).unwrap();
    if (p - 20.0).abs() > PSNR_TOL {
        failures.push(format!("PSNR(MSE=0.01) = {p}"));
    }
    let img: Vec<f64> = (0..16 * 16).map(|i| (i as f64 * 0.37).sin().abs()).collect();
    let s = ssim(&img, &img, 16, 16, 1).unwrap();
    if s != 1.0 {
        failures.push(format!("SSIM(identical) = {s}"));
    }
    let gt: Vec<f64> = (1..=50).map(|i| i as f64 * 0.1).collect();
    let pred: Vec<f64> = gt.iter().map(|g| 1.1 * g).collect();
    let m = depth_metrics(&pred, &gt, None).unwrap();
    if (m.absrel - 0.1).abs() > ABSREL_TOL {
        failures.push(format!("AbsRel(1.1 gt) = {}", m.absrel));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SUITE_SEED);
    for _ in 0..1000 {
        let g: f64 = rng.random_range(0.1..10.0);
        let p: f64 = g * rng.random_range(0.2..5.0);
        let m = depth_metrics(&[p], &[g], None).unwrap();
        if !(m.delta1 <= m.delta2 && m.delta2 <= m.delta3) {
            failures.push(format!("delta thresholds not nested at pred {p}, gt {g}"));
            break;
        }
    }
    let detail = if failures.is_empty() { "PSNR, SSIM, AbsRel and delta nesting hold".into() } else { failures.join("; ") };
    outcome(failures.is_empty(), detail)
}

fn determinism() -> Outcome {
    let run = || -> Result<Vec<u8>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let bin = env!("CARGO_BIN_EXE_bnrf");
        let data = dir.path().join("data");
        let status = Command::new(bin)
            .args(["gen-data", "--rig", "orbit_unobserved", "--out"])
            .arg(&data)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        let config = dir.path().join("run.toml");
        std::fs::write(&config, "resolution = 12\neval-every = 50\n").map_err(|e| e.to_string())?;
        let out = dir.path().join("run");
        let status = Command::new(bin)
            .arg("--config")
            .arg(&config)
            .args(["train", "--loss-mode", "occupancy_rgb", "--iterations", "150", "--batch-rays", "64", "--n-samples", "24", "--seed", "5", "--dataset"])
            .arg(&data)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        std::fs::read(out.join("eval_metrics.csv")).map_err(|e| e.to_string())
    };
    match (run(), run()) {
        (Ok(a), Ok(b)) => {
            let rows = String::from_utf8_lossy(&a).lines().count().saturating_sub(1);
            outcome(a == b && rows > 0, format!("eval_metrics.csv identical: {} ({rows} rows)", a == b))
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

fn main() -> ExitCode {
    let selected: Option<Vec<usize>> = std::env::var("BNRF_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |k: usize| selected.as_ref().is_none_or(|s| s.contains(&k));
    let mut trend_log = String::new();

    let criteria: Vec<(usize, &str, Box<dyn FnOnce(&mut String) -> Outcome>)> = vec![
        (1, "telescoping identity", Box::new(|_| timed(Duration::from_secs(1), telescoping))),
        (2, "gradient oracle", Box::new(|_| timed(Duration::from_secs(30), gradients))),
        (3, "moment oracle, exact case", Box::new(|_| timed(Duration::from_secs(60), exact_moments))),
        (4, "moment oracle, approximation regime", Box::new(|_| timed(Duration::from_secs(120), approximate_moments))),
        (5, "documented breakdown", Box::new(|_| timed(Duration::from_secs(60), breakdown))),
        (6, "lognormal transmittance", Box::new(|_| timed(Duration::from_secs(60), lognormal))),
        (10, "metric unit suite", Box::new(|_| timed(Duration::from_secs(5), metric_units))),
        (11, "determinism", Box::new(|_| determinism())),
        (7, "rgb sparse-view trend", Box::new(rgb_trend)),
        (8, "depth sparse-view trend", Box::new(depth_trend)),
        (9, "full-data regression guard", Box::new(full_data)),
    ];

    let mut lines = Vec::new();
    for (k, name, run) in criteria {
        if !wanted(k) {
            continue;
        }
        let o = run(&mut trend_log);
        let line = format!("criterion {k:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        println!("{line}");
        lines.push((k, o.pass, line));
    }
    lines.sort_by_key(|l| l.0);
    println!("\nsummary");
    for (_, _, line) in &lines {
        println!("  {line}");
    }
    if !trend_log.is_empty() {
        println!("trend runs\n{trend_log}");
    }
    let failed = lines.iter().filter(|l| !l.1).count();
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
