use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::Vector3;
use serde::Serialize;

use rrgs_core::config::{Grouping, RunConfig};
use rrgs_core::grouping::{extract_groups, group_size_histogram, knn_groups, write_groups_csv};
use rrgs_core::io;
use rrgs_core::losses::{arap_loss, Neighborhood, RegularizerMode};
use rrgs_core::rasterizer::{render as render_frame, RenderOptions};
use rrgs_core::scenes::{export_scene, generate_scene, MotionKind, Scene, SceneSpec};
use rrgs_core::trainer::{self, IterationLog, TrainMetrics};
use rrgs_core::verify::{run_verify, Fault};

/// Marks failures caused by unreadable or invalid input files (exit code 2).
#[derive(Debug)]
struct BadInput(String);

impl std::fmt::Display for BadInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BadInput {}

pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_BAD_INPUT: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<BadInput>().is_some() {
        EXIT_BAD_INPUT
    } else {
        EXIT_CHECK_FAILED
    }
}

/// Applies `RRGS_THREADS` to the global worker pool.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("RRGS_THREADS") else { return Ok(()) };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| BadInput(format!("RRGS_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

/// Reads the config, applies `RRGS_SEED`, and generates the scene.
fn load(path: &Path) -> Result<(RunConfig, Scene)> {
    let mut cfg = RunConfig::load(path).map_err(|e| BadInput(format!("cannot load config {}: {e}", path.display())))?;
    if let Ok(v) = std::env::var("RRGS_SEED") {
        cfg.seed = v.parse().map_err(|_| BadInput(format!("RRGS_SEED must be an unsigned integer, got {v:?}")))?;
    }
    let spec = cfg.scene_spec().map_err(|e| BadInput(format!("cannot load scene: {e}")))?;
    let scene = generate_scene(&spec)?;
    Ok((cfg, scene))
}

/// Config echo with the scene inlined, enough to reproduce the run.
fn write_config_echo(cfg: &RunConfig, scene: &SceneSpec, dir: &Path) -> Result<()> {
    let mut echo = cfg.clone();
    echo.scene = rrgs_core::config::SceneSource::Inline(scene.clone());
    serde_json::to_writer_pretty(io::create(&dir.join("config.json"))?, &echo)?;
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = io::create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct GroupSummary {
    timestep: usize,
    tau: f64,
    pixel_stride: usize,
    groups: usize,
    /// Group size → number of pixels with that many members.
    histogram: std::collections::BTreeMap<usize, usize>,
}

pub fn render(config: &Path) -> Result<ExitCode> {
    let (cfg, scene) = load(config)?;
    let k = cfg.render_timestep;
    if k >= scene.spec.timesteps {
        return Err(BadInput(format!("render_timestep {k} beyond the scene's {} timesteps", scene.spec.timesteps)).into());
    }
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    write_config_echo(&cfg, &scene.spec, dir)?;
    let opts = RenderOptions { background: scene.spec.background, retain_fragments: true };
    let out = render_frame(&scene.frame(k), &scene.cameras[k], &opts)?;
    io::write_png(&out.image, &dir.join("images").join("render.png"))?;
    io::write_raw_f32(&out.image, File::create(dir.join("render.f32"))?)?;
    let groups = extract_groups(&out, cfg.tau, cfg.pixel_stride)?;
    write_groups_csv(&groups, File::create(dir.join("groups.csv"))?)?;
    let summary =
        GroupSummary { timestep: k, tau: cfg.tau, pixel_stride: cfg.pixel_stride, groups: groups.len(), histogram: group_size_histogram(&groups) };
    write_json(&summary, &dir.join("group_histogram.json"))?;
    println!("rendered timestep {k} ({}x{}), {} ray groups -> {}", out.width(), out.height(), groups.len(), dir.display());
    Ok(ExitCode::SUCCESS)
}

const LOSS_COLUMNS: [&str; 12] =
    ["iteration", "timestep", "partner_time", "total", "l1", "dssim", "mcr", "sr", "arap", "mcr_count", "sr_count", "arap_count"];

fn loss_row(l: &IterationLog) -> Vec<String> {
    let t = &l.report.terms;
    vec![
        l.iteration.to_string(),
        l.timestep.to_string(),
        l.partner_time.to_string(),
        l.report.total.to_string(),
        t.l1.to_string(),
        t.dssim.to_string(),
        t.mcr.to_string(),
        t.sr.to_string(),
        t.arap.to_string(),
        t.mcr_count.to_string(),
        t.sr_count.to_string(),
        t.arap_count.to_string(),
    ]
}

/// Trains one configuration and writes every output into `cfg.output_dir`.
fn run_training(cfg: &RunConfig, scene: &Scene, save_images: bool) -> Result<TrainMetrics> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    write_config_echo(cfg, &scene.spec, dir)?;
    let mut csv = csv::Writer::from_writer(io::create(&dir.join("losses.csv"))?);
    csv.write_record(LOSS_COLUMNS)?;
    let mut jsonl = io::create(&dir.join("losses.jsonl"))?;
    let mut sink_error = None;
    let result = trainer::train(cfg, scene, |l| {
        let r = csv
            .write_record(loss_row(l))
            .map_err(anyhow::Error::from)
            .and_then(|_| serde_json::to_writer(&mut jsonl, l).map_err(anyhow::Error::from))
            .and_then(|_| writeln!(jsonl).map_err(anyhow::Error::from));
        if let Err(e) = r {
            sink_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = sink_error {
        return Err(e.context("writing loss logs"));
    }
    csv.flush()?;
    jsonl.flush()?;
    write_json(&result.metrics, &dir.join("metrics.json"))?;
    io::write_trajectories_csv(&result.trajectories, io::create(&dir.join("trajectories.csv"))?)?;
    result.checkpoint.write(io::create(&dir.join("checkpoint.rrgs"))?)?;
    if save_images {
        for (k, img) in result.renders.iter().enumerate() {
            io::write_png(img, &dir.join("images").join(format!("frame_{k:03}.png")))?;
        }
    }
    Ok(result.metrics)
}

fn describe(m: &TrainMetrics) -> String {
    format!(
        "{} {}/{}: psnr train {:.2} dB, held-out {}, endpoint error {:.5}, direction variance {:.6}",
        m.scene,
        m.grouping.name(),
        m.regularizer.name(),
        m.psnr_train,
        m.psnr_heldout.map_or("n/a".into(), |p| format!("{p:.2} dB")),
        m.trajectory.mean_endpoint_error,
        m.trajectory.direction_variance,
    )
}

pub fn train(config: &Path) -> Result<ExitCode> {
    let (cfg, scene) = load(config)?;
    let metrics = run_training(&cfg, &scene, cfg.save_images)?;
    println!("{}", describe(&metrics));
    if metrics.diverged {
        eprintln!("training diverged after {} iterations; last finite state saved to {}", metrics.iterations, cfg.output_dir.display());
        return Ok(ExitCode::from(EXIT_DIVERGED));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn verify(fault: Option<&str>, report: Option<&Path>) -> Result<ExitCode> {
    let fault = fault.map(|f| f.parse::<Fault>().map_err(|e| BadInput(e.to_string()))).transpose()?;
    let result = run_verify(fault);
    for c in &result.checks {
        println!(
            "{} {:<22} compared {:>6}  max abs {:.3e}  max rel {:.3e}  (rel tol {:e}, abs floor {:e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.compared,
            c.max_abs_error,
            c.max_rel_error,
            c.rel_tolerance,
            c.abs_floor
        );
    }
    if let Some(path) = report {
        write_json(&result, path)?;
    }
    if result.passed {
        println!("all {} checks passed", result.checks.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failed checks: {}", result.failed_checks().join(", "));
        Ok(ExitCode::from(EXIT_CHECK_FAILED))
    }
}

pub const ABLATION_GROUPINGS: [Grouping; 2] = [Grouping::Ray, Grouping::Knn];
pub const ABLATION_MODES: [RegularizerMode; 3] = [RegularizerMode::Arap, RegularizerMode::Full, RegularizerMode::None];

#[derive(Serialize)]
struct AblationCell {
    psnr_train: f64,
    psnr_heldout: Option<f64>,
    ssim_heldout: Option<f64>,
    mean_endpoint_error: f64,
    direction_variance: f64,
    diverged: bool,
}

#[derive(Serialize)]
struct AblationRow {
    regularizer: &'static str,
    ray: AblationCell,
    knn: AblationCell,
}

#[derive(Serialize)]
struct AblationTable {
    scene: String,
    columns: [&'static str; 2],
    rows: Vec<AblationRow>,
    /// Largest ARAP loss over consecutive ground-truth frames of a rigidly
    /// translating copy of the scene, per grouping.
    arap_rigid_translation: GroupingValues,
}

#[derive(Serialize)]
struct GroupingValues {
    ray: f64,
    knn: f64,
}

/// ARAP on ground truth of a rigidly translating scene; neighbourhoods are
/// built per frame exactly as during training.
fn arap_on_rigid_translation(cfg: &RunConfig, spec: &SceneSpec, grouping: Grouping) -> Result<f64> {
    let rigid = SceneSpec { motion: MotionKind::RigidTranslation, name: format!("{}-rigid-translation", spec.name), ..spec.clone() };
    let scene = generate_scene(&rigid)?;
    let opts = RenderOptions { background: rigid.background, retain_fragments: true };
    let mut worst: f64 = 0.0;
    for k in 0..rigid.timesteps.saturating_sub(1) {
        let (a, b): (&[Vector3<f64>], &[Vector3<f64>]) = (&scene.trajectories[k], &scene.trajectories[k + 1]);
        let hoods: Vec<Neighborhood> = match grouping {
            Grouping::Ray => {
                let out = render_frame(&scene.frame(k), &scene.cameras[k], &opts)?;
                extract_groups(&out, cfg.tau, cfg.pixel_stride)?.into_iter().map(|g| Neighborhood::Clique(g.members)).collect()
            }
            Grouping::Knn => knn_groups(a, cfg.k)?
                .neighbors
                .into_iter()
                .enumerate()
                .map(|(anchor, neighbors)| Neighborhood::Anchored { anchor, neighbors })
                .collect(),
        };
        worst = worst.max(arap_loss(&hoods, a, b).value);
    }
    Ok(worst)
}

pub fn ablate(config: &Path) -> Result<ExitCode> {
    let (cfg, scene) = load(config)?;
    let base = cfg.output_dir.clone();
    let mut cells = Vec::new();
    for mode in ABLATION_MODES {
        for grouping in ABLATION_GROUPINGS {
            let run = RunConfig {
                grouping,
                regularizer: mode,
                output_dir: base.join("runs").join(format!("{}_{}", grouping.name(), mode.name())),
                ..cfg.clone()
            };
            let m = run_training(&run, &scene, false).with_context(|| format!("{}/{} run", grouping.name(), mode.name()))?;
            println!("{}", describe(&m));
            cells.push(AblationCell {
                psnr_train: m.psnr_train,
                psnr_heldout: m.psnr_heldout,
                ssim_heldout: m.ssim_heldout,
                mean_endpoint_error: m.trajectory.mean_endpoint_error,
                direction_variance: m.trajectory.direction_variance,
                diverged: m.diverged,
            });
        }
    }
    let mut cells = cells.into_iter();
    let mut rows = Vec::new();
    for mode in ABLATION_MODES {
        let (Some(ray), Some(knn)) = (cells.next(), cells.next()) else { bail!("ablation grid incomplete") };
        rows.push(AblationRow { regularizer: mode.name(), ray, knn });
    }
    let exact = GroupingValues {
        ray: arap_on_rigid_translation(&cfg, &scene.spec, Grouping::Ray)?,
        knn: arap_on_rigid_translation(&cfg, &scene.spec, Grouping::Knn)?,
    };
    println!("ARAP on rigid translation ground truth: ray {:.3e}, knn {:.3e}", exact.ray, exact.knn);
    let table = AblationTable { scene: scene.spec.name.clone(), columns: ["ray", "knn"], rows, arap_rigid_translation: exact };
    write_config_echo(&cfg, &scene.spec, &base)?;
    let path = base.join("ablation.json");
    write_json(&table, &path)?;
    println!("table -> {}", path.display());
    if table.rows.iter().any(|r| r.ray.diverged || r.knn.diverged) {
        return Err(anyhow!("at least one ablation run diverged"));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn scene(config: &Path, out: &Path) -> Result<ExitCode> {
    let (_, scene) = load(config)?;
    export_scene(&scene, out)?;
    let dir: PathBuf = out.to_path_buf();
    println!("scene {} ({} Gaussians, {} timesteps) -> {}", scene.spec.name, scene.canonical.len(), scene.spec.timesteps, dir.display());
    Ok(ExitCode::SUCCESS)
}
