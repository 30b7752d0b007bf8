//! Gradient-descent fitting of a motion model to a synthetic scene's target
//! images, with the grouping regularizers switched per run configuration.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Grouping, MotionKindConfig, RunConfig};
use crate::error::{Error, Result};
use crate::grouping::{extract_groups, knn_groups};
use crate::losses::{
    arap_loss, mcr_loss, photometric_loss, sample_timestep_pair, sr_loss, total_objective, LossReport, LossWeights, Neighborhood,
    RegularizerMode, TermResult,
};
use crate::metrics::{mean_psnr, ssim};
use crate::motion::{evaluate_frame, frame_backward, position_backward, BasisTrajectory, Checkpoint, DeformationTable, MotionModel};
use crate::rasterizer::{render, render_backward, Image, RenderOptions};
use crate::scenes::{trajectory_error, Scene, TrajectoryError};

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub timestep: usize,
    /// Partner time in frame units.
    pub partner_time: f64,
    pub n_groups: usize,
    pub report: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub scene: String,
    pub regularizer: RegularizerMode,
    pub grouping: Grouping,
    pub iterations: usize,
    pub diverged: bool,
    pub final_loss: f64,
    /// Pooled-MSE PSNR over training timesteps.
    pub psnr_train: f64,
    /// Pooled-MSE PSNR over held-out timesteps (`None` without holdout).
    pub psnr_heldout: Option<f64>,
    pub ssim_heldout: Option<f64>,
    pub held_out_timesteps: Vec<usize>,
    pub trajectory: TrajectoryError,
    pub effective_weights: LossWeights,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub metrics: TrainMetrics,
    pub log: Vec<IterationLog>,
    /// Last finite state.
    pub checkpoint: Checkpoint,
    /// Estimated positions, `[timestep][gaussian]`.
    pub trajectories: Vec<Vec<Vector3<f64>>>,
    /// Final renders, one per timestep.
    pub renders: Vec<Image>,
}

/// Parameter magnitude treated as divergence.
const DIVERGENCE_BOUND: f64 = 1e100;

/// Untrained motion model for the scene; table keys sit at the training timesteps.
pub fn initial_model(cfg: &RunConfig, scene: &Scene) -> Result<MotionModel> {
    let n = scene.canonical.len();
    Ok(match cfg.motion.kind {
        MotionKindConfig::Table => {
            let keys = training_timesteps(cfg, scene).into_iter().map(|k| scene.spec.time(k)).collect();
            MotionModel::Table(DeformationTable::zeros(keys, n, cfg.motion.interpolation)?)
        }
        MotionKindConfig::Basis => {
            let positions: Vec<Vector3<f64>> = scene.canonical.iter().map(|g| g.position).collect();
            MotionModel::Basis(BasisTrajectory::stationary(cfg.motion.family, cfg.motion.order, &positions)?)
        }
    })
}

pub fn training_timesteps(cfg: &RunConfig, scene: &Scene) -> Vec<usize> {
    let t = scene.spec.timesteps;
    (0..t).filter(|&k| !cfg.is_held_out(k, t)).collect()
}

/// Which flattened parameters are optimized: positions only.
fn position_mask(model: &MotionModel) -> Vec<bool> {
    match model {
        MotionModel::Table(_) => (0..model.n_params()).map(|j| j % 11 < 3).collect(),
        MotionModel::Basis(_) => vec![true; model.n_params()],
    }
}

/// Regularizer neighbourhoods for one iteration.
struct Groups {
    sets: Vec<Vec<usize>>,
    arap: Vec<Neighborhood>,
}

fn build_groups(cfg: &RunConfig, out: &crate::rasterizer::RenderOutput, positions: &[Vector3<f64>], need_arap: bool) -> Result<Groups> {
    match cfg.grouping {
        Grouping::Ray => {
            let sets: Vec<Vec<usize>> = extract_groups(out, cfg.tau, cfg.pixel_stride)?.into_iter().map(|g| g.members).collect();
            let arap = if need_arap { sets.iter().cloned().map(Neighborhood::Clique).collect() } else { Vec::new() };
            Ok(Groups { sets, arap })
        }
        Grouping::Knn => {
            let knn = knn_groups(positions, cfg.k)?;
            let sets = knn
                .neighbors
                .iter()
                .enumerate()
                .map(|(i, nb)| std::iter::once(i).chain(nb.iter().copied()).collect())
                .collect();
            let arap = if need_arap {
                knn.neighbors.into_iter().enumerate().map(|(anchor, neighbors)| Neighborhood::Anchored { anchor, neighbors }).collect()
            } else {
                Vec::new()
            };
            Ok(Groups { sets, arap })
        }
    }
}

/// Objective and its gradient w.r.t. the flattened model parameters at one view.
fn step(
    cfg: &RunConfig,
    weights: &LossWeights,
    scene: &Scene,
    model: &MotionModel,
    timestep: usize,
    partner_frames: f64,
) -> Result<(LossReport, usize, Vec<f64>)> {
    let last = (scene.spec.timesteps.max(2) - 1) as f64;
    let frame = evaluate_frame(model, &scene.canonical, scene.spec.time(timestep))?;
    let opts = RenderOptions { background: scene.spec.background, retain_fragments: true };
    let out = render(&frame.gaussians, &scene.cameras[timestep], &opts)?;
    let photo = photometric_loss(&out.image, &scene.targets[timestep], weights.lambda_dssim)?;
    let d_frame = render_backward(&out, &photo.grad)?;
    let mut grad = frame_backward(model, &frame, &d_frame)?;

    let n = scene.canonical.len();
    let regularized = weights.lambda_mcr > 0.0 || weights.lambda_sr > 0.0 || weights.lambda_arap > 0.0;
    if !regularized {
        let report = total_objective(&photo, None, None, None, weights, cfg.regularizer, n);
        return Ok((report, 0, grad));
    }
    let partner = evaluate_frame(model, &scene.canonical, partner_frames / last)?;
    let pos_t = frame.positions();
    let pos_t2 = partner.positions();
    let groups = build_groups(cfg, &out, &pos_t, weights.lambda_arap > 0.0)?;
    let mcr: Option<TermResult> =
        (weights.lambda_mcr > 0.0).then(|| mcr_loss(&groups.sets, &pos_t, &pos_t2, weights.epsilon, weights.motion_threshold));
    let sr = if weights.lambda_sr > 0.0 { Some(sr_loss(&groups.sets, &pos_t, &pos_t2, weights.huber_delta)?) } else { None };
    let arap = (weights.lambda_arap > 0.0).then(|| arap_loss(&groups.arap, &pos_t, &pos_t2));
    let report = total_objective(&photo, mcr.as_ref(), sr.as_ref(), arap.as_ref(), weights, cfg.regularizer, n);
    for (acc, g) in grad.iter_mut().zip(position_backward(model, &frame, &report.grad_t)?) {
        *acc += g;
    }
    for (acc, g) in grad.iter_mut().zip(position_backward(model, &partner, &report.grad_t2)?) {
        *acc += g;
    }
    Ok((report, groups.sets.len(), grad))
}

/// First-pass initialization of key `slot` from its predecessors: positions
/// are extrapolated linearly in time, everything else is copied.
fn warm_start(table: &mut DeformationTable, slot: usize) {
    let mut next = table.offsets[slot - 1].clone();
    if slot >= 2 {
        let (t0, t1, t2) = (table.keys[slot - 2], table.keys[slot - 1], table.keys[slot]);
        let ratio = (t2 - t1) / (t1 - t0);
        for (i, o) in next.iter_mut().enumerate() {
            o.position += (table.offsets[slot - 1][i].position - table.offsets[slot - 2][i].position) * ratio;
        }
    }
    table.offsets[slot] = next;
}

/// Runs the optimization and evaluates the result against the scene's ground truth.
///
/// Views are visited in timestep order, one per iteration. During the first
/// pass over a table model, each key is initialized from its predecessors.
/// A non-finite loss or gradient stops training with `diverged` set; the
/// returned state is the last finite one.
pub fn train(cfg: &RunConfig, scene: &Scene, mut on_iteration: impl FnMut(&IterationLog)) -> Result<TrainResult> {
    cfg.validate()?;
    let weights = cfg.effective_weights();
    let train_steps = training_timesteps(cfg, scene);
    if train_steps.is_empty() {
        return Err(Error::InvalidInput("no training timesteps".into()));
    }
    let mut model = initial_model(cfg, scene)?;
    let mask = position_mask(&model);
    let mut params = model.flatten();
    let mut velocity = vec![0.0; params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let last = (scene.spec.timesteps.max(2) - 1) as f64;
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut diverged = false;
    let mut completed = 0;

    for it in 0..cfg.iterations {
        let slot = it % train_steps.len();
        let timestep = train_steps[slot];
        if it == slot && slot > 0 {
            if let MotionModel::Table(table) = &mut model {
                warm_start(table, slot);
                params = model.flatten();
            }
        }
        let (_, partner) = sample_timestep_pair(timestep as f64, weights.temporal_window, last, &mut rng)?;
        let (report, n_groups, grad) = step(cfg, &weights, scene, &model, timestep, partner)?;
        if !report.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            diverged = true;
            break;
        }
        let entry = IterationLog { iteration: it, timestep, partner_time: partner, n_groups, report };
        on_iteration(&entry);
        log.push(entry);
        let mut next = params.clone();
        for j in 0..params.len() {
            if mask[j] {
                velocity[j] = cfg.momentum * velocity[j] + grad[j];
                next[j] -= cfg.learning_rate * velocity[j];
            }
        }
        // values this large overflow to infinity inside squared distances and covariances
        if next.iter().any(|v| !(v.abs() < DIVERGENCE_BOUND)) {
            diverged = true;
            break;
        }
        params = next;
        model.set_flat(&params)?;
        completed = it + 1;
    }

    let spec = &scene.spec;
    let trajectories: Vec<Vec<Vector3<f64>>> = (0..spec.timesteps).map(|k| model.positions(&scene.canonical, spec.time(k))).collect();
    let opts = scene.render_options();
    let renders = (0..spec.timesteps)
        .map(|k| {
            let frame = evaluate_frame(&model, &scene.canonical, spec.time(k))?;
            Ok(render(&frame.gaussians, &scene.cameras[k], &opts)?.image)
        })
        .collect::<Result<Vec<_>>>()?;
    let held: Vec<usize> = (0..spec.timesteps).filter(|&k| cfg.is_held_out(k, spec.timesteps)).collect();
    let psnr_train = mean_psnr(train_steps.iter().map(|&k| (&renders[k], &scene.targets[k])))?;
    let (psnr_heldout, ssim_heldout) = if held.is_empty() {
        (None, None)
    } else {
        let p = mean_psnr(held.iter().map(|&k| (&renders[k], &scene.targets[k])))?;
        let s = held.iter().map(|&k| ssim(&renders[k], &scene.targets[k])).sum::<Result<f64>>()? / held.len() as f64;
        (Some(p), Some(s))
    };
    let gt_positions: Vec<Vector3<f64>> = scene.canonical.iter().map(|g| g.position).collect();
    let metric_groups: Vec<Vec<usize>> = knn_groups(&gt_positions, cfg.metric_group_k)?
        .neighbors
        .into_iter()
        .enumerate()
        .map(|(i, nb)| std::iter::once(i).chain(nb).collect())
        .collect();
    let trajectory = trajectory_error(&trajectories, &scene.trajectories, &metric_groups)?;
    let metrics = TrainMetrics {
        scene: spec.name.clone(),
        regularizer: cfg.regularizer,
        grouping: cfg.grouping,
        iterations: completed,
        diverged,
        final_loss: log.last().map_or(f64::NAN, |l| l.report.total),
        psnr_train,
        psnr_heldout,
        ssim_heldout,
        held_out_timesteps: held,
        trajectory,
        effective_weights: weights,
    };
    let checkpoint = Checkpoint { iteration: completed, canonical: scene.canonical.clone(), model };
    Ok(TrainResult { metrics, log, checkpoint, trajectories, renders })
}
