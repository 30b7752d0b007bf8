//! Motion models turning a canonical Gaussian set into per-time frames:
//! a keyframed offset table (deformation-field form) and per-Gaussian
//! temporal basis trajectories. Time is normalized to `[0, 1]`.

use std::f64::consts::TAU;
use std::io::{Read, Write};

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rasterizer::{flatten_gaussians, unflatten_gaussians, GaussianGradients, PARAMS_PER_GAUSSIAN};
use crate::types::{normalize_quat, Gaussian3D, Quat, MIN_SCALE};

/// Additive per-Gaussian offsets at one key time.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Offset {
    pub position: Vector3<f64>,
    pub rotation: Quat,
    pub scale: Vector3<f64>,
    pub opacity: f64,
}

impl Offset {
    fn lerp(a: &Offset, b: &Offset, w: f64) -> Offset {
        Offset {
            position: a.position * (1.0 - w) + b.position * w,
            rotation: a.rotation * (1.0 - w) + b.rotation * w,
            scale: a.scale * (1.0 - w) + b.scale * w,
            opacity: a.opacity * (1.0 - w) + b.opacity * w,
        }
    }

    fn add_scaled(&mut self, g: &Offset, w: f64) {
        self.position += g.position * w;
        self.rotation += g.rotation * w;
        self.scale += g.scale * w;
        self.opacity += g.opacity * w;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Linear,
    /// Holds the value of the last key at or before `t`.
    Step,
}

/// `G_t = G_c + offsets(t)`, offsets interpolated between key times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationTable {
    pub keys: Vec<f64>,
    pub interpolation: Interpolation,
    /// `offsets[key][gaussian]`.
    pub offsets: Vec<Vec<Offset>>,
}

impl DeformationTable {
    pub fn zeros(keys: Vec<f64>, n_gaussians: usize, interpolation: Interpolation) -> Result<Self> {
        let table = Self { offsets: vec![vec![Offset::default(); n_gaussians]; keys.len()], keys, interpolation };
        table.validate()?;
        Ok(table)
    }

    /// Keys at `0, 1/(n−1), …, 1`.
    pub fn uniform(n_keys: usize, n_gaussians: usize, interpolation: Interpolation) -> Result<Self> {
        if n_keys == 0 {
            return Err(Error::InvalidParameter("need at least one key time".into()));
        }
        let keys = (0..n_keys).map(|k| if n_keys == 1 { 0.0 } else { k as f64 / (n_keys - 1) as f64 }).collect();
        Self::zeros(keys, n_gaussians, interpolation)
    }

    pub fn n_gaussians(&self) -> usize {
        self.offsets.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.keys.is_empty() {
            return Err(Error::InvalidParameter("need at least one key time".into()));
        }
        if self.keys.iter().any(|k| !k.is_finite()) || self.keys.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidParameter("key times must be finite and strictly increasing".into()));
        }
        if self.offsets.len() != self.keys.len() {
            return Err(Error::InvalidParameter("one offset row per key time required".into()));
        }
        let n = self.n_gaussians();
        if self.offsets.iter().any(|row| row.len() != n) {
            return Err(Error::InvalidParameter("offset rows differ in length".into()));
        }
        Ok(())
    }

    /// Bracketing keys and the weight of the upper one.
    fn bracket(&self, t: f64) -> (usize, usize, f64) {
        let last = self.keys.len() - 1;
        let t = t.clamp(self.keys[0], self.keys[last]);
        if last == 0 {
            return (0, 0, 0.0);
        }
        let hi = self.keys.partition_point(|&k| k <= t).clamp(1, last);
        let lo = hi - 1;
        match self.interpolation {
            Interpolation::Step => {
                if t >= self.keys[hi] {
                    (hi, hi, 0.0)
                } else {
                    (lo, lo, 0.0)
                }
            }
            Interpolation::Linear => (lo, hi, (t - self.keys[lo]) / (self.keys[hi] - self.keys[lo])),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisFamily {
    /// `1, t, t², …`
    Polynomial,
    /// `1, sin 2πt, cos 2πt, sin 4πt, cos 4πt, …`
    Fourier,
}

impl BasisFamily {
    pub fn eval(self, order: usize, t: f64) -> Vec<f64> {
        (0..order)
            .map(|l| match self {
                BasisFamily::Polynomial => t.powi(l as i32),
                BasisFamily::Fourier => {
                    if l == 0 {
                        1.0
                    } else {
                        let freq = TAU * l.div_ceil(2) as f64;
                        if l % 2 == 1 {
                            (freq * t).sin()
                        } else {
                            (freq * t).cos()
                        }
                    }
                }
            })
            .collect()
    }
}

/// `μ_i(t) = Σ_ℓ a_{i,ℓ} φ_ℓ(t)`; all other attributes come from the canonical set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisTrajectory {
    pub family: BasisFamily,
    pub order: usize,
    /// `coefficients[gaussian][ℓ]`.
    pub coefficients: Vec<Vec<Vector3<f64>>>,
}

impl BasisTrajectory {
    /// Constant trajectories sitting at the given positions.
    pub fn stationary(family: BasisFamily, order: usize, positions: &[Vector3<f64>]) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidParameter("basis order must be at least 1".into()));
        }
        let coefficients = positions
            .iter()
            .map(|p| {
                let mut c = vec![Vector3::zeros(); order];
                c[0] = *p;
                c
            })
            .collect();
        Ok(Self { family, order, coefficients })
    }

    /// Least-squares fit to `samples[time][gaussian]` observed at `times`.
    pub fn fit(family: BasisFamily, order: usize, times: &[f64], samples: &[Vec<Vector3<f64>>]) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidParameter("basis order must be at least 1".into()));
        }
        if times.len() != samples.len() || times.len() < order {
            return Err(Error::InvalidInput(format!("need at least {order} samples per trajectory, got {}", times.len())));
        }
        let n = samples[0].len();
        if samples.iter().any(|s| s.len() != n) {
            return Err(Error::InvalidInput("sample rows differ in length".into()));
        }
        let design = DMatrix::from_fn(times.len(), order, |r, c| family.eval(order, times[r])[c]);
        let rhs = DMatrix::from_fn(times.len(), 3 * n, |r, c| samples[r][c / 3][c % 3]);
        let sol = design.svd(true, true).solve(&rhs, 1e-14).map_err(|e| Error::NumericalDegeneracy(e.to_string()))?;
        let coefficients = (0..n).map(|i| (0..order).map(|l| Vector3::new(sol[(l, 3 * i)], sol[(l, 3 * i + 1)], sol[(l, 3 * i + 2)])).collect()).collect();
        Ok(Self { family, order, coefficients })
    }

    pub fn position(&self, i: usize, t: f64) -> Vector3<f64> {
        let phi = self.family.eval(self.order, t);
        self.coefficients[i].iter().zip(&phi).map(|(a, p)| a * *p).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MotionModel {
    Table(DeformationTable),
    Basis(BasisTrajectory),
}

impl MotionModel {
    pub fn n_gaussians(&self) -> usize {
        match self {
            MotionModel::Table(t) => t.n_gaussians(),
            MotionModel::Basis(b) => b.coefficients.len(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.flatten().len()
    }

    /// Parameters in a fixed order (table: per key, per Gaussian
    /// `Δμ, Δq, Δs, Δo`; basis: per Gaussian, per ℓ, `a`).
    pub fn flatten(&self) -> Vec<f64> {
        match self {
            MotionModel::Table(t) => flatten_offsets(&t.offsets),
            MotionModel::Basis(b) => b.coefficients.iter().flatten().flat_map(|a| a.iter().copied()).collect(),
        }
    }

    pub fn set_flat(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_params() {
            return Err(Error::InvalidInput(format!("expected {} parameters, got {}", self.n_params(), x.len())));
        }
        match self {
            MotionModel::Table(t) => {
                for (o, c) in t.offsets.iter_mut().flatten().zip(x.chunks(11)) {
                    o.position = Vector3::new(c[0], c[1], c[2]);
                    o.rotation = Quat::new(c[3], c[4], c[5], c[6]);
                    o.scale = Vector3::new(c[7], c[8], c[9]);
                    o.opacity = c[10];
                }
            }
            MotionModel::Basis(b) => {
                for (a, c) in b.coefficients.iter_mut().flatten().zip(x.chunks(3)) {
                    *a = Vector3::new(c[0], c[1], c[2]);
                }
            }
        }
        Ok(())
    }

    /// Positions only; cheaper than a full [`evaluate_frame`].
    pub fn positions(&self, canonical: &[Gaussian3D], t: f64) -> Vec<Vector3<f64>> {
        match self {
            MotionModel::Table(table) => {
                let (lo, hi, w) = table.bracket(t);
                canonical
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g.position + (table.offsets[lo][i].position * (1.0 - w) + table.offsets[hi][i].position * w))
                    .collect()
            }
            MotionModel::Basis(b) => {
                let phi = b.family.eval(b.order, t);
                b.coefficients.iter().map(|c| c.iter().zip(&phi).map(|(a, p)| a * *p).sum()).collect()
            }
        }
    }
}

fn flatten_offsets(offsets: &[Vec<Offset>]) -> Vec<f64> {
    offsets
        .iter()
        .flatten()
        .flat_map(|o| o.position.iter().chain(o.rotation.iter()).chain(o.scale.iter()).copied().chain([o.opacity]))
        .collect()
}

/// What [`frame_backward`] needs from the forward evaluation.
#[derive(Debug, Clone, PartialEq)]
enum FrameContext {
    Table { lo: usize, hi: usize, weight: f64, raw_rotation: Vec<Quat>, scale_active: Vec<[bool; 3]>, opacity_active: Vec<bool> },
    Basis { phi: Vec<f64> },
}

/// Gaussians realized at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameState {
    pub t: f64,
    pub gaussians: Vec<Gaussian3D>,
    context: Option<FrameContext>,
}

impl FrameState {
    /// A frame built directly from Gaussians (no model behind it).
    pub fn from_gaussians(t: f64, gaussians: Vec<Gaussian3D>) -> Self {
        Self { t, gaussians, context: None }
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.gaussians.iter().map(|g| g.position).collect()
    }

    pub fn detach(mut self) -> Self {
        self.context = None;
        self
    }
}

/// Realizes the model at time `t` (clamped to the model's domain).
pub fn evaluate_frame(model: &MotionModel, canonical: &[Gaussian3D], t: f64) -> Result<FrameState> {
    if model.n_gaussians() != canonical.len() {
        return Err(Error::InvalidInput(format!(
            "model has {} Gaussians, canonical set has {}",
            model.n_gaussians(),
            canonical.len()
        )));
    }
    if !t.is_finite() {
        return Err(Error::InvalidParameter(format!("non-finite time {t}")));
    }
    let t = t.clamp(0.0, 1.0);
    match model {
        MotionModel::Table(table) => {
            let (lo, hi, w) = table.bracket(t);
            let n = canonical.len();
            let (mut raw_rotation, mut scale_active, mut opacity_active) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            let gaussians = canonical
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    let off = Offset::lerp(&table.offsets[lo][i], &table.offsets[hi][i], w);
                    let raw_q = g.rotation + off.rotation;
                    let raw_s = g.scale + off.scale;
                    let raw_o = g.opacity + off.opacity;
                    raw_rotation.push(raw_q);
                    scale_active.push([raw_s[0] > MIN_SCALE, raw_s[1] > MIN_SCALE, raw_s[2] > MIN_SCALE]);
                    opacity_active.push(raw_o > 0.0);
                    Gaussian3D {
                        position: g.position + off.position,
                        scale: raw_s.map(|s| s.max(MIN_SCALE)),
                        rotation: normalize_quat(&raw_q),
                        opacity: raw_o.max(0.0),
                        color: g.color,
                    }
                })
                .collect();
            Ok(FrameState { t, gaussians, context: Some(FrameContext::Table { lo, hi, weight: w, raw_rotation, scale_active, opacity_active }) })
        }
        MotionModel::Basis(b) => {
            let phi = b.family.eval(b.order, t);
            let gaussians = canonical
                .iter()
                .zip(&b.coefficients)
                .map(|(g, c)| Gaussian3D { position: c.iter().zip(&phi).map(|(a, p)| a * *p).sum(), ..*g })
                .collect();
            Ok(FrameState { t, gaussians, context: Some(FrameContext::Basis { phi }) })
        }
    }
}

/// Gradients w.r.t. the model parameters, in [`MotionModel::flatten`] order.
pub fn frame_backward(model: &MotionModel, frame: &FrameState, d_frame: &GaussianGradients) -> Result<Vec<f64>> {
    let ctx = frame.context.as_ref().ok_or_else(|| Error::ContractViolation("frame was evaluated without retained context".into()))?;
    if d_frame.len() != model.n_gaussians() {
        return Err(Error::InvalidInput("gradient and model sizes differ".into()));
    }
    match (model, ctx) {
        (MotionModel::Table(table), FrameContext::Table { lo, hi, weight, raw_rotation, scale_active, opacity_active }) => {
            let n = table.n_gaussians();
            let mut grads = vec![vec![Offset::default(); n]; table.keys.len()];
            for i in 0..n {
                let raw = raw_rotation[i];
                let norm = raw.norm();
                let d_rot = if norm > 0.0 {
                    let u = raw / norm;
                    let g = d_frame.rotation[i];
                    (g - u * u.dot(&g)) / norm
                } else {
                    Quat::zeros()
                };
                let mut d_scale = d_frame.scale[i];
                for k in 0..3 {
                    if !scale_active[i][k] {
                        d_scale[k] = 0.0;
                    }
                }
                let g = Offset {
                    position: d_frame.position[i],
                    rotation: d_rot,
                    scale: d_scale,
                    opacity: if opacity_active[i] { d_frame.opacity[i] } else { 0.0 },
                };
                grads[*lo][i].add_scaled(&g, 1.0 - weight);
                grads[*hi][i].add_scaled(&g, *weight);
            }
            Ok(flatten_offsets(&grads))
        }
        (MotionModel::Basis(b), FrameContext::Basis { phi }) => {
            let mut out = Vec::with_capacity(b.coefficients.len() * b.order * 3);
            for g in &d_frame.position {
                for p in phi {
                    out.extend((g * *p).iter());
                }
            }
            Ok(out)
        }
        _ => Err(Error::ContractViolation("frame was produced by a different kind of model".into())),
    }
}

/// Position-only backward: `dL/dμ` per Gaussian to model parameters.
pub fn position_backward(model: &MotionModel, frame: &FrameState, d_positions: &[Vector3<f64>]) -> Result<Vec<f64>> {
    let mut g = GaussianGradients::zeros(d_positions.len());
    g.position.copy_from_slice(d_positions);
    frame_backward(model, frame, &g)
}

const MAGIC: &[u8; 5] = b"RRGS1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    iteration: usize,
    n_gaussians: usize,
    canonical_values: usize,
    /// Model description with its numeric arrays emptied; values live in the payload.
    model: MotionModel,
    model_values: usize,
}

/// Canonical set plus motion model, as saved to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub canonical: Vec<Gaussian3D>,
    pub model: MotionModel,
}

impl Checkpoint {
    /// `RRGS1`, u32 LE header length, JSON header, then float32 LE values
    /// (canonical Gaussians followed by model parameters).
    pub fn write<W: Write>(&self, mut sink: W) -> Result<()> {
        let canonical = flatten_gaussians(&self.canonical);
        let params = self.model.flatten();
        let mut skeleton = self.model.clone();
        match &mut skeleton {
            MotionModel::Table(t) => t.offsets.iter_mut().for_each(Vec::clear),
            MotionModel::Basis(b) => b.coefficients.iter_mut().for_each(Vec::clear),
        }
        let header = CheckpointHeader {
            format: "float32-le".into(),
            iteration: self.iteration,
            n_gaussians: self.canonical.len(),
            canonical_values: canonical.len(),
            model: skeleton,
            model_values: params.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len()).map_err(|_| Error::InvalidInput("checkpoint header too large".into()))?;
        sink.write_all(MAGIC)?;
        sink.write_all(&len.to_le_bytes())?;
        sink.write_all(&json)?;
        for v in canonical.iter().chain(&params) {
            sink.write_all(&(*v as f32).to_le_bytes())?;
        }
        sink.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut source: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        source.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::InvalidInput("not an RRGS1 checkpoint".into()));
        }
        let mut len = [0u8; 4];
        source.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        source.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        if header.format != "float32-le" || header.canonical_values != header.n_gaussians * PARAMS_PER_GAUSSIAN {
            return Err(Error::InvalidInput("unsupported checkpoint layout".into()));
        }
        let mut payload = vec![0u8; 4 * (header.canonical_values + header.model_values)];
        source.read_exact(&mut payload)?;
        let values: Vec<f64> = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        let canonical = unflatten_gaussians(&values[..header.canonical_values]);
        let mut model = header.model;
        match &mut model {
            MotionModel::Table(t) => t.offsets.iter_mut().for_each(|row| *row = vec![Offset::default(); header.n_gaussians]),
            MotionModel::Basis(b) => {
                let order = b.order;
                b.coefficients.iter_mut().for_each(|row| *row = vec![Vector3::zeros(); order]);
            }
        }
        model.set_flat(&values[header.canonical_values..])?;
        Ok(Self { iteration: header.iteration, canonical, model })
    }
}
